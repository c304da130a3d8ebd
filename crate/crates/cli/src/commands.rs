//! One function per subcommand. Every command is a pure function of
//! (input files, effective config, seed): artifacts in the output
//! directory are byte-identical across reruns, with wall-clock time
//! confined to the single timestamp line in run-metadata.txt.

use std::fmt::Write as _;
use std::path::Path;

use crr_core::aspect_bank::{build_bank, SentimentLexicon};
use crr_core::augment::{augment_dataset, AugmentConfig, PairedDataset};
use crr_core::causal_sim::{self, CausalSpec};
use crr_core::corpus::{self, Dataset, DatasetKind};
use crr_core::eval::{self, PredictionRecord};
use crr_core::model::{Checkpoint, ModelParams, Vocab};
use crr_core::saliency::{self, RenderMode, SaliencyMap};
use crr_core::trainer::{self, Regime, TrainConfig};

use crate::config::{require_path, RunConfig};
use crate::CliError;

fn write_file(out_dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::write(out_dir.join(name), content)
        .map_err(|e| CliError::Data(format!("writing {name}: {e}")))
}

fn write_json<T: serde::Serialize>(out_dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {name}: {e}")))?;
    write_file(out_dir, name, &format!("{body}\n"))
}

/// Effective config plus the one line where wall-clock time may appear.
pub fn write_run_metadata(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Config(format!("cannot create out dir {}: {e}", cfg.out.display())))?;
    write_file(&cfg.out, "effective-config.toml", &cfg.to_toml()?)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = format!("command={command}\nseed={}\ntimestamp_unix={stamp}\n", cfg.seed);
    write_file(&cfg.out, "run-metadata.txt", &meta)
}

fn load_data(path: &Path, kind: DatasetKind, what: &str) -> Result<Dataset, CliError> {
    require_path(path, what)?;
    corpus::load_dataset(path, kind).map_err(|e| CliError::Data(format!("{what}: {e}")))
}

fn load_lexicon(path: &Path) -> Result<SentimentLexicon, CliError> {
    if path.as_os_str().is_empty() {
        return Ok(SentimentLexicon::bundled());
    }
    require_path(path, "lexicon")?;
    SentimentLexicon::load(path).map_err(|e| CliError::Data(format!("lexicon: {e}")))
}

fn load_model(
    checkpoint: &Path,
    vocab: &Path,
) -> Result<(ModelParams<f64>, Vocab), CliError> {
    require_path(checkpoint, "checkpoint")?;
    require_path(vocab, "vocab")?;
    let ck: Checkpoint = serde_json::from_str(
        &std::fs::read_to_string(checkpoint).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?,
    )
    .map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
    let params = ModelParams::from_checkpoint(&ck)
        .map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
    let vocab: Vocab = serde_json::from_str(
        &std::fs::read_to_string(vocab).map_err(|e| CliError::Data(format!("vocab: {e}")))?,
    )
    .map_err(|e| CliError::Data(format!("vocab: {e}")))?;
    Ok((params, vocab))
}

// ------------------------------------------------------------------ augment

#[derive(serde::Serialize)]
struct AugmentAudit {
    pairs: usize,
    identity_fallbacks: usize,
    front: usize,
    rear: usize,
    bank_phrases: usize,
}

pub fn cmd_augment(cfg: &RunConfig) -> Result<(), CliError> {
    let a = &cfg.augment;
    let data = load_data(&a.data, DatasetKind::Original, "augment.data")?;
    let lex = load_lexicon(&a.lexicon)?;
    if a.min_phrases < 1 || a.max_phrases < a.min_phrases || a.max_phrases > 3 {
        return Err(CliError::Config(format!(
            "phrase bounds must satisfy 1 <= min <= max <= 3, got {}..{}",
            a.min_phrases, a.max_phrases
        )));
    }
    let bank = build_bank(&data, &lex, a.window).map_err(|e| CliError::Data(e.to_string()))?;
    let aug_cfg = AugmentConfig {
        min_phrases: a.min_phrases,
        max_phrases: a.max_phrases,
        front_probability: a.front_probability,
        position_policy: a.position_policy,
        seed: cfg.seed,
        ..AugmentConfig::default()
    };
    let paired = augment_dataset(&data, &bank, &aug_cfg).map_err(|e| CliError::Data(e.to_string()))?;

    bank.save_jsonl(&cfg.out.join("bank.jsonl")).map_err(|e| CliError::Data(e.to_string()))?;
    paired
        .save_jsonl(&cfg.out.join("augmented.jsonl"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let audit = AugmentAudit {
        pairs: paired.len(),
        identity_fallbacks: paired.identity_count(),
        front: paired.front_count(),
        rear: paired.rear_count(),
        bank_phrases: bank.len(),
    };
    write_json(&cfg.out, "audit.json", &audit)?;
    println!(
        "augment: {} pairs ({} identity, {} front, {} rear) -> {}",
        audit.pairs, audit.identity_fallbacks, audit.front, audit.rear, cfg.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- train

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let t = &cfg.train;
    let full = load_data(&t.data, DatasetKind::Original, "train.data")?;
    let (train_split, dev) = corpus::split_train_dev(&full, t.dev_fraction, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;

    // The baseline regime trains on originals only and never reads pairs.
    let pairs = if t.regime == Regime::Baseline {
        causal_sim::identity_pairs(&train_split)
    } else {
        require_path(&t.pairs, "train.pairs")?;
        let all = PairedDataset::load_jsonl(&t.pairs).map_err(|e| CliError::Data(e.to_string()))?;
        let keep: std::collections::HashSet<&str> =
            train_split.instances.iter().map(|i| i.id.as_str()).collect();
        let pairs = PairedDataset {
            pairs: all.pairs.into_iter().filter(|(o, _)| keep.contains(o.id.as_str())).collect(),
        };
        if pairs.len() != train_split.instances.len() {
            return Err(CliError::Data(format!(
                "pairs file covers {} of {} training instances",
                pairs.len(),
                train_split.instances.len()
            )));
        }
        pairs
    };

    let train_cfg = TrainConfig::<f64> {
        regime: t.regime,
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        weight_decay: t.weight_decay,
        alpha: t.alpha,
        divergence: t.divergence,
        freeze_original_in_div: t.freeze_original_in_div,
        alpha_grid: t.alpha_grid.clone(),
        lr_grid: t.lr_grid.clone(),
        seed: cfg.seed,
        dev_metric: t.dev_metric,
        dropout: t.dropout,
        warmup_fraction: t.warmup_fraction,
    };
    let vocab = Vocab::build(&train_split);
    let mut init_rng = crr_core::seeding::stream(cfg.seed, "init");
    let init: ModelParams<f64> =
        ModelParams::init(vocab.len(), t.embedding_dim, t.hidden_dim, &mut init_rng);

    let (params, report) = if t.grid {
        let result = trainer::grid_search(&init, &vocab, &pairs, &dev, &train_cfg)?;
        let mut grid_csv = String::from("alpha,learning_rate,dev_metric,best_epoch\n");
        for c in &result.cells {
            writeln!(grid_csv, "{},{},{},{}", c.alpha, c.learning_rate, c.dev_metric, c.best_epoch)
                .unwrap();
        }
        write_file(&cfg.out, "grid.csv", &grid_csv)?;
        (result.best_params, result.best_report)
    } else {
        trainer::train(init, &vocab, &pairs, &dev, &train_cfg)?
    };

    write_json(&cfg.out, "checkpoint.json", &params.to_checkpoint())?;
    write_json(&cfg.out, "vocab.json", &vocab)?;
    write_file(&cfg.out, "train_report.csv", &report.to_csv())?;
    write_json(&cfg.out, "train_report.json", &report)?;
    println!(
        "train: {:?} regime, best epoch {} (dev {:.4}, alpha {}, lr {}) -> {}",
        t.regime,
        report.best_epoch,
        report.best_dev,
        report.selected_alpha,
        report.selected_lr,
        cfg.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- eval

fn predict_records(
    params: &ModelParams<f64>,
    vocab: &Vocab,
    data: &Dataset,
) -> Result<Vec<PredictionRecord>, CliError> {
    data.instances
        .iter()
        .chain(data.variants.iter().map(|v| &v.instance))
        .map(|i| {
            let predicted = crr_core::model::predict(params, vocab, i)
                .map_err(|e| CliError::Numeric(format!("prediction for {}: {e}", i.id)))?;
            Ok(PredictionRecord { id: i.id.clone(), gold: i.polarity, predicted })
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let e = &cfg.eval;
    let kind = if e.arts { DatasetKind::Arts } else { DatasetKind::Original };
    let data = load_data(&e.data, kind, "eval.data")?;
    let (params, vocab) = load_model(&e.checkpoint, &e.vocab)?;
    let records = predict_records(&params, &vocab, &data)?;
    let groups = corpus::group_variants(&data).map_err(|err| CliError::Data(err.to_string()))?;

    let metrics = eval::metrics_report(&groups, &records)
        .map_err(|err| CliError::Data(err.to_string()))?;
    write_json(&cfg.out, "metrics.json", &metrics)?;

    let mut predictions = String::from("id,gold,predicted\n");
    for r in &records {
        writeln!(predictions, "{},{},{}", r.id, r.gold, r.predicted).unwrap();
    }
    write_file(&cfg.out, "predictions.csv", &predictions)?;

    let mut summary = format!(
        "accuracy {:.4}  macro-f1 {:.4}  n(neg/neu/pos) {}/{}/{}\n",
        metrics.accuracy, metrics.macro_f1, metrics.n[0], metrics.n[1], metrics.n[2]
    );
    match metrics.ars {
        Some(ars) => {
            writeln!(summary, "ars {ars:.4}").unwrap();
            let subset = eval::subset_analysis(&groups, &records)
                .map_err(|err| CliError::Data(err.to_string()))?;
            write_json(&cfg.out, "subset.json", &subset)?;
            write_file(&cfg.out, "subset.txt", &eval::render_subset_table(&subset))?;
        }
        None => writeln!(summary, "ars omitted: dataset carries no variants").unwrap(),
    }
    write_file(&cfg.out, "metrics.txt", &summary)?;
    print!("eval: {summary}");
    Ok(())
}

// ----------------------------------------------------------------- simulate

#[derive(serde::Serialize)]
struct RegimeSummary {
    regime: Regime,
    iid_accuracy: f64,
    adversarial_accuracy: f64,
    invariance_gap: crr_core::causal_sim::InvarianceGap,
    best_epoch: usize,
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.simulate;
    if s.regimes.is_empty() {
        return Err(CliError::Config("simulate.regimes must be non-empty".into()));
    }
    let spec = CausalSpec { rho: s.rho, seed: cfg.seed, ..CausalSpec::default() };
    let bench = causal_sim::make_benchmark(&spec, s.train_size, s.dev_size, s.test_size)?;

    for (name, d) in [
        ("train", &bench.train),
        ("dev", &bench.dev),
        ("test_iid", &bench.test_iid),
        ("test_adversarial", &bench.test_adversarial),
    ] {
        corpus::save_dataset(&d.dataset, &cfg.out.join(format!("{name}.jsonl")))
            .map_err(|e| CliError::Data(e.to_string()))?;
        d.save_annotations(&cfg.out.join(format!("{name}.annotations.jsonl")))?;
    }

    let proto = s.protocol();
    let (vocab, init) = causal_sim::pretrain(&bench, &proto, cfg.seed)?;
    let mut summaries = Vec::new();
    let mut crr_run = None;
    for &regime in &s.regimes {
        let run = causal_sim::finetune(
            &bench, &vocab, &init, regime, s.alpha, s.divergence, cfg.seed, &proto,
        )?;
        write_file(
            &cfg.out,
            &format!("train_report_{regime:?}.csv").to_lowercase(),
            &run.report.to_csv(),
        )?;
        summaries.push(RegimeSummary {
            regime,
            iid_accuracy: run.iid_accuracy,
            adversarial_accuracy: run.adversarial_accuracy,
            invariance_gap: run.gap.clone(),
            best_epoch: run.report.best_epoch,
        });
        if regime == Regime::Crr {
            crr_run = Some(run);
        }
    }
    write_json(&cfg.out, "simulation.json", &summaries)?;

    // Transfer verification on the most invariant model we trained
    // (CRR when requested, otherwise the last regime run).
    if let Some(run) = crr_run {
        let ivs = causal_sim::all_interventions(&bench.spec);
        let family = causal_sim::TaskFamily::default_family();
        let report = causal_sim::verify_transfer(
            &run.params,
            &vocab,
            &bench.test_iid,
            &ivs,
            &family,
            1e-12,
        )?;
        write_json(&cfg.out, "transfer.json", &report)?;
        write_json(&cfg.out, "checkpoint.json", &run.params.to_checkpoint())?;
        write_json(&cfg.out, "vocab.json", &vocab)?;
    }

    for r in &summaries {
        println!(
            "simulate: {:?} iid {:.4} adversarial {:.4} gap {:.4}",
            r.regime, r.iid_accuracy, r.adversarial_accuracy, r.invariance_gap.mean
        );
    }
    Ok(())
}

// ----------------------------------------------------------------- saliency

pub fn cmd_saliency(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.saliency;
    let data = load_data(&s.data, DatasetKind::Original, "saliency.data")?;
    let (params, vocab) = load_model(&s.checkpoint, &s.vocab)?;

    let instances: Vec<&crr_core::corpus::Instance> = if s.ids.is_empty() {
        data.instances.iter().collect()
    } else {
        s.ids
            .iter()
            .map(|id| {
                data.instances
                    .iter()
                    .find(|i| &i.id == id)
                    .ok_or_else(|| CliError::Data(format!("unknown instance id {id}")))
            })
            .collect::<Result<_, _>>()?
    };

    let maps: Vec<SaliencyMap> = instances
        .iter()
        .map(|i| {
            saliency::token_saliency(&params, &vocab, i, s.target)
                .map_err(|e| CliError::Numeric(format!("saliency for {}: {e}", i.id)))
        })
        .collect::<Result<_, _>>()?;

    match s.mode {
        RenderMode::Html => {
            write_file(&cfg.out, "saliency.html", &saliency::html_report(&maps))?;
            println!("saliency: {} sections -> {}", maps.len(), cfg.out.join("saliency.html").display());
        }
        RenderMode::Ansi => {
            let mut body = String::new();
            for m in &maps {
                writeln!(body, "{}: {}", m.id, saliency::render(m, RenderMode::Ansi)).unwrap();
            }
            write_file(&cfg.out, "saliency.txt", &body)?;
            print!("{body}");
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- report

pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    let r = &cfg.report;
    if r.inputs.is_empty() {
        return Err(CliError::Config("report.inputs must list at least one metrics.json".into()));
    }
    if !r.labels.is_empty() && r.labels.len() != r.inputs.len() {
        return Err(CliError::Config("report.labels must match report.inputs in length".into()));
    }
    let mut table = String::from(format!(
        "{:<24} {:>10} {:>10} {:>10}\n",
        "run", "accuracy", "macro-f1", "ars"
    ));
    for (i, path) in r.inputs.iter().enumerate() {
        require_path(path, "report input")?;
        let metrics: eval::MetricsReport = serde_json::from_str(
            &std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        )
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let label = r
            .labels
            .get(i)
            .cloned()
            .or_else(|| {
                path.parent()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
            })
            .unwrap_or_else(|| format!("run-{i}"));
        let ars = metrics.ars.map_or("-".to_string(), |a| format!("{a:.4}"));
        writeln!(
            table,
            "{label:<24} {:>10.4} {:>10.4} {ars:>10}",
            metrics.accuracy, metrics.macro_f1
        )
        .unwrap();
    }
    write_file(&cfg.out, "report.txt", &table)?;
    print!("{table}");
    Ok(())
}
