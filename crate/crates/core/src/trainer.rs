//! Mini-batch training for three regimes: baseline cross-entropy,
//! adversarial training (CE on originals plus augmented), and CRR (paired
//! CE plus weighted divergence). Decoupled-weight-decay adaptive-moment
//! optimizer with linear warm-up, dev-based model selection, grid search,
//! and per-epoch divergence reporting.

use serde::{Deserialize, Serialize};

use crate::augment::PairedDataset;
use crate::corpus::{Dataset, Instance, Polarity};
use crate::eval::{self, PredictionRecord};
use crate::model::{
    self, aspect_token_range, forward, forward_dropout, ModelError, ModelParams, NUM_CLASSES,
};
use crate::objective::{crr_loss, crr_loss_gradient, DivergenceKind, LossConfig};
use crate::seeding;
use crate::Scalar;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// CE on originals only.
    Baseline,
    /// CE on originals and augmented instances (alpha = 0).
    Adversarial,
    /// Paired CE plus weighted divergence.
    Crr,
    /// Plain CE on the union of originals and counterfactual (RevTgt)
    /// augmentations.
    Cad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevMetric {
    Accuracy,
    MacroF1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig<F> {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: F,
    pub weight_decay: F,
    pub alpha: F,
    pub divergence: DivergenceKind,
    pub freeze_original_in_div: bool,
    pub alpha_grid: Vec<F>,
    pub lr_grid: Vec<F>,
    pub seed: u64,
    pub dev_metric: DevMetric,
    /// Dropout rate on the pooled vector during training.
    pub dropout: f64,
    /// Warm-up length as a fraction of total optimizer steps.
    pub warmup_fraction: f64,
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        let f = |v: f64| F::from_f64(v).unwrap();
        TrainConfig {
            regime: Regime::Crr,
            epochs: 20,
            batch_size: 64,
            learning_rate: f(3e-3),
            weight_decay: f(1e-4),
            alpha: f(3.0),
            divergence: DivergenceKind::KlForward,
            freeze_original_in_div: false,
            alpha_grid: vec![f(1.0), f(3.0), f(5.0)],
            lr_grid: vec![f(3e-3), f(1e-3), f(3e-4)],
            seed: 0,
            dev_metric: DevMetric::Accuracy,
            dropout: 0.3,
            warmup_fraction: 0.05,
        }
    }
}

impl<F: Scalar> TrainConfig<F> {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.epochs > 40 {
            return Err(TrainError::Precondition(format!(
                "epochs must be in 1..=40, got {}",
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Precondition("batch_size must be >= 1".into()));
        }
        if self.alpha_grid.is_empty() || self.lr_grid.is_empty() {
            return Err(TrainError::Precondition("grids must be non-empty".into()));
        }
        if self.alpha < F::zero() {
            return Err(TrainError::Precondition("alpha must be non-negative".into()));
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig<F> {
        let alpha = match self.regime {
            Regime::Crr => self.alpha,
            _ => F::zero(),
        };
        LossConfig {
            alpha,
            divergence: self.divergence,
            freeze_original_in_div: self.freeze_original_in_div,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("metric error: {0}")]
    Metric(#[from] eval::EvalError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NumericFailure { epoch: usize, batch: usize },
    #[error("empty dev set")]
    EmptyDev,
    #[error("empty training data")]
    EmptyTrain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_div: f64,
    /// Divergence summed over the full training set at the end of the
    /// epoch, in nats, computed in eval mode.
    pub summed_div: f64,
    pub dev_metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub selected_alpha: f64,
    pub selected_lr: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_ce,mean_div,summed_div,dev_metric\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                e.epoch, e.mean_ce, e.mean_div, e.summed_div, e.dev_metric
            ));
        }
        out
    }
}

/// Decoupled weight-decay adaptive-moment optimizer with linear warm-up.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    pub warmup_steps: u64,
    pub step_count: u64,
    first_moment: ModelParams<F>,
    second_moment: ModelParams<F>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(
        template: &ModelParams<F>,
        learning_rate: F,
        weight_decay: F,
        warmup_steps: u64,
    ) -> Optimizer<F> {
        let f = |v: f64| F::from_f64(v).unwrap();
        Optimizer {
            learning_rate,
            beta1: f(0.9),
            beta2: f(0.999),
            eps: f(1e-8),
            weight_decay,
            warmup_steps,
            step_count: 0,
            first_moment: template.zeros_like(),
            second_moment: template.zeros_like(),
        }
    }

    /// Effective learning rate for the update about to be applied: grows
    /// linearly from 0 over the warm-up, so step 0 leaves params unchanged.
    pub fn effective_lr(&self) -> F {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let ratio = (self.step_count as f64 / self.warmup_steps as f64).min(1.0);
        self.learning_rate * F::from_f64(ratio).unwrap()
    }

    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>) {
        let lr = self.effective_lr();
        self.step_count += 1;
        let t = F::from_u64(self.step_count).unwrap();
        let one = F::one();
        let bias1 = one - self.beta1.powf(t);
        let bias2 = one - self.beta2.powf(t);
        let mut m = self.first_moment.tensors_mut();
        let mut v = self.second_moment.tensors_mut();
        let mut p = params.tensors_mut();
        let g = grads.tensors();
        for i in 0..p.len() {
            let (_, pd) = &mut p[i];
            let (_, md) = &mut m[i];
            let (_, vd) = &mut v[i];
            let gd = g[i].1;
            debug_assert_eq!(pd.len(), gd.len());
            for k in 0..pd.len() {
                md[k] = self.beta1 * md[k] + (one - self.beta1) * gd[k];
                vd[k] = self.beta2 * vd[k] + (one - self.beta2) * gd[k] * gd[k];
                let m_hat = md[k] / bias1;
                let v_hat = vd[k] / bias2;
                pd[k] = pd[k] - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pd[k]);
            }
        }
    }
}

/// Instance pre-encoded against a vocabulary.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub aspect_range: (usize, usize),
    pub label: Polarity,
}

pub fn encode_instance(vocab: &model::Vocab, inst: &Instance) -> Result<Encoded, TrainError> {
    let tokens = model::tokenize(&inst.text);
    let ids = vocab.encode(&tokens);
    let aspect_range = aspect_token_range(&inst.text, inst.aspect_span)
        .ok_or(ModelError::BadAspectRange(0, 0, ids.len()))?;
    Ok(Encoded { ids, aspect_range, label: inst.polarity })
}

fn encode_pairs(
    vocab: &model::Vocab,
    pairs: &PairedDataset,
) -> Result<Vec<(Encoded, Encoded)>, TrainError> {
    pairs
        .pairs
        .iter()
        .map(|(o, a)| Ok((encode_instance(vocab, o)?, encode_instance(vocab, &a.instance)?)))
        .collect()
}

fn dev_metric_value<F: Scalar>(
    params: &ModelParams<F>,
    dev: &[(String, Encoded)],
    metric: DevMetric,
) -> Result<f64, TrainError> {
    let records: Vec<PredictionRecord> = dev
        .iter()
        .map(|(id, e)| {
            let (dist, _) = forward(params, &e.ids, e.aspect_range)?;
            Ok(PredictionRecord { id: id.clone(), gold: e.label, predicted: dist.argmax() })
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(match metric {
        DevMetric::Accuracy => eval::accuracy(&records)?,
        DevMetric::MacroF1 => eval::macro_f1(&records)?,
    })
}

/// Divergence summed over the full training set in eval mode.
fn summed_divergence<F: Scalar>(
    params: &ModelParams<F>,
    pairs: &[(Encoded, Encoded)],
    kind: DivergenceKind,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for (o, a) in pairs {
        let (po, _) = forward(params, &o.ids, o.aspect_range)?;
        let (pa, _) = forward(params, &a.ids, a.aspect_range)?;
        sum += crate::objective::divergence(kind, &po, &pa).to_f64().unwrap();
    }
    Ok(sum)
}

/// Accumulate the gradient of one pair into `acc`; returns (ce, div) in f64.
fn pair_gradient<F: Scalar>(
    params: &ModelParams<F>,
    acc: &mut ModelParams<F>,
    orig: &Encoded,
    aug: &Encoded,
    regime: Regime,
    loss_cfg: &LossConfig<F>,
    dropout: f64,
    rng: &mut dyn rand::RngCore,
) -> Result<(f64, f64), TrainError> {
    let add = |acc: &mut ModelParams<F>, g: &ModelParams<F>| {
        let mut a = acc.tensors_mut();
        let gt = g.tensors();
        for i in 0..a.len() {
            for (av, gv) in a[i].1.iter_mut().zip(gt[i].1) {
                *av = *av + *gv;
            }
        }
    };
    fn dropout_arg(
        dropout: f64,
        rng: &mut dyn rand::RngCore,
    ) -> Option<(f64, &mut dyn rand::RngCore)> {
        if dropout > 0.0 {
            Some((dropout, rng))
        } else {
            None
        }
    }

    if regime == Regime::Baseline {
        let (dist, cache) =
            forward_dropout(params, &orig.ids, orig.aspect_range, dropout_arg(dropout, rng))?;
        let mut upstream = [F::zero(); NUM_CLASSES];
        for (j, u) in upstream.iter_mut().enumerate() {
            let onehot = if j == orig.label.index() { F::one() } else { F::zero() };
            *u = dist.probs[j] - onehot;
        }
        let g = model::backward(&cache, params, &upstream)?;
        add(acc, &g.params);
        let ce = -model::clamp_prob(dist.prob(orig.label)).ln().to_f64().unwrap();
        return Ok((ce, 0.0));
    }

    let (dist_o, cache_o) =
        forward_dropout(params, &orig.ids, orig.aspect_range, dropout_arg(dropout, rng))?;
    let (dist_a, cache_a) = forward_dropout(params, &aug.ids, aug.aspect_range, dropout_arg(dropout, rng))?;
    let logits_o = [cache_o.logits[0], cache_o.logits[1], cache_o.logits[2]];
    let logits_a = [cache_a.logits[0], cache_a.logits[1], cache_a.logits[2]];
    let (d_orig, d_aug) = crr_loss_gradient(&logits_o, &logits_a, orig.label, loss_cfg);
    let g_o = model::backward(&cache_o, params, &d_orig)?;
    let g_a = model::backward(&cache_a, params, &d_aug)?;
    add(acc, &g_o.params);
    add(acc, &g_a.params);
    let breakdown = crr_loss(&dist_o, &dist_a, orig.label, loss_cfg);
    Ok((
        (breakdown.ce_orig + breakdown.ce_aug).to_f64().unwrap(),
        breakdown.div.to_f64().unwrap(),
    ))
}

/// Train under the configured regime and return the checkpoint from the
/// best dev epoch plus the full report. Deterministic under the config
/// seed (shuffling and dropout both derive from it).
pub fn train<F: Scalar>(
    initial: ModelParams<F>,
    vocab: &model::Vocab,
    train_pairs: &PairedDataset,
    dev: &Dataset,
    cfg: &TrainConfig<F>,
) -> Result<(ModelParams<F>, TrainReport), TrainError> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if dev.instances.is_empty() {
        return Err(TrainError::EmptyDev);
    }
    let pairs = encode_pairs(vocab, train_pairs)?;
    let dev_enc: Vec<(String, Encoded)> = dev
        .instances
        .iter()
        .map(|i| Ok((i.id.clone(), encode_instance(vocab, i)?)))
        .collect::<Result<_, TrainError>>()?;

    let total_steps = (pairs.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let warmup = (total_steps as f64 * cfg.warmup_fraction).round() as u64;
    let mut params = initial;
    let mut opt = Optimizer::new(&params, cfg.learning_rate, cfg.weight_decay, warmup);
    let loss_cfg = cfg.loss_config();

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_dev: f64::NEG_INFINITY,
        selected_alpha: cfg.alpha.to_f64().unwrap(),
        selected_lr: cfg.learning_rate.to_f64().unwrap(),
    };
    let mut best_params = params.clone();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = seeding::indexed_stream(cfg.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = seeding::indexed_stream(cfg.seed, "dropout", epoch as u64);

        let mut ce_sum = 0.0;
        let mut div_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = params.zeros_like();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (orig, aug) = &pairs[idx];
                let (ce, div) = pair_gradient(
                    &params,
                    &mut acc,
                    orig,
                    aug,
                    cfg.regime,
                    &loss_cfg,
                    cfg.dropout,
                    &mut dropout_rng,
                )?;
                ce_sum += ce;
                div_sum += div;
                batch_loss += ce + cfg.alpha.to_f64().unwrap() * div;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NumericFailure { epoch, batch: batch_no });
            }
            // Per-batch mean.
            let scale = F::from_usize(batch.len()).unwrap().recip();
            for (_, data) in acc.tensors_mut() {
                for v in data {
                    *v = *v * scale;
                }
            }
            opt.step(&mut params, &acc);
            if !params.is_finite() {
                return Err(TrainError::NumericFailure { epoch, batch: batch_no });
            }
        }

        let summed_div = summed_divergence(&params, &pairs, cfg.divergence)?;
        let dev_value = dev_metric_value(&params, &dev_enc, cfg.dev_metric)?;
        report.epochs.push(EpochStats {
            epoch,
            mean_ce: ce_sum / pairs.len() as f64,
            mean_div: div_sum / pairs.len() as f64,
            summed_div,
            dev_metric: dev_value,
        });
        // Ties go to the later epoch: with equal dev scores the more
        // regularized (further trained) checkpoint is preferred.
        if dev_value >= report.best_dev {
            report.best_dev = dev_value;
            report.best_epoch = epoch;
            best_params = params.clone();
        }
    }
    Ok((best_params, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub learning_rate: f64,
    pub dev_metric: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct GridResult<F> {
    pub best_params: ModelParams<F>,
    pub best_report: TrainReport,
    pub best_config: TrainConfig<F>,
    pub cells: Vec<GridCell>,
}

/// Train every (alpha, lr) grid cell from the same initial params and
/// seed, select by dev metric; ties prefer the smaller alpha, then the
/// smaller lr.
pub fn grid_search<F: Scalar>(
    initial: &ModelParams<F>,
    vocab: &model::Vocab,
    train_pairs: &PairedDataset,
    dev: &Dataset,
    base_cfg: &TrainConfig<F>,
) -> Result<GridResult<F>, TrainError> {
    base_cfg.validate()?;
    let mut alphas: Vec<F> = base_cfg.alpha_grid.clone();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut lrs: Vec<F> = base_cfg.lr_grid.clone();
    lrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // For non-CRR regimes alpha is inert; collapse the alpha axis.
    if base_cfg.regime != Regime::Crr {
        alphas.truncate(1);
    }

    let mut cells = Vec::new();
    let mut best: Option<(f64, TrainConfig<F>, ModelParams<F>, TrainReport)> = None;
    for &alpha in &alphas {
        for &lr in &lrs {
            let cfg = TrainConfig { alpha, learning_rate: lr, ..base_cfg.clone() };
            let (params, report) = train(initial.clone(), vocab, train_pairs, dev, &cfg)?;
            cells.push(GridCell {
                alpha: alpha.to_f64().unwrap(),
                learning_rate: lr.to_f64().unwrap(),
                dev_metric: report.best_dev,
                best_epoch: report.best_epoch,
            });
            let better = match &best {
                None => true,
                Some((dev_best, ..)) => report.best_dev > *dev_best,
            };
            if better {
                best = Some((report.best_dev, cfg, params, report));
            }
        }
    }
    let (_, best_config, best_params, best_report) = best.expect("grids are non-empty");
    Ok(GridResult { best_params, best_report, best_config, cells })
}
