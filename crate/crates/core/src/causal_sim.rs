//! Synthetic causal benchmark: sentences assembled from a core token that
//! determines the label and a spurious token that is merely correlated
//! with it. Supports interventions (forcibly setting the spurious token),
//! invariance-gap measurement between original and intervened predictions,
//! and a pushforward check that invariance transfers to every coarser
//! relabeling of the reference task.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentKind, AugmentedInstance, PairedDataset, Position};
use crate::corpus::{Dataset, Instance, Polarity, Span, Split};
use crate::model::{self, forward, ModelError, ModelParams, PredictionDist, NUM_CLASSES};
use crate::objective::{self, DivergenceKind};
use crate::trainer::{self, Regime, TrainConfig, TrainError};
use crate::seeding;
use crate::text;
use crate::Scalar;
use rand::Rng;

const ALL_POLARITIES: [Polarity; 3] =
    [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

/// One slot of the sentence template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Aspect,
    Core,
    Spurious,
    Filler(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpuriousGroup {
    pub name: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalSpec {
    /// Label-determining tokens, per polarity.
    pub core: BTreeMap<Polarity, Vec<String>>,
    /// Label-correlated (but non-causal) token groups. Group `i` is the
    /// one correlated with the label of index `i % groups.len()`.
    pub spurious_groups: Vec<SpuriousGroup>,
    /// Probability that an instance's spurious token is drawn from its
    /// label-correlated group (otherwise uniform over all groups).
    pub rho: f64,
    pub aspect_term: String,
    pub template: Vec<Slot>,
    pub seed: u64,
}

impl Default for CausalSpec {
    fn default() -> Self {
        // A dozen core tokens per label: with only a couple of tokens per
        // label the core signal is learned almost instantly and every
        // training regime saturates, leaving nothing for the benchmark to
        // discriminate.
        let core = [
            (
                Polarity::Negative,
                vec![
                    "dreadful", "horrid", "awful", "terrible", "dire", "abysmal", "appalling",
                    "atrocious", "woeful", "dismal", "lousy", "wretched",
                ],
            ),
            (
                Polarity::Neutral,
                vec![
                    "ordinary", "unremarkable", "average", "typical", "standard", "routine",
                    "plain", "middling", "moderate", "usual", "regular", "passable",
                ],
            ),
            (
                Polarity::Positive,
                vec![
                    "superb", "delightful", "excellent", "wonderful", "stellar", "marvelous",
                    "fantastic", "splendid", "terrific", "glorious", "sublime", "outstanding",
                ],
            ),
        ]
        .into_iter()
        .map(|(p, ws)| (p, ws.into_iter().map(String::from).collect()))
        .collect();
        let group = |name: &str, tokens: [&str; 4]| SpuriousGroup {
            name: name.into(),
            tokens: tokens.into_iter().map(String::from).collect(),
        };
        CausalSpec {
            core,
            spurious_groups: vec![
                group("weekday", ["monday", "tuesday", "wednesday", "thursday"]),
                group("city", ["lisbon", "oslo", "dublin", "prague"]),
                group("weather", ["rainy", "sunny", "foggy", "windy"]),
            ],
            rho: 0.95,
            aspect_term: "service".into(),
            template: vec![
                Slot::Filler("the".into()),
                Slot::Aspect,
                Slot::Filler("was".into()),
                Slot::Core,
                Slot::Filler("on".into()),
                Slot::Filler("a".into()),
                Slot::Spurious,
                Slot::Filler("visit".into()),
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("unknown spurious group: {0}")]
    UnknownGroup(String),
    #[error("token {token:?} does not belong to group {group:?}")]
    TokenNotInGroup { group: String, token: String },
    #[error("dataset lacks annotations for instance {0}")]
    MissingAnnotation(String),
    #[error("relabeling map for task {0:?} is not surjective")]
    NotSurjective(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training error: {0}")]
    Train(#[from] TrainError),
}

impl CausalSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(SimError::Spec(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.spurious_groups.is_empty() {
            return Err(SimError::Spec("need at least one spurious group".into()));
        }
        let mut core_tokens = Vec::new();
        for p in ALL_POLARITIES {
            let ws = self
                .core
                .get(&p)
                .filter(|ws| !ws.is_empty())
                .ok_or_else(|| SimError::Spec(format!("no core tokens for {p:?}")))?;
            core_tokens.extend(ws.iter().cloned());
        }
        for g in &self.spurious_groups {
            if g.tokens.is_empty() {
                return Err(SimError::Spec(format!("group {:?} is empty", g.name)));
            }
            for t in &g.tokens {
                if core_tokens.contains(t) {
                    return Err(SimError::Spec(format!(
                        "token {t:?} appears in both core and spurious sets"
                    )));
                }
            }
        }
        for (slot, want) in [(Slot::Aspect, "aspect"), (Slot::Core, "core"), (Slot::Spurious, "spurious")]
        {
            if self.template.iter().filter(|s| **s == slot).count() != 1 {
                return Err(SimError::Spec(format!(
                    "template must contain exactly one {want} slot"
                )));
            }
        }
        Ok(())
    }

    pub fn group_index(&self, name: &str) -> Result<usize, SimError> {
        self.spurious_groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| SimError::UnknownGroup(name.to_string()))
    }

    /// Group correlated with the given label.
    pub fn correlated_group(&self, label: Polarity) -> usize {
        label.index() % self.spurious_groups.len()
    }
}

/// Which token positions carry causal vs spurious content in one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub core_token: String,
    pub core_position: usize,
    pub spurious_token: String,
    pub spurious_position: usize,
    pub spurious_group: String,
}

/// A generated dataset plus its per-instance causal annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedDataset {
    pub dataset: Dataset,
    pub annotations: BTreeMap<String, Annotation>,
}

impl AnnotatedDataset {
    pub fn annotation(&self, id: &str) -> Result<&Annotation, SimError> {
        self.annotations.get(id).ok_or_else(|| SimError::MissingAnnotation(id.to_string()))
    }

    /// Sidecar JSONL: one `{id, annotation}` object per instance.
    pub fn save_annotations(&self, path: &std::path::Path) -> Result<(), SimError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, ann) in &self.annotations {
            let mut obj = serde_json::Map::new();
            obj.insert("id".into(), serde_json::Value::String(id.clone()));
            obj.insert("annotation".into(), serde_json::to_value(ann).expect("serializable"));
            writeln!(f, "{}", serde_json::Value::Object(obj))?;
        }
        Ok(())
    }
}

fn assemble(spec: &CausalSpec, id: &str, label: Polarity, core: &str, spurious: &str)
    -> (Instance, Annotation)
{
    let mut words: Vec<&str> = Vec::with_capacity(spec.template.len());
    let mut core_pos = 0;
    let mut spur_pos = 0;
    let mut aspect_pos = 0;
    for slot in &spec.template {
        match slot {
            Slot::Aspect => {
                aspect_pos = words.len();
                words.push(&spec.aspect_term);
            }
            Slot::Core => {
                core_pos = words.len();
                words.push(core);
            }
            Slot::Spurious => {
                spur_pos = words.len();
                words.push(spurious);
            }
            Slot::Filler(w) => words.push(w),
        }
    }
    let text = words.join(" ");
    // Char offset of the aspect word = preceding words + separating spaces.
    let start: usize =
        words[..aspect_pos].iter().map(|w| text::char_len(w) + 1).sum();
    let end = start + text::char_len(&spec.aspect_term);
    let instance = Instance {
        id: id.to_string(),
        text,
        aspect_term: spec.aspect_term.clone(),
        aspect_span: Span { start, end },
        polarity: label,
    };
    let annotation = Annotation {
        core_token: core.to_string(),
        core_position: core_pos,
        spurious_token: spurious.to_string(),
        spurious_position: spur_pos,
        spurious_group: String::new(), // filled by the caller
    };
    (instance, annotation)
}

/// Draw `n` instances: label uniform, core token from the label's core
/// set, spurious token from the label-correlated group with probability
/// rho, else uniform over all groups.
pub fn generate(
    spec: &CausalSpec,
    n: usize,
    name: &str,
    split: Split,
    rng: &mut impl Rng,
) -> Result<AnnotatedDataset, SimError> {
    spec.validate()?;
    let mut instances = Vec::with_capacity(n);
    let mut annotations = BTreeMap::new();
    for i in 0..n {
        let label = ALL_POLARITIES[rng.gen_range(0..NUM_CLASSES)];
        let core_set = &spec.core[&label];
        let core = &core_set[rng.gen_range(0..core_set.len())];
        let group_idx = if spec.rho > 0.0 && rng.gen_bool(spec.rho) {
            spec.correlated_group(label)
        } else {
            rng.gen_range(0..spec.spurious_groups.len())
        };
        let group = &spec.spurious_groups[group_idx];
        let spurious = &group.tokens[rng.gen_range(0..group.tokens.len())];
        let id = format!("{name}-{i}");
        let (inst, mut ann) = assemble(spec, &id, label, core, spurious);
        ann.spurious_group = group.name.clone();
        instances.push(inst);
        annotations.insert(id, ann);
    }
    Ok(AnnotatedDataset {
        dataset: Dataset {
            name: name.to_string(),
            split,
            instances,
            variants: Vec::new(),
            dropped_conflicts: 0,
        },
        annotations,
    })
}

/// Forcibly set the spurious token: `do(S_i = token)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub group: String,
    pub token: String,
}

fn replace_word(inst: &Instance, position: usize, replacement: &str) -> Instance {
    let mut words: Vec<String> = inst.text.split(' ').map(String::from).collect();
    let old_len = text::char_len(&words[position]);
    let new_len = text::char_len(replacement);
    words[position] = replacement.to_string();
    let mut out = inst.clone();
    out.text = words.join(" ");
    // Shift the aspect span if the replaced word precedes it.
    let word_start: usize =
        words[..position].iter().map(|w| text::char_len(w) + 1).sum();
    if word_start < out.aspect_span.start {
        let delta = new_len as isize - old_len as isize;
        out.aspect_span.start = (out.aspect_span.start as isize + delta) as usize;
        out.aspect_span.end = (out.aspect_span.end as isize + delta) as usize;
    }
    out
}

/// Apply an intervention `do(S = s)`: every instance's spurious token is
/// forcibly set to the intervention value, whatever group it previously
/// came from. Labels and core tokens are untouched.
pub fn intervene(d: &AnnotatedDataset, iv: &Intervention) -> Result<AnnotatedDataset, SimError> {
    let mut out = d.clone();
    for inst in &mut out.dataset.instances {
        let ann = d.annotation(&inst.id)?.clone();
        *inst = replace_word(inst, ann.spurious_position, &iv.token);
        let entry = out.annotations.get_mut(&inst.id).expect("cloned above");
        entry.spurious_token = iv.token.clone();
        entry.spurious_group = iv.group.clone();
    }
    Ok(out)
}

/// Validate an intervention against a spec (group exists, token in its
/// domain).
pub fn check_intervention(spec: &CausalSpec, iv: &Intervention) -> Result<(), SimError> {
    let idx = spec.group_index(&iv.group)?;
    if !spec.spurious_groups[idx].tokens.contains(&iv.token) {
        return Err(SimError::TokenNotInGroup { group: iv.group.clone(), token: iv.token.clone() });
    }
    Ok(())
}

/// Replace every instance's spurious token with one drawn from a group
/// correlated with a *different* label — the adversarial test condition.
pub fn intervene_adversarial(
    d: &AnnotatedDataset,
    spec: &CausalSpec,
    rng: &mut impl Rng,
) -> Result<AnnotatedDataset, SimError> {
    spec.validate()?;
    let n_groups = spec.spurious_groups.len();
    let mut out = d.clone();
    for inst in &mut out.dataset.instances {
        let ann = d.annotation(&inst.id)?.clone();
        let own = spec.correlated_group(inst.polarity);
        let others: Vec<usize> = (0..n_groups).filter(|&g| g != own).collect();
        let group_idx = if others.is_empty() { own } else { others[rng.gen_range(0..others.len())] };
        let group = &spec.spurious_groups[group_idx];
        let token = &group.tokens[rng.gen_range(0..group.tokens.len())];
        *inst = replace_word(inst, ann.spurious_position, token);
        let entry = out.annotations.get_mut(&inst.id).expect("cloned above");
        entry.spurious_token = token.clone();
        entry.spurious_group = group.name.clone();
    }
    Ok(out)
}

/// Training pairs for the benchmark: each original is paired with a copy
/// whose spurious token is re-drawn uniformly (group and value), leaving
/// the causal content fixed. Seeded per instance id.
pub fn intervention_pairs(
    d: &AnnotatedDataset,
    spec: &CausalSpec,
    seed: u64,
) -> Result<PairedDataset, SimError> {
    spec.validate()?;
    let mut pairs = Vec::with_capacity(d.dataset.instances.len());
    for inst in &d.dataset.instances {
        let ann = d.annotation(&inst.id)?;
        let mut rng = seeding::instance_stream(seed, "intervention", &inst.id);
        let group = &spec.spurious_groups[rng.gen_range(0..spec.spurious_groups.len())];
        let token = &group.tokens[rng.gen_range(0..group.tokens.len())];
        let aug = replace_word(inst, ann.spurious_position, token);
        pairs.push((
            inst.clone(),
            AugmentedInstance {
                instance: Instance { id: format!("{}-iv", inst.id), ..aug },
                source_id: inst.id.clone(),
                position: Position::None,
                injected: Vec::new(),
                kind: AugmentKind::Intervention,
            },
        ));
    }
    Ok(PairedDataset { pairs })
}

/// Mean/max divergence (and prediction-flip rate) between predictions on
/// the original dataset and each intervened version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceGap {
    pub mean: f64,
    pub max: f64,
    pub flip_rate: f64,
    /// True when no interventions were supplied; the gap is vacuously 0.
    pub vacuous: bool,
}

fn predict_all<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &model::Vocab,
    d: &Dataset,
) -> Result<Vec<PredictionDist<F>>, SimError> {
    d.instances
        .iter()
        .map(|i| {
            let tokens = model::tokenize(&i.text);
            let ids = vocab.encode(&tokens);
            let range = model::aspect_token_range(&i.text, i.aspect_span)
                .ok_or(ModelError::BadAspectRange(0, 0, ids.len()))?;
            let (dist, _) = forward(params, &ids, range)?;
            Ok(dist)
        })
        .collect()
}

pub fn invariance_gap<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &model::Vocab,
    d: &AnnotatedDataset,
    interventions: &[Intervention],
    kind: DivergenceKind,
) -> Result<InvarianceGap, SimError> {
    if interventions.is_empty() {
        return Ok(InvarianceGap { mean: 0.0, max: 0.0, flip_rate: 0.0, vacuous: true });
    }
    let base = predict_all(params, vocab, &d.dataset)?;
    let mut sum = 0.0;
    let mut max = 0.0_f64;
    let mut flips = 0usize;
    let mut count = 0usize;
    for iv in interventions {
        let shifted = intervene(d, iv)?;
        let moved = predict_all(params, vocab, &shifted.dataset)?;
        for (p, q) in base.iter().zip(&moved) {
            let g = objective::divergence(kind, p, q).to_f64().unwrap();
            sum += g;
            max = max.max(g);
            if p.argmax() != q.argmax() {
                flips += 1;
            }
            count += 1;
        }
    }
    Ok(InvarianceGap {
        mean: sum / count as f64,
        max,
        flip_rate: flips as f64 / count as f64,
        vacuous: false,
    })
}

/// A coarser task derived from the 3-class reference task by a surjective
/// relabeling of class indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Relabeling {
    pub name: String,
    /// map[reference class index] = derived class index.
    pub map: [usize; NUM_CLASSES],
}

impl Relabeling {
    pub fn num_targets(&self) -> usize {
        self.map.iter().max().unwrap() + 1
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.num_targets();
        for t in 0..n {
            if !self.map.contains(&t) {
                return Err(SimError::NotSurjective(self.name.clone()));
            }
        }
        Ok(())
    }

    /// Push a reference-task distribution forward through the relabeling.
    pub fn pushforward(&self, p: &[f64; NUM_CLASSES]) -> Vec<f64> {
        let mut q = vec![0.0; self.num_targets()];
        for (k, &t) in self.map.iter().enumerate() {
            q[t] += p[k];
        }
        q
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskFamily {
    pub tasks: Vec<Relabeling>,
}

impl TaskFamily {
    /// Identity plus every way of merging two of the three classes.
    pub fn default_family() -> TaskFamily {
        TaskFamily {
            tasks: vec![
                Relabeling { name: "identity".into(), map: [0, 1, 2] },
                Relabeling { name: "merge-neg-neu".into(), map: [0, 0, 1] },
                Relabeling { name: "merge-neu-pos".into(), map: [0, 1, 1] },
                Relabeling { name: "merge-neg-pos".into(), map: [0, 1, 0] },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.tasks.is_empty() {
            return Err(SimError::Spec("task family is empty".into()));
        }
        self.tasks.iter().try_for_each(Relabeling::validate)
    }
}

/// Total-variation distance, ½ Σ|p − q|.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGap {
    pub task: String,
    pub mean_tv: f64,
    pub max_tv: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    /// Gap of the reference task itself.
    pub reference: TaskGap,
    pub tasks: Vec<TaskGap>,
    /// Per-(instance, intervention, task) violations of the pushforward
    /// inequality TV(task) ≤ TV(reference) beyond `tolerance`.
    pub violations: usize,
    pub holds: bool,
}

fn probs_f64<F: Scalar>(d: &PredictionDist<F>) -> [f64; NUM_CLASSES] {
    [
        d.probs[0].to_f64().unwrap(),
        d.probs[1].to_f64().unwrap(),
        d.probs[2].to_f64().unwrap(),
    ]
}

fn kl_f64(p: &[f64], q: &[f64]) -> f64 {
    const EPS: f64 = 1e-7;
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.clamp(EPS, 1.0);
            let b = b.clamp(EPS, 1.0);
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Check that prediction invariance transfers from the reference task to
/// every derived task: for each instance and intervention, the derived
/// task's TV gap must not exceed the reference task's (the data-processing
/// inequality for the relabeling map).
pub fn verify_transfer<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &model::Vocab,
    d: &AnnotatedDataset,
    interventions: &[Intervention],
    family: &TaskFamily,
    tolerance: f64,
) -> Result<TransferReport, SimError> {
    family.validate()?;
    let base = predict_all(params, vocab, &d.dataset)?;
    // Collect (p, q) prob pairs over every (instance, intervention).
    let mut pairs: Vec<([f64; NUM_CLASSES], [f64; NUM_CLASSES])> = Vec::new();
    for iv in interventions {
        let shifted = intervene(d, iv)?;
        let moved = predict_all(params, vocab, &shifted.dataset)?;
        for (p, q) in base.iter().zip(&moved) {
            pairs.push((probs_f64(p), probs_f64(q)));
        }
    }

    let gap_over = |push: Option<&Relabeling>| -> TaskGap {
        let (mut tv_sum, mut tv_max, mut kl_sum) = (0.0, 0.0_f64, 0.0);
        for (p, q) in &pairs {
            let (pp, qq) = match push {
                Some(r) => (r.pushforward(p), r.pushforward(q)),
                None => (p.to_vec(), q.to_vec()),
            };
            let tv = tv_distance(&pp, &qq);
            tv_sum += tv;
            tv_max = tv_max.max(tv);
            kl_sum += kl_f64(&pp, &qq);
        }
        let n = pairs.len().max(1) as f64;
        TaskGap {
            task: push.map_or("reference".to_string(), |r| r.name.clone()),
            mean_tv: tv_sum / n,
            max_tv: tv_max,
            mean_kl: kl_sum / n,
        }
    };

    let reference = gap_over(None);
    let mut violations = 0usize;
    let mut tasks = Vec::with_capacity(family.tasks.len());
    for task in &family.tasks {
        for (p, q) in &pairs {
            let ref_tv = tv_distance(p, q);
            let task_tv = tv_distance(&task.pushforward(p), &task.pushforward(q));
            if task_tv > ref_tv + tolerance {
                violations += 1;
            }
        }
        tasks.push(gap_over(Some(task)));
    }
    Ok(TransferReport { reference, tasks, holds: violations == 0, violations })
}

/// The default desk-scale benchmark: train/dev at the default rho, an IID
/// test set, and an adversarially intervened copy of it.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: CausalSpec,
    pub train: AnnotatedDataset,
    pub dev: AnnotatedDataset,
    pub test_iid: AnnotatedDataset,
    pub test_adversarial: AnnotatedDataset,
}

pub fn default_benchmark(seed: u64) -> Result<Benchmark, SimError> {
    let spec = CausalSpec { seed, ..CausalSpec::default() };
    make_benchmark(&spec, 240, 100, 300)
}

pub fn make_benchmark(
    spec: &CausalSpec,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
) -> Result<Benchmark, SimError> {
    let mut rng = seeding::stream(spec.seed, "causal-generate");
    let train = generate(spec, n_train, "train", Split::Train, &mut rng)?;
    let dev = generate(spec, n_dev, "dev", Split::Dev, &mut rng)?;
    let test_iid = generate(spec, n_test, "test", Split::Test, &mut rng)?;
    let mut adv_rng = seeding::stream(spec.seed, "causal-adversarial");
    let test_adversarial = intervene_adversarial(&test_iid, spec, &mut adv_rng)?;
    Ok(Benchmark { spec: spec.clone(), train, dev, test_iid, test_adversarial })
}

/// Hyper-parameters of the two-stage benchmark protocol: a model is first
/// fitted with plain CE on the originals (it reliably picks up the
/// spurious correlation), then fine-tuned under the regime being compared.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Protocol {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub dropout: f64,
    pub learning_rate: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            embedding_dim: 16,
            hidden_dim: 16,
            batch_size: 32,
            pretrain_epochs: 12,
            finetune_epochs: 6,
            dropout: 0.3,
            learning_rate: 3e-3,
        }
    }
}

impl Protocol {
    fn train_config(&self, regime: Regime, alpha: f64, div: DivergenceKind, seed: u64, epochs: usize) -> TrainConfig<f64> {
        TrainConfig {
            regime,
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            alpha,
            divergence: div,
            seed,
            dropout: self.dropout,
            warmup_fraction: 0.0,
            ..TrainConfig::default()
        }
    }
}

/// Each original paired with itself; feeds the baseline regime, which
/// only reads the original side.
pub fn identity_pairs(d: &Dataset) -> PairedDataset {
    PairedDataset {
        pairs: d
            .instances
            .iter()
            .map(|x| (x.clone(), AugmentedInstance::identity(x)))
            .collect(),
    }
}

/// Stage 1: plain-CE fit on the training originals.
pub fn pretrain(
    b: &Benchmark,
    proto: &Protocol,
    seed: u64,
) -> Result<(model::Vocab, ModelParams<f64>), SimError> {
    let vocab = model::Vocab::build(&b.train.dataset);
    let mut init_rng = seeding::stream(seed, "init");
    let init: ModelParams<f64> =
        ModelParams::init(vocab.len(), proto.embedding_dim, proto.hidden_dim, &mut init_rng);
    let pairs = identity_pairs(&b.train.dataset);
    let cfg = proto.train_config(
        Regime::Baseline,
        0.0,
        DivergenceKind::KlForward,
        seed,
        proto.pretrain_epochs,
    );
    let (params, _) = trainer::train(init, &vocab, &pairs, &b.dev.dataset, &cfg)?;
    Ok((vocab, params))
}

/// Result of one regime fine-tune on the benchmark.
#[derive(Debug, Clone)]
pub struct RegimeRun {
    pub iid_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub gap: InvarianceGap,
    pub report: trainer::TrainReport,
    pub params: ModelParams<f64>,
}

fn dataset_accuracy(
    params: &ModelParams<f64>,
    vocab: &model::Vocab,
    d: &Dataset,
) -> Result<f64, SimError> {
    let records = d
        .instances
        .iter()
        .map(|i| {
            Ok(crate::eval::PredictionRecord {
                id: i.id.clone(),
                gold: i.polarity,
                predicted: model::predict(params, vocab, i)?,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    crate::eval::accuracy(&records).map_err(|e| SimError::Spec(e.to_string()))
}

/// Stage 2: fine-tune the pretrained model under one regime and score it
/// on both test conditions plus the intervention invariance gap.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    b: &Benchmark,
    vocab: &model::Vocab,
    init: &ModelParams<f64>,
    regime: Regime,
    alpha: f64,
    divergence: DivergenceKind,
    seed: u64,
    proto: &Protocol,
) -> Result<RegimeRun, SimError> {
    let pairs = match regime {
        Regime::Baseline => identity_pairs(&b.train.dataset),
        _ => intervention_pairs(&b.train, &b.spec, seed)?,
    };
    // Offset the seed so fine-tuning does not replay the pretraining
    // shuffle/dropout streams.
    let cfg = proto.train_config(
        regime,
        alpha,
        divergence,
        seed.wrapping_add(1000),
        proto.finetune_epochs,
    );
    let (best, report) = trainer::train(init.clone(), vocab, &pairs, &b.dev.dataset, &cfg)?;
    let ivs = all_interventions(&b.spec);
    // The gap is always measured in forward KL so runs with different
    // training divergences stay comparable.
    let gap = invariance_gap(&best, vocab, &b.test_iid, &ivs, DivergenceKind::KlForward)?;
    Ok(RegimeRun {
        iid_accuracy: dataset_accuracy(&best, vocab, &b.test_iid.dataset)?,
        adversarial_accuracy: dataset_accuracy(&best, vocab, &b.test_adversarial.dataset)?,
        gap,
        report,
        params: best,
    })
}

/// Every concrete intervention a CausalSpec admits (each group × each token).
pub fn all_interventions(spec: &CausalSpec) -> Vec<Intervention> {
    spec.spurious_groups
        .iter()
        .flat_map(|g| {
            g.tokens
                .iter()
                .map(|t| Intervention { group: g.name.clone(), token: t.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn spec() -> CausalSpec {
        CausalSpec::default()
    }

    #[test]
    fn default_spec_is_valid_and_instances_wellformed() {
        let s = spec();
        s.validate().unwrap();
        let mut rng = seeding::stream(1, "gen");
        let d = generate(&s, 50, "t", Split::Train, &mut rng).unwrap();
        assert_eq!(d.dataset.instances.len(), 50);
        for inst in &d.dataset.instances {
            inst.validate().unwrap();
            let ann = d.annotation(&inst.id).unwrap();
            let words: Vec<&str> = inst.text.split(' ').collect();
            assert_eq!(words[ann.core_position], ann.core_token);
            assert_eq!(words[ann.spurious_position], ann.spurious_token);
            assert!(s.core[&inst.polarity].contains(&ann.core_token));
        }
    }

    #[test]
    fn rho_one_is_deterministic() {
        let s = CausalSpec { rho: 1.0, ..spec() };
        let mut rng = seeding::stream(2, "gen");
        let d = generate(&s, 200, "t", Split::Train, &mut rng).unwrap();
        for inst in &d.dataset.instances {
            let ann = d.annotation(&inst.id).unwrap();
            let want = &s.spurious_groups[s.correlated_group(inst.polarity)].name;
            assert_eq!(&ann.spurious_group, want);
        }
    }

    #[test]
    fn rho_zero_gives_near_zero_mutual_information() {
        let s = CausalSpec { rho: 0.0, ..spec() };
        let mut rng = seeding::stream(3, "gen");
        let d = generate(&s, 10_000, "t", Split::Train, &mut rng).unwrap();
        let mi = label_group_mi(&d);
        assert!(mi < 0.01, "empirical MI {mi} should be < 0.01 nats");
    }

    #[test]
    fn intervened_dataset_has_zero_group_label_mi() {
        let s = spec();
        let mut rng = seeding::stream(4, "gen");
        let d = generate(&s, 2000, "t", Split::Train, &mut rng).unwrap();
        // Constant S carries zero information about the label.
        let out = intervene(
            &d,
            &Intervention { group: "city".into(), token: "fixedtok".into() },
        )
        .unwrap();
        let mut token_by_label: HashMap<(usize, String), usize> = HashMap::new();
        for inst in &out.dataset.instances {
            let ann = out.annotation(&inst.id).unwrap();
            *token_by_label
                .entry((inst.polarity.index(), ann.spurious_token.clone()))
                .or_default() += 1;
        }
        // Constant token → MI is exactly zero.
        assert!(token_by_label.keys().all(|(_, t)| t == "fixedtok"));
        let mi = label_token_mi(&out);
        assert!(mi.abs() < 1e-12, "constant token should carry zero MI, got {mi}");
    }

    /// Empirical mutual information between label and spurious group, nats.
    fn label_group_mi(d: &AnnotatedDataset) -> f64 {
        let mut joint: HashMap<(usize, String), f64> = HashMap::new();
        let mut pl: HashMap<usize, f64> = HashMap::new();
        let mut pg: HashMap<String, f64> = HashMap::new();
        let n = d.dataset.instances.len() as f64;
        for inst in &d.dataset.instances {
            let ann = d.annotation(&inst.id).unwrap();
            *joint.entry((inst.polarity.index(), ann.spurious_group.clone())).or_default() +=
                1.0 / n;
            *pl.entry(inst.polarity.index()).or_default() += 1.0 / n;
            *pg.entry(ann.spurious_group.clone()).or_default() += 1.0 / n;
        }
        joint
            .iter()
            .map(|((l, g), pj)| pj * (pj / (pl[l] * pg[g])).ln())
            .sum()
    }

    fn label_token_mi(d: &AnnotatedDataset) -> f64 {
        let mut joint: HashMap<(usize, String), f64> = HashMap::new();
        let mut pl: HashMap<usize, f64> = HashMap::new();
        let mut pt: HashMap<String, f64> = HashMap::new();
        let n = d.dataset.instances.len() as f64;
        for inst in &d.dataset.instances {
            let ann = d.annotation(&inst.id).unwrap();
            *joint.entry((inst.polarity.index(), ann.spurious_token.clone())).or_default() +=
                1.0 / n;
            *pl.entry(inst.polarity.index()).or_default() += 1.0 / n;
            *pt.entry(ann.spurious_token.clone()).or_default() += 1.0 / n;
        }
        joint.iter().map(|((l, t), pj)| pj * (pj / (pl[l] * pt[t])).ln()).sum()
    }

    #[test]
    fn correlation_matches_rho_within_two_points() {
        let s = spec(); // rho = 0.95, 3 groups
        let mut rng = seeding::stream(5, "gen");
        let d = generate(&s, 12_000, "t", Split::Train, &mut rng).unwrap();
        let matches = d
            .dataset
            .instances
            .iter()
            .filter(|i| {
                d.annotation(&i.id).unwrap().spurious_group
                    == s.spurious_groups[s.correlated_group(i.polarity)].name
            })
            .count();
        let rate = matches as f64 / d.dataset.instances.len() as f64;
        // With prob rho the correlated group is forced; the uniform branch
        // still hits it 1/n of the time.
        let expected = s.rho + (1.0 - s.rho) / s.spurious_groups.len() as f64;
        assert!((rate - expected).abs() < 0.02, "rate {rate} vs expected {expected}");
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec();
        let a = generate(&s, 100, "t", Split::Train, &mut seeding::stream(6, "gen")).unwrap();
        let b = generate(&s, 100, "t", Split::Train, &mut seeding::stream(6, "gen")).unwrap();
        assert_eq!(a.dataset.instances, b.dataset.instances);
        assert_eq!(a.annotations, b.annotations);
    }

    #[test]
    fn intervene_is_idempotent_and_preserves_labels_and_core() {
        let s = spec();
        let mut rng = seeding::stream(7, "gen");
        let d = generate(&s, 100, "t", Split::Train, &mut rng).unwrap();
        let iv = Intervention { group: "city".into(), token: "oslo".into() };
        check_intervention(&s, &iv).unwrap();
        let once = intervene(&d, &iv).unwrap();
        let twice = intervene(&once, &iv).unwrap();
        assert_eq!(once.dataset.instances, twice.dataset.instances);
        for (orig, new) in d.dataset.instances.iter().zip(&once.dataset.instances) {
            assert_eq!(orig.polarity, new.polarity);
            let ann = d.annotation(&orig.id).unwrap();
            let words: Vec<&str> = new.text.split(' ').collect();
            assert_eq!(words[ann.core_position], ann.core_token);
            assert_eq!(words[ann.spurious_position], "oslo");
            new.validate().unwrap();
        }
    }

    #[test]
    fn unknown_group_is_an_error() {
        let s = spec();
        let iv = Intervention { group: "nonesuch".into(), token: "oslo".into() };
        assert!(matches!(check_intervention(&s, &iv), Err(SimError::UnknownGroup(_))));
        let iv = Intervention { group: "city".into(), token: "monday".into() };
        assert!(matches!(check_intervention(&s, &iv), Err(SimError::TokenNotInGroup { .. })));
    }

    #[test]
    fn constant_model_has_zero_gap() {
        let s = spec();
        let mut rng = seeding::stream(8, "gen");
        let d = generate(&s, 40, "t", Split::Train, &mut rng).unwrap();
        let vocab = model::Vocab::build(&d.dataset);
        // All-zero params produce the uniform distribution for any input.
        let params: ModelParams<f64> = ModelParams::zeros(vocab.len(), 8, 8);
        let ivs = all_interventions(&s);
        let gap = invariance_gap(&params, &vocab, &d, &ivs, DivergenceKind::KlForward).unwrap();
        assert_eq!(gap.mean, 0.0);
        assert_eq!(gap.max, 0.0);
        assert_eq!(gap.flip_rate, 0.0);
        assert!(!gap.vacuous);
    }

    #[test]
    fn empty_intervention_list_is_vacuous_zero() {
        let s = spec();
        let mut rng = seeding::stream(9, "gen");
        let d = generate(&s, 10, "t", Split::Train, &mut rng).unwrap();
        let vocab = model::Vocab::build(&d.dataset);
        let mut init_rng = seeding::stream(9, "init");
        let params: ModelParams<f64> = ModelParams::init(vocab.len(), 8, 8, &mut init_rng);
        let gap = invariance_gap(&params, &vocab, &d, &[], DivergenceKind::KlForward).unwrap();
        assert_eq!(gap.mean, 0.0);
        assert!(gap.vacuous);
    }

    #[test]
    fn identity_relabeling_preserves_tv_exactly() {
        let identity = Relabeling { name: "id".into(), map: [0, 1, 2] };
        let mut rng = seeding::stream(10, "tv");
        for _ in 0..200 {
            let p = random_dist(&mut rng);
            let q = random_dist(&mut rng);
            let tv = tv_distance(&p, &q);
            let tv_push = tv_distance(&identity.pushforward(&p), &identity.pushforward(&q));
            assert!((tv - tv_push).abs() < 1e-15);
        }
    }

    fn random_dist(rng: &mut impl Rng) -> [f64; 3] {
        let mut v = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn pushforward_never_increases_tv_over_ten_thousand_trials() {
        let family = TaskFamily::default_family();
        family.validate().unwrap();
        let mut rng = seeding::stream(11, "tv");
        let mut violations = 0;
        for _ in 0..10_000 {
            let p = random_dist(&mut rng);
            let q = random_dist(&mut rng);
            let tv = tv_distance(&p, &q);
            for task in &family.tasks {
                let tvp = tv_distance(&task.pushforward(&p), &task.pushforward(&q));
                if tvp > tv + 1e-12 {
                    violations += 1;
                }
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn non_surjective_map_is_rejected() {
        let bad = Relabeling { name: "bad".into(), map: [0, 0, 2] };
        assert!(matches!(bad.validate(), Err(SimError::NotSurjective(_))));
        let fine = Relabeling { name: "collapse".into(), map: [0, 0, 0] };
        fine.validate().unwrap();
    }

    #[test]
    fn transfer_report_holds_for_random_model() {
        let s = spec();
        let mut rng = seeding::stream(12, "gen");
        let d = generate(&s, 30, "t", Split::Train, &mut rng).unwrap();
        let vocab = model::Vocab::build(&d.dataset);
        let mut init_rng = seeding::stream(12, "init");
        let params: ModelParams<f64> = ModelParams::init(vocab.len(), 8, 8, &mut init_rng);
        let ivs = all_interventions(&s);
        let report =
            verify_transfer(&params, &vocab, &d, &ivs, &TaskFamily::default_family(), 1e-12)
                .unwrap();
        assert!(report.holds, "{} violations", report.violations);
        for t in &report.tasks {
            assert!(t.mean_tv <= report.reference.mean_tv + 1e-12);
            assert!(t.max_tv <= report.reference.max_tv + 1e-12);
        }
        // Identity task equals the reference exactly.
        let id = report.tasks.iter().find(|t| t.task == "identity").unwrap();
        assert!((id.mean_tv - report.reference.mean_tv).abs() < 1e-15);
    }

    #[test]
    fn intervention_pairs_differ_only_in_the_spurious_slot() {
        let s = spec();
        let mut rng = seeding::stream(13, "gen");
        let d = generate(&s, 60, "t", Split::Train, &mut rng).unwrap();
        let pairs = intervention_pairs(&d, &s, 13).unwrap();
        assert_eq!(pairs.pairs.len(), 60);
        let again = intervention_pairs(&d, &s, 13).unwrap();
        for ((o1, a1), (_, a2)) in pairs.pairs.iter().zip(&again.pairs) {
            assert_eq!(a1.instance, a2.instance, "deterministic under seed");
            assert_eq!(a1.kind, AugmentKind::Intervention);
            let ann = d.annotation(&o1.id).unwrap();
            let ow: Vec<&str> = o1.text.split(' ').collect();
            let aw: Vec<&str> = a1.instance.text.split(' ').collect();
            for (i, (x, y)) in ow.iter().zip(&aw).enumerate() {
                if i != ann.spurious_position {
                    assert_eq!(x, y);
                }
            }
            assert_eq!(o1.polarity, a1.instance.polarity);
            a1.instance.validate().unwrap();
        }
    }

    #[test]
    fn benchmark_pieces_line_up() {
        let b = default_benchmark(21).unwrap();
        assert_eq!(b.train.dataset.instances.len(), 240);
        assert_eq!(b.dev.dataset.instances.len(), 100);
        assert_eq!(b.test_iid.dataset.instances.len(), 300);
        assert_eq!(b.test_adversarial.dataset.instances.len(), 300);
        // Adversarial labels match IID labels; spurious group never matches
        // the label-correlated one.
        for (iid, adv) in
            b.test_iid.dataset.instances.iter().zip(&b.test_adversarial.dataset.instances)
        {
            assert_eq!(iid.polarity, adv.polarity);
            let ann = b.test_adversarial.annotation(&adv.id).unwrap();
            let correlated = &b.spec.spurious_groups[b.spec.correlated_group(adv.polarity)].name;
            assert_ne!(&ann.spurious_group, correlated);
        }
    }

    #[test]
    fn annotation_sidecar_round_trips_by_eye() {
        let s = spec();
        let mut rng = seeding::stream(14, "gen");
        let d = generate(&s, 5, "t", Split::Train, &mut rng).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        d.save_annotations(tmp.path()).unwrap();
        let content = std::fs::read_to_string(tmp.path()).unwrap();
        assert_eq!(content.lines().count(), 5);
        for line in content.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["annotation"]["spurious_group"].is_string());
        }
    }
}
