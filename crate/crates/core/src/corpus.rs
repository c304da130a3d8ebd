//! Dataset ingestion, validation, and split management for ABSA data and
//! ARTs-style variant files.
//!
//! The on-disk format is JSONL, one instance per line:
//! `{"id", "text", "aspect_term", "from", "to", "polarity"}` where
//! `from`/`to` are char offsets of the aspect term. Variant records carry
//! two extra fields, `source_id` and `strategy`. Instances labeled
//! `"conflict"` are dropped at ingestion and counted.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seeding;
use crate::text;

/// Sentiment polarity. Exactly three classes; "conflict" is rejected at
/// ingestion. The declaration order (negative < neutral < positive) is the
/// class-index order and the prediction tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn index(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Neutral => 1,
            Polarity::Positive => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        Polarity::ALL.get(i).copied()
    }

    /// positive <-> negative; neutral has no opposite.
    pub fn opposite(self) -> Option<Polarity> {
        match self {
            Polarity::Positive => Some(Polarity::Negative),
            Polarity::Negative => Some(Polarity::Positive),
            Polarity::Neutral => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        };
        f.write_str(s)
    }
}

/// Char-offset span of the aspect term within the sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// One labeled ABSA example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub aspect_term: String,
    pub aspect_span: Span,
    pub polarity: Polarity,
}

impl Instance {
    /// Checks the span invariant: bounds are sane and the spanned text
    /// equals the declared aspect term after whitespace normalization.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.text.is_empty() {
            return Err(CorpusError::Validation {
                id: self.id.clone(),
                reason: "empty text".into(),
            });
        }
        let len = text::char_len(&self.text);
        let Span { start, end } = self.aspect_span;
        if start >= end || end > len {
            return Err(CorpusError::Validation {
                id: self.id.clone(),
                reason: format!("span ({start},{end}) out of bounds for text of length {len}"),
            });
        }
        let spanned = text::char_slice(&self.text, start, end);
        if text::normalize_ws(&spanned) != text::normalize_ws(&self.aspect_term) {
            return Err(CorpusError::Validation {
                id: self.id.clone(),
                reason: format!(
                    "span text {:?} does not match aspect term {:?}",
                    spanned, self.aspect_term
                ),
            });
        }
        Ok(())
    }
}

/// ARTs generation strategies. Only test-time labels; this crate generates
/// AddDiff/AddDiffMix and RevTgt itself, RevNon arrives only via data files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    RevTgt,
    RevNon,
    AddDiff,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::RevTgt, Strategy::RevNon, Strategy::AddDiff];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::RevTgt => "RevTgt",
            Strategy::RevNon => "RevNon",
            Strategy::AddDiff => "AddDiff",
        };
        f.write_str(s)
    }
}

/// A test-set variant tied to its original instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub source_id: String,
    pub strategy: Strategy,
    pub instance: Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// An ordered, validated collection of instances plus optional variants.
/// Immutable after construction; ordering is stable across loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub instances: Vec<Instance>,
    pub variants: Vec<VariantRecord>,
    /// Instances dropped at ingestion because their polarity was "conflict".
    pub dropped_conflicts: usize,
}

/// An original test instance plus its variants keyed by strategy.
#[derive(Debug, Clone)]
pub struct VariantGroup {
    pub original: Instance,
    pub variants: BTreeMap<Strategy, Instance>,
}

impl VariantGroup {
    pub fn len(&self) -> usize {
        1 + self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("validation error for id {id}: {reason}")]
    Validation { id: String, reason: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("dangling source_id {0}")]
    DanglingSource(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Original instances only; a variant field on any line is an error.
    Original,
    /// ARTs-style file: lines with `source_id`/`strategy` become variants,
    /// lines without become original instances.
    Arts,
}

/// Raw JSONL line, shared by original and variant records.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    aspect_term: String,
    from: usize,
    to: usize,
    polarity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strategy: Option<Strategy>,
}

fn parse_polarity(s: &str) -> Option<Option<Polarity>> {
    match s {
        "positive" => Some(Some(Polarity::Positive)),
        "negative" => Some(Some(Polarity::Negative)),
        "neutral" => Some(Some(Polarity::Neutral)),
        "conflict" => Some(None),
        _ => None,
    }
}

fn split_from_name(name: &str) -> Split {
    let lower = name.to_lowercase();
    if lower.contains("train") {
        Split::Train
    } else if lower.contains("dev") || lower.contains("valid") {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Load and validate a JSONL dataset. Conflict-polarity records are
/// dropped and counted; every surviving instance is checked against the
/// span and uniqueness invariants.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());

    let mut instances = Vec::new();
    let mut variants = Vec::new();
    let mut dropped = 0usize;
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Parse { line: line_no + 1, source })?;
        let polarity = match parse_polarity(&raw.polarity) {
            Some(Some(p)) => p,
            Some(None) => {
                dropped += 1;
                continue;
            }
            None => {
                return Err(CorpusError::Validation {
                    id: raw.id,
                    reason: format!("unknown polarity {:?}", raw.polarity),
                })
            }
        };
        let instance = Instance {
            id: raw.id,
            text: raw.text,
            aspect_term: raw.aspect_term,
            aspect_span: Span { start: raw.from, end: raw.to },
            polarity,
        };
        instance.validate()?;
        if !seen_ids.insert(instance.id.clone()) {
            return Err(CorpusError::DuplicateId(instance.id));
        }
        match (&raw.source_id, raw.strategy) {
            (Some(src), Some(strategy)) => {
                if kind == DatasetKind::Original {
                    return Err(CorpusError::Validation {
                        id: instance.id,
                        reason: "variant record in an original-kind file".into(),
                    });
                }
                variants.push(VariantRecord {
                    source_id: src.clone(),
                    strategy,
                    instance,
                });
            }
            (None, None) => instances.push(instance),
            _ => {
                return Err(CorpusError::Validation {
                    id: instance.id,
                    reason: "source_id and strategy must appear together".into(),
                })
            }
        }
    }

    Ok(Dataset {
        split: split_from_name(&name),
        name,
        instances,
        variants,
        dropped_conflicts: dropped,
    })
}

/// Write a dataset back to JSONL (originals first, then variants), the
/// inverse of [`load_dataset`].
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let write_raw = |out: &mut dyn Write,
                     inst: &Instance,
                     src: Option<&VariantRecord>|
     -> Result<(), CorpusError> {
        let raw = RawRecord {
            id: inst.id.clone(),
            text: inst.text.clone(),
            aspect_term: inst.aspect_term.clone(),
            from: inst.aspect_span.start,
            to: inst.aspect_span.end,
            polarity: inst.polarity.to_string(),
            source_id: src.map(|v| v.source_id.clone()),
            strategy: src.map(|v| v.strategy),
        };
        let line = serde_json::to_string(&raw)
            .map_err(|source| CorpusError::Parse { line: 0, source })?;
        writeln!(out, "{line}")?;
        Ok(())
    };
    for inst in &d.instances {
        write_raw(&mut out, inst, None)?;
    }
    for v in &d.variants {
        write_raw(&mut out, &v.instance, Some(v))?;
    }
    Ok(())
}

/// Seeded stratified train/dev split. Deterministic for a fixed seed;
/// disjoint and exhaustive; dev class proportions track the full set.
pub fn split_train_dev(
    d: &Dataset,
    dev_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), CorpusError> {
    if !(dev_fraction > 0.0 && dev_fraction < 0.5) {
        return Err(CorpusError::Precondition(format!(
            "dev_fraction must be in (0, 0.5), got {dev_fraction}"
        )));
    }
    if d.instances.len() < 10 {
        return Err(CorpusError::Precondition(format!(
            "refusing to split a dataset of {} instances (< 10)",
            d.instances.len()
        )));
    }
    let mut by_class: BTreeMap<Polarity, Vec<usize>> = BTreeMap::new();
    for (i, inst) in d.instances.iter().enumerate() {
        by_class.entry(inst.polarity).or_default().push(i);
    }
    let mut rng = seeding::stream(seed, "split");
    let mut dev_idx: HashSet<usize> = HashSet::new();
    // Cumulative rounding keeps the overall dev size at round(n * fraction)
    // while staying proportional per class.
    let mut target = 0.0;
    let mut taken = 0usize;
    for (_, mut idx) in by_class {
        target += (idx.len() as f64) * dev_fraction;
        let take = (target.round() as usize).saturating_sub(taken);
        taken += take;
        idx.shuffle(&mut rng);
        dev_idx.extend(idx.into_iter().take(take));
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, inst) in d.instances.iter().enumerate() {
        if dev_idx.contains(&i) {
            dev.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    let mk = |name: String, split: Split, instances: Vec<Instance>| Dataset {
        name,
        split,
        instances,
        variants: Vec::new(),
        dropped_conflicts: 0,
    };
    Ok((
        mk(format!("{}-train", d.name), Split::Train, train),
        mk(format!("{}-dev", d.name), Split::Dev, dev),
    ))
}

/// Group a dataset's variants under their original instances. One group
/// per original, holding 0..3 variants keyed by strategy.
pub fn group_variants(d: &Dataset) -> Result<Vec<VariantGroup>, CorpusError> {
    let index: HashMap<&str, usize> = d
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (inst.id.as_str(), i))
        .collect();
    let mut groups: Vec<VariantGroup> = d
        .instances
        .iter()
        .map(|inst| VariantGroup { original: inst.clone(), variants: BTreeMap::new() })
        .collect();
    for v in &d.variants {
        let Some(&i) = index.get(v.source_id.as_str()) else {
            return Err(CorpusError::DanglingSource(v.source_id.clone()));
        };
        if groups[i].variants.insert(v.strategy, v.instance.clone()).is_some() {
            return Err(CorpusError::Validation {
                id: v.instance.id.clone(),
                reason: format!("duplicate {} variant for source {}", v.strategy, v.source_id),
            });
        }
    }
    Ok(groups)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write as _;

    pub(crate) fn inst(id: &str, text: &str, aspect: &str, polarity: Polarity) -> Instance {
        let start = text.to_lowercase().find(&aspect.to_lowercase()).expect("aspect in text");
        let start = text[..start].chars().count();
        let end = start + text::char_len(aspect);
        Instance {
            id: id.into(),
            text: text.into(),
            aspect_term: aspect.into(),
            aspect_span: Span { start, end },
            polarity,
        }
    }

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn drops_and_counts_conflict_lines() {
        let f = write_jsonl(&[
            r#"{"id":"a","text":"Tasty burgers here","aspect_term":"burgers","from":6,"to":13,"polarity":"positive"}"#,
            r#"{"id":"b","text":"Bad fries here","aspect_term":"fries","from":4,"to":9,"polarity":"negative"}"#,
            r#"{"id":"c","text":"Plain rice here","aspect_term":"rice","from":6,"to":10,"polarity":"neutral"}"#,
            r#"{"id":"d","text":"Odd soup here","aspect_term":"soup","from":4,"to":8,"polarity":"conflict"}"#,
        ]);
        let d = load_dataset(f.path(), DatasetKind::Original).unwrap();
        assert_eq!(d.instances.len(), 3);
        assert_eq!(d.dropped_conflicts, 1);
    }

    #[test]
    fn span_mismatch_is_a_validation_error_naming_the_id() {
        let f = write_jsonl(&[
            r#"{"id":"bad1","text":"Tasty burgers","aspect_term":"fries","from":6,"to":13,"polarity":"positive"}"#,
        ]);
        let err = load_dataset(f.path(), DatasetKind::Original).unwrap_err();
        match err {
            CorpusError::Validation { id, .. } => assert_eq!(id, "bad1"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn accepts_table_style_record() {
        let f = write_jsonl(&[
            r#"{"id":"t1","text":"3D rendering slows it down considerably.","aspect_term":"3D rendering","from":0,"to":12,"polarity":"negative"}"#,
        ]);
        let d = load_dataset(f.path(), DatasetKind::Original).unwrap();
        assert_eq!(d.instances[0].aspect_term, "3D rendering");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_jsonl(&[
            r#"{"id":"a","text":"Tasty burgers","aspect_term":"burgers","from":6,"to":13,"polarity":"positive"}"#,
            r#"{"id":"b", not json"#,
        ]);
        match load_dataset(f.path(), DatasetKind::Original).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_jsonl(&[
            r#"{"id":"a","text":"Tasty burgers","aspect_term":"burgers","from":6,"to":13,"polarity":"positive"}"#,
            r#"{"id":"a","text":"Tasty burgers","aspect_term":"burgers","from":6,"to":13,"polarity":"positive"}"#,
        ]);
        assert!(matches!(
            load_dataset(f.path(), DatasetKind::Original).unwrap_err(),
            CorpusError::DuplicateId(_)
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let d = Dataset {
            name: "fixture".into(),
            split: Split::Test,
            instances: vec![
                inst("r1", "Tasty burgers here", "burgers", Polarity::Positive),
                inst("r2", "Bad fries here", "fries", Polarity::Negative),
            ],
            variants: vec![VariantRecord {
                source_id: "r1".into(),
                strategy: Strategy::AddDiff,
                instance: inst("r1-ad", "Tasty burgers here, but bad soup.", "burgers", Polarity::Positive),
            }],
            dropped_conflicts: 0,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        save_dataset(&d, f.path()).unwrap();
        let loaded = load_dataset(f.path(), DatasetKind::Arts).unwrap();
        assert_eq!(loaded.instances, d.instances);
        assert_eq!(loaded.variants, d.variants);
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let mut instances = Vec::new();
        for i in 0..100 {
            instances.push(inst(
                &format!("i{i}"),
                "Tasty burgers here",
                "burgers",
                Polarity::ALL[i % 3],
            ));
        }
        let d = Dataset {
            name: "x".into(),
            split: Split::Train,
            instances,
            variants: vec![],
            dropped_conflicts: 0,
        };
        let (tr1, dv1) = split_train_dev(&d, 0.1, 7).unwrap();
        let (tr2, dv2) = split_train_dev(&d, 0.1, 7).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(dv1, dv2);
        assert_eq!(tr1.instances.len(), 90);
        assert_eq!(dv1.instances.len(), 10);
        let mut ids: Vec<_> = tr1.instances.iter().chain(&dv1.instances).map(|i| &i.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn bad_fraction_is_a_precondition_error() {
        let d = Dataset {
            name: "x".into(),
            split: Split::Train,
            instances: (0..20)
                .map(|i| inst(&format!("i{i}"), "Tasty burgers", "burgers", Polarity::Positive))
                .collect(),
            variants: vec![],
            dropped_conflicts: 0,
        };
        assert!(matches!(split_train_dev(&d, 0.6, 1), Err(CorpusError::Precondition(_))));
        assert!(matches!(
            split_train_dev(
                &Dataset { instances: d.instances[..5].to_vec(), ..d.clone() },
                0.1,
                1
            ),
            Err(CorpusError::Precondition(_))
        ));
    }

    #[test]
    fn stratified_dev_mix_within_five_points() {
        // 1000 instances with a 50/30/20 class mix.
        let mut instances = Vec::new();
        for i in 0..1000 {
            let p = if i < 500 {
                Polarity::Positive
            } else if i < 800 {
                Polarity::Negative
            } else {
                Polarity::Neutral
            };
            instances.push(inst(&format!("i{i}"), "Tasty burgers here", "burgers", p));
        }
        let d = Dataset {
            name: "x".into(),
            split: Split::Train,
            instances,
            variants: vec![],
            dropped_conflicts: 0,
        };
        let (_, dev) = split_train_dev(&d, 0.1, 13).unwrap();
        let frac = |p: Polarity| {
            dev.instances.iter().filter(|i| i.polarity == p).count() as f64
                / dev.instances.len() as f64
        };
        assert!((frac(Polarity::Positive) - 0.5).abs() <= 0.05);
        assert!((frac(Polarity::Negative) - 0.3).abs() <= 0.05);
        assert!((frac(Polarity::Neutral) - 0.2).abs() <= 0.05);
    }

    #[test]
    fn groups_partition_variants() {
        let originals: Vec<_> = (0..5)
            .map(|i| inst(&format!("r{i}"), "Tasty burgers here", "burgers", Polarity::Positive))
            .collect();
        let mut variants = Vec::new();
        let strategies = [Strategy::RevTgt, Strategy::RevNon, Strategy::AddDiff];
        let mut k = 0;
        for (i, o) in originals.iter().enumerate() {
            for s in strategies.iter().take(if i < 2 { 3 } else { 2 }) {
                variants.push(VariantRecord {
                    source_id: o.id.clone(),
                    strategy: *s,
                    instance: inst(
                        &format!("v{k}"),
                        "Tasty burgers here",
                        "burgers",
                        Polarity::Positive,
                    ),
                });
                k += 1;
            }
        }
        assert_eq!(variants.len(), 12);
        let d = Dataset {
            name: "x".into(),
            split: Split::Test,
            instances: originals,
            variants,
            dropped_conflicts: 0,
        };
        let groups = group_variants(&d).unwrap();
        assert_eq!(groups.len(), 5);
        let members: usize = groups.iter().map(|g| g.len()).sum();
        assert_eq!(members, 17);
        let variant_total: usize = groups.iter().map(|g| g.variants.len()).sum();
        assert_eq!(variant_total, d.variants.len());
    }

    #[test]
    fn dangling_source_is_named() {
        let d = Dataset {
            name: "x".into(),
            split: Split::Test,
            instances: vec![inst("r1", "Tasty burgers", "burgers", Polarity::Positive)],
            variants: vec![VariantRecord {
                source_id: "ghost".into(),
                strategy: Strategy::AddDiff,
                instance: inst("v1", "Tasty burgers", "burgers", Polarity::Positive),
            }],
            dropped_conflicts: 0,
        };
        match group_variants(&d).unwrap_err() {
            CorpusError::DanglingSource(id) => assert_eq!(id, "ghost"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn no_variants_means_singleton_groups() {
        let d = Dataset {
            name: "x".into(),
            split: Split::Test,
            instances: vec![inst("r1", "Tasty burgers", "burgers", Polarity::Positive)],
            variants: vec![],
            dropped_conflicts: 0,
        };
        let groups = group_variants(&d).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 1);
    }
}
