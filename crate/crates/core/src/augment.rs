//! Spurious-content augmentation: AddDiffMix (prepend-or-append),
//! append-only AddDiff, and the RevTgt counterfactual baseline.
//!
//! AddDiffMix injects 1-3 opinion phrases of opposite sentiment about
//! aspects absent from the sentence, so the target label is untouched by
//! construction. RevTgt flips the target's sentiment mechanically by
//! inserting or removing a negator next to the first nearby polar token.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aspect_bank::{sample_phrases, AspectBank, BankError, OpinionPhrase, SentimentLexicon};
use crate::corpus::{Dataset, Instance, Polarity, Span};
use crate::seeding;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Prepend or append with `front_probability`.
    Mixed,
    /// Append only (the original AddDiff behaviour).
    RearOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub front_probability: f64,
    pub position_policy: PositionPolicy,
    /// Template pieces; see Table-1-style surface forms in the defaults.
    pub front_prefix: String,
    pub front_suffix: String,
    pub rear_prefix: String,
    pub rear_suffix: String,
    pub joiner: String,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_phrases: 1,
            max_phrases: 3,
            front_probability: 0.5,
            position_policy: PositionPolicy::Mixed,
            front_prefix: "Although ".into(),
            front_suffix: ", ".into(),
            rear_prefix: ", but ".into(),
            rear_suffix: ".".into(),
            joiner: " and ".into(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), BankError> {
        if !(1 <= self.min_phrases && self.min_phrases <= self.max_phrases && self.max_phrases <= 3)
        {
            return Err(BankError::Precondition(format!(
                "phrase counts must satisfy 1 <= min <= max <= 3, got {}..{}",
                self.min_phrases, self.max_phrases
            )));
        }
        if !(0.0..=1.0).contains(&self.front_probability) {
            return Err(BankError::Precondition(format!(
                "front_probability must be in [0,1], got {}",
                self.front_probability
            )));
        }
        Ok(())
    }

    fn effective_front_probability(&self) -> f64 {
        match self.position_policy {
            PositionPolicy::Mixed => self.front_probability,
            PositionPolicy::RearOnly => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Front,
    Rear,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    AddDiffMix,
    AddDiff,
    RevTgt,
    /// In-place spurious-token replacement (synthetic benchmark pairs).
    Intervention,
    Identity,
}

/// An original instance plus its injected spurious content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInstance {
    pub instance: Instance,
    pub source_id: String,
    pub position: Position,
    pub injected: Vec<OpinionPhrase>,
    pub kind: AugmentKind,
}

impl AugmentedInstance {
    pub fn identity(x: &Instance) -> AugmentedInstance {
        AugmentedInstance {
            instance: x.clone(),
            source_id: x.id.clone(),
            position: Position::None,
            injected: Vec::new(),
            kind: AugmentKind::Identity,
        }
    }
}

/// Ordered original/augmented pairs; every original appears exactly once.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PairedDataset {
    pub pairs: Vec<(Instance, AugmentedInstance)>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn identity_count(&self) -> usize {
        self.pairs.iter().filter(|(_, a)| a.kind == AugmentKind::Identity).count()
    }

    pub fn front_count(&self) -> usize {
        self.pairs.iter().filter(|(_, a)| a.position == Position::Front).count()
    }

    pub fn rear_count(&self) -> usize {
        self.pairs.iter().filter(|(_, a)| a.position == Position::Rear).count()
    }

    pub fn save_jsonl(&self, path: &std::path::Path) -> Result<(), BankError> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (orig, aug) in &self.pairs {
            let row = serde_json::json!({ "original": orig, "augmented": aug });
            writeln!(out, "{row}")?;
        }
        Ok(())
    }

    /// Inverse of [`PairedDataset::save_jsonl`].
    pub fn load_jsonl(path: &std::path::Path) -> Result<PairedDataset, BankError> {
        use std::io::BufRead;
        #[derive(Deserialize)]
        struct Row {
            original: Instance,
            augmented: AugmentedInstance,
        }
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut pairs = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line)?;
            pairs.push((row.original, row.augmented));
        }
        Ok(PairedDataset { pairs })
    }
}

/// Normalized aspect terms from the bank that occur in `text` as whole
/// token sequences; these are excluded from sampling so injected content
/// stays novel.
fn aspects_mentioned_in(bank: &AspectBank, sentence: &str) -> HashSet<String> {
    bank.aspect_terms()
        .filter(|a| text::contains_token_seq(sentence, a))
        .map(|a| a.to_string())
        .collect()
}

/// Strip one trailing terminal punctuation char, returning the body.
fn strip_terminal(textual: &str) -> &str {
    textual
        .strip_suffix(['.', '!', '?'])
        .map(str::trim_end)
        .unwrap_or(textual)
}

fn phrase_body(p: &OpinionPhrase) -> &str {
    strip_terminal(p.text.trim())
}

/// AddDiffMix on one instance: sample 1-3 opposite-polarity phrases about
/// novel aspects, prepend or append them, keep the label. Falls back to an
/// identity augmentation when no eligible phrase exists.
pub fn add_diff_mix<R: Rng>(
    x: &Instance,
    bank: &AspectBank,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedInstance, BankError> {
    cfg.validate()?;
    let want = match x.polarity.opposite() {
        Some(p) => p,
        // Neutral target: draw the injected side uniformly per call.
        None => {
            if rng.gen_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            }
        }
    };
    let k = rng.gen_range(cfg.min_phrases..=cfg.max_phrases);
    let front = rng.gen_bool(cfg.effective_front_probability());
    let exclude = aspects_mentioned_in(bank, &x.text);
    let Some(phrases) = sample_phrases(bank, want, &exclude, k, rng)? else {
        return Ok(AugmentedInstance::identity(x));
    };
    let joined = phrases.iter().map(phrase_body).collect::<Vec<_>>().join(&cfg.joiner);

    let (new_text, shift, position) = if front {
        let prefix = format!("{}{}{}", cfg.front_prefix, joined, cfg.front_suffix);
        let shift = text::char_len(&prefix);
        (format!("{prefix}{}", x.text), shift, Position::Front)
    } else {
        let body = strip_terminal(x.text.trim_end());
        (
            format!("{body}{}{}{}", cfg.rear_prefix, joined, cfg.rear_suffix),
            0,
            Position::Rear,
        )
    };
    let instance = Instance {
        id: format!("{}-aug", x.id),
        text: new_text,
        aspect_term: x.aspect_term.clone(),
        aspect_span: Span { start: x.aspect_span.start + shift, end: x.aspect_span.end + shift },
        polarity: x.polarity,
    };
    instance.validate().map_err(|e| BankError::Precondition(e.to_string()))?;
    let kind = match cfg.position_policy {
        PositionPolicy::Mixed => AugmentKind::AddDiffMix,
        PositionPolicy::RearOnly => AugmentKind::AddDiff,
    };
    Ok(AugmentedInstance {
        instance,
        source_id: x.id.clone(),
        position,
        injected: phrases,
        kind,
    })
}

/// RevTgt counterfactual: within ±5 tokens of the aspect span, negate the
/// first lexicon token matching the instance polarity (insert "not", or
/// remove an adjacent negator) and flip the label. Neutral targets and
/// instances without a nearby polar token come back as identity.
pub fn rev_tgt(x: &Instance, lex: &SentimentLexicon) -> AugmentedInstance {
    let Some(flipped) = x.polarity.opposite() else {
        return AugmentedInstance::identity(x);
    };
    let tokens = text::tokenize_spans(&x.text);
    let span = x.aspect_span;
    let aspect_idx: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < span.end && t.end > span.start)
        .map(|(i, _)| i)
        .collect();
    let (Some(&first), Some(&last)) = (aspect_idx.first(), aspect_idx.last()) else {
        return AugmentedInstance::identity(x);
    };
    let lo = first.saturating_sub(5);
    let hi = (last + 5).min(tokens.len().saturating_sub(1));
    let target = (lo..=hi).find(|&i| {
        !aspect_idx.contains(&i) && lex.polarity_of(&tokens[i].text) == Some(x.polarity)
    });
    let Some(ti) = target else {
        return AugmentedInstance::identity(x);
    };

    let chars: Vec<char> = x.text.chars().collect();
    let (new_text, edit_at, delta): (String, usize, isize) =
        if ti > 0 && lex.is_negator(&tokens[ti - 1].text) && !aspect_idx.contains(&(ti - 1)) {
            // Remove the adjacent negator (and the gap after it).
            let from = tokens[ti - 1].start;
            let to = tokens[ti].start;
            let mut s: String = chars[..from].iter().collect();
            s.extend(&chars[to..]);
            (s, from, -((to - from) as isize))
        } else {
            let at = tokens[ti].start;
            let mut s: String = chars[..at].iter().collect();
            s.push_str("not ");
            s.extend(&chars[at..]);
            (s, at, 4)
        };

    let move_offset = |o: usize| -> usize {
        if o >= edit_at {
            (o as isize + delta) as usize
        } else {
            o
        }
    };
    let instance = Instance {
        id: format!("{}-revtgt", x.id),
        text: new_text,
        aspect_term: x.aspect_term.clone(),
        aspect_span: Span { start: move_offset(span.start), end: move_offset(span.end) },
        polarity: flipped,
    };
    AugmentedInstance {
        instance,
        source_id: x.id.clone(),
        position: Position::None,
        injected: Vec::new(),
        kind: AugmentKind::RevTgt,
    }
}

/// One AddDiffMix augmentation per instance, each drawn from a per-instance
/// rng substream of `(cfg.seed, instance id)` so serial and fanned-out runs
/// agree.
pub fn augment_dataset(
    d: &Dataset,
    bank: &AspectBank,
    cfg: &AugmentConfig,
) -> Result<PairedDataset, BankError> {
    cfg.validate()?;
    let mut pairs = Vec::with_capacity(d.instances.len());
    for x in &d.instances {
        let mut rng = seeding::instance_stream(cfg.seed, "augment", &x.id);
        let aug = add_diff_mix(x, bank, cfg, &mut rng)?;
        pairs.push((x.clone(), aug));
    }
    Ok(PairedDataset { pairs })
}

/// One RevTgt augmentation per instance (the CAD comparison data).
pub fn rev_tgt_dataset(d: &Dataset, lex: &SentimentLexicon) -> PairedDataset {
    let pairs = d.instances.iter().map(|x| (x.clone(), rev_tgt(x, lex))).collect();
    PairedDataset { pairs }
}
