//! The AspectSet: aspect-anchored opinion phrases with polarity, used as
//! the sampling pool for AddDiffMix.
//!
//! Phrases are extracted with a lexicon-window heuristic (a token window
//! around the aspect span, trimmed at sentence punctuation) rather than a
//! pretrained parser; the phrase inherits the gold polarity of its source
//! instance. Neutral instances contribute nothing: AddDiffMix samples
//! phrases of *opposite* sentiment and neutral has no opposite.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Polarity};
use crate::text;

/// Bundled default lexicon (~200 polar words, ~10 negators).
pub const DEFAULT_LEXICON: &str = include_str!("../assets/sentiment_lexicon.tsv");

const MIN_PHRASE_TOKENS: usize = 2;
const MAX_PHRASE_TOKENS: usize = 20;

/// An opinion phrase anchored on an aspect term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpinionPhrase {
    pub text: String,
    pub aspect_term: String,
    pub polarity: Polarity,
    pub source_id: String,
}

impl OpinionPhrase {
    pub fn normalized_aspect(&self) -> String {
        text::normalize_ws(&self.aspect_term).to_lowercase()
    }
}

/// Token -> polar class, plus a negator set.
#[derive(Debug, Clone, Default)]
pub struct SentimentLexicon {
    polar: HashMap<String, Polarity>,
    negators: HashSet<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum BankError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("lexicon parse error at line {line}: {reason}")]
    LexiconParse { line: usize, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl SentimentLexicon {
    pub fn parse(content: &str) -> Result<SentimentLexicon, BankError> {
        let mut lex = SentimentLexicon::default();
        for (i, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(token), Some(class)) = (parts.next(), parts.next()) else {
                return Err(BankError::LexiconParse {
                    line: i + 1,
                    reason: "expected token<TAB>class".into(),
                });
            };
            let token = token.to_lowercase();
            match class {
                "positive" => {
                    lex.polar.insert(token, Polarity::Positive);
                }
                "negative" => {
                    lex.polar.insert(token, Polarity::Negative);
                }
                "negator" => {
                    lex.negators.insert(token);
                }
                other => {
                    return Err(BankError::LexiconParse {
                        line: i + 1,
                        reason: format!("unknown class {other:?}"),
                    })
                }
            }
        }
        // Negators must stay disjoint from the polar sets.
        for n in &lex.negators {
            if lex.polar.contains_key(n) {
                return Err(BankError::LexiconParse {
                    line: 0,
                    reason: format!("token {n:?} is both polar and negator"),
                });
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<SentimentLexicon, BankError> {
        let file = std::fs::File::open(path)?;
        let mut content = String::new();
        for line in std::io::BufReader::new(file).lines() {
            content.push_str(&line?);
            content.push('\n');
        }
        Self::parse(&content)
    }

    pub fn bundled() -> SentimentLexicon {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is well-formed")
    }

    pub fn polarity_of(&self, token: &str) -> Option<Polarity> {
        self.polar.get(&token.to_lowercase()).copied()
    }

    pub fn is_negator(&self, token: &str) -> bool {
        self.negators.contains(&token.to_lowercase())
    }
}

/// The sampling pool: opinion phrases indexed by polarity and by
/// normalized aspect term, with stable insertion ordering.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AspectBank {
    phrases: Vec<OpinionPhrase>,
    by_polarity: BTreeMap<Polarity, Vec<usize>>,
    by_aspect: BTreeMap<String, Vec<usize>>,
    /// Instances whose window held no lexicon token (or an out-of-range
    /// phrase) and were skipped.
    pub skipped: usize,
}

impl AspectBank {
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> &[OpinionPhrase] {
        &self.phrases
    }

    pub fn with_polarity(&self, p: Polarity) -> impl Iterator<Item = &OpinionPhrase> {
        self.by_polarity
            .get(&p)
            .into_iter()
            .flatten()
            .map(move |&i| &self.phrases[i])
    }

    /// Every normalized aspect term in the bank.
    pub fn aspect_terms(&self) -> impl Iterator<Item = &str> {
        self.by_aspect.keys().map(String::as_str)
    }

    fn insert(&mut self, phrase: OpinionPhrase) {
        let idx = self.phrases.len();
        self.by_polarity.entry(phrase.polarity).or_default().push(idx);
        self.by_aspect.entry(phrase.normalized_aspect()).or_default().push(idx);
        self.phrases.push(phrase);
    }

    /// Serialize the pool to JSONL for inspection.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), BankError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.phrases {
            writeln!(out, "{}", serde_json::to_string(p).expect("phrase serializes"))?;
        }
        Ok(())
    }
}

/// Extract the AspectSet from a training dataset. For each positive or
/// negative instance, the token window of `±window` around the aspect span
/// is trimmed at sentence punctuation (. ! ? ;) and kept when it holds at
/// least one lexicon polar token; the phrase gets the instance's gold
/// polarity. Duplicate (text, aspect_term) pairs are dropped.
pub fn build_bank(
    d: &Dataset,
    lex: &SentimentLexicon,
    window: usize,
) -> Result<AspectBank, BankError> {
    if window < 2 {
        return Err(BankError::Precondition(format!("window must be >= 2, got {window}")));
    }
    let mut bank = AspectBank::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for inst in &d.instances {
        if inst.polarity == Polarity::Neutral {
            continue;
        }
        let tokens = text::tokenize_spans(&inst.text);
        let span = inst.aspect_span;
        let aspect_tokens: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < span.end && t.end > span.start)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (aspect_tokens.first(), aspect_tokens.last()) else {
            bank.skipped += 1;
            continue;
        };
        let mut lo = first.saturating_sub(window);
        let mut hi = (last + window).min(tokens.len() - 1);
        // Trim at sentence punctuation between the window edge and the aspect.
        const SENTENCE_PUNCT: [&str; 4] = [".", "!", "?", ";"];
        for i in (lo..first).rev() {
            if SENTENCE_PUNCT.contains(&tokens[i].text.as_str()) {
                lo = i + 1;
                break;
            }
        }
        for (i, t) in tokens.iter().enumerate().take(hi + 1).skip(last + 1) {
            if SENTENCE_PUNCT.contains(&t.text.as_str()) {
                hi = i.saturating_sub(1);
                break;
            }
        }
        let window_tokens = &tokens[lo..=hi];
        let has_polar = window_tokens.iter().any(|t| lex.polarity_of(&t.text).is_some());
        let n_tokens = window_tokens.len();
        if !has_polar || !(MIN_PHRASE_TOKENS..=MAX_PHRASE_TOKENS).contains(&n_tokens) {
            bank.skipped += 1;
            continue;
        }
        let phrase_text =
            text::char_slice(&inst.text, window_tokens[0].start, window_tokens[n_tokens - 1].end);
        let key = (phrase_text.clone(), inst.aspect_term.clone());
        if !seen.insert(key) {
            continue;
        }
        bank.insert(OpinionPhrase {
            text: phrase_text,
            aspect_term: inst.aspect_term.clone(),
            polarity: inst.polarity,
            source_id: inst.id.clone(),
        });
    }
    Ok(bank)
}

/// Sample up to `n` phrases of the wanted polarity whose aspect terms are
/// outside `exclude_aspects` and pairwise distinct. Uniform without
/// replacement given the rng. Returns `None` when no phrase is eligible so
/// callers can fall back to an identity augmentation.
pub fn sample_phrases<R: Rng>(
    bank: &AspectBank,
    want_polarity: Polarity,
    exclude_aspects: &HashSet<String>,
    n: usize,
    rng: &mut R,
) -> Result<Option<Vec<OpinionPhrase>>, BankError> {
    if want_polarity == Polarity::Neutral {
        return Err(BankError::Precondition("cannot sample neutral phrases".into()));
    }
    if !(1..=3).contains(&n) {
        return Err(BankError::Precondition(format!("n must be in 1..=3, got {n}")));
    }
    let mut eligible: Vec<&OpinionPhrase> = bank
        .with_polarity(want_polarity)
        .filter(|p| !exclude_aspects.contains(&p.normalized_aspect()))
        .collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    eligible.shuffle(rng);
    let mut taken = Vec::new();
    let mut used_aspects: HashSet<String> = HashSet::new();
    for p in eligible {
        if used_aspects.insert(p.normalized_aspect()) {
            taken.push(p.clone());
            if taken.len() == n {
                break;
            }
        }
    }
    Ok(Some(taken))
}
