//! Tokenization and character-offset helpers.
//!
//! All offsets in this crate are in Unicode scalar values (chars), not
//! bytes, so spans stay portable across serializations.

/// A token with its char-offset span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// Lowercased surface form.
    pub text: String,
    /// Inclusive char offset.
    pub start: usize,
    /// Exclusive char offset.
    pub end: usize,
}

impl Token {
    pub fn is_punctuation(&self) -> bool {
        self.text.chars().all(|c| !c.is_alphanumeric())
    }
}

/// Lowercase, split on whitespace, and split punctuation characters into
/// their own tokens. Deterministic; empty text gives an empty list.
pub fn tokenize_spans(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut buf = String::new();
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() || c == '\'' {
            if word_start.is_none() {
                word_start = Some(i);
            }
            buf.extend(c.to_lowercase());
        } else {
            if let Some(s) = word_start.take() {
                tokens.push(Token { text: std::mem::take(&mut buf), start: s, end: i });
            }
            if !c.is_whitespace() {
                tokens.push(Token { text: c.to_lowercase().collect(), start: i, end: i + 1 });
            }
        }
    }
    if let Some(s) = word_start {
        let end = text.chars().count();
        tokens.push(Token { text: buf, start: s, end });
    }
    tokens
}

/// Just the token strings.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_spans(text).into_iter().map(|t| t.text).collect()
}

/// Slice a string by char offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// Number of chars in a string.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Collapse whitespace runs to single spaces and trim.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True when `needle` occurs in `haystack` as a whole-token sequence
/// (case-insensitive). Multi-token needles match consecutive tokens.
pub fn contains_token_seq(haystack: &str, needle: &str) -> bool {
    let hay = tokenize(haystack);
    let ndl = tokenize(needle);
    if ndl.is_empty() || hay.len() < ndl.len() {
        return false;
    }
    hay.windows(ndl.len()).any(|w| w == ndl.as_slice())
}
