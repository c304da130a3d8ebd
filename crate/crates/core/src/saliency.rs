//! Gradient-norm token saliency: backpropagate the cross-entropy loss to
//! each token's last-layer hidden state, take L2 norms, normalize by the
//! largest unmasked norm, and render as bucketed ANSI or HTML colors.
//! Punctuation and aspect-term tokens are masked out.

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::model::{self, ModelError, ModelParams, Vocab, NUM_CLASSES};
use crate::text;
use crate::Scalar;

/// Which label's cross-entropy the gradient is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyTarget {
    Gold,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSaliency {
    pub token: String,
    pub norm: f64,
    /// Norm divided by the largest unmasked norm; masked tokens carry 0.
    pub intensity: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub id: String,
    pub tokens: Vec<TokenSaliency>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Ansi,
    Html,
}

fn is_punctuation(token: &str) -> bool {
    !token.chars().any(|c| c.is_alphanumeric())
}

/// Compute a saliency map for one instance: forward in eval mode (no
/// dropout), backpropagate the target label's CE to every token position's
/// hidden state, then L2-norm and normalize.
pub fn token_saliency<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocab,
    instance: &Instance,
    target: SaliencyTarget,
) -> Result<SaliencyMap, ModelError> {
    let (dist, cache) = model::forward_instance(params, vocab, instance)?;
    let label = match target {
        SaliencyTarget::Gold => instance.polarity,
        SaliencyTarget::Predicted => dist.argmax(),
    };
    let mut upstream = [F::zero(); NUM_CLASSES];
    for (j, u) in upstream.iter_mut().enumerate() {
        let onehot = if j == label.index() { F::one() } else { F::zero() };
        *u = dist.probs[j] - onehot;
    }
    let grads = model::backward(&cache, params, &upstream)?;

    let spans = text::tokenize_spans(&instance.text);
    debug_assert_eq!(spans.len(), grads.token_hidden.len());
    let (a_lo, a_hi) = cache.aspect_range;
    let norms: Vec<f64> = grads
        .token_hidden
        .iter()
        .map(|g| {
            g.iter()
                .map(|v| {
                    let v = v.to_f64().unwrap();
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let masked: Vec<bool> = spans
        .iter()
        .enumerate()
        .map(|(i, t)| is_punctuation(&t.text) || (i >= a_lo && i < a_hi))
        .collect();
    let max = norms
        .iter()
        .zip(&masked)
        .filter(|(_, &m)| !m)
        .map(|(&n, _)| n)
        .fold(0.0_f64, f64::max);
    let tokens = spans
        .iter()
        .zip(&norms)
        .zip(&masked)
        .map(|((t, &norm), &masked)| TokenSaliency {
            token: t.text.clone(),
            norm,
            intensity: if masked {
                0.0
            } else if max > 0.0 {
                norm / max
            } else {
                // All unmasked norms are equal (zero): report uniform full
                // intensity rather than dividing by zero.
                1.0
            },
            masked,
        })
        .collect();
    Ok(SaliencyMap { id: instance.id.clone(), tokens })
}

fn bucket(intensity: f64) -> usize {
    if intensity >= 0.66 {
        3
    } else if intensity >= 0.33 {
        2
    } else if intensity > 0.0 {
        1
    } else {
        0
    }
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a map as a single line (ANSI) or an HTML fragment. Tokens fall
/// into three intensity buckets; masked or zero-intensity tokens are left
/// uncolored.
pub fn render(map: &SaliencyMap, mode: RenderMode) -> String {
    let unmasked = map.tokens.iter().filter(|t| !t.masked).count();
    match mode {
        RenderMode::Ansi => {
            let mut out = String::new();
            if unmasked == 0 {
                out.push_str("[saliency: no unmasked tokens] ");
            }
            let words: Vec<String> = map
                .tokens
                .iter()
                .map(|t| match bucket(t.intensity) {
                    3 => format!("\x1b[48;5;196m{}\x1b[0m", t.token),
                    2 => format!("\x1b[48;5;208m{}\x1b[0m", t.token),
                    1 => format!("\x1b[48;5;222m{}\x1b[0m", t.token),
                    _ => t.token.clone(),
                })
                .collect();
            out.push_str(&words.join(" "));
            out
        }
        RenderMode::Html => {
            let mut out = String::new();
            if unmasked == 0 {
                out.push_str("<!-- saliency: no unmasked tokens -->");
            }
            let words: Vec<String> = map
                .tokens
                .iter()
                .map(|t| {
                    let esc = escape_html(&t.token);
                    match bucket(t.intensity) {
                        3 => format!("<span class=\"sal-dark\">{esc}</span>"),
                        2 => format!("<span class=\"sal-medium\">{esc}</span>"),
                        1 => format!("<span class=\"sal-light\">{esc}</span>"),
                        _ => esc,
                    }
                })
                .collect();
            out.push_str(&words.join(" "));
            out
        }
    }
}

/// A full standalone HTML report: one section per map.
pub fn html_report(maps: &[SaliencyMap]) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><style>\n\
         .sal-dark { background: #e05252; }\n\
         .sal-medium { background: #eda75c; }\n\
         .sal-light { background: #f2dc9b; }\n\
         </style></head><body>\n",
    );
    for map in maps {
        out.push_str(&format!(
            "<section><h3>{}</h3><p>{}</p></section>\n",
            escape_html(&map.id),
            render(map, RenderMode::Html)
        ));
    }
    out.push_str("</body></html>\n");
    out
}
