//! A small, fully self-implemented differentiable aspect-aware classifier.
//!
//! Architecture: token embeddings, attention pooling with the query built
//! from the mean aspect-token embedding, and a one-hidden-layer tanh MLP
//! over the pooled vector. Small enough that its analytic gradients can be
//! checked exactly against finite differences, and token-level hidden
//! states remain available for saliency.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance, Polarity, Span};
use crate::text;
use crate::Scalar;

pub const NUM_CLASSES: usize = 3;
/// Probability clamp applied before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Row-major matrix of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Mat<F> {
        Mat { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Mat<F> {
        let data = (0..rows * cols)
            .map(|_| F::from_f64(rng.gen_range(-bound..bound)).unwrap())
            .collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x (A: rows x cols, x: cols).
    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    /// y = A^T x (x: rows).
    pub fn matvec_t(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![F::zero(); self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            for (c, yc) in y.iter_mut().enumerate() {
                *yc = *yc + self.at(r, c) * xr;
            }
        }
        y
    }

    /// self += a * u v^T.
    pub fn add_outer(&mut self, u: &[F], v: &[F], a: F) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *self.at_mut(r, c) = self.at(r, c) + a * u[r] * v[c];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Train-split vocabulary with unk/pad specials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

pub const UNK: usize = 0;
pub const PAD: usize = 1;

impl Vocab {
    pub fn build(train: &Dataset) -> Vocab {
        let mut v = Vocab {
            token_to_id: BTreeMap::new(),
            id_to_token: vec!["<unk>".into(), "<pad>".into()],
        };
        v.token_to_id.insert("<unk>".into(), UNK);
        v.token_to_id.insert("<pad>".into(), PAD);
        for inst in &train.instances {
            for tok in text::tokenize(&inst.text) {
                v.intern(tok);
            }
        }
        v
    }

    fn intern(&mut self, tok: String) -> usize {
        if let Some(&id) = self.token_to_id.get(&tok) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(tok.clone());
        self.token_to_id.insert(tok, id);
        id
    }

    pub fn id(&self, tok: &str) -> usize {
        self.token_to_id.get(tok).copied().unwrap_or(UNK)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty token list")]
    EmptyInput,
    #[error("aspect token range {0}..{1} invalid for {2} tokens")]
    BadAspectRange(usize, usize, usize),
    #[error("non-finite parameter values")]
    NonFiniteParams,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {0} out of vocabulary of size {1}")]
    TokenOutOfRange(usize, usize),
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    /// |V| x d token embeddings.
    pub embedding: Mat<F>,
    /// d x d aspect-query projection.
    pub w_query: Mat<F>,
    /// d x d key projection.
    pub w_key: Mat<F>,
    /// d x h hidden weights (applied as W1^T pooled).
    pub w_hidden: Mat<F>,
    pub b_hidden: Vec<F>,
    /// h x 3 output weights.
    pub w_out: Mat<F>,
    pub b_out: Vec<F>,
}

/// Gradients in the same shapes as [`ModelParams`].
pub type ModelGrads<F> = ModelParams<F>;

impl<F: Scalar> ModelParams<F> {
    pub fn dim(&self) -> usize {
        self.w_query.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.cols
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    /// uniform(-0.1, 0.1) weights, zero biases.
    pub fn init<R: Rng>(vocab_size: usize, d: usize, h: usize, rng: &mut R) -> ModelParams<F> {
        ModelParams {
            embedding: Mat::uniform(vocab_size, d, 0.1, rng),
            w_query: Mat::uniform(d, d, 0.1, rng),
            w_key: Mat::uniform(d, d, 0.1, rng),
            w_hidden: Mat::uniform(d, h, 0.1, rng),
            b_hidden: vec![F::zero(); h],
            w_out: Mat::uniform(h, NUM_CLASSES, 0.1, rng),
            b_out: vec![F::zero(); NUM_CLASSES],
        }
    }

    pub fn zeros(vocab_size: usize, d: usize, h: usize) -> ModelParams<F> {
        ModelParams {
            embedding: Mat::zeros(vocab_size, d),
            w_query: Mat::zeros(d, d),
            w_key: Mat::zeros(d, d),
            w_hidden: Mat::zeros(d, h),
            b_hidden: vec![F::zero(); h],
            w_out: Mat::zeros(h, NUM_CLASSES),
            b_out: vec![F::zero(); NUM_CLASSES],
        }
    }

    pub fn zeros_like(&self) -> ModelParams<F> {
        Self::zeros(self.vocab_size(), self.dim(), self.hidden_dim())
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.w_query.is_finite()
            && self.w_key.is_finite()
            && self.w_hidden.is_finite()
            && self.w_out.is_finite()
            && self.b_hidden.iter().all(|v| v.is_finite())
            && self.b_out.iter().all(|v| v.is_finite())
    }

    /// Named views over every tensor, used by the optimizer and the
    /// checkpoint format. Order is fixed.
    pub fn tensors(&self) -> Vec<(&'static str, &[F], Vec<usize>)> {
        vec![
            ("embedding", &self.embedding.data[..], vec![self.embedding.rows, self.embedding.cols]),
            ("w_query", &self.w_query.data[..], vec![self.w_query.rows, self.w_query.cols]),
            ("w_key", &self.w_key.data[..], vec![self.w_key.rows, self.w_key.cols]),
            ("w_hidden", &self.w_hidden.data[..], vec![self.w_hidden.rows, self.w_hidden.cols]),
            ("b_hidden", &self.b_hidden[..], vec![self.b_hidden.len()]),
            ("w_out", &self.w_out.data[..], vec![self.w_out.rows, self.w_out.cols]),
            ("b_out", &self.b_out[..], vec![self.b_out.len()]),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [F])> {
        vec![
            ("embedding", &mut self.embedding.data[..]),
            ("w_query", &mut self.w_query.data[..]),
            ("w_key", &mut self.w_key.data[..]),
            ("w_hidden", &mut self.w_hidden.data[..]),
            ("b_hidden", &mut self.b_hidden[..]),
            ("w_out", &mut self.w_out.data[..]),
            ("b_out", &mut self.b_out[..]),
        ]
    }
}

/// Versioned checkpoint of named tensors, stored as f64 JSON.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<CheckpointTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl<F: Scalar> ModelParams<F> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, data, shape)| CheckpointTensor {
                    name: name.into(),
                    shape,
                    data: data.iter().map(|v| v.to_f64().unwrap()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<ModelParams<F>, ModelError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::ShapeMismatch(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let get = |name: &str| -> Result<&CheckpointTensor, ModelError> {
            ck.tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| ModelError::ShapeMismatch(format!("missing tensor {name}")))
        };
        let mat = |t: &CheckpointTensor| -> Result<Mat<F>, ModelError> {
            if t.shape.len() != 2 || t.shape[0] * t.shape[1] != t.data.len() {
                return Err(ModelError::ShapeMismatch(format!("tensor {}", t.name)));
            }
            Ok(Mat {
                rows: t.shape[0],
                cols: t.shape[1],
                data: t.data.iter().map(|&v| F::from_f64(v).unwrap()).collect(),
            })
        };
        let vecf = |t: &CheckpointTensor| -> Vec<F> {
            t.data.iter().map(|&v| F::from_f64(v).unwrap()).collect()
        };
        Ok(ModelParams {
            embedding: mat(get("embedding")?)?,
            w_query: mat(get("w_query")?)?,
            w_key: mat(get("w_key")?)?,
            w_hidden: mat(get("w_hidden")?)?,
            b_hidden: vecf(get("b_hidden")?),
            w_out: mat(get("w_out")?)?,
            b_out: vecf(get("b_out")?),
        })
    }
}

/// Probabilities over (negative, neutral, positive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDist<F> {
    pub probs: [F; NUM_CLASSES],
}

impl<F: Scalar> PredictionDist<F> {
    pub fn prob(&self, p: Polarity) -> F {
        self.probs[p.index()]
    }

    /// Argmax with ties broken by class order negative < neutral < positive.
    pub fn argmax(&self) -> Polarity {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Polarity::from_index(best).unwrap()
    }
}

/// Everything retained from a forward pass for one backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub token_ids: Vec<usize>,
    /// Per-token embedded vectors: the model's last-layer hidden states.
    pub hidden: Vec<Vec<F>>,
    pub aspect_range: (usize, usize),
    pub aspect_mean: Vec<F>,
    pub query: Vec<F>,
    pub keys: Vec<Vec<F>>,
    pub attention: Vec<F>,
    pub pooled: Vec<F>,
    /// Pooled vector after the dropout mask (equal to `pooled` in eval).
    pub pooled_dropped: Vec<F>,
    /// Inverted-dropout mask values (1/keep or 0); all-ones in eval.
    pub dropout_mask: Vec<F>,
    pub pre_activation: Vec<F>,
    pub hidden_act: Vec<F>,
    pub logits: Vec<F>,
}

/// Output of a backward pass: parameter gradients plus the gradient at
/// each token position's last-layer hidden state.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub params: ModelGrads<F>,
    pub token_hidden: Vec<Vec<F>>,
}

/// Lowercased, punctuation-split tokens.
pub fn tokenize(input: &str) -> Vec<String> {
    text::tokenize(input)
}

/// Token-index range covering the chars of an aspect span.
pub fn aspect_token_range(sentence: &str, span: Span) -> Option<(usize, usize)> {
    let toks = text::tokenize_spans(sentence);
    let hits: Vec<usize> = toks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < span.end && t.end > span.start)
        .map(|(i, _)| i)
        .collect();
    match (hits.first(), hits.last()) {
        (Some(&a), Some(&b)) => Some((a, b + 1)),
        _ => None,
    }
}

fn softmax<F: Scalar>(xs: &[F]) -> Vec<F> {
    let max = xs.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Clamp probabilities into [eps, 1] for safe logs; the vector is kept as
/// produced by softmax otherwise (sum stays 1 within 1e-9).
pub fn clamp_prob<F: Scalar>(p: F) -> F {
    let eps = F::from_f64(PROB_EPS).unwrap();
    p.max(eps)
}

/// Eval-mode forward pass: attention pooling keyed on the aspect tokens,
/// then the MLP head.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    token_ids: &[usize],
    aspect_range: (usize, usize),
) -> Result<(PredictionDist<F>, ForwardCache<F>), ModelError> {
    forward_dropout(params, token_ids, aspect_range, None)
}

/// Forward with optional dropout on the pooled vector (training only).
/// `dropout` is `(rate, rng)`.
pub fn forward_dropout<F: Scalar>(
    params: &ModelParams<F>,
    token_ids: &[usize],
    aspect_range: (usize, usize),
    dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<(PredictionDist<F>, ForwardCache<F>), ModelError> {
    if token_ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let (a_lo, a_hi) = aspect_range;
    if a_lo >= a_hi || a_hi > token_ids.len() {
        return Err(ModelError::BadAspectRange(a_lo, a_hi, token_ids.len()));
    }
    if !params.is_finite() {
        return Err(ModelError::NonFiniteParams);
    }
    let d = params.dim();
    for &id in token_ids {
        if id >= params.vocab_size() {
            return Err(ModelError::TokenOutOfRange(id, params.vocab_size()));
        }
    }

    let hidden: Vec<Vec<F>> =
        token_ids.iter().map(|&id| params.embedding.row(id).to_vec()).collect();

    let mut aspect_mean = vec![F::zero(); d];
    let count = F::from_usize(a_hi - a_lo).unwrap();
    for h in &hidden[a_lo..a_hi] {
        for (m, &v) in aspect_mean.iter_mut().zip(h) {
            *m = *m + v;
        }
    }
    for m in &mut aspect_mean {
        *m = *m / count;
    }

    let query = params.w_query.matvec(&aspect_mean);
    let keys: Vec<Vec<F>> = hidden.iter().map(|h| params.w_key.matvec(h)).collect();
    let scale = F::from_f64((d as f64).sqrt()).unwrap();
    let scores: Vec<F> = keys
        .iter()
        .map(|k| query.iter().zip(k).fold(F::zero(), |a, (&q, &ki)| a + q * ki) / scale)
        .collect();
    let attention = softmax(&scores);

    let mut pooled = vec![F::zero(); d];
    for (a, h) in attention.iter().zip(&hidden) {
        for (p, &v) in pooled.iter_mut().zip(h) {
            *p = *p + *a * v;
        }
    }

    let dropout_mask: Vec<F> = match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let inv = F::from_f64(1.0 / keep).unwrap();
            let r = rng;
            (0..d)
                .map(|_| if r.gen_range(0.0..1.0) < keep { inv } else { F::zero() })
                .collect()
        }
        _ => vec![F::one(); d],
    };
    let pooled_dropped: Vec<F> =
        pooled.iter().zip(&dropout_mask).map(|(&p, &m)| p * m).collect();

    let mut pre_activation = params.w_hidden.matvec_t(&pooled_dropped);
    for (u, &b) in pre_activation.iter_mut().zip(&params.b_hidden) {
        *u = *u + b;
    }
    let hidden_act: Vec<F> = pre_activation.iter().map(|&u| u.tanh()).collect();
    let mut logits = params.w_out.matvec_t(&hidden_act);
    for (z, &b) in logits.iter_mut().zip(&params.b_out) {
        *z = *z + b;
    }

    let probs_vec = softmax(&logits);
    let probs = [probs_vec[0], probs_vec[1], probs_vec[2]];
    let cache = ForwardCache {
        token_ids: token_ids.to_vec(),
        hidden,
        aspect_range,
        aspect_mean,
        query,
        keys,
        attention,
        pooled,
        pooled_dropped,
        dropout_mask,
        pre_activation,
        hidden_act,
        logits,
    };
    Ok((PredictionDist { probs }, cache))
}

/// Exact analytic backward pass. `upstream` is dL/dlogits. Returns
/// parameter gradients and the gradient at every token position's hidden
/// state (its embedding as used at that position).
pub fn backward<F: Scalar>(
    cache: &ForwardCache<F>,
    params: &ModelParams<F>,
    upstream: &[F],
) -> Result<Gradients<F>, ModelError> {
    if upstream.len() != NUM_CLASSES {
        return Err(ModelError::ShapeMismatch(format!(
            "upstream gradient has length {}, expected {NUM_CLASSES}",
            upstream.len()
        )));
    }
    let d = params.dim();
    let h = params.hidden_dim();
    if cache.pooled.len() != d || cache.hidden_act.len() != h {
        return Err(ModelError::ShapeMismatch("cache does not match params".into()));
    }
    let n = cache.token_ids.len();
    let mut g = params.zeros_like();

    // Output layer.
    for (j, &dz) in upstream.iter().enumerate() {
        g.b_out[j] = g.b_out[j] + dz;
    }
    g.w_out.add_outer(&cache.hidden_act, upstream, F::one());
    let d_hidden_act = params.w_out.matvec(upstream);

    // tanh.
    let d_pre: Vec<F> = d_hidden_act
        .iter()
        .zip(&cache.hidden_act)
        .map(|(&dh, &a)| dh * (F::one() - a * a))
        .collect();
    for (j, &du) in d_pre.iter().enumerate() {
        g.b_hidden[j] = g.b_hidden[j] + du;
    }
    g.w_hidden.add_outer(&cache.pooled_dropped, &d_pre, F::one());
    let d_pooled_dropped = params.w_hidden.matvec(&d_pre);
    let d_pooled: Vec<F> = d_pooled_dropped
        .iter()
        .zip(&cache.dropout_mask)
        .map(|(&v, &m)| v * m)
        .collect();

    // pooled = sum_i a_i h_i.
    let mut d_attention = vec![F::zero(); n];
    let mut d_hidden: Vec<Vec<F>> = vec![vec![F::zero(); d]; n];
    for i in 0..n {
        let hi = &cache.hidden[i];
        d_attention[i] = d_pooled.iter().zip(hi).fold(F::zero(), |a, (&dp, &v)| a + dp * v);
        for (dh, &dp) in d_hidden[i].iter_mut().zip(&d_pooled) {
            *dh = *dh + cache.attention[i] * dp;
        }
    }

    // Softmax over scores.
    let dot = cache
        .attention
        .iter()
        .zip(&d_attention)
        .fold(F::zero(), |acc, (&a, &da)| acc + a * da);
    let d_scores: Vec<F> = cache
        .attention
        .iter()
        .zip(&d_attention)
        .map(|(&a, &da)| a * (da - dot))
        .collect();

    // scores_i = (q . k_i) / sqrt(d).
    let scale = F::from_f64((d as f64).sqrt()).unwrap();
    let mut d_query = vec![F::zero(); d];
    for i in 0..n {
        let ds = d_scores[i] / scale;
        for (dq, &k) in d_query.iter_mut().zip(&cache.keys[i]) {
            *dq = *dq + ds * k;
        }
        // k_i = W_k h_i.
        let d_key: Vec<F> = cache.query.iter().map(|&q| q * ds).collect();
        g.w_key.add_outer(&d_key, &cache.hidden[i], F::one());
        let dh = params.w_key.matvec_t(&d_key);
        for (a, b) in d_hidden[i].iter_mut().zip(dh) {
            *a = *a + b;
        }
    }

    // q = W_q mean(aspect hidden).
    g.w_query.add_outer(&d_query, &cache.aspect_mean, F::one());
    let d_aspect_mean = params.w_query.matvec_t(&d_query);
    let (a_lo, a_hi) = cache.aspect_range;
    let inv_count = F::one() / F::from_usize(a_hi - a_lo).unwrap();
    for dhi in d_hidden.iter_mut().take(a_hi).skip(a_lo) {
        for (a, &b) in dhi.iter_mut().zip(&d_aspect_mean) {
            *a = *a + b * inv_count;
        }
    }

    // Scatter per-position gradients into embedding rows.
    for (i, &id) in cache.token_ids.iter().enumerate() {
        for (c, &v) in d_hidden[i].iter().enumerate() {
            *g.embedding.at_mut(id, c) = g.embedding.at(id, c) + v;
        }
    }

    Ok(Gradients { params: g, token_hidden: d_hidden })
}

/// Forward on an instance: tokenize, encode, locate the aspect tokens.
pub fn forward_instance<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocab,
    instance: &Instance,
) -> Result<(PredictionDist<F>, ForwardCache<F>), ModelError> {
    let tokens = tokenize(&instance.text);
    let ids = vocab.encode(&tokens);
    let range = aspect_token_range(&instance.text, instance.aspect_span)
        .ok_or(ModelError::BadAspectRange(0, 0, ids.len()))?;
    forward(params, &ids, range)
}

/// Argmax prediction with the fixed tie-break order.
pub fn predict<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocab,
    instance: &Instance,
) -> Result<Polarity, ModelError> {
    Ok(forward_instance(params, vocab, instance)?.0.argmax())
}
