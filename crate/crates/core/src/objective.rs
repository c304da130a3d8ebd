//! The CRR loss: paired cross-entropy plus a weighted divergence between
//! the original and augmented prediction distributions.
//!
//! Three divergence variants are supported: forward KL D(p_orig || p_aug),
//! reverse KL, and Jensen-Shannon. All logs are natural (nats) and all
//! probabilities are clamped to [1e-7, 1] before any log.

use serde::{Deserialize, Serialize};

use crate::corpus::Polarity;
use crate::model::{clamp_prob, PredictionDist, NUM_CLASSES};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// D(p_orig || p_aug).
    KlForward,
    /// D(p_aug || p_orig).
    KlReverse,
    /// Symmetric Jensen-Shannon divergence.
    Js,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 3] =
        [DivergenceKind::KlForward, DivergenceKind::KlReverse, DivergenceKind::Js];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig<F> {
    /// Weight of the divergence term; zero gives the adversarial-training
    /// objective (plain CE on both branches).
    pub alpha: F,
    pub divergence: DivergenceKind,
    /// Treat the original-branch distribution as a constant inside the
    /// divergence (no gradient through that slot).
    pub freeze_original_in_div: bool,
}

impl<F: Scalar> LossConfig<F> {
    pub fn new(alpha: F, divergence: DivergenceKind) -> LossConfig<F> {
        LossConfig { alpha, divergence, freeze_original_in_div: false }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.alpha < F::zero() || !self.alpha.is_finite() {
            return Err(format!("alpha must be a finite non-negative scalar, got {:?}", self.alpha));
        }
        Ok(())
    }
}

/// Per-term loss values, all in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<F> {
    pub ce_orig: F,
    pub ce_aug: F,
    pub div: F,
    pub total: F,
}

fn ln_clamped<F: Scalar>(p: F) -> F {
    clamp_prob(p).ln()
}

/// Cross entropy of each branch at the gold label.
pub fn cross_entropy_pair<F: Scalar>(
    p_orig: &PredictionDist<F>,
    p_aug: &PredictionDist<F>,
    y: Polarity,
) -> (F, F) {
    (-ln_clamped(p_orig.prob(y)), -ln_clamped(p_aug.prob(y)))
}

/// Divergence between two distributions with clamped log arguments.
/// Nonnegative for all kinds.
pub fn divergence<F: Scalar>(
    kind: DivergenceKind,
    p: &PredictionDist<F>,
    q: &PredictionDist<F>,
) -> F {
    let kl = |a: &[F; NUM_CLASSES], b: &[F; NUM_CLASSES]| -> F {
        a.iter()
            .zip(b)
            .fold(F::zero(), |acc, (&ai, &bi)| {
                acc + clamp_prob(ai) * (ln_clamped(ai) - ln_clamped(bi))
            })
    };
    let v = match kind {
        DivergenceKind::KlForward => kl(&p.probs, &q.probs),
        DivergenceKind::KlReverse => kl(&q.probs, &p.probs),
        DivergenceKind::Js => {
            let half = F::from_f64(0.5).unwrap();
            let mut m = [F::zero(); NUM_CLASSES];
            for i in 0..NUM_CLASSES {
                m[i] = half * (p.probs[i] + q.probs[i]);
            }
            half * kl(&p.probs, &m) + half * kl(&q.probs, &m)
        }
    };
    v.max(F::zero())
}

/// The full CRR breakdown: ce_orig + ce_aug + alpha * div.
pub fn crr_loss<F: Scalar>(
    p_orig: &PredictionDist<F>,
    p_aug: &PredictionDist<F>,
    y: Polarity,
    cfg: &LossConfig<F>,
) -> LossBreakdown<F> {
    let (ce_orig, ce_aug) = cross_entropy_pair(p_orig, p_aug, y);
    let div = divergence(cfg.divergence, p_orig, p_aug);
    LossBreakdown { ce_orig, ce_aug, div, total: ce_orig + ce_aug + cfg.alpha * div }
}

fn softmax<F: Scalar>(logits: &[F; NUM_CLASSES]) -> [F; NUM_CLASSES] {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out = [F::zero(); NUM_CLASSES];
    let mut sum = F::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum = sum + *o;
    }
    for o in &mut out {
        *o = *o / sum;
    }
    out
}

/// dD/dp and dD/dq for the selected divergence, evaluated away from the
/// clamp region.
fn divergence_prob_grads<F: Scalar>(
    kind: DivergenceKind,
    p: &[F; NUM_CLASSES],
    q: &[F; NUM_CLASSES],
) -> ([F; NUM_CLASSES], [F; NUM_CLASSES]) {
    let mut dp = [F::zero(); NUM_CLASSES];
    let mut dq = [F::zero(); NUM_CLASSES];
    let one = F::one();
    match kind {
        DivergenceKind::KlForward => {
            for i in 0..NUM_CLASSES {
                dp[i] = (ln_clamped(p[i]) - ln_clamped(q[i])) + one;
                dq[i] = -clamp_prob(p[i]) / clamp_prob(q[i]);
            }
        }
        DivergenceKind::KlReverse => {
            for i in 0..NUM_CLASSES {
                dq[i] = (ln_clamped(q[i]) - ln_clamped(p[i])) + one;
                dp[i] = -clamp_prob(q[i]) / clamp_prob(p[i]);
            }
        }
        DivergenceKind::Js => {
            let half = F::from_f64(0.5).unwrap();
            for i in 0..NUM_CLASSES {
                let m = half * (p[i] + q[i]);
                dp[i] = half * (ln_clamped(p[i]) - ln_clamped(m));
                dq[i] = half * (ln_clamped(q[i]) - ln_clamped(m));
            }
        }
    }
    (dp, dq)
}

/// Push a probability-space gradient through the softmax at one branch:
/// dL/dz_k = p_k (g_k - sum_i p_i g_i).
fn through_softmax<F: Scalar>(p: &[F; NUM_CLASSES], g: &[F; NUM_CLASSES]) -> [F; NUM_CLASSES] {
    let dot = p.iter().zip(g).fold(F::zero(), |acc, (&pi, &gi)| acc + pi * gi);
    let mut out = [F::zero(); NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        out[i] = p[i] * (g[i] - dot);
    }
    out
}

/// Exact gradient of the CRR total wrt both branch logit vectors. Both
/// branches receive gradient: the divergence couples them (unless the
/// original branch is frozen in the divergence by config).
pub fn crr_loss_gradient<F: Scalar>(
    logits_orig: &[F; NUM_CLASSES],
    logits_aug: &[F; NUM_CLASSES],
    y: Polarity,
    cfg: &LossConfig<F>,
) -> ([F; NUM_CLASSES], [F; NUM_CLASSES]) {
    let p = softmax(logits_orig);
    let q = softmax(logits_aug);
    let mut d_orig = [F::zero(); NUM_CLASSES];
    let mut d_aug = [F::zero(); NUM_CLASSES];
    // Softmax-CE closed form on each branch.
    for i in 0..NUM_CLASSES {
        let onehot = if i == y.index() { F::one() } else { F::zero() };
        d_orig[i] = p[i] - onehot;
        d_aug[i] = q[i] - onehot;
    }
    if cfg.alpha > F::zero() {
        let (dp, dq) = divergence_prob_grads(cfg.divergence, &p, &q);
        let go = through_softmax(&p, &dp);
        let ga = through_softmax(&q, &dq);
        for i in 0..NUM_CLASSES {
            if !cfg.freeze_original_in_div {
                d_orig[i] = d_orig[i] + cfg.alpha * go[i];
            }
            d_aug[i] = d_aug[i] + cfg.alpha * ga[i];
        }
    }
    (d_orig, d_aug)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn dist(p: [f64; 3]) -> PredictionDist<f64> {
        PredictionDist { probs: p }
    }

    fn random_dist(rng: &mut impl Rng) -> PredictionDist<f64> {
        let raw: [f64; 3] = [rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)];
        let s: f64 = raw.iter().sum();
        dist([raw[0] / s, raw[1] / s, raw[2] / s])
    }

    #[test]
    fn ce_on_certain_prediction_is_near_zero() {
        let p = dist([0.0, 0.0, 1.0]);
        let (ce, _) = cross_entropy_pair(&p, &p, Polarity::Positive);
        assert!((ce - -(1.0f64.ln())).abs() < 1e-12);
        assert!(ce.abs() < 1e-9);
    }

    #[test]
    fn ce_half_is_ln_two() {
        let p = dist([0.5, 0.25, 0.25]);
        let (ce, _) = cross_entropy_pair(&p, &p, Polarity::Negative);
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_is_ln_three() {
        let u = dist([1.0 / 3.0; 3]);
        let (a, b) = cross_entropy_pair(&u, &u, Polarity::Neutral);
        assert!((a - 3.0f64.ln()).abs() < 1e-12);
        assert!((b - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn divergence_of_equal_distributions_is_zero() {
        for i in 0..100u64 {
            let mut rng = seeding::indexed_stream(1, "divzero", i);
            let p = random_dist(&mut rng);
            for kind in DivergenceKind::ALL {
                assert_eq!(divergence(kind, &p, &p), 0.0);
            }
        }
    }

    #[test]
    fn kl_forward_matches_independent_per_term_summation() {
        // Independent summation with the same clamp.
        let p = dist([0.5, 0.5, 0.0]);
        let q = dist([0.25, 0.5, 0.25]);
        let eps = crate::model::PROB_EPS;
        let clamp = |x: f64| x.max(eps);
        let mut expected = 0.0;
        for i in 0..3 {
            expected += clamp(p.probs[i]) * (clamp(p.probs[i]).ln() - clamp(q.probs[i]).ln());
        }
        let got = divergence(DivergenceKind::KlForward, &p, &q);
        assert!((got - expected).abs() < 1e-9);
        // Dominant term is 0.5 ln 2.
        assert!((got - 0.5 * std::f64::consts::LN_2).abs() < 1e-4, "got {got}");
    }

    #[test]
    fn js_is_symmetric() {
        for i in 0..100u64 {
            let mut rng = seeding::indexed_stream(2, "js", i);
            let p = random_dist(&mut rng);
            let q = random_dist(&mut rng);
            let a = divergence(DivergenceKind::Js, &p, &q);
            let b = divergence(DivergenceKind::Js, &q, &p);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_nonnegative() {
        for i in 0..200u64 {
            let mut rng = seeding::indexed_stream(3, "nonneg", i);
            let p = random_dist(&mut rng);
            let q = random_dist(&mut rng);
            for kind in DivergenceKind::ALL {
                assert!(divergence(kind, &p, &q) >= 0.0);
            }
        }
    }

    #[test]
    fn alpha_zero_total_is_pure_ce_pair() {
        let mut rng = seeding::stream(4, "a0");
        let p = random_dist(&mut rng);
        let q = random_dist(&mut rng);
        let cfg = LossConfig::new(0.0, DivergenceKind::KlForward);
        let b = crr_loss(&p, &q, Polarity::Positive, &cfg);
        assert_eq!(b.total, b.ce_orig + b.ce_aug);
    }

    #[test]
    fn equal_branches_have_zero_div_term() {
        let p = dist([0.2, 0.3, 0.5]);
        let cfg = LossConfig::new(3.0, DivergenceKind::KlForward);
        let b = crr_loss(&p, &p, Polarity::Positive, &cfg);
        assert_eq!(b.div, 0.0);
        assert_eq!(b.total, b.ce_orig + b.ce_aug);
    }

    #[test]
    fn alpha_three_matches_hand_summation() {
        let p = dist([1.0 / 3.0; 3]);
        let q = dist([0.9, 0.05, 0.05]);
        let cfg = LossConfig::new(3.0, DivergenceKind::KlForward);
        let b = crr_loss(&p, &q, Polarity::Negative, &cfg);
        let third: f64 = 1.0 / 3.0;
        let ce_orig = -third.ln();
        let ce_aug = -0.9f64.ln();
        let div = third * (third / 0.9).ln() + third * (third / 0.05).ln() + third * (third / 0.05).ln();
        let hand = ce_orig + ce_aug + 3.0 * div;
        assert!((b.total - hand).abs() < 1e-9, "{} vs {hand}", b.total);
    }

    #[test]
    fn monotone_in_alpha() {
        let p = dist([0.6, 0.3, 0.1]);
        let q = dist([0.2, 0.3, 0.5]);
        let mut last = f64::NEG_INFINITY;
        for a in [0.0, 0.5, 1.0, 3.0, 5.0] {
            let cfg = LossConfig::new(a, DivergenceKind::Js);
            let b = crr_loss(&p, &q, Polarity::Negative, &cfg);
            assert!(b.total >= last);
            last = b.total;
        }
    }

    #[test]
    fn alpha_zero_gradient_is_softmax_minus_onehot() {
        let lo: [f64; 3] = [0.3, -0.2, 0.9];
        let la: [f64; 3] = [-0.5, 0.1, 0.2];
        let cfg = LossConfig::new(0.0, DivergenceKind::KlForward);
        let (go, ga) = crr_loss_gradient(&lo, &la, Polarity::Neutral, &cfg);
        let p = softmax(&lo);
        let q = softmax(&la);
        for i in 0..3 {
            let onehot = if i == 1 { 1.0 } else { 0.0 };
            assert!((go[i] - (p[i] - onehot)).abs() < 1e-12);
            assert!((ga[i] - (q[i] - onehot)).abs() < 1e-12);
        }
    }

    fn loss_at(lo: &[f64; 3], la: &[f64; 3], y: Polarity, cfg: &LossConfig<f64>) -> f64 {
        let p = PredictionDist { probs: softmax(lo) };
        let q = PredictionDist { probs: softmax(la) };
        crr_loss(&p, &q, y, cfg).total
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for draw in 0..20u64 {
            let mut rng = seeding::indexed_stream(5, "fd", draw);
            let mut lo = [0.0; 3];
            let mut la = [0.0; 3];
            for v in lo.iter_mut().chain(la.iter_mut()) {
                *v = rng.gen_range(-2.0..2.0);
            }
            let y = Polarity::from_index(rng.gen_range(0..3)).unwrap();
            let kind = DivergenceKind::ALL[(draw % 3) as usize];
            let alpha = rng.gen_range(0.5..5.0);
            let cfg = LossConfig::new(alpha, kind);
            let (go, ga) = crr_loss_gradient(&lo, &la, y, &cfg);
            for i in 0..3 {
                let mut up = lo;
                up[i] += step;
                let mut dn = lo;
                dn[i] -= step;
                let fd = (loss_at(&up, &la, y, &cfg) - loss_at(&dn, &la, y, &cfg)) / (2.0 * step);
                let denom = go[i].abs().max(fd.abs()).max(1e-3);
                worst = worst.max((go[i] - fd).abs() / denom);

                let mut up = la;
                up[i] += step;
                let mut dn = la;
                dn[i] -= step;
                let fd = (loss_at(&lo, &up, y, &cfg) - loss_at(&lo, &dn, y, &cfg)) / (2.0 * step);
                let denom = ga[i].abs().max(fd.abs()).max(1e-3);
                worst = worst.max((ga[i] - fd).abs() / denom);
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn equal_branches_same_label_behave_symmetrically() {
        let l: [f64; 3] = [0.4, -0.3, 0.7];
        // js: both branch gradients equal at equality.
        let cfg = LossConfig::new(2.0, DivergenceKind::Js);
        let (go, ga) = crr_loss_gradient(&l, &l, Polarity::Positive, &cfg);
        for i in 0..3 {
            assert!((go[i] - ga[i]).abs() < 1e-12);
        }
        // kl_forward: the divergence-term contribution vanishes at
        // equality on the augmented branch side (dla = q - p = 0); the
        // original side keeps only the CE part as well since
        // g = ln(p/q)+1 = 1 is constant and dies in the softmax push.
        let cfg = LossConfig::new(2.0, DivergenceKind::KlForward);
        let (go, ga) = crr_loss_gradient(&l, &l, Polarity::Positive, &cfg);
        let cfg0 = LossConfig::new(0.0, DivergenceKind::KlForward);
        let (go0, ga0) = crr_loss_gradient(&l, &l, Polarity::Positive, &cfg0);
        for i in 0..3 {
            assert!((go[i] - go0[i]).abs() < 1e-12);
            assert!((ga[i] - ga0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn freeze_original_removes_div_gradient_from_original_branch() {
        let lo: [f64; 3] = [0.3, -0.2, 0.9];
        let la: [f64; 3] = [-0.5, 0.6, 0.2];
        let frozen = LossConfig { freeze_original_in_div: true, ..LossConfig::new(2.0, DivergenceKind::KlForward) };
        let (go_frozen, _) = crr_loss_gradient(&lo, &la, Polarity::Positive, &frozen);
        let (go_ce, _) =
            crr_loss_gradient(&lo, &la, Polarity::Positive, &LossConfig::new(0.0, DivergenceKind::KlForward));
        for i in 0..3 {
            assert!((go_frozen[i] - go_ce[i]).abs() < 1e-12);
        }
    }
}
