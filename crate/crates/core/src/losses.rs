//! Training objectives on the posterior probability vector.
//!
//! Each loss is written on `Pr(y = c | x)` and paired with its analytic
//! gradient with respect to the probabilities; the tape then carries that
//! gradient back through the softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Probabilities at or below this are rejected instead of clipped.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Gce,
    Sce,
    Ncerce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Gce => "gce",
            LossKind::Sce => "sce",
            LossKind::Ncerce => "ncerce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawLossSpec")]
pub struct LossSpec {
    pub kind: LossKind,
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Value substituted for `log 0` in the reverse cross-entropy term.
    pub log_zero: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLossSpec {
    kind: LossKind,
    q: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    log_zero: Option<f64>,
}

impl From<RawLossSpec> for LossSpec {
    fn from(raw: RawLossSpec) -> Self {
        let base = LossSpec::of(raw.kind);
        LossSpec {
            kind: raw.kind,
            q: raw.q.unwrap_or(base.q),
            alpha: raw.alpha.unwrap_or(base.alpha),
            beta: raw.beta.unwrap_or(base.beta),
            log_zero: raw.log_zero.unwrap_or(base.log_zero),
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::ce()
    }
}

impl LossSpec {
    /// Defaults for `kind`: q = 0.7; SCE α = 0.1, β = 1; NCE+RCE α = β = 1; A = −4.
    pub fn of(kind: LossKind) -> Self {
        let (alpha, beta) = match kind {
            LossKind::Sce => (0.1, 1.0),
            _ => (1.0, 1.0),
        };
        Self {
            kind,
            q: 0.7,
            alpha,
            beta,
            log_zero: -4.0,
        }
    }

    pub fn ce() -> Self {
        Self::of(LossKind::Ce)
    }

    pub fn gce(q: f64) -> Self {
        Self { q, ..Self::of(LossKind::Gce) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::Gce && !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidQ(self.q));
        }
        if !(self.log_zero < 0.0) {
            return Err(Error::invalid("loss.log_zero", "must be < 0"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("loss.alpha/beta", "must be >= 0"));
        }
        if matches!(self.kind, LossKind::Sce | LossKind::Ncerce) && self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::invalid("loss.alpha/beta", "must not both be zero"));
        }
        Ok(())
    }

    pub fn value(&self, probs: &[f64], label: usize) -> Result<f64> {
        match self.kind {
            LossKind::Ce => ce_loss(probs, label),
            LossKind::Gce => gce_loss(probs, label, self.q),
            LossKind::Sce => sce_loss(probs, label, self.alpha, self.beta, self.log_zero),
            LossKind::Ncerce => nce_rce_loss(probs, label, self.alpha, self.beta, self.log_zero),
        }
    }
}

fn prob_at(probs: &[f64], label: usize) -> Result<f64> {
    probs.get(label).copied().ok_or(Error::LabelOutOfRange {
        label,
        classes: probs.len(),
    })
}

fn positive_prob(probs: &[f64], label: usize) -> Result<f64> {
    let p = prob_at(probs, label)?;
    if p <= PROB_FLOOR {
        return Err(Error::DegenerateProbability { class: label, prob: p });
    }
    Ok(p)
}

pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    Ok(-positive_prob(probs, label)?.ln())
}

/// `(1 − p^q) / q`.
pub fn gce_loss(probs: &[f64], label: usize, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidQ(q));
    }
    let p = prob_at(probs, label)?;
    if q == 1.0 {
        return Ok(1.0 - p);
    }
    Ok((1.0 - p.powf(q)) / q)
}

/// Reverse cross-entropy against a one-hot target with `log 0 := log_zero`.
fn rce(p: f64, log_zero: f64) -> f64 {
    -log_zero * (1.0 - p)
}

pub fn sce_loss(probs: &[f64], label: usize, alpha: f64, beta: f64, log_zero: f64) -> Result<f64> {
    let ce = ce_loss(probs, label)?;
    let p = prob_at(probs, label)?;
    Ok(alpha * ce + beta * rce(p, log_zero))
}

pub fn nce_rce_loss(probs: &[f64], label: usize, alpha: f64, beta: f64, log_zero: f64) -> Result<f64> {
    let p = prob_at(probs, label)?;
    for (j, &v) in probs.iter().enumerate() {
        if v <= PROB_FLOOR {
            return Err(Error::DegenerateProbability { class: j, prob: v });
        }
    }
    let denom: f64 = -probs.iter().map(|v| v.ln()).sum::<f64>();
    let nce = -p.ln() / denom;
    Ok(alpha * nce + beta * rce(p, log_zero))
}

/// ∂loss/∂probs for the chosen objective.
pub fn loss_grad_probs(spec: &LossSpec, probs: &[f64], label: usize) -> Result<Vec<f64>> {
    let p = prob_at(probs, label)?;
    let mut g = vec![0.0; probs.len()];
    match spec.kind {
        LossKind::Ce => {
            g[label] = -1.0 / positive_prob(probs, label)?;
        }
        LossKind::Gce => {
            if !(spec.q > 0.0 && spec.q <= 1.0) {
                return Err(Error::InvalidQ(spec.q));
            }
            g[label] = if spec.q == 1.0 {
                -1.0
            } else {
                -positive_prob(probs, label)?.powf(spec.q - 1.0)
            };
        }
        LossKind::Sce => {
            g[label] = -spec.alpha / positive_prob(probs, label)? + spec.beta * spec.log_zero;
        }
        LossKind::Ncerce => {
            for (j, &v) in probs.iter().enumerate() {
                if v <= PROB_FLOOR {
                    return Err(Error::DegenerateProbability { class: j, prob: v });
                }
            }
            let denom: f64 = -probs.iter().map(|v| v.ln()).sum::<f64>();
            let num = -p.ln();
            for (j, slot) in g.iter_mut().enumerate() {
                let d_num = if j == label { -1.0 / p } else { 0.0 };
                let d_den = -1.0 / probs[j];
                *slot = spec.alpha * (d_num * denom - num * d_den) / (denom * denom);
            }
            g[label] += spec.beta * spec.log_zero;
        }
    }
    Ok(g)
}

/// Mean loss over the rows of `probs` and its gradient with respect to `probs`.
pub fn batch_loss(spec: &LossSpec, probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if probs.rows() != labels.len() {
        return Err(Error::invalid("labels", "one label per probability row"));
    }
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for (r, &label) in labels.iter().enumerate() {
        let row = probs.row(r);
        total += spec.value(row, label)?;
        let g = loss_grad_probs(spec, row, label)?;
        for (dst, v) in grad.row_mut(r).iter_mut().zip(g) {
            *dst = v * scale;
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&[1.0, 0.0], 0).unwrap(), 0.0);
        let inv_e = (-1.0f64).exp();
        assert!((ce_loss(&[inv_e, 1.0 - inv_e], 0).unwrap() - 1.0).abs() < 1e-15);
        assert!((ce_loss(&[0.5, 0.5], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            ce_loss(&[1.0, 0.0], 1),
            Err(Error::DegenerateProbability { class: 1, .. })
        ));
    }

    #[test]
    fn gce_examples() {
        for q in [0.1, 0.7, 1.0] {
            assert_eq!(gce_loss(&[1.0, 0.0], 0, q).unwrap(), 0.0);
        }
        assert_eq!(gce_loss(&[0.3, 0.7], 0, 1.0).unwrap(), 0.7);
        assert!((gce_loss(&[0.5, 0.5], 0, 0.7).unwrap() - 0.5492).abs() < 1e-4);
        assert!(matches!(gce_loss(&[0.5, 0.5], 0, 0.0), Err(Error::InvalidQ(_))));
        assert!(matches!(gce_loss(&[0.5, 0.5], 0, 1.5), Err(Error::InvalidQ(_))));
    }

    #[test]
    fn sce_examples() {
        assert_eq!(sce_loss(&[1.0, 0.0], 0, 0.1, 1.0, -4.0).unwrap(), 0.0);
        let v = sce_loss(&[0.5, 0.5], 0, 0.1, 1.0, -4.0).unwrap();
        assert!((v - 2.0693).abs() < 1e-3, "{v}");
        let probs = [0.3, 0.7];
        assert_eq!(
            sce_loss(&probs, 0, 0.1, 0.0, -4.0).unwrap(),
            0.1 * ce_loss(&probs, 0).unwrap()
        );
    }

    #[test]
    fn nce_rce_examples() {
        let uniform = [0.25; 4];
        assert!((nce_rce_loss(&uniform, 2, 1.0, 0.0, -4.0).unwrap() - 0.25).abs() < 1e-15);
        let v = nce_rce_loss(&[0.8, 0.2], 0, 1.0, 0.0, -4.0).unwrap();
        assert!((v - 0.1218).abs() < 1e-3, "{v}");
        let near_one = [1.0 - 2e-12, 1e-12, 1e-12];
        assert!(nce_rce_loss(&near_one, 0, 1.0, 0.0, -4.0).unwrap() < 1e-10);
        assert!(nce_rce_loss(&[1.0, 0.0], 0, 1.0, 1.0, -4.0).is_err());
    }

    #[test]
    fn gradient_formulas() {
        let probs = [0.2, 0.5, 0.3];
        assert_eq!(loss_grad_probs(&LossSpec::ce(), &probs, 1).unwrap(), vec![0.0, -2.0, 0.0]);
        assert_eq!(loss_grad_probs(&LossSpec::gce(1.0), &probs, 2).unwrap(), vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let probs = [0.15, 0.55, 0.3];
        let h = 1e-6;
        for kind in [LossKind::Ce, LossKind::Gce, LossKind::Sce, LossKind::Ncerce] {
            let spec = LossSpec::of(kind);
            for label in 0..3 {
                let g = loss_grad_probs(&spec, &probs, label).unwrap();
                for j in 0..3 {
                    let mut up = probs;
                    up[j] += h;
                    let mut down = probs;
                    down[j] -= h;
                    let fd = (spec.value(&up, label).unwrap() - spec.value(&down, label).unwrap()) / (2.0 * h);
                    let err = if g[j].abs() < 1e-8 {
                        (g[j] - fd).abs()
                    } else {
                        (g[j] - fd).abs() / g[j].abs()
                    };
                    assert!(err < 1e-5, "{kind:?} label {label} coord {j}: {} vs {fd}", g[j]);
                }
            }
        }
    }

    /// (1 − p^q)/q = −ln p − q·(ln p)²/2 + O(q²), so the gap to CE shrinks
    /// linearly in q with slope (ln p)²/2.
    #[test]
    fn gce_approaches_ce_as_q_vanishes() {
        for i in 1..=9 {
            let p = i as f64 / 10.0;
            let probs = [p, 1.0 - p];
            let ce = ce_loss(&probs, 0).unwrap();
            let gap = (gce_loss(&probs, 0, 1e-3).unwrap() - ce).abs();
            let slope = p.ln().powi(2) / 2.0;
            assert!((gap - 1e-3 * slope).abs() < 0.01 * 1e-3 * slope, "p={p}: {gap}");
            assert!((gce_loss(&probs, 0, 1e-6).unwrap() - ce).abs() < 1e-5);
        }
    }

    #[test]
    fn spec_json_fills_kind_defaults() {
        let sce: LossSpec = serde_json::from_str(r#"{"kind":"sce"}"#).unwrap();
        assert_eq!((sce.alpha, sce.beta, sce.log_zero), (0.1, 1.0, -4.0));
        let gce: LossSpec = serde_json::from_str(r#"{"kind":"gce","q":0.5}"#).unwrap();
        assert_eq!(gce.q, 0.5);
        assert!(serde_json::from_str::<LossSpec>(r#"{"kind":"gce","r":0.5}"#).is_err());
        let back: LossSpec = serde_json::from_str(&serde_json::to_string(&sce).unwrap()).unwrap();
        assert_eq!(back, sce);
    }

    fn scaled(label_p: f64, rest: &[f64], label: usize) -> Vec<f64> {
        let total: f64 = rest.iter().sum();
        let mut out: Vec<f64> = rest.iter().map(|v| v / total * (1.0 - label_p)).collect();
        out.insert(label, label_p);
        out
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_monotone(
            rest in prop::collection::vec(0.05f64..1.0, 1..6),
            p1 in 0.01f64..0.98,
            bump in 0.001f64..0.02,
            label_seed in 0usize..8,
        ) {
            let label = label_seed % (rest.len() + 1);
            let p2 = (p1 + bump).min(0.99);
            prop_assume!(p2 > p1);
            let lo = scaled(p1, &rest, label);
            let hi = scaled(p2, &rest, label);
            for kind in [LossKind::Ce, LossKind::Gce, LossKind::Sce, LossKind::Ncerce] {
                let spec = LossSpec::of(kind);
                let a = spec.value(&lo, label).unwrap();
                let b = spec.value(&hi, label).unwrap();
                prop_assert!(a > 0.0 && b > 0.0);
                prop_assert!(b < a, "{:?}: {} !< {}", kind, b, a);
            }
        }
    }
}
