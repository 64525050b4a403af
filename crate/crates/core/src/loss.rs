//! Softmax classifier head and focal loss for the two-class
//! bona fide / attack decision.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::tensor::{Matrix, Real};

/// Probability floor applied to the true-class probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Fully connected layer producing two logits. `w` is `k × 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F> {
    pub w: Matrix<F>,
    pub b: [F; 2],
}

impl<F: Real> ClassifierHead<F> {
    pub fn zeros(k: usize) -> Self {
        Self {
            w: Matrix::zeros(k, 2),
            b: [F::zero(); 2],
        }
    }

    /// Gaussian weights with std `1/sqrt(k)`, zero bias.
    pub fn init<R: Rng>(k: usize, rng: &mut R) -> Self {
        let mut head = Self::zeros(k);
        let n = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid std");
        head.w.data.iter_mut().for_each(|w| *w = F::of(n.sample(rng)));
        head
    }

    pub fn inputs(&self) -> usize {
        self.w.rows
    }

    pub fn logits(&self, z: &[F]) -> Result<[F; 2]> {
        if z.len() != self.w.rows {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} inputs, got {}",
                self.w.rows,
                z.len()
            )));
        }
        let out = self.w.t_mul_vec(z);
        Ok([out[0] + self.b[0], out[1] + self.b[1]])
    }

    /// Accumulates parameter gradients for upstream `d_logits`; returns `dL/dz`.
    pub fn backward(&self, z: &[F], d_logits: [F; 2], grad: &mut ClassifierHead<F>) -> Vec<F> {
        for (i, &zi) in z.iter().enumerate() {
            for (c, &d) in d_logits.iter().enumerate() {
                let idx = i * 2 + c;
                grad.w.data[idx] = grad.w.data[idx] + zi * d;
            }
        }
        grad.b[0] = grad.b[0] + d_logits[0];
        grad.b[1] = grad.b[1] + d_logits[1];
        self.w.mul_vec(&d_logits)
    }

    pub fn cast<G: Real>(&self) -> ClassifierHead<G> {
        ClassifierHead {
            w: self.w.cast(),
            b: [G::of(self.b[0].as_f64()), G::of(self.b[1].as_f64())],
        }
    }
}

/// Numerically stable two-way softmax.
pub fn softmax<F: Real>(logits: [F; 2]) -> [F; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub fn softmax_logits<F: Real>(z: &[F], head: &ClassifierHead<F>) -> Result<[F; 2]> {
    Ok(softmax(head.logits(z)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    /// Weighting factor, applied to both classes.
    pub alpha: f64,
    /// Focusing parameter; 0 recovers cross-entropy.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 1.0, gamma: 1.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.gamma >= 0.0) || !self.alpha.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "focal loss needs alpha > 0 and gamma >= 0, got {} and {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<F> {
    pub loss: F,
    /// True when the true-class probability was below [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `−α (1 − p_t)^γ log p_t`.
pub fn focal_loss<F: Real>(probs: [F; 2], label: Label, fp: &FocalParams) -> LossValue<F> {
    let raw = probs[label.class_index()];
    let floor = F::of(PROB_FLOOR);
    let clamped = raw < floor;
    let pt = raw.max(floor);
    let alpha = F::of(fp.alpha);
    let modulator = if fp.gamma == 0.0 {
        F::one()
    } else {
        (F::one() - pt).powf(F::of(fp.gamma))
    };
    LossValue {
        loss: -alpha * modulator * pt.ln(),
        clamped,
    }
}

pub fn cross_entropy<F: Real>(probs: [F; 2], label: Label) -> F {
    -probs[label.class_index()].max(F::of(PROB_FLOOR)).ln()
}

/// Gradient of the focal loss with respect to the logits that produced `probs`.
pub fn loss_backward<F: Real>(probs: [F; 2], label: Label, fp: &FocalParams) -> [F; 2] {
    let t = label.class_index();
    let pt = probs[t].max(F::of(PROB_FLOOR));
    let alpha = F::of(fp.alpha);
    let one_minus = F::one() - pt;
    // dFL/dp_t · p_t; multiplying by (δ_tj − p_j) gives dFL/dlogit_j.
    let scaled = if fp.gamma == 0.0 {
        -alpha
    } else if one_minus <= F::zero() {
        F::zero()
    } else {
        let g = F::of(fp.gamma);
        alpha * (g * one_minus.powf(g - F::one()) * pt * pt.ln() - one_minus.powf(g))
    };
    let mut out = [F::zero(); 2];
    for (j, o) in out.iter_mut().enumerate() {
        let delta = if j == t { F::one() } else { F::zero() };
        *o = scaled * (delta - probs[j]);
    }
    out
}
