//! Classifier heads (per-branch, integrated, palsy) and every loss term of
//! the joint objectives. The scalar loss functions are plain f64 code; the
//! tape ops reuse them for forward values and pair them with hand-written
//! backward formulas that the tests hold against finite differences.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::backbone::Dense;
use crate::config::DiceDenominator;
use crate::error::{Error, Result};
use crate::geometry::Landmarks;
use crate::params::{Bound, Initializer, ParamSet};

/// Probability clamp for log-domain safety.
pub const PROB_EPS: f64 = 1e-7;

fn clampp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

// ---------------------------------------------------------------------------
// Scalar losses (one sample)
// ---------------------------------------------------------------------------

/// Alignment loss: sum of squared landmark errors over 2*d_o^2.
pub fn loss_align(pred: &Landmarks, gt: &Landmarks, d_o: f64) -> Result<f64> {
    if !(d_o > 0.0) {
        return Err(Error::Input(format!("inter-ocular distance {d_o} must be > 0")));
    }
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "landmark count mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut s = 0.0;
    for (&(x, y), &(gx, gy)) in pred.points.iter().zip(&gt.points) {
        s += (x - gx).powi(2) + (y - gy).powi(2);
    }
    Ok(s / (2.0 * d_o * d_o))
}

/// Weighted multi-label binary cross entropy.
pub fn loss_rec(labels: &[f64], probs: &[f64], weights: &[f64]) -> f64 {
    let n = labels.len();
    let mut s = 0.0;
    for i in 0..n {
        let q = clampp(probs[i]);
        s += weights[i] * (labels[i] * q.ln() + (1.0 - labels[i]) * (1.0 - q).ln());
    }
    -s / n as f64
}

fn dice_denominator(p: f64, q: f64, tau: f64, kind: DiceDenominator) -> f64 {
    match kind {
        DiceDenominator::SumSquares => p * p + q * q + tau,
        DiceDenominator::ProductSquares => p * p * q * q + tau,
    }
}

/// Weighted multi-label Dice coefficient loss.
pub fn loss_dice(
    labels: &[f64],
    probs: &[f64],
    weights: &[f64],
    tau: f64,
    kind: DiceDenominator,
) -> f64 {
    let n = labels.len();
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (labels[i], probs[i]);
        s += weights[i] * (1.0 - (2.0 * p * q + tau) / dice_denominator(p, q, tau, kind));
    }
    s / n as f64
}

/// Weighted cross entropy for the 4-grade palsy head: -w_c * log(q_hat_c).
pub fn loss_palsy(class: usize, probs: &[f64], weights: &[f64]) -> f64 {
    -weights[class] * clampp(probs[class]).ln()
}

/// Joint AU objective: (L_au + L_int) + lambda * L_align, L_au = rec + dice.
pub fn loss_total_au(l_au: f64, l_int: f64, l_align: f64, lambda: f64) -> f64 {
    (l_au + l_int) + lambda * l_align
}

/// The named loss terms of one step; `au = rec + dice` by construction.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBundle {
    pub align: f64,
    pub rec: f64,
    pub dice: f64,
    pub au: f64,
    pub int: f64,
    pub palsy: f64,
    pub total: f64,
}

/// Final activation probability: mean of local and integrated predictions.
pub fn final_probs(local: &[f64], integrated: &[f64]) -> Vec<f64> {
    local
        .iter()
        .zip(integrated)
        .map(|(a, b)| 0.5 * (a + b))
        .collect()
}

// ---------------------------------------------------------------------------
// Tape ops (batched; mean over the batch)
// ---------------------------------------------------------------------------

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    /// Batched weighted BCE. probs [B,n]; labels, weights constant.
    pub fn loss_rec_op(&self, probs: Var, labels: &Array2<f64>, weights: &Array1<f64>) -> Var {
        let pv = self.value(probs);
        let (b, n) = (labels.nrows(), labels.ncols());
        assert_eq!(pv.shape(), [b, n]);
        let mut total = 0.0;
        for bi in 0..b {
            let row: Vec<f64> = (0..n).map(|i| pv[[bi, i]]).collect();
            let lab: Vec<f64> = (0..n).map(|i| labels[[bi, i]]).collect();
            total += loss_rec(&lab, &row, weights.as_slice().unwrap());
        }
        total /= b as f64;
        let (lab, w) = (labels.clone(), weights.clone());
        let pc = Rc::clone(&pv);
        self.op(scalar(total), &[probs], move |g| {
            let gs = g[[]];
            let mut dp = ArrayD::<f64>::zeros(IxDyn(&[b, n]));
            for bi in 0..b {
                for i in 0..n {
                    let q = pc[[bi, i]];
                    if q <= PROB_EPS || q >= 1.0 - PROB_EPS {
                        continue; // clamped: no gradient
                    }
                    let p = lab[[bi, i]];
                    dp[[bi, i]] = gs * (-w[i] / n as f64) * (p / q - (1.0 - p) / (1.0 - q))
                        / b as f64;
                }
            }
            vec![dp]
        })
    }

    /// Batched weighted Dice loss.
    pub fn loss_dice_op(
        &self,
        probs: Var,
        labels: &Array2<f64>,
        weights: &Array1<f64>,
        tau: f64,
        kind: DiceDenominator,
    ) -> Var {
        let pv = self.value(probs);
        let (b, n) = (labels.nrows(), labels.ncols());
        assert_eq!(pv.shape(), [b, n]);
        let mut total = 0.0;
        for bi in 0..b {
            let row: Vec<f64> = (0..n).map(|i| pv[[bi, i]]).collect();
            let lab: Vec<f64> = (0..n).map(|i| labels[[bi, i]]).collect();
            total += loss_dice(&lab, &row, weights.as_slice().unwrap(), tau, kind);
        }
        total /= b as f64;
        let (lab, w) = (labels.clone(), weights.clone());
        let pc = Rc::clone(&pv);
        self.op(scalar(total), &[probs], move |g| {
            let gs = g[[]];
            let mut dp = ArrayD::<f64>::zeros(IxDyn(&[b, n]));
            for bi in 0..b {
                for i in 0..n {
                    let p = lab[[bi, i]];
                    let q = pc[[bi, i]];
                    let num = 2.0 * p * q + tau;
                    let den = dice_denominator(p, q, tau, kind);
                    let dden_dq = match kind {
                        DiceDenominator::SumSquares => 2.0 * q,
                        DiceDenominator::ProductSquares => 2.0 * p * p * q,
                    };
                    // d/dq [1 - num/den] = -(2p*den - num*dden_dq)/den^2
                    let d = -(2.0 * p * den - num * dden_dq) / (den * den);
                    dp[[bi, i]] = gs * w[i] * d / (n as f64 * b as f64);
                }
            }
            vec![dp]
        })
    }

    /// Batched alignment loss. pred [B,2m]; gt constant; inv_two_do2[b] is
    /// 1/(2*d_o^2) from the ground-truth inter-ocular distance.
    pub fn loss_align_op(&self, pred: Var, gt: &Array2<f64>, inv_two_do2: &[f64]) -> Var {
        let pv = self.value(pred);
        let (b, d) = (gt.nrows(), gt.ncols());
        assert_eq!(pv.shape(), [b, d]);
        assert_eq!(inv_two_do2.len(), b);
        let mut total = 0.0;
        for bi in 0..b {
            let mut s = 0.0;
            for i in 0..d {
                let diff = pv[[bi, i]] - gt[[bi, i]];
                s += diff * diff;
            }
            total += s * inv_two_do2[bi];
        }
        total /= b as f64;
        let gtc = gt.clone();
        let coef = inv_two_do2.to_vec();
        let pc = Rc::clone(&pv);
        self.op(scalar(total), &[pred], move |g| {
            let gs = g[[]];
            let mut dp = ArrayD::<f64>::zeros(IxDyn(&[b, d]));
            for bi in 0..b {
                for i in 0..d {
                    dp[[bi, i]] =
                        gs * 2.0 * (pc[[bi, i]] - gtc[[bi, i]]) * coef[bi] / b as f64;
                }
            }
            vec![dp]
        })
    }

    /// Batched palsy loss on softmax probabilities [B,4].
    pub fn loss_palsy_op(&self, probs: Var, classes: &[usize], weights: &Array1<f64>) -> Var {
        let pv = self.value(probs);
        let b = classes.len();
        let k = pv.shape()[1];
        assert_eq!(pv.shape()[0], b);
        let mut total = 0.0;
        for (bi, &c) in classes.iter().enumerate() {
            let row: Vec<f64> = (0..k).map(|i| pv[[bi, i]]).collect();
            total += loss_palsy(c, &row, weights.as_slice().unwrap());
        }
        total /= b as f64;
        let cls = classes.to_vec();
        let w = weights.clone();
        let pc = Rc::clone(&pv);
        self.op(scalar(total), &[probs], move |g| {
            let gs = g[[]];
            let mut dp = ArrayD::<f64>::zeros(IxDyn(&[b, k]));
            for (bi, &c) in cls.iter().enumerate() {
                let q = pc[[bi, c]];
                if q <= PROB_EPS || q >= 1.0 - PROB_EPS {
                    continue;
                }
                dp[[bi, c]] = gs * (-w[c] / q) / b as f64;
            }
            vec![dp]
        })
    }

    /// Elementwise mean of two probability tensors.
    pub fn final_probs_op(&self, local: Var, integrated: Var) -> Var {
        self.affine(self.add(local, integrated), 0.5, 0.0)
    }
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// Per-branch AU classifiers: GAP -> dense -> sigmoid, one dense per branch.
pub struct AuBranchHeads {
    fcs: Vec<Dense>,
}

impl AuBranchHeads {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        in_channels: usize,
        n: usize,
    ) -> Self {
        let fcs = (0..n)
            .map(|k| Dense::new(init, set, &format!("au_head{k}"), in_channels, 1))
            .collect();
        Self { fcs }
    }

    /// refined: one [B,C,h,w] map per branch -> [B,n] probabilities.
    pub fn forward(&self, t: &Tape, p: &Bound, refined: &[Var]) -> Var {
        assert_eq!(refined.len(), self.fcs.len());
        let cols: Vec<Var> = refined
            .iter()
            .zip(&self.fcs)
            .map(|(&r, fc)| t.sigmoid(fc.forward(t, p, t.gap(r))))
            .collect();
        t.concat_axis1(&cols)
    }
}

/// Two fully-connected layers over the concatenation of all pooled branch
/// features and the alignment feature.
pub struct IntegratedHead {
    fc1: Dense,
    fc2: Dense,
}

impl IntegratedHead {
    pub fn new(
        init: &mut Initializer,
        set: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        Self {
            fc1: Dense::new(init, set, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Dense::new(init, set, &format!("{name}.fc2"), hidden, out),
        }
    }

    fn trunk(&self, t: &Tape, p: &Bound, refined: &[Var], align_feature: Var) -> Var {
        let mut parts: Vec<Var> = refined.iter().map(|&r| t.gap(r)).collect();
        parts.push(align_feature);
        let cat = t.concat_axis1(&parts);
        let h = t.tanh(self.fc1.forward(t, p, cat));
        self.fc2.forward(t, p, h)
    }

    /// -> [B,n] sigmoid probabilities.
    pub fn forward(&self, t: &Tape, p: &Bound, refined: &[Var], align_feature: Var) -> Var {
        t.sigmoid(self.trunk(t, p, refined, align_feature))
    }

    /// -> [B,4] softmax probabilities (palsy grades).
    pub fn forward_softmax(
        &self,
        t: &Tape,
        p: &Bound,
        refined: &[Var],
        align_feature: Var,
    ) -> Var {
        t.softmax(self.trunk(t, p, refined, align_feature))
    }
}
