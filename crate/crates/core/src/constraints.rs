//! Constraint losses over network outputs, plus the regularizers that keep
//! constant predictors from satisfying them.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated with
//! respect to the predictions that feed it.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("invalid projection parameters: {0}")]
    Projection(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Default gravitational acceleration in m/s², applied as `a·t²`.
pub const GRAVITY: f64 = -9.8;

/// Allowed output range for the walking tracker.
pub const WALK_RANGE: (f64, f64) = (0.0, 10.0);

/// Least-squares projection onto trajectories `c0 + c1·t + a·t²` sampled at
/// `t_i = i·dt`, `i = 1..=n`, for a fixed curvature `a`.
#[derive(Clone, Debug)]
pub struct ProjectionOperator {
    n: usize,
    dt: f64,
    gravity: f64,
    design: Tensor,
    projection: Tensor,
    offset: Tensor,
}

impl ProjectionOperator {
    pub fn new(n: usize, dt: f64, gravity: f64) -> Result<Self, ConstraintError> {
        if n < 3 {
            return Err(ConstraintError::Projection(format!(
                "sequence length must be at least 3, got {n}"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ConstraintError::Projection(format!(
                "frame interval must be positive, got {dt}"
            )));
        }
        if !gravity.is_finite() {
            return Err(ConstraintError::Projection(format!(
                "gravity must be finite, got {gravity}"
            )));
        }
        let times: Vec<f64> = (1..=n).map(|i| i as f64 * dt).collect();
        let (s2, s1) = times
            .iter()
            .fold((0.0, 0.0), |(a, b), &t| (a + t * t, b + t));
        let nn = n as f64;
        let det = s2 * nn - s1 * s1;
        if det.abs() < 1e-12 {
            return Err(ConstraintError::Projection(format!(
                "normal matrix is singular (det = {det:e})"
            )));
        }
        // (AᵀA)⁻¹ = [[n, -s1], [-s1, s2]] / det
        let (i00, i01, i11) = (nn / det, -s1 / det, s2 / det);
        let mut p = vec![0.0; n * n];
        for (i, &ti) in times.iter().enumerate() {
            for (j, &tj) in times.iter().enumerate() {
                p[i * n + j] = ti * (i00 * tj + i01) + (i01 * tj + i11);
            }
        }
        let design = times.iter().flat_map(|&t| [t, 1.0]).collect();
        let offset = times.iter().map(|&t| gravity * t * t).collect();
        Ok(Self {
            n,
            dt,
            gravity,
            design: Tensor::new(&[n, 2], design)?,
            projection: Tensor::new(&[n, n], p)?,
            offset: Tensor::vector(offset),
        })
    }

    /// Projection onto affine-in-time sequences (zero curvature).
    pub fn affine(n: usize, dt: f64) -> Result<Self, ConstraintError> {
        Self::new(n, dt, 0.0)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    /// The `n×2` design matrix with rows `(i·dt, 1)`.
    pub fn design(&self) -> &Tensor {
        &self.design
    }

    /// `A(AᵀA)⁻¹Aᵀ`, row-major `n×n`.
    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    /// `a·(i·dt)²` for each frame.
    pub fn gravity_offset(&self) -> &[f64] {
        self.offset.data()
    }

    /// `offset + P·(y - offset)`: the closest admissible trajectory to `y`.
    pub fn fit(&self, y: &[f64]) -> Vec<f64> {
        let a = self.offset.data();
        let p = self.projection.data();
        let centered: Vec<f64> = y.iter().zip(a).map(|(v, o)| v - o).collect();
        (0..self.n)
            .map(|i| {
                a[i] + (0..self.n)
                    .map(|j| p[i * self.n + j] * centered[j])
                    .sum::<f64>()
            })
            .collect()
    }

    /// `Σ|fit(y) - y|` evaluated without a graph.
    pub fn residual_l1(&self, y: &[f64]) -> f64 {
        self.fit(y).iter().zip(y).map(|(f, v)| (f - v).abs()).sum()
    }

    fn check_len(&self, g: &Graph, v: Var) -> Result<(), ConstraintError> {
        let got = g.value(v).len();
        if got != self.n || g.value(v).shape().len() > 1 {
            return Err(ConstraintError::Length {
                expected: self.n,
                got,
            });
        }
        Ok(())
    }
}

/// Operator for `n` frames spaced `dt` apart under curvature `gravity`.
pub fn build_projection(
    n: usize,
    dt: f64,
    gravity: f64,
) -> Result<ProjectionOperator, ConstraintError> {
    ProjectionOperator::new(n, dt, gravity)
}

/// Non-negative weights of the regularization terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl LossWeights {
    pub fn new(gamma1: f64, gamma2: f64, gamma3: f64) -> Result<Self, ConstraintError> {
        let w = Self {
            gamma1,
            gamma2,
            gamma3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConstraintError::Weights(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn walk() -> Self {
        Self {
            gamma1: 0.6,
            gamma2: 0.8,
            gamma3: 0.0,
        }
    }

    pub fn causal() -> Self {
        Self {
            gamma1: 0.65,
            gamma2: 0.65,
            gamma3: 0.95,
        }
    }
}

/// `Σ_i |ŷ_i - y_i|` where `ŷ = a + P(y - a)` is the best trajectory with
/// the operator's fixed curvature.
pub fn free_fall_loss(
    g: &mut Graph,
    predictions: Var,
    proj: &ProjectionOperator,
) -> Result<Var, ConstraintError> {
    proj.check_len(g, predictions)?;
    let offset = g.constant(proj.offset.clone());
    let p = g.constant(proj.projection.clone());
    let centered = g.sub(predictions, offset)?;
    let projected = g.matvec(p, centered)?;
    let fitted = g.add(offset, projected)?;
    let residual = g.sub(fitted, predictions)?;
    let abs = g.abs(residual);
    Ok(g.sum(abs))
}

/// Pieces of the walking loss, kept apart for logging.
#[derive(Clone, Copy, Debug)]
pub struct ConstantVelocityTerms {
    /// `‖(P - I)y‖₁ / N`
    pub inertial: Var,
    /// `-std(y)`
    pub spread: Var,
    /// `max(relu(y - hi)) + max(relu(lo - y))`
    pub bounds: Var,
    pub total: Var,
}

/// Mean absolute inertial residual plus the spread bonus and range
/// penalty. The residual is averaged over the sequence so the spread bonus
/// can outweigh it at initialisation; summed, every run collapses to a
/// constant.
pub fn constant_velocity_loss(
    g: &mut Graph,
    predictions: Var,
    proj: &ProjectionOperator,
    weights: &LossWeights,
) -> Result<ConstantVelocityTerms, ConstraintError> {
    proj.check_len(g, predictions)?;
    if proj.gravity != 0.0 {
        return Err(ConstraintError::Projection(
            "constant-velocity loss needs a zero-curvature operator".into(),
        ));
    }
    let p = g.constant(proj.projection.clone());
    let projected = g.matvec(p, predictions)?;
    let residual = g.sub(projected, predictions)?;
    let abs = g.abs(residual);
    let inertial = g.mean(abs);

    let std = g.std(predictions);
    let spread = g.neg(std);

    let (lo, hi) = WALK_RANGE;
    let above = g.add_scalar(predictions, -hi);
    let above = g.relu(above);
    let above = g.max(above);
    let below = g.neg(predictions);
    let below = g.add_scalar(below, lo);
    let below = g.relu(below);
    let below = g.max(below);
    let bounds = g.add(above, below)?;

    let s = g.scale(spread, weights.gamma1);
    let b = g.scale(bounds, weights.gamma2);
    let total = g.add(inertial, s)?;
    let total = g.add(total, b)?;
    Ok(ConstantVelocityTerms {
        inertial,
        spread,
        bounds,
        total,
    })
}

fn check_probabilities(g: &Graph, v: Var, what: &str) -> Result<(), ConstraintError> {
    if let Some(bad) = g
        .value(v)
        .data()
        .iter()
        .find(|p| !(0.0..=1.0).contains(*p))
    {
        return Err(ConstraintError::Range(format!(
            "{what} must lie in [0, 1], found {bad}"
        )));
    }
    Ok(())
}

fn check_same_len(g: &Graph, a: Var, b: Var) -> Result<usize, ConstraintError> {
    let (la, lb) = (g.value(a).len(), g.value(b).len());
    if la != lb {
        return Err(ConstraintError::Length {
            expected: la,
            got: lb,
        });
    }
    Ok(la)
}

/// Batch mean of `p1·(1 - p2)`: the probability mass on `y1 ∧ ¬y2` when
/// the two outputs are independent.
pub fn soft_implication(g: &mut Graph, p1: Var, p2: Var) -> Result<Var, ConstraintError> {
    check_same_len(g, p1, p2)?;
    check_probabilities(g, p1, "p1")?;
    check_probabilities(g, p2, "p2")?;
    let not2 = g.one_minus(p2);
    let both = g.mul(p1, not2)?;
    Ok(g.mean(both))
}

/// Mean absolute change of the output under a reflection of the input.
pub fn reflection_invariance_h1(
    g: &mut Graph,
    probs: Var,
    probs_reflected: Var,
) -> Result<Var, ConstraintError> {
    check_same_len(g, probs, probs_reflected)?;
    let d = g.sub(probs, probs_reflected)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Negated population standard deviation across the batch.
pub fn batch_std_h2(g: &mut Graph, probs: Var) -> Result<Var, ConstraintError> {
    let m = g.value(probs).len();
    if m < 2 {
        return Err(ConstraintError::Range(format!(
            "batch std needs at least 2 outputs, got {m}"
        )));
    }
    let s = g.std(probs);
    Ok(g.neg(s))
}

/// Joint value of the two boolean outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Assignment {
    pub y1: bool,
    pub y2: bool,
}

impl Assignment {
    /// Fixed order used for columns and for argmax tie-breaking.
    pub const ALL: [Assignment; 4] = [
        Assignment::new(false, false),
        Assignment::new(false, true),
        Assignment::new(true, false),
        Assignment::new(true, true),
    ];

    /// The assignments penalized by the distribution term; `(1, 0)` is
    /// ruled out by the implication itself.
    pub const ADMISSIBLE: [Assignment; 3] = [
        Assignment::new(false, false),
        Assignment::new(false, true),
        Assignment::new(true, true),
    ];

    pub const fn new(y1: bool, y2: bool) -> Self {
        Self { y1, y2 }
    }

    pub fn index(self) -> usize {
        2 * usize::from(self.y1) + usize::from(self.y2)
    }
}

/// `M×4` matrix of `Pr[(y1, y2) = v]` under independent outputs, columns in
/// [`Assignment::ALL`] order.
pub fn joint_probs(g: &mut Graph, p1: Var, p2: Var) -> Result<Var, ConstraintError> {
    check_same_len(g, p1, p2)?;
    let q1 = g.one_minus(p1);
    let q2 = g.one_minus(p2);
    let c00 = g.mul(q1, q2)?;
    let c01 = g.mul(q1, p2)?;
    let c10 = g.mul(p1, q2)?;
    let c11 = g.mul(p1, p2)?;
    Ok(g.stack_columns(&[c00, c01, c10, c11])?)
}

/// Fraction of rows whose most probable assignment is `v`, ties going to the
/// earliest assignment in [`Assignment::ALL`].
pub fn argmax_frequency(joint: &Tensor, v: Assignment) -> f64 {
    let rows = joint.len() / 4;
    let hits = joint
        .data()
        .chunks_exact(4)
        .filter(|row| {
            let mut best = 0;
            for k in 1..4 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == v.index()
        })
        .count();
    hits as f64 / rows as f64
}

/// `(1/M) Σ_i (Pr[f(x_i) = v] - 1/3 + (1/3 - μ_v))²` with `μ_v` the batch
/// argmax frequency of `v`, held constant.
pub fn entropy_h3(g: &mut Graph, joint: Var, v: Assignment) -> Result<Var, ConstraintError> {
    let jv = g.value(joint);
    if jv.shape().len() != 2 || jv.shape()[1] != 4 {
        return Err(ConstraintError::Length {
            expected: 4,
            got: jv.shape().last().copied().unwrap_or(0),
        });
    }
    for (i, row) in jv.data().chunks_exact(4).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(ConstraintError::Range(format!(
                "row {i} of the joint distribution sums to {s}"
            )));
        }
    }
    let mu = argmax_frequency(jv, v);
    let third = 1.0 / 3.0;
    let col = g.column(joint, v.index())?;
    let shifted = g.add_scalar(col, -third);
    let shifted = g.add_scalar(shifted, third - mu);
    let sq = g.mul(shifted, shifted)?;
    Ok(g.mean(sq))
}

/// Detector outputs on a batch and on its reflected copy.
#[derive(Clone, Copy, Debug)]
pub struct CausalProbs {
    pub p1: Var,
    pub p2: Var,
    pub p1_reflected: Var,
    pub p2_reflected: Var,
}

/// The assembled causal objective and its parts.
#[derive(Clone, Debug)]
pub struct CausalTerms {
    pub implication: Var,
    /// `h1` for each network.
    pub reflection: [Var; 2],
    /// `h2` for each network.
    pub spread: [Var; 2],
    /// `h3` for each admissible assignment.
    pub distribution: [Var; 3],
    pub total: Var,
}

/// `E[p1(1-p2)] + Σ_k (γ1·h1_k + γ2·h2_k) + γ3·Σ_{v≠(1,0)} h3_v`.
pub fn causal_loss_terms(
    g: &mut Graph,
    probs: &CausalProbs,
    weights: &LossWeights,
) -> Result<CausalTerms, ConstraintError> {
    let implication = soft_implication(g, probs.p1, probs.p2)?;
    let reflection = [
        reflection_invariance_h1(g, probs.p1, probs.p1_reflected)?,
        reflection_invariance_h1(g, probs.p2, probs.p2_reflected)?,
    ];
    let spread = [batch_std_h2(g, probs.p1)?, batch_std_h2(g, probs.p2)?];
    let joint = joint_probs(g, probs.p1, probs.p2)?;
    let distribution = [
        entropy_h3(g, joint, Assignment::ADMISSIBLE[0])?,
        entropy_h3(g, joint, Assignment::ADMISSIBLE[1])?,
        entropy_h3(g, joint, Assignment::ADMISSIBLE[2])?,
    ];
    let mut total = implication;
    for (&term, gamma) in reflection
        .iter()
        .map(|t| (t, weights.gamma1))
        .chain(spread.iter().map(|t| (t, weights.gamma2)))
        .chain(distribution.iter().map(|t| (t, weights.gamma3)))
    {
        let weighted = g.scale(term, gamma);
        total = g.add(total, weighted)?;
    }
    Ok(CausalTerms {
        implication,
        reflection,
        spread,
        distribution,
        total,
    })
}

/// Fraction of items where the thresholded outputs violate `y1 ⇒ y2`.
pub fn implication_violation_rate(p1: &[f64], p2: &[f64]) -> f64 {
    if p1.is_empty() {
        return 0.0;
    }
    let bad = p1
        .iter()
        .zip(p2)
        .filter(|(&a, &b)| a > 0.5 && b <= 0.5)
        .count();
    bad as f64 / p1.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_sequences_and_bad_dt() {
        assert!(ProjectionOperator::new(2, 0.1, GRAVITY).is_err());
        assert!(ProjectionOperator::new(5, 0.0, GRAVITY).is_err());
        assert!(ProjectionOperator::new(5, -0.1, GRAVITY).is_err());
        assert!(ProjectionOperator::new(3, 0.1, GRAVITY).is_ok());
    }

    #[test]
    fn gravity_offset_for_five_frames() {
        let p = ProjectionOperator::new(5, 0.1, -9.8).unwrap();
        let expected = [-0.098, -0.392, -0.882, -1.568, -2.45];
        for (a, e) in p.gravity_offset().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        let trace: f64 = (0..5).map(|i| p.projection().data()[i * 6]).sum();
        assert!((trace - 2.0).abs() < 1e-10);
    }

    #[test]
    fn walking_loss_needs_flat_operator() {
        let p = ProjectionOperator::new(5, 0.1, GRAVITY).unwrap();
        let mut g = Graph::new();
        let y = g.param(Tensor::zeros(&[5]));
        assert!(constant_velocity_loss(&mut g, y, &p, &LossWeights::walk()).is_err());
    }

    #[test]
    fn weights_reject_negative_and_nan() {
        assert!(LossWeights::new(0.1, -0.2, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.6, 0.8, 0.0).is_ok());
    }

    #[test]
    fn assignment_indices_follow_fixed_order() {
        for (i, a) in Assignment::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
        }
    }
}
