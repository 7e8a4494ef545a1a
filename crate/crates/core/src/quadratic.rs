//! Diagonal quadratic testbed for the dual controller. Both objectives are
//! exact quadratics, so every controller quantity has a closed form and the
//! smoothness bounds can be checked to machine precision:
//!
//! ```text
//!     L_er(theta) = 1/2 (theta - a)' diag_a (theta - a)
//!     L_pr(theta) = 1/2 (theta - b)' diag_b (theta - b)
//! ```
//!
//! Updates are plain descent theta <- theta - alpha * d, which is the setting
//! the drift and approximation bounds are stated for. On a quadratic the
//! implicit observation gap is exactly (alpha/2) |d' diag_b d|, so halving
//! alpha halves the gap, and the global bound (G*alpha/2)||d||^2 with
//! G = max diag_b always dominates it.

use crate::controller::{
    lambda_star, surgery_direction, DualControllerState, DualMode, GradientPair,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticInstance {
    /// Minimizer of the erasure objective.
    pub a: Vec<f64>,
    /// Minimizer of the preservation objective.
    pub b: Vec<f64>,
    pub diag_a: Vec<f64>,
    pub diag_b: Vec<f64>,
}

impl QuadraticInstance {
    pub fn new(a: Vec<f64>, b: Vec<f64>, diag_a: Vec<f64>, diag_b: Vec<f64>) -> Result<Self> {
        let n = a.len();
        if b.len() != n || diag_a.len() != n || diag_b.len() != n {
            return Err(Error::contract("quadratic instance fields must share one length"));
        }
        if n == 0 {
            return Err(Error::contract("quadratic instance must have at least one coordinate"));
        }
        if diag_a.iter().chain(&diag_b).any(|&c| c < 0.0) {
            return Err(Error::contract("curvatures must be nonnegative"));
        }
        Ok(QuadraticInstance { a, b, diag_a, diag_b })
    }

    /// Canonical conflicted instance: the two minimizers sit on the same ray
    /// so the preservation constraint activates and lambda ramps smoothly.
    pub fn aligned(dim: usize) -> Self {
        let a: Vec<f64> = (0..dim).map(|i| 1.0 + 0.25 * i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v / 4.0).collect();
        let diag_a = vec![1.0; dim];
        let diag_b: Vec<f64> = (0..dim).map(|i| 1.0 + 0.5 * (i % 3) as f64).collect();
        QuadraticInstance { a, b, diag_a, diag_b }
    }

    /// Start on the far side of the erasure minimizer so descent on L_er
    /// marches straight through the preservation basin.
    pub fn aligned_start(&self) -> Vec<f64> {
        self.a.iter().map(|v| -1.5 * v).collect()
    }

    /// Instance whose minimizers sit in orthogonal directions. The
    /// constrained flow lands on a Pareto front where both gradients stay
    /// O(1), so the dual multiplier is bounded instead of diverging the way
    /// it does when the minimizers are colinear: the controller-agreement
    /// testbed.
    pub fn crossed() -> Self {
        QuadraticInstance {
            a: vec![1.0, 0.0],
            b: vec![0.0, 1.0],
            diag_a: vec![2.0, 2.0],
            diag_b: vec![0.6, 0.6],
        }
    }

    /// Start just inside the feasible region so the constraint activates
    /// within a few steps and the multiplier ramps through the run.
    pub fn crossed_start(&self) -> Vec<f64> {
        vec![0.3, -0.3]
    }

    pub fn l_er(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.a)
            .zip(&self.diag_a)
            .map(|((t, a), c)| 0.5 * c * (t - a) * (t - a))
            .sum()
    }

    pub fn l_pr(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.b)
            .zip(&self.diag_b)
            .map(|((t, b), c)| 0.5 * c * (t - b) * (t - b))
            .sum()
    }

    pub fn g_er(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.a)
            .zip(&self.diag_a)
            .map(|((t, a), c)| c * (t - a))
            .collect()
    }

    pub fn g_pr(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.b)
            .zip(&self.diag_b)
            .map(|((t, b), c)| c * (t - b))
            .collect()
    }

    /// Gradient Lipschitz constant of the preservation objective.
    pub fn g_smooth(&self) -> f64 {
        self.diag_b.iter().cloned().fold(0.0, f64::max)
    }
}

/// Per-step trace of a testbed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadStep {
    pub step: usize,
    pub theta: Vec<f64>,
    pub l_er: f64,
    pub l_pr: f64,
    /// Multiplier in force for this step's direction.
    pub lambda: f64,
    /// Closed-form dual value at this step (recorded in both modes).
    pub lambda_star: f64,
    pub g_tilde: Option<f64>,
    /// True constraint gradient g = g_pr(theta_prev) . d_prev + epsilon.
    pub g_true: Option<f64>,
    /// |g~ - g|, the implicit observation error.
    pub gap: Option<f64>,
    /// (G*alpha/2) ||d_prev||^2.
    pub gap_bound: Option<f64>,
    /// Exact quadratic gap (alpha/2) |d_prev' diag_b d_prev|.
    pub gap_exact: Option<f64>,
    pub d_sq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadRun {
    pub steps: Vec<QuadStep>,
    pub theta_final: Vec<f64>,
}

impl QuadRun {
    pub fn pr_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.l_pr).collect()
    }

    pub fn d_sq_series(&self) -> Vec<f64> {
        self.steps.iter().take(self.steps.len().saturating_sub(1)).map(|s| s.d_sq).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the dual controller on a quadratic instance with plain descent.
/// Records one entry per visited iterate, including the starting point
/// (whose direction fields describe the step taken FROM it).
pub fn run_quadratic(
    inst: &QuadraticInstance,
    theta0: &[f64],
    mode: DualMode,
    steps: usize,
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> Result<QuadRun> {
    if theta0.len() != inst.a.len() {
        return Err(Error::contract("starting point dimension mismatch"));
    }
    let mut state = DualControllerState::new(epsilon, alpha, beta)?;
    let mut theta = theta0.to_vec();
    let mut trace: Vec<QuadStep> = Vec::with_capacity(steps + 1);
    let mut prev_g_pr: Option<Vec<f64>> = None;
    let mut prev_d: Option<Vec<f64>> = None;

    for step in 0..=steps {
        let l_er = inst.l_er(&theta);
        let l_pr = inst.l_pr(&theta);
        let g_er = inst.g_er(&theta);
        let g_pr = inst.g_pr(&theta);
        let pair = GradientPair::new(g_er.clone(), g_pr.clone())?;
        let lam_star = match lambda_star(&pair, epsilon) {
            Ok(l) => l,
            Err(Error::Singularity(_)) => 0.0,
            Err(e) => return Err(e),
        };

        // implicit observation from the previous transition
        let (g_tilde, g_true, gap, gap_bound, gap_exact) = match (&prev_g_pr, &prev_d) {
            (Some(gp), Some(d)) => {
                let prev = state.prev_pr_loss.expect("observed on every prior step");
                let gt = match mode {
                    DualMode::Implicit => state.implicit_lambda_update(prev, l_pr)?,
                    DualMode::ExactDual => {
                        let gt = (prev - l_pr) / alpha + epsilon;
                        state.prev_pr_loss = Some(l_pr);
                        gt
                    }
                };
                let g = dot(gp, d) + epsilon;
                let bound = inst.g_smooth() * alpha / 2.0 * dot(d, d);
                let exact: f64 = alpha / 2.0
                    * d.iter()
                        .zip(&inst.diag_b)
                        .map(|(di, c)| c * di * di)
                        .sum::<f64>()
                        .abs();
                (Some(gt), Some(g), Some((gt - g).abs()), Some(bound), Some(exact))
            }
            _ => {
                state.observe(l_pr);
                (None, None, None, None, None)
            }
        };

        if mode == DualMode::ExactDual {
            state.lambda = lam_star.max(0.0);
        }

        let d = match mode {
            DualMode::ExactDual => match surgery_direction(&pair, epsilon) {
                Ok(d) => d,
                Err(Error::Singularity(_)) => g_er.clone(),
                Err(e) => return Err(e),
            },
            DualMode::Implicit => g_er
                .iter()
                .zip(&g_pr)
                .map(|(e, p)| e + state.lambda * p)
                .collect(),
        };
        let d_sq = dot(&d, &d);

        trace.push(QuadStep {
            step,
            theta: theta.clone(),
            l_er,
            l_pr,
            lambda: state.lambda,
            lambda_star: lam_star,
            g_tilde,
            g_true,
            gap,
            gap_bound,
            gap_exact,
            d_sq,
        });

        if step == steps {
            break;
        }
        for (t, di) in theta.iter_mut().zip(&d) {
            *t -= alpha * di;
        }
        prev_g_pr = Some(g_pr);
        prev_d = Some(d);
    }

    Ok(QuadRun { theta_final: theta, steps: trace })
}
