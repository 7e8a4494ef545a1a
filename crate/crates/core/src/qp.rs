//! Small dense solver for the per-step direction problem
//!
//! ```text
//!     maximize   g_er . d  -  1/2 ||d||^2
//!     subject to g_pr . d >= -epsilon
//! ```
//!
//! by projected gradient ascent. The objective is 1-strongly concave, so the
//! maximizer is unique and the iteration contracts; this solver is kept free
//! of the closed-form dual solution on purpose, to serve as an independent
//! numerical cross-check of it.

use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean projection onto the halfspace { d : g_pr . d >= -epsilon }.
fn project(d: &mut [f64], g_pr: &[f64], g_pr_sq: f64, epsilon: f64) {
    if g_pr_sq == 0.0 {
        return;
    }
    let slack = dot(g_pr, d) + epsilon;
    if slack < 0.0 {
        let shift = -slack / g_pr_sq;
        for (di, gi) in d.iter_mut().zip(g_pr) {
            *di += shift * gi;
        }
    }
}

/// Solves the direction QP numerically. With a vanishing preservation
/// gradient the constraint is vacuous for epsilon >= 0 and the unconstrained
/// maximizer g_er is returned; epsilon < 0 would make it infeasible.
pub fn qp_oracle(g_er: &[f64], g_pr: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if g_er.len() != g_pr.len() {
        return Err(Error::contract(format!(
            "gradient length mismatch: {} vs {}",
            g_er.len(),
            g_pr.len()
        )));
    }
    if g_er.iter().chain(g_pr).any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "qp_oracle" });
    }
    let g_pr_sq = dot(g_pr, g_pr);
    if g_pr_sq == 0.0 {
        if epsilon < 0.0 {
            return Err(Error::Singularity(
                "zero preservation gradient with negative tolerance: infeasible".into(),
            ));
        }
        return Ok(g_er.to_vec());
    }

    let mut d = vec![0.0; g_er.len()];
    project(&mut d, g_pr, g_pr_sq, epsilon);
    let step = 0.5;
    for _ in 0..400 {
        // ascent on g_er.d - 1/2 d.d, gradient g_er - d
        let mut max_move = 0.0f64;
        for i in 0..d.len() {
            let next = d[i] + step * (g_er[i] - d[i]);
            max_move = max_move.max((next - d[i]).abs());
            d[i] = next;
        }
        project(&mut d, g_pr, g_pr_sq, epsilon);
        if max_move < 1e-14 {
            break;
        }
    }
    Ok(d)
}

/// Constraint slack g_pr . d + epsilon of a candidate direction (negative
/// means infeasible).
pub fn constraint_slack(d: &[f64], g_pr: &[f64], epsilon: f64) -> f64 {
    dot(g_pr, d) + epsilon
}
