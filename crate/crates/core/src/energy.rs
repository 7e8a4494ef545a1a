//! Energy distance between two sample clouds: the desk-scale efficacy and
//! preservation metric. For clouds X, Y of row vectors,
//!
//! ```text
//!     E(X, Y) = 2 E||x - y|| - E||x - x'|| - E||y - y'||
//! ```
//!
//! estimated as a V-statistic (all ordered pairs including the zero diagonal)
//! so that identical clouds score exactly 0 and the estimate is always
//! nonnegative for any pair of clouds.

use crate::error::{Error, Result};
use crate::tensor::Mat;

fn row_dist(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise distance over all ordered row pairs of `a` x `b`.
fn mean_cross(a: &Mat, b: &Mat) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.rows {
        for j in 0..b.rows {
            sum += row_dist(a, i, b, j);
        }
    }
    sum / (a.rows * b.rows) as f64
}

/// V-statistic energy distance between two clouds of d-dimensional rows.
pub fn energy_distance(x: &Mat, y: &Mat) -> Result<f64> {
    if x.rows == 0 || y.rows == 0 {
        return Err(Error::contract("energy distance needs nonempty clouds"));
    }
    if x.cols != y.cols {
        return Err(Error::Dimension {
            op: "energy_distance",
            lhs: (x.rows, x.cols),
            rhs: (y.rows, y.cols),
        });
    }
    let xy = mean_cross(x, y);
    let xx = mean_cross(x, x);
    let yy = mean_cross(y, y);
    Ok(2.0 * xy - xx - yy)
}
