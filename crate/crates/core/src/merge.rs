//! Multi-concept erasure by weighted averaging of independently trained
//! adapters. The merge concatenates the scaled low-rank factors instead of
//! multiplying out dense deltas, so the result stays a gated adapter, the
//! linearity identity dW_merged = sum w_i dW_i holds exactly, and the
//! image-row gate is inherited structurally. Default weights are 1/N;
//! weights summing above 1 over-erase and are allowed but not defaulted.

use crate::error::{Error, Result};
use crate::model::{GatedLora, LoraLayer, LoraSite, ProjKind};
use crate::tensor::Mat;

fn hcat(mats: &[Mat]) -> Mat {
    let rows = mats[0].rows;
    let cols: usize = mats.iter().map(|m| m.cols).sum();
    let mut data = vec![0.0; rows * cols];
    let mut off = 0;
    for m in mats {
        for i in 0..rows {
            data[i * cols + off..i * cols + off + m.cols]
                .copy_from_slice(&m.data[i * m.cols..(i + 1) * m.cols]);
        }
        off += m.cols;
    }
    Mat::new(rows, cols, data)
}

fn vcat(mats: &[Mat]) -> Mat {
    let cols = mats[0].cols;
    let rows: usize = mats.iter().map(|m| m.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in mats {
        data.extend_from_slice(&m.data);
    }
    Mat::new(rows, cols, data)
}

fn scaled(m: &Mat, s: f64) -> Mat {
    Mat::new(m.rows, m.cols, m.data.iter().map(|v| v * s).collect())
}

/// Weighted merge of adapters trained against the same base. Per site the
/// down factors (scaled by w_i * scale_i) are concatenated column-wise and
/// the up factors row-wise, so the merged rank is the sum of input ranks and
/// the merged scale is 1.
pub fn merge(loras: &[GatedLora], weights: Option<&[f64]>) -> Result<GatedLora> {
    if loras.is_empty() {
        return Err(Error::contract("merge needs at least one adapter"));
    }
    let n = loras.len();
    let default_w = vec![1.0 / n as f64; n];
    let w = weights.unwrap_or(&default_w);
    if w.len() != n {
        return Err(Error::contract(format!(
            "{} weights for {} adapters",
            w.len(),
            n
        )));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::contract("merge weights must be finite and nonnegative"));
    }
    let n_layers = loras[0].layers.len();
    for (i, l) in loras.iter().enumerate() {
        if l.layers.len() != n_layers {
            return Err(Error::Merge(format!(
                "adapter {i} has {} layers, expected {n_layers}",
                l.layers.len()
            )));
        }
    }

    let mut layers = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let merge_site = |kind: ProjKind| -> Result<LoraSite> {
            let first = loras[0].layers[li].site(kind);
            let (d_in, d_out) = (first.down.rows, first.up.cols);
            let mut downs = Vec::with_capacity(n);
            let mut ups = Vec::with_capacity(n);
            for (i, l) in loras.iter().enumerate() {
                let site = l.layers[li].site(kind);
                if site.down.rows != d_in || site.up.cols != d_out {
                    return Err(Error::Merge(format!(
                        "adapter {i} layers.{li}.{}: {}x{} -> {}x{}, expected {}x_ -> _x{}",
                        kind.name(),
                        site.down.rows,
                        site.down.cols,
                        site.up.rows,
                        site.up.cols,
                        d_in,
                        d_out
                    )));
                }
                downs.push(scaled(&site.down, w[i] * l.scale));
                ups.push(site.up.clone());
            }
            Ok(LoraSite { down: hcat(&downs), up: vcat(&ups) })
        };
        layers.push(LoraLayer {
            q: merge_site(ProjKind::Q)?,
            k: merge_site(ProjKind::K)?,
            v: merge_site(ProjKind::V)?,
        });
    }
    let rank = loras.iter().map(|l| l.rank).sum();
    Ok(GatedLora { rank, scale: 1.0, layers })
}

/// Identity matrix helper for dense-delta equivalents.
fn eye(n: usize) -> Mat {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Mat::new(n, n, data)
}

/// Re-expresses an adapter as rank-d_out sites holding the dense delta
/// directly (down = dW, up = I), the reference object for linearity checks.
pub fn to_dense(lora: &GatedLora) -> GatedLora {
    let layers = lora
        .layers
        .iter()
        .map(|l| {
            let site = |s: &LoraSite| {
                let delta = s.dense_delta(lora.scale);
                let d_out = delta.cols;
                LoraSite { down: delta, up: eye(d_out) }
            };
            LoraLayer { q: site(&l.q), k: site(&l.k), v: site(&l.v) }
        })
        .collect();
    let d_out = lora.layers[0].q.up.cols;
    GatedLora { rank: d_out, scale: 1.0, layers }
}
