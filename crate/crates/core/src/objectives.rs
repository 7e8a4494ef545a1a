//! The erasure-side training objectives, all computed against a frozen base
//! model with only the adapter trainable.
//!
//! Expectations are implemented as means: over the batch, and over velocity
//! entries (so every loss is a per-entry mean squared error or an attention
//! mass in [0, 1]). Targets built from the frozen model are detached, so
//! gradients can only flow through the adapter's forward path.

use crate::error::{Error, Result};
use crate::flow::{randn, Dataset, FlowPath};
use crate::model::{
    attention_mass, embed, forward, shuffle_tokens_to_offset, BoundLora, BoundModel, MassOpts,
    Model,
};
use crate::rng;
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Where the noisy inputs x_t come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XtSource {
    /// Noise real dataset samples along the linear path at uniform t.
    NoisedData,
    /// Partially denoise pure noise with the frozen model for a random
    /// number of Euler steps.
    PartialTrajectory { steps: usize },
}

/// One training batch: noisy samples with their times, the concept to erase,
/// the concept to preserve, and the guidance strength.
#[derive(Debug, Clone)]
pub struct ErasureBatch {
    /// (x_t, t) pairs, x_t: n_img x d_data.
    pub items: Vec<(crate::tensor::Mat, f64)>,
    pub c_er: u32,
    pub c_pr: u32,
    pub eta: f64,
}

/// Draws one batch, deterministic per (seed, step). Data samples are a
/// uniform mixture over the dataset's concepts.
pub fn draw_batch(
    model: &Model,
    ds: Dataset,
    c_er: u32,
    c_pr: u32,
    eta: f64,
    n: usize,
    source: XtSource,
    seed: u64,
    step: u64,
) -> Result<ErasureBatch> {
    if eta <= 0.0 {
        return Err(Error::contract(format!("guidance strength must be > 0, got {eta}")));
    }
    if n == 0 {
        return Err(Error::contract("erasure batch must be non-empty"));
    }
    let mut mix_rng = rng::stream(seed, "er-mix", step);
    let mut data_rng = rng::stream(seed, "er-data", step);
    let mut noise_rng = rng::stream(seed, "er-noise", step);
    let mut time_rng = rng::stream(seed, "er-time", step);
    let n_img = model.cfg.n_img;
    let concepts = ds.concepts();

    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let c = concepts[mix_rng.gen_range(0..concepts.len())];
        match source {
            XtSource::NoisedData => {
                let path = FlowPath::draw(ds, n_img, c, &mut data_rng, &mut noise_rng, &mut time_rng)?;
                items.push((path.x_t, path.t));
            }
            XtSource::PartialTrajectory { steps } => {
                if steps == 0 {
                    return Err(Error::contract("partial-trajectory source needs steps >= 1"));
                }
                let k = time_rng.gen_range(0..=steps);
                let x1 = randn(n_img, model.cfg.d_data, &mut noise_rng);
                let t = 1.0 - k as f64 / steps as f64;
                let x = if k == 0 {
                    x1
                } else {
                    // integrate only the first k steps of the full schedule
                    let mut state = x1;
                    for i in 0..k {
                        let t_i = 1.0 - i as f64 / steps as f64;
                        let t_next = 1.0 - (i + 1) as f64 / steps as f64;
                        let v = model.velocity(&state, Some(c), t_i, None, None)?;
                        for (xe, ve) in state.data.iter_mut().zip(&v.data) {
                            *xe -= (t_i - t_next) * ve;
                        }
                    }
                    state
                };
                items.push((x, t));
            }
        }
    }
    Ok(ErasureBatch { items, c_er, c_pr, eta })
}

// ── losses ──────────────────────────────────────────────────────────────────

/// Negative-guidance erasure loss: the adapted conditional velocity is pulled
/// toward the detached target v(∅) − η·(v(c_er) − v(∅)), i.e. away from the
/// concept and past the unconditional prediction.
pub fn erase_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    lora: &BoundLora,
    batch: &ErasureBatch,
) -> Result<TensorId> {
    if batch.items.is_empty() {
        return Err(Error::contract("erase_loss: empty batch"));
    }
    let mut total: Option<TensorId> = None;
    for (x_t, t) in &batch.items {
        let seq_c = embed(tape, bound, x_t, Some(batch.c_er), *t)?;
        let adapted = forward(tape, bound, Some(lora), &seq_c)?.velocity;

        let frozen_c = forward(tape, bound, None, &seq_c)?.velocity;
        let seq_u = embed(tape, bound, x_t, None, *t)?;
        let frozen_u = forward(tape, bound, None, &seq_u)?.velocity;
        // target = (1+η)·v(∅) − η·v(c_er)
        let scaled_u = tape.scale(frozen_u, 1.0 + batch.eta);
        let scaled_c = tape.scale(frozen_c, batch.eta);
        let raw_target = tape.sub(scaled_u, scaled_c)?;
        let target = tape.detach(raw_target);

        let err = tape.mse(adapted, target)?;
        total = Some(match total {
            None => err,
            Some(acc) => tape.add(acc, err)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.items.len() as f64))
}

/// Attention suppression at fixed shuffle offsets (one per batch element):
/// mean attention mass received by the relocated concept span.
pub fn attn_loss_at_offsets(
    tape: &mut Tape,
    bound: &BoundModel,
    lora: &BoundLora,
    batch: &ErasureBatch,
    offsets: &[usize],
    opts: &MassOpts,
) -> Result<TensorId> {
    if batch.items.is_empty() {
        return Err(Error::contract("attn_loss: empty batch"));
    }
    if offsets.len() != batch.items.len() {
        return Err(Error::contract(format!(
            "attn_loss: {} offsets for {} batch elements",
            offsets.len(),
            batch.items.len()
        )));
    }
    let mut total: Option<TensorId> = None;
    for ((x_t, t), &offset) in batch.items.iter().zip(offsets) {
        let seq = embed(tape, bound, x_t, Some(batch.c_er), *t)?;
        if seq.concept_span.is_none() {
            return Err(Error::contract("attn_loss: concept span is empty"));
        }
        let shuffled = shuffle_tokens_to_offset(tape, bound, &seq, offset)?;
        let out = forward(tape, bound, Some(lora), &shuffled)?;
        let mass = attention_mass(tape, &out.attn, bound.cfg.n_img, shuffled.concept_span, opts)?;
        total = Some(match total {
            None => mass,
            Some(acc) => tape.add(acc, mass)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.items.len() as f64))
}

/// Draws independent shuffle offsets for a batch (concept block relocated
/// uniformly among the text slots).
pub fn draw_offsets(model: &Model, batch_len: usize, r: &mut impl Rng) -> Vec<usize> {
    let max_offset = model.cfg.n_txt - 1; // single-token concept block
    (0..batch_len).map(|_| r.gen_range(0..=max_offset)).collect()
}

/// Attention suppression with random shuffles drawn from `r`.
pub fn attn_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    lora: &BoundLora,
    batch: &ErasureBatch,
    opts: &MassOpts,
    r: &mut impl Rng,
) -> Result<TensorId> {
    let max_offset = bound.cfg.n_txt - 1;
    let offsets: Vec<usize> = (0..batch.items.len())
        .map(|_| r.gen_range(0..=max_offset))
        .collect();
    attn_loss_at_offsets(tape, bound, lora, batch, &offsets, opts)
}

/// Preservation loss: drift of the adapted model from the frozen one on the
/// unconditional prompt and on the preservation concept, same x_t batch for
/// both terms.
pub fn preserve_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    lora: &BoundLora,
    batch: &ErasureBatch,
) -> Result<TensorId> {
    if batch.items.is_empty() {
        return Err(Error::contract("preserve_loss: empty batch"));
    }
    let mut total: Option<TensorId> = None;
    for (x_t, t) in &batch.items {
        let term = |tape: &mut Tape, concept: Option<u32>| -> Result<TensorId> {
            let seq = embed(tape, bound, x_t, concept, *t)?;
            let adapted = forward(tape, bound, Some(lora), &seq)?.velocity;
            let frozen_raw = forward(tape, bound, None, &seq)?.velocity;
            let frozen = tape.detach(frozen_raw);
            tape.mse(adapted, frozen)
        };
        let u = term(tape, None)?;
        let p = term(tape, Some(batch.c_pr))?;
        let pair = tape.add(u, p)?;
        total = Some(match total {
            None => pair,
            Some(acc) => tape.add(acc, pair)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.items.len() as f64))
}

/// Combined erasure-side objective: erase_loss + attn_weight * attn_loss.
#[allow(clippy::too_many_arguments)]
pub fn er_total_at_offsets(
    tape: &mut Tape,
    bound: &BoundModel,
    lora: &BoundLora,
    batch: &ErasureBatch,
    offsets: &[usize],
    attn_weight: f64,
    opts: &MassOpts,
) -> Result<TensorId> {
    let er = erase_loss(tape, bound, lora, batch)?;
    let at = attn_loss_at_offsets(tape, bound, lora, batch, offsets, opts)?;
    let weighted = tape.scale(at, attn_weight);
    tape.add(er, weighted)
}

#[allow(clippy::too_many_arguments)]
pub fn er_total(
    tape: &mut Tape,
    bound: &BoundModel,
    lora: &BoundLora,
    batch: &ErasureBatch,
    attn_weight: f64,
    opts: &MassOpts,
    r: &mut impl Rng,
) -> Result<TensorId> {
    let max_offset = bound.cfg.n_txt - 1;
    let offsets: Vec<usize> = (0..batch.items.len())
        .map(|_| r.gen_range(0..=max_offset))
        .collect();
    er_total_at_offsets(tape, bound, lora, batch, &offsets, attn_weight, opts)
}
