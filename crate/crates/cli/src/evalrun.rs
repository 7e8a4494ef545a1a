//! Adapter evaluation: paired sample clouds and energy-distance metrics.
//!
//! Before/after clouds for the same condition are drawn from the *same* RNG
//! stream index, so an adapter that is still the identity produces bitwise
//! identical clouds and an exact zero distance. The detection floor for each
//! condition is the distance between two base clouds drawn from stream
//! indices 0 and 1: the distance two honest resamplings of the same model
//! can't tell apart.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use streamgate::checkpoint::config_hash;
use streamgate::energy::energy_distance;
use streamgate::error::{Error, Result};
use streamgate::flow::{sample_cloud, Dataset};
use streamgate::model::{GatedLora, Model};
use streamgate::rng::stream;
use streamgate::tensor::Mat;

use crate::config::EvalConfig;

// ── record ──────────────────────────────────────────────────────────────────

/// Paired distances for one condition that the adapter must leave alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptDistance {
    pub concept: u32,
    /// Paired before/after distance under this condition.
    pub shift: f64,
    /// Two-seed base self-distance: the detection floor.
    pub floor: f64,
}

/// One evaluation of an adapter against its base checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub wall_clock_unix: u64,
    pub config_hash: String,
    pub dataset: Dataset,
    pub erased: u32,
    pub sample_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// How far erased-condition samples moved from the base conditional.
    pub efficacy: f64,
    /// Two-seed self-distance of the base erased-condition cloud.
    pub efficacy_floor: f64,
    /// One entry per unerased concept in the dataset.
    pub preserved: Vec<ConceptDistance>,
    pub uncond_shift: f64,
    pub uncond_floor: f64,
}

/// The raw clouds behind an [`EvalRecord`], for CSV export.
pub struct EvalClouds {
    pub erased_before: Mat,
    pub erased_after: Mat,
    /// (concept, before, after) for each unerased concept.
    pub preserved: Vec<(u32, Mat, Mat)>,
    pub uncond_before: Mat,
    pub uncond_after: Mat,
}

// ── sampling ────────────────────────────────────────────────────────────────

fn stream_tag(concept: Option<u32>) -> String {
    match concept {
        Some(c) => format!("eval-c{c}"),
        None => "eval-uncond".to_string(),
    }
}

/// One pooled cloud for `(adapter?, condition)` at a fixed stream index.
pub fn eval_cloud(
    model: &Model,
    lora: Option<&GatedLora>,
    concept: Option<u32>,
    cfg: &EvalConfig,
    idx: u64,
) -> Result<Mat> {
    let mut r = stream(cfg.seed, &stream_tag(concept), idx);
    sample_cloud(model, concept, cfg.steps, lora, None, cfg.n_samples, &mut r)
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Scores `lora` against `model`: efficacy on the erased concept, paired
/// shift and floor on every other concept and on the unconditional branch.
pub fn eval_erasure(
    model: &Model,
    lora: Option<&GatedLora>,
    ds: Dataset,
    erased: u32,
    cfg: &EvalConfig,
    step: usize,
) -> Result<(EvalRecord, EvalClouds)> {
    if !ds.concepts().contains(&erased) {
        return Err(Error::domain(format!(
            "concept {erased} is not part of the dataset"
        )));
    }
    let pair = |concept: Option<u32>| -> Result<(f64, f64, Mat, Mat)> {
        let before = eval_cloud(model, None, concept, cfg, 0)?;
        let before2 = eval_cloud(model, None, concept, cfg, 1)?;
        let after = eval_cloud(model, lora, concept, cfg, 0)?;
        let shift = energy_distance(&after, &before)?;
        let floor = energy_distance(&before, &before2)?;
        Ok((shift, floor, before, after))
    };

    let (efficacy, efficacy_floor, er_before, er_after) = pair(Some(erased))?;
    let mut preserved = Vec::new();
    let mut preserved_clouds = Vec::new();
    for &c in ds.concepts().iter().filter(|&&c| c != erased) {
        let (shift, floor, before, after) = pair(Some(c))?;
        preserved.push(ConceptDistance { concept: c, shift, floor });
        preserved_clouds.push((c, before, after));
    }
    let (uncond_shift, uncond_floor, un_before, un_after) = pair(None)?;

    let record = EvalRecord {
        step,
        wall_clock_unix: now_unix(),
        config_hash: config_hash(&model.cfg),
        dataset: ds,
        erased,
        sample_steps: cfg.steps,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        efficacy,
        efficacy_floor,
        preserved,
        uncond_shift,
        uncond_floor,
    };
    let clouds = EvalClouds {
        erased_before: er_before,
        erased_after: er_after,
        preserved: preserved_clouds,
        uncond_before: un_before,
        uncond_after: un_after,
    };
    Ok((record, clouds))
}
