//! Inference-time attention interventions on the frozen model: zeroing the
//! attention columns of a concept's text tokens, the bypass demonstration
//! showing how brittle that is under token perturbation, and per-layer/head
//! concept localization from attention mass.

use crate::energy::energy_distance;
use crate::error::{Error, Result};
use crate::flow::{sample_cloud, Dataset, FlowPath};
use crate::model::{default_template, embed, forward_opts, Model, ZeroingPlan, PAD_TOKEN};
use crate::rng;
use crate::tensor::{Mat, Tape};
use serde::{Deserialize, Serialize};

// ── zeroing spec ────────────────────────────────────────────────────────────

/// Which attention columns to zero: the span is resolved by exact token-id
/// match against the prompt template, so any perturbed id silently bypasses
/// the intervention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroingSpec {
    pub target: u32,
    /// None = intervene at every layer.
    pub layers: Option<Vec<usize>>,
    pub renormalize: bool,
}

impl ZeroingSpec {
    pub fn new(target: u32) -> Self {
        ZeroingSpec { target, layers: None, renormalize: true }
    }

    /// Absolute column span of the target's contiguous run in the text
    /// segment, or None when the template does not contain it.
    pub fn resolve_span(&self, template: &[u32], n_img: usize) -> Option<(usize, usize)> {
        let start = template.iter().position(|&id| id == self.target)?;
        let mut end = start;
        while end + 1 < template.len() && template[end + 1] == self.target {
            end += 1;
        }
        Some((n_img + start, n_img + end))
    }

    /// Zeroing plan for a given prompt template (span possibly unresolved).
    pub fn plan(&self, template: &[u32], n_img: usize) -> ZeroingPlan {
        ZeroingPlan {
            span: self.resolve_span(template, n_img),
            layers: self.layers.clone(),
            renormalize: self.renormalize,
        }
    }

    /// Plan against the default prompt template for `concept`.
    pub fn sampling_plan(&self, model: &Model, concept: Option<u32>) -> ZeroingPlan {
        let (template, _) = default_template(&model.cfg, concept);
        self.plan(&template, model.cfg.n_img)
    }
}

/// One attention matrix exported off the tape.
#[derive(Debug, Clone)]
pub struct AttnMat {
    pub layer: usize,
    pub head: usize,
    pub a: Mat,
}

#[derive(Debug, Clone)]
pub struct ZeroedOut {
    pub velocity: Mat,
    pub attn: Vec<AttnMat>,
    /// The span the spec resolved to (None = bypassed, pass unmodified).
    pub span: Option<(usize, usize)>,
}

/// Forward pass with the spec's columns zeroed post-softmax (and rows
/// renormalized unless disabled). Pure read-only intervention.
pub fn zeroed_forward(
    model: &Model,
    x_t: &Mat,
    concept: Option<u32>,
    t: f64,
    spec: &ZeroingSpec,
) -> Result<ZeroedOut> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let seq = embed(&mut tape, &bound, x_t, concept, t)?;
    let plan = spec.plan(&seq.template, model.cfg.n_img);
    let out = forward_opts(&mut tape, &bound, None, &seq, Some(&plan))?;
    let attn = out
        .attn
        .iter()
        .map(|r| AttnMat { layer: r.layer, head: r.head, a: tape.to_mat(r.a) })
        .collect();
    Ok(ZeroedOut { velocity: tape.to_mat(out.velocity), attn, span: plan.span })
}

// ── bypass demonstration ────────────────────────────────────────────────────

/// Pairwise energy distances between conditional sampling runs with and
/// without zeroing, and with the prompt's concept id perturbed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BypassReport {
    pub concept: u32,
    pub perturbed: u32,
    pub steps: usize,
    pub n_samples: usize,
    /// Perturbed-prompt + zeroing vs plain conditional: small = bypass.
    pub d_perturbed_plain: f64,
    /// Zeroed conditional vs plain conditional: large = zeroing works.
    pub d_zeroed_plain: f64,
    pub d_zeroed_uncond: f64,
    pub d_plain_uncond: f64,
    pub d_perturbed_zeroed: f64,
}

/// Samples three conditional clouds (plain, zeroed, perturbed-prompt zeroed)
/// plus an unconditional reference and reports their pairwise distances.
/// The caller is responsible for having installed the perturbed embedding
/// (`Model::perturb_concept`) when `perturbed != concept`.
pub fn bypass_demo(
    model: &Model,
    concept: u32,
    perturbed: u32,
    steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<BypassReport> {
    if perturbed as usize >= model.cfg.vocab || perturbed == PAD_TOKEN {
        return Err(Error::domain(format!(
            "perturbed id {perturbed} outside usable vocabulary"
        )));
    }
    let spec = ZeroingSpec::new(concept);
    let zero_plan = spec.sampling_plan(model, Some(concept));
    let bypass_plan = spec.sampling_plan(model, Some(perturbed));

    let mut r_plain = rng::stream(seed, "bypass-plain", 0);
    let plain = sample_cloud(model, Some(concept), steps, None, None, n_samples, &mut r_plain)?;
    let mut r_zero = rng::stream(seed, "bypass-zeroed", 0);
    let zeroed = sample_cloud(
        model, Some(concept), steps, None, Some(&zero_plan), n_samples, &mut r_zero,
    )?;
    let mut r_pert = rng::stream(seed, "bypass-perturbed", 0);
    let pert = sample_cloud(
        model, Some(perturbed), steps, None, Some(&bypass_plan), n_samples, &mut r_pert,
    )?;
    let mut r_unc = rng::stream(seed, "bypass-uncond", 0);
    let uncond = sample_cloud(model, None, steps, None, None, n_samples, &mut r_unc)?;

    Ok(BypassReport {
        concept,
        perturbed,
        steps,
        n_samples,
        d_perturbed_plain: energy_distance(&pert, &plain)?,
        d_zeroed_plain: energy_distance(&zeroed, &plain)?,
        d_zeroed_uncond: energy_distance(&zeroed, &uncond)?,
        d_plain_uncond: energy_distance(&plain, &uncond)?,
        d_perturbed_zeroed: energy_distance(&pert, &zeroed)?,
    })
}

// ── localization ────────────────────────────────────────────────────────────

/// Mean image-to-concept attention mass per layer and head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizeProfile {
    pub layers: usize,
    pub heads: usize,
    /// Row-major layer x head, entries in [0, 1].
    pub mass: Vec<f64>,
}

impl LocalizeProfile {
    pub fn at(&self, layer: usize, head: usize) -> f64 {
        self.mass[layer * self.heads + head]
    }

    /// Per-layer mean over heads.
    pub fn layer_means(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|l| {
                self.mass[l * self.heads..(l + 1) * self.heads].iter().sum::<f64>()
                    / self.heads as f64
            })
            .collect()
    }

    /// Tab-separated "layer head mass" rows for the plot emitter.
    pub fn to_table(&self) -> String {
        let mut out = String::from("layer\thead\tmass\n");
        for l in 0..self.layers {
            for h in 0..self.heads {
                out.push_str(&format!("{l}\t{h}\t{:.17e}\n", self.at(l, h)));
            }
        }
        out
    }
}

/// Mean attention mass flowing from image-query rows into an explicit column
/// span, per layer/head, over `n_probes` noised-data probes. A span of None
/// profiles the concept span resolved by the prompt template.
pub fn localize_span(
    model: &Model,
    ds: Dataset,
    concept: u32,
    span: Option<(usize, usize)>,
    n_probes: usize,
    seed: u64,
) -> Result<LocalizeProfile> {
    if n_probes == 0 {
        return Err(Error::contract("localization needs at least one probe"));
    }
    let cfg = &model.cfg;
    let mut data_rng = rng::stream(seed, "loc-data", 0);
    let mut noise_rng = rng::stream(seed, "loc-noise", 0);
    let mut time_rng = rng::stream(seed, "loc-time", 0);
    let mut mass = vec![0.0; cfg.n_layers * cfg.n_heads];

    for _ in 0..n_probes {
        let path = FlowPath::draw(ds, cfg.n_img, concept, &mut data_rng, &mut noise_rng, &mut time_rng)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let seq = embed(&mut tape, &bound, &path.x_t, Some(concept), path.t)?;
        let (s, e) = match span.or(seq.concept_span) {
            Some(se) => se,
            None => return Err(Error::contract("no concept span to localize")),
        };
        if e >= cfg.seq_len() || s > e {
            return Err(Error::contract(format!(
                "localization span ({s}, {e}) outside sequence of length {}",
                cfg.seq_len()
            )));
        }
        let out = forward_opts(&mut tape, &bound, None, &seq, None)?;
        for rec in &out.attn {
            let a = tape.to_mat(rec.a);
            let mut m = 0.0;
            for i in 0..cfg.n_img {
                for j in s..=e {
                    m += a.at(i, j);
                }
            }
            mass[rec.layer * cfg.n_heads + rec.head] += m / cfg.n_img as f64;
        }
    }
    for m in &mut mass {
        *m /= n_probes as f64;
    }
    Ok(LocalizeProfile { layers: cfg.n_layers, heads: cfg.n_heads, mass })
}

/// Concept localization against the default prompt template.
pub fn localize(
    model: &Model,
    ds: Dataset,
    concept: u32,
    n_probes: usize,
    seed: u64,
) -> Result<LocalizeProfile> {
    localize_span(model, ds, concept, None, n_probes, seed)
}

/// Layer subset worth intervening on: layers whose mean concept mass exceeds
/// `factor` times the cross-layer median (the localized-layers mode feed).
pub fn salient_layers(profile: &LocalizeProfile, factor: f64) -> Vec<usize> {
    let mut means = profile.layer_means();
    let mut sorted = means.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    means
        .drain(..)
        .enumerate()
        .filter_map(|(l, m)| (m > factor * median).then_some(l))
        .collect()
}
