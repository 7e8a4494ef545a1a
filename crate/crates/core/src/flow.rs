//! Conditional flow matching on synthetic 2-D token distributions, plus the
//! Euler sampler used for generation.
//!
//! The path convention is linear (rectified): x_t = (1-t)*x0 + t*x1 with data
//! at t=0 and standard-normal noise at t=1, so the target velocity x1 - x0 is
//! constant along the path and one exact Euler step inverts it.

use crate::error::{Error, Result};
use crate::model::{embed, forward, lora_grads_flat, model_grads_flat, BoundLora, GatedLora, Model, ZeroingPlan};
use crate::optim::AdamW;
use crate::rng;
use crate::tensor::{Mat, Tape, TensorId};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

// ── datasets ────────────────────────────────────────────────────────────────

/// Synthetic per-concept distributions over R^2 token vectors. An "image" is
/// n_img i.i.d. rows from the concept's distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    /// Concept 1 at N(+2*1, 0.25 I), concept 2 at N(-2*1, 0.25 I).
    #[default]
    TwoGaussians,
    /// Concept 1 on a radius-2 ring, concept 2 a blob at the origin.
    RingVsBlob,
    /// Concepts 1, 2, 3 at (+2,+2), (-2,-2), (+2,-2), all 0.25 I.
    ThreeGaussians,
}

impl Dataset {
    pub fn concepts(self) -> &'static [u32] {
        match self {
            Dataset::TwoGaussians | Dataset::RingVsBlob => &[1, 2],
            Dataset::ThreeGaussians => &[1, 2, 3],
        }
    }

    pub fn d_data(self) -> usize {
        2
    }

    /// Gaussian mode center, where one exists (`None` for the ring).
    pub fn mode_center(self, concept: u32) -> Option<[f64; 2]> {
        match (self, concept) {
            (Dataset::TwoGaussians, 1) => Some([2.0, 2.0]),
            (Dataset::TwoGaussians, 2) => Some([-2.0, -2.0]),
            (Dataset::RingVsBlob, 2) => Some([0.0, 0.0]),
            (Dataset::ThreeGaussians, 1) => Some([2.0, 2.0]),
            (Dataset::ThreeGaussians, 2) => Some([-2.0, -2.0]),
            (Dataset::ThreeGaussians, 3) => Some([2.0, -2.0]),
            _ => None,
        }
    }

    pub fn sample_point(self, concept: u32, r: &mut impl Rng) -> Result<[f64; 2]> {
        let gauss = |c: [f64; 2], sigma: f64, r: &mut dyn rand::RngCore| {
            let rr = r;
            [
                c[0] + sigma * rr.sample::<f64, _>(StandardNormal),
                c[1] + sigma * rr.sample::<f64, _>(StandardNormal),
            ]
        };
        match (self, concept) {
            (Dataset::RingVsBlob, 1) => {
                let angle = r.gen::<f64>() * std::f64::consts::TAU;
                let radius = 2.0 + 0.1 * r.sample::<f64, _>(StandardNormal);
                Ok([radius * angle.cos(), radius * angle.sin()])
            }
            _ => match self.mode_center(concept) {
                Some(c) => Ok(gauss(c, 0.5, r)),
                None => Err(Error::domain(format!(
                    "dataset {self:?} has no concept {concept}"
                ))),
            },
        }
    }

    pub fn sample_image(self, n_img: usize, concept: u32, r: &mut impl Rng) -> Result<Mat> {
        let mut data = Vec::with_capacity(n_img * 2);
        for _ in 0..n_img {
            let p = self.sample_point(concept, r)?;
            data.extend_from_slice(&p);
        }
        Ok(Mat::new(n_img, 2, data))
    }
}

/// Pooled data tokens: `n_samples` images flattened to (n_samples * n_img)
/// rows of R^2 points.
pub fn data_cloud(
    ds: Dataset,
    n_img: usize,
    concept: u32,
    n_samples: usize,
    r: &mut impl Rng,
) -> Result<Mat> {
    let mut data = Vec::with_capacity(n_samples * n_img * 2);
    for _ in 0..n_samples {
        let img = ds.sample_image(n_img, concept, r)?;
        data.extend_from_slice(&img.data);
    }
    Ok(Mat::new(n_samples * n_img, 2, data))
}

/// One concept label draw with unconditional dropout.
pub fn draw_condition(ds: Dataset, uncond_prob: f64, r: &mut impl Rng) -> Option<u32> {
    let concepts = ds.concepts();
    let c = concepts[r.gen_range(0..concepts.len())];
    if r.gen::<f64>() < uncond_prob {
        None
    } else {
        Some(c)
    }
}

pub fn randn(rows: usize, cols: usize, r: &mut impl Rng) -> Mat {
    let data = (0..rows * cols)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();
    Mat::new(rows, cols, data)
}

// ── flow path ───────────────────────────────────────────────────────────────

/// Linear interpolation between a data sample (t=0) and a noise sample (t=1).
#[derive(Debug, Clone)]
pub struct FlowPath {
    pub x0: Mat,
    pub x1: Mat,
    pub t: f64,
    pub x_t: Mat,
    pub v_target: Mat,
}

impl FlowPath {
    pub fn new(x0: Mat, x1: Mat, t: f64) -> Result<Self> {
        if x0.rows != x1.rows || x0.cols != x1.cols {
            return Err(Error::Dimension {
                op: "flow_path",
                lhs: (x0.rows, x0.cols),
                rhs: (x1.rows, x1.cols),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("path time {t} outside [0, 1]")));
        }
        let x_t = Mat::new(
            x0.rows,
            x0.cols,
            x0.data
                .iter()
                .zip(&x1.data)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect(),
        );
        let v_target = Mat::new(
            x0.rows,
            x0.cols,
            x1.data.iter().zip(&x0.data).map(|(b, a)| b - a).collect(),
        );
        Ok(FlowPath { x0, x1, t, x_t, v_target })
    }

    /// Draws one path: data sample from the dataset, fresh noise, uniform t.
    pub fn draw(
        ds: Dataset,
        n_img: usize,
        concept: u32,
        data_rng: &mut impl Rng,
        noise_rng: &mut impl Rng,
        time_rng: &mut impl Rng,
    ) -> Result<Self> {
        let x0 = ds.sample_image(n_img, concept, data_rng)?;
        let x1 = randn(n_img, 2, noise_rng);
        let t = time_rng.gen::<f64>();
        FlowPath::new(x0, x1, t)
    }
}

// ── objective ───────────────────────────────────────────────────────────────

/// Mean over the batch of the per-entry mean squared error between the
/// predicted and target velocities.
pub fn fm_loss(
    tape: &mut Tape,
    bound: &crate::model::BoundModel,
    lora: Option<&BoundLora>,
    batch: &[(FlowPath, Option<u32>)],
) -> Result<TensorId> {
    if batch.is_empty() {
        return Err(Error::contract("fm_loss: empty batch"));
    }
    let mut total: Option<TensorId> = None;
    for (path, concept) in batch {
        let seq = embed(tape, bound, &path.x_t, *concept, path.t)?;
        let out = forward(tape, bound, lora, &seq)?;
        let target = tape.constant(&path.v_target);
        let err = tape.mse(out.velocity, target)?;
        total = Some(match total {
            None => err,
            Some(acc) => tape.add(acc, err)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

// ── sampling ────────────────────────────────────────────────────────────────

/// Plain Euler integration of dx/dt = field(x, t) from t=1 down to t=0 with
/// uniform steps, starting at `x1`.
pub fn euler_integrate(
    x1: Mat,
    steps: usize,
    mut field: impl FnMut(&Mat, f64) -> Result<Mat>,
) -> Result<Mat> {
    if steps == 0 {
        return Err(Error::contract("euler_integrate: steps must be >= 1"));
    }
    let mut x = x1;
    for i in 0..steps {
        let t_i = 1.0 - i as f64 / steps as f64;
        let t_next = 1.0 - (i + 1) as f64 / steps as f64;
        let dt = t_i - t_next;
        let v = field(&x, t_i)?;
        if v.rows != x.rows || v.cols != x.cols {
            return Err(Error::Dimension {
                op: "euler_integrate",
                lhs: (x.rows, x.cols),
                rhs: (v.rows, v.cols),
            });
        }
        for (xe, ve) in x.data.iter_mut().zip(&v.data) {
            *xe -= dt * ve;
        }
    }
    Ok(x)
}

/// Generates one image by integrating the model's velocity field from
/// N(0, I) noise at t=1 down to t=0. Deterministic given the rng state.
pub fn euler_sample(
    model: &Model,
    concept: Option<u32>,
    steps: usize,
    lora: Option<&GatedLora>,
    zero: Option<&ZeroingPlan>,
    r: &mut impl Rng,
) -> Result<Mat> {
    let x1 = randn(model.cfg.n_img, model.cfg.d_data, r);
    euler_integrate(x1, steps, |x, t| model.velocity(x, concept, t, lora, zero))
}

/// Pooled generated tokens: `n_samples` independent Euler samples flattened
/// to (n_samples * n_img) rows.
pub fn sample_cloud(
    model: &Model,
    concept: Option<u32>,
    steps: usize,
    lora: Option<&GatedLora>,
    zero: Option<&ZeroingPlan>,
    n_samples: usize,
    r: &mut impl Rng,
) -> Result<Mat> {
    let mut data = Vec::with_capacity(n_samples * model.cfg.n_img * model.cfg.d_data);
    for _ in 0..n_samples {
        let img = euler_sample(model, concept, steps, lora, zero, r)?;
        data.extend_from_slice(&img.data);
    }
    Ok(Mat::new(n_samples * model.cfg.n_img, model.cfg.d_data, data))
}

// ── base training ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub uncond_prob: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            uncond_prob: 0.1,
            seed: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainLog {
    /// (step, minibatch loss before that step's update).
    pub losses: Vec<(usize, f64)>,
    /// Loss on one fresh batch after the final update.
    pub final_loss: f64,
}

/// Trains the base model in place with AdamW on the flow-matching objective,
/// dropping the concept label to the unconditional template with probability
/// `uncond_prob`.
pub fn train_base(model: &mut Model, ds: Dataset, tc: &TrainConfig) -> Result<TrainLog> {
    if ds.d_data() != model.cfg.d_data {
        return Err(Error::config(format!(
            "dataset is {}-dimensional but the model expects d_data={}",
            ds.d_data(),
            model.cfg.d_data
        )));
    }
    if tc.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut data_rng = rng::stream(tc.seed, "train-data", 0);
    let mut noise_rng = rng::stream(tc.seed, "train-noise", 0);
    let mut time_rng = rng::stream(tc.seed, "train-time", 0);
    let mut label_rng = rng::stream(tc.seed, "train-label", 0);

    let mut flat = model.to_flat();
    let mut opt = AdamW::new(flat.len(), tc.lr, tc.weight_decay);
    let mut log = TrainLog::default();

    let draw_batch = |data_rng: &mut rand_chacha::ChaCha8Rng,
                      noise_rng: &mut rand_chacha::ChaCha8Rng,
                      time_rng: &mut rand_chacha::ChaCha8Rng,
                      label_rng: &mut rand_chacha::ChaCha8Rng,
                      n_img: usize|
     -> Result<Vec<(FlowPath, Option<u32>)>> {
        (0..tc.batch)
            .map(|_| {
                let concepts = ds.concepts();
                let c = concepts[label_rng.gen_range(0..concepts.len())];
                let label = if label_rng.gen::<f64>() < tc.uncond_prob { None } else { Some(c) };
                let path = FlowPath::draw(ds, n_img, c, data_rng, noise_rng, time_rng)?;
                Ok((path, label))
            })
            .collect()
    };

    for step in 0..tc.steps {
        let batch = draw_batch(&mut data_rng, &mut noise_rng, &mut time_rng, &mut label_rng, model.cfg.n_img)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let loss = fm_loss(&mut tape, &bound, None, &batch)?;
        let val = tape.scalar(loss);
        if !val.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("flow-matching loss diverged to {val}"),
            });
        }
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            log.losses.push((step, val));
        }
        tape.backward(loss)?;
        let grads = model_grads_flat(&tape, &bound);
        opt.step(&mut flat, &grads);
        model.apply_flat(&flat);
    }

    // final evaluation batch (fresh draws, no update)
    let batch = draw_batch(&mut data_rng, &mut noise_rng, &mut time_rng, &mut label_rng, model.cfg.n_img)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let loss = fm_loss(&mut tape, &bound, None, &batch)?;
    log.final_loss = tape.scalar(loss);
    Ok(log)
}

/// Exposed for reuse by erasure training: gradients of a lora-bearing loss.
pub fn lora_grads(tape: &Tape, bound: &BoundLora) -> Vec<f64> {
    lora_grads_flat(tape, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_k: 4,
            n_heads: 2,
            n_layers: 2,
            n_img: 3,
            n_txt: 4,
            vocab: 6,
            time_embed_dim: 4,
            d_data: 2,
            d_ff: 16,
            rms_eps: 1e-6,
        }
    }

    #[test]
    fn path_endpoints_are_exact() {
        let mut r = rng::stream(1, "path-test", 0);
        let x0 = randn(3, 2, &mut r);
        let x1 = randn(3, 2, &mut r);
        let p0 = FlowPath::new(x0.clone(), x1.clone(), 0.0).unwrap();
        let p1 = FlowPath::new(x0.clone(), x1.clone(), 1.0).unwrap();
        assert_eq!(p0.x_t.data, x0.data);
        assert_eq!(p1.x_t.data, x1.data);
        // v_target does not depend on t
        let pm = FlowPath::new(x0.clone(), x1.clone(), 0.37).unwrap();
        assert_eq!(p0.v_target.data, pm.v_target.data);
        for (v, (a, b)) in pm.v_target.data.iter().zip(x1.data.iter().zip(&x0.data)) {
            assert_eq!(*v, a - b);
        }
    }

    #[test]
    fn path_rejects_mismatched_shapes_and_bad_time() {
        let x0 = Mat::zeros(2, 2);
        let x1 = Mat::zeros(3, 2);
        assert!(FlowPath::new(x0.clone(), x1, 0.5).is_err());
        assert!(FlowPath::new(x0.clone(), x0.clone(), 1.5).is_err());
    }

    #[test]
    fn constant_field_telescopes_exactly() {
        let mut r = rng::stream(2, "euler-test", 0);
        let x1 = randn(3, 2, &mut r);
        let c = randn(3, 2, &mut r);
        // a single full step is the literal subtraction, hence bitwise
        let out = euler_integrate(x1.clone(), 1, |_, _| Ok(c.clone())).unwrap();
        for (o, (a, b)) in out.data.iter().zip(x1.data.iter().zip(&c.data)) {
            assert_eq!(o.to_bits(), (a - b).to_bits());
        }
        for steps in [3usize, 4, 7, 8, 9, 16] {
            let out = euler_integrate(x1.clone(), steps, |_, _| Ok(c.clone())).unwrap();
            for (o, (a, b)) in out.data.iter().zip(x1.data.iter().zip(&c.data)) {
                assert!((o - (a - b)).abs() < 1e-12, "steps={steps}");
            }
        }
    }

    #[test]
    fn point_mass_field_recovers_data_for_any_step_count() {
        let mut r = rng::stream(3, "euler-test", 1);
        let x0 = randn(3, 2, &mut r);
        let x1 = randn(3, 2, &mut r);
        let v = Mat::new(
            3,
            2,
            x1.data.iter().zip(&x0.data).map(|(b, a)| b - a).collect(),
        );
        for steps in [1usize, 2, 3, 5, 9, 16, 100] {
            let out = euler_integrate(x1.clone(), steps, |_, _| Ok(v.clone())).unwrap();
            for (o, a) in out.data.iter().zip(&x0.data) {
                assert!((o - a).abs() < 1e-12, "steps={steps}");
            }
        }
    }

    #[test]
    fn euler_integrate_rejects_zero_steps() {
        let x = Mat::zeros(1, 2);
        assert!(euler_integrate(x, 0, |_, _| Ok(Mat::zeros(1, 2))).is_err());
    }

    #[test]
    fn euler_sample_is_deterministic_given_stream() {
        let model = Model::init(test_cfg(), 4).unwrap();
        let draw = || {
            let mut r = rng::stream(5, "sample", 0);
            euler_sample(&model, Some(1), 4, None, None, &mut r).unwrap()
        };
        let a = draw();
        let b = draw();
        let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }

    #[test]
    fn dataset_moments_match_specification() {
        let mut r = rng::stream(6, "moments", 0);
        let n = 4000;
        let cloud = data_cloud(Dataset::TwoGaussians, 1, 1, n, &mut r).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|j| cloud.data.iter().skip(j).step_by(2).sum::<f64>() / n as f64)
            .collect();
        assert!((mean[0] - 2.0).abs() < 0.1 && (mean[1] - 2.0).abs() < 0.1);
        let var: f64 = cloud
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let d = v - mean[i % 2];
                d * d
            })
            .sum::<f64>()
            / (2 * n) as f64;
        assert!((var - 0.25).abs() < 0.05);
    }

    #[test]
    fn ring_samples_sit_near_radius_two() {
        let mut r = rng::stream(7, "ring", 0);
        let cloud = data_cloud(Dataset::RingVsBlob, 1, 1, 1000, &mut r).unwrap();
        for i in 0..cloud.rows {
            let radius = (cloud.at(i, 0).powi(2) + cloud.at(i, 1).powi(2)).sqrt();
            assert!((radius - 2.0).abs() < 0.8);
        }
    }

    #[test]
    fn unknown_concept_is_a_domain_error() {
        let mut r = rng::stream(8, "bad-concept", 0);
        assert!(matches!(
            Dataset::TwoGaussians.sample_point(3, &mut r),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn label_dropout_rate_within_one_percent() {
        let mut r = rng::stream(9, "dropout", 0);
        let n = 10_000;
        let dropped = (0..n)
            .filter(|_| draw_condition(Dataset::TwoGaussians, 0.1, &mut r).is_none())
            .count();
        let rate = dropped as f64 / n as f64;
        assert!((rate - 0.1).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn fm_loss_on_zero_model_matches_hand_computation() {
        let cfg = test_cfg();
        let mut model = Model::init(cfg.clone(), 10).unwrap();
        model.apply_flat(&vec![0.0; model.num_params()]);
        let mut r = rng::stream(11, "zero-model", 0);
        let batch: Vec<(FlowPath, Option<u32>)> = (0..3)
            .map(|i| {
                let x0 = randn(cfg.n_img, 2, &mut r);
                let x1 = randn(cfg.n_img, 2, &mut r);
                let path = FlowPath::new(x0, x1, 0.25 * (i as f64 + 1.0)).unwrap();
                (path, if i == 2 { None } else { Some(1) })
            })
            .collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let loss_id = fm_loss(&mut tape, &bound, None, &batch).unwrap();
        let loss = tape.scalar(loss_id);

        let mut expect = 0.0;
        for (p, _) in &batch {
            let per: f64 = p.v_target.data.iter().map(|v| v * v).sum::<f64>()
                / p.v_target.data.len() as f64;
            expect += per;
        }
        expect /= batch.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_is_zero_when_target_equals_model_output() {
        let cfg = test_cfg();
        let model = Model::init(cfg.clone(), 12).unwrap();
        let mut r = rng::stream(13, "selfconsistent", 0);
        let x_t = randn(cfg.n_img, 2, &mut r);
        let t = 0.4;
        let v = model.velocity(&x_t, Some(1), t, None, None).unwrap();
        // choose endpoints whose interpolant is x_t and whose velocity is v
        let x0 = Mat::new(
            cfg.n_img,
            2,
            x_t.data.iter().zip(&v.data).map(|(x, vi)| x - t * vi).collect(),
        );
        let x1 = Mat::new(
            cfg.n_img,
            2,
            x_t.data
                .iter()
                .zip(&v.data)
                .map(|(x, vi)| x + (1.0 - t) * vi)
                .collect(),
        );
        let path = FlowPath::new(x0, x1, t).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let loss_id = fm_loss(&mut tape, &bound, None, &[(path, Some(1))]).unwrap();
        let loss = tape.scalar(loss_id);
        assert!(loss < 1e-24, "loss {loss}");
    }

    #[test]
    fn fm_loss_rejects_empty_batch() {
        let model = Model::init(test_cfg(), 14).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        assert!(fm_loss(&mut tape, &bound, None, &[]).is_err());
    }

    #[test]
    fn zero_training_steps_leave_the_model_bitwise_unchanged() {
        let mut model = Model::init(test_cfg(), 15).unwrap();
        let before: Vec<u64> = model.to_flat().iter().map(|v| v.to_bits()).collect();
        let tc = TrainConfig { steps: 0, batch: 4, ..TrainConfig::default() };
        train_base(&mut model, Dataset::TwoGaussians, &tc).unwrap();
        let after: Vec<u64> = model.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let tc = TrainConfig { steps: 15, batch: 4, seed: 7, ..TrainConfig::default() };
        let run = || {
            let mut model = Model::init(test_cfg(), 16).unwrap();
            train_base(&mut model, Dataset::TwoGaussians, &tc).unwrap();
            model.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn short_training_run_reduces_the_loss() {
        let mut model = Model::init(test_cfg(), 17).unwrap();
        let tc = TrainConfig { steps: 150, batch: 16, seed: 3, ..TrainConfig::default() };
        let log = train_base(&mut model, Dataset::TwoGaussians, &tc).unwrap();
        let initial = log.losses.first().unwrap().1;
        assert!(
            log.final_loss < initial,
            "no improvement: {initial} -> {}",
            log.final_loss
        );
    }
}
