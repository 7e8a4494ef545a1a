//! Shared helpers for the integration suites: finite-difference harnesses
//! over tape primitives and over the erasure losses.

use rand::Rng;
use rand_distr::StandardNormal;
use streamgate::flow::randn;
use streamgate::model::{
    lora_grads_flat, GatedLora, MassOpts, Model, ModelConfig, ProjKind,
};
use streamgate::objectives::{
    attn_loss_at_offsets, er_total_at_offsets, erase_loss, preserve_loss, ErasureBatch, XtSource,
};
use streamgate::rng;
use streamgate::tensor::{fd_gradient, max_rel_err, Mat, Tape, TensorId};

/// Smallest architecture that still exercises every code path (two heads,
/// two layers, both modalities multi-token).
pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        d_k: 2,
        n_heads: 2,
        n_layers: 2,
        n_img: 2,
        n_txt: 3,
        vocab: 5,
        time_embed_dim: 4,
        d_data: 2,
        d_ff: 8,
        rms_eps: 1e-6,
    }
}

pub fn random_mat(rows: usize, cols: usize, r: &mut impl Rng) -> Mat {
    randn(rows, cols, r)
}

/// Checks reverse-mode gradients of a scalar-valued tape program against
/// central finite differences, for every input, over `trials` random draws.
/// `build` receives freshly registered leaves in the order of `shapes` and
/// must return a scalar (1x1) root.
pub fn fd_check<F>(name: &str, trials: usize, seed: u64, shapes: &[(usize, usize)], build: F)
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut r = rng::stream(seed, "fd-check", 0);
    for trial in 0..trials {
        let inputs: Vec<Mat> = shapes.iter().map(|&(m, n)| random_mat(m, n, &mut r)).collect();

        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|m| tape.leaf(m, true)).collect();
        let root = build(&mut tape, &ids);
        let (rr, rc) = tape.dims(root);
        assert_eq!((rr, rc), (1, 1), "{name}: root must be scalar");
        tape.backward(root).unwrap();

        for (which, id) in ids.iter().enumerate() {
            let got = tape
                .grad(*id)
                .unwrap_or_else(|| panic!("{name}: input {which} has no gradient"))
                .to_vec();
            let theta: Vec<f64> = inputs[which].data.clone();
            let f = |t: &[f64]| -> f64 {
                let mut probe = inputs.clone();
                probe[which] = Mat::new(probe[which].rows, probe[which].cols, t.to_vec());
                let mut tp = Tape::new();
                let pids: Vec<TensorId> = probe.iter().map(|m| tp.leaf(m, false)).collect();
                let root = build(&mut tp, &pids);
                tp.scalar(root)
            };
            let want = fd_gradient(f, &theta, 1e-5);
            let err = max_rel_err(&got, &want);
            assert!(
                err < 1e-5,
                "{name}: trial {trial} input {which} max rel err {err:.3e}"
            );
        }
    }
}

/// A one-item erasure batch plus a model/adapter pair with nonzero factors,
/// for loss-level gradient checks.
pub struct LossFixture {
    pub model: Model,
    pub lora: GatedLora,
    pub batch: ErasureBatch,
    pub offsets: Vec<usize>,
}

pub fn loss_fixture(seed: u64) -> LossFixture {
    let cfg = tiny_cfg();
    let model = Model::init(cfg.clone(), seed).unwrap();
    let mut lora = GatedLora::init(&cfg, 2, 1.0, seed.wrapping_add(1)).unwrap();
    let mut r = rng::stream(seed, "loss-fixture", 0);
    for l in &mut lora.layers {
        for kind in ProjKind::ALL {
            let site = match kind {
                ProjKind::Q => &mut l.q,
                ProjKind::K => &mut l.k,
                ProjKind::V => &mut l.v,
            };
            for v in &mut site.up.data {
                *v = 0.05 * r.sample::<f64, _>(StandardNormal);
            }
            for v in &mut site.down.data {
                *v = 0.2 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let batch = streamgate::objectives::draw_batch(
        &model,
        streamgate::flow::Dataset::TwoGaussians,
        1,
        2,
        2.0,
        1,
        XtSource::NoisedData,
        seed,
        0,
    )
    .unwrap();
    let offsets = vec![(seed % cfg.n_txt as u64) as usize];
    LossFixture { model, lora, batch, offsets }
}

/// Gradient of `loss` w.r.t. the adapter parameters vs finite differences.
pub fn fd_check_loss<L>(name: &str, trials: usize, seed: u64, loss: L)
where
    L: Fn(&mut Tape, &streamgate::model::BoundModel, &streamgate::model::BoundLora, &LossFixture) -> TensorId,
{
    for trial in 0..trials {
        let fx = loss_fixture(seed + trial as u64);

        let mut tape = Tape::new();
        let bound = fx.model.bind(&mut tape, false);
        let bl = fx.lora.bind(&mut tape, true);
        let root = loss(&mut tape, &bound, &bl, &fx);
        tape.backward(root).unwrap();
        let got = lora_grads_flat(&tape, &bl);

        let theta = fx.lora.to_flat();
        let f = |t: &[f64]| -> f64 {
            let mut probe = fx.lora.clone();
            probe.apply_flat(t);
            let mut tp = Tape::new();
            let bound = fx.model.bind(&mut tp, false);
            let bl = probe.bind(&mut tp, false);
            let root = loss(&mut tp, &bound, &bl, &fx);
            tp.scalar(root)
        };
        let want = fd_gradient(f, &theta, 1e-5);
        let err = max_rel_err(&got, &want);
        assert!(err < 1e-5, "{name}: trial {trial} max rel err {err:.3e}");
    }
}

/// The combined constrained objective at a fixed positive multiplier.
pub fn total_loss_root(
    tape: &mut Tape,
    bound: &streamgate::model::BoundModel,
    bl: &streamgate::model::BoundLora,
    fx: &LossFixture,
    lambda: f64,
) -> TensorId {
    let opts = MassOpts::default();
    let er = er_total_at_offsets(tape, bound, bl, &fx.batch, &fx.offsets, 1.0, &opts).unwrap();
    let pr = streamgate::objectives::preserve_loss(tape, bound, bl, &fx.batch).unwrap();
    let prw = tape.scale(pr, lambda);
    tape.add(er, prw).unwrap()
}

// ── the gradient-check catalogue ─────────────────────────────────────────────
// One entry per differentiable primitive and per loss. Every root is scalar:
// reductions close over the tested op. The granular suite (gradcheck.rs) and
// the acceptance gate both run these, so the catalogue lives here once.

pub fn check_matmul(trials: usize) {
    fd_check("matmul", trials, 1, &[(3, 4), (4, 2)], |t, ids| {
        let p = t.matmul(ids[0], ids[1]).unwrap();
        t.sum_all(p)
    });
}

pub fn check_transpose(trials: usize) {
    fd_check("transpose", trials, 2, &[(3, 4), (3, 4)], |t, ids| {
        let tr = t.transpose(ids[0]);
        let p = t.matmul(tr, ids[1]).unwrap();
        t.sum_all(p)
    });
}

pub fn check_add(trials: usize) {
    fd_check("add", trials, 3, &[(3, 4), (3, 4)], |t, ids| {
        let s = t.add(ids[0], ids[1]).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_sub(trials: usize) {
    fd_check("sub", trials, 4, &[(3, 4), (3, 4)], |t, ids| {
        let d = t.sub(ids[0], ids[1]).unwrap();
        let sq = t.mul(d, d).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_mul(trials: usize) {
    fd_check("mul", trials, 5, &[(3, 4), (3, 4)], |t, ids| {
        let p = t.mul(ids[0], ids[1]).unwrap();
        t.sum_all(p)
    });
}

pub fn check_scale(trials: usize) {
    fd_check("scale", trials, 6, &[(3, 4)], |t, ids| {
        let s = t.scale(ids[0], -1.7);
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_add_rowvec(trials: usize) {
    fd_check("add_rowvec", trials, 7, &[(3, 4), (1, 4)], |t, ids| {
        let s = t.add_rowvec(ids[0], ids[1]).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_scale_rows(trials: usize) {
    fd_check("scale_rows", trials, 8, &[(3, 4), (3, 1)], |t, ids| {
        let s = t.scale_rows(ids[0], ids[1]).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_row_sums(trials: usize) {
    fd_check("row_sums", trials, 9, &[(3, 4)], |t, ids| {
        let s = t.row_sums(ids[0]);
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_recip(trials: usize) {
    // inputs bounded away from zero: 1/(2 + x^2) composite keeps the
    // denominator positive for any draw
    fd_check("recip", trials, 10, &[(3, 4)], |t, ids| {
        let sq = t.mul(ids[0], ids[0]).unwrap();
        let two = t.constant(&Mat::new(3, 4, vec![2.0; 12]));
        let shifted = t.add(sq, two).unwrap();
        let r = t.recip(shifted).unwrap();
        t.sum_all(r)
    });
}

pub fn check_sum_all(trials: usize) {
    fd_check("sum_all", trials, 11, &[(3, 4)], |t, ids| {
        let sq = t.mul(ids[0], ids[0]).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_mean_all(trials: usize) {
    fd_check("mean_all", trials, 12, &[(3, 4)], |t, ids| {
        let sq = t.mul(ids[0], ids[0]).unwrap();
        t.mean_all(sq)
    });
}

pub fn check_sq_norm(trials: usize) {
    fd_check("sq_norm", trials, 13, &[(3, 4)], |t, ids| t.sq_norm(ids[0]));
}

pub fn check_softmax_rows(trials: usize) {
    fd_check("softmax_rows", trials, 14, &[(3, 4), (3, 4)], |t, ids| {
        let a = t.softmax_rows(ids[0]).unwrap();
        // weight by the second input so every softmax entry matters
        let w = t.mul(a, ids[1]).unwrap();
        t.sum_all(w)
    });
}

pub fn check_silu(trials: usize) {
    fd_check("silu", trials, 15, &[(3, 4)], |t, ids| {
        let s = t.silu(ids[0]);
        t.sum_all(s)
    });
}

pub fn check_rmsnorm_rows(trials: usize) {
    fd_check("rmsnorm_rows", trials, 16, &[(3, 4), (3, 4)], |t, ids| {
        let n = t.rmsnorm_rows(ids[0], 1e-6);
        let w = t.mul(n, ids[1]).unwrap();
        t.sum_all(w)
    });
}

pub fn check_slice_rows(trials: usize) {
    fd_check("slice_rows", trials, 17, &[(4, 3)], |t, ids| {
        let s = t.slice_rows(ids[0], 1, 3).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_slice_cols(trials: usize) {
    fd_check("slice_cols", trials, 18, &[(3, 5)], |t, ids| {
        let s = t.slice_cols(ids[0], 2, 5).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_concat_rows(trials: usize) {
    fd_check("concat_rows", trials, 19, &[(2, 3), (3, 3)], |t, ids| {
        let c = t.concat_rows(&[ids[0], ids[1]]).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_concat_cols(trials: usize) {
    fd_check("concat_cols", trials, 20, &[(3, 2), (3, 4)], |t, ids| {
        let c = t.concat_cols(&[ids[0], ids[1]]).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_gather_rows(trials: usize) {
    // repeated indices: gradients must accumulate onto the shared row
    fd_check("gather_rows", trials, 21, &[(4, 3)], |t, ids| {
        let g = t.gather_rows(ids[0], &[0, 2, 2, 3, 0]).unwrap();
        let sq = t.mul(g, g).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_mse(trials: usize) {
    fd_check("mse", trials, 22, &[(3, 4), (3, 4)], |t, ids| {
        t.mse(ids[0], ids[1]).unwrap()
    });
}

pub fn check_fanout(trials: usize) {
    // one tensor used three ways: gradient is the sum of all contributions
    fd_check("fanout", trials, 23, &[(3, 3)], |t, ids| {
        let x = ids[0];
        let tr = t.transpose(x);
        let p = t.matmul(x, tr).unwrap();
        let s = t.add(p, x).unwrap();
        let sq = t.mul(s, x).unwrap();
        t.sum_all(sq)
    });
}

pub fn check_erase_loss(trials: usize) {
    fd_check_loss("erase_loss", trials, 100, |t, bound, bl, fx| {
        erase_loss(t, bound, bl, &fx.batch).unwrap()
    });
}

pub fn check_attn_loss(trials: usize) {
    fd_check_loss("attn_loss", trials, 200, |t, bound, bl, fx| {
        attn_loss_at_offsets(t, bound, bl, &fx.batch, &fx.offsets, &MassOpts::default()).unwrap()
    });
}

pub fn check_preserve_loss(trials: usize) {
    fd_check_loss("preserve_loss", trials, 300, |t, bound, bl, fx| {
        preserve_loss(t, bound, bl, &fx.batch).unwrap()
    });
}

pub fn check_total_loss(trials: usize) {
    fd_check_loss("total_loss", trials, 400, |t, bound, bl, fx| {
        total_loss_root(t, bound, bl, fx, 0.7)
    });
}
