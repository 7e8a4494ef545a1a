//! Subcommand implementations behind the `streamgate` binary. Each body is a
//! thin orchestration of the core library: load checkpoints, apply config
//! overrides, run, write artifacts into the run directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use streamgate::checkpoint::{self, config_hash, MergeProvenance};
use streamgate::controller::{
    lambda_star, run_erasure, surgery_direction, Ablation, DualMode, GradientPair,
};
use streamgate::error::{Error, Result};
use streamgate::flow::{sample_cloud, train_base, Dataset};
use streamgate::intervene::{bypass_demo, localize, ZeroingSpec};
use streamgate::merge::merge;
use streamgate::model::Model;
use streamgate::qp::qp_oracle;
use streamgate::quadratic::{run_quadratic, QuadRun, QuadraticInstance};
use streamgate::rng::stream;

use crate::config::RunSpec;
use crate::evalrun::eval_erasure;
use crate::plot::plot_run;
use crate::rundir::{append_jsonl, resolve_out_file, resolve_run_dir, write_cloud_csv};

// ── argument surface ────────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(name = "streamgate", version, about = "Single-stream flow transformer with stream-gated concept erasure")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a base flow-matching model on a synthetic mixture.
    TrainBase(TrainBaseArgs),
    /// Fit a stream-gated low-rank erasure adapter against a trained base.
    Erase(EraseArgs),
    /// Draw Euler samples from a checkpoint into a CSV token cloud.
    Sample(SampleArgs),
    /// Score an adapter against its base with paired sample clouds.
    Eval(EvalArgs),
    /// Merge erasure adapters into one multi-concept adapter.
    Merge(MergeArgs),
    /// Run self-contained controller diagnostics.
    Diagnose(DiagnoseArgs),
    /// Demonstrate the prompt-perturbation bypass of attention zeroing.
    BypassDemo(BypassDemoArgs),
    /// Render figures for a finished run directory.
    Plot(PlotArgs),
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unrecognized value '{s}'"))
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    /// JSON run config; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory receiving model.json and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_kebab::<Dataset>)]
    pub dataset: Option<Dataset>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EraseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained base checkpoint (model.json).
    #[arg(long)]
    pub base: PathBuf,
    /// Run directory receiving lora.json, control.jsonl, and the config.
    #[arg(long)]
    pub out: PathBuf,
    /// Concept to erase.
    #[arg(long)]
    pub c_er: Option<u32>,
    /// Concept whose distribution must stay put.
    #[arg(long)]
    pub c_pr: Option<u32>,
    /// Repulsion weight in the erasure target.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Allowed per-step preservation regression.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Controller's step-size constant.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Multiplier learning rate.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the attention-localization term.
    #[arg(long)]
    pub attn_weight: Option<f64>,
    /// Multiplier update rule: implicit or exact-dual.
    #[arg(long, value_parser = parse_kebab::<DualMode>)]
    pub mode: Option<DualMode>,
    /// Loss ablation: full, erase-only, or preserve-only.
    #[arg(long, value_parser = parse_kebab::<Ablation>)]
    pub ablation: Option<Ablation>,
    /// Measure preservation on a frozen probe batch instead of minibatches.
    #[arg(long)]
    pub probe: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base: PathBuf,
    /// Optional adapter checkpoint applied during sampling.
    #[arg(long)]
    pub lora: Option<PathBuf>,
    /// Conditioning concept id; omit for unconditional samples.
    #[arg(long)]
    pub concept: Option<u32>,
    /// Zero this concept's text columns in every attention map.
    #[arg(long)]
    pub zero: Option<u32>,
    /// Skip row renormalization after zeroing.
    #[arg(long)]
    pub no_renorm: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub lora: PathBuf,
    /// Run directory receiving eval.json, sample CSVs, and localize.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Concept the adapter was supposed to erase (default: config's c_er).
    #[arg(long)]
    pub erased: Option<u32>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loc_probes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Adapter checkpoints to merge (repeat the flag).
    #[arg(long = "lora", required = true)]
    pub loras: Vec<PathBuf>,
    /// Comma-separated weights, one per adapter (default: uniform).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Output adapter checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Run the quadratic-testbed controller checks.
    #[arg(long)]
    pub quadratic: bool,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Random gradient pairs for the closed-form-vs-solver cross-check.
    #[arg(long, default_value_t = 1000)]
    pub qp_pairs: usize,
    /// Write the full JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BypassDemoArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Concept whose attention columns get zeroed.
    #[arg(long)]
    pub concept: u32,
    /// Replacement prompt token that carries the perturbed embedding.
    #[arg(long)]
    pub perturbed: u32,
    /// Gaussian radius of the embedding copy.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 9)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional path for the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directory to render figures for.
    #[arg(long)]
    pub run: PathBuf,
}

// ── dispatch ────────────────────────────────────────────────────────────────

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainBase(a) => cmd_train_base(a),
        Cmd::Erase(a) => cmd_erase(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Merge(a) => cmd_merge(a),
        Cmd::Diagnose(a) => cmd_diagnose(a),
        Cmd::BypassDemo(a) => cmd_bypass_demo(a),
        Cmd::Plot(a) => cmd_plot(a),
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

// ── train-base ──────────────────────────────────────────────────────────────

fn cmd_train_base(a: TrainBaseArgs) -> Result<()> {
    let mut spec = RunSpec::load(a.config.as_deref())?;
    if let Some(v) = a.dataset {
        spec.dataset = v;
    }
    if let Some(v) = a.steps {
        spec.train.steps = v;
    }
    if let Some(v) = a.batch {
        spec.train.batch = v;
    }
    if let Some(v) = a.lr {
        spec.train.lr = v;
    }
    if let Some(v) = a.seed {
        spec.train.seed = v;
    }
    spec.validate()?;
    let dir = resolve_run_dir(&a.out)?;
    spec.write_resolved(&dir)?;

    let mut model = Model::init(spec.model.clone(), spec.train.seed)?;
    let log = train_base(&mut model, spec.dataset, &spec.train)?;
    checkpoint::save_model(&dir.join("model.json"), &model)?;

    let hash = config_hash(&model.cfg);
    let wall = now_unix();
    let metrics = dir.join("metrics.jsonl");
    for (step, loss) in &log.losses {
        append_jsonl(
            &metrics,
            &serde_json::json!({
                "kind": "train", "step": step, "wall_clock_unix": wall,
                "config_hash": hash, "loss": loss,
            }),
        )?;
    }
    println!(
        "trained {} steps: final loss {:.6}",
        spec.train.steps, log.final_loss
    );
    println!("wrote {}", dir.join("model.json").display());
    Ok(())
}

// ── erase ───────────────────────────────────────────────────────────────────

fn cmd_erase(a: EraseArgs) -> Result<()> {
    let mut spec = RunSpec::load(a.config.as_deref())?;
    let e = &mut spec.erase;
    if let Some(v) = a.c_er {
        e.c_er = v;
    }
    if let Some(v) = a.c_pr {
        e.c_pr = v;
    }
    if let Some(v) = a.eta {
        e.eta = v;
    }
    if let Some(v) = a.epsilon {
        e.epsilon = v;
    }
    if let Some(v) = a.alpha {
        e.alpha = v;
    }
    if let Some(v) = a.beta {
        e.beta = v;
    }
    if let Some(v) = a.steps {
        e.steps = v;
    }
    if let Some(v) = a.batch {
        e.batch = v;
    }
    if let Some(v) = a.rank {
        e.rank = v;
    }
    if let Some(v) = a.seed {
        e.seed = v;
    }
    if let Some(v) = a.attn_weight {
        e.attn_weight = v;
    }
    if let Some(v) = a.mode {
        e.mode = v;
    }
    if let Some(v) = a.ablation {
        e.ablation = v;
    }
    if a.probe {
        e.probe = true;
    }

    let model = checkpoint::load_model(&a.base)?;
    // the resolved config must describe the base actually used
    spec.model = model.cfg.clone();
    spec.validate()?;
    let dir = resolve_run_dir(&a.out)?;
    spec.write_resolved(&dir)?;

    let run = run_erasure(&model, spec.dataset, spec.erase.clone())?;
    checkpoint::save_lora(&dir.join("lora.json"), &run.lora, &model, None)?;

    let control = dir.join("control.jsonl");
    for (rec, parts) in run.state.history.iter().zip(&run.parts) {
        append_jsonl(
            &control,
            &serde_json::json!({
                "step": rec.step, "lambda": rec.lambda, "g_tilde": rec.g_tilde,
                "lambda_star": rec.lambda_star, "l_er": rec.l_er, "l_pr": rec.l_pr,
                "d_sq": rec.d_sq, "l_erase": parts.l_erase, "l_attn": parts.l_attn,
            }),
        )?;
    }
    let hash = config_hash(&model.cfg);
    let wall = now_unix();
    let metrics = dir.join("metrics.jsonl");
    for rec in &run.state.history {
        append_jsonl(
            &metrics,
            &serde_json::json!({
                "kind": "erase", "step": rec.step, "wall_clock_unix": wall,
                "config_hash": hash, "l_er": rec.l_er, "l_pr": rec.l_pr,
                "lambda": rec.lambda,
            }),
        )?;
    }
    let last = run.state.history.last();
    println!(
        "erased concept {} (preserving {}) in {} steps: l_er {:.6} l_pr {:.6} lambda {:.4}",
        spec.erase.c_er,
        spec.erase.c_pr,
        run.steps_taken(),
        last.map_or(f64::NAN, |r| r.l_er),
        last.map_or(f64::NAN, |r| r.l_pr),
        run.state.lambda,
    );
    println!("wrote {}", dir.join("lora.json").display());
    Ok(())
}

// ── sample ──────────────────────────────────────────────────────────────────

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let mut spec = RunSpec::load(a.config.as_deref())?;
    if let Some(v) = a.steps {
        spec.sample.steps = v;
    }
    if let Some(v) = a.n_samples {
        spec.sample.n_samples = v;
    }
    if let Some(v) = a.seed {
        spec.sample.seed = v;
    }
    spec.validate()?;

    let model = checkpoint::load_model(&a.base)?;
    let lora = match &a.lora {
        None => None,
        Some(p) => {
            let (l, meta) = checkpoint::load_lora(p)?;
            checkpoint::check_compat(&meta, &model)?;
            Some(l)
        }
    };
    let plan = a.zero.map(|target| {
        let mut z = ZeroingSpec::new(target);
        z.renormalize = !a.no_renorm;
        z.sampling_plan(&model, a.concept)
    });
    let mut r = stream(spec.sample.seed, "sample", 0);
    let cloud = sample_cloud(
        &model,
        a.concept,
        spec.sample.steps,
        lora.as_ref(),
        plan.as_ref(),
        spec.sample.n_samples,
        &mut r,
    )?;
    let out = resolve_out_file(&a.out)?;
    write_cloud_csv(&out, &cloud)?;
    println!(
        "sampled {} x {} tokens into {}",
        spec.sample.n_samples,
        model.cfg.n_img,
        out.display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut spec = RunSpec::load(a.config.as_deref())?;
    if let Some(v) = a.n_samples {
        spec.eval.n_samples = v;
    }
    if let Some(v) = a.steps {
        spec.eval.steps = v;
    }
    if let Some(v) = a.seed {
        spec.eval.seed = v;
    }
    if let Some(v) = a.loc_probes {
        spec.eval.loc_probes = v;
    }

    let model = checkpoint::load_model(&a.base)?;
    let (lora, meta) = checkpoint::load_lora(&a.lora)?;
    checkpoint::check_compat(&meta, &model)?;
    spec.model = model.cfg.clone();
    spec.validate()?;
    let erased = a.erased.unwrap_or(spec.erase.c_er);

    let dir = resolve_run_dir(&a.out)?;
    spec.write_resolved(&dir)?;
    let (record, clouds) =
        eval_erasure(&model, Some(&lora), spec.dataset, erased, &spec.eval, 0)?;

    write_cloud_csv(&dir.join(format!("samples_before_c{erased}.csv")), &clouds.erased_before)?;
    write_cloud_csv(&dir.join(format!("samples_after_c{erased}.csv")), &clouds.erased_after)?;
    for (c, before, after) in &clouds.preserved {
        write_cloud_csv(&dir.join(format!("samples_before_c{c}.csv")), before)?;
        write_cloud_csv(&dir.join(format!("samples_after_c{c}.csv")), after)?;
    }
    write_cloud_csv(&dir.join("samples_before_uncond.csv"), &clouds.uncond_before)?;
    write_cloud_csv(&dir.join("samples_after_uncond.csv"), &clouds.uncond_after)?;

    let profile = localize(&model, spec.dataset, erased, spec.eval.loc_probes, spec.eval.seed)?;
    std::fs::write(dir.join("localize.tsv"), profile.to_table())?;

    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&record)?)?;
    append_jsonl(&dir.join("metrics.jsonl"), &record)?;

    println!(
        "efficacy d {:.6} (floor {:.6}, x{:.1})",
        record.efficacy,
        record.efficacy_floor,
        record.efficacy / record.efficacy_floor.max(f64::MIN_POSITIVE)
    );
    for p in &record.preserved {
        println!(
            "preserve c{} d {:.6} (floor {:.6}, x{:.1})",
            p.concept,
            p.shift,
            p.floor,
            p.shift / p.floor.max(f64::MIN_POSITIVE)
        );
    }
    println!(
        "uncond d {:.6} (floor {:.6})",
        record.uncond_shift, record.uncond_floor
    );
    println!("wrote {}", dir.join("eval.json").display());
    Ok(())
}

// ── merge ───────────────────────────────────────────────────────────────────

fn cmd_merge(a: MergeArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.base)?;
    let mut loras = Vec::new();
    for p in &a.loras {
        let (l, meta) = checkpoint::load_lora(p)?;
        checkpoint::check_compat(&meta, &model)?;
        loras.push(l);
    }
    let weights = match &a.weights {
        Some(w) => w.clone(),
        None => vec![1.0 / a.loras.len() as f64; a.loras.len()],
    };
    let merged = merge(&loras, Some(&weights))?;
    let provenance = MergeProvenance {
        sources: a.loras.iter().map(|p| p.display().to_string()).collect(),
        weights,
    };
    let out = resolve_out_file(&a.out)?;
    checkpoint::save_lora(&out, &merged, &model, Some(provenance))?;
    println!(
        "merged {} adapters (rank {}) into {}",
        a.loras.len(),
        merged.rank,
        out.display()
    );
    Ok(())
}

// ── diagnose ────────────────────────────────────────────────────────────────

/// One named pass/fail outcome from the diagnostic suite.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Check {
        Check { name: name.to_string(), pass, detail }
    }
}

fn max_gap(run: &QuadRun) -> f64 {
    run.steps.iter().filter_map(|s| s.gap).fold(0.0, f64::max)
}

/// Count of steps whose implicit-observation error exceeds its bound.
fn gap_violations(run: &QuadRun) -> usize {
    run.steps
        .iter()
        .filter(|s| match (s.gap, s.gap_bound) {
            (Some(g), Some(b)) => g > b * (1.0 + 1e-12) + 1e-12,
            _ => false,
        })
        .count()
}

/// Largest |implicit lambda - running mean of clamped exact duals|.
pub fn lambda_band(implicit: &QuadRun, exact: &QuadRun) -> f64 {
    let mut sum = 0.0;
    let mut worst: f64 = 0.0;
    for (t, (im, ex)) in implicit.steps.iter().zip(&exact.steps).enumerate() {
        sum += ex.lambda_star.max(0.0);
        let mean = sum / (t + 1) as f64;
        worst = worst.max((im.lambda - mean).abs());
    }
    worst
}

/// The full quadratic-testbed diagnostic suite.
pub fn quadratic_checks(
    steps: usize,
    dim: usize,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    qp_pairs: usize,
) -> Result<Vec<Check>> {
    let inst = QuadraticInstance::aligned(dim);
    let theta0 = inst.aligned_start();
    let g = inst.g_smooth();
    let mut checks = Vec::new();

    // implicit observation error stays within the smoothness bound
    let implicit =
        run_quadratic(&inst, &theta0, DualMode::Implicit, steps, alpha, beta, epsilon)?;
    let violations = gap_violations(&implicit);
    checks.push(Check::new(
        "approximation-gap",
        violations == 0,
        format!("{violations} of {steps} steps exceed (G*alpha/2)||d||^2 with G={g}"),
    ));

    // halving the step size at least halves the worst observation error
    let halved =
        run_quadratic(&inst, &theta0, DualMode::Implicit, steps, alpha / 2.0, beta, epsilon)?;
    let (m1, m2) = (max_gap(&implicit), max_gap(&halved));
    checks.push(Check::new(
        "gap-halving",
        m2 <= m1 / 2.0 * (1.0 + 1e-9),
        format!("max gap {m1:.3e} at alpha, {m2:.3e} at alpha/2"),
    ));

    // preservation drift never exceeds its certified budget (exact-dual mode,
    // where every step is primal feasible)
    for eps in [1e-3, 1e-2] {
        let run = run_quadratic(&inst, &theta0, DualMode::ExactDual, steps, alpha, beta, eps)?;
        let report = streamgate::controller::drift_report(
            &run.pr_series(),
            &run.d_sq_series(),
            alpha,
            eps,
            g,
        )?;
        checks.push(Check::new(
            &format!("drift-bound-eps-{eps:.0e}"),
            report.violations.is_empty(),
            format!(
                "{} violations, final drift {:.3e} vs bound {:.3e}",
                report.violations.len(),
                run.pr_series().last().unwrap() - run.pr_series()[0],
                report.bound.last().copied().unwrap_or(0.0)
            ),
        ));
    }

    // the best surgery direction so far shrinks toward stationarity
    let long =
        run_quadratic(&inst, &theta0, DualMode::ExactDual, 2000, alpha, beta, epsilon)?;
    let mut running = f64::INFINITY;
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for s in long.d_sq_series() {
        running = running.min(s);
        if running > prev * (1.0 + 1e-12) {
            monotone = false;
        }
        prev = running;
    }
    checks.push(Check::new(
        "pareto-stationarity",
        monotone && running < 1e-4,
        format!("running min ||d||^2 reaches {running:.3e} after 2000 steps"),
    ));

    // closed-form dual against an independent projected-ascent QP solver
    let mut worst_d = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut r = stream(0, "diagnose-qp", 0);
    for _ in 0..qp_pairs {
        let n = r.gen_range(1..=8);
        let g_er: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let g_pr: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let pair = GradientPair::new(g_er.clone(), g_pr.clone())?;
        let d = surgery_direction(&pair, epsilon)?;
        let oracle = qp_oracle(&g_er, &g_pr, epsilon)?;
        for (a, b) in d.iter().zip(&oracle) {
            worst_d = worst_d.max((a - b).abs());
        }
        let ls = lambda_star(&pair, epsilon)?;
        if ls > 0.0 {
            let active: f64 = d.iter().zip(&g_pr).map(|(x, y)| x * y).sum();
            worst_kkt = worst_kkt.max((active + epsilon).abs() / epsilon);
        }
    }
    checks.push(Check::new(
        "qp-cross-check",
        worst_d < 1e-6 && worst_kkt < 1e-10,
        format!(
            "{qp_pairs} pairs: max |d - oracle| {worst_d:.3e}, max active-constraint rel err {worst_kkt:.3e}"
        ),
    ));

    // the implicit multiplier tracks the running mean of the exact dual.
    // Fixed benchmark configuration: the crossed instance keeps lambda
    // bounded, and its running mean tops 0.1, so a dead controller would
    // break the band rather than pass it vacuously.
    let cr = QuadraticInstance::crossed();
    let cr0 = cr.crossed_start();
    let im = run_quadratic(&cr, &cr0, DualMode::Implicit, 200, 0.2, 1.0, 1e-3)?;
    let ex = run_quadratic(&cr, &cr0, DualMode::ExactDual, 200, 0.2, 1.0, 1e-3)?;
    let band = lambda_band(&im, &ex);
    checks.push(Check::new(
        "implicit-exact-agreement",
        band <= 0.1,
        format!("max |lambda - running mean lambda*| = {band:.4} over 200 steps"),
    ));

    Ok(checks)
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    if !a.quadratic {
        return Err(Error::config("nothing to diagnose: pass --quadratic"));
    }
    let checks = quadratic_checks(a.steps, a.dim, a.alpha, a.beta, a.epsilon, a.qp_pairs)?;
    for c in &checks {
        println!("{} {} — {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(out) = &a.out {
        let out = resolve_out_file(out)?;
        std::fs::write(&out, serde_json::to_string_pretty(&serde_json::json!({ "checks": checks }))?)?;
        println!("wrote {}", out.display());
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Error::domain(format!("{failed} diagnostic checks failed")));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

// ── bypass-demo ─────────────────────────────────────────────────────────────

fn cmd_bypass_demo(a: BypassDemoArgs) -> Result<()> {
    let mut model = checkpoint::load_model(&a.base)?;
    if a.perturbed != a.concept {
        model.perturb_concept(a.concept, a.perturbed, a.sigma, a.seed)?;
    }
    let report = bypass_demo(&model, a.concept, a.perturbed, a.steps, a.n_samples, a.seed)?;
    println!("d(zeroed, plain)            = {:.6}", report.d_zeroed_plain);
    println!("d(perturbed+zeroed, plain)  = {:.6}", report.d_perturbed_plain);
    println!("d(perturbed+zeroed, zeroed) = {:.6}", report.d_perturbed_zeroed);
    println!("d(zeroed, uncond)           = {:.6}", report.d_zeroed_uncond);
    println!("d(plain, uncond)            = {:.6}", report.d_plain_uncond);
    if let Some(out) = &a.out {
        let out = resolve_out_file(out)?;
        std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", out.display());
    }
    if report.d_perturbed_plain < report.d_zeroed_plain {
        println!("bypass confirmed: the perturbed prompt slips past the zeroed columns");
        Ok(())
    } else {
        Err(Error::domain(format!(
            "no bypass: perturbed-vs-plain {:.6} is not below zeroed-vs-plain {:.6}",
            report.d_perturbed_plain, report.d_zeroed_plain
        )))
    }
}

// ── plot ────────────────────────────────────────────────────────────────────

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let dir = match std::env::var_os(crate::rundir::RUN_ROOT_ENV) {
        Some(root) if a.run.is_relative() => Path::new(&root).join(&a.run),
        _ => a.run.clone(),
    };
    let written = plot_run(&dir)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
