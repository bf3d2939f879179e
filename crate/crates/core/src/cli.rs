//! Command-line surface: configuration, seed resolution, and the `run`,
//! `gradcheck` and `eval` commands. Every command is a thin wrapper over a
//! library function in this module so tests can drive them directly.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::concepts::{concept_alignment_loss, modulator_batch_loss, AlignmentItem, ConceptBank, ModulatorState, Weighting};
use crate::engine::{
    unlearn_sequence, Ablations, Checkpoint, EngineConfig, RefusalConfig, SequenceOutcome, TrainingConfig,
    CHECKPOINT_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::eval::{
    activation_records, evaluate_step, routing_diagnostics, write_report, BenchmarkBaseline, MetricsReport,
};
use crate::inference::CalibrationConfig;
use crate::numerics::{finite_diff_check, FdReport, Mat, Parameters, SeedStream};
use crate::refusal::{
    mean_output, refusal_ce_loss, refusal_routing_loss, router_replay_loss, MixtureOfRefusers, RefusalSample,
    RefuserBank, RouterState, RoutingRecord,
};
use crate::world::{generate_world, CategoryId, World, WorldConfig};

/// Environment variable consulted for the seed when neither the flag nor the
/// config sets one.
pub const SEED_ENV: &str = "CORE_UNLEARN_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub engine: TrainingConfig,
    pub refusal: RefusalConfig,
    pub calibration: CalibrationConfig,
    pub ablations: Ablations,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.engine.validate()?;
        self.refusal.validate()?;
        self.calibration.validate()
    }
}

/// Parses and validates a JSON config; an empty document means all defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = if text.trim().is_empty() {
        RunConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config { field, reason } => Error::config(field, format!("{reason} (in {})", path.display())),
        other => other,
    })
}

/// Seed priority: flag, then config, then [`SEED_ENV`], then 0.
pub fn effective_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        None => Ok(0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    Mod,
    Act,
    Cal,
}

#[derive(Debug, Parser)]
#[command(name = "core-unlearn", version, about = "Concept-aware continual unlearning on a synthetic world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn every forget task in sequence and write metrics.
    Run {
        /// JSON config; omitted means all defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable a component; may repeat.
        #[arg(long, value_enum)]
        ablate: Vec<Ablate>,
        /// Also write per-sample concept activations.
        #[arg(long)]
        dump_activations: bool,
        /// Skip per-task checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Verify every analytic gradient against finite differences.
    Gradcheck {
        /// Test hook: perturb the analytic gradient of the named loss.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A fully resolved run: config with ablations and seed applied.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub config: RunConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunPlan {
    pub fn new(mut config: RunConfig, seed_flag: Option<u64>, out: Option<PathBuf>, ablate: &[Ablate]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        let seed = effective_seed(seed_flag, config.seed, env.as_deref())?;
        for a in ablate {
            match a {
                Ablate::Mod => config.ablations.modulator = true,
                Ablate::Act => config.ablations.activation = true,
                Ablate::Cal => config.ablations.calibration = true,
            }
        }
        config.seed = Some(seed);
        config.world.seed = seed;
        let output_dir = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        config.output_dir = Some(output_dir.clone());
        config.validate()?;
        Ok(Self { config, seed, output_dir })
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            training: self.config.engine.clone(),
            refusal: self.config.refusal.clone(),
            calibration: self.config.calibration.clone(),
            ablations: self.config.ablations,
            seed: self.seed,
        }
    }
}

/// Everything a run produced, for callers that want more than the files.
pub struct RunResult {
    pub world: World,
    pub outcome: SequenceOutcome,
    pub report: MetricsReport,
    pub files: Vec<PathBuf>,
}

/// Runs the full sequence, writing checkpoints (unless disabled) and the
/// report into the plan's output directory.
pub fn run(plan: &RunPlan, checkpoints: bool, dump_activations: bool) -> Result<RunResult> {
    let world = generate_world(&plan.config.world)?;
    let engine = plan.engine_config();
    let ckpt_dir = plan.output_dir.join("checkpoints");
    let outcome = unlearn_sequence(&world, &engine, |t, state| {
        if !checkpoints {
            return Ok(());
        }
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            task_index: t,
            seed: plan.seed,
            world: plan.config.world.clone(),
            calibration: plan.config.calibration.clone(),
            state: state.clone(),
        }
        .save(&ckpt_dir.join(format!("task_{t:02}.json")))
    })?;
    let routing = routing_diagnostics(&outcome.state, &world)?;
    let echo = serde_json::to_value(&plan.config).map_err(|e| Error::Serde { path: "config".into(), source: e })?;
    let report = MetricsReport::new(
        outcome.snapshots.clone(),
        routing,
        plan.config.ablations,
        plan.seed,
        echo,
        outcome.stage_logs.clone(),
    )?;
    let activations = if dump_activations { Some(activation_records(&outcome.state, &world)?) } else { None };
    let files = write_report(&report, &plan.output_dir, activations.as_deref())?;
    Ok(RunResult { world, outcome, report, files })
}

/// Re-evaluates a checkpoint on its regenerated world.
pub fn eval_checkpoint(path: &Path, out: &Path) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(path)?;
    let mut world_cfg = ckpt.world.clone();
    world_cfg.seed = ckpt.seed;
    let world = generate_world(&world_cfg)?;
    let baseline = BenchmarkBaseline::compute(&world)?;
    let snapshot = evaluate_step(&ckpt.state, &world, ckpt.task_index, &ckpt.calibration, &baseline)?;
    let routing = routing_diagnostics(&ckpt.state, &world)?;
    let echo = serde_json::json!({ "checkpoint": path, "task_index": ckpt.task_index });
    let report = MetricsReport::new(vec![snapshot], routing, ckpt.state.flags, ckpt.seed, echo, Vec::new())?;
    write_report(&report, out, None)?;
    Ok(report)
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub loss: &'static str,
    pub report: FdReport,
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn corrupt_if(name: &str, corrupt: Option<&str>, grad: &mut [f64]) {
    if corrupt == Some(name) {
        if let Some(g) = grad.first_mut() {
            *g = *g * 1.5 + 0.1;
        }
    }
}

fn check(
    name: &'static str,
    corrupt: Option<&str>,
    params: &[f64],
    mut analytic: Vec<f64>,
    loss: impl Fn(&[f64]) -> f64,
) -> Result<GradcheckResult> {
    corrupt_if(name, corrupt, &mut analytic);
    let report = finite_diff_check(loss, params, &analytic, GRADCHECK_STEP, GRADCHECK_TOLERANCE)?;
    Ok(GradcheckResult { loss: name, report })
}

/// Finite-difference verification of every training loss on fixed small
/// instances. `corrupt` names a loss whose analytic gradient is perturbed
/// (used to test that failures are reported).
pub fn gradcheck_suite(corrupt: Option<&str>) -> Result<Vec<GradcheckResult>> {
    let seeds = SeedStream::new(2024);
    let mut rng = seeds.rng("gradcheck");
    let dim = 5;
    let row = |m: &Mat, i: usize| m.row(i).to_vec();
    let feats = Mat::gaussian(8, dim, 1.0, &mut rng);
    let mut results = Vec::new();

    // Concept alignment: two categories, two concepts each.
    let mut bank = ConceptBank::new();
    for c in 0..2 {
        bank.add_category(CategoryId(c), 2, 2, dim, &mut rng)?;
    }
    let scaled: Vec<f64> = bank.flat().iter().map(|v| v * 40.0).collect();
    bank.set_flat(&scaled);
    let targets = Mat::gaussian(4, 4, 1.0, &mut rng);
    let (f0, f1, f2, f3) = (row(&feats, 0), row(&feats, 1), row(&feats, 2), row(&feats, 3));
    let (t0, t1, t2, t3) = (row(&targets, 0), row(&targets, 1), row(&targets, 2), row(&targets, 3));
    let items = [
        AlignmentItem { image_feature: &f0, text_feature: &f1, target_img: &t0, target_txt: &t1 },
        AlignmentItem { image_feature: &f2, text_feature: &f3, target_img: &t2, target_txt: &t3 },
    ];
    let analytic = concept_alignment_loss(&bank, &items)?.grad.flat();
    results.push(check("concept_alignment", corrupt, &bank.flat(), analytic, |p| {
        let mut probe = bank.clone();
        probe.set_flat(p);
        concept_alignment_loss(&probe, &items).map_or(f64::NAN, |l| l.loss)
    })?);

    // Modulator cross-entropy: three categories over 6 inputs.
    let mut modulator = ModulatorState::new(Weighting::Softmax);
    for c in 0..3 {
        let img_len = 2 * c;
        modulator.grow(CategoryId(c), img_len, 2, 2)?;
    }
    let w = Mat::gaussian(3, 12, 0.5, &mut rng);
    modulator.weights = w;
    modulator.bias = vec![0.1, -0.2, 0.05];
    let acts = Mat::gaussian(4, 12, 1.0, &mut rng);
    let batch: Vec<(&[f64], &[f64], CategoryId)> =
        (0..4).map(|i| (&acts.row(i)[..6], &acts.row(i)[6..], CategoryId(i % 3))).collect();
    let (_, grad) = modulator_batch_loss(&modulator, &batch)?;
    results.push(check("modulator", corrupt, &modulator.flat(), grad.flat(), |p| {
        let mut probe = modulator.clone();
        probe.set_flat(p);
        modulator_batch_loss(&probe, &batch).map_or(f64::NAN, |l| l.0)
    })?);

    // Refusal cross-entropy through the router and the engaged refusers.
    let world = generate_world(&WorldConfig {
        feature_dim: dim,
        num_tasks: 1,
        categories_per_task: 2,
        concepts_per_category_per_modality: 2,
        samples_per_category: 4,
        benchmark_categories: 1,
        general_intents: 2,
        seed: 7,
        ..WorldConfig::default()
    })?;
    let router = RouterState::new(3, 3, 4, 2, 4, 0.8, &mut rng)?;
    let mut refusers = RefuserBank::new(4, dim, &mut rng);
    for v in &mut refusers.refusers {
        *v = Mat::gaussian(dim, dim, 0.5, &mut rng);
    }
    let mut mixture = MixtureOfRefusers { router, bank: refusers };
    mixture.router.output_bias = vec![0.3, -0.1, 0.0, 0.2];
    let router_in = Mat::gaussian(6, 3, 1.0, &mut rng);
    let s = &world.tasks[0].samples[0];
    let (e_img, e_txt) = (row(&router_in, 0), row(&router_in, 1));
    let sample = RefusalSample {
        refined_img: &e_img,
        refined_txt: &e_txt,
        x_img: &s.image_feature,
        x_txt: &s.text_feature,
        target: s.target_response,
    };
    let mut grad = mixture.zeros_like();
    refusal_ce_loss(&mixture, 2, &world.lm, &world.connector, sample, &mut grad)?;
    results.push(check("refusal_ce", corrupt, &mixture.flat(), grad.flat(), |p| {
        let mut probe = mixture.clone();
        probe.set_flat(p);
        let mut scratch = probe.zeros_like();
        refusal_ce_loss(&probe, 2, &world.lm, &world.connector, sample, &mut scratch).map_or(f64::NAN, |c| c.loss)
    })?);

    // Routing loss and replay, both through the router's parameters.
    let router = mixture.router.clone();
    let inputs: Vec<(Vec<f64>, Vec<f64>)> = (0..3).map(|i| (row(&router_in, 2 * i), row(&router_in, 2 * i + 1))).collect();
    let mean_logits = |r: &RouterState| -> Result<crate::refusal::RouterOutput> {
        let logits: Vec<Vec<f64>> =
            inputs.iter().map(|(a, b)| r.forward(a, b).map(|o| o.logits)).collect::<Result<_>>()?;
        mean_output(&logits)
    };
    let records = vec![
        RoutingRecord { f: crate::numerics::softmax1(&[1.5, -0.3, 0.2, 0.0]), relevance: 0.8 },
        RoutingRecord { f: crate::numerics::softmax1(&[-0.4, 0.9, 0.1, 1.2]), relevance: 0.2 },
        RoutingRecord { f: crate::numerics::softmax1(&[0.0, 0.3, -1.0, 0.4]), relevance: 0.5 },
    ];
    let router_grad = |d_logits: &[f64]| -> Result<Vec<f64>> {
        let mut g = router.zeros_like();
        let scaled: Vec<f64> = d_logits.iter().map(|d| d / inputs.len() as f64).collect();
        for (a, b) in &inputs {
            router.backward(&router.forward_trace(a, b)?, &scaled, &mut g);
        }
        Ok(g.flat())
    };
    let tau = 0.1;
    let routing = refusal_routing_loss(&mean_logits(&router)?, &records, tau)?;
    results.push(check("routing", corrupt, &router.flat(), router_grad(&routing.grad_logits)?, |p| {
        let mut probe = router.clone();
        probe.set_flat(p);
        mean_logits(&probe)
            .and_then(|o| refusal_routing_loss(&o, &records, tau))
            .map_or(f64::NAN, |l| l.loss)
    })?);

    let recorded = crate::numerics::softmax1(&[0.7, -0.2, 0.4, -1.0]);
    let replay = router_replay_loss(&mean_logits(&router)?, &recorded)?;
    results.push(check("router_replay", corrupt, &router.flat(), router_grad(&replay.grad_logits)?, |p| {
        let mut probe = router.clone();
        probe.set_flat(p);
        mean_logits(&probe).and_then(|o| router_replay_loss(&o, &recorded)).map_or(f64::NAN, |l| l.loss)
    })?);

    if let Some(name) = corrupt {
        if !results.iter().any(|r| r.loss == name) {
            return Err(Error::config("--corrupt", format!("unknown loss `{name}`")));
        }
    }
    Ok(results)
}
