//! Sequential unlearning: per-task registry growth, the two training stages,
//! task records, and per-step evaluation.
//!
//! Stage 1 trains the concept modules (alignment loss) and the modulator
//! (category cross-entropy) on the current task mixed 1:1 with prototypes of
//! earlier categories. Stage 2 freezes both and trains the router and
//! refusers with the refusal cross-entropy, the relevance-weighted routing
//! loss, and router replay on earlier tasks' prototypes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{
    concept_alignment_loss, modulator_batch_loss, modulator_forward, refine, AlignmentItem, ConceptActivations,
    ConceptBank, ModulatorState, RefinedActivations, Weighting,
};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsSnapshot};
use crate::inference::CalibrationConfig;
use crate::numerics::{cosine_sim, mean_vec, AdamConfig, AdamState, Parameters, SeedStream};
use crate::refusal::{
    mean_output, refusal_ce_loss, refusal_routing_loss, router_replay_loss, task_relevance, MixtureOfRefusers,
    RefusalSample, RefuserBank, RouterState, RoutingRecord,
};
use crate::world::{category_prototypes, target_similarities, CategoryId, Modality, Prototype, TaskSpec, World};

/// Per-term multipliers on the training losses (all 1 by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub concept: f64,
    pub modulator: f64,
    pub refusal: f64,
    pub routing: f64,
    pub replay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { concept: 1.0, modulator: 1.0, refusal: 1.0, routing: 1.0, replay: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub stage1_learning_rate: f64,
    pub stage2_learning_rate: f64,
    pub loss_weights: LossWeights,
    pub modulator_weighting: Weighting,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 300,
            stage2_steps: 300,
            batch_size: 16,
            stage1_learning_rate: 1e-3,
            stage2_learning_rate: 1e-3,
            loss_weights: LossWeights::default(),
            modulator_weighting: Weighting::Softmax,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("engine.batch_size", "must be positive"));
        }
        AdamConfig::with_lr(self.stage1_learning_rate).validate("engine.stage1_learning_rate")?;
        AdamConfig::with_lr(self.stage2_learning_rate).validate("engine.stage2_learning_rate")?;
        let w = &self.loss_weights;
        for (name, v) in [
            ("concept", w.concept),
            ("modulator", w.modulator),
            ("refusal", w.refusal),
            ("routing", w.routing),
            ("replay", w.replay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("engine.loss_weights.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefusalConfig {
    pub num_refusers: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for RefusalConfig {
    fn default() -> Self {
        Self { num_refusers: 8, top_k: 2, temperature: 0.1, heads: 2, hidden: 16 }
    }
}

impl RefusalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_refusers == 0 {
            return Err(Error::config("refusal.num_refusers", "must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::config("refusal.top_k", "must be positive"));
        }
        if self.top_k > self.num_refusers {
            return Err(Error::config(
                "refusal.top_k",
                format!("{} exceeds refusal.num_refusers = {}", self.top_k, self.num_refusers),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("refusal.temperature", "must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::config("refusal.hidden", "must be positive"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config("refusal.heads", format!("must divide refusal.hidden = {}", self.hidden)));
        }
        Ok(())
    }
}

/// Components switched off for ablation runs. Fixed for a whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Modulator frozen at uniform weights; its loss is skipped.
    #[serde(rename = "mod")]
    pub modulator: bool,
    /// Routing and replay losses skipped; the router learns from the
    /// refusal cross-entropy alone.
    #[serde(rename = "act")]
    pub activation: bool,
    /// Calibration disabled: every query gets the full refuser delta.
    #[serde(rename = "cal")]
    pub calibration: bool,
}

/// Everything [`unlearn_sequence`] needs besides the world.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub training: TrainingConfig,
    pub refusal: RefusalConfig,
    pub calibration: CalibrationConfig,
    pub ablations: Ablations,
    pub seed: u64,
}

/// What the registry remembers about a finished task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_index: usize,
    pub forget_category_ids: Vec<CategoryId>,
    pub prototypes: Vec<Prototype>,
    pub avg_refined_img: Vec<f64>,
    pub avg_refined_txt: Vec<f64>,
    pub recorded_router_output: Vec<f64>,
}

/// Refined activations of one query, plus the zero-padded router inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryActivations {
    pub raw_img: ConceptActivations,
    pub raw_txt: ConceptActivations,
    pub refined_img: RefinedActivations,
    pub refined_txt: RefinedActivations,
    pub router_img: Vec<f64>,
    pub router_txt: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub concepts: ConceptBank,
    pub modulator: ModulatorState,
    pub mixture: MixtureOfRefusers,
    pub records: Vec<TaskRecord>,
    pub flags: Ablations,
    pub training: TrainingConfig,
    pub refusal: RefusalConfig,
    /// Per-modality router input width (the run's full concept budget).
    pub router_budget: usize,
    pub feature_dim: usize,
}

/// Losses observed at the end of a stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub task_index: usize,
    pub stage: u8,
    pub final_losses: Vec<(String, f64)>,
    pub seconds: f64,
}

impl EngineState {
    pub fn new(world: &World, config: &EngineConfig) -> Result<Self> {
        config.training.validate()?;
        config.refusal.validate()?;
        let seeds = SeedStream::new(config.seed);
        let dim = world.config.feature_dim;
        let budget = world.config.concept_budget();
        let mut rng = seeds.rng("mixture");
        let per_category = world.config.concepts_per_category_per_modality as f64;
        let router = RouterState::new(
            budget,
            budget,
            config.refusal.hidden,
            config.refusal.heads,
            config.refusal.num_refusers,
            1.0 / per_category.sqrt(),
            &mut rng,
        )?;
        let bank = RefuserBank::new(config.refusal.num_refusers, dim, &mut rng);
        Ok(Self {
            concepts: ConceptBank::new(),
            modulator: ModulatorState::new(config.training.modulator_weighting),
            mixture: MixtureOfRefusers { router, bank },
            records: Vec::new(),
            flags: config.ablations,
            training: config.training.clone(),
            refusal: config.refusal.clone(),
            router_budget: budget,
            feature_dim: dim,
        })
    }

    /// Modulator weights for a query; uniform when the modulator is ablated.
    fn modulator_weights(&self, e_img: &[f64], e_txt: &[f64]) -> Result<Vec<f64>> {
        let k = self.modulator.num_categories();
        if self.flags.modulator {
            return Ok(vec![1.0 / k as f64; k]);
        }
        Ok(modulator_forward(&self.modulator, e_img, e_txt)?.m)
    }

    pub fn query(&self, x_img: &[f64], x_txt: &[f64]) -> Result<QueryActivations> {
        let raw_img = self.concepts.activations(Modality::Img, x_img)?;
        let raw_txt = self.concepts.activations(Modality::Txt, x_txt)?;
        let m = self.modulator_weights(&raw_img.values, &raw_txt.values)?;
        let refined_img = refine(&raw_img, &m)?;
        let refined_txt = refine(&raw_txt, &m)?;
        let router_img = self.pad(&refined_img.values)?;
        let router_txt = self.pad(&refined_txt.values)?;
        Ok(QueryActivations { raw_img, raw_txt, refined_img, refined_txt, router_img, router_txt })
    }

    fn pad(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() > self.router_budget {
            return Err(Error::Registry(format!(
                "{} activations exceed the router budget {}",
                values.len(),
                self.router_budget
            )));
        }
        let mut v = values.to_vec();
        v.resize(self.router_budget, 0.0);
        Ok(v)
    }

    /// Frozen-encoder targets for the current registry, in block order.
    pub fn concept_targets(&self, world: &World, modality: Modality, feature: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.concepts.total_len(modality));
        for module in self.concepts.modules(modality) {
            out.extend(target_similarities(feature, world.category(module.category_id)?.concepts(modality))?);
        }
        Ok(out)
    }

    /// Registers concept modules and modulator rows for a task's categories.
    /// Existing parameters are left untouched.
    pub fn grow(&mut self, world: &World, task: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut ids = task.forget_categories.clone();
        ids.sort();
        for id in ids {
            let cat = world.category(id)?;
            let (n_img, n_txt) = (cat.concept_vectors_img.len(), cat.concept_vectors_txt.len());
            let img_len = self.concepts.total_len(Modality::Img);
            self.concepts.add_category(id, n_img, n_txt, self.feature_dim, rng)?;
            self.modulator.grow(id, img_len, n_img, n_txt)?;
        }
        Ok(())
    }

    /// Re-expresses every record's average activations under the current
    /// concept set, using its stored prototypes.
    pub fn recompute_record_averages(&mut self) -> Result<()> {
        let mut updated = Vec::with_capacity(self.records.len());
        for record in &self.records {
            let (img, txt) = self.average_refined(record.prototypes.iter().map(|p| (&p.image[..], &p.text[..])))?;
            updated.push((img, txt));
        }
        for (record, (img, txt)) in self.records.iter_mut().zip(updated) {
            record.avg_refined_img = img;
            record.avg_refined_txt = txt;
        }
        Ok(())
    }

    /// Mean refined activations (unpadded) over `(x_img, x_txt)` pairs.
    pub fn average_refined<'a>(
        &self,
        pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut imgs = Vec::new();
        let mut txts = Vec::new();
        for (x_img, x_txt) in pairs {
            let q = self.query(x_img, x_txt)?;
            imgs.push(q.refined_img.values);
            txts.push(q.refined_txt.values);
        }
        if imgs.is_empty() {
            return Err(Error::Data("no samples to average".into()));
        }
        Ok((mean_vec(&imgs), mean_vec(&txts)))
    }

    fn earlier_prototypes(&self) -> Vec<&Prototype> {
        self.records.iter().flat_map(|r| r.prototypes.iter()).collect()
    }

    pub fn run_stage1(&mut self, world: &World, task: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<StageLog> {
        let start = std::time::Instant::now();
        let cfg = self.training.clone();
        let mut concept_opt = AdamState::new(AdamConfig::with_lr(cfg.stage1_learning_rate), self.concepts.num_params());
        let mut mod_opt = AdamState::new(AdamConfig::with_lr(cfg.stage1_learning_rate), self.modulator.num_params());
        let protos: Vec<Prototype> = self.earlier_prototypes().into_iter().cloned().collect();
        let n_current = if protos.is_empty() { cfg.batch_size } else { cfg.batch_size.div_ceil(2) };
        let mut order = EpochSampler::new(task.samples.len());
        let mut last = (0.0, 0.0);

        for step in 0..cfg.stage1_steps {
            let mut batch: Vec<(&[f64], &[f64], CategoryId)> = Vec::with_capacity(cfg.batch_size);
            for i in order.take(n_current, rng) {
                let s = &task.samples[i];
                batch.push((&s.image_feature, &s.text_feature, s.category_id));
            }
            if !protos.is_empty() {
                for _ in n_current..cfg.batch_size {
                    let p = &protos[rng.random_range(0..protos.len())];
                    batch.push((&p.image, &p.text, p.category_id));
                }
            }
            let targets: Vec<(Vec<f64>, Vec<f64>)> = batch
                .iter()
                .map(|(xi, xt, _)| {
                    Ok((
                        self.concept_targets(world, Modality::Img, xi)?,
                        self.concept_targets(world, Modality::Txt, xt)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let items: Vec<AlignmentItem<'_>> = batch
                .iter()
                .zip(&targets)
                .map(|((xi, xt, _), (ti, tt))| AlignmentItem {
                    image_feature: xi,
                    text_feature: xt,
                    target_img: ti,
                    target_txt: tt,
                })
                .collect();
            let align = concept_alignment_loss(&self.concepts, &items)?;
            let mut mod_loss = 0.0;
            if !self.flags.modulator {
                let acts: Vec<(Vec<f64>, Vec<f64>)> = batch
                    .iter()
                    .map(|(xi, xt, _)| {
                        Ok((
                            self.concepts.activations(Modality::Img, xi)?.values,
                            self.concepts.activations(Modality::Txt, xt)?.values,
                        ))
                    })
                    .collect::<Result<_>>()?;
                let mod_batch: Vec<(&[f64], &[f64], CategoryId)> =
                    acts.iter().zip(&batch).map(|((ei, et), b)| (&ei[..], &et[..], b.2)).collect();
                let (loss, grad) = modulator_batch_loss(&self.modulator, &mod_batch)?;
                mod_loss = loss;
                let mut scaled = grad.zeros_like();
                scaled.accumulate(cfg.loss_weights.modulator, &grad);
                mod_opt.step_model(&mut self.modulator, &scaled)?;
            }
            if !(align.loss.is_finite() && mod_loss.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "stage 1 loss at step {step} (alignment {}, modulator {mod_loss})",
                    align.loss
                )));
            }
            let mut scaled = align.grad.zeros_like();
            scaled.accumulate(cfg.loss_weights.concept, &align.grad);
            concept_opt.step_model(&mut self.concepts, &scaled)?;
            last = (align.loss, mod_loss);
        }
        Ok(StageLog {
            task_index: task.task_index,
            stage: 1,
            final_losses: vec![("concept".into(), last.0), ("modulator".into(), last.1)],
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn run_stage2(&mut self, world: &World, task: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<StageLog> {
        let start = std::time::Instant::now();
        let cfg = self.training.clone();
        let top_k = self.refusal.top_k;
        let tau = self.refusal.temperature;
        let mut opt = AdamState::new(AdamConfig::with_lr(cfg.stage2_learning_rate), self.mixture.num_params());

        // Concept modules and modulator are frozen, so every activation the
        // stage needs can be computed once.
        let queries: Vec<QueryActivations> =
            task.samples.iter().map(|s| self.query(&s.image_feature, &s.text_feature)).collect::<Result<_>>()?;
        let use_act = !self.flags.activation && !self.records.is_empty();
        let (routing_records, replay_inputs) = if use_act {
            let (cur_img, cur_txt) = (
                mean_vec(&queries.iter().map(|q| q.refined_img.values.clone()).collect::<Vec<_>>()),
                mean_vec(&queries.iter().map(|q| q.refined_txt.values.clone()).collect::<Vec<_>>()),
            );
            let mut routing = Vec::with_capacity(self.records.len());
            let mut replay = Vec::with_capacity(self.records.len());
            for record in &self.records {
                let rel = task_relevance(&cur_img, &cur_txt, &record.avg_refined_img, &record.avg_refined_txt)?;
                routing.push(RoutingRecord { f: record.recorded_router_output.clone(), relevance: rel.rescaled });
                let inputs: Vec<(Vec<f64>, Vec<f64>)> = record
                    .prototypes
                    .iter()
                    .map(|p| self.query(&p.image, &p.text).map(|q| (q.router_img, q.router_txt)))
                    .collect::<Result<_>>()?;
                replay.push((inputs, record.recorded_router_output.clone()));
            }
            (routing, replay)
        } else {
            (Vec::new(), Vec::new())
        };

        let mut order = EpochSampler::new(task.samples.len());
        let mut last = (0.0, 0.0, 0.0);
        for step in 0..cfg.stage2_steps {
            let idx = order.take(cfg.batch_size, rng);
            let inv_b = 1.0 / idx.len() as f64;
            let mut grad = self.mixture.zeros_like();
            let mut sample_grad = self.mixture.zeros_like();
            let mut ce_total = 0.0;
            for &i in &idx {
                let (s, q) = (&task.samples[i], &queries[i]);
                sample_grad.zero();
                let ce = refusal_ce_loss(
                    &self.mixture,
                    top_k,
                    &world.lm,
                    &world.connector,
                    RefusalSample {
                        refined_img: &q.router_img,
                        refined_txt: &q.router_txt,
                        x_img: &s.image_feature,
                        x_txt: &s.text_feature,
                        target: s.target_response,
                    },
                    &mut sample_grad,
                )?;
                ce_total += ce.loss * inv_b;
                grad.accumulate(cfg.loss_weights.refusal * inv_b, &sample_grad);
            }

            let mut ref_loss = 0.0;
            let mut replay_total = 0.0;
            if use_act {
                let router = &self.mixture.router;
                let traces: Vec<_> = idx
                    .iter()
                    .map(|&i| router.forward_trace(&queries[i].router_img, &queries[i].router_txt))
                    .collect::<Result<_>>()?;
                let current = mean_output(&traces.iter().map(|t| t.output.logits.clone()).collect::<Vec<_>>())?;
                let routing = refusal_routing_loss(&current, &routing_records, tau)?;
                ref_loss = routing.loss;
                let d_logits: Vec<f64> =
                    routing.grad_logits.iter().map(|g| g * cfg.loss_weights.routing * inv_b).collect();
                for trace in &traces {
                    router.backward(trace, &d_logits, &mut grad.router);
                }

                for (inputs, recorded) in &replay_inputs {
                    let traces: Vec<_> =
                        inputs.iter().map(|(ei, et)| router.forward_trace(ei, et)).collect::<Result<_>>()?;
                    let current =
                        mean_output(&traces.iter().map(|t| t.output.logits.clone()).collect::<Vec<_>>())?;
                    let replay = router_replay_loss(&current, recorded)?;
                    replay_total += replay.loss;
                    let scale = cfg.loss_weights.replay / traces.len() as f64;
                    let d_logits: Vec<f64> = replay.grad_logits.iter().map(|g| g * scale).collect();
                    for trace in &traces {
                        router.backward(trace, &d_logits, &mut grad.router);
                    }
                }
            }
            if !(ce_total.is_finite() && ref_loss.is_finite() && replay_total.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "stage 2 loss at step {step} (refusal {ce_total}, routing {ref_loss}, replay {replay_total})"
                )));
            }
            opt.step_model(&mut self.mixture, &grad)?;
            last = (ce_total, ref_loss, replay_total);
        }
        Ok(StageLog {
            task_index: task.task_index,
            stage: 2,
            final_losses: vec![
                ("refusal".into(), last.0),
                ("routing".into(), last.1),
                ("replay".into(), last.2),
            ],
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Appends the record for a finished task.
    pub fn finalize_task_record(&mut self, task: &TaskSpec) -> Result<&TaskRecord> {
        let prototypes = category_prototypes(task)?;
        let (avg_img, avg_txt) =
            self.average_refined(task.samples.iter().map(|s| (&s.image_feature[..], &s.text_feature[..])))?;
        let logits: Vec<Vec<f64>> = task
            .samples
            .iter()
            .map(|s| {
                let q = self.query(&s.image_feature, &s.text_feature)?;
                Ok(self.mixture.router.forward(&q.router_img, &q.router_txt)?.logits)
            })
            .collect::<Result<_>>()?;
        let recorded = mean_output(&logits)?.f;
        self.records.push(TaskRecord {
            task_index: task.task_index,
            forget_category_ids: task.forget_categories.clone(),
            prototypes,
            avg_refined_img: avg_img,
            avg_refined_txt: avg_txt,
            recorded_router_output: recorded,
        });
        Ok(self.records.last().expect("record just pushed"))
    }

    /// Mean alignment between activations and targets over samples.
    pub fn alignment(&self, world: &World, modality: Modality, features: &[&[f64]]) -> Result<f64> {
        let mut total = 0.0;
        for f in features {
            let e = self.concepts.activations(modality, f)?;
            total += cosine_sim(&e.values, &self.concept_targets(world, modality, f)?);
        }
        Ok(total / features.len().max(1) as f64)
    }
}

/// Cycles through `0..n` in a fresh random order each epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub state: EngineState,
    pub snapshots: Vec<MetricsSnapshot>,
    pub stage_logs: Vec<StageLog>,
}

/// Learns every task of `world` in order, evaluating after each. `on_task`
/// sees the state after each task (used for checkpoints).
pub fn unlearn_sequence(
    world: &World,
    config: &EngineConfig,
    mut on_task: impl FnMut(usize, &EngineState) -> Result<()>,
) -> Result<SequenceOutcome> {
    let mut state = EngineState::new(world, config)?;
    let seeds = SeedStream::new(config.seed);
    let baseline = eval::BenchmarkBaseline::compute(world)?;
    let mut snapshots = Vec::with_capacity(world.tasks.len());
    let mut stage_logs = Vec::with_capacity(2 * world.tasks.len());
    for task in &world.tasks {
        let t = task.task_index;
        let mut run = |state: &mut EngineState| -> Result<MetricsSnapshot> {
            let mut rng = seeds.split_indexed("task", t as u64).rng("train");
            state.grow(world, task, &mut rng)?;
            state.recompute_record_averages()?;
            stage_logs.push(state.run_stage1(world, task, &mut rng)?);
            state.recompute_record_averages()?;
            stage_logs.push(state.run_stage2(world, task, &mut rng)?);
            state.finalize_task_record(task)?;
            let snapshot = eval::evaluate_step(state, world, t, &config.calibration, &baseline)?;
            log::info!(
                "task {t}: crr {:.3} rr {:.3} ar {:.3} specificity {:.2}",
                snapshot.crr,
                snapshot.rr,
                snapshot.ar,
                snapshot.specificity
            );
            on_task(t, state)?;
            Ok(snapshot)
        };
        snapshots.push(run(&mut state).map_err(|e| e.in_task(t))?);
    }
    Ok(SequenceOutcome { state, snapshots, stage_logs })
}

/// Current checkpoint layout version; bumped on any incompatible change.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Self-contained snapshot after a task: enough to regenerate the world and
/// evaluate the state without the original run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub task_index: usize,
    pub seed: u64,
    pub world: crate::world::WorldConfig,
    pub calibration: CalibrationConfig,
    pub state: EngineState,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::Serde { path: path.into(), source: e })?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Serde { path: path.into(), source: e })?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}
