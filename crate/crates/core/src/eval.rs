//! Refusal and retention metrics, per-step evaluation, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Ablations, EngineState, StageLog};
use crate::error::{Error, Result};
use crate::inference::{calibrated_forward, CalibrationConfig};
use crate::numerics::entropy;
use crate::world::{CategoryId, ClassKind, MockLM, Modality, World};

/// One decoded forget query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub class: usize,
    pub category: CategoryId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefusalRates {
    pub crr: f64,
    pub rr: f64,
    pub delta_rr: f64,
}

fn refusal_class_of(lm: &MockLM, category: CategoryId) -> Option<usize> {
    (0..lm.num_classes()).find(|&c| lm.class_kinds[c] == ClassKind::Refusal && lm.class_category[c] == category)
}

/// CRR counts refusals naming the query's own category; RR counts any
/// refusal.
pub fn context_refusal_metrics(lm: &MockLM, responses: &[Response]) -> Result<RefusalRates> {
    if responses.is_empty() {
        return Err(Error::Metric("refusal rates of an empty response set are undefined".into()));
    }
    let mut correct = 0usize;
    let mut any = 0usize;
    for r in responses {
        let own = refusal_class_of(lm, r.category)
            .ok_or_else(|| Error::Metric(format!("category {} has no refusal class", r.category.0)))?;
        if r.class >= lm.num_classes() {
            return Err(Error::Label(format!("decoded class {} out of range", r.class)));
        }
        if lm.class_kinds[r.class] == ClassKind::Refusal {
            any += 1;
            if r.class == own {
                correct += 1;
            }
        }
    }
    let n = responses.len() as f64;
    let (crr, rr) = (correct as f64 / n, any as f64 / n);
    Ok(RefusalRates { crr, rr, delta_rr: rr - crr })
}

/// Fraction of decoded classes that are answers.
pub fn answer_rate(lm: &MockLM, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Metric("answer rate of an empty pool is undefined".into()));
    }
    let answers = classes.iter().filter(|&&c| lm.kind(c) == ClassKind::Answer).count();
    Ok(answers as f64 / classes.len() as f64)
}

/// `100 × unlearned / pretrained`.
pub fn specificity(unlearned_accuracy: f64, pretrained_accuracy: f64) -> Result<f64> {
    if pretrained_accuracy <= 0.0 {
        return Err(Error::Metric("specificity needs a positive pretrained accuracy".into()));
    }
    Ok(100.0 * unlearned_accuracy / pretrained_accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub step: usize,
    pub crr: f64,
    pub rr: f64,
    pub delta_rr: f64,
    pub ar: f64,
    pub specificity: f64,
    pub per_task_crr: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub crr: f64,
    pub rr: f64,
    pub delta_rr: f64,
    pub ar: f64,
    pub specificity: f64,
}

pub fn avg_last(snapshots: &[MetricsSnapshot]) -> Result<(MetricSummary, MetricsSnapshot)> {
    let last = snapshots.last().ok_or_else(|| Error::Metric("no snapshots to aggregate".into()))?;
    let n = snapshots.len() as f64;
    let mean = |f: fn(&MetricsSnapshot) -> f64| snapshots.iter().map(f).sum::<f64>() / n;
    Ok((
        MetricSummary {
            crr: mean(|s| s.crr),
            rr: mean(|s| s.rr),
            delta_rr: mean(|s| s.delta_rr),
            ar: mean(|s| s.ar),
            specificity: mean(|s| s.specificity),
        },
        last.clone(),
    ))
}

/// Pretrained accuracy on the benchmark pool, computed once per world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchmarkBaseline {
    pub accuracy: f64,
}

impl BenchmarkBaseline {
    pub fn compute(world: &World) -> Result<Self> {
        if world.benchmark_pool.is_empty() {
            return Err(Error::Metric("empty benchmark pool".into()));
        }
        let mut hits = 0usize;
        for s in &world.benchmark_pool {
            if world.pretrained_decode(&s.image_feature, &s.text_feature)?.class == s.target_response {
                hits += 1;
            }
        }
        Ok(Self { accuracy: hits as f64 / world.benchmark_pool.len() as f64 })
    }
}

/// Metrics after learning tasks `0..=step`: refusal rates on the held-out
/// forget samples of all learned tasks, answer rate on the retain pool, and
/// specificity on the benchmark pool.
pub fn evaluate_step(
    state: &EngineState,
    world: &World,
    step: usize,
    cal: &CalibrationConfig,
    baseline: &BenchmarkBaseline,
) -> Result<MetricsSnapshot> {
    let decode = |x_img: &[f64], x_txt: &[f64]| {
        calibrated_forward(state, &world.lm, &world.connector, x_img, x_txt, cal).map(|o| o.class)
    };
    let mut all = Vec::new();
    let mut per_task_crr = BTreeMap::new();
    for task in world.tasks.iter().take(step + 1) {
        let mut responses = Vec::with_capacity(task.heldout.len());
        for s in &task.heldout {
            responses.push(Response { class: decode(&s.image_feature, &s.text_feature)?, category: s.category_id });
        }
        per_task_crr.insert(task.task_index, context_refusal_metrics(&world.lm, &responses)?.crr);
        all.extend(responses);
    }
    let rates = context_refusal_metrics(&world.lm, &all)?;
    let retain: Vec<usize> =
        world.retain_pool.iter().map(|s| decode(&s.image_feature, &s.text_feature)).collect::<Result<_>>()?;
    let ar = answer_rate(&world.lm, &retain)?;
    let mut hits = 0usize;
    for s in &world.benchmark_pool {
        if decode(&s.image_feature, &s.text_feature)? == s.target_response {
            hits += 1;
        }
    }
    let accuracy = hits as f64 / world.benchmark_pool.len().max(1) as f64;
    Ok(MetricsSnapshot {
        step,
        crr: rates.crr,
        rr: rates.rr,
        delta_rr: rates.delta_rr,
        ar,
        specificity: specificity(accuracy, baseline.accuracy)?,
        per_task_crr,
    })
}

/// How often refuser `refuser` was engaged for the held-out forget samples of
/// task `task`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterFreq {
    pub task: usize,
    pub refuser: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDiagnostics {
    pub counts: Vec<RouterFreq>,
    /// Entropy (nats) of engagement counts pooled over all tasks.
    pub pooled_entropy: f64,
    /// Mean over tasks of each task's own engagement entropy.
    pub mean_task_entropy: f64,
}

pub fn routing_diagnostics(state: &EngineState, world: &World) -> Result<RoutingDiagnostics> {
    let n = state.mixture.bank.len();
    let mut counts = Vec::new();
    let mut pooled = vec![0.0; n];
    let mut task_entropies = Vec::new();
    for task in world.tasks.iter().filter(|t| state.records.iter().any(|r| r.task_index == t.task_index)) {
        let mut per = vec![0usize; n];
        for s in &task.heldout {
            let q = state.query(&s.image_feature, &s.text_feature)?;
            let out = state.mixture.router.forward(&q.router_img, &q.router_txt)?;
            for j in crate::refusal::top_k_gate(&out, state.refusal.top_k)?.selected {
                per[j] += 1;
            }
        }
        for (j, &c) in per.iter().enumerate() {
            pooled[j] += c as f64;
            counts.push(RouterFreq { task: task.task_index, refuser: j, count: c });
        }
        task_entropies.push(entropy(&per.iter().map(|&c| c as f64).collect::<Vec<_>>()));
    }
    let mean_task_entropy = if task_entropies.is_empty() {
        0.0
    } else {
        task_entropies.iter().sum::<f64>() / task_entropies.len() as f64
    };
    Ok(RoutingDiagnostics { counts, pooled_entropy: entropy(&pooled), mean_task_entropy })
}

/// Per-sample concept activations for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub sample: usize,
    pub task: usize,
    pub category: CategoryId,
    pub modality: Modality,
    pub blocks: Vec<(CategoryId, Vec<f64>)>,
    pub m: Vec<f64>,
}

pub fn activation_records(state: &EngineState, world: &World) -> Result<Vec<ActivationRecord>> {
    let mut out = Vec::new();
    for task in &world.tasks {
        for (i, s) in task.heldout.iter().enumerate() {
            let q = state.query(&s.image_feature, &s.text_feature)?;
            for (raw, refined) in [(&q.raw_img, &q.refined_img), (&q.raw_txt, &q.refined_txt)] {
                out.push(ActivationRecord {
                    sample: i,
                    task: task.task_index,
                    category: s.category_id,
                    modality: raw.modality,
                    blocks: raw.block_index.iter().map(|(c, r)| (*c, raw.values[r.clone()].to_vec())).collect(),
                    m: refined.weights.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Run-dependent but non-reproducible information, kept apart so the rest of
/// the report is byte-stable for a fixed seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub created_at: String,
    pub crate_version: String,
    pub stage_logs: Vec<StageLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub snapshots: Vec<MetricsSnapshot>,
    pub avg: MetricSummary,
    pub last: MetricsSnapshot,
    pub routing: RoutingDiagnostics,
    pub ablations: Ablations,
    pub seed: u64,
    pub config: serde_json::Value,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn new(
        snapshots: Vec<MetricsSnapshot>,
        routing: RoutingDiagnostics,
        ablations: Ablations,
        seed: u64,
        config: serde_json::Value,
        stage_logs: Vec<StageLog>,
    ) -> Result<Self> {
        let (avg, last) = avg_last(&snapshots)?;
        Ok(Self {
            snapshots,
            avg,
            last,
            routing,
            ablations,
            seed,
            config,
            meta: ReportMeta {
                created_at: chrono::Utc::now().to_rfc3339(),
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                stage_logs,
            },
        })
    }
}

pub fn metrics_csv(snapshots: &[MetricsSnapshot]) -> String {
    let mut out = String::from("step,crr,rr,delta_rr,ar,specificity\n");
    for s in snapshots {
        // Writing to a String cannot fail.
        let _ = writeln!(out, "{},{},{},{},{},{}", s.step, s.crr, s.rr, s.delta_rr, s.ar, s.specificity);
    }
    out
}

pub fn router_freq_csv(counts: &[RouterFreq]) -> String {
    let mut out = String::from("task,refuser,count\n");
    for c in counts {
        let _ = writeln!(out, "{},{},{}", c.task, c.refuser, c.count);
    }
    out
}

/// A small line chart of CRR, AR and specificity/100 over steps.
pub fn metrics_svg(snapshots: &[MetricsSnapshot]) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let n = snapshots.len().max(2) as f64 - 1.0;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let series: [(&str, &str, fn(&MetricsSnapshot) -> f64); 3] = [
        ("CRR", "#c0392b", |s| s.crr),
        ("AR", "#2471a3", |s| s.ar),
        ("S/100", "#239b56", |s| s.specificity / 100.0),
    ];
    for (k, (label, color, f)) in series.iter().enumerate() {
        let points: Vec<String> =
            snapshots.iter().enumerate().map(|(i, s)| format!("{:.1},{:.1}", x(i), y(f(s)))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>",
            w - pad - 40.0,
            pad + 14.0 * k as f64
        );
    }
    for i in 0..snapshots.len() {
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{}\" font-size=\"10\">{}</text>", x(i) - 3.0, h - pad + 14.0, i + 1);
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `metrics.csv`, `report.json`, `router_freq.csv`, `metrics.svg`
/// and, when given, `activations.jsonl`. Returns the written paths.
pub fn write_report(
    report: &MetricsReport,
    dir: &Path,
    activations: Option<&[ActivationRecord]>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![
        write_file(dir.join("metrics.csv"), &metrics_csv(&report.snapshots))?,
        write_file(dir.join("router_freq.csv"), &router_freq_csv(&report.routing.counts))?,
        write_file(dir.join("metrics.svg"), &metrics_svg(&report.snapshots))?,
    ];
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Serde { path: json_path.clone(), source: e })?;
    written.push(write_file(json_path, &(json + "\n"))?);
    if let Some(records) = activations {
        let path = dir.join("activations.jsonl");
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde { path: path.clone(), source: e })?);
            out.push('\n');
        }
        written.push(write_file(path, &out)?);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde { path: path.to_path_buf(), source: e })
}
