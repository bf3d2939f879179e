//! Synthetic stand-in for the frozen vision-language stack.
//!
//! A [`World`] holds categories with unit image and intent prototypes, the
//! per-category concept embeddings, a sequential stream of forget tasks, the
//! retain and benchmark pools, a fixed orthogonal connector `P` and a linear
//! mock language head that maps a (visual, text) feature pair to a response
//! class.
//!
//! Response classes are laid out as `[answer_0 .. answer_{n-1}, refusal_0 ..
//! refusal_{n-1}]` for `n` categories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_sim, dot, mean_vec, norm, normalize, Mat, SeedStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Img,
    Txt,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Img, Modality::Txt];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Img => "img",
            Modality::Txt => "txt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Answer,
    Refusal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub feature_dim: usize,
    pub num_tasks: usize,
    pub categories_per_task: usize,
    pub concepts_per_category_per_modality: usize,
    pub samples_per_category: usize,
    /// Per-coordinate standard deviation of the gaussian added to a prototype
    /// before normalising a sample feature.
    pub sample_noise: f64,
    /// Per-coordinate standard deviation for concept embeddings.
    pub concept_noise: f64,
    pub prototype_min_angle_cos: f64,
    pub benchmark_categories: usize,
    pub refusal_text_weight: f64,
    /// Number of task-agnostic instruction intents used in retain pairs.
    pub general_intents: usize,
    pub embedding_file: Option<PathBuf>,
    /// Filled from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            num_tasks: 6,
            categories_per_task: 3,
            concepts_per_category_per_modality: 8,
            samples_per_category: 40,
            sample_noise: 0.05,
            concept_noise: 0.3,
            prototype_min_angle_cos: 0.3,
            benchmark_categories: 10,
            refusal_text_weight: 0.5,
            general_intents: 8,
            embedding_file: None,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("world.feature_dim", self.feature_dim),
            ("world.num_tasks", self.num_tasks),
            ("world.categories_per_task", self.categories_per_task),
            (
                "world.concepts_per_category_per_modality",
                self.concepts_per_category_per_modality,
            ),
            ("world.samples_per_category", self.samples_per_category),
            ("world.benchmark_categories", self.benchmark_categories),
            ("world.general_intents", self.general_intents),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, v) in [
            ("world.sample_noise", self.sample_noise),
            ("world.concept_noise", self.concept_noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a positive real"));
            }
        }
        if !(self.prototype_min_angle_cos > 0.0 && self.prototype_min_angle_cos < 1.0) {
            return Err(Error::config("world.prototype_min_angle_cos", "must lie in (0, 1)"));
        }
        if !self.refusal_text_weight.is_finite() {
            return Err(Error::config("world.refusal_text_weight", "must be finite"));
        }
        Ok(())
    }

    pub fn num_forget_categories(&self) -> usize {
        self.num_tasks * self.categories_per_task
    }

    pub fn num_categories(&self) -> usize {
        self.num_forget_categories() + self.benchmark_categories
    }

    /// Concept count per modality once every task has been learned.
    pub fn concept_budget(&self) -> usize {
        self.num_forget_categories() * self.concepts_per_category_per_modality
    }

    pub fn heldout_per_category(&self) -> usize {
        (self.samples_per_category / 2).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub image_prototype: Vec<f64>,
    pub intent_prototype: Vec<f64>,
    pub concept_vectors_img: Vec<Vec<f64>>,
    pub concept_vectors_txt: Vec<Vec<f64>>,
    pub answer_class: usize,
    pub refusal_class: usize,
    /// True for categories reserved for the benchmark pool.
    pub benchmark: bool,
}

impl Category {
    pub fn concepts(&self, modality: Modality) -> &[Vec<f64>] {
        match modality {
            Modality::Img => &self.concept_vectors_img,
            Modality::Txt => &self.concept_vectors_txt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTriplet {
    pub image_feature: Vec<f64>,
    pub text_feature: Vec<f64>,
    pub category_id: CategoryId,
    pub target_response: usize,
}

impl SampleTriplet {
    pub fn feature(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Img => &self.image_feature,
            Modality::Txt => &self.text_feature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    pub forget_categories: Vec<CategoryId>,
    /// Training samples.
    pub samples: Vec<SampleTriplet>,
    /// Held-out forget samples of the same categories, used for evaluation.
    pub heldout: Vec<SampleTriplet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockLM {
    pub visual_readout: Mat,
    pub text_readout: Mat,
    pub class_kinds: Vec<ClassKind>,
    pub class_category: Vec<CategoryId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub logits: Vec<f64>,
    pub class: usize,
}

impl MockLM {
    pub fn num_classes(&self) -> usize {
        self.class_kinds.len()
    }

    pub fn kind(&self, class: usize) -> ClassKind {
        self.class_kinds[class]
    }
}

/// Per-category mean features, unit-normalised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub category_id: CategoryId,
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

impl Prototype {
    pub fn feature(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Img => &self.image,
            Modality::Txt => &self.text,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub categories: Vec<Category>,
    pub general_intents: Vec<Vec<f64>>,
    pub tasks: Vec<TaskSpec>,
    pub retain_pool: Vec<SampleTriplet>,
    pub benchmark_pool: Vec<SampleTriplet>,
    pub lm: MockLM,
    pub connector: Mat,
}

impl World {
    pub fn category(&self, id: CategoryId) -> Result<&Category> {
        self.categories
            .get(id.0)
            .ok_or_else(|| Error::Data(format!("unknown category {}", id.0)))
    }

    pub fn forget_category_ids(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.tasks.iter().flat_map(|t| t.forget_categories.iter().copied())
    }

    /// Decode with the pretrained connector only.
    pub fn pretrained_decode(&self, x_img: &[f64], x_txt: &[f64]) -> Result<Decoded> {
        let v = pretrained_connect(x_img, &self.connector)?;
        mock_decode(&self.lm, &v, x_txt)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn perturb(rng: &mut ChaCha8Rng, base: &[f64], noise: f64) -> Vec<f64> {
    let v: Vec<f64> = base
        .iter()
        .map(|b| b + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&v)
}

/// Draws `count` unit vectors with pairwise cosine below `max_cos`, giving up
/// after `10 * count` draws.
fn separated_unit_vectors(
    rng: &mut ChaCha8Rng,
    dim: usize,
    count: usize,
    max_cos: f64,
    what: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut draws = 0;
    while out.len() < count {
        if draws >= 10 * count {
            return Err(Error::config(
                "world.prototype_min_angle_cos",
                format!("prototype separation infeasible ({what}: {} of {count} after {draws} draws)", out.len()),
            ));
        }
        draws += 1;
        let v = normalize(&gaussian_vec(rng, dim));
        if out.iter().all(|u| dot(u, &v) < max_cos) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Orthonormal basis of the span of `vs` (modified Gram-Schmidt).
fn orthonormal_basis(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        for b in &basis {
            let c = dot(&w, b);
            w.iter_mut().zip(b).for_each(|(wi, bi)| *wi -= c * bi);
        }
        let n = norm(&w);
        if n > 1e-10 {
            basis.push(w.iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Mat {
    loop {
        let cols: Vec<Vec<f64>> = (0..dim).map(|_| gaussian_vec(rng, dim)).collect();
        let basis = orthonormal_basis(&cols);
        if basis.len() == dim {
            return Mat::from_rows(&basis).expect("square basis");
        }
    }
}

/// Unit refusal direction with `|cos| <= 0.2` against every answer row. A
/// gaussian draw is pulled toward the orthogonal complement of the answer rows
/// only as far as needed to satisfy the bound; the draw is repeated if even the
/// full projection fails.
fn refusal_row(rng: &mut ChaCha8Rng, answer_rows: &[Vec<f64>], basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    const MAX_COS: f64 = 0.2;
    let dim = answer_rows[0].len();
    for _ in 0..100 {
        let g = gaussian_vec(rng, dim);
        let mut proj = vec![0.0; dim];
        for b in basis {
            let c = dot(&g, b);
            proj.iter_mut().zip(b).for_each(|(p, bi)| *p += c * bi);
        }
        for step in 0..=10 {
            let s = step as f64 / 10.0;
            let cand: Vec<f64> = g.iter().zip(&proj).map(|(gi, pi)| gi - s * pi).collect();
            if norm(&cand) < 1e-8 {
                continue;
            }
            let cand = normalize(&cand);
            if answer_rows.iter().all(|a| dot(a, &cand).abs() <= MAX_COS) {
                return Ok(cand);
            }
        }
    }
    Err(Error::config(
        "world.feature_dim",
        "cannot place refusal rows away from every answer row; raise feature_dim or lower category counts",
    ))
}

/// Builds the whole synthetic world. Pure in `cfg`.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let overrides = match &cfg.embedding_file {
        Some(path) => Some(load_embeddings(path, cfg.feature_dim)?),
        None => None,
    };
    generate_world_with(cfg, overrides.as_ref())
}

pub fn generate_world_with(cfg: &WorldConfig, overrides: Option<&EmbeddingSet>) -> Result<World> {
    cfg.validate()?;
    let seeds = SeedStream::new(cfg.seed).split("world");
    let dim = cfg.feature_dim;
    let n_forget = cfg.num_forget_categories();
    let n_cat = cfg.num_categories();
    let n_concepts = cfg.concepts_per_category_per_modality;

    let mut proto_rng = seeds.rng("image-prototypes");
    let mut image_protos =
        separated_unit_vectors(&mut proto_rng, dim, n_cat, cfg.prototype_min_angle_cos, "image prototypes")?;
    let mut intent_rng = seeds.rng("intent-prototypes");
    let intents = separated_unit_vectors(
        &mut intent_rng,
        dim,
        n_cat + cfg.general_intents,
        cfg.prototype_min_angle_cos,
        "intent prototypes",
    )?;
    let mut intent_protos: Vec<Vec<f64>> = intents[..n_cat].to_vec();
    let general_intents: Vec<Vec<f64>> = intents[n_cat..].to_vec();

    if let Some(ov) = overrides {
        ov.check_categories(n_cat)?;
        for ((cat, modality), v) in &ov.prototypes {
            match modality {
                Modality::Img => image_protos[*cat] = normalize(v),
                Modality::Txt => intent_protos[*cat] = normalize(v),
            }
        }
    }

    let mut categories = Vec::with_capacity(n_cat);
    for c in 0..n_cat {
        let cs = seeds.split_indexed("concepts", c as u64);
        let mut rng_img = cs.rng("img");
        let mut rng_txt = cs.rng("txt");
        let mut concept_vectors_img: Vec<Vec<f64>> = (0..n_concepts)
            .map(|_| perturb(&mut rng_img, &image_protos[c], cfg.concept_noise))
            .collect();
        let mut concept_vectors_txt: Vec<Vec<f64>> = (0..n_concepts)
            .map(|_| perturb(&mut rng_txt, &intent_protos[c], cfg.concept_noise))
            .collect();
        if let Some(ov) = overrides {
            for modality in Modality::BOTH {
                if let Some(list) = ov.concepts.get(&(c, modality)) {
                    if list.len() != n_concepts {
                        return Err(Error::Data(format!(
                            "embedding file has {} {} concepts for category {c}, expected {n_concepts}",
                            list.len(),
                            modality.as_str()
                        )));
                    }
                    let target = match modality {
                        Modality::Img => &mut concept_vectors_img,
                        Modality::Txt => &mut concept_vectors_txt,
                    };
                    *target = list.iter().map(|v| normalize(v)).collect();
                }
            }
        }
        categories.push(Category {
            id: CategoryId(c),
            image_prototype: image_protos[c].clone(),
            intent_prototype: intent_protos[c].clone(),
            concept_vectors_img,
            concept_vectors_txt,
            answer_class: c,
            refusal_class: n_cat + c,
            benchmark: c >= n_forget,
        });
    }

    let connector = random_orthogonal(&mut seeds.rng("connector"), dim);

    // Mock language head.
    let answer_rows: Vec<Vec<f64>> = categories
        .iter()
        .map(|c| connector.matvec(&c.image_prototype))
        .collect();
    let basis = orthonormal_basis(&answer_rows);
    let mut refusal_rng = seeds.rng("refusal-rows");
    let mut visual_rows = answer_rows.clone();
    for _ in 0..n_cat {
        visual_rows.push(refusal_row(&mut refusal_rng, &answer_rows, &basis)?);
    }
    let mut text_rows = vec![vec![0.0; dim]; n_cat];
    for c in &categories {
        text_rows.push(c.intent_prototype.iter().map(|v| cfg.refusal_text_weight * v).collect());
    }
    let mut class_kinds = vec![ClassKind::Answer; n_cat];
    class_kinds.extend(std::iter::repeat_n(ClassKind::Refusal, n_cat));
    let class_category: Vec<CategoryId> = (0..2 * n_cat).map(|i| CategoryId(i % n_cat)).collect();
    let lm = MockLM {
        visual_readout: Mat::from_rows(&visual_rows)?,
        text_readout: Mat::from_rows(&text_rows)?,
        class_kinds,
        class_category,
    };

    // Task stream.
    let noise = cfg.sample_noise;
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let ts = seeds.split_indexed("task", t as u64);
        let mut train_rng = ts.rng("train");
        let mut heldout_rng = ts.rng("heldout");
        let forget: Vec<CategoryId> = (0..cfg.categories_per_task)
            .map(|i| CategoryId(t * cfg.categories_per_task + i))
            .collect();
        let mut samples = Vec::new();
        let mut heldout = Vec::new();
        for &id in &forget {
            let cat = &categories[id.0];
            let draw = |rng: &mut ChaCha8Rng| SampleTriplet {
                image_feature: perturb(rng, &cat.image_prototype, noise),
                text_feature: perturb(rng, &cat.intent_prototype, noise),
                category_id: id,
                target_response: cat.refusal_class,
            };
            let ingested = overrides.and_then(|ov| ov.samples.get(&id.0));
            match ingested {
                Some((imgs, txts)) => {
                    if imgs.len() != txts.len() || imgs.is_empty() {
                        return Err(Error::Data(format!(
                            "embedding file sample counts for category {} differ (img {}, txt {})",
                            id.0,
                            imgs.len(),
                            txts.len()
                        )));
                    }
                    for (i, t) in imgs.iter().zip(txts) {
                        samples.push(SampleTriplet {
                            image_feature: normalize(i),
                            text_feature: normalize(t),
                            category_id: id,
                            target_response: cat.refusal_class,
                        });
                    }
                }
                None => samples.extend((0..cfg.samples_per_category).map(|_| draw(&mut train_rng))),
            }
            heldout.extend((0..cfg.heldout_per_category()).map(|_| draw(&mut heldout_rng)));
        }
        tasks.push(TaskSpec {
            task_index: t,
            forget_categories: forget,
            samples,
            heldout,
        });
    }

    // Retain pool: half forget images with general intents, half non-forget
    // images with any intent.
    let mut retain_rng = seeds.rng("retain");
    let per_cat = cfg.heldout_per_category();
    let mut retain_pool = Vec::new();
    for cat in categories.iter().filter(|c| !c.benchmark) {
        for _ in 0..per_cat {
            let g = retain_rng.random_range(0..general_intents.len());
            retain_pool.push(SampleTriplet {
                image_feature: perturb(&mut retain_rng, &cat.image_prototype, noise),
                text_feature: perturb(&mut retain_rng, &general_intents[g], noise),
                category_id: cat.id,
                target_response: cat.answer_class,
            });
        }
    }
    let all_intents: Vec<&Vec<f64>> = intent_protos.iter().chain(&general_intents).collect();
    let n_first_half = retain_pool.len();
    for _ in 0..n_first_half {
        let b = n_forget + retain_rng.random_range(0..cfg.benchmark_categories);
        let i = retain_rng.random_range(0..all_intents.len());
        let cat = &categories[b];
        retain_pool.push(SampleTriplet {
            image_feature: perturb(&mut retain_rng, &cat.image_prototype, noise),
            text_feature: perturb(&mut retain_rng, all_intents[i], noise),
            category_id: cat.id,
            target_response: cat.answer_class,
        });
    }

    let mut bench_rng = seeds.rng("benchmark");
    let mut benchmark_pool = Vec::new();
    for cat in categories.iter().filter(|c| c.benchmark) {
        for _ in 0..per_cat {
            benchmark_pool.push(SampleTriplet {
                image_feature: perturb(&mut bench_rng, &cat.image_prototype, noise),
                text_feature: perturb(&mut bench_rng, &cat.intent_prototype, noise),
                category_id: cat.id,
                target_response: cat.answer_class,
            });
        }
    }

    Ok(World {
        config: cfg.clone(),
        categories,
        general_intents,
        tasks,
        retain_pool,
        benchmark_pool,
        lm,
        connector,
    })
}

/// Frozen-encoder concept targets: entry `m` is `cos(feature, concept_m)`.
pub fn target_similarities(feature: &[f64], concept_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    if concept_vectors.is_empty() {
        return Err(Error::Shape("empty concept list".into()));
    }
    concept_vectors
        .iter()
        .map(|c| {
            if c.len() != feature.len() {
                return Err(Error::Shape(format!(
                    "concept has dim {}, feature has dim {}",
                    c.len(),
                    feature.len()
                )));
            }
            Ok(cosine_sim(feature, c))
        })
        .collect()
}

pub fn pretrained_connect(x_img: &[f64], p: &Mat) -> Result<Vec<f64>> {
    crate::numerics::linear_forward(p, None, x_img)
}

/// `logits = visual_readout * v + text_readout * x_txt`, argmax with the
/// lowest index winning ties.
pub fn mock_decode(lm: &MockLM, visual: &[f64], text: &[f64]) -> Result<Decoded> {
    if visual.iter().chain(text).any(|v| !v.is_finite()) {
        return Err(Error::Decode("non-finite feature".into()));
    }
    if visual.len() != lm.visual_readout.cols() || text.len() != lm.text_readout.cols() {
        return Err(Error::Shape(format!(
            "decode expects features of dim {}/{}, got {}/{}",
            lm.visual_readout.cols(),
            lm.text_readout.cols(),
            visual.len(),
            text.len()
        )));
    }
    let mut logits = lm.visual_readout.matvec(visual);
    crate::numerics::add_assign(&mut logits, &lm.text_readout.matvec(text));
    let class = argmax(&logits);
    Ok(Decoded { logits, class })
}

/// Per-category mean image and text features of a task, unit-normalised and
/// ordered by category id.
pub fn category_prototypes(task: &TaskSpec) -> Result<Vec<Prototype>> {
    let mut out = Vec::with_capacity(task.forget_categories.len());
    for &id in &task.forget_categories {
        let members: Vec<&SampleTriplet> = task.samples.iter().filter(|s| s.category_id == id).collect();
        if members.is_empty() {
            return Err(Error::Data(format!(
                "task {} has no samples for category {}",
                task.task_index, id.0
            )));
        }
        let imgs: Vec<Vec<f64>> = members.iter().map(|s| s.image_feature.clone()).collect();
        let txts: Vec<Vec<f64>> = members.iter().map(|s| s.text_feature.clone()).collect();
        out.push(Prototype {
            category_id: id,
            image: normalize(&mean_vec(&imgs)),
            text: normalize(&mean_vec(&txts)),
        });
    }
    out.sort_by_key(|p| p.category_id);
    Ok(out)
}

/// Externally supplied vectors that replace generated ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub prototypes: BTreeMap<(usize, Modality), Vec<f64>>,
    pub concepts: BTreeMap<(usize, Modality), Vec<Vec<f64>>>,
    /// Per category: (image features, text features), paired by order.
    pub samples: BTreeMap<usize, (Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl EmbeddingSet {
    fn check_categories(&self, n_cat: usize) -> Result<()> {
        let ids = self
            .prototypes
            .keys()
            .map(|k| k.0)
            .chain(self.concepts.keys().map(|k| k.0))
            .chain(self.samples.keys().copied());
        for id in ids {
            if id >= n_cat {
                return Err(Error::Data(format!(
                    "embedding file refers to category {id}, world has {n_cat}"
                )));
            }
        }
        Ok(())
    }
}

/// Parses the tab-separated embedding file:
///
/// ```text
/// # kind  modality  category  vector
/// concept<TAB>img<TAB>0<TAB>0.1,0.2,...
/// ```
///
/// `kind` is `sample`, `concept` or `prototype`; `modality` is `img` or `txt`;
/// `category` is a zero-based category index. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_embeddings(text: &str, feature_dim: usize) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::Data(format!("embedding line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(at(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let modality = match fields[1] {
            "img" => Modality::Img,
            "txt" => Modality::Txt,
            other => return Err(at(format!("unknown modality `{other}`"))),
        };
        let category: usize = fields[2]
            .parse()
            .map_err(|_| at(format!("bad category `{}`", fields[2])))?;
        let vector: Vec<f64> = fields[3]
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| at(format!("bad vector: {e}")))?;
        if vector.len() != feature_dim {
            return Err(at(format!(
                "vector has dimension {}, expected {feature_dim}",
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(at("non-finite vector entry".into()));
        }
        match fields[0] {
            "prototype" => {
                set.prototypes.insert((category, modality), vector);
            }
            "concept" => set.concepts.entry((category, modality)).or_default().push(vector),
            "sample" => {
                let entry = set.samples.entry(category).or_default();
                match modality {
                    Modality::Img => entry.0.push(vector),
                    Modality::Txt => entry.1.push(vector),
                }
            }
            other => return Err(at(format!("unknown kind `{other}`"))),
        }
    }
    Ok(set)
}

pub fn load_embeddings(path: &Path, feature_dim: usize) -> Result<EmbeddingSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, feature_dim)
}
