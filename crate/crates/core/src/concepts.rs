//! Concept recognition and refinement.
//!
//! Each forget category owns one linear concept module per modality that
//! scores an input feature against that category's concepts. The scores of
//! all registered categories are concatenated into [`ConceptActivations`];
//! the modulator classifies the concatenated image and text activations into
//! a forget category and its per-category weights rescale the activation
//! blocks ([`refine`]).

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_grad_a, cosine_sim, linear_forward, sigmoid, softmax1, softmax_cross_entropy, try_cosine, Mat,
    Parameters,
};
use crate::world::{CategoryId, Modality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptModule {
    pub category_id: CategoryId,
    pub modality: Modality,
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl ConceptModule {
    pub fn num_concepts(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, feature: &[f64]) -> Result<Vec<f64>> {
        linear_forward(&self.weights, Some(&self.bias), feature)
    }
}

/// Concatenated per-category activation blocks for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptActivations {
    pub modality: Modality,
    pub values: Vec<f64>,
    pub block_index: Vec<(CategoryId, Range<usize>)>,
}

impl ConceptActivations {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, id: CategoryId) -> Option<&[f64]> {
        self.block_index
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, r)| &self.values[r.clone()])
    }
}

/// Activations after per-category reweighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedActivations {
    pub modality: Modality,
    pub values: Vec<f64>,
    pub block_index: Vec<(CategoryId, Range<usize>)>,
    pub weights: Vec<f64>,
}

/// Registry of concept modules, one per (category, modality), kept in
/// registration order (ascending task, then ascending category id).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    img: Vec<ConceptModule>,
    txt: Vec<ConceptModule>,
}

/// Initial scale of new concept-module weights. Exactly zero would leave the
/// cosine alignment loss without a gradient on the first task.
pub const CONCEPT_INIT_SCALE: f64 = 1e-2;

impl ConceptBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn modules(&self, modality: Modality) -> &[ConceptModule] {
        match modality {
            Modality::Img => &self.img,
            Modality::Txt => &self.txt,
        }
    }

    pub fn categories(&self) -> Vec<CategoryId> {
        self.img.iter().map(|m| m.category_id).collect()
    }

    pub fn num_categories(&self) -> usize {
        self.img.len()
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        self.img.iter().any(|m| m.category_id == id)
    }

    pub fn total_len(&self, modality: Modality) -> usize {
        self.modules(modality).iter().map(ConceptModule::num_concepts).sum()
    }

    /// Registers image and text modules for a new category.
    pub fn add_category<R: Rng + ?Sized>(
        &mut self,
        id: CategoryId,
        concepts_img: usize,
        concepts_txt: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<()> {
        if self.contains(id) {
            return Err(Error::Registry(format!("category {} already has concept modules", id.0)));
        }
        for (modality, n) in [(Modality::Img, concepts_img), (Modality::Txt, concepts_txt)] {
            let module = ConceptModule {
                category_id: id,
                modality,
                weights: Mat::gaussian(n, feature_dim, CONCEPT_INIT_SCALE, rng),
                bias: vec![0.0; n],
            };
            match modality {
                Modality::Img => self.img.push(module),
                Modality::Txt => self.txt.push(module),
            }
        }
        Ok(())
    }

    pub fn activations(&self, modality: Modality, feature: &[f64]) -> Result<ConceptActivations> {
        concept_activations(self.modules(modality), feature)
    }
}

impl Parameters for ConceptBank {
    fn slices(&self) -> Vec<&[f64]> {
        self.img
            .iter()
            .chain(&self.txt)
            .flat_map(|m| [m.weights.data(), m.bias.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.img
            .iter_mut()
            .chain(self.txt.iter_mut())
            .flat_map(|m| [m.weights.data_mut(), m.bias.as_mut_slice()])
            .collect()
    }
}

/// Runs every module of one modality on `feature` and concatenates the
/// outputs in registry order.
pub fn concept_activations(modules: &[ConceptModule], feature: &[f64]) -> Result<ConceptActivations> {
    let Some(first) = modules.first() else {
        return Err(Error::Registry("no concept modules registered".into()));
    };
    let modality = first.modality;
    let mut values = Vec::new();
    let mut block_index: Vec<(CategoryId, Range<usize>)> = Vec::with_capacity(modules.len());
    for m in modules {
        if block_index.iter().any(|(c, _)| *c == m.category_id) {
            return Err(Error::Registry(format!("duplicate concept module for category {}", m.category_id.0)));
        }
        let start = values.len();
        values.extend(m.forward(feature)?);
        block_index.push((m.category_id, start..values.len()));
    }
    Ok(ConceptActivations {
        modality,
        values,
        block_index,
    })
}

/// One training example for the alignment loss.
pub struct AlignmentItem<'a> {
    pub image_feature: &'a [f64],
    pub text_feature: &'a [f64],
    pub target_img: &'a [f64],
    pub target_txt: &'a [f64],
}

/// Outputs of the cosine alignment loss over a batch.
#[derive(Clone, Debug)]
pub struct AlignmentLoss {
    pub loss: f64,
    pub grad: ConceptBank,
    /// Batch items whose activations had zero norm in some modality.
    pub degenerate: usize,
}

/// `-sum_q mean_i cos(E_q,i, target_q,i)` and its gradient with respect to
/// every concept module.
pub fn concept_alignment_loss(bank: &ConceptBank, batch: &[AlignmentItem<'_>]) -> Result<AlignmentLoss> {
    let mut grad = bank.zeros_like();
    let mut loss = 0.0;
    let mut degenerate = 0;
    let n = batch.len().max(1) as f64;
    for item in batch {
        for modality in Modality::BOTH {
            let (feature, target) = match modality {
                Modality::Img => (item.image_feature, item.target_img),
                Modality::Txt => (item.text_feature, item.target_txt),
            };
            let e = bank.activations(modality, feature)?;
            if e.len() != target.len() {
                return Err(Error::Shape(format!(
                    "{} activations have length {}, targets {}",
                    modality.as_str(),
                    e.len(),
                    target.len()
                )));
            }
            let Some(c) = try_cosine(&e.values, target) else {
                degenerate += 1;
                continue;
            };
            loss -= c / n;
            let d_e = cosine_grad_a(&e.values, target);
            let modules = match modality {
                Modality::Img => &mut grad.img,
                Modality::Txt => &mut grad.txt,
            };
            for (module, (_, range)) in modules.iter_mut().zip(&e.block_index) {
                let d_block: Vec<f64> = d_e[range.clone()].iter().map(|v| -v / n).collect();
                module.weights.add_outer(1.0, &d_block, feature);
                crate::numerics::add_assign(&mut module.bias, &d_block);
            }
        }
    }
    Ok(AlignmentLoss { loss, grad, degenerate })
}

/// How modulator logits become per-category weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Softmax,
    Sigmoid,
}

/// Linear classifier over `[E_img; E_txt]` with one row per forget category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulatorState {
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub categories: Vec<CategoryId>,
    pub weighting: Weighting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulatorOutput {
    pub logits: Vec<f64>,
    pub m: Vec<f64>,
}

impl ModulatorState {
    pub fn new(weighting: Weighting) -> Self {
        Self {
            weights: Mat::zeros(0, 0),
            bias: Vec::new(),
            categories: Vec::new(),
            weighting,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Adds a zero row for `id` and zero input columns for its concept blocks.
    /// `img_len`/`txt_len` are the activation lengths before the new blocks.
    pub fn grow(&mut self, id: CategoryId, img_len: usize, n_img: usize, n_txt: usize) -> Result<()> {
        if self.categories.contains(&id) {
            return Err(Error::Registry(format!("modulator already has a row for category {}", id.0)));
        }
        if self.weights.cols() < img_len {
            return Err(Error::Registry("modulator narrower than the image activations".into()));
        }
        self.weights.insert_zero_cols(img_len, n_img);
        let end = self.weights.cols();
        self.weights.insert_zero_cols(end, n_txt);
        self.weights.push_zero_rows(1);
        self.bias.push(0.0);
        self.categories.push(id);
        Ok(())
    }

    pub fn row_of(&self, id: CategoryId) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| *c == id)
            .ok_or_else(|| Error::Label(format!("category {} unknown to the modulator", id.0)))
    }

    fn input(&self, e_img: &[f64], e_txt: &[f64]) -> Result<Vec<f64>> {
        if e_img.len() + e_txt.len() != self.weights.cols() {
            return Err(Error::Registry(format!(
                "modulator expects {} inputs, got {} (expand the modulator after registry growth)",
                self.weights.cols(),
                e_img.len() + e_txt.len()
            )));
        }
        Ok([e_img, e_txt].concat())
    }

    pub fn weights_from_logits(&self, logits: &[f64]) -> Vec<f64> {
        match self.weighting {
            Weighting::Softmax => softmax1(logits),
            Weighting::Sigmoid => logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

impl Parameters for ModulatorState {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.weights.data(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.data_mut(), &mut self.bias]
    }
}

pub fn modulator_forward(state: &ModulatorState, e_img: &[f64], e_txt: &[f64]) -> Result<ModulatorOutput> {
    let x = state.input(e_img, e_txt)?;
    let logits = linear_forward(&state.weights, Some(&state.bias), &x)?;
    let m = state.weights_from_logits(&logits);
    Ok(ModulatorOutput { logits, m })
}

/// Softmax cross-entropy of modulator logits against the row of the true
/// category.
pub fn modulator_loss(logits: &[f64], true_row: usize) -> Result<(f64, Vec<f64>)> {
    softmax_cross_entropy(logits, true_row)
}

/// Mean modulator cross-entropy over a batch and its gradient with respect to
/// the modulator. Activations are treated as constants.
pub fn modulator_batch_loss(
    state: &ModulatorState,
    batch: &[(&[f64], &[f64], CategoryId)],
) -> Result<(f64, ModulatorState)> {
    let mut grad = state.zeros_like();
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;
    for (e_img, e_txt, id) in batch {
        let x = state.input(e_img, e_txt)?;
        let logits = linear_forward(&state.weights, Some(&state.bias), &x)?;
        let (l, d_logits) = modulator_loss(&logits, state.row_of(*id)?)?;
        loss += l / n;
        grad.weights.add_outer(1.0 / n, &d_logits, &x);
        crate::numerics::axpy(&mut grad.bias, 1.0 / n, &d_logits);
    }
    Ok((loss, grad))
}

/// Scales block `k` of `e` by `m[k]`.
pub fn refine(e: &ConceptActivations, m: &[f64]) -> Result<RefinedActivations> {
    if m.len() != e.block_index.len() {
        return Err(Error::Shape(format!(
            "{} modulator weights for {} activation blocks",
            m.len(),
            e.block_index.len()
        )));
    }
    let mut values = e.values.clone();
    for ((_, range), &w) in e.block_index.iter().zip(m) {
        values[range.clone()].iter_mut().for_each(|v| *v *= w);
    }
    Ok(RefinedActivations {
        modality: e.modality,
        values,
        block_index: e.block_index.clone(),
        weights: m.to_vec(),
    })
}

/// Mean cosine between activations and their frozen-encoder targets.
pub fn mean_alignment(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(e, t)| cosine_sim(e, t)).sum::<f64>() / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, SeedStream};
    use proptest::prelude::*;

    fn bank(categories: usize, concepts: usize, dim: usize, seed: u64) -> ConceptBank {
        let mut rng = SeedStream::new(seed).rng("bank");
        let mut b = ConceptBank::new();
        for c in 0..categories {
            b.add_category(CategoryId(c), concepts, concepts, dim, &mut rng).unwrap();
        }
        // Move away from the tiny init so the checks exercise realistic scales.
        let flat: Vec<f64> = b.flat().iter().map(|v| v * 50.0).collect();
        b.set_flat(&flat);
        b
    }

    #[test]
    fn zero_weight_module_returns_bias() {
        let m = ConceptModule {
            category_id: CategoryId(0),
            modality: Modality::Img,
            weights: Mat::zeros(2, 3),
            bias: vec![0.5, -1.0],
        };
        let e = concept_activations(std::slice::from_ref(&m), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.values, vec![0.5, -1.0]);
    }

    #[test]
    fn block_layout() {
        let b = bank(2, 2, 3, 0);
        let e = b.activations(Modality::Img, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(e.len(), 4);
        assert_eq!(e.block_index, vec![(CategoryId(0), 0..2), (CategoryId(1), 2..4)]);
        let again = b.activations(Modality::Img, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut b = bank(1, 2, 3, 0);
        let mut rng = SeedStream::new(1).rng("x");
        assert!(matches!(
            b.add_category(CategoryId(0), 2, 2, 3, &mut rng),
            Err(Error::Registry(_))
        ));
        let mut dup = b.modules(Modality::Img).to_vec();
        dup.push(dup[0].clone());
        assert!(matches!(concept_activations(&dup, &[0.0; 3]), Err(Error::Registry(_))));
        assert!(matches!(concept_activations(&[], &[0.0; 3]), Err(Error::Registry(_))));
    }

    #[test]
    fn growth_leaves_old_blocks_untouched() {
        let mut b = bank(2, 3, 4, 3);
        let x = [0.3, -0.2, 0.9, 0.1];
        let before = b.activations(Modality::Txt, &x).unwrap();
        let mut rng = SeedStream::new(9).rng("grow");
        b.add_category(CategoryId(7), 3, 3, 4, &mut rng).unwrap();
        let after = b.activations(Modality::Txt, &x).unwrap();
        assert_eq!(&after.values[..before.len()], before.values.as_slice());
        assert_eq!(after.block(CategoryId(7)).unwrap().len(), 3);
    }

    #[test]
    fn alignment_loss_extremes() {
        // Identity-like modules reproduce their targets exactly.
        let mut b = ConceptBank::new();
        let mut rng = SeedStream::new(0).rng("x");
        b.add_category(CategoryId(0), 2, 2, 2, &mut rng).unwrap();
        for m in b.img.iter_mut().chain(b.txt.iter_mut()) {
            m.weights = Mat::identity(2);
        }
        let x = [0.6, 0.8];
        let item = AlignmentItem {
            image_feature: &x,
            text_feature: &x,
            target_img: &x,
            target_txt: &x,
        };
        let out = concept_alignment_loss(&b, &[item]).unwrap();
        assert!((out.loss + 2.0).abs() < 1e-12);
        let perp = [-0.8, 0.6];
        let item = AlignmentItem {
            image_feature: &x,
            text_feature: &x,
            target_img: &perp,
            target_txt: &perp,
        };
        assert!(concept_alignment_loss(&b, &[item]).unwrap().loss.abs() < 1e-12);
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let b = bank(2, 2, 3, 11);
        let feats = [[0.2, -0.5, 0.8], [0.9, 0.1, -0.3]];
        let targets = [[0.3, 0.1, -0.4, 0.7], [-0.2, 0.5, 0.6, 0.1]];
        let batch = || {
            vec![
                AlignmentItem {
                    image_feature: &feats[0],
                    text_feature: &feats[1],
                    target_img: &targets[0],
                    target_txt: &targets[1],
                },
                AlignmentItem {
                    image_feature: &feats[1],
                    text_feature: &feats[0],
                    target_img: &targets[1],
                    target_txt: &targets[0],
                },
            ]
        };
        let out = concept_alignment_loss(&b, &batch()).unwrap();
        let f = |p: &[f64]| {
            let mut probe = b.clone();
            probe.set_flat(p);
            concept_alignment_loss(&probe, &batch()).unwrap().loss
        };
        let report = finite_diff_check(f, &b.flat(), &out.grad.flat(), 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn modulator(n_cat: usize, n_concepts: usize, seed: u64) -> ModulatorState {
        let mut m = ModulatorState::new(Weighting::Softmax);
        let mut img_len = 0;
        for c in 0..n_cat {
            m.grow(CategoryId(c), img_len, n_concepts, n_concepts).unwrap();
            img_len += n_concepts;
        }
        let mut rng = SeedStream::new(seed).rng("mod");
        let noise = Mat::gaussian(1, m.num_params(), 0.5, &mut rng);
        m.set_flat(noise.data());
        m
    }

    #[test]
    fn modulator_forward_cases() {
        let mut single = ModulatorState::new(Weighting::Softmax);
        single.grow(CategoryId(4), 0, 2, 2).unwrap();
        assert_eq!(modulator_forward(&single, &[1.0, 2.0], &[3.0, 4.0]).unwrap().m, vec![1.0]);
        let mut zero = ModulatorState::new(Weighting::Softmax);
        for c in 0..3 {
            zero.grow(CategoryId(c), 2 * c, 2, 2).unwrap();
        }
        let out = modulator_forward(&zero, &[1.0; 6], &[1.0; 6]).unwrap();
        for v in out.m {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(
            modulator_forward(&zero, &[1.0; 4], &[1.0; 6]),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn modulator_growth_keeps_old_logits() {
        let mut m = modulator(2, 2, 5);
        let (e_img, e_txt) = ([0.1, 0.2, 0.3, 0.4], [0.5, -0.6, 0.7, 0.8]);
        let before = modulator_forward(&m, &e_img, &e_txt).unwrap().logits;
        m.grow(CategoryId(9), 4, 2, 2).unwrap();
        let after = modulator_forward(&m, &[&e_img[..], &[0.9, 0.9]].concat(), &[&e_txt[..], &[0.9, 0.9]].concat())
            .unwrap()
            .logits;
        assert_eq!(&after[..2], before.as_slice());
        assert_eq!(after[2], 0.0);
    }

    #[test]
    fn modulator_loss_cases() {
        let (l, _) = modulator_loss(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!(l < 1e-20);
        let (l, _) = modulator_loss(&[0.0; 4], 1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(modulator_loss(&[0.0; 2], 2), Err(Error::Label(_))));
    }

    #[test]
    fn modulator_gradient_matches_finite_differences() {
        let m = modulator(3, 2, 2);
        let inputs = [
            (vec![0.1, 0.5, -0.3, 0.2, 0.0, 0.4], vec![0.3, -0.1, 0.2, 0.6, -0.5, 0.1], CategoryId(1)),
            (vec![0.7, -0.2, 0.1, 0.1, 0.3, -0.4], vec![0.2, 0.2, -0.3, 0.1, 0.5, 0.3], CategoryId(2)),
        ];
        let batch: Vec<(&[f64], &[f64], CategoryId)> =
            inputs.iter().map(|(a, b, c)| (a.as_slice(), b.as_slice(), *c)).collect();
        let (_, grad) = modulator_batch_loss(&m, &batch).unwrap();
        let f = |p: &[f64]| {
            let mut probe = m.clone();
            probe.set_flat(p);
            modulator_batch_loss(&probe, &batch).unwrap().0
        };
        let report = finite_diff_check(f, &m.flat(), &grad.flat(), 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn refine_cases() {
        let b = bank(2, 2, 2, 4);
        let e = b.activations(Modality::Img, &[0.5, 0.5]).unwrap();
        let r = refine(&e, &[0.0, 1.0]).unwrap();
        assert_eq!(&r.values[..2], &[0.0, 0.0]);
        assert_eq!(&r.values[2..], &e.values[2..]);
        let half = refine(&e, &[0.5, 0.5]).unwrap();
        for (h, v) in half.values.iter().zip(&e.values) {
            assert_eq!(*h, v * 0.5);
        }
        assert!(matches!(refine(&e, &[1.0]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn refine_is_linear_in_weights(
            m1 in prop::collection::vec(-2.0f64..2.0, 3),
            m2 in prop::collection::vec(-2.0f64..2.0, 3),
            a in -3.0f64..3.0,
            c in -3.0f64..3.0,
        ) {
            let b = bank(3, 2, 3, 8);
            let e = b.activations(Modality::Txt, &[0.2, -0.4, 0.9]).unwrap();
            let mix: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + c * y).collect();
            let lhs = refine(&e, &mix).unwrap().values;
            let r1 = refine(&e, &m1).unwrap().values;
            let r2 = refine(&e, &m2).unwrap().values;
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * r1[i] + c * r2[i])).abs() < 1e-10);
            }
        }
    }
}
