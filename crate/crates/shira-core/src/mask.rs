//! Sparsity masks over weight tensors, built under a parameter budget.
//!
//! Five strategies: structured rows plus diagonal, uniform random, top-k by
//! weight magnitude, top-k by accumulated gradient magnitude over a
//! calibration set, and their product (the SNIP saliency). Masks are frozen
//! before training and never updated.

use crate::error::{Result, ShiraError};
use crate::linalg::{DenseMatrix, SeededRng};
use crate::nn::{Batch, GradientSet, LossKind, Mlp};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

/// Sorted coordinate set over an `rows x cols` shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    coords: Vec<(usize, usize)>,
}

impl Mask {
    /// Validates sortedness (strictly increasing row-major), uniqueness and
    /// bounds. Strategy constructors always produce nonempty masks; an empty
    /// mask is allowed here for plumbing (it selects nothing).
    pub fn new(rows: usize, cols: usize, coords: Vec<(usize, usize)>) -> Result<Self> {
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c) in &coords {
            if r >= rows || c >= cols {
                return Err(ShiraError::InvalidArgument(format!(
                    "mask coord ({r},{c}) out of bounds for {rows}x{cols}"
                )));
            }
            if let Some(p) = prev {
                if (r, c) <= p {
                    return Err(ShiraError::InvalidArgument(format!(
                        "mask coords not strictly increasing at ({r},{c})"
                    )));
                }
            }
            prev = Some((r, c));
        }
        Ok(Self { rows, cols, coords })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.coords.len() as f64 / (self.rows * self.cols) as f64
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.coords.binary_search(&(row, col)).is_ok()
    }

    /// Dense membership map for hot loops.
    pub fn bitmap(&self) -> Vec<bool> {
        let mut map = vec![false; self.rows * self.cols];
        for &(r, c) in &self.coords {
            map[r * self.cols + c] = true;
        }
        map
    }

    /// Count of coords shared with another mask of the same shape.
    pub fn overlap(&self, other: &Mask) -> usize {
        self.coords
            .iter()
            .filter(|c| other.coords.binary_search(c).is_ok())
            .count()
    }
}

/// Per-layer trainable fraction. Budgets round down: a layer of `n*m`
/// weights gets exactly `floor(fraction * n * m)` coords (strategies with
/// atomic units, like full rows, may deviate as documented).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskBudget {
    pub fraction: f64,
}

impl MaskBudget {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(ShiraError::InvalidArgument(format!(
                "mask fraction must lie in (0,1), got {fraction}"
            )));
        }
        Ok(Self { fraction })
    }

    /// `floor(fraction * rows * cols)`.
    pub fn count_for(&self, rows: usize, cols: usize) -> usize {
        (self.fraction * (rows * cols) as f64).floor() as usize
    }
}

/// Masks for the adapted layers of a model, keyed by layer index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelMask {
    masks: BTreeMap<usize, Mask>,
}

impl ModelMask {
    pub fn new(masks: BTreeMap<usize, Mask>) -> Self {
        Self { masks }
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &Mask)> {
        self.masks.iter().map(|(k, v)| (*k, v))
    }

    pub fn get(&self, layer: usize) -> Option<&Mask> {
        self.masks.get(&layer)
    }

    pub fn layer_count(&self) -> usize {
        self.masks.len()
    }

    pub fn total_coords(&self) -> usize {
        self.masks.values().map(Mask::len).sum()
    }

    /// Every mask shape must match its layer's weight shape.
    pub fn validate_against(&self, model: &Mlp) -> Result<()> {
        for (&layer, mask) in &self.masks {
            let Some(l) = model.layers().get(layer) else {
                return Err(ShiraError::MaskMismatch(format!(
                    "mask references layer {layer}, model has {}",
                    model.layer_count()
                )));
            };
            if (mask.rows(), mask.cols()) != l.weight.shape() {
                return Err(ShiraError::MaskMismatch(format!(
                    "layer {layer}: mask {}x{} vs weight {}",
                    mask.rows(),
                    mask.cols(),
                    l.weight.shape_string()
                )));
            }
        }
        Ok(())
    }
}

/// Mask construction strategy tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Struct,
    Rand,
    Wm,
    Grad,
    Snip,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Struct => "struct",
            MaskStrategy::Rand => "rand",
            MaskStrategy::Wm => "wm",
            MaskStrategy::Grad => "grad",
            MaskStrategy::Snip => "snip",
        }
    }
}

/// Structured mask: `k` evenly spaced full rows plus (optionally) the main
/// diagonal, with `k = max(1, floor((budget*n*m - diag_len) / m))` and rows
/// spaced by `floor(n/k)` starting at row 0. Rows are atomic, so the total
/// count may exceed the exact budget by less than one row.
pub fn make_struct_mask(
    rows: usize,
    cols: usize,
    budget: MaskBudget,
    include_diagonal: bool,
) -> Result<Mask> {
    let budget_count = budget.count_for(rows, cols);
    let diag_len = if include_diagonal { rows.min(cols) } else { 0 };
    if include_diagonal && budget_count < diag_len {
        return Err(ShiraError::InvalidArgument(format!(
            "budget {} is below the diagonal length {}; raise the fraction or set include_diagonal=false",
            budget_count, diag_len
        )));
    }
    let k = (((budget_count - diag_len) / cols).max(1)).min(rows);
    let stride = (rows / k).max(1);

    let mut bitmap = vec![false; rows * cols];
    for i in 0..k {
        let r = i * stride;
        for c in 0..cols {
            bitmap[r * cols + c] = true;
        }
    }
    for d in 0..diag_len {
        bitmap[d * cols + d] = true;
    }
    let coords = bitmap_coords(&bitmap, cols);
    Mask::new(rows, cols, coords)
}

/// Number of full rows a structured mask selects for this shape/budget.
pub fn struct_row_count(rows: usize, cols: usize, budget: MaskBudget, include_diagonal: bool) -> usize {
    let budget_count = budget.count_for(rows, cols);
    let diag_len = if include_diagonal { rows.min(cols) } else { 0 };
    ((budget_count.saturating_sub(diag_len) / cols).max(1)).min(rows)
}

/// Exactly `floor(fraction*n*m)` coords drawn uniformly without
/// replacement; deterministic for a fixed seed state.
pub fn make_random_mask(
    rows: usize,
    cols: usize,
    budget: MaskBudget,
    rng: &mut SeededRng,
) -> Result<Mask> {
    let k = budget.count_for(rows, cols);
    if k == 0 {
        return Err(ShiraError::InvalidArgument(format!(
            "budget selects zero coords for {rows}x{cols}"
        )));
    }
    let total = (rows * cols) as u64;
    let mut seen = HashSet::with_capacity(k * 2);
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let idx = rng.next_index(total);
        if seen.insert(idx) {
            picked.push(idx);
        }
    }
    picked.sort_unstable();
    let coords = picked
        .into_iter()
        .map(|i| ((i / cols as u64) as usize, (i % cols as u64) as usize))
        .collect();
    Mask::new(rows, cols, coords)
}

/// Top-k coords of `scores` (descending), ties broken by the lower
/// row-major linear index. Returned sorted row-major.
fn top_k_coords(scores: &DenseMatrix, k: usize) -> Vec<(usize, usize)> {
    let cols = scores.cols();
    let mut order: Vec<usize> = (0..scores.as_slice().len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores.as_slice()[b]
            .partial_cmp(&scores.as_slice()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| (i / cols, i % cols)).collect()
}

/// Top-k entries by absolute weight magnitude.
pub fn make_wm_mask(weight: &DenseMatrix, budget: MaskBudget) -> Result<Mask> {
    let k = budget.count_for(weight.rows(), weight.cols());
    if k == 0 {
        return Err(ShiraError::InvalidArgument(
            "budget selects zero coords".into(),
        ));
    }
    let scores = DenseMatrix::new(
        weight.rows(),
        weight.cols(),
        weight.as_slice().iter().map(|v| v.abs()).collect(),
    )?;
    Mask::new(weight.rows(), weight.cols(), top_k_coords(&scores, k))
}

/// Absolute gradients summed entrywise over the calibration batches
/// (magnitudes are summed, not signed values, so opposing signs cannot
/// cancel a consistently active entry).
pub fn accumulate_abs_gradients(
    model: &Mlp,
    calib: &[Batch],
    loss_kind: LossKind,
) -> Result<Vec<DenseMatrix>> {
    if calib.is_empty() {
        return Err(ShiraError::InvalidArgument(
            "calibration set must be non-empty".into(),
        ));
    }
    let mut acc: Vec<DenseMatrix> = model
        .layers()
        .iter()
        .map(|l| DenseMatrix::zeros(l.weight.rows(), l.weight.cols()))
        .collect();
    for batch in calib {
        let (_, cache) = model.forward(&batch.inputs)?;
        let grads: GradientSet = model.backward(&cache, &batch.targets, loss_kind)?;
        for (a, g) in acc.iter_mut().zip(&grads.weights) {
            for (slot, &v) in a.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *slot += v.abs();
            }
        }
    }
    Ok(acc)
}

fn adapted_layer_list(model: &Mlp, layers: Option<&[usize]>) -> Vec<usize> {
    match layers {
        Some(ls) => ls.to_vec(),
        None => (0..model.layer_count()).collect(),
    }
}

/// Per-layer top-k by accumulated gradient magnitude.
pub fn make_grad_mask(
    model: &Mlp,
    calib: &[Batch],
    budget: MaskBudget,
    loss_kind: LossKind,
    layers: Option<&[usize]>,
) -> Result<ModelMask> {
    let acc = accumulate_abs_gradients(model, calib, loss_kind)?;
    let mut masks = BTreeMap::new();
    for layer in adapted_layer_list(model, layers) {
        let scores = &acc[layer];
        let k = budget.count_for(scores.rows(), scores.cols());
        masks.insert(
            layer,
            Mask::new(scores.rows(), scores.cols(), top_k_coords(scores, k))?,
        );
    }
    Ok(ModelMask::new(masks))
}

/// Per-layer top-k of `|w| * accumulated |grad|` (the SNIP saliency).
pub fn make_snip_mask(
    model: &Mlp,
    calib: &[Batch],
    budget: MaskBudget,
    loss_kind: LossKind,
    layers: Option<&[usize]>,
) -> Result<ModelMask> {
    let acc = accumulate_abs_gradients(model, calib, loss_kind)?;
    let mut masks = BTreeMap::new();
    for layer in adapted_layer_list(model, layers) {
        let w = &model.layers()[layer].weight;
        let scores = DenseMatrix::new(
            w.rows(),
            w.cols(),
            w.as_slice()
                .iter()
                .zip(acc[layer].as_slice())
                .map(|(wv, gv)| wv.abs() * gv)
                .collect(),
        )?;
        let k = budget.count_for(w.rows(), w.cols());
        masks.insert(layer, Mask::new(w.rows(), w.cols(), top_k_coords(&scores, k))?);
    }
    Ok(ModelMask::new(masks))
}

/// Builds a [`ModelMask`] for the chosen strategy over the adapted layers.
/// `calib` is required for `Grad`/`Snip`.
pub fn build_model_mask(
    model: &Mlp,
    strategy: MaskStrategy,
    budget: MaskBudget,
    include_diagonal: bool,
    seed: u64,
    calib: Option<&[Batch]>,
    loss_kind: LossKind,
    layers: Option<&[usize]>,
) -> Result<ModelMask> {
    match strategy {
        MaskStrategy::Grad | MaskStrategy::Snip => {
            let calib = calib.ok_or_else(|| {
                ShiraError::InvalidArgument(format!(
                    "strategy '{}' needs calibration batches",
                    strategy.name()
                ))
            })?;
            if strategy == MaskStrategy::Grad {
                make_grad_mask(model, calib, budget, loss_kind, layers)
            } else {
                make_snip_mask(model, calib, budget, loss_kind, layers)
            }
        }
        _ => {
            let mut masks = BTreeMap::new();
            let mut rng = SeededRng::new(seed);
            for layer in adapted_layer_list(model, layers) {
                let w = &model.layers()[layer].weight;
                let mask = match strategy {
                    MaskStrategy::Struct => {
                        make_struct_mask(w.rows(), w.cols(), budget, include_diagonal)?
                    }
                    MaskStrategy::Rand => make_random_mask(w.rows(), w.cols(), budget, &mut rng)?,
                    MaskStrategy::Wm => make_wm_mask(w, budget)?,
                    MaskStrategy::Grad | MaskStrategy::Snip => unreachable!(),
                };
                masks.insert(layer, mask);
            }
            Ok(ModelMask::new(masks))
        }
    }
}

fn bitmap_coords(bitmap: &[bool], cols: usize) -> Vec<(usize, usize)> {
    bitmap
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| (i / cols, i % cols))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numerical_rank, rand_matrix, Dist};
    use crate::nn::{Activation, Targets};

    #[test]
    fn struct_mask_hand_enumerated_8x8() {
        // fraction 0.25 on 8x8: budget 16, diagonal 8, k = floor(8/8) = 1
        // row, so diag (8) + row 0 (8) - overlap (1) = 15 coords.
        let budget = MaskBudget::new(0.25).unwrap();
        let mask = make_struct_mask(8, 8, budget, true).unwrap();
        assert_eq!(mask.len(), 15);
        let mut expected: Vec<(usize, usize)> = (0..8).map(|c| (0, c)).collect();
        for d in 1..8 {
            expected.push((d, d));
        }
        expected.sort_unstable();
        assert_eq!(mask.coords(), expected.as_slice());
    }

    #[test]
    fn struct_mask_single_row_no_diagonal() {
        let budget = MaskBudget::new(0.25).unwrap();
        let mask = make_struct_mask(4, 4, budget, false).unwrap();
        assert_eq!(mask.coords(), &[(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn struct_mask_budget_below_diagonal_errors() {
        let budget = MaskBudget::new(0.05).unwrap();
        let err = make_struct_mask(8, 8, budget, true);
        assert!(err.is_err());
        // Same budget works once the diagonal requirement is dropped.
        assert!(make_struct_mask(8, 8, budget, false).is_ok());
    }

    #[test]
    fn diagonal_only_support_admits_full_rank_delta() {
        let budget = MaskBudget::new(0.2).unwrap();
        let mask = make_struct_mask(8, 8, budget, true).unwrap();
        let mut delta = DenseMatrix::zeros(8, 8);
        for &(r, c) in mask.coords() {
            // Distinct nonzero values on the whole support.
            delta.set(r, c, (r * 8 + c + 1) as f64 * 0.1);
        }
        assert_eq!(numerical_rank(&delta, 1e-9).unwrap(), 8);
    }

    #[test]
    fn random_mask_exact_count_4096() {
        let budget = MaskBudget::new(0.01).unwrap();
        let mut rng = SeededRng::new(77);
        let mask = make_random_mask(4096, 4096, budget, &mut rng).unwrap();
        assert_eq!(mask.len(), 167_772);
    }

    #[test]
    fn random_mask_deterministic_per_seed() {
        let budget = MaskBudget::new(0.02).unwrap();
        let a = make_random_mask(64, 64, budget, &mut SeededRng::new(5)).unwrap();
        let b = make_random_mask(64, 64, budget, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_mask_overlap_matches_binomial_expectation() {
        // Two independent masks at density d overlap at rate ~d^2; check a
        // fixed pair against the binomial 3-sigma band.
        let budget = MaskBudget::new(0.05).unwrap();
        let a = make_random_mask(128, 128, budget, &mut SeededRng::new(101)).unwrap();
        let b = make_random_mask(128, 128, budget, &mut SeededRng::new(202)).unwrap();
        let nm = 128.0 * 128.0;
        let p = (a.len() as f64 / nm) * (b.len() as f64 / nm);
        let expected = p * nm;
        let sigma = (nm * p * (1.0 - p)).sqrt();
        let got = a.overlap(&b) as f64;
        assert!(
            (got - expected).abs() <= 3.0 * sigma,
            "overlap {got} vs expected {expected} (3s = {:.2})",
            3.0 * sigma
        );
    }

    #[test]
    fn wm_mask_hand_case_and_tie_break() {
        let w = DenseMatrix::new(2, 2, vec![1.0, -5.0, 3.0, 2.0]).unwrap();
        let budget = MaskBudget::new(0.5).unwrap();
        let mask = make_wm_mask(&w, budget).unwrap();
        assert_eq!(mask.coords(), &[(0, 1), (1, 0)]);

        // All-equal magnitudes: the first k row-major indices win.
        let w = DenseMatrix::new(2, 3, vec![2.0; 6]).unwrap();
        let budget = MaskBudget::new(0.5).unwrap();
        let mask = make_wm_mask(&w, budget).unwrap();
        assert_eq!(mask.coords(), &[(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn wm_mask_matches_sort_oracle() {
        let mut rng = SeededRng::new(300);
        let w = rand_matrix(&mut rng, 17, 13, Dist::Gaussian { std: 1.0 });
        let budget = MaskBudget::new(0.1).unwrap();
        let mask = make_wm_mask(&w, budget).unwrap();
        let k = budget.count_for(17, 13);
        assert_eq!(mask.len(), k);
        // Oracle: full sort of (|w|, idx) pairs.
        let mut pairs: Vec<(f64, usize)> = w
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| (v.abs(), i))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want: Vec<usize> = pairs.into_iter().take(k).map(|(_, i)| i).collect();
        want.sort_unstable();
        let got: Vec<usize> = mask.coords().iter().map(|&(r, c)| r * 13 + c).collect();
        assert_eq!(got, want);
    }

    fn calib_model_and_batches(seed: u64) -> (Mlp, Vec<Batch>) {
        let mut rng = SeededRng::new(seed);
        let model = Mlp::random_classifier(6, &[10, 8], 5, Activation::Relu, &mut rng);
        let batches = (0..3)
            .map(|i| {
                let inputs = rand_matrix(&mut rng, 12, 6, Dist::Gaussian { std: 1.0 });
                let labels = (0..12).map(|j| (i + j) % 5).collect();
                Batch::new(inputs, Targets::Classes(labels)).unwrap()
            })
            .collect();
        (model, batches)
    }

    #[test]
    fn grad_mask_single_batch_is_topk_of_abs_grad() {
        let (model, batches) = calib_model_and_batches(400);
        let budget = MaskBudget::new(0.05).unwrap();
        let mask = make_grad_mask(&model, &batches[..1], budget, LossKind::CrossEntropy, None).unwrap();

        let (_, cache) = model.forward(&batches[0].inputs).unwrap();
        let grads = model
            .backward(&cache, &batches[0].targets, LossKind::CrossEntropy)
            .unwrap();
        for (layer, m) in mask.layers() {
            let g = &grads.weights[layer];
            let scores = DenseMatrix::new(
                g.rows(),
                g.cols(),
                g.as_slice().iter().map(|v| v.abs()).collect(),
            )
            .unwrap();
            let want = top_k_coords(&scores, m.len());
            assert_eq!(m.coords(), want.as_slice(), "layer {layer}");
        }
    }

    #[test]
    fn grad_mask_deprioritizes_absent_classes() {
        // Calibration data never contains classes 3 and 4: their output-head
        // rows get much less gradient mass than the present classes' rows.
        let mut rng = SeededRng::new(500);
        let model = Mlp::random_classifier(6, &[10], 5, Activation::Tanh, &mut rng);
        let inputs = rand_matrix(&mut rng, 32, 6, Dist::Gaussian { std: 1.0 });
        let labels = (0..32).map(|j| j % 3).collect();
        let calib = vec![Batch::new(inputs, Targets::Classes(labels)).unwrap()];
        let acc = accumulate_abs_gradients(&model, &calib, LossKind::CrossEntropy).unwrap();
        let head = &acc[1];
        let row_mass = |r: usize| head.row(r).iter().sum::<f64>() / head.cols() as f64;
        let present = (0..3).map(row_mass).sum::<f64>() / 3.0;
        let absent = (3..5).map(row_mass).sum::<f64>() / 2.0;
        assert!(
            absent < present,
            "absent-class rows should carry less gradient mass ({absent} vs {present})"
        );
    }

    #[test]
    fn grad_mask_invariant_under_duplicated_calibration() {
        let (model, batches) = calib_model_and_batches(600);
        let budget = MaskBudget::new(0.03).unwrap();
        let once = make_grad_mask(&model, &batches[..1], budget, LossKind::CrossEntropy, None).unwrap();
        let doubled: Vec<Batch> = vec![batches[0].clone(), batches[0].clone()];
        let twice = make_grad_mask(&model, &doubled, budget, LossKind::CrossEntropy, None).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn snip_zero_weights_degenerate_tie_break() {
        let mut rng = SeededRng::new(700);
        let mut model = Mlp::random_classifier(4, &[6], 3, Activation::Relu, &mut rng);
        for layer in model.layers_mut() {
            for v in layer.weight.as_mut_slice() {
                *v = 0.0;
            }
        }
        let inputs = rand_matrix(&mut rng, 8, 4, Dist::Gaussian { std: 1.0 });
        let calib = vec![Batch::new(inputs, Targets::Classes(vec![0, 1, 2, 0, 1, 2, 0, 1])).unwrap()];
        let budget = MaskBudget::new(0.25).unwrap();
        let mask = make_snip_mask(&model, &calib, budget, LossKind::CrossEntropy, None).unwrap();
        for (layer, m) in mask.layers() {
            let w = &model.layers()[layer].weight;
            let k = budget.count_for(w.rows(), w.cols());
            let want: Vec<(usize, usize)> = (0..k).map(|i| (i / w.cols(), i % w.cols())).collect();
            assert_eq!(m.coords(), want.as_slice(), "layer {layer}");
        }
    }

    #[test]
    fn snip_equals_grad_when_weights_uniform() {
        let mut rng = SeededRng::new(800);
        let mut model = Mlp::random_classifier(4, &[6], 3, Activation::Tanh, &mut rng);
        for layer in model.layers_mut() {
            for v in layer.weight.as_mut_slice() {
                *v = 0.5;
            }
        }
        let inputs = rand_matrix(&mut rng, 16, 4, Dist::Gaussian { std: 1.0 });
        let calib = vec![Batch::new(inputs, Targets::Classes((0..16).map(|i| i % 3).collect())).unwrap()];
        let budget = MaskBudget::new(0.1).unwrap();
        let grad = make_grad_mask(&model, &calib, budget, LossKind::CrossEntropy, None).unwrap();
        let snip = make_snip_mask(&model, &calib, budget, LossKind::CrossEntropy, None).unwrap();
        assert_eq!(grad, snip);
    }

    #[test]
    fn snip_matches_brute_force_oracle() {
        let (model, batches) = calib_model_and_batches(900);
        let budget = MaskBudget::new(0.07).unwrap();
        let mask = make_snip_mask(&model, &batches, budget, LossKind::CrossEntropy, None).unwrap();

        // Brute force: independently accumulate and score every entry.
        let mut acc: Vec<DenseMatrix> = model
            .layers()
            .iter()
            .map(|l| DenseMatrix::zeros(l.weight.rows(), l.weight.cols()))
            .collect();
        for b in &batches {
            let (_, cache) = model.forward(&b.inputs).unwrap();
            let g = model.backward(&cache, &b.targets, LossKind::CrossEntropy).unwrap();
            for (a, gw) in acc.iter_mut().zip(&g.weights) {
                for (s, &v) in a.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                    *s += v.abs();
                }
            }
        }
        for (layer, m) in mask.layers() {
            let w = &model.layers()[layer].weight;
            let mut pairs: Vec<(f64, usize)> = w
                .as_slice()
                .iter()
                .zip(acc[layer].as_slice())
                .enumerate()
                .map(|(i, (wv, gv))| (wv.abs() * gv, i))
                .collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let k = budget.count_for(w.rows(), w.cols());
            let mut want: Vec<usize> = pairs.into_iter().take(k).map(|(_, i)| i).collect();
            want.sort_unstable();
            let got: Vec<usize> = m.coords().iter().map(|&(r, c)| r * w.cols() + c).collect();
            assert_eq!(got, want, "layer {layer}");
        }
    }

    #[test]
    fn budget_exactness_across_strategies() {
        let (model, batches) = calib_model_and_batches(1000);
        let budget = MaskBudget::new(0.04).unwrap();
        for strategy in [MaskStrategy::Rand, MaskStrategy::Wm, MaskStrategy::Grad, MaskStrategy::Snip] {
            let mask = build_model_mask(
                &model,
                strategy,
                budget,
                true,
                9,
                Some(&batches),
                LossKind::CrossEntropy,
                None,
            )
            .unwrap();
            for (layer, m) in mask.layers() {
                let w = &model.layers()[layer].weight;
                assert_eq!(
                    m.len(),
                    budget.count_for(w.rows(), w.cols()),
                    "{} layer {layer}",
                    strategy.name()
                );
            }
        }
    }

    #[test]
    fn grad_strategy_without_calib_is_an_error() {
        let (model, _) = calib_model_and_batches(1100);
        let budget = MaskBudget::new(0.02).unwrap();
        let err = build_model_mask(
            &model,
            MaskStrategy::Grad,
            budget,
            true,
            9,
            None,
            LossKind::CrossEntropy,
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn mask_new_rejects_unsorted_and_out_of_bounds() {
        assert!(Mask::new(4, 4, vec![(1, 0), (0, 1)]).is_err());
        assert!(Mask::new(4, 4, vec![(0, 1), (0, 1)]).is_err());
        assert!(Mask::new(4, 4, vec![(0, 4)]).is_err());
    }
}
