//! Adapter value types: the coordinate-indexed sparse delta and the
//! low-rank factor pair, plus extraction and alpha-scaled application.
//!
//! A sparse adapter stores deltas (`S = W_new - W`), not absolute weights,
//! so one adapter file serves any compatible base checkpoint and the
//! runtime scale `alpha` acts on `S` directly: `W_new = W + alpha*S`.

use crate::error::{Result, ShiraError};
use crate::linalg::{add_scaled, matmul, DenseMatrix};
use crate::mask::Mask;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Provenance carried alongside adapter values. Advisory: nothing in the
/// engine needs it for correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    /// Mask strategy tag ("struct", "rand", "wm", "grad", "snip", "lora",
    /// "fused", or "unknown").
    pub strategy: String,
    /// Density (sparse) or rank (LoRA) at creation time.
    #[serde(default)]
    pub density_or_rank: f64,
    /// Index of the layer this adapter was extracted from.
    #[serde(default)]
    pub source_layer: Option<usize>,
    /// Digest of the training configuration that produced the adapter.
    #[serde(default)]
    pub train_config_digest: Option<String>,
    /// For fused adapters: the strategy tags of the sources.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

impl AdapterMeta {
    pub fn tagged(strategy: &str) -> Self {
        AdapterMeta {
            strategy: strategy.to_string(),
            ..Default::default()
        }
    }
}

/// Sparse delta over one weight tensor: sorted coords with one value each.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdapter {
    rows: usize,
    cols: usize,
    coords: Vec<(usize, usize)>,
    values: Vec<f64>,
    pub alpha_default: f64,
    pub meta: AdapterMeta,
}

impl SparseAdapter {
    pub fn new(
        rows: usize,
        cols: usize,
        coords: Vec<(usize, usize)>,
        values: Vec<f64>,
        alpha_default: f64,
        meta: AdapterMeta,
    ) -> Result<Self> {
        if values.len() != coords.len() {
            return Err(ShiraError::InvalidArgument(format!(
                "coords/values length mismatch: {} vs {}",
                coords.len(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(ShiraError::InvalidArgument(
                "adapter values must be finite".into(),
            ));
        }
        // Reuse the mask validator for sortedness/bounds.
        Mask::new(rows, cols, coords.clone())?;
        Ok(Self {
            rows,
            cols,
            coords,
            values,
            alpha_default,
            meta,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.coords.len()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / (self.rows * self.cols) as f64
    }

    /// Dense delta at alpha = 1.
    pub fn delta_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (&(r, c), &v) in self.coords.iter().zip(&self.values) {
            out.set(r, c, v);
        }
        out
    }
}

/// Low-rank factor pair `a (n x r) * b (r x m)` with a stored scale; the
/// fused delta is `alpha_lora * a * b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: DenseMatrix,
    b: DenseMatrix,
    pub alpha_lora: f64,
    pub meta: AdapterMeta,
}

impl LoraAdapter {
    pub fn new(a: DenseMatrix, b: DenseMatrix, alpha_lora: f64, meta: AdapterMeta) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(ShiraError::shape(
                "LoraAdapter::new",
                a.shape_string(),
                b.shape_string(),
            ));
        }
        let r = a.cols();
        if r > a.rows().min(b.cols()) {
            return Err(ShiraError::InvalidArgument(format!(
                "rank {r} exceeds min dimension {}",
                a.rows().min(b.cols())
            )));
        }
        Ok(Self { a, b, alpha_lora, meta })
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Target weight shape `(n, m)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    /// Dense delta at alpha = 1 (the stored `alpha_lora` is included).
    pub fn delta_dense(&self) -> DenseMatrix {
        let ab = matmul(&self.a, &self.b).expect("factor shapes verified at construction");
        let zero = DenseMatrix::zeros(self.a.rows(), self.b.cols());
        add_scaled(&zero, &ab, self.alpha_lora).unwrap()
    }
}

/// Per-layer adapters for a model; the two kinds never mix in one value.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelAdapter {
    Sparse(BTreeMap<usize, SparseAdapter>),
    Lora(BTreeMap<usize, LoraAdapter>),
}

impl ModelAdapter {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelAdapter::Sparse(_) => "sparse",
            ModelAdapter::Lora(_) => "lora",
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            ModelAdapter::Sparse(m) => m.len(),
            ModelAdapter::Lora(m) => m.len(),
        }
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        match self {
            ModelAdapter::Sparse(m) => m.keys().copied().collect(),
            ModelAdapter::Lora(m) => m.keys().copied().collect(),
        }
    }

    pub fn as_sparse(&self) -> Result<&BTreeMap<usize, SparseAdapter>> {
        match self {
            ModelAdapter::Sparse(m) => Ok(m),
            ModelAdapter::Lora(_) => Err(ShiraError::KindMismatch(
                "expected a sparse adapter, found lora".into(),
            )),
        }
    }

    pub fn as_lora(&self) -> Result<&BTreeMap<usize, LoraAdapter>> {
        match self {
            ModelAdapter::Lora(m) => Ok(m),
            ModelAdapter::Sparse(_) => Err(ShiraError::KindMismatch(
                "expected a lora adapter, found sparse".into(),
            )),
        }
    }

    /// Total stored parameter count: nnz for sparse, `r*(n+m)` for LoRA.
    pub fn stored_params(&self) -> usize {
        match self {
            ModelAdapter::Sparse(m) => m.values().map(SparseAdapter::nnz).sum(),
            ModelAdapter::Lora(m) => m
                .values()
                .map(|l| l.rank() * (l.shape().0 + l.shape().1))
                .sum(),
        }
    }
}

/// Extracts the sparse delta `w_new - w_base` on the mask support. Any
/// off-mask difference means gradient masking was broken somewhere, so it
/// is an integrity error, not something to silently truncate.
pub fn extract_sparse(
    w_base: &DenseMatrix,
    w_new: &DenseMatrix,
    mask: &Mask,
) -> Result<SparseAdapter> {
    if w_base.shape() != w_new.shape() {
        return Err(ShiraError::shape(
            "extract_sparse",
            w_base.shape_string(),
            w_new.shape_string(),
        ));
    }
    if (mask.rows(), mask.cols()) != w_base.shape() {
        return Err(ShiraError::shape(
            "extract_sparse(mask)",
            format!("{}x{}", mask.rows(), mask.cols()),
            w_base.shape_string(),
        ));
    }
    let on = mask.bitmap();
    let cols = w_base.cols();
    for (i, ((b, n), on_mask)) in w_base
        .as_slice()
        .iter()
        .zip(w_new.as_slice())
        .zip(&on)
        .enumerate()
    {
        if !on_mask && b != n {
            return Err(ShiraError::OffMaskDrift {
                layer: 0,
                row: i / cols,
                col: i % cols,
                magnitude: (n - b).abs(),
            });
        }
    }
    let values = mask
        .coords()
        .iter()
        .map(|&(r, c)| w_new.get(r, c) - w_base.get(r, c))
        .collect();
    SparseAdapter::new(
        w_base.rows(),
        w_base.cols(),
        mask.coords().to_vec(),
        values,
        1.0,
        AdapterMeta::default(),
    )
}

/// `w' = w` except `w'[c] = w[c] + alpha * value` at adapter coords. With
/// `alpha == 0` the input is returned bit-identical.
pub fn apply_sparse(w: &DenseMatrix, adapter: &SparseAdapter, alpha: f64) -> Result<DenseMatrix> {
    if w.shape() != adapter.shape() {
        return Err(ShiraError::shape(
            "apply_sparse",
            w.shape_string(),
            format!("{}x{}", adapter.rows(), adapter.cols()),
        ));
    }
    let mut out = w.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    for (&(r, c), &v) in adapter.coords().iter().zip(adapter.values()) {
        let cur = out.get(r, c);
        out.set(r, c, cur + alpha * v);
    }
    Ok(out)
}

/// Dense fuse: `w + alpha * alpha_lora * (a*b)`. Writes the whole tensor.
pub fn fuse_lora(w: &DenseMatrix, adapter: &LoraAdapter, alpha: f64) -> Result<DenseMatrix> {
    if w.shape() != adapter.shape() {
        return Err(ShiraError::shape(
            "fuse_lora",
            w.shape_string(),
            format!("{}x{}", adapter.shape().0, adapter.shape().1),
        ));
    }
    let ab = matmul(adapter.a(), adapter.b())?;
    add_scaled(w, &ab, alpha * adapter.alpha_lora)
}
