//! Feature bundles and the linearized text encoder.
//!
//! Bundles store 32-bit values (that is what the on-disk format carries) and
//! every computation runs in 64-bit. Feature rows are renormalized once, when
//! the bundle is built, so storage drift never reaches a cosine.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Tolerance on the L2 norm of stored feature rows.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Below this a feature is treated as the zero vector.
pub(crate) const DEGENERATE_NORM: f64 = 1e-12;

/// Row-major feature rows kept in two forms: the 32-bit values as stored, and
/// the 64-bit unit-norm rows derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRows {
    stored: Vec<f32>,
    unit: Matrix,
}

impl FeatureRows {
    pub fn from_f32(rows: usize, cols: usize, stored: Vec<f32>) -> Result<Self> {
        if stored.len() != rows * cols {
            return Err(Error::config(format!(
                "expected {} values for a {rows}x{cols} feature block, got {}",
                rows * cols,
                stored.len()
            )));
        }
        let mut unit = Matrix::from_vec(rows, cols, stored.iter().map(|&x| x as f64).collect());
        for r in 0..rows {
            let row = unit.row_mut(r);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("row {r} has non-finite values")));
            }
            let n = linalg::norm(row);
            if n < DEGENERATE_NORM {
                return Err(Error::Validation(format!("row {r} is the zero vector")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self { stored, unit })
    }

    /// Quantizes to 32-bit storage first, so an in-memory bundle behaves
    /// exactly like the same bundle written to disk and read back.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::from_f32(m.rows(), m.cols(), m.as_slice().iter().map(|&x| x as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.unit.rows()
    }

    pub fn cols(&self) -> usize {
        self.unit.cols()
    }

    /// Unit-norm rows.
    pub fn unit(&self) -> &Matrix {
        &self.unit
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.unit.row(i)
    }

    pub fn stored(&self) -> &[f32] {
        &self.stored
    }

    pub fn stored_row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.stored[i * c..(i + 1) * c]
    }

    /// Largest deviation of a stored row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.rows())
            .map(|r| {
                let n: f64 = self.stored_row(r).iter().map(|&x| (x as f64) * (x as f64)).sum();
                (n.sqrt() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    /// N×D; row 0 is the unaugmented original view.
    pub image_features: FeatureRows,
}

/// A dataset snapshot: base text features, per-class prompt Jacobians and the
/// augmented image features of every test sample. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    temperature: f32,
    class_names: Vec<String>,
    metadata: Vec<String>,
    base_text: FeatureRows,
    /// One D×P matrix per class, holding 32-bit-representable values.
    jacobians: Vec<Matrix>,
    prompt_dim: usize,
    views_per_sample: usize,
    samples: Vec<Sample>,
}

impl FeatureBundle {
    /// Validates every bundle invariant. `jacobians` is C·D·P values laid out
    /// class-major, then feature dimension, then prompt coordinate.
    pub fn new(
        temperature: f32,
        class_names: Vec<String>,
        base_text: FeatureRows,
        jacobians: &[f32],
        prompt_dim: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let num_classes = base_text.rows();
        let dim = base_text.cols();
        if dim == 0 || num_classes == 0 || prompt_dim == 0 || samples.is_empty() {
            return Err(Error::Validation("D, C, P and S must all be at least 1".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if class_names.len() != num_classes {
            return Err(Error::Validation(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        if let Some(i) = class_names.iter().position(|n| n.is_empty() || n.contains('\n')) {
            return Err(Error::Validation(format!(
                "class name {i} is empty or contains a newline"
            )));
        }
        let dev = base_text.max_norm_deviation();
        if dev > UNIT_NORM_TOLERANCE {
            return Err(Error::Validation(format!(
                "text feature norm deviates from 1 by {dev:.3e}"
            )));
        }
        if jacobians.len() != num_classes * dim * prompt_dim {
            return Err(Error::config(format!(
                "expected {} jacobian values, got {}",
                num_classes * dim * prompt_dim,
                jacobians.len()
            )));
        }
        if jacobians.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("jacobian has non-finite values".into()));
        }
        let jacobians = jacobians
            .chunks_exact(dim * prompt_dim)
            .map(|block| Matrix::from_vec(dim, prompt_dim, block.iter().map(|&x| x as f64).collect()))
            .collect();

        let views = samples[0].image_features.rows();
        for (s, sample) in samples.iter().enumerate() {
            let f = &sample.image_features;
            if f.rows() != views || views == 0 || f.cols() != dim {
                return Err(Error::Validation(format!(
                    "sample {s} has a {}x{} image block, expected {views}x{dim}",
                    f.rows(),
                    f.cols()
                )));
            }
            if sample.label >= num_classes {
                return Err(Error::Validation(format!(
                    "sample {s} label {} out of range for {num_classes} classes",
                    sample.label
                )));
            }
            let dev = f.max_norm_deviation();
            if dev > UNIT_NORM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "sample {s} image feature norm deviates from 1 by {dev:.3e}"
                )));
            }
        }
        Ok(Self {
            temperature,
            class_names,
            metadata: Vec::new(),
            base_text,
            jacobians,
            prompt_dim,
            views_per_sample: views,
            samples,
        })
    }

    /// Free-form lines carried after the class names in the name table.
    pub fn with_metadata(mut self, metadata: Vec<String>) -> Result<Self> {
        if metadata.iter().any(|l| l.contains('\n')) {
            return Err(Error::Validation("metadata lines cannot contain newlines".into()));
        }
        self.metadata = metadata;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.base_text.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.base_text.rows()
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn views_per_sample(&self) -> usize {
        self.views_per_sample
    }

    pub fn temperature(&self) -> f64 {
        self.temperature as f64
    }

    pub fn stored_temperature(&self) -> f32 {
        self.temperature
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn metadata(&self) -> &[String] {
        &self.metadata
    }

    pub fn base_text(&self) -> &FeatureRows {
        &self.base_text
    }

    pub fn jacobian(&self, class: usize) -> &Matrix {
        &self.jacobians[class]
    }

    pub fn jacobians(&self) -> &[Matrix] {
        &self.jacobians
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// All jacobian values in storage order.
    pub fn jacobians_f32(&self) -> Vec<f32> {
        self.jacobians
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|&x| x as f32))
            .collect()
    }
}

/// Learnable prompt displacement plus AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub params: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl PromptState {
    pub fn new(prompt_dim: usize) -> Self {
        Self {
            params: vec![0.0; prompt_dim],
            first_moment: vec![0.0; prompt_dim],
            second_moment: vec![0.0; prompt_dim],
            step_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.params.iter_mut().for_each(|x| *x = 0.0);
        self.first_moment.iter_mut().for_each(|x| *x = 0.0);
        self.second_moment.iter_mut().for_each(|x| *x = 0.0);
        self.step_count = 0;
    }

    pub fn is_initial(&self) -> bool {
        self.step_count == 0
            && self
                .params
                .iter()
                .chain(&self.first_moment)
                .chain(&self.second_moment)
                .all(|&x| x == 0.0)
    }
}

/// Normalized class text features for one prompt value.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureSet {
    pub features: Matrix,
    /// `t_c0 + J_c p` before normalization.
    pub pre_norm: Matrix,
    pub norms: Vec<f64>,
}

impl TextFeatureSet {
    /// Normalizes arbitrary rows. Used by analysis code that edits features
    /// directly rather than through a prompt.
    pub fn from_pre_norm(pre_norm: Matrix) -> Result<Self> {
        let mut features = pre_norm.clone();
        let mut norms = Vec::with_capacity(pre_norm.rows());
        for c in 0..pre_norm.rows() {
            let n = linalg::norm(pre_norm.row(c));
            if !(n >= DEGENERATE_NORM) {
                return Err(Error::Degenerate(format!("text feature {c} has zero norm")));
            }
            features.row_mut(c).iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        Ok(Self {
            features,
            pre_norm,
            norms,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.features.column_mean()
    }
}

/// `t_c(p) = normalize(t_c0 + J_c p)` for every class.
pub fn encode_text(bundle: &FeatureBundle, prompt: &[f64]) -> Result<TextFeatureSet> {
    if prompt.len() != bundle.prompt_dim() {
        return Err(Error::config(format!(
            "prompt has {} parameters, bundle jacobians expect {}",
            prompt.len(),
            bundle.prompt_dim()
        )));
    }
    let mut pre = bundle.base_text().unit().clone();
    for c in 0..bundle.num_classes() {
        let jac = bundle.jacobian(c);
        for (d, out) in pre.row_mut(c).iter_mut().enumerate() {
            *out += linalg::dot(jac.row(d), prompt);
        }
    }
    TextFeatureSet::from_pre_norm(pre)
}

/// Pulls a cotangent on the normalized text features back to the prompt:
/// `Σ_c J_cᵀ (I − t̄_c t̄_cᵀ) upstream_c / ‖t_c0 + J_c p‖`.
pub fn encode_text_vjp(bundle: &FeatureBundle, text: &TextFeatureSet, upstream: &Matrix) -> Result<Vec<f64>> {
    if upstream.rows() != text.num_classes() || upstream.cols() != text.dim() {
        return Err(Error::config(format!(
            "upstream is {}x{}, text features are {}x{}",
            upstream.rows(),
            upstream.cols(),
            text.num_classes(),
            text.dim()
        )));
    }
    if text.dim() != bundle.dim() || text.num_classes() != bundle.num_classes() {
        return Err(Error::config("text features do not belong to this bundle"));
    }
    let mut grad = vec![0.0; bundle.prompt_dim()];
    let mut grad_pre = vec![0.0; text.dim()];
    for c in 0..text.num_classes() {
        let t = text.features.row(c);
        let g = upstream.row(c);
        let radial = linalg::dot(g, t);
        let inv_norm = 1.0 / text.norms[c];
        for ((gp, &gi), &ti) in grad_pre.iter_mut().zip(g).zip(t) {
            *gp = (gi - radial * ti) * inv_norm;
        }
        let jac = bundle.jacobian(c);
        for (d, &gp) in grad_pre.iter().enumerate() {
            if gp != 0.0 {
                linalg::axpy(gp, jac.row(d), &mut grad);
            }
        }
    }
    Ok(grad)
}

/// `z_c = τ · ⟨t̄_c, v⟩`; both sides are unit norm so this is τ times the cosine.
pub fn compute_logits(text: &TextFeatureSet, image: &[f64], tau: f64) -> Result<Vec<f64>> {
    if image.len() != text.dim() {
        return Err(Error::config(format!(
            "image feature has {} dims, text features have {}",
            image.len(),
            text.dim()
        )));
    }
    if !tau.is_finite() || image.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite image feature or temperature"));
    }
    Ok(logits_unchecked(&text.features, image, tau))
}

pub(crate) fn logits_unchecked(text: &Matrix, image: &[f64], tau: f64) -> Vec<f64> {
    text.iter_rows().map(|t| tau * linalg::dot(t, image)).collect()
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}
