//! Dominant-dimension and modality-gap diagnostics.
//!
//! * per-dimension sensitivity: KL between the prediction with one feature
//!   dimension masked (zeroed, then renormalized) and the original prediction;
//! * dominant dimension detection by mean absolute value;
//! * mean-replacement ablation of the text- or image-dominant dimension;
//! * geometry: ATFD, logit range, centroid gap, mean cross-modal cosine.

use serde::{Deserialize, Serialize};

use crate::adaptation::{run_dataset, AdaptConfig, RunOutput, SampleOutcome};
use crate::error::{Error, Result};
use crate::feature_model::{
    encode_text, logits_unchecked, softmax, FeatureBundle, FeatureRows, Sample, TextFeatureSet, DEGENERATE_NORM,
};
use crate::linalg::{self, Matrix};
use crate::objectives::{self, kld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DominantTarget {
    Tdd,
    Idd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryDiagnostics {
    pub atfd: f64,
    pub mean_logit_range: f64,
    pub mean_logit_value: f64,
    pub modality_gap_l2: f64,
    pub mean_cross_cosine: f64,
}

impl GeometryDiagnostics {
    /// Aggregates per-sample adapted geometry: means over samples, with the
    /// modality gap taken between the original-view centroid and the mean of
    /// the per-sample text centroids.
    pub(crate) fn from_outcomes(bundle: &FeatureBundle, outcomes: &[SampleOutcome]) -> Self {
        let n = outcomes.len().max(1) as f64;
        let mut text_centroid = vec![0.0; bundle.dim()];
        for o in outcomes {
            linalg::axpy(1.0 / n, &o.text_centroid, &mut text_centroid);
        }
        let mean_cross_cosine = outcomes.iter().map(|o| o.mean_cross_cosine).sum::<f64>() / n;
        Self {
            atfd: outcomes.iter().map(|o| o.atfd).sum::<f64>() / n,
            mean_logit_range: outcomes.iter().map(|o| o.record.logit_range()).sum::<f64>() / n,
            mean_logit_value: outcomes.iter().map(|o| o.record.logit_mean).sum::<f64>() / n,
            modality_gap_l2: linalg::distance(&original_view_centroid(bundle), &text_centroid),
            mean_cross_cosine,
        }
    }
}

fn original_view_centroid(bundle: &FeatureBundle) -> Vec<f64> {
    let n = bundle.num_samples() as f64;
    let mut c = vec![0.0; bundle.dim()];
    for s in bundle.samples() {
        linalg::axpy(1.0 / n, s.image_features.row(0), &mut c);
    }
    c
}

/// Cross-modal geometry for one fixed set of text features against every
/// sample's original view.
pub fn geometry_report(bundle: &FeatureBundle, text: &TextFeatureSet, tau: f64) -> Result<GeometryDiagnostics> {
    if text.dim() != bundle.dim() {
        return Err(Error::config("text features do not match bundle dimension"));
    }
    let n = bundle.num_samples() as f64;
    let (mut range, mut logit_mean, mut cosine) = (0.0, 0.0, 0.0);
    for s in bundle.samples() {
        let v = s.image_features.row(0);
        let cos: Vec<f64> = text.features.iter_rows().map(|t| linalg::dot(t, v)).collect();
        let z: Vec<f64> = cos.iter().map(|c| tau * c).collect();
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        range += hi - lo;
        logit_mean += z.iter().sum::<f64>() / z.len() as f64;
        cosine += cos.iter().sum::<f64>() / cos.len() as f64;
    }
    Ok(GeometryDiagnostics {
        atfd: atfd(text),
        mean_logit_range: range / n,
        mean_logit_value: logit_mean / n,
        modality_gap_l2: linalg::distance(&original_view_centroid(bundle), &text.centroid()),
        mean_cross_cosine: cosine / n,
    })
}

/// Average text feature dispersion; same arithmetic as the C-TPT term.
pub fn atfd(text: &TextFeatureSet) -> f64 {
    objectives::ctpt_term(text)
}

/// `KL(p_m ‖ q)` where `q` is the original prediction and `p_m` the prediction
/// with dimension `m` of the chosen modality masked and renormalized.
pub fn dimension_sensitivity(
    text: &TextFeatureSet,
    image: &[f64],
    tau: f64,
    modality: Modality,
    m: usize,
) -> Result<f64> {
    check_dim(text, image, m)?;
    let q = softmax(&logits_unchecked(&text.features, image, tau));
    let cos: Vec<f64> = text.features.iter_rows().map(|t| linalg::dot(t, image)).collect();
    masked_kld(text, image, tau, modality, m, &cos, &q)
}

/// Sensitivity of every dimension. Uses `⟨mask(t), v⟩ = ⟨t, v⟩ − t_m v_m`
/// so each dimension costs O(C).
pub fn sensitivity_vector(text: &TextFeatureSet, image: &[f64], tau: f64, modality: Modality) -> Result<Vec<f64>> {
    check_dim(text, image, 0)?;
    let q = softmax(&logits_unchecked(&text.features, image, tau));
    let cos: Vec<f64> = text.features.iter_rows().map(|t| linalg::dot(t, image)).collect();
    (0..text.dim())
        .map(|m| masked_kld(text, image, tau, modality, m, &cos, &q))
        .collect()
}

fn check_dim(text: &TextFeatureSet, image: &[f64], m: usize) -> Result<()> {
    if image.len() != text.dim() {
        return Err(Error::config("image and text dimensions differ"));
    }
    if m >= text.dim() {
        return Err(Error::config(format!(
            "dimension {m} out of range for D = {}",
            text.dim()
        )));
    }
    Ok(())
}

fn masked_kld(
    text: &TextFeatureSet,
    image: &[f64],
    tau: f64,
    modality: Modality,
    m: usize,
    cos: &[f64],
    q: &[f64],
) -> Result<f64> {
    let vm = image[m];
    let z: Vec<f64> = match modality {
        Modality::Text => text
            .features
            .iter_rows()
            .zip(cos)
            .enumerate()
            .map(|(c, (t, &cs))| {
                let rest = linalg::dot(t, t) - t[m] * t[m];
                if !(rest.max(0.0).sqrt() >= DEGENERATE_NORM) {
                    return Err(Error::Degenerate(format!(
                        "masking dimension {m} leaves text feature {c} with zero norm"
                    )));
                }
                Ok(tau * (cs - t[m] * vm) / rest.sqrt())
            })
            .collect::<Result<_>>()?,
        Modality::Image => {
            let rest = linalg::dot(image, image) - vm * vm;
            if !(rest.max(0.0).sqrt() >= DEGENERATE_NORM) {
                return Err(Error::Degenerate(format!(
                    "masking dimension {m} leaves the image feature with zero norm"
                )));
            }
            let n = rest.sqrt();
            text.features
                .iter_rows()
                .zip(cos)
                .map(|(t, &cs)| tau * (cs - t[m] * vm) / n)
                .collect()
        }
    };
    kld(&softmax(&z), q)
}

/// Dimension with the largest mean |value| over rows; ties go to the lowest index.
pub fn find_dominant(features: &Matrix) -> usize {
    find_dominant_rows(features.iter_rows(), features.cols())
}

pub fn find_dominant_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> usize {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += x.abs();
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    linalg::argmax(&acc)
}

/// Mean |value| per dimension; the statistic behind [`find_dominant`].
pub fn mean_abs_per_dimension<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += x.abs();
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

/// Text-dominant dimension of the bundle's base text features.
pub fn text_dominant_dimension(bundle: &FeatureBundle) -> usize {
    find_dominant(bundle.base_text().unit())
}

/// Image-dominant dimension over every stored image row (all views).
pub fn image_dominant_dimension(bundle: &FeatureBundle) -> usize {
    find_dominant_rows(
        bundle
            .samples()
            .iter()
            .flat_map(|s| s.image_features.unit().iter_rows()),
        bundle.dim(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    /// Mean over the profiled samples, D entries each.
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    pub top_k_text: Vec<(usize, f64)>,
    pub top_k_image: Vec<(usize, f64)>,
    pub tdd: usize,
    pub idd: usize,
    pub samples: Vec<usize>,
}

fn top_k(values: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, values[i])).collect()
}

/// Zero-shot sensitivity profile on the original view of the given samples
/// (all samples when `samples` is empty). A single index gives the
/// per-sample profile; several give the mean over samples.
pub fn sensitivity_profile(
    bundle: &FeatureBundle,
    samples: &[usize],
    k: usize,
    tau: f64,
) -> Result<SensitivityProfile> {
    let samples: Vec<usize> = if samples.is_empty() {
        (0..bundle.num_samples()).collect()
    } else {
        samples.to_vec()
    };
    if let Some(&bad) = samples.iter().find(|&&s| s >= bundle.num_samples()) {
        return Err(Error::config(format!("sample {bad} out of range")));
    }
    let text = encode_text(bundle, &vec![0.0; bundle.prompt_dim()])?;
    let d = bundle.dim();
    let (mut text_s, mut image_s) = (vec![0.0; d], vec![0.0; d]);
    let w = 1.0 / samples.len() as f64;
    for &s in &samples {
        let v = bundle.sample(s).image_features.row(0);
        linalg::axpy(w, &sensitivity_vector(&text, v, tau, Modality::Text)?, &mut text_s);
        linalg::axpy(w, &sensitivity_vector(&text, v, tau, Modality::Image)?, &mut image_s);
    }
    Ok(SensitivityProfile {
        top_k_text: top_k(&text_s, k),
        top_k_image: top_k(&image_s, k),
        text: text_s,
        image: image_s,
        tdd: text_dominant_dimension(bundle),
        idd: image_dominant_dimension(bundle),
        samples,
    })
}

/// Replaces column `k` of every row with `value` and renormalizes the rows
/// that changed. Rows already holding `value` are left bit-identical.
fn replace_column(rows: &FeatureRows, k: usize, value: f32) -> Result<FeatureRows> {
    let cols = rows.cols();
    let mut out = rows.stored().to_vec();
    for r in 0..rows.rows() {
        let row = &mut out[r * cols..(r + 1) * cols];
        if row[k] == value {
            continue;
        }
        row[k] = value;
        let n = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::Degenerate(format!("mean replacement collapsed row {r}")));
        }
        row.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
    FeatureRows::from_f32(rows.rows(), cols, out)
}

fn stored_column_mean<'a>(rows: impl Iterator<Item = &'a [f32]>, k: usize) -> f32 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for r in rows {
        sum += r[k] as f64;
        n += 1;
    }
    (sum / n as f64) as f32
}

/// Bundle with the dominant dimension of one modality replaced by its mean:
/// over classes for text (the matching Jacobian rows are class-averaged too,
/// so the dimension stays constant under adaptation), over every image row
/// for images. Returns the bundle and the replaced dimension.
pub fn mean_replace_bundle(bundle: &FeatureBundle, target: DominantTarget) -> Result<(FeatureBundle, usize)> {
    match target {
        DominantTarget::Tdd => {
            let k = text_dominant_dimension(bundle);
            let base = bundle.base_text();
            let mean = stored_column_mean((0..base.rows()).map(|c| base.stored_row(c)), k);
            let new_text = replace_column(base, k, mean)?;

            let p = bundle.prompt_dim();
            let classes = bundle.num_classes() as f64;
            let mut row_mean = vec![0.0; p];
            for jac in bundle.jacobians() {
                linalg::axpy(1.0, jac.row(k), &mut row_mean);
            }
            let row_mean: Vec<f32> = row_mean.iter().map(|x| (x / classes) as f32).collect();
            let mut jac = bundle.jacobians_f32();
            let block = bundle.dim() * p;
            for c in 0..bundle.num_classes() {
                jac[c * block + k * p..c * block + (k + 1) * p].copy_from_slice(&row_mean);
            }
            let out = FeatureBundle::new(
                bundle.stored_temperature(),
                bundle.class_names().to_vec(),
                new_text,
                &jac,
                p,
                bundle.samples().to_vec(),
            )?
            .with_metadata(bundle.metadata().to_vec())?;
            Ok((out, k))
        }
        DominantTarget::Idd => {
            let k = image_dominant_dimension(bundle);
            let mean = stored_column_mean(
                bundle.samples().iter().flat_map(|s| {
                    let f = &s.image_features;
                    (0..f.rows()).map(move |r| f.stored_row(r))
                }),
                k,
            );
            let samples = bundle
                .samples()
                .iter()
                .map(|s| {
                    Ok(Sample {
                        label: s.label,
                        image_features: replace_column(&s.image_features, k, mean)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = FeatureBundle::new(
                bundle.stored_temperature(),
                bundle.class_names().to_vec(),
                bundle.base_text().clone(),
                &bundle.jacobians_f32(),
                bundle.prompt_dim(),
                samples,
            )?
            .with_metadata(bundle.metadata().to_vec())?;
            Ok((out, k))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub target: DominantTarget,
    pub dimension: usize,
    pub output: RunOutput,
}

/// Reruns the configured method on the mean-replaced bundle.
pub fn mean_replace_eval(bundle: &FeatureBundle, cfg: &AdaptConfig, target: DominantTarget) -> Result<Ablation> {
    let (ablated, dimension) = mean_replace_bundle(bundle, target)?;
    Ok(Ablation {
        target,
        dimension,
        output: run_dataset(&ablated, cfg)?,
    })
}
