//! Helpers shared by the integration tests: random problem instances,
//! finite-difference checks, brute-force metric references and the seeded
//! synthetic family used for the qualitative properties.
#![allow(dead_code)]

use tpt_calib::adaptation::PredictionRecord;
use tpt_calib::feature_model::{FeatureBundle, FeatureRows, Sample};
use tpt_calib::io::rng::CounterRng;
use tpt_calib::io::SynthSpec;
use tpt_calib::linalg::{self, Matrix};
use tpt_calib::objectives::{composite_loss, ObjectiveConfig};
use tpt_calib::Method;

/// Sequential draws from one counter stream.
pub struct Draws {
    rng: CounterRng,
    counter: u64,
}

impl Draws {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            rng: CounterRng::new(seed, stream),
            counter: 0,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.rng.uniform(self.counter)
    }

    pub fn normal(&mut self) -> f64 {
        self.counter += 1;
        self.rng.normal(self.counter)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.counter += 1;
        self.rng.index(self.counter, n)
    }

    pub fn unit_rows(&mut self, rows: usize, cols: usize) -> Matrix {
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| linalg::normalized(&(0..cols).map(|_| self.normal()).collect::<Vec<_>>()).0)
            .collect();
        Matrix::from_rows(&data)
    }
}

pub fn random_bundle(
    d: &mut Draws,
    dim: usize,
    classes: usize,
    prompt_dim: usize,
    views: usize,
    samples: usize,
) -> FeatureBundle {
    random_bundle_with_tau(d, 100.0, dim, classes, prompt_dim, views, samples)
}

pub fn random_bundle_with_tau(
    d: &mut Draws,
    tau: f32,
    dim: usize,
    classes: usize,
    prompt_dim: usize,
    views: usize,
    samples: usize,
) -> FeatureBundle {
    let text = FeatureRows::from_matrix(&d.unit_rows(classes, dim)).unwrap();
    let scale = 1.0 / (prompt_dim as f64).sqrt();
    let jac: Vec<f32> = (0..classes * dim * prompt_dim)
        .map(|_| (scale * d.normal()) as f32)
        .collect();
    let samples = (0..samples)
        .map(|_| Sample {
            label: d.index(classes),
            image_features: FeatureRows::from_matrix(&d.unit_rows(views, dim)).unwrap(),
        })
        .collect();
    FeatureBundle::new(
        tau,
        (0..classes).map(|c| format!("c{c}")).collect(),
        text,
        &jac,
        prompt_dim,
        samples,
    )
    .unwrap()
}

/// Relative gap `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    linalg::norm(&diff) / linalg::norm(a).max(linalg::norm(b)).max(floor)
}

pub struct GradCheck {
    pub rel_err: f64,
    /// The confident-view selection changed inside the stencil.
    pub selection_changed: bool,
}

/// Central differences of `total` against the analytic `grad_p`.
pub fn fd_check(cfg: &ObjectiveConfig, bundle: &FeatureBundle, prompt: &[f64], views: &Matrix, h: f64) -> GradCheck {
    let tau = bundle.temperature();
    let base = composite_loss(cfg, bundle, prompt, views, tau).unwrap();
    let mut fd = vec![0.0; prompt.len()];
    let mut selection_changed = false;
    for k in 0..prompt.len() {
        let mut plus = prompt.to_vec();
        let mut minus = prompt.to_vec();
        plus[k] += h;
        minus[k] -= h;
        let lp = composite_loss(cfg, bundle, &plus, views, tau).unwrap();
        let lm = composite_loss(cfg, bundle, &minus, views, tau).unwrap();
        selection_changed |= lp.selected_view_indices != base.selected_view_indices
            || lm.selected_view_indices != base.selected_view_indices;
        fd[k] = (lp.total - lm.total) / (2.0 * h);
    }
    GradCheck {
        rel_err: rel_err(&base.grad_p, &fd, 1e-12),
        selection_changed,
    }
}

pub const ADAPTIVE_METHODS: [Method; 4] = [Method::Tpt, Method::Ctpt, Method::Otpt, Method::Dtpt];

pub fn record(id: usize, confidence: f64, correct: bool) -> PredictionRecord {
    PredictionRecord {
        sample_id: id,
        method: Method::Tpt,
        true_label: 0,
        predicted_label: usize::from(!correct),
        confidence,
        logit_min: -1.0,
        logit_max: 1.0,
        logit_mean: 0.0,
        correct,
    }
}

pub fn random_records(d: &mut Draws, n: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| {
            let conf = d.uniform();
            // Correctness loosely tied to confidence so bins differ.
            let correct = d.uniform() < conf.powf(1.5);
            record(i, conf, correct)
        })
        .collect()
}

/// Bin membership by interval comparison; the last bin is closed.
fn brute_equal_width(records: &[PredictionRecord], bins: usize) -> Vec<(usize, f64, f64)> {
    (0..bins)
        .map(|b| {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let members: Vec<&PredictionRecord> = records
                .iter()
                .filter(|r| r.confidence >= lo && (r.confidence < hi || (b + 1 == bins && r.confidence <= 1.0)))
                .collect();
            let n = members.len();
            let conf = members.iter().map(|r| r.confidence).sum::<f64>();
            let acc = members.iter().filter(|r| r.correct).count() as f64;
            (n, conf, acc)
        })
        .collect()
}

pub fn brute_ece(records: &[PredictionRecord], bins: usize) -> f64 {
    let total = records.len() as f64;
    brute_equal_width(records, bins)
        .into_iter()
        .filter(|&(n, _, _)| n > 0)
        .map(|(n, conf, acc)| (n as f64 / total) * (conf / n as f64 - acc / n as f64).abs())
        .sum()
}

pub fn brute_mce(records: &[PredictionRecord], bins: usize) -> f64 {
    brute_equal_width(records, bins)
        .into_iter()
        .filter(|&(n, _, _)| n > 0)
        .map(|(n, conf, acc)| (conf / n as f64 - acc / n as f64).abs())
        .fold(0.0, f64::max)
}

/// Equal-count chunks of the confidence-sorted records; valid when no two
/// confidences tie.
pub fn brute_aece(records: &[PredictionRecord], bins: usize) -> f64 {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap());
    let n = sorted.len();
    let mut out = 0.0;
    let mut start = 0;
    for b in 0..bins {
        let size = n / bins + usize::from(b < n % bins);
        let chunk = &sorted[start..start + size];
        start += size;
        if chunk.is_empty() {
            continue;
        }
        let conf = chunk.iter().map(|r| r.confidence).sum::<f64>() / size as f64;
        let acc = chunk.iter().filter(|r| r.correct).count() as f64 / size as f64;
        out += size as f64 / n as f64 * (conf - acc).abs();
    }
    out
}

/// Rank of every record by pairwise comparison, then the selective risk at
/// each coverage level.
pub fn brute_aurc(records: &[PredictionRecord]) -> f64 {
    let n = records.len();
    let mut by_rank = vec![0usize; n];
    for (i, a) in records.iter().enumerate() {
        let rank = records
            .iter()
            .filter(|b| b.confidence > a.confidence || (b.confidence == a.confidence && b.sample_id < a.sample_id))
            .count();
        by_rank[rank] = i;
    }
    let mut total = 0.0;
    for k in 1..=n {
        let errors = by_rank[..k].iter().filter(|&&i| !records[i].correct).count();
        total += errors as f64 / k as f64;
    }
    total / n as f64
}

/// Overconfident synthetic family: a shared dominant dimension with a small
/// per-class spread on the text side, noisy labels on the image side.
pub fn family_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        dim: 64,
        num_classes: 20,
        prompt_dim: 16,
        num_samples: 500,
        views_per_sample: 64,
        dominant_dim_text: Some(7),
        dominant_dim_image: Some(7),
        dominant_magnitude: 2.0,
        dominant_spread: 0.15,
        class_separation: 1.0,
        view_noise: 0.5,
        label_noise: 0.15,
        temperature: 100.0,
        seed,
    }
}
