//! Episodic test-time adaptation: for every test sample, start from the
//! initial prompt, take `steps` AdamW steps on the chosen objective over all
//! views, predict, then reset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::GeometryDiagnostics;
use crate::error::{Error, Result};
use crate::feature_model::{encode_text, logits_unchecked, softmax, FeatureBundle, PromptState, TextFeatureSet};
use crate::linalg;
use crate::metrics::{CalibrationReport, DEFAULT_NUM_BINS};
use crate::objectives::{self, composite_loss, CtptSign, Method, ObjectiveConfig, TptForm};

/// Which distribution the adapted prediction reads from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// The unaugmented view 0.
    #[default]
    Original,
    /// Average of the confident views' distributions.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub method: Method,
    pub lambda: f64,
    pub rho: f64,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ctpt_sign: CtptSign,
    pub tpt_form: TptForm,
    pub prediction_mode: PredictionMode,
    pub tau_override: Option<f64>,
    pub num_bins: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Dtpt,
            lambda: 1e5,
            rho: 0.1,
            steps: 1,
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            ctpt_sign: CtptSign::Dispersive,
            tpt_form: TptForm::Marginal,
            prediction_mode: PredictionMode::Original,
            tau_override: None,
            num_bins: DEFAULT_NUM_BINS,
        }
    }
}

impl AdaptConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            method: self.method,
            lambda: self.lambda,
            rho: self.rho,
            ctpt_sign: self.ctpt_sign,
            tpt_form: self.tpt_form,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("beta1 and beta2 must be in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight_decay nonnegative"));
        }
        if self.num_bins == 0 {
            return Err(Error::config("bins must be at least 1"));
        }
        if let Some(t) = self.tau_override {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!("temperature override must be positive, got {t}")));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        if matches!(self.method, Method::Otpt | Method::Dtpt) && self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be nonnegative for {}", self.method)));
        }
        Ok(())
    }

    fn adapts(&self) -> bool {
        self.method != Method::Zeroshot && self.steps > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub method: Method,
    pub true_label: usize,
    pub predicted_label: usize,
    pub confidence: f64,
    pub logit_min: f64,
    pub logit_max: f64,
    pub logit_mean: f64,
    pub correct: bool,
}

impl PredictionRecord {
    pub fn logit_range(&self) -> f64 {
        self.logit_max - self.logit_min
    }
}

/// Decoupled-weight-decay Adam update with bias-corrected moments.
pub fn adamw_step(state: &mut PromptState, grad: &[f64], cfg: &AdaptConfig) -> Result<()> {
    if grad.len() != state.params.len() {
        return Err(Error::config("gradient length does not match prompt"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::domain("non-finite gradient"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (((p, m), v), &g) in state
        .params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
        .zip(grad)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        let decay = cfg.lr * cfg.weight_decay * *p;
        *p = *p - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - decay;
    }
    Ok(())
}

/// Record plus the adapted text features' geometry, for run diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub record: PredictionRecord,
    pub atfd: f64,
    pub text_centroid: Vec<f64>,
    pub mean_cross_cosine: f64,
}

/// Owns one prompt state and enforces the reset between samples.
pub struct EpisodicAdapter<'a> {
    bundle: &'a FeatureBundle,
    cfg: &'a AdaptConfig,
    state: PromptState,
}

impl<'a> EpisodicAdapter<'a> {
    pub fn new(bundle: &'a FeatureBundle, cfg: &'a AdaptConfig) -> Self {
        Self {
            bundle,
            cfg,
            state: PromptState::new(bundle.prompt_dim()),
        }
    }

    pub fn state(&self) -> &PromptState {
        &self.state
    }

    pub fn tau(&self) -> f64 {
        self.cfg.tau_override.unwrap_or_else(|| self.bundle.temperature())
    }

    pub fn adapt(&mut self, sample_index: usize) -> Result<SampleOutcome> {
        let out = self.adapt_inner(sample_index);
        self.state.reset();
        out
    }

    fn adapt_inner(&mut self, sample_index: usize) -> Result<SampleOutcome> {
        let bundle = self.bundle;
        if sample_index >= bundle.num_samples() {
            return Err(Error::config(format!(
                "sample index {sample_index} out of range for {} samples",
                bundle.num_samples()
            )));
        }
        debug_assert!(self.state.is_initial());
        let tau = self.tau();
        let sample = bundle.sample(sample_index);
        let views = sample.image_features.unit();
        let objective = self.cfg.objective();
        if self.cfg.adapts() {
            for _ in 0..self.cfg.steps {
                let loss = composite_loss(&objective, bundle, &self.state.params, views, tau)?;
                adamw_step(&mut self.state, &loss.grad_p, self.cfg)?;
            }
        }
        let text = encode_text(bundle, &self.state.params)?;
        let original = views.row(0);
        let logits = logits_unchecked(&text.features, original, tau);
        let probs = match self.cfg.prediction_mode {
            PredictionMode::Original => softmax(&logits),
            PredictionMode::Marginal => marginal_prediction(&text, views, tau, self.cfg.rho),
        };
        let predicted = linalg::argmax(&probs);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &z in &logits {
            lo = lo.min(z);
            hi = hi.max(z);
        }
        let logit_mean = logits.iter().sum::<f64>() / logits.len() as f64;
        let record = PredictionRecord {
            sample_id: sample_index,
            method: self.cfg.method,
            true_label: sample.label,
            predicted_label: predicted,
            confidence: probs[predicted],
            logit_min: lo,
            logit_max: hi,
            logit_mean: logit_mean.clamp(lo, hi),
            correct: predicted == sample.label,
        };
        let cross: f64 = text.features.iter_rows().map(|t| linalg::dot(t, original)).sum();
        Ok(SampleOutcome {
            record,
            atfd: objectives::ctpt_term(&text),
            text_centroid: text.centroid(),
            mean_cross_cosine: cross / text.num_classes() as f64,
        })
    }
}

fn marginal_prediction(text: &TextFeatureSet, views: &linalg::Matrix, tau: f64, rho: f64) -> Vec<f64> {
    let mut probs = linalg::Matrix::zeros(views.rows(), text.num_classes());
    for (i, v) in views.iter_rows().enumerate() {
        probs
            .row_mut(i)
            .copy_from_slice(&softmax(&logits_unchecked(&text.features, v, tau)));
    }
    let entropies: Vec<f64> = probs
        .iter_rows()
        .map(|p| objectives::entropy(p).unwrap_or(f64::INFINITY))
        .collect();
    let selected = objectives::select_confident_views(&entropies, rho);
    let mut mean = vec![0.0; text.num_classes()];
    for &i in &selected {
        linalg::axpy(1.0 / selected.len() as f64, probs.row(i), &mut mean);
    }
    mean
}

/// Adapts a single sample from a fresh prompt state.
pub fn adapt_sample(bundle: &FeatureBundle, sample_index: usize, cfg: &AdaptConfig) -> Result<PredictionRecord> {
    cfg.validate()?;
    Ok(EpisodicAdapter::new(bundle, cfg).adapt(sample_index)?.record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Sorted by sample id.
    pub records: Vec<PredictionRecord>,
    pub report: CalibrationReport,
}

/// Runs every sample on the current rayon pool.
pub fn run_dataset(bundle: &FeatureBundle, cfg: &AdaptConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let outcomes: Vec<SampleOutcome> = (0..bundle.num_samples())
        .into_par_iter()
        .map_init(|| EpisodicAdapter::new(bundle, cfg), |ad, i| ad.adapt(i))
        .collect::<Result<_>>()?;
    summarize_run(bundle, cfg, outcomes)
}

/// Same as [`run_dataset`] on a dedicated pool of `threads` workers.
pub fn run_dataset_with_threads(bundle: &FeatureBundle, cfg: &AdaptConfig, threads: usize) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_dataset(bundle, cfg))
}

/// Single-threaded reference path.
pub fn run_dataset_sequential(bundle: &FeatureBundle, cfg: &AdaptConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut adapter = EpisodicAdapter::new(bundle, cfg);
    let outcomes = (0..bundle.num_samples())
        .map(|i| adapter.adapt(i))
        .collect::<Result<Vec<_>>>()?;
    summarize_run(bundle, cfg, outcomes)
}

fn summarize_run(bundle: &FeatureBundle, cfg: &AdaptConfig, mut outcomes: Vec<SampleOutcome>) -> Result<RunOutput> {
    outcomes.sort_by_key(|o| o.record.sample_id);
    let diagnostics = GeometryDiagnostics::from_outcomes(bundle, &outcomes);
    let records: Vec<PredictionRecord> = outcomes.into_iter().map(|o| o.record).collect();
    let report = CalibrationReport::from_records(&records, cfg.num_bins)?.with_diagnostics(diagnostics);
    Ok(RunOutput { records, report })
}
