//! Seeded synthetic feature bundles with injectable dominant dimensions.
//!
//! Construction (σ = 1/√D, all draws from [`CounterRng`] streams below):
//!
//! * class prototype `μ_c[d] = σ·n(PROTOTYPE, c·D + d)`
//! * text row `t_c = μ_c`, with `t_c[tdd] = −a·(1 + s·n(TEXT_DOMINANT, c))`,
//!   then normalized
//! * generating class `g = index(CLASS, s)`; label is `g` unless
//!   `u(LABEL_NOISE, s) < label_noise`, in which case `index(LABEL_PICK, s)`
//! * original view `v = normalize(k·μ_g + σ·n(IMAGE_NOISE, s·D + d))` with
//!   `v[idd] += a·(1 + s·n(IMAGE_DOMINANT, s))` added before normalizing
//! * view j ≥ 1: `normalize(v + view_noise·σ·n(VIEW_NOISE, (s·N + j)·D + d))`
//! * jacobian entry `J_c[d, p] = n(JACOBIAN, (c·D + d)·P + p) / √P`
//!
//! where `a` = dominant_magnitude, `s` = dominant_spread, `k` = class_separation.

use serde::{Deserialize, Serialize};

use super::rng::CounterRng;
use crate::error::{Error, Result};
use crate::feature_model::{FeatureBundle, FeatureRows, Sample};
use crate::linalg::{self, Matrix};

mod stream {
    pub const PROTOTYPE: u64 = 1;
    pub const TEXT_DOMINANT: u64 = 2;
    pub const JACOBIAN: u64 = 3;
    pub const CLASS: u64 = 4;
    pub const LABEL_NOISE: u64 = 5;
    pub const LABEL_PICK: u64 = 6;
    pub const IMAGE_NOISE: u64 = 7;
    pub const IMAGE_DOMINANT: u64 = 8;
    pub const VIEW_NOISE: u64 = 9;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub prompt_dim: usize,
    pub num_samples: usize,
    pub views_per_sample: usize,
    pub dominant_dim_text: Option<usize>,
    pub dominant_dim_image: Option<usize>,
    pub dominant_magnitude: f64,
    /// Relative per-row spread of the dominant component.
    pub dominant_spread: f64,
    pub class_separation: f64,
    pub view_noise: f64,
    pub label_noise: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            num_classes: 20,
            prompt_dim: 16,
            num_samples: 500,
            views_per_sample: 64,
            dominant_dim_text: None,
            dominant_dim_image: None,
            dominant_magnitude: 0.0,
            dominant_spread: 0.0,
            class_separation: 1.0,
            view_noise: 0.5,
            label_noise: 0.0,
            temperature: 100.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.num_classes == 0
            || self.prompt_dim == 0
            || self.num_samples == 0
            || self.views_per_sample == 0
        {
            return Err(Error::config("all synthetic sizes must be at least 1"));
        }
        for (name, d) in [("text", self.dominant_dim_text), ("image", self.dominant_dim_image)] {
            if let Some(d) = d {
                if d >= self.dim {
                    return Err(Error::config(format!(
                        "{name} dominant dimension {d} out of range for D = {}",
                        self.dim
                    )));
                }
            }
        }
        let nonneg = [
            self.dominant_magnitude,
            self.dominant_spread,
            self.class_separation,
            self.view_noise,
        ];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config(
                "magnitudes, spread, separation and noise must be nonnegative",
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must be in [0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

fn normalize_or_fail(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let (u, n) = linalg::normalized(v);
    if !(n > 1e-12) {
        return Err(Error::Degenerate(format!("synthetic {what} collapsed to zero")));
    }
    Ok(u)
}

pub fn synth_bundle(spec: &SynthSpec) -> Result<FeatureBundle> {
    spec.validate()?;
    let (d, c, p, s, n) = (
        spec.dim,
        spec.num_classes,
        spec.prompt_dim,
        spec.num_samples,
        spec.views_per_sample,
    );
    let rng = |stream: u64| CounterRng::new(spec.seed, stream);
    let sigma = 1.0 / (d as f64).sqrt();

    let proto_rng = rng(stream::PROTOTYPE);
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|ci| {
            (0..d)
                .map(|di| sigma * proto_rng.normal((ci * d + di) as u64))
                .collect()
        })
        .collect();

    let text_dom = rng(stream::TEXT_DOMINANT);
    let text_rows = prototypes
        .iter()
        .enumerate()
        .map(|(ci, mu)| {
            let mut t = mu.clone();
            if let Some(k) = spec.dominant_dim_text {
                t[k] = -spec.dominant_magnitude * (1.0 + spec.dominant_spread * text_dom.normal(ci as u64));
            }
            normalize_or_fail(&t, "text feature")
        })
        .collect::<Result<Vec<_>>>()?;

    let jac_rng = rng(stream::JACOBIAN);
    let jscale = 1.0 / (p as f64).sqrt();
    let jacobians: Vec<f32> = (0..c * d * p)
        .map(|i| (jscale * jac_rng.normal(i as u64)) as f32)
        .collect();

    let (class_rng, noise_rng, pick_rng) = (rng(stream::CLASS), rng(stream::LABEL_NOISE), rng(stream::LABEL_PICK));
    let (img_rng, img_dom, view_rng) = (
        rng(stream::IMAGE_NOISE),
        rng(stream::IMAGE_DOMINANT),
        rng(stream::VIEW_NOISE),
    );
    let samples = (0..s)
        .map(|si| {
            let g = class_rng.index(si as u64, c);
            let label = if noise_rng.uniform(si as u64) < spec.label_noise {
                pick_rng.index(si as u64, c)
            } else {
                g
            };
            let mut v: Vec<f64> = (0..d)
                .map(|di| spec.class_separation * prototypes[g][di] + sigma * img_rng.normal((si * d + di) as u64))
                .collect();
            if let Some(k) = spec.dominant_dim_image {
                v[k] += spec.dominant_magnitude * (1.0 + spec.dominant_spread * img_dom.normal(si as u64));
            }
            let v = normalize_or_fail(&v, "image feature")?;
            let mut rows = Vec::with_capacity(n);
            rows.push(v.clone());
            for j in 1..n {
                let base = ((si * n + j) * d) as u64;
                let view: Vec<f64> = (0..d)
                    .map(|di| v[di] + spec.view_noise * sigma * view_rng.normal(base + di as u64))
                    .collect();
                rows.push(normalize_or_fail(&view, "augmented view")?);
            }
            Ok(Sample {
                label,
                image_features: FeatureRows::from_matrix(&Matrix::from_rows(&rows))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let bundle = FeatureBundle::new(
        spec.temperature as f32,
        (0..c).map(|ci| format!("class_{ci:03}")).collect(),
        FeatureRows::from_matrix(&Matrix::from_rows(&text_rows))?,
        &jacobians,
        p,
        samples,
    )?;
    bundle.with_metadata(vec![format!(
        "synthetic seed={} tdd={:?} idd={:?} magnitude={} spread={} separation={} view_noise={} label_noise={}",
        spec.seed,
        spec.dominant_dim_text,
        spec.dominant_dim_image,
        spec.dominant_magnitude,
        spec.dominant_spread,
        spec.class_separation,
        spec.view_noise,
        spec.label_noise
    )])
}
