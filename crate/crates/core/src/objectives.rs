//! Test-time objectives and their exact prompt gradients.
//!
//! All four objectives share the entropy term on confident views; they
//! differ in the text-feature regularizer added on top:
//!
//! | method | regularizer                         |
//! |--------|-------------------------------------|
//! | tpt    | none                                |
//! | ctpt   | mean distance to the text centroid  |
//! | otpt   | ‖T Tᵀ − I‖²_F                       |
//! | dtpt   | mean KL(softmax(t̄_c) ‖ uniform)     |
//!
//! Gradients are chained by hand: softmax → cosine logits → normalization →
//! Jacobian, with [`tpt_gradient_closed_form`] as an independent forward-mode
//! route for the single-view entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{encode_text, encode_text_vjp, softmax, FeatureBundle, TextFeatureSet};
use crate::linalg::{self, Matrix};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Zeroshot,
    Tpt,
    Ctpt,
    Otpt,
    Dtpt,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Zeroshot, Method::Tpt, Method::Ctpt, Method::Otpt, Method::Dtpt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zeroshot => "zeroshot",
            Method::Tpt => "tpt",
            Method::Ctpt => "ctpt",
            Method::Otpt => "otpt",
            Method::Dtpt => "dtpt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Sign applied to the C-TPT dispersion term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CtptSign {
    /// Subtract the dispersion, so minimization spreads text features apart.
    #[default]
    Dispersive,
    /// Add the dispersion, as the loss is usually printed.
    Literal,
}

/// How the entropy of the selected views is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TptForm {
    /// Entropy of the averaged selected distribution.
    #[default]
    Marginal,
    /// Mean of per-view entropies.
    PerView,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub method: Method,
    pub lambda: f64,
    pub rho: f64,
    pub ctpt_sign: CtptSign,
    pub tpt_form: TptForm,
}

impl ObjectiveConfig {
    pub fn new(method: Method, lambda: f64, rho: f64) -> Self {
        Self {
            method,
            lambda,
            rho,
            ctpt_sign: CtptSign::default(),
            tpt_form: TptForm::default(),
        }
    }

    /// Coefficient multiplying the raw regularizer value in the total loss.
    pub fn signed_weight(&self) -> f64 {
        match self.method {
            Method::Zeroshot | Method::Tpt => 0.0,
            Method::Ctpt => match self.ctpt_sign {
                CtptSign::Dispersive => -self.lambda,
                CtptSign::Literal => self.lambda,
            },
            Method::Otpt | Method::Dtpt => self.lambda,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.method == Method::Zeroshot {
            return Err(Error::config("zeroshot has no objective to optimize"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        if matches!(self.method, Method::Otpt | Method::Dtpt) && self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be nonnegative for {}", self.method)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub tpt_term: f64,
    /// Raw regularizer value (0 for plain TPT), before weighting.
    pub reg_term: f64,
    /// Signed λ actually applied: `total = tpt_term + reg_weight * reg_term`.
    pub reg_weight: f64,
    pub total: f64,
    pub selected_view_indices: Vec<usize>,
    pub grad_p: Vec<f64>,
}

fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn check_probability(p: &[f64]) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::domain(format!(
            "probability entries must be finite and nonnegative, got {x}"
        )));
    }
    Ok(())
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * safe_ln(x)).sum::<f64>()
}

/// Shannon entropy in nats, with `0 · log 0 = 0`.
pub fn entropy(prob: &[f64]) -> Result<f64> {
    check_probability(prob)?;
    Ok(entropy_unchecked(prob))
}

/// KL(p ‖ q). Requires `q > 0` wherever `p > 0`.
pub fn kld(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::config("kld arguments differ in length"));
    }
    check_probability(p)?;
    check_probability(q)?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::domain("kld support violation: q is zero where p is positive"));
            }
            acc += pi * (pi.ln() - qi.ln());
        }
    }
    // Rounding can leave a tiny negative value when p ≈ q.
    Ok(acc.max(0.0))
}

/// `⌈ρN⌉` lowest-entropy view indices, ties broken by view index. At least one
/// view is always kept. Returned in ascending index order.
pub fn select_confident_views(entropies: &[f64], rho: f64) -> Vec<usize> {
    let n = entropies.len();
    let keep = ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    let mut selected = order[..keep.min(n)].to_vec();
    selected.sort_unstable();
    selected
}

/// Entropy of the averaged confident-view distribution. `probs` is N×C.
pub fn tpt_loss(probs: &Matrix, rho: f64) -> (f64, Vec<usize>) {
    let entropies: Vec<f64> = probs.iter_rows().map(entropy_unchecked).collect();
    let selected = select_confident_views(&entropies, rho);
    let mean = mean_rows(probs, &selected);
    (entropy_unchecked(&mean), selected)
}

/// Mean per-view entropy over confident views.
pub fn tpt_loss_per_view(probs: &Matrix, rho: f64) -> (f64, Vec<usize>) {
    let entropies: Vec<f64> = probs.iter_rows().map(entropy_unchecked).collect();
    let selected = select_confident_views(&entropies, rho);
    let loss = selected.iter().map(|&i| entropies[i]).sum::<f64>() / selected.len() as f64;
    (loss, selected)
}

fn mean_rows(m: &Matrix, idx: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for &i in idx {
        linalg::axpy(1.0, m.row(i), &mut mean);
    }
    let k = idx.len() as f64;
    mean.iter_mut().for_each(|x| *x /= k);
    mean
}

/// Mean over classes of KL(softmax(t̄_c) ‖ U). No temperature.
pub fn dem_loss(text: &TextFeatureSet) -> f64 {
    let d = text.dim() as f64;
    let total: f64 = text
        .features
        .iter_rows()
        .map(|t| {
            let s = softmax(t);
            // KL(s ‖ U) = Σ s log s + log D
            (s.iter().map(|&x| x * safe_ln(x)).sum::<f64>() + d.ln()).max(0.0)
        })
        .sum();
    total / text.num_classes() as f64
}

fn dem_grad(text: &TextFeatureSet) -> Matrix {
    let c = text.num_classes() as f64;
    let mut grad = Matrix::zeros(text.num_classes(), text.dim());
    for (k, t) in text.features.iter_rows().enumerate() {
        let s = softmax(t);
        let neg_h: f64 = s.iter().map(|&x| x * safe_ln(x)).sum();
        for (g, &si) in grad.row_mut(k).iter_mut().zip(&s) {
            *g = si * (safe_ln(si) - neg_h) / c;
        }
    }
    grad
}

/// Mean L2 distance of the class text features from their centroid (ATFD).
pub fn ctpt_term(text: &TextFeatureSet) -> f64 {
    let centroid = text.centroid();
    let total: f64 = text.features.iter_rows().map(|t| linalg::distance(t, &centroid)).sum();
    total / text.num_classes() as f64
}

fn ctpt_grad(text: &TextFeatureSet) -> Matrix {
    let n = text.num_classes();
    let centroid = text.centroid();
    let mut dirs = Matrix::zeros(n, text.dim());
    for c in 0..n {
        let t = text.features.row(c);
        let dist = linalg::distance(t, &centroid);
        if dist > 0.0 {
            for ((o, &ti), &mi) in dirs.row_mut(c).iter_mut().zip(t).zip(&centroid) {
                *o = (ti - mi) / dist;
            }
        }
    }
    let mean_dir = dirs.column_mean();
    let inv = 1.0 / n as f64;
    let mut grad = dirs;
    for c in 0..n {
        for (g, &m) in grad.row_mut(c).iter_mut().zip(&mean_dir) {
            *g = (*g - m) * inv;
        }
    }
    grad
}

/// Squared Frobenius norm of `T Tᵀ − I`.
pub fn otpt_term(text: &TextFeatureSet) -> f64 {
    let gram = gram_minus_identity(text);
    gram.as_slice().iter().map(|x| x * x).sum()
}

fn gram_minus_identity(text: &TextFeatureSet) -> Matrix {
    let n = text.num_classes();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut v = linalg::dot(text.features.row(i), text.features.row(j));
            if i == j {
                v -= 1.0;
            }
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

fn otpt_grad(text: &TextFeatureSet) -> Matrix {
    let g = gram_minus_identity(text);
    let n = text.num_classes();
    let mut grad = Matrix::zeros(n, text.dim());
    for i in 0..n {
        let out = grad.row_mut(i);
        for j in 0..n {
            linalg::axpy(4.0 * g.get(i, j), text.features.row(j), out);
        }
    }
    grad
}

/// Raw regularizer value for `method` (0 for TPT).
pub fn regularizer(method: Method, text: &TextFeatureSet) -> f64 {
    match method {
        Method::Zeroshot | Method::Tpt => 0.0,
        Method::Ctpt => ctpt_term(text),
        Method::Otpt => otpt_term(text),
        Method::Dtpt => dem_loss(text),
    }
}

fn regularizer_grad(method: Method, text: &TextFeatureSet) -> Option<Matrix> {
    match method {
        Method::Zeroshot | Method::Tpt => None,
        Method::Ctpt => Some(ctpt_grad(text)),
        Method::Otpt => Some(otpt_grad(text)),
        Method::Dtpt => Some(dem_grad(text)),
    }
}

/// Loss and prompt gradient for one test sample. `views` is N×D unit-norm
/// image features; view selection is held fixed while differentiating.
pub fn composite_loss(
    cfg: &ObjectiveConfig,
    bundle: &FeatureBundle,
    prompt: &[f64],
    views: &Matrix,
    tau: f64,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if views.cols() != bundle.dim() || views.rows() == 0 {
        return Err(Error::config("view features do not match bundle dimension"));
    }
    let text = encode_text(bundle, prompt)?;
    let num_classes = bundle.num_classes();

    let mut probs = Matrix::zeros(views.rows(), num_classes);
    for (i, v) in views.iter_rows().enumerate() {
        let z = crate::feature_model::logits_unchecked(&text.features, v, tau);
        probs.row_mut(i).copy_from_slice(&softmax(&z));
    }

    // Cotangent on each selected view's probability vector.
    let (tpt_term, selected) = match cfg.tpt_form {
        TptForm::Marginal => tpt_loss(&probs, cfg.rho),
        TptForm::PerView => tpt_loss_per_view(&probs, cfg.rho),
    };
    let k = selected.len() as f64;
    let marginal_cotangent: Option<Vec<f64>> = match cfg.tpt_form {
        TptForm::Marginal => Some(
            mean_rows(&probs, &selected)
                .iter()
                .map(|&pc| -(safe_ln(pc) + 1.0) / k)
                .collect(),
        ),
        TptForm::PerView => None,
    };

    let mut upstream = Matrix::zeros(num_classes, bundle.dim());
    for &i in &selected {
        let p = probs.row(i);
        let g: Vec<f64> = match &marginal_cotangent {
            Some(g) => g.clone(),
            None => p.iter().map(|&pc| -(safe_ln(pc) + 1.0) / k).collect(),
        };
        let pg = linalg::dot(p, &g);
        let v = views.row(i);
        for c in 0..num_classes {
            let dz = p[c] * (g[c] - pg);
            if dz != 0.0 {
                linalg::axpy(tau * dz, v, upstream.row_mut(c));
            }
        }
    }

    let reg_term = regularizer(cfg.method, &text);
    let reg_weight = cfg.signed_weight();
    if reg_weight != 0.0 {
        if let Some(rg) = regularizer_grad(cfg.method, &text) {
            for c in 0..num_classes {
                linalg::axpy(reg_weight, rg.row(c), upstream.row_mut(c));
            }
        }
    }
    let total = if reg_weight != 0.0 {
        tpt_term + reg_weight * reg_term
    } else {
        tpt_term
    };
    let grad_p = encode_text_vjp(bundle, &text, &upstream)?;
    if grad_p.iter().any(|g| !g.is_finite()) {
        return Err(Error::domain("non-finite prompt gradient"));
    }
    Ok(LossBreakdown {
        tpt_term,
        reg_term,
        reg_weight,
        total,
        selected_view_indices: selected,
        grad_p,
    })
}

/// Forward-mode `∂z_c/∂p_k` for a single image (C×P), computed directly from
/// the encoder derivative rather than by pulling back a cotangent.
pub fn logit_jacobian(bundle: &FeatureBundle, prompt: &[f64], image: &[f64], tau: f64) -> Result<Matrix> {
    let text = encode_text(bundle, prompt)?;
    let p = bundle.prompt_dim();
    let mut out = Matrix::zeros(bundle.num_classes(), p);
    for c in 0..bundle.num_classes() {
        let t = text.features.row(c);
        let jac = bundle.jacobian(c);
        let cos = linalg::dot(t, image);
        for k in 0..p {
            let (mut v_dot_j, mut t_dot_j) = (0.0, 0.0);
            for d in 0..bundle.dim() {
                let j = jac.get(d, k);
                v_dot_j += image[d] * j;
                t_dot_j += t[d] * j;
            }
            out.set(c, k, tau * (v_dot_j - cos * t_dot_j) / text.norms[c]);
        }
    }
    Ok(out)
}

/// Gradient of the single-view entropy `H(p)` with respect to θ, written in
/// the explicit form `−Σ_c (log p_c + 1) ∂p_c/∂θ` with the softmax Jacobian
/// expanded: diagonal `p_c(1 − p_c)` term plus the cross-class terms.
pub fn tpt_gradient_closed_form(probs: &[f64], logit_jacobian: &Matrix) -> Vec<f64> {
    let num_params = logit_jacobian.cols();
    let mut grad = vec![0.0; num_params];
    for (c, &pc) in probs.iter().enumerate() {
        let weight = -(safe_ln(pc) + 1.0);
        let mut dp = vec![0.0; num_params];
        linalg::axpy(pc * (1.0 - pc), logit_jacobian.row(c), &mut dp);
        for (j, &pj) in probs.iter().enumerate() {
            if j != c {
                linalg::axpy(-pc * pj, logit_jacobian.row(j), &mut dp);
            }
        }
        linalg::axpy(weight, &dp, &mut grad);
    }
    grad
}
