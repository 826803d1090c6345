//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 format or validation, 4 numeric or
//! degenerate input.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adaptation::{run_dataset, run_dataset_with_threads, AdaptConfig, PredictionMode, RunOutput};
use crate::analysis::{self, DominantTarget};
use crate::error::{Error, Result};
use crate::feature_model::{encode_text, FeatureBundle};
use crate::io::{self, report, SynthSpec};
use crate::metrics::{CalibrationReport, DEFAULT_NUM_BINS};
use crate::objectives::{CtptSign, Method, TptForm};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "tpt-calib",
    version,
    about = "Calibrated test-time prompt tuning on exported CLIP features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adapt every sample of a bundle and write predictions plus a report.
    Run(RunArgs),
    /// Recompute metrics from a prediction dump.
    Metrics(MetricsArgs),
    /// Per-dimension sensitivity of the zero-shot prediction.
    Sensitivity(SensitivityArgs),
    /// Rerun with the dominant text or image dimension mean-replaced.
    Ablate(AblateArgs),
    /// Geometry diagnostics after adaptation.
    Diagnose(RunArgs),
    /// Write a seeded synthetic bundle.
    Synth(SynthArgs),
    /// Reliability diagram (CSV or SVG) from a prediction dump.
    Reliability(ReliabilityArgs),
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long, value_enum, default_value_t = Method::Dtpt)]
    pub method: Method,
    /// Regularizer weight λ.
    #[arg(long, default_value_t = 1e5)]
    pub lambda: f64,
    /// Fraction ρ of lowest-entropy views kept.
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = DEFAULT_NUM_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = CtptSign::Dispersive)]
    pub ctpt_sign: CtptSign,
    #[arg(long, value_enum, default_value_t = TptForm::Marginal)]
    pub tpt_form: TptForm,
    #[arg(long, value_enum, default_value_t = PredictionMode::Original)]
    pub prediction_mode: PredictionMode,
    /// Replace the bundle's logit scale τ.
    #[arg(long)]
    pub tau_override: Option<f64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "TPT_CALIB_THREADS")]
    pub threads: Option<usize>,
}

impl AdaptArgs {
    pub fn config(&self) -> AdaptConfig {
        AdaptConfig {
            method: self.method,
            lambda: self.lambda,
            rho: self.rho,
            steps: self.steps,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ctpt_sign: self.ctpt_sign,
            tpt_form: self.tpt_form,
            prediction_mode: self.prediction_mode,
            tau_override: self.tau_override,
            num_bins: self.bins,
        }
    }

    fn run(&self, bundle: &FeatureBundle) -> Result<RunOutput> {
        let cfg = self.config();
        match self.threads {
            Some(0) => Err(Error::config("--threads must be at least 1")),
            Some(t) => run_dataset_with_threads(bundle, &cfg, t),
            None => run_dataset(bundle, &cfg),
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Prediction dump (JSONL).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub adapt: AdaptArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NUM_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Sample to profile; repeat for several, omit for all.
    #[arg(long = "sample")]
    pub samples: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long)]
    pub tau_override: Option<f64>,
    /// Write the full profile as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_enum, default_value_t = DominantTarget::Tdd)]
    pub target: DominantTarget,
    /// Write the before/after reports as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub adapt: AdaptArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_dim: usize,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub views: usize,
    #[arg(long)]
    pub dominant_text: Option<usize>,
    #[arg(long)]
    pub dominant_image: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub dominant_magnitude: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dominant_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    pub class_separation: f64,
    #[arg(long, default_value_t = 0.5)]
    pub view_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[arg(long, default_value_t = 100.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            dim: self.dim,
            num_classes: self.classes,
            prompt_dim: self.prompt_dim,
            num_samples: self.samples,
            views_per_sample: self.views,
            dominant_dim_text: self.dominant_text,
            dominant_dim_image: self.dominant_image,
            dominant_magnitude: self.dominant_magnitude,
            dominant_spread: self.dominant_spread,
            class_separation: self.class_separation,
            view_noise: self.view_noise,
            label_noise: self.label_noise,
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReliabilityArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output file; `.svg` writes a diagram, anything else CSV.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NUM_BINS)]
    pub bins: usize,
    /// Use equal-mass bins instead of equal-width.
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long)]
    pub title: Option<String>,
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Sensitivity(a) => cmd_sensitivity(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Reliability(a) => cmd_reliability(&a),
    }
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = a.adapt.config();
    cfg.validate()?;
    let bundle = io::read_bundle(&a.bundle)?;
    let out = a.adapt.run(&bundle)?;
    if let Some(p) = &a.predictions {
        io::write_predictions(&out.records, p)?;
    }
    if let Some(p) = &a.report {
        let settings = serde_json::json!({
            "bundle": a.bundle.display().to_string(),
            "config": cfg,
        });
        let file = report::ReportFile::new(&out.report, Some(cfg.method.to_string()), Some(settings));
        io::write_report(&file, p)?;
    }
    say!("{:<9} {}", cfg.method.as_str(), report::summary_line(&out.report));
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let records = io::read_predictions(&a.predictions)?;
    let rep = CalibrationReport::from_records(&records, a.bins)?;
    if let Some(p) = &a.report {
        let method = records.first().map(|r| r.method.to_string());
        io::write_report(&report::ReportFile::new(&rep, method, None), p)?;
    }
    say!("{}", report::summary_line(&rep));
    Ok(())
}

fn cmd_sensitivity(a: &SensitivityArgs) -> Result<()> {
    if a.top_k == 0 {
        return Err(Error::config("--top-k must be at least 1"));
    }
    let bundle = io::read_bundle(&a.bundle)?;
    let tau = match a.tau_override {
        Some(t) if !(t > 0.0 && t.is_finite()) => return Err(Error::config("--tau-override must be positive")),
        Some(t) => t,
        None => bundle.temperature(),
    };
    let profile = analysis::sensitivity_profile(&bundle, &a.samples, a.top_k, tau)?;
    say!("rank  text_dim  text_S         image_dim  image_S");
    for (rank, (t, i)) in profile.top_k_text.iter().zip(&profile.top_k_image).enumerate() {
        say!("{:>4}  {:>8}  {:<13.6e}  {:>9}  {:.6e}", rank + 1, t.0, t.1, i.0, i.1);
    }
    say!("tdd {}  idd {}", profile.tdd, profile.idd);
    if let Some(p) = &a.output {
        write_json(&profile, p)?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.adapt.config();
    cfg.validate()?;
    let bundle = io::read_bundle(&a.bundle)?;
    let before = a.adapt.run(&bundle)?;
    let (ablated, dimension) = analysis::mean_replace_bundle(&bundle, a.target)?;
    let after = a.adapt.run(&ablated)?;
    let target = match a.target {
        DominantTarget::Tdd => "tdd",
        DominantTarget::Idd => "idd",
    };
    say!("{} ablation on dimension {dimension} ({})", target, cfg.method);
    say!("{:<8} {}", "before", report::summary_line(&before.report));
    say!("{:<8} {}", "after", report::summary_line(&after.report));
    if let Some(p) = &a.output {
        let value = serde_json::json!({
            "target": a.target,
            "dimension": dimension,
            "before": report::ReportFile::new(&before.report, Some(cfg.method.to_string()), None),
            "after": report::ReportFile::new(&after.report, Some(cfg.method.to_string()), None),
        });
        write_json(&value, p)?;
    }
    Ok(())
}

fn cmd_diagnose(a: &RunArgs) -> Result<()> {
    let cfg = a.adapt.config();
    cfg.validate()?;
    let bundle = io::read_bundle(&a.bundle)?;
    let diagnostics = if cfg.method == Method::Zeroshot || cfg.steps == 0 {
        let tau = cfg.tau_override.unwrap_or_else(|| bundle.temperature());
        let text = encode_text(&bundle, &vec![0.0; bundle.prompt_dim()])?;
        analysis::geometry_report(&bundle, &text, tau)?
    } else {
        a.adapt
            .run(&bundle)?
            .report
            .diagnostics
            .expect("runs attach diagnostics")
    };
    say!("atfd               {:.10e}", diagnostics.atfd);
    say!("mean_logit_range   {:.10e}", diagnostics.mean_logit_range);
    say!("mean_logit_value   {:.10e}", diagnostics.mean_logit_value);
    say!("mean_cross_cosine  {:.10e}", diagnostics.mean_cross_cosine);
    say!("modality_gap_l2    {:.10e}", diagnostics.modality_gap_l2);
    if let Some(p) = &a.report {
        write_json(&diagnostics, p)?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let bundle = io::synth_bundle(&a.spec())?;
    io::write_bundle(&bundle, &a.output)?;
    say!(
        "wrote {} (S={} C={} D={} P={} N={})",
        a.output.display(),
        bundle.num_samples(),
        bundle.num_classes(),
        bundle.dim(),
        bundle.prompt_dim(),
        bundle.views_per_sample()
    );
    Ok(())
}

fn cmd_reliability(a: &ReliabilityArgs) -> Result<()> {
    let records = io::read_predictions(&a.predictions)?;
    let rep = CalibrationReport::from_records(&records, a.bins)?;
    let bins = if a.adaptive {
        &rep.adaptive_bins
    } else {
        &rep.equal_width_bins
    };
    let is_svg = a.output.extension().is_some_and(|e| e.eq_ignore_ascii_case("svg"));
    if is_svg {
        let default_title = records.first().map(|r| r.method.to_string()).unwrap_or_default();
        io::reliability_svg(bins, a.title.as_deref().unwrap_or(&default_title), &a.output)?;
    } else {
        io::reliability_csv(bins, &a.output)?;
    }
    say!("{}", report::summary_line(&rep));
    Ok(())
}
