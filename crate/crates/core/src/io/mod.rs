//! On-disk formats: the TPTB feature bundle, line-delimited prediction dumps,
//! JSON reports and reliability-diagram emitters, plus the seeded synthetic
//! bundle generator.

pub mod bundle;
pub mod predictions;
pub mod report;
pub mod rng;
pub mod synth;

pub use bundle::{decode_bundle, encode_bundle, read_bundle, write_bundle, BundleHeader};
pub use predictions::{read_predictions, write_predictions};
pub use report::{reliability_csv, reliability_svg, write_report, ReportFile};
pub use synth::{synth_bundle, SynthSpec};
