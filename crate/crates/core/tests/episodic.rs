mod common;

use common::{family_spec, random_bundle, Draws, ADAPTIVE_METHODS};
use tpt_calib::adaptation::{
    adapt_sample, run_dataset, run_dataset_sequential, run_dataset_with_threads, AdaptConfig, EpisodicAdapter,
    PredictionRecord,
};
use tpt_calib::io::synth_bundle;
use tpt_calib::{FeatureBundle, Method};

fn small_bundle() -> FeatureBundle {
    random_bundle(&mut Draws::new(11, 3), 24, 6, 5, 12, 40)
}

fn small_family() -> FeatureBundle {
    synth_bundle(&tpt_calib::io::SynthSpec {
        num_samples: 120,
        ..family_spec(3)
    })
    .unwrap()
}

fn cfg(method: Method) -> AdaptConfig {
    AdaptConfig {
        steps: 3,
        ..AdaptConfig::with_method(method)
    }
}

fn without_method(records: &[PredictionRecord]) -> Vec<PredictionRecord> {
    records
        .iter()
        .map(|r| PredictionRecord {
            method: Method::Zeroshot,
            ..r.clone()
        })
        .collect()
}

#[test]
fn thread_count_does_not_change_results() {
    let bundle = small_bundle();
    for method in Method::ALL {
        let c = cfg(method);
        let one = run_dataset_with_threads(&bundle, &c, 1).unwrap();
        let eight = run_dataset_with_threads(&bundle, &c, 8).unwrap();
        let seq = run_dataset_sequential(&bundle, &c).unwrap();
        assert_eq!(one, eight, "{method}");
        assert_eq!(one, seq, "{method}");
    }
}

#[test]
fn records_sorted_by_sample_id() {
    let out = run_dataset_with_threads(&small_bundle(), &cfg(Method::Dtpt), 4).unwrap();
    let ids: Vec<usize> = out.records.iter().map(|r| r.sample_id).collect();
    assert_eq!(ids, (0..40).collect::<Vec<_>>());
}

#[test]
fn zero_lambda_reduces_every_method_to_tpt() {
    let bundle = small_bundle();
    let tpt = run_dataset(
        &bundle,
        &AdaptConfig {
            lambda: 0.0,
            ..cfg(Method::Tpt)
        },
    )
    .unwrap();
    for method in ADAPTIVE_METHODS {
        let out = run_dataset(
            &bundle,
            &AdaptConfig {
                lambda: 0.0,
                ..cfg(method)
            },
        )
        .unwrap();
        assert_eq!(without_method(&out.records), without_method(&tpt.records), "{method}");
    }
}

#[test]
fn zero_steps_reduce_every_method_to_zeroshot() {
    let bundle = small_bundle();
    let zs = run_dataset(&bundle, &cfg(Method::Zeroshot)).unwrap();
    for method in ADAPTIVE_METHODS {
        let out = run_dataset(
            &bundle,
            &AdaptConfig {
                steps: 0,
                ..cfg(method)
            },
        )
        .unwrap();
        assert_eq!(without_method(&out.records), without_method(&zs.records), "{method}");
    }
}

#[test]
fn each_sample_starts_from_a_fresh_prompt() {
    let bundle = small_bundle();
    let c = cfg(Method::Dtpt);
    let run = run_dataset_sequential(&bundle, &c).unwrap();
    let mut adapter = EpisodicAdapter::new(&bundle, &c);
    for i in [17, 3, 39, 3, 0] {
        let rec = adapter.adapt(i).unwrap().record;
        assert!(adapter.state().is_initial());
        assert_eq!(rec, run.records[i]);
        assert_eq!(rec, adapt_sample(&bundle, i, &c).unwrap());
    }
}

#[test]
fn failed_sample_still_resets_state() {
    let bundle = small_bundle();
    let c = cfg(Method::Tpt);
    let mut adapter = EpisodicAdapter::new(&bundle, &c);
    assert!(adapter.adapt(1000).is_err());
    assert!(adapter.state().is_initial());
    assert_eq!(adapter.adapt(2).unwrap().record, adapt_sample(&bundle, 2, &c).unwrap());
}

#[test]
fn zeroshot_accuracy_invariant_to_logit_scale() {
    let bundle = small_bundle();
    let base = run_dataset(&bundle, &cfg(Method::Zeroshot)).unwrap();
    for tau in [1.0, 10.0, 37.5, 1000.0] {
        let out = run_dataset(
            &bundle,
            &AdaptConfig {
                tau_override: Some(tau),
                ..cfg(Method::Zeroshot)
            },
        )
        .unwrap();
        let preds = |rs: &[PredictionRecord]| rs.iter().map(|r| r.predicted_label).collect::<Vec<_>>();
        assert_eq!(preds(&out.records), preds(&base.records));
        assert_eq!(out.report.accuracy, base.report.accuracy);
    }
}

#[test]
fn tpt_sharpens_most_predictions() {
    let bundle = small_family();
    let zs = run_dataset(&bundle, &AdaptConfig::with_method(Method::Zeroshot)).unwrap();
    let tpt = run_dataset(&bundle, &AdaptConfig::with_method(Method::Tpt)).unwrap();
    let sharper = zs
        .records
        .iter()
        .zip(&tpt.records)
        .filter(|(z, t)| t.confidence >= z.confidence)
        .count();
    assert!(sharper as f64 >= 0.9 * zs.records.len() as f64, "{sharper}");
}

#[test]
fn dtpt_narrows_logit_range_relative_to_tpt() {
    let bundle = small_family();
    let tpt = run_dataset(&bundle, &AdaptConfig::with_method(Method::Tpt)).unwrap();
    let dtpt = run_dataset(&bundle, &AdaptConfig::with_method(Method::Dtpt)).unwrap();
    let mean = |rs: &[PredictionRecord]| rs.iter().map(PredictionRecord::logit_range).sum::<f64>() / rs.len() as f64;
    assert!(mean(&dtpt.records) < mean(&tpt.records));
}

#[test]
fn record_fields_are_consistent() {
    let out = run_dataset(&small_bundle(), &cfg(Method::Otpt)).unwrap();
    for r in &out.records {
        assert!(r.confidence > 0.0 && r.confidence <= 1.0);
        assert!(r.logit_min <= r.logit_mean && r.logit_mean <= r.logit_max);
        assert_eq!(r.correct, r.predicted_label == r.true_label);
    }
}

#[test]
fn invalid_configuration_is_rejected_before_work() {
    let bundle = small_bundle();
    for bad in [
        AdaptConfig {
            lr: 0.0,
            ..cfg(Method::Tpt)
        },
        AdaptConfig {
            rho: 0.0,
            ..cfg(Method::Tpt)
        },
        AdaptConfig {
            lambda: -1.0,
            ..cfg(Method::Dtpt)
        },
        AdaptConfig {
            num_bins: 0,
            ..cfg(Method::Tpt)
        },
    ] {
        assert_eq!(run_dataset(&bundle, &bad).unwrap_err().exit_code(), 2);
    }
}
