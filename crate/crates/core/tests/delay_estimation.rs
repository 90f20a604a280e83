use std::io::Write;

use fecsim::delay_model::{
    estimate_params, load_trace, DelayModelError, DelaySampler, DelaySource, SamplingMode, ShiftedExp, TraceFilter,
};
use proptest::prelude::*;

fn draws(model: ShiftedExp, count: usize, seed: u64) -> Vec<f64> {
    DelaySampler::new(model.into(), seed).take(count).collect()
}

#[test]
fn moment_fit_recovers_parameters() {
    for (delta, mu) in [(0.1, 5.0), (0.061, 1.0 / 0.079), (0.114, 1.0 / 0.026), (0.0, 1.0)] {
        let samples = draws(ShiftedExp::new(delta, mu).unwrap(), 50_000, 11);
        let fit = estimate_params(&samples, 0.0).unwrap();
        assert!((fit.delta - delta).abs() < 0.02 / mu + 1e-9, "{delta} {mu}: {fit:?}");
        assert!((fit.mu - mu).abs() / mu < 0.03, "{delta} {mu}: {fit:?}");
    }
}

#[test]
fn filtering_trims_the_tail() {
    let mut samples = draws(ShiftedExp::new(0.05, 20.0).unwrap(), 10_000, 3);
    // A few pathological outliers that filtering should discard.
    samples.extend([5.0, 7.5, 9.0]);
    let raw = estimate_params(&samples, 0.0).unwrap();
    let trimmed = estimate_params(&samples, 0.01).unwrap();
    assert!(trimmed.mu > 2.0 * raw.mu);
    assert!((trimmed.to_shifted_exp().mean() - 0.1).abs() < 0.01);
}

#[test]
fn rejects_short_or_bad_input() {
    assert!(matches!(
        estimate_params(&[1.0; 5], 0.0),
        Err(DelayModelError::TooFewSamples { .. })
    ));
    assert!(matches!(
        estimate_params(&[1.0; 20], 0.5),
        Err(DelayModelError::InvalidFraction(_))
    ));
    let constant = estimate_params(&[0.3; 20], 0.0).unwrap();
    assert!((constant.delta - 0.3).abs() < 1e-12);
    assert!(constant.to_shifted_exp().is_degenerate());
}

#[test]
fn trace_file_filtering_and_replay() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "# measured latencies").unwrap();
    writeln!(file, "op_type,chunk_bytes,latency_seconds").unwrap();
    for (op, chunk, lat) in [
        ("read", 1024, 0.10),
        ("write", 1024, 0.30),
        ("read", 4096, 0.20),
        ("read", 1024, 0.15),
    ] {
        writeln!(file, "{op},{chunk},{lat}").unwrap();
    }
    file.flush().unwrap();

    let filter = TraceFilter {
        op_type: Some("read".into()),
        chunk_bytes: Some(1024),
    };
    let trace = load_trace(file.path(), &filter, SamplingMode::Sequential, 0).unwrap();
    assert_eq!(trace.samples(), &[0.10, 0.15]);
    let replay: Vec<f64> = trace.sampler().take(5).collect();
    assert_eq!(replay, [0.10, 0.15, 0.10, 0.15, 0.10]);

    let everything = load_trace(file.path(), &TraceFilter::default(), SamplingMode::Bootstrap, 4).unwrap();
    assert_eq!(everything.samples().len(), 4);
    for d in everything.sampler().take(200) {
        assert!(everything.samples().contains(&d));
    }

    let none = TraceFilter {
        op_type: Some("delete".into()),
        chunk_bytes: None,
    };
    assert!(matches!(
        load_trace(file.path(), &none, SamplingMode::Bootstrap, 0),
        Err(DelayModelError::EmptyAfterFilter { .. })
    ));
}

#[test]
fn malformed_trace_reports_error() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "op_type,chunk_bytes,latency_seconds\nread,1024,-0.5").unwrap();
    file.flush().unwrap();
    assert!(matches!(
        load_trace(file.path(), &TraceFilter::default(), SamplingMode::Bootstrap, 0),
        Err(DelayModelError::Parse { .. })
    ));
    assert!(matches!(
        load_trace("/nonexistent/trace.csv", &TraceFilter::default(), SamplingMode::Bootstrap, 0),
        Err(DelayModelError::Io { .. })
    ));
}

#[test]
fn bootstrap_mean_matches_sample_mean() {
    let samples: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let source = DelaySource::Trace(fecsim::delay_model::TraceSource::new(samples, SamplingMode::Bootstrap, 9).unwrap());
    let target = source.mean();
    let n = 200_000;
    let mean = DelaySampler::new(source, 9).take(n).sum::<f64>() / n as f64;
    assert!((mean - target).abs() < 0.005);
}

proptest! {
    #[test]
    fn samples_never_undercut_the_shift(delta in 0.0f64..2.0, mu in 0.01f64..100.0, seed in any::<u64>()) {
        let model = ShiftedExp::new(delta, mu).unwrap();
        for d in draws(model, 200, seed) {
            prop_assert!(d >= delta && d.is_finite());
        }
    }

    #[test]
    fn fit_is_well_formed(samples in prop::collection::vec(0.001f64..10.0, 10..200), frac in 0.0f64..0.4) {
        let fit = estimate_params(&samples, frac).unwrap();
        prop_assert!(fit.delta >= 0.0 && fit.mu > 0.0);
        let max = samples.iter().cloned().fold(0.0, f64::max);
        prop_assert!(fit.delta <= max);
        // Dropping more of the tail can only lower the fitted mean.
        let wider = estimate_params(&samples, (frac + 0.09).min(0.49)).unwrap();
        prop_assert!(wider.delta + 1.0 / wider.mu <= fit.delta + 1.0 / fit.mu + 1e-9
            || fit.delta == 0.0 || wider.delta == 0.0);
    }
}
