//! Delay statistics, code composition and the stats CSV.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::analytics::Policy;
use crate::sim::RequestRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cannot normalize {metric}: baseline is {value}")]
    BadBaseline { metric: &'static str, value: f64 },
    #[error("no records after warmup")]
    Empty,
}

/// Delay summary over one set of records. Percentiles are of the total delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean_dq: f64,
    pub mean_ds: f64,
    pub mean_d: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub p999: f64,
}

impl Summary {
    pub const METRICS: [&'static str; 7] = ["mean_Dq", "mean_Ds", "mean_D", "p50", "p90", "p99", "p999"];

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RequestRecord>) -> Option<Self> {
        let mut dq = 0.0;
        let mut ds = 0.0;
        let mut totals = Vec::new();
        for r in records {
            dq += r.queueing_delay();
            ds += r.service_delay();
            totals.push(r.total_delay());
        }
        if totals.is_empty() {
            return None;
        }
        totals.sort_by(f64::total_cmp);
        let n = totals.len() as f64;
        let (mean_dq, mean_ds) = (dq / n, ds / n);
        Some(Self {
            count: totals.len(),
            mean_dq,
            mean_ds,
            mean_d: mean_dq + mean_ds,
            p50: nearest_rank(&totals, 500),
            p90: nearest_rank(&totals, 900),
            p99: nearest_rank(&totals, 990),
            p999: nearest_rank(&totals, 999),
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [self.mean_dq, self.mean_ds, self.mean_d, self.p50, self.p90, self.p99, self.p999]
    }

    fn from_values(count: usize, v: [f64; 7]) -> Self {
        Self {
            count,
            mean_dq: v[0],
            mean_ds: v[1],
            mean_d: v[2],
            p50: v[3],
            p90: v[4],
            p99: v[5],
            p999: v[6],
        }
    }

    /// Field-wise average, used to pool seed replications.
    pub fn average(items: &[Summary]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [0.0; 7];
        for s in items {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        let m = items.len() as f64;
        Some(Self::from_values(
            items.iter().map(|s| s.count).sum(),
            acc.map(|a| a / m),
        ))
    }

    /// Per-metric minimum: the lower envelope of a family of schemes.
    pub fn envelope(items: &[Summary]) -> Option<Self> {
        let first = items.first()?;
        let mut acc = first.values();
        for s in &items[1..] {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a = a.min(v);
            }
        }
        Some(Self::from_values(first.count, acc))
    }
}

/// Nearest-rank percentile for `per_mille`/1000 of a sorted slice.
pub fn nearest_rank(sorted: &[f64], per_mille: usize) -> f64 {
    let n = sorted.len();
    let rank = (n * per_mille).div_ceil(1000).max(1);
    sorted[rank.min(n) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayStats {
    pub overall: Summary,
    /// Indexed by class id; `None` for classes without measured requests.
    pub per_class: Vec<Option<Summary>>,
}

/// Statistics over `records[warmup..]`.
pub fn compute_stats(records: &[RequestRecord], warmup: usize) -> Result<DelayStats, MetricsError> {
    let measured = &records[warmup.min(records.len())..];
    let overall = Summary::from_records(measured).ok_or(MetricsError::Empty)?;
    let classes = measured.iter().map(|r| r.class_id + 1).max().unwrap_or(0);
    let per_class = (0..classes)
        .map(|c| Summary::from_records(measured.iter().filter(|r| r.class_id == c)))
        .collect();
    Ok(DelayStats { overall, per_class })
}

/// Per class, the fraction of requests served with each code length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CodeComposition {
    pub per_class: Vec<BTreeMap<u32, f64>>,
}

impl CodeComposition {
    pub fn fraction(&self, class: usize, n: u32) -> f64 {
        self.per_class.get(class).and_then(|m| m.get(&n)).copied().unwrap_or(0.0)
    }

    /// Mean code length used for `class`.
    pub fn mean_n(&self, class: usize) -> f64 {
        self.per_class
            .get(class)
            .map(|m| m.iter().map(|(&n, &f)| n as f64 * f).sum())
            .unwrap_or(0.0)
    }
}

pub fn code_composition(records: &[RequestRecord]) -> CodeComposition {
    let classes = records.iter().map(|r| r.class_id + 1).max().unwrap_or(0);
    let mut counts = vec![BTreeMap::<u32, usize>::new(); classes];
    for r in records {
        *counts[r.class_id].entry(r.code.n).or_default() += 1;
    }
    let per_class = counts
        .into_iter()
        .map(|m| {
            let total: usize = m.values().sum();
            m.into_iter().map(|(n, c)| (n, c as f64 / total as f64)).collect()
        })
        .collect();
    CodeComposition { per_class }
}

/// Element-wise ratio `stats / baseline`; the count is carried over from `stats`.
pub fn normalize_against(stats: &Summary, baseline: &Summary) -> Result<Summary, MetricsError> {
    let mut out = [0.0; 7];
    for (i, (s, b)) in stats.values().into_iter().zip(baseline.values()).enumerate() {
        if !(b.is_finite() && b > 0.0) {
            return Err(MetricsError::BadBaseline {
                metric: Summary::METRICS[i],
                value: b,
            });
        }
        out[i] = s / b;
    }
    Ok(Summary::from_values(stats.count, out))
}

/// `(arrival time, request-queue length seen on arrival)` for every
/// `stride`-th record.
pub fn backlog_series(records: &[RequestRecord], stride: usize) -> Vec<(f64, usize)> {
    records
        .iter()
        .step_by(stride.max(1))
        .map(|r| (r.t_arrive, r.backlog_at_arrival))
        .collect()
}

/// One line of the stats CSV. `tags` fill caller-defined trailing columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub scheduler: String,
    pub policy: Policy,
    pub lambda_total: f64,
    pub alpha: Vec<f64>,
    pub stats: Summary,
    pub mean_backlog: f64,
    pub tags: Vec<String>,
}

/// Writes `scheduler,policy,lambda_total,alpha_0..,mean_Dq,mean_Ds,mean_D,p90,p99,p999,mean_backlog`
/// followed by `tag_headers`.
pub fn write_stats_csv<W: Write>(rows: &[StatsRow], tag_headers: &[&str], out: W) -> std::io::Result<()> {
    let classes = rows.iter().map(|r| r.alpha.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["scheduler".to_string(), "policy".into(), "lambda_total".into()];
    header.extend((0..classes).map(|i| format!("alpha_{i}")));
    header.extend(
        ["mean_Dq", "mean_Ds", "mean_D", "p90", "p99", "p999", "mean_backlog"].map(String::from),
    );
    header.extend(tag_headers.iter().map(|h| h.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let s = &r.stats;
        let mut cells = vec![r.scheduler.clone(), r.policy.to_string(), r.lambda_total.to_string()];
        cells.extend((0..classes).map(|i| r.alpha.get(i).map(f64::to_string).unwrap_or_default()));
        cells.extend([s.mean_dq, s.mean_ds, s.mean_d, s.p90, s.p99, s.p999, r.mean_backlog].map(|v| v.to_string()));
        cells.extend(r.tags.iter().cloned());
        w.write_record(&cells)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedulers::CodeSpec;
    use proptest::prelude::*;

    fn rec(class_id: usize, n: u32, dq: f64, ds: f64) -> RequestRecord {
        RequestRecord {
            id: 0,
            class_id,
            t_arrive: 1.0,
            t_start: 1.0 + dq,
            t_finish: 1.0 + dq + ds,
            code: CodeSpec { n, k: 1 },
            tasks_completed: 1,
            tasks_canceled: n - 1,
            backlog_at_arrival: 0,
        }
    }

    #[test]
    fn single_record() {
        let s = compute_stats(&[rec(0, 1, 0.0, 0.1)], 0).unwrap().overall;
        for p in [s.p50, s.p90, s.p99, s.p999] {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_rank_on_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 900), 90.0);
        assert_eq!(nearest_rank(&v, 500), 50.0);
        assert_eq!(nearest_rank(&v, 990), 99.0);
        assert_eq!(nearest_rank(&v, 999), 100.0);
        assert_eq!(nearest_rank(&v[..1], 1), 1.0);
    }

    #[test]
    fn warmup_and_classes() {
        let recs = [rec(0, 1, 5.0, 5.0), rec(1, 2, 1.0, 2.0), rec(0, 3, 0.0, 1.0)];
        let stats = compute_stats(&recs, 1).unwrap();
        assert_eq!(stats.overall.count, 2);
        assert_eq!(stats.per_class[0].unwrap().mean_d, 1.0);
        assert_eq!(stats.per_class[1].unwrap().mean_d, 3.0);
        assert!(compute_stats(&recs, 3).is_err());
    }

    #[test]
    fn composition() {
        let recs = [rec(0, 3, 0.0, 1.0), rec(0, 3, 0.0, 1.0), rec(0, 5, 0.0, 1.0), rec(1, 4, 0.0, 1.0)];
        let c = code_composition(&recs);
        assert!((c.fraction(0, 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.fraction(1, 4), 1.0);
        assert_eq!(c.fraction(1, 3), 0.0);
        assert!((c.mean_n(0) - 11.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalization() {
        let s = compute_stats(&[rec(0, 1, 0.3, 0.2), rec(0, 1, 0.1, 0.9)], 0).unwrap().overall;
        let r = normalize_against(&s, &s).unwrap();
        assert!(r.values().iter().all(|&v| v == 1.0));
        let mut bad = s;
        bad.p99 = f64::INFINITY;
        assert!(matches!(
            normalize_against(&s, &bad),
            Err(MetricsError::BadBaseline { metric: "p99", .. })
        ));
    }

    #[test]
    fn envelope_is_minimum() {
        let a = compute_stats(&[rec(0, 1, 0.3, 0.2)], 0).unwrap().overall;
        let b = compute_stats(&[rec(0, 1, 0.1, 0.9)], 0).unwrap().overall;
        let e = Summary::envelope(&[a, b]).unwrap();
        assert_eq!(e.mean_dq, b.mean_dq);
        assert_eq!(e.mean_ds, a.mean_ds);
        assert_eq!(e.mean_d, a.mean_d);
    }

    #[test]
    fn stats_csv_quotes_per_class_fixed_codes() {
        let s = compute_stats(&[rec(0, 1, 0.0, 0.5)], 0).unwrap().overall;
        let row = StatsRow {
            scheduler: "fixed:3,4".into(),
            policy: Policy::Blocking,
            lambda_total: 1.0,
            alpha: vec![0.5, 0.5],
            stats: s,
            mean_backlog: 0.0,
            tags: Vec::new(),
        };
        let mut out = Vec::new();
        write_stats_csv(&[row], &[], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("\"fixed:3,4\",blocking,1,0.5,0.5,"));
    }

    #[test]
    fn stats_csv_layout() {
        let s = compute_stats(&[rec(0, 1, 0.0, 0.5)], 0).unwrap().overall;
        let row = StatsRow {
            scheduler: "greedy".into(),
            policy: Policy::NonBlocking,
            lambda_total: 2.5,
            alpha: vec![1.0],
            stats: s,
            mean_backlog: 0.25,
            tags: vec!["7".into()],
        };
        let mut out = Vec::new();
        write_stats_csv(&[row], &["seed"], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "scheduler,policy,lambda_total,alpha_0,mean_Dq,mean_Ds,mean_D,p90,p99,p999,mean_backlog,seed\n\
             greedy,nonblocking,2.5,1,0,0.5,0.5,0.5,0.5,0.5,0.25,7\n"
        );
    }

    proptest! {
        #[test]
        fn percentiles_monotone_and_means_add(
            delays in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0usize..3), 1..300)
        ) {
            let recs: Vec<_> = delays.iter().map(|&(q, s, c)| rec(c, 2, q, s)).collect();
            let st = compute_stats(&recs, 0).unwrap();
            let o = st.overall;
            prop_assert!(o.p50 <= o.p90 && o.p90 <= o.p99 && o.p99 <= o.p999);
            prop_assert_eq!(o.mean_d, o.mean_dq + o.mean_ds);
            let comp = code_composition(&recs);
            for m in &comp.per_class {
                if !m.is_empty() {
                    prop_assert!((m.values().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
