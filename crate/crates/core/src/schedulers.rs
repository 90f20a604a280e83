//! Code-length selection policies.
//!
//! Every policy is a pure function of a [`SchedulerView`] (taken when the
//! request arrives) and static tables. The chosen code is attached to the
//! request and used when it reaches the head of the request queue.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use thiserror::Error;

use crate::analytics::{threshold_row, AnalyticsError, ClassParams, Policy, SystemParams, Threshold};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("unknown scheduler `{0}` (expected fixed:<n>[,<n>...], greedy, bafec or mbafec)")]
    Unknown(String),
    #[error("fixed code length {n} for class {class} outside [{k}, {n_max}]")]
    FixedOutOfRange { class: usize, n: u32, k: u32, n_max: u32 },
    #[error("fixed scheduler lists {got} code lengths for {classes} classes")]
    FixedArity { got: usize, classes: usize },
    #[error("bafec is single-class; use mbafec for {0} classes")]
    BafecMultiClass(usize),
    #[error("thresholds for class {0} are not decreasing")]
    NonMonotone(usize),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// An `(n, k)` MDS code: `n` tasks issued, done after any `k` complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeSpec {
    pub n: u32,
    pub k: u32,
}

/// What a policy observes when a request arrives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerView {
    /// Requests waiting in the request queue, excluding the arriving one and
    /// anything already in service.
    pub backlog: usize,
    pub idle_threads: u32,
    pub class_id: usize,
}

/// Per-class crossover backlogs `Q_{i,k_i} > ... > Q_{i,n_max-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    rows: Vec<Vec<Threshold>>,
}

impl ThresholdTable {
    /// Computes each class's row as if it were the only class present.
    pub fn compute(classes: &[ClassParams], sys: &SystemParams, policy: Policy) -> Result<Self, SchedulerError> {
        let rows = classes
            .iter()
            .map(|c| threshold_row(c, sys, policy))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rows(rows)
    }

    pub fn from_rows(rows: Vec<Vec<Threshold>>) -> Result<Self, SchedulerError> {
        for (i, row) in rows.iter().enumerate() {
            let ok = row.windows(2).all(|w| {
                w[1].n == w[0].n + 1 && (w[1].backlog < w[0].backlog || w[0].backlog.is_infinite())
            });
            if !ok {
                return Err(SchedulerError::NonMonotone(i));
            }
        }
        Ok(Self { rows })
    }

    pub fn row(&self, class_id: usize) -> &[Threshold] {
        &self.rows[class_id]
    }

    pub fn rows(&self) -> &[Vec<Threshold>] {
        &self.rows
    }

    /// Writes `class_id,n,lambda_n,Q_n`; `lambda_n` is empty when the delay
    /// curves never cross.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "class_id,n,lambda_n,Q_n")?;
        for (i, row) in self.rows.iter().enumerate() {
            for t in row {
                let lambda = t.lambda.map(|l| l.to_string()).unwrap_or_default();
                writeln!(out, "{i},{},{lambda},{}", t.n, t.backlog)?;
            }
        }
        Ok(())
    }
}

/// Always `(n_fixed, k)`.
pub fn fixed_fec(class: &ClassParams, n_fixed: u32) -> Result<CodeSpec, SchedulerError> {
    if n_fixed < class.k || n_fixed > class.n_max {
        return Err(SchedulerError::FixedOutOfRange {
            class: 0,
            n: n_fixed,
            k: class.k,
            n_max: class.n_max,
        });
    }
    Ok(CodeSpec { n: n_fixed, k: class.k })
}

/// With `l >= k` idle threads use `(min(l, n_max), k)`, otherwise `(k, k)`.
pub fn greedy(view: &SchedulerView, class: &ClassParams) -> CodeSpec {
    let n = if view.idle_threads >= class.k {
        view.idle_threads.min(class.n_max)
    } else {
        class.k
    };
    CodeSpec { n, k: class.k }
}

/// Picks `n` with `backlog` in `[Q_n, Q_{n-1})`; `k` at or above `Q_k`,
/// `n_max` below `Q_{n_max-1}`.
pub fn bafec(view: &SchedulerView, class: &ClassParams, row: &[Threshold]) -> CodeSpec {
    let backlog = view.backlog as f64;
    let n = row
        .iter()
        .find(|t| backlog >= t.backlog)
        .map_or(class.n_max, |t| t.n);
    CodeSpec { n, k: class.k }
}

/// [`bafec`] against the arriving request's own class row, driven by the
/// total backlog across classes.
pub fn mbafec(view: &SchedulerView, classes: &[ClassParams], table: &ThresholdTable) -> CodeSpec {
    bafec(view, &classes[view.class_id], table.row(view.class_id))
}

/// Scheduler selection as written in configs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchedulerKind {
    /// One length for every class, or one per class.
    Fixed(Vec<u32>),
    Greedy,
    Bafec,
    Mbafec,
}

impl SchedulerKind {
    pub fn is_fixed(&self) -> bool {
        matches!(self, SchedulerKind::Fixed(_))
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerKind::Fixed(ns) => {
                let joined: Vec<String> = ns.iter().map(u32::to_string).collect();
                write!(f, "fixed:{}", joined.join(","))
            }
            SchedulerKind::Greedy => f.write_str("greedy"),
            SchedulerKind::Bafec => f.write_str("bafec"),
            SchedulerKind::Mbafec => f.write_str("mbafec"),
        }
    }
}

impl FromStr for SchedulerKind {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "greedy" => return Ok(SchedulerKind::Greedy),
            "bafec" => return Ok(SchedulerKind::Bafec),
            "mbafec" => return Ok(SchedulerKind::Mbafec),
            _ => {}
        }
        let Some(list) = s.strip_prefix("fixed:") else {
            return Err(SchedulerError::Unknown(s.to_string()));
        };
        let ns = list
            .split(',')
            .map(|t| t.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| SchedulerError::Unknown(s.to_string()))?;
        if ns.is_empty() {
            return Err(SchedulerError::Unknown(s.to_string()));
        }
        Ok(SchedulerKind::Fixed(ns))
    }
}

/// A ready-to-run policy with its tables.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheduler {
    Fixed(Vec<CodeSpec>),
    Greedy,
    Bafec(ThresholdTable),
    Mbafec(ThresholdTable),
}

impl Scheduler {
    pub fn build(
        kind: &SchedulerKind,
        classes: &[ClassParams],
        sys: &SystemParams,
        policy: Policy,
    ) -> Result<Self, SchedulerError> {
        match kind {
            SchedulerKind::Fixed(ns) => {
                let per_class: Vec<u32> = match ns.len() {
                    1 => vec![ns[0]; classes.len()],
                    m if m == classes.len() => ns.clone(),
                    got => {
                        return Err(SchedulerError::FixedArity {
                            got,
                            classes: classes.len(),
                        })
                    }
                };
                let codes = per_class
                    .iter()
                    .zip(classes)
                    .enumerate()
                    .map(|(i, (&n, c))| {
                        fixed_fec(c, n).map_err(|_| SchedulerError::FixedOutOfRange {
                            class: i,
                            n,
                            k: c.k,
                            n_max: c.n_max,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Scheduler::Fixed(codes))
            }
            SchedulerKind::Greedy => Ok(Scheduler::Greedy),
            SchedulerKind::Bafec => {
                if classes.len() != 1 {
                    return Err(SchedulerError::BafecMultiClass(classes.len()));
                }
                Ok(Scheduler::Bafec(ThresholdTable::compute(classes, sys, policy)?))
            }
            SchedulerKind::Mbafec => Ok(Scheduler::Mbafec(ThresholdTable::compute(classes, sys, policy)?)),
        }
    }

    pub fn choose(&self, view: &SchedulerView, classes: &[ClassParams]) -> CodeSpec {
        match self {
            Scheduler::Fixed(codes) => codes[view.class_id],
            Scheduler::Greedy => greedy(view, &classes[view.class_id]),
            Scheduler::Bafec(table) => bafec(view, &classes[view.class_id], table.row(view.class_id)),
            Scheduler::Mbafec(table) => mbafec(view, classes, table),
        }
    }

    /// Largest code length the policy can ever pick for `class`.
    pub fn max_code(&self, class_id: usize, classes: &[ClassParams]) -> u32 {
        match self {
            Scheduler::Fixed(codes) => codes[class_id].n,
            _ => classes[class_id].n_max,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class() -> ClassParams {
        ClassParams::new(3, 0.4, 1.0 / 0.6, 6).unwrap()
    }

    fn view(backlog: usize, idle: u32) -> SchedulerView {
        SchedulerView {
            backlog,
            idle_threads: idle,
            class_id: 0,
        }
    }

    fn row(qs: &[f64]) -> Vec<Threshold> {
        qs.iter()
            .enumerate()
            .map(|(i, &q)| Threshold {
                n: 3 + i as u32,
                lambda: Some(1.0),
                backlog: q,
            })
            .collect()
    }

    #[test]
    fn fixed_examples() {
        assert_eq!(fixed_fec(&class(), 3).unwrap(), CodeSpec { n: 3, k: 3 });
        assert_eq!(fixed_fec(&class(), 6).unwrap(), CodeSpec { n: 6, k: 3 });
        assert!(fixed_fec(&class(), 2).is_err());
        assert!(fixed_fec(&class(), 7).is_err());
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy(&view(0, 5), &class()), CodeSpec { n: 5, k: 3 });
        assert_eq!(greedy(&view(0, 2), &class()), CodeSpec { n: 3, k: 3 });
        assert_eq!(greedy(&view(0, 16), &class()), CodeSpec { n: 6, k: 3 });
        assert_eq!(greedy(&view(0, 0), &class()), CodeSpec { n: 3, k: 3 });
    }

    #[test]
    fn bafec_buckets() {
        // Q_3 = 4, Q_4 = 2, Q_5 = 1
        let r = row(&[4.0, 2.0, 1.0]);
        let pick = |b| bafec(&view(b, 0), &class(), &r).n;
        assert_eq!(pick(0), 6);
        assert_eq!(pick(1), 5); // exactly on Q_5
        assert_eq!(pick(2), 4);
        assert_eq!(pick(3), 4);
        assert_eq!(pick(4), 3);
        assert_eq!(pick(100), 3);
    }

    #[test]
    fn infinite_thresholds_keep_longest_code() {
        let r = row(&[f64::INFINITY, f64::INFINITY, f64::INFINITY]);
        assert_eq!(bafec(&view(1_000_000, 0), &class(), &r).n, 6);
    }

    #[test]
    fn mbafec_reduces_to_bafec() {
        let classes = [class()];
        let sys = SystemParams::with_threads(16).unwrap();
        let table = ThresholdTable::compute(&classes, &sys, Policy::NonBlocking).unwrap();
        for b in 0..50 {
            let v = view(b, 0);
            assert_eq!(mbafec(&v, &classes, &table), bafec(&v, &classes[0], table.row(0)));
        }
    }

    #[test]
    fn identical_classes_identical_tables() {
        let classes = [class(), class()];
        let sys = SystemParams::with_threads(16).unwrap();
        let table = ThresholdTable::compute(&classes, &sys, Policy::NonBlocking).unwrap();
        assert_eq!(table.row(0), table.row(1));
        for b in 0..20 {
            let a = mbafec(&SchedulerView { backlog: b, idle_threads: 0, class_id: 0 }, &classes, &table);
            let c = mbafec(&SchedulerView { backlog: b, idle_threads: 0, class_id: 1 }, &classes, &table);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn read_write_tables_separate() {
        let read = ClassParams::new(3, 0.061, 1.0 / 0.079, 6).unwrap();
        let write = ClassParams::new(3, 0.114, 1.0 / 0.026, 6).unwrap();
        let classes = [read, write];
        let sys = SystemParams::with_threads(16).unwrap();
        let table = ThresholdTable::compute(&classes, &sys, Policy::NonBlocking).unwrap();
        let separated = (0..200).any(|b| {
            let r = mbafec(&SchedulerView { backlog: b, idle_threads: 0, class_id: 0 }, &classes, &table);
            let w = mbafec(&SchedulerView { backlog: b, idle_threads: 0, class_id: 1 }, &classes, &table);
            r.n > w.n
        });
        assert!(separated, "{table:?}");
    }

    #[test]
    fn threshold_csv() {
        let table = ThresholdTable::from_rows(vec![row(&[4.0, 2.0, 1.0])]).unwrap();
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "class_id,n,lambda_n,Q_n\n0,3,1,4\n0,4,1,2\n0,5,1,1\n");
    }

    #[test]
    fn from_rows_rejects_increasing() {
        assert_eq!(
            ThresholdTable::from_rows(vec![row(&[1.0, 2.0])]).unwrap_err(),
            SchedulerError::NonMonotone(0)
        );
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("fixed:4".parse::<SchedulerKind>().unwrap(), SchedulerKind::Fixed(vec![4]));
        assert_eq!("fixed:4,3".parse::<SchedulerKind>().unwrap(), SchedulerKind::Fixed(vec![4, 3]));
        assert_eq!("greedy".parse::<SchedulerKind>().unwrap(), SchedulerKind::Greedy);
        assert_eq!("mbafec".parse::<SchedulerKind>().unwrap(), SchedulerKind::Mbafec);
        assert!("fixed:".parse::<SchedulerKind>().is_err());
        assert!("fastest".parse::<SchedulerKind>().is_err());
        for k in ["fixed:4,3", "greedy", "bafec", "mbafec"] {
            assert_eq!(k.parse::<SchedulerKind>().unwrap().to_string(), k);
        }
    }

    #[test]
    fn build_validates() {
        let sys = SystemParams::with_threads(16).unwrap();
        let two = [class(), class()];
        assert!(matches!(
            Scheduler::build(&SchedulerKind::Bafec, &two, &sys, Policy::NonBlocking),
            Err(SchedulerError::BafecMultiClass(2))
        ));
        assert!(matches!(
            Scheduler::build(&SchedulerKind::Fixed(vec![3, 4, 5]), &two, &sys, Policy::NonBlocking),
            Err(SchedulerError::FixedArity { .. })
        ));
        assert!(matches!(
            Scheduler::build(&SchedulerKind::Fixed(vec![3, 9]), &two, &sys, Policy::NonBlocking),
            Err(SchedulerError::FixedOutOfRange { class: 1, .. })
        ));
        let s = Scheduler::build(&SchedulerKind::Fixed(vec![4]), &two, &sys, Policy::NonBlocking).unwrap();
        assert_eq!(s, Scheduler::Fixed(vec![CodeSpec { n: 4, k: 3 }; 2]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adaptive_choice_non_increasing_in_backlog(frac in 0.05f64..0.95, l in 8u32..64, b in 0usize..500) {
                let c = ClassParams::new(3, frac, 1.0 / (1.0 - frac), 6).unwrap();
                let sys = SystemParams::with_threads(l).unwrap();
                let table = ThresholdTable::compute(&[c], &sys, Policy::NonBlocking).unwrap();
                let a = bafec(&view(b, 0), &c, table.row(0));
                let next = bafec(&view(b + 1, 0), &c, table.row(0));
                prop_assert!(next.n <= a.n);
                prop_assert!(a.n >= c.k && a.n <= c.n_max);
            }

            #[test]
            fn greedy_never_overcommits(idle in 0u32..32) {
                let c = class();
                let code = greedy(&view(0, idle), &c);
                prop_assert!(code.n <= idle.max(c.k));
            }
        }
    }
}
