//! Competing-risks samples: parsing, validation and the counting-process views
//! `N_ki(t) = 1{T_i <= t, D_i = k}` and `Y_i(t) = 1{T_i >= t}` used by every
//! estimator downstream.
//!
//! A [`Dataset`] is immutable once built. Observed times must be pairwise
//! distinct; tied inputs are rejected unless deterministic jitter is requested.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_COVARIATE_CAP: f64 = 1e6;
pub const DEFAULT_MIN_AT_RISK: usize = 10;

/// One observation `(T ∧ C, D, A, Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub time: f64,
    /// 0 = censored, k = failure from cause k.
    pub status: usize,
    pub treatment: u8,
    pub covariates: Vec<f64>,
}

impl Subject {
    pub fn new(id: impl Into<String>, time: f64, status: usize, treatment: u8, covariates: Vec<f64>) -> Self {
        Subject { id: id.into(), time, status, treatment, covariates }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    /// Analysis horizon; defaults to the largest observed time.
    pub tau: Option<f64>,
    /// Absolute bound on covariate values, checked by [`Dataset::validate`].
    pub covariate_cap: f64,
    /// Seed for rank-preserving tie jitter. `None` rejects ties.
    pub jitter_seed: Option<u64>,
    /// At-risk count below which `validate` warns.
    pub min_at_risk: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions { tau: None, covariate_cap: DEFAULT_COVARIATE_CAP, jitter_seed: None, min_at_risk: DEFAULT_MIN_AT_RISK }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    subjects: Vec<Subject>,
    causes: usize,
    p: usize,
    tau: f64,
    options: DataOptions,
    jittered: usize,
    /// Row-major `n x (p + 1)` design with rows `(A_i, Z_i)`.
    design: Vec<f64>,
    /// Subject indices by decreasing observed time.
    order_desc: Vec<usize>,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>, causes: usize) -> Result<Self> {
        Self::with_options(subjects, causes, DataOptions::default())
    }

    pub fn with_options(mut subjects: Vec<Subject>, causes: usize, options: DataOptions) -> Result<Self> {
        if causes == 0 {
            return Err(Error::InvalidInput("number of causes must be at least 1".into()));
        }
        if subjects.is_empty() {
            return Err(Error::InvalidInput("dataset has no subjects".into()));
        }
        let p = subjects[0].covariates.len();
        for (row, s) in subjects.iter().enumerate() {
            let line = row as u64 + 1;
            if !s.time.is_finite() || s.time < 0.0 {
                return Err(Error::Parse { line, message: format!("time must be finite and nonnegative, got {}", s.time) });
            }
            if s.status > causes {
                return Err(Error::StatusOutOfRange { line, status: s.status as i64, causes });
            }
            if s.treatment > 1 {
                return Err(Error::InvalidTreatment { line, value: s.treatment.to_string() });
            }
            if s.covariates.len() != p {
                return Err(Error::Parse { line, message: format!("expected {p} covariates, got {}", s.covariates.len()) });
            }
            if s.covariates.iter().any(|z| !z.is_finite()) {
                return Err(Error::Parse { line, message: "covariates must be finite".into() });
            }
        }

        let jittered = match options.jitter_seed {
            None => {
                let tied = tied_times(&subjects);
                if !tied.is_empty() {
                    return Err(Error::Ties { times: tied });
                }
                0
            }
            Some(seed) => jitter_ties(&mut subjects, seed),
        };

        let max_time = subjects.iter().map(|s| s.time).fold(f64::NEG_INFINITY, f64::max);
        let tau = match options.tau {
            Some(t) if !(t.is_finite() && t > 0.0) => return Err(Error::InvalidInput(format!("tau must be positive and finite, got {t}"))),
            Some(t) => t,
            None => max_time,
        };

        let width = p + 1;
        let mut design = Vec::with_capacity(subjects.len() * width);
        for s in &subjects {
            design.push(f64::from(s.treatment));
            design.extend_from_slice(&s.covariates);
        }
        let mut order_desc: Vec<usize> = (0..subjects.len()).collect();
        order_desc.sort_by(|&a, &b| subjects[b].time.total_cmp(&subjects[a].time));

        Ok(Dataset { subjects, causes, p, tau, options, jittered, design, order_desc })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn causes(&self) -> usize {
        self.causes
    }

    /// Covariate dimension, excluding treatment.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn options(&self) -> &DataOptions {
        &self.options
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &Subject {
        &self.subjects[i]
    }

    pub fn time(&self, i: usize) -> f64 {
        self.subjects[i].time
    }

    /// `(A_i, Z_i)` as a slice of length `p + 1`.
    pub fn design_row(&self, i: usize) -> &[f64] {
        let w = self.p + 1;
        &self.design[i * w..(i + 1) * w]
    }

    pub fn order_desc(&self) -> &[usize] {
        &self.order_desc
    }

    /// Whether subject `i` has an observed cause-`cause` event within `(0, tau]`.
    pub fn is_event(&self, i: usize, cause: usize) -> bool {
        let s = &self.subjects[i];
        s.status == cause && s.time <= self.tau
    }

    /// `N_ki(t)`.
    pub fn counting(&self, i: usize, cause: usize, t: f64) -> f64 {
        if self.is_event(i, cause) && self.subjects[i].time <= t {
            1.0
        } else {
            0.0
        }
    }

    /// `Y_i(t)`.
    pub fn at_risk(&self, i: usize, t: f64) -> bool {
        self.subjects[i].time >= t
    }

    /// `Y(t) = sum_i Y_i(t)`.
    pub fn risk_set_size(&self, t: f64) -> usize {
        // order_desc is sorted by decreasing time
        self.order_desc.partition_point(|&i| self.subjects[i].time >= t)
    }

    pub fn event_count(&self, cause: usize) -> usize {
        (0..self.n()).filter(|&i| self.is_event(i, cause)).count()
    }

    /// Sorted times of cause-`cause` events in `(0, tau]`.
    pub fn event_times(&self, cause: usize) -> Vec<f64> {
        let mut t: Vec<f64> = (0..self.n()).filter(|&i| self.is_event(i, cause)).map(|i| self.subjects[i].time).collect();
        t.sort_by(f64::total_cmp);
        t
    }

    /// Same data with a different analysis horizon.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let options = DataOptions { tau: Some(tau), jitter_seed: None, ..self.options };
        Dataset::with_options(self.subjects.clone(), self.causes, options)
    }

    /// Diagnostics report; never fails.
    pub fn validate(&self) -> ValidationReport {
        let events_per_cause: Vec<usize> = (1..=self.causes).map(|k| self.event_count(k)).collect();
        let unfittable_causes = events_per_cause.iter().enumerate().filter(|(_, &c)| c == 0).map(|(k, _)| k + 1).collect();
        let censored = self.subjects.iter().filter(|s| s.status == 0).count();
        let min_at_risk = self.risk_set_size(self.tau);
        let cap = self.options.covariate_cap;
        let mut covariate_violations = Vec::new();
        for (row, s) in self.subjects.iter().enumerate() {
            for (col, &z) in s.covariates.iter().enumerate() {
                if z.abs() > cap {
                    covariate_violations.push(CovariateViolation { row, column: col, value: z });
                }
            }
        }
        let mut warnings = Vec::new();
        if min_at_risk < self.options.min_at_risk {
            warnings.push(format!("only {min_at_risk} subjects at risk at tau = {} (threshold {})", self.tau, self.options.min_at_risk));
        }
        ValidationReport {
            n: self.n(),
            causes: self.causes,
            tau: self.tau,
            ties_jittered: self.jittered,
            events_per_cause,
            censored,
            unfittable_causes,
            min_at_risk,
            covariate_cap: cap,
            covariate_violations,
            warnings,
        }
    }

    /// Writes the dataset in the CSV schema read by [`parse_dataset`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,time,status,treatment");
        for j in 1..=self.p {
            out.push_str(&format!(",z{j}"));
        }
        out.push('\n');
        for s in &self.subjects {
            out.push_str(&format!("{},{:?},{},{}", s.id, s.time, s.status, s.treatment));
            for z in &s.covariates {
                out.push_str(&format!(",{z:?}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateViolation {
    pub row: usize,
    pub column: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub causes: usize,
    pub tau: f64,
    pub ties_jittered: usize,
    pub events_per_cause: Vec<usize>,
    pub censored: usize,
    pub unfittable_causes: Vec<usize>,
    /// `inf_{u in [0, tau]} Y(u) = Y(tau)`.
    pub min_at_risk: usize,
    pub covariate_cap: f64,
    pub covariate_violations: Vec<CovariateViolation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.unfittable_causes.is_empty() && self.covariate_violations.is_empty() && self.warnings.is_empty()
    }
}

fn tied_times(subjects: &[Subject]) -> Vec<f64> {
    let mut times: Vec<f64> = subjects.iter().map(|s| s.time).collect();
    times.sort_by(f64::total_cmp);
    let mut tied: Vec<f64> = times.windows(2).filter(|w| w[0] == w[1]).map(|w| w[0]).collect();
    tied.dedup();
    tied
}

/// Breaks ties by adding multiples of `1e-9 x (smallest positive gap)`, with the
/// order inside each tied group drawn from a seeded permutation. Returns the
/// number of subjects moved.
fn jitter_ties(subjects: &mut [Subject], seed: u64) -> usize {
    let mut idx: Vec<usize> = (0..subjects.len()).collect();
    idx.sort_by(|&a, &b| subjects[a].time.total_cmp(&subjects[b].time));
    let min_gap = idx.windows(2).map(|w| subjects[w[1]].time - subjects[w[0]].time).filter(|&g| g > 0.0).fold(f64::INFINITY, f64::min);
    let base = if min_gap.is_finite() { min_gap } else { 1.0 };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut moved = 0;
    let mut start = 0;
    while start < idx.len() {
        let t = subjects[idx[start]].time;
        let mut end = start + 1;
        while end < idx.len() && subjects[idx[end]].time == t {
            end += 1;
        }
        if end - start > 1 {
            let group = &mut idx[start..end];
            group.shuffle(&mut rng);
            let m = group.len() as f64;
            // offsets stay below the gap so ranks across groups are preserved
            let delta = 1e-9 * base / m;
            for (j, &i) in group.iter().enumerate().skip(1) {
                subjects[i].time = t + delta * j as f64;
                moved += 1;
            }
        }
        start = end;
    }
    moved
}

/// Parses `id,time,status,treatment,z1..zp` CSV text. Lines starting with `#`
/// are ignored. Columns are located by name; every column other than the four
/// required ones is a covariate, in file order.
pub fn parse_dataset(csv_text: &str, causes: usize) -> Result<Dataset> {
    parse_dataset_with(csv_text, causes, DataOptions::default())
}

pub fn parse_dataset_with(csv_text: &str, causes: usize, options: DataOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let id_col = find("id")?;
    let time_col = find("time")?;
    let status_col = find("status")?;
    let treat_col = find("treatment")?;
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|c| ![id_col, time_col, status_col, treat_col].contains(c)).collect();

    let mut subjects = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse { line: e.position().map(|p| p.line()).unwrap_or(0), message: e.to_string() })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let num = |col: usize, what: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("cannot parse {what} `{raw}`") })
        };
        let time = num(time_col, "time")?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::Parse { line, message: format!("time must be finite and nonnegative, got {time}") });
        }
        let status_raw = record.get(status_col).unwrap_or("");
        let status: i64 = status_raw.parse().map_err(|_| Error::Parse { line, message: format!("cannot parse status `{status_raw}`") })?;
        if status < 0 || status as usize > causes {
            return Err(Error::StatusOutOfRange { line, status, causes });
        }
        let treat_raw = record.get(treat_col).unwrap_or("");
        let treatment = match treat_raw {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::InvalidTreatment { line, value: other.to_string() }),
        };
        let covariates = cov_cols.iter().map(|&c| num(c, &format!("covariate `{}`", &headers[c]))).collect::<Result<Vec<f64>>>()?;
        if let Some(z) = covariates.iter().find(|z| !z.is_finite()) {
            return Err(Error::Parse { line, message: format!("covariate value {z} is not finite") });
        }
        subjects.push(Subject { id: record.get(id_col).unwrap_or("").to_string(), time, status: status as usize, treatment, covariates });
    }
    Dataset::with_options(subjects, causes, options)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Three subjects: events from cause 1 at t = 1, 2 and a censoring at t = 3.
    pub(crate) fn d3() -> Dataset {
        parse_dataset("id,time,status,treatment,z1\na,1,1,1,0.5\nb,2,1,0,-0.5\nc,3,0,1,0.0\n", 1).unwrap()
    }

    #[test]
    fn parses_minimal_input() {
        let ds = parse_dataset("id,time,status,treatment\n1,1,1,0\n2,2,1,1\n3,3,0,0\n", 1).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.causes(), 1);
        assert_eq!(ds.p(), 0);
        assert_eq!(ds.tau(), 3.0);
        assert_eq!(ds.subject(1).id, "2");
    }

    #[test]
    fn rejects_ties() {
        let err = parse_dataset("id,time,status,treatment\n1,2.0,1,0\n2,2.0,0,1\n", 1).unwrap_err();
        match err {
            Error::Ties { times } => assert_eq!(times, vec![2.0]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_status_out_of_range() {
        let err = parse_dataset("id,time,status,treatment\n1,1,1,0\n2,2,3,1\n", 2).unwrap_err();
        assert!(matches!(err, Error::StatusOutOfRange { line: 3, status: 3, causes: 2 }));
    }

    #[test]
    fn rejects_bad_treatment_and_malformed_rows() {
        let err = parse_dataset("id,time,status,treatment\n1,1,1,2\n", 1).unwrap_err();
        assert!(matches!(err, Error::InvalidTreatment { line: 2, .. }));
        let err = parse_dataset("id,time,status,treatment\n1,1,1,0\n2,abc,1,0\n", 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_dataset("id,time,treatment\n1,1,0\n", 1).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "status"));
    }

    #[test]
    fn comments_are_ignored() {
        let ds = parse_dataset("# produced by test\nid,time,status,treatment,z1\n# mid\n1,1,1,0,0.1\n2,2,0,1,0.2\n", 1).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.design_row(1), &[1.0, 0.2]);
    }

    #[test]
    fn risk_set_sizes() {
        let ds = d3();
        assert_eq!(ds.risk_set_size(0.0), 3);
        assert_eq!(ds.risk_set_size(2.0), 2);
        assert_eq!(ds.risk_set_size(3.5), 0);
    }

    #[test]
    fn validation_report_counts() {
        let ds = d3();
        let report = ds.validate();
        assert_eq!(report.events_per_cause, vec![2]);
        assert_eq!(report.min_at_risk, 1);
        assert_eq!(report.censored, 1);
        assert!(report.unfittable_causes.is_empty());
    }

    #[test]
    fn validation_flags_unfittable_cause_and_cap() {
        let ds = parse_dataset("id,time,status,treatment,z1\n1,1,1,0,1e5\n2,2,0,1,0\n", 2).unwrap();
        let r = ds.validate();
        assert_eq!(r.unfittable_causes, vec![2]);
        assert!(r.covariate_violations.is_empty());
        let opts = DataOptions { covariate_cap: 1e3, ..DataOptions::default() };
        let ds = parse_dataset_with("id,time,status,treatment,z1\n1,1,1,0,1e9\n2,2,0,1,0\n", 2, opts).unwrap();
        let r = ds.validate();
        assert_eq!(r.covariate_violations.len(), 1);
        assert_eq!(r.covariate_violations[0].value, 1e9);
    }

    #[test]
    fn jitter_is_rank_preserving_and_seeded() {
        let csv = "id,time,status,treatment\n1,1,1,0\n2,2,1,1\n3,2,0,0\n4,2,1,1\n5,3,0,0\n";
        let opts = DataOptions { jitter_seed: Some(11), ..DataOptions::default() };
        let a = parse_dataset_with(csv, 1, opts).unwrap();
        let b = parse_dataset_with(csv, 1, opts).unwrap();
        assert_eq!(a.validate().ties_jittered, 2);
        let ta: Vec<f64> = a.subjects().iter().map(|s| s.time).collect();
        let tb: Vec<f64> = b.subjects().iter().map(|s| s.time).collect();
        assert_eq!(ta, tb);
        assert!(tied_times(a.subjects()).is_empty());
        for (i, &t) in ta.iter().enumerate().skip(1).take(3) {
            assert!((2.0..2.0 + 1e-8).contains(&t), "row {i}: {t}");
        }
        assert_eq!(ta[0], 1.0);
        assert_eq!(ta[4], 3.0);
    }

    #[test]
    fn counting_process_identities() {
        let ds = d3();
        let tau = ds.tau();
        let events: f64 = (0..ds.n()).map(|i| ds.counting(i, 1, tau)).sum();
        let censored = ds.subjects().iter().filter(|s| s.status == 0).count() as f64;
        assert_eq!(events + censored, ds.n() as f64);
        assert_eq!(ds.counting(1, 1, 1.5), 0.0);
        assert_eq!(ds.counting(1, 1, 2.0), 1.0);
    }

    #[test]
    fn tau_truncates_events() {
        let ds = d3().with_tau(1.5).unwrap();
        assert_eq!(ds.event_count(1), 1);
        assert_eq!(ds.event_times(1), vec![1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let ds = d3();
        let back = parse_dataset(&ds.to_csv(), 1).unwrap();
        assert_eq!(back.subjects(), ds.subjects());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn risk_set_nonincreasing(times in proptest::collection::hash_set(1u32..10_000, 1..40), probe in proptest::collection::vec(0.0f64..12.0, 1..10)) {
                let subjects: Vec<Subject> = times.iter().enumerate()
                    .map(|(i, &t)| Subject::new(i.to_string(), t as f64 / 1000.0, i % 2, (i % 2) as u8, vec![]))
                    .collect();
                let n = subjects.len();
                let ds = Dataset::new(subjects, 1).unwrap();
                prop_assert_eq!(ds.risk_set_size(0.0), n);
                let mut probe = probe;
                probe.sort_by(f64::total_cmp);
                for w in probe.windows(2) {
                    prop_assert!(ds.risk_set_size(w[0]) >= ds.risk_set_size(w[1]));
                }
                for &t in &probe {
                    let brute = ds.subjects().iter().filter(|s| s.time >= t).count();
                    prop_assert_eq!(ds.risk_set_size(t), brute);
                }
            }
        }
    }
}
