//! Inter-rater believability statistics: per-rater means, Pearson
//! correlation between paired scores, and its t-transform significance.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the crate
//! root exposes `f64` aliases.

mod special;

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Debug, Display, Write as _};
use std::fs;
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::Serialize;
use thiserror::Error;

pub use special::{ln_gamma, regularized_incomplete_beta, student_t_two_tailed};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Serialize + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Serialize + Send + Sync + 'static
{
}

pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("literal fits the scalar type")
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("range error: score {score} for run {run_id} rater {rater_id} is outside [0, 10]")]
    Range {
        run_id: String,
        rater_id: String,
        score: String,
    },
    #[error("pairing error: unpaired runs: {}", .0.iter().map(|r| format!("run {r}")).collect::<Vec<_>>().join(", "))]
    Pairing(Vec<String>),
    #[error("duplicate score for run {run_id} rater {rater_id}")]
    Duplicate { run_id: String, rater_id: String },
    #[error("unknown rater {0}")]
    UnknownRater(String),
    #[error("expected exactly 2 raters in scenario {scenario_id}, found {found}")]
    RaterCount { scenario_id: String, found: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 paired observations, got {0}")]
    TooFewObservations(usize),
    #[error("degenerate input: {0} has zero variance")]
    DegenerateInput(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty dataset")]
    Empty,
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord<T> {
    pub run_id: String,
    pub rater_id: String,
    pub score: T,
}

/// All scores for one scenario; raters and runs keep first-appearance order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreDataset<T> {
    pub scenario_id: String,
    pub records: Vec<ScoreRecord<T>>,
}

impl<T: Scalar> ScoreDataset<T> {
    pub fn raters(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.rater_id.as_str()) {
                seen.push(r.rater_id.as_str());
            }
        }
        seen
    }

    pub fn runs(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.run_id.as_str()) {
                seen.push(r.run_id.as_str());
            }
        }
        seen
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let (lo, hi) = (T::zero(), lit::<T>(10.0));
        let mut keys = HashSet::new();
        for r in &self.records {
            if !(r.score >= lo && r.score <= hi) {
                return Err(EvalError::Range {
                    run_id: r.run_id.clone(),
                    rater_id: r.rater_id.clone(),
                    score: r.score.to_string(),
                });
            }
            if !keys.insert((r.run_id.as_str(), r.rater_id.as_str())) {
                return Err(EvalError::Duplicate {
                    run_id: r.run_id.clone(),
                    rater_id: r.rater_id.clone(),
                });
            }
        }
        let raters = self.raters();
        let unpaired: Vec<String> = self
            .runs()
            .into_iter()
            .filter(|run| {
                raters
                    .iter()
                    .any(|rater| !keys.contains(&(*run, *rater)))
            })
            .map(str::to_string)
            .collect();
        if unpaired.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Pairing(unpaired))
        }
    }

    /// Scores of `a` and `b`, aligned by run.
    pub fn paired(&self, a: &str, b: &str) -> Result<(Vec<T>, Vec<T>), EvalError> {
        let lookup: BTreeMap<(&str, &str), T> = self
            .records
            .iter()
            .map(|r| ((r.run_id.as_str(), r.rater_id.as_str()), r.score))
            .collect();
        for rater in [a, b] {
            if !self.records.iter().any(|r| r.rater_id == rater) {
                return Err(EvalError::UnknownRater(rater.to_string()));
            }
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut unpaired = Vec::new();
        for run in self.runs() {
            match (lookup.get(&(run, a)), lookup.get(&(run, b))) {
                (Some(&x), Some(&y)) => {
                    xs.push(x);
                    ys.push(y);
                }
                _ => unpaired.push(run.to_string()),
            }
        }
        if !unpaired.is_empty() {
            return Err(EvalError::Pairing(unpaired));
        }
        Ok((xs, ys))
    }
}

fn parse_rows<T: Scalar, R: std::io::Read>(reader: R) -> Result<Vec<ScoreDataset<T>>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| EvalError::Parse(e.to_string()))?
        .clone();
    let expected = ["scenario_id", "run_id", "rater_id", "score"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(EvalError::Parse(format!(
            "header must be {}, got {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut datasets: Vec<ScoreDataset<T>> = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| EvalError::Parse(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or_default().to_string();
        let (scenario_id, run_id, rater_id, raw) = (field(0), field(1), field(2), field(3));
        if scenario_id.is_empty() || run_id.is_empty() || rater_id.is_empty() {
            return Err(EvalError::Parse(format!("row {}: empty identifier", line + 2)));
        }
        let score = raw
            .parse::<f64>()
            .ok()
            .and_then(T::from_f64)
            .ok_or_else(|| EvalError::Parse(format!("row {}: bad score {raw:?}", line + 2)))?;
        let record = ScoreRecord {
            run_id,
            rater_id,
            score,
        };
        match datasets.iter_mut().find(|d| d.scenario_id == scenario_id) {
            Some(d) => d.records.push(record),
            None => datasets.push(ScoreDataset {
                scenario_id,
                records: vec![record],
            }),
        }
    }
    for d in &datasets {
        d.validate()?;
    }
    Ok(datasets)
}

/// Parses a scores CSV (`scenario_id,run_id,rater_id,score`) into one
/// validated dataset per scenario.
pub fn ingest_scores_str<T: Scalar>(text: &str) -> Result<Vec<ScoreDataset<T>>, EvalError> {
    parse_rows(text.as_bytes())
}

pub fn ingest_scores<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<ScoreDataset<T>>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    ingest_scores_str(&text)
}

pub fn rater_mean<T: Scalar>(ds: &ScoreDataset<T>, rater_id: &str) -> Result<T, EvalError> {
    let scores: Vec<T> = ds
        .records
        .iter()
        .filter(|r| r.rater_id == rater_id)
        .map(|r| r.score)
        .collect();
    if scores.is_empty() {
        return Err(EvalError::UnknownRater(rater_id.to_string()));
    }
    Ok(mean(&scores))
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    let n = T::from_usize(xs.len()).expect("length fits");
    xs.iter().fold(T::zero(), |acc, &x| acc + x) / n
}

/// Sample Pearson correlation coefficient (two-pass, centred).
pub fn pearson_r<T: Scalar>(x: &[T], y: &[T]) -> Result<T, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(EvalError::TooFewObservations(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EvalError::Domain("non-finite input".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() {
        return Err(EvalError::DegenerateInput("x"));
    }
    if syy == T::zero() {
        return Err(EvalError::DegenerateInput("y"));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// H1: correlation ≠ 0.
    Two,
    /// H1: correlation > 0.
    OneGreater,
}

impl Display for Tail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tail::Two => "two-tailed",
            Tail::OneGreater => "one-tailed",
        })
    }
}

/// `t = r·sqrt((n−2)/(1−r²))`.
pub fn t_statistic<T: Scalar>(r: T, n: usize) -> Result<T, EvalError> {
    check_domain(r, n)?;
    let df = T::from_usize(n - 2).expect("n fits");
    Ok(r * (df / (T::one() - r * r)).sqrt())
}

fn check_domain<T: Scalar>(r: T, n: usize) -> Result<(), EvalError> {
    if n < 3 {
        return Err(EvalError::Domain(format!("n = {n} < 3")));
    }
    if !r.is_finite() || r.abs() >= T::one() {
        return Err(EvalError::Domain(format!("|r| = {} is not < 1", r.abs())));
    }
    Ok(())
}

/// p-value of `r` over `n` pairs against Student's t with `n − 2` degrees of freedom.
pub fn p_value<T: Scalar>(r: T, n: usize, tail: Tail) -> Result<T, EvalError> {
    let t = t_statistic(r, n)?;
    let df = T::from_usize(n - 2).expect("n fits");
    let two = student_t_two_tailed(t, df);
    let half = lit::<T>(0.5);
    Ok(match tail {
        Tail::Two => two,
        Tail::OneGreater if t >= T::zero() => two * half,
        Tail::OneGreater => T::one() - two * half,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationResult<T> {
    pub r: T,
    pub n: usize,
    pub t_stat: T,
    pub df: usize,
    pub p_value: T,
    pub tail: Tail,
}

pub fn correlate<T: Scalar>(x: &[T], y: &[T], tail: Tail) -> Result<CorrelationResult<T>, EvalError> {
    let r = pearson_r(x, y)?;
    let n = x.len();
    Ok(CorrelationResult {
        r,
        n,
        t_stat: t_statistic(r, n)?,
        df: n - 2,
        p_value: p_value(r, n, tail)?,
        tail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RaterMean<T> {
    pub rater_id: String,
    pub mean: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport<T> {
    pub scenario_id: String,
    pub n: usize,
    pub raters: Vec<RaterMean<T>>,
    pub correlation: CorrelationResult<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableReport<T> {
    pub tail: Tail,
    pub scenarios: Vec<ScenarioReport<T>>,
}

pub fn table_report<T: Scalar>(datasets: &[ScoreDataset<T>], tail: Tail) -> Result<TableReport<T>, EvalError> {
    if datasets.is_empty() || datasets.iter().all(|d| d.records.is_empty()) {
        return Err(EvalError::Empty);
    }
    let mut scenarios = Vec::new();
    for ds in datasets {
        if ds.records.is_empty() {
            return Err(EvalError::Empty);
        }
        ds.validate()?;
        let raters = ds.raters();
        if raters.len() != 2 {
            return Err(EvalError::RaterCount {
                scenario_id: ds.scenario_id.clone(),
                found: raters.len(),
            });
        }
        let (x, y) = ds.paired(raters[0], raters[1])?;
        let correlation = correlate(&x, &y, tail)?;
        scenarios.push(ScenarioReport {
            scenario_id: ds.scenario_id.clone(),
            n: x.len(),
            raters: raters
                .iter()
                .map(|r| {
                    Ok(RaterMean {
                        rater_id: r.to_string(),
                        mean: rater_mean(ds, r)?,
                    })
                })
                .collect::<Result<_, EvalError>>()?,
            correlation,
        });
    }
    Ok(TableReport { tail, scenarios })
}

impl<T: Scalar> TableReport<T> {
    pub fn to_text(&self) -> String {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Mean believability score and inter-rater agreement ({})",
            self.tail
        );
        for s in &self.scenarios {
            let _ = writeln!(out, "\n{} (n = {})", s.scenario_id, s.n);
            for r in &s.raters {
                let _ = writeln!(out, "  {:<34}{:.1}", r.rater_id, f(r.mean));
            }
            let _ = writeln!(
                out,
                "  {:<34}{:.2}, {:.2}",
                "Pearson's Correlation, P-value",
                f(s.correlation.r),
                f(s.correlation.p_value)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
