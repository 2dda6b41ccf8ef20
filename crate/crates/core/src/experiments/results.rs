use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ntk::critical_m;

use super::ExperimentError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Diverged,
    SlowTraining,
    Failed,
}

impl CellStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::SlowTraining => "slow_training",
            CellStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Result<Self, ExperimentError> {
        Ok(match s {
            "ok" => CellStatus::Ok,
            "diverged" => CellStatus::Diverged,
            "slow_training" => CellStatus::SlowTraining,
            "failed" => CellStatus::Failed,
            other => return Err(ExperimentError::Parse(format!("unknown status {other:?}"))),
        })
    }

    /// Whether the row's numbers are usable in curves and fits.
    pub fn usable(&self) -> bool {
        matches!(self, CellStatus::Ok)
    }
}

/// One trained network at one grid point. Metrics that were not computed
/// are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub m: usize,
    pub gamma: f64,
    pub shuffled: bool,
    pub repeat: usize,
    pub nn_error: f64,
    pub ntk_error: f64,
    pub fl_gap: f64,
    pub s_nt: f64,
    pub s_ck: f64,
    /// Zero-dimensionality fraction of every weight layer.
    pub zero_frac: Vec<f64>,
    pub train_loss: f64,
    pub epochs: usize,
    pub steps: usize,
    pub status: CellStatus,
}

pub fn run_id(m: usize, gamma: f64, shuffled: bool, repeat: usize) -> String {
    let labels = if shuffled { "shuffled" } else { "true" };
    format!("m{m}_g{gamma}_{labels}_r{repeat}")
}

fn nan_eq(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

impl ResultRow {
    /// Equality treating NaN as equal to NaN.
    pub fn same_as(&self, other: &Self) -> bool {
        self.run_id == other.run_id
            && self.m == other.m
            && self.gamma == other.gamma
            && self.shuffled == other.shuffled
            && self.repeat == other.repeat
            && nan_eq(self.nn_error, other.nn_error)
            && nan_eq(self.ntk_error, other.ntk_error)
            && nan_eq(self.fl_gap, other.fl_gap)
            && nan_eq(self.s_nt, other.s_nt)
            && nan_eq(self.s_ck, other.s_ck)
            && self.zero_frac.len() == other.zero_frac.len()
            && self
                .zero_frac
                .iter()
                .zip(&other.zero_frac)
                .all(|(a, b)| nan_eq(*a, *b))
            && nan_eq(self.train_loss, other.train_loss)
            && self.epochs == other.epochs
            && self.steps == other.steps
            && self.status == other.status
    }
}

const FIXED_COLUMNS: [&str; 10] = [
    "run_id",
    "m",
    "gamma",
    "shuffled",
    "repeat",
    "nn_error",
    "ntk_error",
    "fl_gap",
    "s_nt",
    "s_ck",
];
const TAIL_COLUMNS: [&str; 4] = ["train_loss", "epochs", "steps", "status"];

/// `results.csv`: a `# config_sha256=` comment line, then one header and
/// one row per cell.
pub fn results_to_csv(rows: &[ResultRow], config_hash: &str) -> String {
    let layers = rows.iter().map(|r| r.zero_frac.len()).max().unwrap_or(0);
    let mut out = format!("# config_sha256={config_hash}\n");
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=layers).map(|l| format!("zero_frac_l{l}")));
    header.extend(TAIL_COLUMNS.iter().map(|s| s.to_string()));
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.m,
            r.gamma,
            r.shuffled,
            r.repeat,
            r.nn_error,
            r.ntk_error,
            r.fl_gap,
            r.s_nt,
            r.s_ck
        );
        for l in 0..layers {
            let _ = write!(out, ",{}", r.zero_frac.get(l).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{}",
            r.train_loss,
            r.epochs,
            r.steps,
            r.status.as_str()
        );
    }
    out
}

/// Parses [`results_to_csv`] output; returns the rows and the config hash.
pub fn results_from_csv(text: &str) -> Result<(Vec<ResultRow>, String), ExperimentError> {
    let hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_sha256="))
        .unwrap_or("")
        .to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| ExperimentError::Parse(e.to_string()))?
        .clone();
    let n = header.len();
    if n < FIXED_COLUMNS.len() + TAIL_COLUMNS.len()
        || header
            .iter()
            .take(FIXED_COLUMNS.len())
            .ne(FIXED_COLUMNS.iter().copied())
    {
        return Err(ExperimentError::Parse("unexpected results header".into()));
    }
    let layers = n - FIXED_COLUMNS.len() - TAIL_COLUMNS.len();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ExperimentError::Parse(e.to_string()))?;
        let f = |i: usize| -> Result<f64, ExperimentError> {
            rec[i]
                .parse()
                .map_err(|_| ExperimentError::Parse(format!("bad number {:?}", &rec[i])))
        };
        let u = |i: usize| -> Result<usize, ExperimentError> {
            rec[i]
                .parse()
                .map_err(|_| ExperimentError::Parse(format!("bad count {:?}", &rec[i])))
        };
        let tail = FIXED_COLUMNS.len() + layers;
        rows.push(ResultRow {
            run_id: rec[0].to_string(),
            m: u(1)?,
            gamma: f(2)?,
            shuffled: rec[3]
                .parse()
                .map_err(|_| ExperimentError::Parse(format!("bad flag {:?}", &rec[3])))?,
            repeat: u(4)?,
            nn_error: f(5)?,
            ntk_error: f(6)?,
            fl_gap: f(7)?,
            s_nt: f(8)?,
            s_ck: f(9)?,
            zero_frac: (0..layers)
                .map(|l| f(FIXED_COLUMNS.len() + l))
                .collect::<Result<_, _>>()?,
            train_loss: f(tail)?,
            epochs: u(tail + 1)?,
            steps: u(tail + 2)?,
            status: CellStatus::parse(&rec[tail + 3])?,
        });
    }
    Ok((rows, hash))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub c: f64,
    pub beta: f64,
    /// Root-mean-square residual in `ln ε`.
    pub residual: f64,
}

/// Least squares of `ln ε = ln C − β ln m`.
pub fn fit_power_law(m_values: &[f64], errors: &[f64]) -> Result<PowerLawFit, ExperimentError> {
    if m_values.len() != errors.len() {
        return Err(ExperimentError::Invalid(
            "m and error lists differ in length".into(),
        ));
    }
    if m_values.len() < 3 {
        return Err(ExperimentError::Invalid(
            "power-law fit needs at least 3 points".into(),
        ));
    }
    if m_values
        .iter()
        .chain(errors)
        .any(|v| !(*v > 0.0) || !v.is_finite())
    {
        return Err(ExperimentError::Invalid(
            "power-law fit needs positive finite values".into(),
        ));
    }
    let n = m_values.len() as f64;
    let xs: Vec<f64> = m_values.iter().map(|m| m.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(ExperimentError::Invalid("all m values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(PowerLawFit {
        c: intercept.exp(),
        beta: -slope,
        residual: (rss / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Band {
    /// Median with min/max over the finite values; NaN when there are none.
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Band {
                median: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        v.sort_by(f64::total_cmp);
        let k = v.len();
        let median = if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        };
        Band {
            median,
            min: v[0],
            max: v[k - 1],
        }
    }
}

/// Repeats of one grid point of one curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub m: usize,
    pub gamma: f64,
    pub shuffled: bool,
    pub repeats: usize,
    pub nn_error: Band,
    pub ntk_error: Band,
    pub fl_gap: Band,
    pub s_nt: Band,
    pub s_ck: Band,
}

/// Summary of one `(γ, shuffled)` curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub gamma: f64,
    pub shuffled: bool,
    pub m_star: Option<usize>,
    pub nn_fit: Option<PowerLawFit>,
    pub ntk_fit: Option<PowerLawFit>,
}

/// Curve keys in first-appearance order.
pub fn curve_keys(rows: &[ResultRow]) -> Vec<(f64, bool)> {
    let mut keys: Vec<(f64, bool)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(g, s)| g == r.gamma && s == r.shuffled) {
            keys.push((r.gamma, r.shuffled));
        }
    }
    keys
}

/// Median/min/max over repeats of every usable row, per curve and `m`.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for (gamma, shuffled) in curve_keys(rows) {
        let mut ms: Vec<usize> = rows
            .iter()
            .filter(|r| r.gamma == gamma && r.shuffled == shuffled)
            .map(|r| r.m)
            .collect();
        ms.sort_unstable();
        ms.dedup();
        for m in ms {
            let cell: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| {
                    r.gamma == gamma && r.shuffled == shuffled && r.m == m && r.status.usable()
                })
                .collect();
            let band =
                |f: fn(&ResultRow) -> f64| Band::of(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            out.push(Aggregate {
                m,
                gamma,
                shuffled,
                repeats: cell.len(),
                nn_error: band(|r| r.nn_error),
                ntk_error: band(|r| r.ntk_error),
                fl_gap: band(|r| r.fl_gap),
                s_nt: band(|r| r.s_nt),
                s_ck: band(|r| r.s_ck),
            });
        }
    }
    out
}

/// `m*` and power-law fits of the median curves. Grid points without both
/// errors are left out of `m*`; fits use every point with a positive error.
pub fn summarize(aggregates: &[Aggregate], eps: f64) -> Vec<CurveSummary> {
    let mut keys: Vec<(f64, bool)> = Vec::new();
    for a in aggregates {
        if !keys.iter().any(|&(g, s)| g == a.gamma && s == a.shuffled) {
            keys.push((a.gamma, a.shuffled));
        }
    }
    keys.into_iter()
        .map(|(gamma, shuffled)| {
            let curve: Vec<&Aggregate> = aggregates
                .iter()
                .filter(|a| a.gamma == gamma && a.shuffled == shuffled)
                .collect();
            let both: Vec<&&Aggregate> = curve
                .iter()
                .filter(|a| a.nn_error.median.is_finite() && a.ntk_error.median.is_finite())
                .collect();
            let grid: Vec<usize> = both.iter().map(|a| a.m).collect();
            let nn: Vec<f64> = both.iter().map(|a| a.nn_error.median).collect();
            let ntk: Vec<f64> = both.iter().map(|a| a.ntk_error.median).collect();
            let m_star = critical_m(&grid, &nn, &ntk, eps).ok().flatten();
            let fit = |f: fn(&Aggregate) -> f64| {
                let pts: Vec<(f64, f64)> = curve
                    .iter()
                    .map(|a| (a.m as f64, f(a)))
                    .filter(|(_, e)| *e > 0.0 && e.is_finite())
                    .collect();
                let (m, e): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
                fit_power_law(&m, &e).ok()
            };
            CurveSummary {
                gamma,
                shuffled,
                m_star,
                nn_fit: fit(|a| a.nn_error.median),
                ntk_fit: fit(|a| a.ntk_error.median),
            }
        })
        .collect()
}

/// `aggregates.csv`.
pub fn aggregates_to_csv(aggs: &[Aggregate], config_hash: &str) -> String {
    let mut out = format!("# config_sha256={config_hash}\n");
    out.push_str("m,gamma,shuffled,repeats");
    for name in ["nn_error", "ntk_error", "fl_gap", "s_nt", "s_ck"] {
        let _ = write!(out, ",{name}_median,{name}_min,{name}_max");
    }
    out.push('\n');
    for a in aggs {
        let _ = write!(out, "{},{},{},{}", a.m, a.gamma, a.shuffled, a.repeats);
        for b in [a.nn_error, a.ntk_error, a.fl_gap, a.s_nt, a.s_ck] {
            let _ = write!(out, ",{},{},{}", b.median, b.min, b.max);
        }
        out.push('\n');
    }
    out
}
