//! Configuration-driven experiment grids over dataset size, output scale and
//! label shuffling, with CSV/SVG outputs.

mod config;
pub mod plot;
mod results;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ck::{self, utilities_with_threshold};
use crate::datasets::{self, gen_msp_split, gen_multi_index_pair, Dataset, Split};
use crate::network::{self, init};
use crate::ntk::{cka, empirical_ntk, ntk_predict, probe_rows, RidgeRule};
use crate::numerics::{derive_seed, Matrix};
use crate::superposition::{self, DimensionalityReport};
use crate::training::{self, gen_error, TrainError};

pub use config::{
    EvalSet, ExperimentConfig, MetricsSection, NetworkSection, SweepSection, Task, TrainSection,
};
pub use plot::{histogram_svg, Chart, Scale, Series};
pub use results::{
    aggregate, aggregates_to_csv, curve_keys, fit_power_law, results_from_csv, results_to_csv,
    run_id, summarize, Aggregate, Band, CellStatus, CurveSummary, PowerLawFit, ResultRow,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
    #[error("nothing to plot")]
    EmptyResult,
}

fn io_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(e.to_string())
}

// seed labels
const DATA: u64 = 1;
const TEST: u64 = 2;
const INIT: u64 = 3;
const BATCHES: u64 = 4;
const SHUFFLE: u64 = 5;
const PROBE: u64 = 6;

/// One grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub m: usize,
    pub gamma: f64,
    pub shuffled: bool,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: ResultRow,
    pub dims: Vec<DimensionalityReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
    pub curves: Vec<CurveSummary>,
    /// Dimensionality reports per run id (empty when disabled or failed).
    pub dims: Vec<(String, Vec<DimensionalityReport>)>,
}

impl ExperimentResult {
    pub fn results_csv(&self) -> String {
        results_to_csv(&self.rows, &self.config_hash)
    }

    pub fn curve(&self, gamma: f64, shuffled: bool) -> Option<&CurveSummary> {
        self.curves
            .iter()
            .find(|c| c.gamma == gamma && c.shuffled == shuffled)
    }

    /// Rows of one curve and repeat, ordered by `m`.
    pub fn rows_of(&self, gamma: f64, shuffled: bool, repeat: usize) -> Vec<&ResultRow> {
        let mut rows: Vec<&ResultRow> = self
            .rows
            .iter()
            .filter(|r| r.gamma == gamma && r.shuffled == shuffled && r.repeat == repeat)
            .collect();
        rows.sort_by_key(|r| r.m);
        rows
    }
}

/// Train and test sets of one repeat at size `m`.
pub fn cell_data(
    cfg: &ExperimentConfig,
    m: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), datasets::DatasetError> {
    let data_seed = derive_seed(derive_seed(seed, DATA), m as u64);
    match cfg.task {
        Task::Msp => {
            let train = gen_msp_split(&cfg.msp, m, data_seed, Split::Train)?;
            let test = gen_msp_split(
                &cfg.msp,
                cfg.test_size,
                derive_seed(seed, TEST),
                Split::Test,
            )?;
            Ok((train, test))
        }
        Task::MultiIndex => gen_multi_index_pair(&cfg.multi_index, m, cfg.test_size, data_seed),
    }
}

/// Everything a cell needs before training.
#[derive(Clone, Debug)]
pub struct PreparedCell {
    /// Training set, with labels permuted for shuffled cells.
    pub train: Dataset,
    pub test: Dataset,
    pub theta0: network::ModelState,
    pub train_config: training::TrainConfig,
}

/// Data, initial parameters and optimizer settings of one cell, derived
/// from its seed exactly as the grid runners do.
pub fn prepare_cell(cfg: &ExperimentConfig, spec: &CellSpec) -> Result<PreparedCell, crate::Error> {
    let (train_true, test) = cell_data(cfg, spec.m, spec.seed)?;
    let train = if spec.shuffled {
        datasets::shuffle_labels(&train_true, derive_seed(spec.seed, SHUFFLE))?
    } else {
        train_true
    };
    let theta0 = init(
        &cfg.network_config(spec.gamma),
        derive_seed(spec.seed, INIT),
    )?;
    let train_config = cfg
        .train
        .to_train_config(spec.m, derive_seed(spec.seed, BATCHES));
    Ok(PreparedCell {
        train,
        test,
        theta0,
        train_config,
    })
}

fn label_variance(y: &Matrix) -> f64 {
    let v = y.as_slice();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

fn cap_rows(x: &Matrix, cap: usize) -> Matrix {
    if x.rows() <= cap {
        x.clone()
    } else {
        x.row_range(0, cap)
    }
}

fn empty_row(spec: &CellSpec, layers: usize) -> ResultRow {
    ResultRow {
        run_id: run_id(spec.m, spec.gamma, spec.shuffled, spec.repeat),
        m: spec.m,
        gamma: spec.gamma,
        shuffled: spec.shuffled,
        repeat: spec.repeat,
        nn_error: f64::NAN,
        ntk_error: f64::NAN,
        fl_gap: f64::NAN,
        s_nt: f64::NAN,
        s_ck: f64::NAN,
        zero_frac: vec![f64::NAN; layers],
        train_loss: f64::NAN,
        epochs: 0,
        steps: 0,
        status: CellStatus::Failed,
    }
}

/// Trains one network and evaluates every enabled metric. Failures are
/// recorded in the returned row rather than propagated.
pub fn run_cell(cfg: &ExperimentConfig, spec: &CellSpec) -> CellOutcome {
    let layers = cfg.network.hidden_layers + 1;
    let mut row = empty_row(spec, layers);
    match run_cell_inner(cfg, spec, &mut row) {
        Ok(dims) => CellOutcome {
            row,
            dims,
            error: None,
        },
        Err(e) => {
            if matches!(e, CellFailure::Diverged(_)) {
                row.status = CellStatus::Diverged;
            } else {
                row.status = CellStatus::Failed;
            }
            log::warn!("{}: {}", row.run_id, e.message());
            CellOutcome {
                row,
                dims: vec![],
                error: Some(e.message()),
            }
        }
    }
}

enum CellFailure {
    Diverged(String),
    Other(String),
}

impl CellFailure {
    fn message(&self) -> String {
        match self {
            CellFailure::Diverged(s) | CellFailure::Other(s) => s.clone(),
        }
    }
}

fn other(e: impl std::fmt::Display) -> CellFailure {
    CellFailure::Other(e.to_string())
}

fn run_cell_inner(
    cfg: &ExperimentConfig,
    spec: &CellSpec,
    row: &mut ResultRow,
) -> Result<Vec<DimensionalityReport>, CellFailure> {
    let metrics = &cfg.metrics;
    let PreparedCell {
        train,
        test,
        theta0,
        train_config: tcfg,
    } = prepare_cell(cfg, spec).map_err(other)?;
    row.epochs = tcfg.epochs;
    log::info!("{}: training {} epochs", row.run_id, tcfg.epochs);

    let (trained, report) = match training::train(&theta0, &train, &tcfg) {
        Ok(v) => v,
        Err(e @ TrainError::Diverged { .. }) => return Err(CellFailure::Diverged(e.to_string())),
        Err(e) => return Err(other(e)),
    };
    row.steps = report.steps;
    row.train_loss = report.final_train_loss;
    row.nn_error = gen_error(&trained, &test, tcfg.loss).map_err(other)?;

    let mut k0_train = None;
    if metrics.ntk && spec.m <= metrics.ntk_max_m {
        let k = empirical_ntk(&theta0, &train.x, &train.x).map_err(other)?;
        let kt = empirical_ntk(&theta0, &test.x, &train.x).map_err(other)?;
        let ridge = RidgeRule::TraceScaled(metrics.ridge);
        let pred = if metrics.ntk_centered {
            let f0_train = network::predict(&theta0, &train.x).map_err(other)?;
            let f0_test = network::predict(&theta0, &test.x).map_err(other)?;
            let resid = train.y.sub(&f0_train).map_err(other)?;
            let mu = ntk_predict(&k, &resid, &kt, ridge).map_err(other)?;
            f0_test.add(&mu).map_err(other)?
        } else {
            ntk_predict(&k, &train.y, &kt, ridge).map_err(other)?
        };
        row.ntk_error = tcfg.loss.evaluate(&pred, &test.y);
        row.fl_gap = row.ntk_error - row.nn_error;
        k0_train = Some(k);
    }

    if metrics.ntk {
        let probe = probe_rows(&train.x, metrics.probe_cap, derive_seed(spec.seed, PROBE));
        let k0 = match k0_train {
            Some(k) if probe.rows() == train.x.rows() => k,
            _ => empirical_ntk(&theta0, &probe, &probe).map_err(other)?,
        };
        let kt = empirical_ntk(&trained, &probe, &probe).map_err(other)?;
        row.s_nt = 1.0 - cka(&k0, &kt).map_err(other)?;
    }

    let eval = match metrics.ck_eval {
        EvalSet::Test => cap_rows(&test.x, metrics.ck_cap),
        EvalSet::Train => cap_rows(&train.x, metrics.ck_cap),
    };
    if metrics.ck {
        let spectrum = ck::readout_spectrum(&trained, &eval).map_err(other)?;
        let f = network::predict(&trained, &eval).map_err(other)?;
        row.s_ck = match utilities_with_threshold(&spectrum, &f.column(0), metrics.ck_threshold) {
            Ok(p) => p.strength as f64,
            Err(ck::CkError::Degenerate) => f64::NAN,
            Err(e) => return Err(other(e)),
        };
    }

    let mut dims = vec![];
    if metrics.superposition {
        dims = superposition::dimensionality_reports(
            &trained,
            &eval,
            metrics.feature_axis,
            metrics.hist_bins,
            metrics.zero_tol,
        )
        .map_err(other)?;
        row.zero_frac = dims.iter().map(|d| d.zero_fraction).collect();
    }

    row.status = if !spec.shuffled
        && row.train_loss > metrics.slow_train_fraction * label_variance(&train.y)
    {
        CellStatus::SlowTraining
    } else {
        CellStatus::Ok
    };
    Ok(dims)
}

/// Every `(m, γ, shuffled, repeat)` combination, in that nesting order
/// (repeat outermost).
pub fn grid_cells(cfg: &ExperimentConfig, gammas: &[f64], shuffles: &[bool]) -> Vec<CellSpec> {
    let seeds = cfg.repeat_seeds();
    let mut cells = Vec::new();
    for (repeat, &seed) in seeds.iter().enumerate() {
        for &gamma in gammas {
            for &shuffled in shuffles {
                for &m in &cfg.m_grid {
                    cells.push(CellSpec {
                        m,
                        gamma,
                        shuffled,
                        repeat,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

/// Runs the cells concurrently on the current rayon pool and assembles the
/// result in cell order.
pub fn run_cells(
    cfg: &ExperimentConfig,
    cells: &[CellSpec],
) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let outcomes: Vec<CellOutcome> = cells.par_iter().map(|c| run_cell(cfg, c)).collect();
    let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let dims = outcomes
        .into_iter()
        .map(|o| (o.row.run_id, o.dims))
        .collect();
    let aggregates = aggregate(&rows);
    let curves = summarize(&aggregates, cfg.metrics.critical_eps);
    Ok(ExperimentResult {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        rows,
        aggregates,
        curves,
        dims,
    })
}

/// Learning curves for every configured `γ` and label arm.
pub fn run_learning_curve(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    run_cells(cfg, &grid_cells(cfg, &cfg.gammas, &cfg.shuffled))
}

/// True and shuffled labels on the same data, initialization and batch
/// order.
pub fn run_shuffle_compare(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    run_cells(cfg, &grid_cells(cfg, &cfg.gammas, &[false, true]))
}

/// The full metric grid for each output scale.
pub fn run_gamma_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    if cfg.gammas.len() < 2 {
        return Err(ExperimentError::Config(
            "gamma sweep needs at least two gamma values".into(),
        ));
    }
    run_cells(cfg, &grid_cells(cfg, &cfg.gammas, &cfg.shuffled))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub width: usize,
    pub depth: usize,
    pub lr: f64,
    pub m_star: Option<usize>,
    /// Grid points whose training did not finish normally.
    pub flagged: Vec<(usize, String)>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub config_hash: String,
    pub cells: Vec<SweepCell>,
    pub runs: Vec<ExperimentResult>,
}

/// `m*` of the true-label curve for every (width, depth, lr) combination,
/// at the first configured `γ`.
pub fn run_width_depth_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, ExperimentError> {
    let sw = &cfg.sweep;
    if sw.widths.is_empty() || sw.depths.is_empty() || sw.lrs.is_empty() {
        return Err(ExperimentError::Config(
            "sweep grids must be non-empty".into(),
        ));
    }
    let gamma = cfg.gammas[0];
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for &width in &sw.widths {
        for &depth in &sw.depths {
            for &lr in &sw.lrs {
                let mut c = cfg.clone();
                c.network.hidden_width = width;
                c.network.hidden_layers = depth;
                c.train.base_lr = lr;
                c.gammas = vec![gamma];
                c.shuffled = vec![false];
                let res = run_learning_curve(&c)?;
                let flagged = res
                    .rows
                    .iter()
                    .filter(|r| r.status != CellStatus::Ok)
                    .map(|r| (r.m, r.status.as_str().to_string()))
                    .collect();
                cells.push(SweepCell {
                    width,
                    depth,
                    lr,
                    m_star: res.curve(gamma, false).and_then(|s| s.m_star),
                    flagged,
                });
                runs.push(res);
            }
        }
    }
    Ok(SweepResult {
        config_hash: cfg.hash(),
        cells,
        runs,
    })
}

/// `mstar.csv`: one row per sweep cell; `m_star` empty when undefined.
pub fn sweep_to_csv(sweep: &SweepResult) -> String {
    let mut out = format!(
        "# config_sha256={}\nwidth,depth,lr,m_star,flagged\n",
        sweep.config_hash
    );
    for c in &sweep.cells {
        let flagged: Vec<String> = c.flagged.iter().map(|(m, s)| format!("{m}:{s}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.width,
            c.depth,
            c.lr,
            c.m_star.map(|m| m.to_string()).unwrap_or_default(),
            flagged.join(";")
        ));
    }
    out
}

fn curve_label(gamma: f64, shuffled: bool) -> String {
    format!("γ={gamma} {}", if shuffled { "shuffled" } else { "true" })
}

/// Learning curves, strength-vs-m panels, zero-dimensionality fractions
/// and first-layer histograms at the smallest and largest grid size.
pub fn emit_plots(result: &ExperimentResult) -> Result<Vec<(String, String)>, ExperimentError> {
    if result.rows.is_empty() {
        return Err(ExperimentError::EmptyResult);
    }
    let keys = curve_keys(&result.rows);
    let agg_curve = |g: f64, s: bool, f: fn(&Aggregate) -> f64| -> Vec<(f64, f64)> {
        result
            .aggregates
            .iter()
            .filter(|a| a.gamma == g && a.shuffled == s)
            .map(|a| (a.m as f64, f(a)))
            .collect()
    };
    let mut out = Vec::new();

    let mut series = Vec::new();
    for &(g, s) in &keys {
        series.push(Series {
            label: format!("NN {}", curve_label(g, s)),
            points: agg_curve(g, s, |a| a.nn_error.median),
            dashed: false,
        });
        series.push(Series {
            label: format!("NTK {}", curve_label(g, s)),
            points: agg_curve(g, s, |a| a.ntk_error.median),
            dashed: true,
        });
    }
    let chart = Chart {
        title: "Generalization error".into(),
        x_label: "training set size m".into(),
        y_label: "test MSE".into(),
        x_scale: Scale::Log,
        y_scale: Scale::Log,
        series,
    };
    out.push(("learning_curves.svg".to_string(), chart.to_svg()));

    for (file, title, f) in [
        (
            "s_nt.svg",
            "NTK alignment strength S_NT",
            (|a: &Aggregate| a.s_nt.median) as fn(&Aggregate) -> f64,
        ),
        ("s_ck.svg", "CK utility strength S_CK", |a: &Aggregate| {
            a.s_ck.median
        }),
        (
            "fl_gap.svg",
            "FL gap (NTK error − NN error)",
            |a: &Aggregate| a.fl_gap.median,
        ),
    ] {
        let series = keys
            .iter()
            .map(|&(g, s)| Series {
                label: curve_label(g, s),
                points: agg_curve(g, s, f),
                dashed: s,
            })
            .collect();
        let chart = Chart {
            title: title.into(),
            x_label: "training set size m".into(),
            y_label: title.split_whitespace().last().unwrap_or("").into(),
            x_scale: Scale::Log,
            y_scale: Scale::Linear,
            series,
        };
        out.push((file.to_string(), chart.to_svg()));
    }

    let layers = result
        .rows
        .iter()
        .map(|r| r.zero_frac.len())
        .max()
        .unwrap_or(0);
    if layers > 0 {
        let mut series = Vec::new();
        for &(g, s) in &keys {
            for l in 0..layers {
                let points = result
                    .rows_of(g, s, 0)
                    .iter()
                    .map(|r| (r.m as f64, r.zero_frac.get(l).copied().unwrap_or(f64::NAN)))
                    .collect();
                series.push(Series {
                    label: format!("L{} {}", l + 1, curve_label(g, s)),
                    points,
                    dashed: s,
                });
            }
        }
        let chart = Chart {
            title: "Fraction of zero feature dimensionality".into(),
            x_label: "training set size m".into(),
            y_label: "fraction".into(),
            x_scale: Scale::Log,
            y_scale: Scale::Linear,
            series,
        };
        out.push(("zero_fraction.svg".to_string(), chart.to_svg()));
    }

    let (m_lo, m_hi) = (
        result.rows.iter().map(|r| r.m).min().unwrap_or(0),
        result.rows.iter().map(|r| r.m).max().unwrap_or(0),
    );
    for (id, reports) in &result.dims {
        let Some(row) = result.rows.iter().find(|r| &r.run_id == id) else {
            continue;
        };
        if row.repeat != 0 || (row.m != m_lo && row.m != m_hi) {
            continue;
        }
        if let Some(first) = reports.first() {
            let title = format!(
                "Layer 1 feature dimensionality, m={} {}",
                row.m,
                curve_label(row.gamma, row.shuffled)
            );
            out.push((
                format!("hist_{id}_l1.svg"),
                histogram_svg(&title, &first.histogram),
            ));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct Summary<'a> {
    config_sha256: &'a str,
    critical_eps: f64,
    curves: &'a [CurveSummary],
}

/// Writes results.csv, aggregates.csv, summary.toml, config.toml, per-cell
/// dimensionality CSVs and the SVG plots under `dir`.
pub fn write_outputs(
    result: &ExperimentResult,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("plots")).map_err(io_err)?;
    let mut written = Vec::new();
    let mut put = |rel: String, body: String| -> Result<(), ExperimentError> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        std::fs::write(&path, body).map_err(io_err)?;
        written.push(path);
        Ok(())
    };
    put("results.csv".into(), result.results_csv())?;
    put(
        "aggregates.csv".into(),
        aggregates_to_csv(&result.aggregates, &result.config_hash),
    )?;
    let summary = Summary {
        config_sha256: &result.config_hash,
        critical_eps: result.config.metrics.critical_eps,
        curves: &result.curves,
    };
    put(
        "summary.toml".into(),
        toml::to_string(&summary).map_err(io_err)?,
    )?;
    put(
        "config.toml".into(),
        format!(
            "# config_sha256={}\n{}",
            result.config_hash,
            result.config.to_toml()
        ),
    )?;
    for (id, reports) in &result.dims {
        if reports.is_empty() {
            continue;
        }
        put(
            format!("cells/{id}/dims.csv"),
            superposition::dims_csv(reports),
        )?;
        put(
            format!("cells/{id}/hist.csv"),
            superposition::hist_csv(reports),
        )?;
    }
    if let Ok(plots) = emit_plots(result) {
        for (name, svg) in plots {
            put(format!("plots/{name}"), svg)?;
        }
    }
    Ok(written)
}

/// Runs `f` on a dedicated pool of `threads` workers (all cores when
/// `None`).
pub fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, ExperimentError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Rebuilds an [`ExperimentResult`] (without dimensionality reports) from a
/// results.csv, e.g. to re-plot.
pub fn result_from_csv(
    text: &str,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult, ExperimentError> {
    let (rows, hash) = results_from_csv(text)?;
    let aggregates = aggregate(&rows);
    let curves = summarize(&aggregates, cfg.metrics.critical_eps);
    Ok(ExperimentResult {
        config: cfg.clone(),
        config_hash: hash,
        rows,
        aggregates,
        curves,
        dims: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.msp =
            crate::datasets::MspSpec::new(6, vec![vec![0], vec![0, 1], vec![0, 1, 2]]).unwrap();
        cfg.m_grid = vec![16, 32, 64];
        cfg.test_size = 40;
        cfg.network.hidden_width = 8;
        cfg.network.hidden_layers = 2;
        cfg.train.epochs = 4;
        cfg.train.step_budget = 0;
        cfg.train.batch_size = 16;
        cfg.metrics.ck_cap = 30;
        cfg.metrics.hist_bins = 5;
        cfg
    }

    #[test]
    fn learning_curve_rows_and_consistency() {
        let cfg = tiny_config();
        let res = run_learning_curve(&cfg).unwrap();
        assert_eq!(res.rows.len(), 3);
        for r in &res.rows {
            assert_eq!(r.fl_gap, r.ntk_error - r.nn_error);
            assert!(r.s_nt >= 0.0 && r.s_nt <= 1.0);
            assert!(r.s_ck >= 1.0 && r.s_ck <= 8.0);
            assert_eq!(r.zero_frac.len(), 3);
            assert_eq!(r.epochs, 4);
        }
        assert_eq!(res.curves.len(), 1);
        let csv = res.results_csv();
        let (back, hash) = results_from_csv(&csv).unwrap();
        assert_eq!(hash, cfg.hash());
        assert!(back.iter().zip(&res.rows).all(|(a, b)| a.same_as(b)));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let cfg = tiny_config();
        let a = run_learning_curve(&cfg).unwrap().results_csv();
        let b = with_threads(Some(2), || run_learning_curve(&cfg).unwrap().results_csv()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_grid_point() {
        let mut cfg = tiny_config();
        cfg.m_grid = vec![32];
        let res = run_learning_curve(&cfg).unwrap();
        assert_eq!(res.rows.len(), 1);
        let ratio = res.rows[0].nn_error / res.rows[0].ntk_error;
        assert_eq!(res.curves[0].m_star.is_some(), ratio < 0.1);
    }

    #[test]
    fn shuffle_compare_pairs_arms() {
        let mut cfg = tiny_config();
        cfg.m_grid = vec![32];
        let res = run_shuffle_compare(&cfg).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert!(!res.rows[0].shuffled && res.rows[1].shuffled);
        // shared inputs and initialization give identical kernel at θ₀ on
        // the inputs, but labels differ
        assert_ne!(res.rows[0].nn_error, res.rows[1].nn_error);
    }

    #[test]
    fn duplicated_gamma_gives_identical_arms() {
        let mut cfg = tiny_config();
        cfg.m_grid = vec![16, 32];
        cfg.gammas = vec![1.0, 1.0];
        let res = run_gamma_sweep(&cfg).unwrap();
        assert_eq!(res.rows.len(), 4);
        assert!(res.rows[0].same_as(&res.rows[2]));
        assert!(res.rows[1].same_as(&res.rows[3]));
        cfg.gammas = vec![1.0];
        assert!(run_gamma_sweep(&cfg).is_err());
    }

    #[test]
    fn divergence_is_recorded_not_fatal() {
        let mut cfg = tiny_config();
        cfg.m_grid = vec![16];
        cfg.gammas = vec![1e-300];
        let res = run_learning_curve(&cfg).unwrap();
        assert_ne!(res.rows[0].status, CellStatus::Ok);
        assert!(res.rows[0].nn_error.is_nan());
    }

    #[test]
    fn slow_training_is_flagged() {
        let mut cfg = tiny_config();
        cfg.m_grid = vec![64];
        cfg.train.base_lr = 1e-9;
        cfg.train.epochs = 1;
        cfg.sweep = SweepSection {
            widths: vec![8],
            depths: vec![2],
            lrs: vec![1e-9],
        };
        let sweep = run_width_depth_sweep(&cfg).unwrap();
        assert_eq!(sweep.cells.len(), 1);
        assert_eq!(
            sweep.cells[0].flagged,
            vec![(64, "slow_training".to_string())]
        );
        assert!(sweep_to_csv(&sweep).contains("8,2,0.000000001,,64:slow_training"));
    }

    #[test]
    fn plots_and_outputs() {
        let cfg = tiny_config();
        let res = run_learning_curve(&cfg).unwrap();
        let plots = emit_plots(&res).unwrap();
        let names: Vec<&str> = plots.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"learning_curves.svg"));
        assert!(names.contains(&"s_nt.svg"));
        assert!(names.iter().any(|n| n.starts_with("hist_m16_")));
        assert_eq!(plots, emit_plots(&res).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let written = write_outputs(&res, dir.path()).unwrap();
        assert!(written.iter().any(|p| p.ends_with("results.csv")));
        assert!(dir.path().join("plots/learning_curves.svg").exists());
        assert!(dir.path().join("cells/m64_g1_true_r0/dims.csv").exists());
        let empty = ExperimentResult {
            rows: vec![],
            ..res
        };
        assert!(matches!(
            emit_plots(&empty),
            Err(ExperimentError::EmptyResult)
        ));
    }
}
