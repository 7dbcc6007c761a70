//! Grid sweeps over loss family, beta, gamma, imbalance and seed.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::effnum::effective_number;
use crate::error::{Error, Result};
use crate::harness::config::{BetaSetting, DataSource, PreparedData};
use crate::losses::LossFamily;
use crate::trainer::{default_tail_k, evaluate, train_model, LossConfig, TrainConfig};

pub const RESULTS_HEADER: [&str; 11] = [
    "dataset_id",
    "imbalance",
    "family",
    "beta",
    "gamma",
    "seed",
    "status",
    "overall_error",
    "tail_error",
    "per_class_errors",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub families: Vec<LossFamily>,
    pub betas: Vec<BetaSetting>,
    /// Only used by the focal family; the others run with gamma 0.
    pub gammas: Vec<f64>,
    pub imbalances: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            families: LossFamily::ALL.to_vec(),
            betas: vec![
                BetaSetting::None,
                BetaSetting::Value(0.9),
                BetaSetting::Value(0.99),
                BetaSetting::Value(0.999),
                BetaSetting::Value(0.9999),
            ],
            gammas: vec![0.5, 1.0, 2.0],
            imbalances: vec![10.0, 100.0],
            seeds: vec![0],
        }
    }
}

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub imbalance: f64,
    pub family: LossFamily,
    pub beta: BetaSetting,
    pub gamma: f64,
    pub seed: u64,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("families", self.families.is_empty()),
            ("betas", self.betas.is_empty()),
            ("imbalances", self.imbalances.is_empty()),
            ("seeds", self.seeds.is_empty()),
            (
                "gammas",
                self.gammas.is_empty() && self.families.contains(&LossFamily::Focal),
            ),
        ];
        if let Some((axis, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("grid axis '{axis}' is empty")));
        }
        if let Some(f) = self
            .imbalances
            .iter()
            .find(|f| !(**f >= 1.0 && f.is_finite()))
        {
            return Err(Error::Config(format!("imbalance must be >= 1, got {f}")));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("gamma must be >= 0, got {g}")));
        }
        Ok(())
    }

    fn gammas_for(&self, family: LossFamily) -> Vec<f64> {
        match family {
            LossFamily::Focal => self.gammas.clone(),
            _ => vec![0.0],
        }
    }

    /// Every grid point, in canonical order: imbalance, family, beta, gamma,
    /// seed (the last varies fastest).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &imbalance in &self.imbalances {
            for &family in &self.families {
                for &beta in &self.betas {
                    for gamma in self.gammas_for(family) {
                        for &seed in &self.seeds {
                            out.push(GridPoint {
                                imbalance,
                                family,
                                beta,
                                gamma,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    /// Fraction of each training class held out for model selection; 0
    /// disables the split.
    pub val_fraction: f64,
    /// Tail size; defaults to `ceil(C / 3)`.
    pub tail_k: Option<usize>,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            tail_k: None,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    Failed,
}

impl fmt::Display for RowStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowStatus::Ok => "ok",
            RowStatus::Failed => "failed",
        })
    }
}

/// Outcome of one grid point. Error fields are `None` for failed runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset_id: String,
    pub imbalance: f64,
    pub family: LossFamily,
    pub beta: BetaSetting,
    pub gamma: f64,
    pub seed: u64,
    pub status: RowStatus,
    pub overall_error: Option<f64>,
    pub tail_error: Option<f64>,
    pub per_class_errors: Vec<f64>,
    /// Error on the held-out validation part of the training data.
    pub val_error: Option<f64>,
    /// `E_{n_i}` of the training counts under this row's beta; the raw
    /// counts when no balance term is used.
    pub effective_numbers: Vec<f64>,
    pub wall_seconds: f64,
    pub message: Option<String>,
}

impl ReportRow {
    fn failed(dataset_id: String, p: &GridPoint, message: String, wall_seconds: f64) -> Self {
        Self {
            dataset_id,
            imbalance: p.imbalance,
            family: p.family,
            beta: p.beta,
            gamma: p.gamma,
            seed: p.seed,
            status: RowStatus::Failed,
            overall_error: None,
            tail_error: None,
            per_class_errors: Vec::new(),
            val_error: None,
            effective_numbers: Vec::new(),
            wall_seconds,
            message: Some(message),
        }
    }

    /// Fields of `results.csv`, in header order.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.dataset_id.clone(),
            self.imbalance.to_string(),
            self.family.to_string(),
            self.beta.to_string(),
            self.gamma.to_string(),
            self.seed.to_string(),
            self.status.to_string(),
            opt(self.overall_error),
            opt(self.tail_error),
            join_errors(&self.per_class_errors),
            self.wall_seconds.to_string(),
        ]
    }
}

pub fn join_errors(v: &[f64]) -> String {
    v.iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn run_point(
    data: &std::result::Result<PreparedData, String>,
    fallback_id: &str,
    p: &GridPoint,
    base: &TrainConfig,
    opts: &SweepOptions,
) -> ReportRow {
    let start = Instant::now();
    let data = match data {
        Ok(d) => d,
        Err(msg) => return ReportRow::failed(fallback_id.to_string(), p, msg.clone(), 0.0),
    };
    match try_run_point(data, p, base, opts) {
        Ok(row) => row,
        Err(e) => ReportRow::failed(
            data.dataset_id.clone(),
            p,
            e.to_string(),
            start.elapsed().as_secs_f64(),
        ),
    }
}

fn try_run_point(
    data: &PreparedData,
    p: &GridPoint,
    base: &TrainConfig,
    opts: &SweepOptions,
) -> Result<ReportRow> {
    let (train_part, val_part) = if opts.val_fraction > 0.0 {
        let (t, v) = data.train.split_stratified(opts.val_fraction, p.seed)?;
        (t, Some(v))
    } else {
        (data.train.clone(), None)
    };
    let config = TrainConfig {
        loss: LossConfig {
            family: p.family,
            gamma: p.gamma,
            beta: p.beta.as_option(),
        },
        seed: p.seed,
        ..base.clone()
    };
    let (record, model) = train_model(&train_part, &data.test, &config)?;
    let counts = record.train_counts.as_slice();
    let effective_numbers = match p.beta {
        BetaSetting::None => counts.iter().map(|&n| n as f64).collect(),
        BetaSetting::Value(b) => counts
            .iter()
            .map(|&n| effective_number(b, n))
            .collect::<Result<_>>()?,
    };
    let mut row = ReportRow {
        dataset_id: data.dataset_id.clone(),
        imbalance: p.imbalance,
        family: p.family,
        beta: p.beta,
        gamma: p.gamma,
        seed: p.seed,
        status: RowStatus::Ok,
        overall_error: None,
        tail_error: None,
        per_class_errors: Vec::new(),
        val_error: None,
        effective_numbers,
        wall_seconds: record.wall_seconds,
        message: None,
    };
    match (&record.status, &record.final_eval) {
        (s, Some(eval)) if s.is_completed() => {
            let k = opts
                .tail_k
                .unwrap_or_else(|| default_tail_k(train_part.n_classes()));
            row.overall_error = Some(eval.overall_error);
            row.tail_error = Some(eval.tail_error(&record.train_counts, k));
            row.per_class_errors = eval.per_class_error.clone();
            if let Some(val) = &val_part {
                row.val_error = Some(evaluate(&model, val)?.overall_error);
            }
        }
        (status, _) => {
            row.status = RowStatus::Failed;
            row.message = Some(format!("{status:?}"));
        }
    }
    Ok(row)
}

/// Runs every grid point and returns the rows in canonical grid order.
/// Individual failures become rows with [`RowStatus::Failed`].
pub fn run_sweep(
    source: &DataSource,
    grid: &SweepGrid,
    base: &TrainConfig,
    opts: &SweepOptions,
) -> Result<Vec<ReportRow>> {
    grid.validate()?;
    base.validate()?;
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {}",
            opts.val_fraction
        )));
    }
    let work = || {
        let keys: Vec<(f64, u64)> = grid
            .imbalances
            .iter()
            .flat_map(|&f| grid.seeds.iter().map(move |&s| (f, s)))
            .collect();
        let prepared: Vec<_> = keys
            .par_iter()
            .map(|&(f, s)| source.prepare(f, s).map_err(|e| e.to_string()))
            .collect();
        let points = grid.points();
        points
            .par_iter()
            .map(|p| {
                let i = grid
                    .imbalances
                    .iter()
                    .position(|&f| f == p.imbalance)
                    .expect("grid imbalance");
                let j = grid
                    .seeds
                    .iter()
                    .position(|&s| s == p.seed)
                    .expect("grid seed");
                let fallback = super::config::dataset_id(source.id(), p.imbalance);
                run_point(
                    &prepared[i * grid.seeds.len() + j],
                    &fallback,
                    p,
                    base,
                    opts,
                )
            })
            .collect::<Vec<_>>()
    };
    match opts.jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

pub fn write_results_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for row in rows {
        w.write_record(row.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// A (family, beta, gamma) configuration aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSummary {
    pub dataset_id: String,
    pub family: LossFamily,
    pub beta: BetaSetting,
    pub gamma: f64,
    pub n_seeds: usize,
    pub selection_error: f64,
    pub overall_error: (f64, f64),
    pub tail_error: (f64, f64),
}

/// Aggregates completed rows per (dataset, family, beta, gamma). Configs with
/// any failed seed are left out. Selection uses validation error when
/// available, test error otherwise.
pub fn summarize_configs(rows: &[ReportRow]) -> Vec<ConfigSummary> {
    let mut groups: Vec<(String, LossFamily, BetaSetting, f64, Vec<&ReportRow>)> = Vec::new();
    for row in rows {
        let key = |g: &(String, LossFamily, BetaSetting, f64, Vec<&ReportRow>)| {
            g.0 == row.dataset_id && g.1 == row.family && g.2 == row.beta && g.3 == row.gamma
        };
        match groups.iter_mut().find(|g| key(g)) {
            Some(g) => g.4.push(row),
            None => groups.push((
                row.dataset_id.clone(),
                row.family,
                row.beta,
                row.gamma,
                vec![row],
            )),
        }
    }
    groups
        .into_iter()
        .filter(|g| g.4.iter().all(|r| r.status == RowStatus::Ok))
        .map(|(dataset_id, family, beta, gamma, rs)| {
            let overall: Vec<f64> = rs.iter().filter_map(|r| r.overall_error).collect();
            let tail: Vec<f64> = rs.iter().filter_map(|r| r.tail_error).collect();
            let select: Vec<f64> = rs
                .iter()
                .map(|r| r.val_error.or(r.overall_error).unwrap_or(1.0))
                .collect();
            ConfigSummary {
                dataset_id,
                family,
                beta,
                gamma,
                n_seeds: rs.len(),
                selection_error: mean_std(&select).0,
                overall_error: mean_std(&overall),
                tail_error: mean_std(&tail),
            }
        })
        .collect()
}

/// Best configuration per (dataset, family) and per dataset overall, by
/// lowest selection error; ties keep the earlier grid position.
pub fn best_configs(summaries: &[ConfigSummary]) -> Vec<(String, ConfigSummary)> {
    let mut out: Vec<(String, ConfigSummary)> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for s in summaries {
        if !datasets.contains(&s.dataset_id.as_str()) {
            datasets.push(&s.dataset_id);
        }
    }
    let pick = |it: &mut dyn Iterator<Item = &ConfigSummary>| {
        it.fold(None::<&ConfigSummary>, |best, s| match best {
            Some(b) if b.selection_error <= s.selection_error => Some(b),
            _ => Some(s),
        })
        .cloned()
    };
    for d in datasets {
        for family in LossFamily::ALL {
            if let Some(b) = pick(
                &mut summaries
                    .iter()
                    .filter(|s| s.dataset_id == d && s.family == family),
            ) {
                out.push((family.to_string(), b));
            }
        }
        if let Some(b) = pick(&mut summaries.iter().filter(|s| s.dataset_id == d)) {
            out.push(("overall".to_string(), b));
        }
    }
    out
}

pub fn write_summary_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset_id",
        "scope",
        "family",
        "beta",
        "gamma",
        "n_seeds",
        "selection_error",
        "overall_error_mean",
        "overall_error_std",
        "tail_error_mean",
        "tail_error_std",
    ])?;
    for (scope, s) in best_configs(&summarize_configs(rows)) {
        w.write_record([
            s.dataset_id.clone(),
            scope,
            s.family.to_string(),
            s.beta.to_string(),
            s.gamma.to_string(),
            s.n_seeds.to_string(),
            s.selection_error.to_string(),
            s.overall_error.0.to_string(),
            s.overall_error.1.to_string(),
            s.tail_error.0.to_string(),
            s.tail_error.1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv` and `summary.csv` into `dir` and reports failures to
/// `log`. Returns the number of failed runs.
pub fn write_sweep_outputs(rows: &[ReportRow], dir: &Path, log: &mut dyn Write) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    write_results_csv(rows, &dir.join("results.csv"))?;
    write_summary_csv(rows, &dir.join("summary.csv"))?;
    let mut failed = 0;
    for row in rows.iter().filter(|r| r.status == RowStatus::Failed) {
        failed += 1;
        writeln!(
            log,
            "failed: {} {} beta={} gamma={} seed={}: {}",
            row.dataset_id,
            row.family,
            row.beta,
            row.gamma,
            row.seed,
            row.message.as_deref().unwrap_or("unknown error")
        )?;
    }
    Ok(failed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::SyntheticSetup;

    fn tiny_source() -> DataSource {
        DataSource::Synthetic(SyntheticSetup {
            n_classes: 3,
            base_count: 60,
            dim: 4,
            test_per_class: 20,
            ..SyntheticSetup::default()
        })
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            ..TrainConfig::default().with_epochs(4)
        }
    }

    #[test]
    fn default_grid_has_25_configs_per_imbalance() {
        let g = SweepGrid::default();
        let pts = g.points();
        assert_eq!(pts.len(), 2 * (5 + 5 + 5 * 3));
        assert_eq!(pts[0].family, LossFamily::Softmax);
        assert_eq!(pts[0].beta, BetaSetting::None);
        assert!(pts
            .iter()
            .filter(|p| p.family != LossFamily::Focal)
            .all(|p| p.gamma == 0.0));
        assert_eq!(pts[25].imbalance, 100.0);
    }

    #[test]
    fn empty_axes_are_rejected() {
        let mut g = SweepGrid::default();
        g.seeds.clear();
        assert!(g.validate().is_err());
        let mut g = SweepGrid::default();
        g.gammas.clear();
        assert!(g.validate().is_err());
        g.families = vec![LossFamily::Softmax];
        assert!(g.validate().is_ok());
        let mut g = SweepGrid::default();
        g.imbalances = vec![0.5];
        assert!(g.validate().is_err());
    }

    #[test]
    fn single_baseline_row_on_balanced_data() {
        let grid = SweepGrid {
            families: vec![LossFamily::Softmax],
            betas: vec![BetaSetting::None],
            gammas: vec![],
            imbalances: vec![1.0],
            seeds: vec![0],
        };
        let rows = run_sweep(&tiny_source(), &grid, &quick(), &SweepOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!(r.status, RowStatus::Ok);
        assert_eq!(r.dataset_id, "synthetic_if1");
        assert!(r.val_error.is_some());
        assert!(r.per_class_errors.iter().all(|e| (0.0..=1.0).contains(e)));
    }

    #[test]
    fn beta_zero_matches_plain_baseline() {
        let grid = SweepGrid {
            families: LossFamily::ALL.to_vec(),
            betas: vec![BetaSetting::None, BetaSetting::Value(0.0)],
            gammas: vec![1.0],
            imbalances: vec![5.0],
            seeds: vec![1, 2],
        };
        let rows = run_sweep(&tiny_source(), &grid, &quick(), &SweepOptions::default()).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 2);
        for pair in rows.chunks(4) {
            for s in 0..2 {
                let (none, zero) = (&pair[s], &pair[2 + s]);
                assert_eq!(none.beta, BetaSetting::None);
                assert_eq!(zero.beta, BetaSetting::Value(0.0));
                assert_eq!(none.overall_error, zero.overall_error);
                assert_eq!(none.tail_error, zero.tail_error);
                assert_eq!(none.per_class_errors, zero.per_class_errors);
                assert_eq!(none.val_error, zero.val_error);
            }
        }
    }

    #[test]
    fn concurrency_does_not_change_rows() {
        let grid = SweepGrid {
            families: vec![LossFamily::Softmax, LossFamily::Focal],
            betas: vec![BetaSetting::None, BetaSetting::Value(0.99)],
            gammas: vec![0.5, 2.0],
            imbalances: vec![4.0],
            seeds: vec![3],
        };
        let strip = |rows: Vec<ReportRow>| -> Vec<Vec<String>> {
            rows.iter()
                .map(|r| {
                    let mut f = r.csv_fields();
                    f.pop();
                    f
                })
                .collect()
        };
        let one = SweepOptions {
            jobs: Some(1),
            ..SweepOptions::default()
        };
        let four = SweepOptions {
            jobs: Some(4),
            ..SweepOptions::default()
        };
        let a = strip(run_sweep(&tiny_source(), &grid, &quick(), &one).unwrap());
        let b = strip(run_sweep(&tiny_source(), &grid, &quick(), &four).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn diverging_runs_are_failed_rows() {
        let grid = SweepGrid {
            families: vec![LossFamily::Softmax],
            betas: vec![BetaSetting::None],
            gammas: vec![],
            imbalances: vec![2.0],
            seeds: vec![0],
        };
        let base = TrainConfig {
            lr: 1e200,
            warmup_epochs: 0,
            ..quick()
        };
        let rows = run_sweep(&tiny_source(), &grid, &base, &SweepOptions::default()).unwrap();
        assert_eq!(rows[0].status, RowStatus::Failed);
        assert_eq!(rows[0].csv_fields()[7], "");
        let mut log = Vec::new();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_sweep_outputs(&rows, dir.path(), &mut log).unwrap(), 1);
        assert!(String::from_utf8(log)
            .unwrap()
            .starts_with("failed: synthetic_if2 softmax"));
    }

    #[test]
    fn best_config_selection() {
        let row = |family, beta, err: f64| ReportRow {
            dataset_id: "d".into(),
            imbalance: 10.0,
            family,
            beta,
            gamma: 0.0,
            seed: 0,
            status: RowStatus::Ok,
            overall_error: Some(err),
            tail_error: Some(err),
            per_class_errors: vec![err],
            val_error: None,
            effective_numbers: vec![],
            wall_seconds: 0.0,
            message: None,
        };
        let rows = vec![
            row(LossFamily::Softmax, BetaSetting::None, 0.3),
            row(LossFamily::Softmax, BetaSetting::Value(0.9), 0.2),
            row(LossFamily::Sigmoid, BetaSetting::None, 0.1),
            row(LossFamily::Sigmoid, BetaSetting::Value(0.9), 0.1),
        ];
        let best = best_configs(&summarize_configs(&rows));
        assert_eq!(best.len(), 3);
        assert_eq!(best[0].0, "softmax");
        assert_eq!(best[0].1.beta, BetaSetting::Value(0.9));
        assert_eq!(best[1].1.beta, BetaSetting::None);
        assert_eq!(best[2].0, "overall");
        assert_eq!(best[2].1.family, LossFamily::Sigmoid);
    }
}
