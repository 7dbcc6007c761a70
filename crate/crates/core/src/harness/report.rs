//! Post-processing of `results.csv`: deltas against the plain-loss baseline,
//! best-configuration tables and effective-number curves.

use std::path::Path;

use crate::effnum::{class_balanced_weights, effective_number, ClassCounts};
use crate::error::{Error, Result};
use crate::harness::config::BetaSetting;
use crate::harness::sweep::{
    best_configs, summarize_configs, ReportRow, RowStatus, RESULTS_HEADER,
};
use crate::losses::LossFamily;

/// Default beta set for effective-number curves when the results carry none.
pub const CURVE_BETAS: [f64; 5] = [0.0, 0.9, 0.99, 0.999, 0.9999];

/// Reads a `results.csv` written by the sweep. Every column of the results
/// schema must be present; extra columns are ignored.
pub fn read_results_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; RESULTS_HEADER.len()];
    for (slot, name) in idx.iter_mut().zip(RESULTS_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))?;
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let bad = |col: &str, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("column '{col}': {reason}"),
        };
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse()
                .map_err(|_| bad(RESULTS_HEADER[k], format!("not a number: '{}'", field(k))))
        };
        let opt_num = |k: usize| -> Result<Option<f64>> {
            if field(k).is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let status = match field(6) {
            "ok" => RowStatus::Ok,
            "failed" => RowStatus::Failed,
            other => {
                return Err(bad(
                    "status",
                    format!("expected ok or failed, got '{other}'"),
                ))
            }
        };
        let per_class_errors = if field(9).is_empty() {
            Vec::new()
        } else {
            field(9)
                .split(';')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("per_class_errors", "not a list of numbers".into()))?
        };
        rows.push(ReportRow {
            dataset_id: field(0).to_string(),
            imbalance: num(1)?,
            family: field(2)
                .parse()
                .map_err(|e: Error| bad("family", e.to_string()))?,
            beta: field(3)
                .parse()
                .map_err(|e: Error| bad("beta", e.to_string()))?,
            gamma: num(4)?,
            seed: field(5)
                .parse()
                .map_err(|_| bad("seed", format!("not an integer: '{}'", field(5))))?,
            status,
            overall_error: opt_num(7)?,
            tail_error: opt_num(8)?,
            per_class_errors,
            val_error: None,
            effective_numbers: Vec::new(),
            wall_seconds: num(10)?,
            message: None,
        });
    }
    Ok(rows)
}

/// Per-seed change in error relative to the plain-loss row with the same
/// dataset, family, gamma and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub dataset_id: String,
    pub imbalance: f64,
    pub family: LossFamily,
    pub beta: BetaSetting,
    pub gamma: f64,
    pub seed: u64,
    pub overall_error: f64,
    pub baseline_overall_error: f64,
    pub delta_overall_error: f64,
    pub tail_error: f64,
    pub baseline_tail_error: f64,
    pub delta_tail_error: f64,
}

/// Rows without a completed baseline, or failed themselves, are skipped.
pub fn baseline_deltas(rows: &[ReportRow]) -> Vec<DeltaRow> {
    let ok = |r: &&ReportRow| {
        r.status == RowStatus::Ok && r.overall_error.is_some() && r.tail_error.is_some()
    };
    rows.iter()
        .filter(ok)
        .filter_map(|r| {
            let base = rows.iter().filter(ok).find(|b| {
                b.beta == BetaSetting::None
                    && b.dataset_id == r.dataset_id
                    && b.family == r.family
                    && b.gamma == r.gamma
                    && b.seed == r.seed
            })?;
            let (o, bo) = (r.overall_error?, base.overall_error?);
            let (t, bt) = (r.tail_error?, base.tail_error?);
            Some(DeltaRow {
                dataset_id: r.dataset_id.clone(),
                imbalance: r.imbalance,
                family: r.family,
                beta: r.beta,
                gamma: r.gamma,
                seed: r.seed,
                overall_error: o,
                baseline_overall_error: bo,
                delta_overall_error: o - bo,
                tail_error: t,
                baseline_tail_error: bt,
                delta_tail_error: t - bt,
            })
        })
        .collect()
}

pub fn write_deltas_csv(deltas: &[DeltaRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset_id",
        "imbalance",
        "family",
        "beta",
        "gamma",
        "seed",
        "overall_error",
        "baseline_overall_error",
        "delta_overall_error",
        "tail_error",
        "baseline_tail_error",
        "delta_tail_error",
    ])?;
    for d in deltas {
        w.write_record([
            d.dataset_id.clone(),
            d.imbalance.to_string(),
            d.family.to_string(),
            d.beta.to_string(),
            d.gamma.to_string(),
            d.seed.to_string(),
            d.overall_error.to_string(),
            d.baseline_overall_error.to_string(),
            d.delta_overall_error.to_string(),
            d.tail_error.to_string(),
            d.baseline_tail_error.to_string(),
            d.delta_tail_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean deltas over seeds per (dataset, family, beta, gamma).
pub fn write_delta_summary_csv(deltas: &[DeltaRow], path: &Path) -> Result<()> {
    let mut groups: Vec<(&DeltaRow, Vec<&DeltaRow>)> = Vec::new();
    for d in deltas {
        let same = |g: &&DeltaRow| {
            g.dataset_id == d.dataset_id
                && g.family == d.family
                && g.beta == d.beta
                && g.gamma == d.gamma
        };
        match groups.iter_mut().find(|(k, _)| same(k)) {
            Some((_, v)) => v.push(d),
            None => groups.push((d, vec![d])),
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset_id",
        "imbalance",
        "family",
        "beta",
        "gamma",
        "n_seeds",
        "mean_delta_overall_error",
        "mean_delta_tail_error",
    ])?;
    for (k, v) in groups {
        let n = v.len() as f64;
        w.write_record([
            k.dataset_id.clone(),
            k.imbalance.to_string(),
            k.family.to_string(),
            k.beta.to_string(),
            k.gamma.to_string(),
            v.len().to_string(),
            (v.iter().map(|d| d.delta_overall_error).sum::<f64>() / n).to_string(),
            (v.iter().map(|d| d.delta_tail_error).sum::<f64>() / n).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per dataset: the best plain-loss and the best class-balanced configuration
/// of each family, then the best of each kind over all families. Ranked by
/// mean test error over seeds.
pub fn write_best_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let summaries = summarize_configs(rows);
    let (plain, balanced): (Vec<_>, Vec<_>) = summaries
        .into_iter()
        .partition(|s| s.beta == BetaSetting::None);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset_id",
        "scope",
        "kind",
        "family",
        "beta",
        "gamma",
        "n_seeds",
        "overall_error_mean",
        "overall_error_std",
        "tail_error_mean",
        "tail_error_std",
    ])?;
    let mut entries: Vec<(String, &str, _)> = best_configs(&plain)
        .into_iter()
        .map(|(scope, s)| (scope, "baseline", s))
        .chain(
            best_configs(&balanced)
                .into_iter()
                .map(|(scope, s)| (scope, "class_balanced", s)),
        )
        .collect();
    // group by dataset in first-seen order, keeping family rows before overall
    let order: Vec<String> = rows.iter().fold(Vec::new(), |mut acc, r| {
        if !acc.contains(&r.dataset_id) {
            acc.push(r.dataset_id.clone());
        }
        acc
    });
    let scope_rank = |s: &str| match s {
        "overall" => LossFamily::ALL.len(),
        f => LossFamily::ALL
            .iter()
            .position(|x| x.as_str() == f)
            .unwrap_or(0),
    };
    entries.sort_by_key(|(scope, kind, s)| {
        (
            order
                .iter()
                .position(|d| *d == s.dataset_id)
                .unwrap_or(usize::MAX),
            scope_rank(scope),
            *kind != "baseline",
        )
    });
    for (scope, kind, s) in entries {
        w.write_record([
            s.dataset_id.clone(),
            scope,
            kind.to_string(),
            s.family.to_string(),
            s.beta.to_string(),
            s.gamma.to_string(),
            s.n_seeds.to_string(),
            s.overall_error.0.to_string(),
            s.overall_error.1.to_string(),
            s.tail_error.0.to_string(),
            s.tail_error.1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Distinct numeric betas of `rows` in first-seen order, or [`CURVE_BETAS`].
pub fn curve_betas(rows: &[ReportRow]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for r in rows {
        if let BetaSetting::Value(b) = r.beta {
            if !out.contains(&b) {
                out.push(b);
            }
        }
    }
    if out.is_empty() {
        CURVE_BETAS.to_vec()
    } else {
        out
    }
}

/// Roughly log-spaced sample sizes from 1 to `n_max`, deduplicated.
pub fn log_grid(n_max: u64, per_decade: usize) -> Vec<u64> {
    let mut out = vec![1u64];
    let decades = (n_max as f64).log10();
    let steps = (decades * per_decade as f64).ceil() as usize;
    for k in 1..=steps {
        let n = (10f64.powf(k as f64 / per_decade as f64).round() as u64).min(n_max);
        if n > *out.last().expect("non-empty") {
            out.push(n);
        }
    }
    if *out.last().expect("non-empty") < n_max {
        out.push(n_max);
    }
    out
}

/// `beta,n,effective_number,weight` rows, weight being `1 / E_n`.
pub fn write_effnum_grid_csv(betas: &[f64], ns: &[u64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["beta", "n", "effective_number", "weight"])?;
    for &b in betas {
        for &n in ns {
            let e = effective_number(b, n)?;
            w.write_record([
                b.to_string(),
                n.to_string(),
                e.to_string(),
                (1.0 / e).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-class effective numbers and normalized class-balanced weights.
pub fn write_effnum_profile_csv(betas: &[f64], counts: &ClassCounts, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "beta",
        "class_index",
        "count",
        "effective_number",
        "class_weight",
    ])?;
    for &b in betas {
        let weights = class_balanced_weights(counts, b)?;
        for (c, (&n, &a)) in counts.as_slice().iter().zip(weights.as_slice()).enumerate() {
            w.write_record([
                b.to_string(),
                c.to_string(),
                n.to_string(),
                effective_number(b, n)?.to_string(),
                a.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `deltas.csv`, `delta_summary.csv`, `best.csv` and
/// `effnum_curves.csv` into `dir`.
pub fn write_report(rows: &[ReportRow], profile: Option<&ClassCounts>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let deltas = baseline_deltas(rows);
    write_deltas_csv(&deltas, &dir.join("deltas.csv"))?;
    write_delta_summary_csv(&deltas, &dir.join("delta_summary.csv"))?;
    write_best_csv(rows, &dir.join("best.csv"))?;
    let betas = curve_betas(rows);
    let curves = dir.join("effnum_curves.csv");
    match profile {
        Some(counts) => write_effnum_profile_csv(&betas, counts, &curves),
        None => write_effnum_grid_csv(&betas, &log_grid(100_000, 10), &curves),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sweep::write_results_csv;

    fn row(family: LossFamily, beta: BetaSetting, seed: u64, err: f64) -> ReportRow {
        ReportRow {
            dataset_id: "d_if10".into(),
            imbalance: 10.0,
            family,
            beta,
            gamma: 0.0,
            seed,
            status: RowStatus::Ok,
            overall_error: Some(err),
            tail_error: Some(2.0 * err),
            per_class_errors: vec![err, 0.5],
            val_error: None,
            effective_numbers: vec![],
            wall_seconds: 0.25,
            message: None,
        }
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let mut failed = row(LossFamily::Focal, BetaSetting::Value(0.99), 1, 0.0);
        failed.status = RowStatus::Failed;
        failed.overall_error = None;
        failed.tail_error = None;
        failed.per_class_errors.clear();
        let rows = vec![
            row(LossFamily::Softmax, BetaSetting::None, 0, 0.125),
            failed,
        ];
        write_results_csv(&rows, &path).unwrap();
        assert_eq!(read_results_csv(&path).unwrap(), rows);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        std::fs::write(&path, "dataset_id,imbalance,family,beta,gamma,seed,status,overall_error,per_class_errors,wall_seconds\n").unwrap();
        let err = read_results_csv(&path).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("tail_error"), "{err}");
    }

    #[test]
    fn bad_values_report_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let mut text = RESULTS_HEADER.join(",");
        text.push_str("\nd,10,softmax,none,0,0,ok,abc,0.1,0.1;0.2,1\n");
        std::fs::write(&path, text).unwrap();
        let msg = read_results_csv(&path).unwrap_err().to_string();
        assert!(
            msg.contains("line 2") && msg.contains("overall_error"),
            "{msg}"
        );
    }

    #[test]
    fn baselines_only_give_zero_deltas() {
        let rows = vec![
            row(LossFamily::Softmax, BetaSetting::None, 0, 0.3),
            row(LossFamily::Softmax, BetaSetting::None, 1, 0.4),
            row(LossFamily::Sigmoid, BetaSetting::None, 0, 0.2),
        ];
        let d = baseline_deltas(&rows);
        assert_eq!(d.len(), 3);
        assert!(d
            .iter()
            .all(|d| d.delta_overall_error == 0.0 && d.delta_tail_error == 0.0));
    }

    #[test]
    fn deltas_pair_by_seed() {
        let rows = vec![
            row(LossFamily::Softmax, BetaSetting::None, 0, 0.3),
            row(LossFamily::Softmax, BetaSetting::None, 1, 0.4),
            row(LossFamily::Softmax, BetaSetting::Value(0.0), 0, 0.3),
            row(LossFamily::Softmax, BetaSetting::Value(0.99), 1, 0.25),
            row(LossFamily::Sigmoid, BetaSetting::Value(0.99), 1, 0.25),
        ];
        let d = baseline_deltas(&rows);
        assert_eq!(d.len(), 4);
        assert_eq!(d[2].beta, BetaSetting::Value(0.0));
        assert_eq!(d[2].delta_overall_error, 0.0);
        assert!((d[3].delta_overall_error + 0.15).abs() < 1e-15);
        assert!((d[3].delta_tail_error + 0.3).abs() < 1e-15);
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row(LossFamily::Softmax, BetaSetting::None, 0, 0.3),
            row(LossFamily::Softmax, BetaSetting::Value(0.9), 0, 0.2),
        ];
        let counts = ClassCounts::new(vec![100, 10]).unwrap();
        write_report(&rows, Some(&counts), dir.path()).unwrap();
        let best = std::fs::read_to_string(dir.path().join("best.csv")).unwrap();
        let lines: Vec<&str> = best.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("d_if10,softmax,baseline,softmax,none"));
        assert!(lines[2].starts_with("d_if10,softmax,class_balanced,softmax,0.9"));
        let curves = std::fs::read_to_string(dir.path().join("effnum_curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 3);
        assert!(curves.contains("0.9,1,10,"));
    }

    #[test]
    fn log_grid_spans_range() {
        let g = log_grid(1000, 4);
        assert_eq!(g.first(), Some(&1));
        assert_eq!(g.last(), Some(&1000));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(log_grid(1, 5), vec![1]);
    }
}
