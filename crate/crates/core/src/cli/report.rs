use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{file_sha256, Algo, Session};
use crate::error::Result;
use crate::pipeline::{
    comblock_family, run_offline_cell, run_ucb, tabular_sweep, true_feature, ComblockSettings,
    SourceStage, TabularSeedReport,
};
use crate::planning::Evaluation;

/// One line of the grid CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    #[serde(rename = "N_S")]
    pub n_source: usize,
    /// Target trajectories, or online episodes for UCB.
    pub n: usize,
    pub seed: u64,
    pub algo: String,
    pub mean_reward: f64,
    pub stderr: f64,
    pub episodes_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    #[serde(rename = "N_S")]
    pub n_source: Option<usize>,
    pub n: Option<usize>,
    pub seed: u64,
    pub stage: String,
    pub error: String,
}

/// Seed average of one algorithm in one table cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryCell {
    pub mean_reward: f64,
    pub num_seeds: usize,
    pub mean_episodes: f64,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub failures: Vec<Failure>,
    /// `(N_S, n)` columns in config order.
    pub columns: Vec<(usize, usize)>,
    /// One row per algorithm, one cell per column.
    pub summary: Vec<(Algo, Vec<Option<SummaryCell>>)>,
}

const TABLE_ORDER: [Algo; 4] = [Algo::Lsvi, Algo::Lcb, Algo::Ucb, Algo::Prt];

fn algo_label(algo: Algo) -> &'static str {
    match algo {
        Algo::Prt => "PRT",
        Algo::Lsvi => "RT-LSVI",
        Algo::Lcb => "RT-LSVI-LCB",
        Algo::Ucb => "RT-LSVI-UCB",
    }
}

fn row(
    n_source: usize,
    n: usize,
    seed: u64,
    algo: Algo,
    eval: &Evaluation,
    episodes_used: usize,
) -> GridRow {
    GridRow {
        n_source,
        n,
        seed,
        algo: algo.name().to_string(),
        mean_reward: eval.mean,
        stderr: eval.stderr,
        episodes_used,
    }
}

fn failure(
    n_source: Option<usize>,
    n: Option<usize>,
    seed: u64,
    stage: &str,
    err: impl fmt::Display,
) -> Failure {
    Failure {
        n_source,
        n,
        seed,
        stage: stage.to_string(),
        error: err.to_string(),
    }
}

type JobOutput = (Vec<GridRow>, Vec<Failure>);

fn offline_job(
    settings: &ComblockSettings,
    sizes: &[usize],
    algos: &[Algo],
    seed: u64,
    n_source: usize,
) -> JobOutput {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let stage = match SourceStage::build(settings, n_source, seed) {
        Ok(stage) => stage,
        Err(e) => return (rows, vec![failure(Some(n_source), None, seed, "source", e)]),
    };
    for &n in sizes {
        match run_offline_cell(&stage, settings, n, seed) {
            Ok(cell) => {
                for &algo in algos {
                    let eval = match algo {
                        Algo::Prt => &cell.prt,
                        Algo::Lcb => &cell.lcb,
                        _ => &cell.lsvi,
                    };
                    rows.push(row(n_source, n, seed, algo, eval, n));
                }
            }
            Err(e) => failures.push(failure(Some(n_source), Some(n), seed, "offline", e)),
        }
    }
    (rows, failures)
}

fn ucb_job(settings: &ComblockSettings, sources: &[usize], seed: u64) -> JobOutput {
    let outcome = comblock_family(settings, seed).and_then(|family| {
        run_ucb(
            &family,
            &true_feature(&family),
            settings,
            &settings.ucb,
            seed,
        )
    });
    match outcome {
        Ok(res) => (
            sources
                .iter()
                .map(|&ns| {
                    row(
                        ns,
                        res.episodes_used,
                        seed,
                        Algo::Ucb,
                        &res.evaluation,
                        res.episodes_used,
                    )
                })
                .collect(),
            Vec::new(),
        ),
        Err(e) => (Vec::new(), vec![failure(None, None, seed, "ucb", e)]),
    }
}

/// Offline cells for every `(N_S, n, seed)` and one UCB run per seed, spread
/// over the session's workers. Failed units are recorded and skipped.
pub fn run_grid(session: &Session, only: Option<Algo>) -> Result<GridReport> {
    let cfg = &session.config;
    let settings = cfg.settings();
    let offline: Vec<Algo> = [Algo::Prt, Algo::Lcb, Algo::Lsvi]
        .into_iter()
        .filter(|a| only.is_none_or(|o| o == *a))
        .collect();
    let with_ucb = only.is_none_or(|o| o == Algo::Ucb);

    let jobs: Vec<(u64, usize)> = cfg
        .n_source
        .iter()
        .flat_map(|&ns| cfg.seeds.iter().map(move |&seed| (seed, ns)))
        .collect();
    let (offline_out, ucb_out): (Vec<JobOutput>, Vec<JobOutput>) = session.install(|| {
        let offline_out = if offline.is_empty() {
            Vec::new()
        } else {
            jobs.par_iter()
                .map(|&(seed, ns)| offline_job(&settings, &cfg.n, &offline, seed, ns))
                .collect()
        };
        let ucb_out = if with_ucb {
            cfg.seeds
                .par_iter()
                .map(|&seed| ucb_job(&settings, &cfg.n_source, seed))
                .collect()
        } else {
            Vec::new()
        };
        (offline_out, ucb_out)
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in offline_out.into_iter().chain(ucb_out) {
        rows.extend(r);
        failures.extend(f);
    }
    rows.sort_by(|a, b| {
        (a.n_source, a.algo == "ucb", a.n, a.seed, &a.algo).cmp(&(
            b.n_source,
            b.algo == "ucb",
            b.n,
            b.seed,
            &b.algo,
        ))
    });

    let columns: Vec<(usize, usize)> = cfg
        .n_source
        .iter()
        .flat_map(|&ns| cfg.n.iter().map(move |&n| (ns, n)))
        .collect();
    let summary = TABLE_ORDER
        .into_iter()
        .filter(|a| {
            if *a == Algo::Ucb {
                with_ucb
            } else {
                offline.contains(a)
            }
        })
        .map(|algo| {
            let cells = columns
                .iter()
                .map(|&(ns, n)| {
                    let picked: Vec<&GridRow> = rows
                        .iter()
                        .filter(|r| {
                            r.algo == algo.name()
                                && r.n_source == ns
                                && (algo == Algo::Ucb || r.n == n)
                        })
                        .collect();
                    if picked.is_empty() {
                        return None;
                    }
                    let k = picked.len() as f64;
                    Some(SummaryCell {
                        mean_reward: picked.iter().map(|r| r.mean_reward).sum::<f64>() / k,
                        num_seeds: picked.len(),
                        mean_episodes: picked.iter().map(|r| r.episodes_used as f64).sum::<f64>()
                            / k,
                    })
                })
                .collect();
            (algo, cells)
        })
        .collect();

    let report = GridReport {
        rows,
        failures,
        columns,
        summary,
    };
    report.write(session)?;
    Ok(report)
}

#[derive(Serialize)]
struct Provenance<'a> {
    version: &'a str,
    config_hash: String,
    config: &'a super::ExperimentConfig,
    files: Vec<(String, String)>,
}

impl GridReport {
    fn write(&self, session: &Session) -> Result<()> {
        let grid = session.path("grid.csv");
        let mut wtr = csv::Writer::from_path(&grid)?;
        if self.rows.is_empty() {
            wtr.write_record([
                "N_S",
                "n",
                "seed",
                "algo",
                "mean_reward",
                "stderr",
                "episodes_used",
            ])?;
        }
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;

        let failures = session.path("failures.csv");
        let mut wtr = csv::Writer::from_path(&failures)?;
        wtr.write_record(["N_S", "n", "seed", "stage", "error"])?;
        for f in &self.failures {
            wtr.write_record([
                f.n_source.map_or_else(String::new, |v| v.to_string()),
                f.n.map_or_else(String::new, |v| v.to_string()),
                f.seed.to_string(),
                f.stage.clone(),
                f.error.clone(),
            ])?;
        }
        wtr.flush()?;

        let summary = session.path("summary.csv");
        let mut wtr = csv::Writer::from_path(&summary)?;
        let mut header = vec!["algo".to_string()];
        header.extend(self.columns.iter().map(|(ns, n)| format!("N_S={ns} n={n}")));
        wtr.write_record(&header)?;
        for (algo, cells) in &self.summary {
            let mut rec = vec![algo_label(*algo).to_string()];
            rec.extend(
                cells
                    .iter()
                    .map(|c| c.map_or_else(String::new, |c| c.mean_reward.to_string())),
            );
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;

        let files: Vec<PathBuf> = vec![grid, summary, failures];
        let provenance = Provenance {
            version: env!("CARGO_PKG_VERSION"),
            config_hash: session.config.hash(),
            config: &session.config,
            files: files
                .iter()
                .map(|p| {
                    Ok((
                        p.file_name().expect("file").to_string_lossy().into_owned(),
                        file_sha256(p)?,
                    ))
                })
                .collect::<Result<_>>()?,
        };
        std::fs::write(
            session.path("provenance.json"),
            serde_json::to_string_pretty(&provenance)? + "\n",
        )?;
        Ok(())
    }

    /// The summary as an aligned text table; UCB cells carry their episode count.
    pub fn table(&self) -> String {
        let mut header = vec!["algorithm".to_string()];
        header.extend(self.columns.iter().map(|(ns, n)| format!("N_S={ns} n={n}")));
        let mut lines = vec![header];
        for (algo, cells) in &self.summary {
            let mut line = vec![algo_label(*algo).to_string()];
            line.extend(cells.iter().map(|c| match c {
                None => "-".to_string(),
                Some(c) if *algo == Algo::Ucb => {
                    format!("{:.3} (n={:.0})", c.mean_reward, c.mean_episodes)
                }
                Some(c) => format!("{:.3}", c.mean_reward),
            }));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| {
                lines
                    .iter()
                    .map(|l| l[j].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in &lines {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Coverage of one bound family over the validation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLine {
    pub bound: String,
    pub covered: usize,
    pub total: usize,
    pub rate: f64,
    pub target: f64,
    pub pass: bool,
}

impl ValidationLine {
    fn new(bound: &str, covered: usize, total: usize, target: f64) -> Self {
        let rate = if total == 0 {
            1.0
        } else {
            covered as f64 / total as f64
        };
        Self {
            bound: bound.to_string(),
            covered,
            total,
            rate,
            target,
            pass: rate >= target,
        }
    }
}

impl fmt::Display for ValidationLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}/{} = {:.3} (target {:.3}) {}",
            self.bound,
            self.covered,
            self.total,
            self.rate,
            self.target,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub const BOUND_FAMILIES: [&str; 4] = ["average-error", "target-model", "local-error", "pessimism"];

/// Coverage rates of the four bound families.
pub fn coverage_lines(reports: &[TabularSeedReport], delta: f64) -> Vec<ValidationLine> {
    let target = 1.0 - delta;
    let count = |f: &dyn Fn(&TabularSeedReport) -> (usize, usize)| {
        reports
            .iter()
            .map(f)
            .fold((0, 0), |acc, (c, t)| (acc.0 + c, acc.1 + t))
    };
    let average = count(&|r| (r.average_error_holds() as usize, 1));
    let model = count(&|r| (r.target_error_covered(), r.target_errors.len()));
    let local = count(&|r| (r.local_error_covered(), r.local_errors_bounded.len()));
    let pess = count(&|r| (r.pessimism_holds() as usize, 1));
    [average, model, local, pess]
        .iter()
        .zip(BOUND_FAMILIES)
        .map(|(&(c, t), name)| ValidationLine::new(name, c, t, target))
        .collect()
}

/// Runs the tabular sweeps over the validation seeds and writes
/// `validation.csv` (one line per bound family) and `validation_seeds.csv`.
/// With `δ = 1` every statement is vacuous and nothing is run.
pub fn run_validation(session: &Session) -> Result<Vec<ValidationLine>> {
    let cfg = &session.config;
    let delta = cfg.tabular.planner.delta;
    let reports = if delta >= 1.0 {
        Vec::new()
    } else {
        session.install(|| tabular_sweep(&cfg.tabular, &cfg.validation_seeds))?
    };
    let lines = coverage_lines(&reports, delta);

    let mut wtr = csv::Writer::from_path(session.path("validation.csv"))?;
    for line in &lines {
        wtr.serialize(line)?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_path(session.path("validation_seeds.csv"))?;
    wtr.write_record([
        "seed",
        "max_average_error",
        "average_error_bound",
        "target_covered",
        "target_total",
        "local_covered",
        "local_total",
        "pessimistic_value",
        "true_value",
    ])?;
    for r in &reports {
        let max_err = r.average_errors.iter().copied().fold(0.0, f64::max);
        wtr.write_record([
            r.seed.to_string(),
            max_err.to_string(),
            r.average_error_bound.to_string(),
            r.target_error_covered().to_string(),
            r.target_errors.len().to_string(),
            r.local_error_covered().to_string(),
            r.local_errors_bounded.len().to_string(),
            r.pessimistic_value.to_string(),
            r.true_value.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(lines)
}
