use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{config_grid5x5, read_json, smoke_grid3x3, ControlSpec, HarnessError, RoutingSpec, Scenario};
use crate::dynamics::{run_episode, EmvOutcome, EpisodeMetrics, MetricsRow, NoRouter};
use crate::seed;

/// Environment variable holding the worker count for matrix runs.
pub const WORKERS_ENV: &str = "EMVLAB_WORKERS";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Path(PathBuf),
    Builtin {
        builtin: String,
        #[serde(default)]
        od_seed: u64,
    },
    Inline(Box<Scenario>),
}

impl ScenarioRef {
    /// The scenario and the directory its relative paths resolve against.
    pub fn load(&self, base: &Path) -> Result<(Scenario, PathBuf), HarnessError> {
        match self {
            ScenarioRef::Path(p) => {
                let p = base.join(p);
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok((Scenario::load(&p)?, dir))
            }
            ScenarioRef::Builtin { builtin, od_seed } => {
                let s = match builtin.as_str() {
                    "grid3x3-smoke" => smoke_grid3x3(),
                    name => {
                        let id = name
                            .strip_prefix("grid5x5-config")
                            .and_then(|d| d.parse().ok())
                            .ok_or_else(|| HarnessError::Scenario(format!("unknown builtin `{name}`")))?;
                        config_grid5x5(id, *od_seed)?
                    }
                };
                Ok((s, base.to_path_buf()))
            }
            ScenarioRef::Inline(s) => Ok(((**s).clone(), base.to_path_buf())),
        }
    }
}

/// Cross product of scenarios, controllers and routers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub scenarios: Vec<ScenarioRef>,
    pub controllers: Vec<ControlSpec>,
    pub routers: Vec<RoutingSpec>,
    /// Controllers run once per scenario with the EMV removed.
    #[serde(default)]
    pub no_emv_controllers: Vec<ControlSpec>,
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MatrixSpec {
    pub fn load(path: &Path) -> Result<MatrixSpec, HarnessError> {
        read_json(path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub scenario: String,
    pub controller: String,
    pub router: String,
    pub rep: usize,
    pub seed: u64,
    pub metrics: Result<EpisodeMetrics, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub controller: String,
    pub router: String,
    pub runs: usize,
    pub failures: usize,
    pub t_emv_mean: Option<f64>,
    pub t_emv_std: Option<f64>,
    pub t_avg_mean: Option<f64>,
    pub t_avg_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<SummaryRow>,
}

/// Seed of one matrix cell; distinct for distinct `(scenario, controller,
/// router, rep)` index tuples.
pub fn run_seed(root: u64, scenario: usize, controller: usize, router: usize, rep: usize) -> u64 {
    seed::derive(root, seed::pack([scenario as u64, controller as u64, router as u64, rep as u64]))
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

struct Cell {
    scenario: usize,
    controller: Option<usize>,
    no_emv: Option<usize>,
    router: usize,
    rep: usize,
}

/// Execute the matrix on [`worker_count`] threads. Failed episodes are
/// recorded and the remaining cells still run.
pub fn run_matrix(spec: &MatrixSpec, base_dir: &Path) -> Result<ResultTable, HarnessError> {
    if spec.repetitions == 0 {
        return Err(HarnessError::Scenario("repetitions must be at least 1".into()));
    }
    let scenarios: Vec<(Scenario, PathBuf)> = spec
        .scenarios
        .iter()
        .map(|s| s.load(base_dir))
        .collect::<Result<_, _>>()?;
    let resolved: Vec<_> = scenarios
        .iter()
        .map(|(s, dir)| s.resolve(dir))
        .collect::<Result<_, _>>()?;

    let mut cells = Vec::new();
    for si in 0..scenarios.len() {
        for ci in 0..spec.controllers.len() {
            for ri in 0..spec.routers.len() {
                for rep in 0..spec.repetitions {
                    cells.push(Cell {
                        scenario: si,
                        controller: Some(ci),
                        no_emv: None,
                        router: ri,
                        rep,
                    });
                }
            }
        }
        for ni in 0..spec.no_emv_controllers.len() {
            for rep in 0..spec.repetitions {
                cells.push(Cell {
                    scenario: si,
                    controller: None,
                    no_emv: Some(ni),
                    router: spec.routers.len(),
                    rep,
                });
            }
        }
    }

    let run_cell = |cell: &Cell| -> RunRecord {
        let (scenario, dir) = &scenarios[cell.scenario];
        let res = &resolved[cell.scenario];
        let ci = cell.controller.unwrap_or_else(|| spec.controllers.len() + cell.no_emv.unwrap());
        let seed = run_seed(spec.seed, cell.scenario, ci, cell.router, cell.rep);
        let (control, router_spec) = match cell.controller {
            Some(c) => (&spec.controllers[c], Some(&spec.routers[cell.router])),
            None => (&spec.no_emv_controllers[cell.no_emv.unwrap()], None),
        };
        let label = match router_spec {
            Some(_) => control.label(),
            None => format!("{} w/o EMV", control.label()),
        };
        let router_label = router_spec.map_or("none", |r| r.label()).to_string();
        let metrics = (|| -> Result<EpisodeMetrics, String> {
            let mut controller = control.build(&res.net, dir).map_err(|e| e.to_string())?;
            let mut ep = scenario.episode_spec(res, seed, false);
            let m = match router_spec {
                Some(r) => {
                    let mut router = r.build();
                    run_episode(&res.net, &ep, controller.as_mut(), router.as_mut())
                }
                None => {
                    ep.emv = None;
                    run_episode(&res.net, &ep, controller.as_mut(), &mut NoRouter)
                }
            };
            m.map_err(|e| e.to_string())
        })();
        RunRecord {
            scenario: scenario.name.clone(),
            controller: label,
            router: router_label,
            rep: cell.rep,
            seed,
            metrics,
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| HarnessError::Scenario(format!("thread pool: {e}")))?;
    let runs: Vec<RunRecord> = pool.install(|| cells.par_iter().map(run_cell).collect());
    Ok(ResultTable::from_runs(runs))
}

impl ResultTable {
    pub fn from_runs(runs: Vec<RunRecord>) -> ResultTable {
        let mut rows: Vec<SummaryRow> = Vec::new();
        let mut groups: Vec<(String, String, String, Vec<&RunRecord>)> = Vec::new();
        for r in &runs {
            match groups
                .iter_mut()
                .find(|g| g.0 == r.scenario && g.1 == r.controller && g.2 == r.router)
            {
                Some(g) => g.3.push(r),
                None => groups.push((r.scenario.clone(), r.controller.clone(), r.router.clone(), vec![r])),
            }
        }
        for (scenario, controller, router, members) in groups {
            let ok: Vec<&EpisodeMetrics> = members.iter().filter_map(|r| r.metrics.as_ref().ok()).collect();
            let emv: Vec<f64> = ok.iter().filter_map(|m| m.t_emv_s).collect();
            let avg: Vec<f64> = ok.iter().filter_map(|m| m.t_avg_s).collect();
            let (t_emv_mean, t_emv_std) = mean_std(&emv);
            let (t_avg_mean, t_avg_std) = mean_std(&avg);
            rows.push(SummaryRow {
                scenario,
                controller,
                router,
                runs: members.len(),
                failures: members
                    .iter()
                    .filter(|r| match &r.metrics {
                        Err(_) => true,
                        Ok(m) => matches!(m.emv_outcome, EmvOutcome::Unreachable | EmvOutcome::TimedOut),
                    })
                    .count(),
                t_emv_mean,
                t_emv_std,
                t_avg_mean,
                t_avg_std,
            });
        }
        ResultTable { runs, rows }
    }

    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        self.runs
            .iter()
            .map(|r| {
                let m = r.metrics.as_ref().ok();
                MetricsRow {
                    run_id: format!("{}/{}/{}/{}", r.scenario, r.controller, r.router, r.rep),
                    seed: r.seed,
                    controller: r.controller.clone(),
                    router: r.router.clone(),
                    t_emv_s: m.and_then(|m| m.t_emv_s),
                    t_avg_s: m.and_then(|m| m.t_avg_s),
                    n_completed: m.map_or(0, |m| m.n_completed),
                    em_lanes_formed: m.map_or(0, |m| m.em_lanes_formed),
                }
            })
            .collect()
    }

    pub fn write_summary_csv(&self, out: impl Write) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table with `mean ± std` cells; `N/A` where a metric is absent.
    pub fn to_text(&self) -> String {
        let cell = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
            (Some(m), None) => format!("{m:.2}"),
            _ => "N/A".to_string(),
        };
        let header = ["scenario", "controller", "router", "runs", "T_EMV (s)", "T_avg (s)"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let runs = if r.failures > 0 {
                    format!("{} ({} failed)", r.runs, r.failures)
                } else {
                    r.runs.to_string()
                };
                [
                    r.scenario.clone(),
                    r.controller.clone(),
                    r.router.clone(),
                    runs,
                    cell(r.t_emv_mean, r.t_emv_std),
                    cell(r.t_avg_mean, r.t_avg_std),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for row in &body {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(width)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
        };
        line(header.to_vec(), &mut out);
        let _ = writeln!(
            out,
            "{}",
            width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
        );
        for row in &body {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn seeds_are_distinct_across_cells() {
        let mut seen = HashSet::new();
        for s in 0..3 {
            for c in 0..6 {
                for r in 0..3 {
                    for rep in 0..10 {
                        assert!(seen.insert(run_seed(42, s, c, r, rep)));
                    }
                }
            }
        }
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, Some(3.0));
        assert!((s.unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (Some(7.0), None));
    }
}
