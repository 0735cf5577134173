//! Experiment orchestration: scenario files, controller/router factories,
//! seeded benchmark matrices, result tables and SVG plots.

mod matrix;
mod plot;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{train, ActionMode, AgentError, EmvLightController, TrainConfig, TrainOutcome};
use crate::baselines::{AstarRouter, FixedTime, GreenWave, MaxPressure};
use crate::dynamics::{
    run_episode, write_metrics_csv, write_step_log, AllGreen, DynamicsConfig, DynamicsError,
    EmvRouter, EmvSpec, EpisodeMetrics, EpisodeSpec, FlowConfig, MetricsRow, SignalController,
};
use crate::network::{load_network, GridSpec, NetworkError, NodeId, TrafficNetwork};
use crate::routing::DecentralizedRouter;
use crate::seed;

pub use matrix::{
    run_matrix, run_seed, worker_count, MatrixSpec, ResultTable, RunRecord, ScenarioRef,
    SummaryRow, WORKERS_ENV,
};
pub use plot::{curve_from_csv, emit_learning_plot, Curve};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("controller: {0}")]
    Controller(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Grid {
        rows: usize,
        cols: usize,
        #[serde(default = "default_link_m")]
        link_m: f64,
        #[serde(default = "default_lanes")]
        lanes: usize,
        #[serde(default)]
        ec_ratio: f64,
    },
    /// Network file, relative to the scenario file.
    File(PathBuf),
}

fn default_link_m() -> f64 {
    200.0
}
fn default_lanes() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub origins: Vec<String>,
    pub destinations: Vec<String>,
    pub rate_vph_per_lane: f64,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmvSpecNamed {
    pub origin: String,
    pub dest: String,
    pub dispatch_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "fixed")]
    Fixed,
    #[serde(rename = "maxpressure")]
    MaxPressure,
    #[serde(rename = "greenwave+fixed")]
    GreenWaveFixed,
    #[serde(rename = "greenwave+maxpressure")]
    GreenWaveMaxPressure,
    #[serde(rename = "emvlight")]
    EmvLight,
    #[serde(rename = "allgreen")]
    AllGreen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub policy: Policy,
    #[serde(default = "default_cycle")]
    pub cycle_s: f64,
    #[serde(default)]
    pub offset_seed: u64,
    #[serde(default = "default_min_phase")]
    pub min_phase_s: f64,
    #[serde(default = "default_trigger")]
    pub trigger_m: f64,
    /// Trained policy bundle for `emvlight`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// How `emvlight` picks a phase from its policy.
    #[serde(default, skip_serializing_if = "is_default")]
    pub action: ActionMode,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn default_cycle() -> f64 {
    40.0
}
fn default_min_phase() -> f64 {
    5.0
}
fn default_trigger() -> f64 {
    200.0
}

impl ControlSpec {
    pub fn new(policy: Policy) -> ControlSpec {
        ControlSpec {
            policy,
            cycle_s: default_cycle(),
            offset_seed: 0,
            min_phase_s: default_min_phase(),
            trigger_m: default_trigger(),
            checkpoint: None,
            action: ActionMode::default(),
        }
    }

    pub fn label(&self) -> String {
        serde_json::to_value(self.policy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }

    /// Instantiate the controller. `base_dir` resolves relative checkpoints.
    pub fn build(
        &self,
        net: &TrafficNetwork,
        base_dir: &Path,
    ) -> Result<Box<dyn SignalController + Send>, HarnessError> {
        let ctl = |e: crate::baselines::BaselineError| HarnessError::Controller(e.to_string());
        let fixed = || -> Result<Box<dyn SignalController + Send>, HarnessError> {
            Ok(Box::new(FixedTime::new(self.cycle_s, self.offset_seed).map_err(ctl)?))
        };
        let mp = || -> Result<Box<dyn SignalController + Send>, HarnessError> {
            Ok(Box::new(MaxPressure::new(self.min_phase_s).map_err(ctl)?))
        };
        Ok(match self.policy {
            Policy::Fixed => fixed()?,
            Policy::MaxPressure => mp()?,
            Policy::GreenWaveFixed => Box::new(GreenWave::new(fixed()?, self.trigger_m)),
            Policy::GreenWaveMaxPressure => Box::new(GreenWave::new(mp()?, self.trigger_m)),
            Policy::AllGreen => Box::new(AllGreen),
            Policy::EmvLight => {
                let path = self.checkpoint.as_ref().ok_or_else(|| {
                    HarnessError::Controller("emvlight requires a checkpoint".into())
                })?;
                let path = base_dir.join(path);
                let mut c = EmvLightController::from_checkpoint(net, &path)
                    .map_err(|e| HarnessError::Controller(format!("{}: {e}", path.display())))?;
                c.mode = self.action;
                Box::new(c)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Static,
    DynamicAstar,
    Decentralized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSpec {
    pub mode: RoutingMode,
    #[serde(default = "default_period")]
    pub period_s: f64,
}

fn default_period() -> f64 {
    50.0
}

impl RoutingSpec {
    pub fn new(mode: RoutingMode) -> RoutingSpec {
        RoutingSpec {
            mode,
            period_s: default_period(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self.mode {
            RoutingMode::Static => "static",
            RoutingMode::DynamicAstar => "dynamic_astar",
            RoutingMode::Decentralized => "decentralized",
        }
    }

    pub fn build(&self) -> Box<dyn EmvRouter + Send> {
        match self.mode {
            RoutingMode::Static => Box::new(AstarRouter::static_route()),
            RoutingMode::DynamicAstar => Box::new(AstarRouter::dynamic(self.period_s)),
            RoutingMode::Decentralized => Box::new(DecentralizedRouter::new()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub horizon_s: f64,
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    #[serde(default = "default_step")]
    pub control_step_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
}

fn default_tick() -> f64 {
    1.0
}
fn default_step() -> f64 {
    5.0
}
fn default_reps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub network: NetworkSpec,
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emv: Option<EmvSpecNamed>,
    pub control: ControlSpec,
    pub routing: RoutingSpec,
    pub sim: SimSpec,
}

/// A scenario with node names resolved against its network.
pub struct ResolvedScenario {
    pub net: TrafficNetwork,
    pub flows: Vec<FlowConfig>,
    pub emv: Option<EmvSpec>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, HarnessError> {
        read_json(path.as_ref())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if let Some(e) = &self.emv {
            if !(e.dispatch_s >= 0.0 && e.dispatch_s < self.sim.horizon_s) {
                return Err(HarnessError::Scenario(format!(
                    "emv.dispatch_s {} must lie in [0, horizon_s)",
                    e.dispatch_s
                )));
            }
        }
        if self.sim.repetitions == 0 {
            return Err(HarnessError::Scenario("sim.repetitions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_network(&self, base_dir: &Path) -> Result<TrafficNetwork, HarnessError> {
        Ok(match &self.network {
            NetworkSpec::Grid {
                rows,
                cols,
                link_m,
                lanes,
                ec_ratio,
            } => GridSpec {
                link_length: *link_m,
                lanes: *lanes,
                ec_ratio: *ec_ratio,
                ..GridSpec::new(*rows, *cols)
            }
            .build()?,
            NetworkSpec::File(p) => load_network(base_dir.join(p))?,
        })
    }

    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedScenario, HarnessError> {
        self.validate()?;
        let net = self.build_network(base_dir)?;
        let node = |name: &str| -> Result<NodeId, HarnessError> {
            net.node_by_name(name)
                .ok_or_else(|| HarnessError::Scenario(format!("unknown node `{name}`")))
        };
        let mut flows = Vec::new();
        for f in &self.flows {
            flows.push(FlowConfig {
                origins: f.origins.iter().map(|n| node(n)).collect::<Result<_, _>>()?,
                destinations: f.destinations.iter().map(|n| node(n)).collect::<Result<_, _>>()?,
                rate_vph_per_lane: f.rate_vph_per_lane,
                start_s: f.start_s,
                end_s: f.end_s,
            });
        }
        let emv = match &self.emv {
            Some(e) => Some(EmvSpec {
                origin: node(&e.origin)?,
                dest: node(&e.dest)?,
                dispatch_s: e.dispatch_s,
            }),
            None => None,
        };
        Ok(ResolvedScenario { net, flows, emv })
    }

    pub fn dynamics_config(&self) -> DynamicsConfig {
        DynamicsConfig {
            tick_s: self.sim.tick_s,
            control_step_s: self.sim.control_step_s,
            ..DynamicsConfig::default()
        }
    }

    pub fn episode_spec(&self, resolved: &ResolvedScenario, seed: u64, log_steps: bool) -> EpisodeSpec {
        EpisodeSpec {
            flows: resolved.flows.clone(),
            emv: resolved.emv,
            horizon_s: self.sim.horizon_s,
            seed,
            config: self.dynamics_config(),
            log_steps,
        }
    }
}

/// Run every repetition of a scenario with seeds derived from `sim.seed`.
pub fn simulate(
    scenario: &Scenario,
    base_dir: &Path,
    log_steps: bool,
) -> Result<Vec<(MetricsRow, EpisodeMetrics)>, HarnessError> {
    let resolved = scenario.resolve(base_dir)?;
    let mut out = Vec::with_capacity(scenario.sim.repetitions);
    for rep in 0..scenario.sim.repetitions {
        let seed = run_seed(scenario.sim.seed, 0, 0, 0, rep);
        let spec = scenario.episode_spec(&resolved, seed, log_steps);
        let mut ctl = scenario.control.build(&resolved.net, base_dir)?;
        let mut router = scenario.routing.build();
        let m = run_episode(&resolved.net, &spec, ctl.as_mut(), router.as_mut())?;
        let row = MetricsRow {
            run_id: format!("{}/rep{rep}", scenario.name),
            seed,
            controller: scenario.control.label(),
            router: scenario.routing.label().to_string(),
            t_emv_s: m.t_emv_s,
            t_avg_s: m.t_avg_s,
            n_completed: m.n_completed,
            em_lanes_formed: m.em_lanes_formed,
        };
        out.push((row, m));
    }
    Ok(out)
}

/// [`simulate`], writing `metrics.csv` and one `steps_repN.csv` per
/// repetition into `out_dir`.
pub fn sim_run(scenario: &Scenario, base_dir: &Path, out_dir: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let runs = simulate(scenario, base_dir, true)?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (rep, (row, m)) in runs.into_iter().enumerate() {
        let f = std::fs::File::create(out_dir.join(format!("steps_rep{rep}.csv")))?;
        write_step_log(&m.step_log, std::io::BufWriter::new(f))?;
        rows.push(row);
    }
    let f = std::fs::File::create(out_dir.join("metrics.csv"))?;
    write_metrics_csv(&rows, std::io::BufWriter::new(f))?;
    Ok(rows)
}

/// Training run description: a scenario plus hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub scenario: ScenarioRef,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl TrainJob {
    pub fn load(path: &Path) -> Result<TrainJob, HarnessError> {
        read_json(path)
    }

    /// Train, writing `curve.csv`, `curve.svg`, `policy.json` and any
    /// periodic checkpoints into `out_dir`.
    pub fn run(&self, base_dir: &Path, out_dir: &Path) -> Result<TrainOutcome, HarnessError> {
        let (scenario, dir) = self.scenario.load(base_dir)?;
        let resolved = scenario.resolve(&dir)?;
        let base = scenario.episode_spec(&resolved, scenario.sim.seed, false);
        let out = train(&resolved.net, &base, &self.config, Some(out_dir))?;
        let points = |f: &dyn Fn(&crate::agents::EpisodeLog) -> Option<f64>| -> Vec<(f64, f64)> {
            out.curve
                .iter()
                .filter_map(|e| f(e).map(|y| (e.episode as f64, y)))
                .collect()
        };
        if !out.curve.is_empty() {
            let svg = emit_learning_plot(
                &[Curve {
                    label: "mean reward".into(),
                    points: points(&|e| Some(e.mean_reward)),
                }],
                &scenario.name,
                "episode",
                "mean reward",
            )?;
            std::fs::write(out_dir.join("curve.svg"), svg)?;
        }
        Ok(out)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_owned(),
        source,
    })
}

fn names(rows: usize, cols: usize, pick: impl Fn(usize, usize) -> bool) -> Vec<String> {
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if pick(r, c) {
                out.push(GridSpec::node_name(r, c));
            }
        }
    }
    out
}

/// Flow pattern with a non-peak rate outside `peak` and a peak rate inside.
fn peaked_flows(
    origins: &[String],
    destinations: &[String],
    (base, peak): (f64, f64),
    (p0, p1): (f64, f64),
    horizon: f64,
) -> Vec<FlowSpec> {
    let f = |rate, start_s, end_s| FlowSpec {
        origins: origins.to_vec(),
        destinations: destinations.to_vec(),
        rate_vph_per_lane: rate,
        start_s,
        end_s,
    };
    vec![f(base, 0.0, p0), f(peak, p0, p1), f(base, p1, horizon)]
}

/// The four synthetic 5x5 configurations. Configurations 1 and 2 send traffic
/// from the north and south boundaries to the east and west boundaries;
/// 3 and 4 draw ten boundary origins at random (seeded) and use the remaining
/// boundary nodes as destinations. Peak flow runs from 400 s to 800 s of a
/// 1200 s horizon and the EMV leaves the south-west corner for the
/// north-east corner at 600 s.
pub fn config_grid5x5(config_id: u8, od_seed: u64) -> Result<Scenario, HarnessError> {
    let rates = match config_id {
        1 | 3 => (200.0, 240.0),
        2 | 4 => (160.0, 320.0),
        _ => {
            return Err(HarnessError::Scenario(format!(
                "config id {config_id} is not in 1..=4"
            )))
        }
    };
    let (n, horizon) = (5, 1200.0);
    let (origins, dests) = if config_id <= 2 {
        (
            names(n, n, |r, _| r == 0 || r == n - 1),
            names(n, n, |_, c| c == 0 || c == n - 1),
        )
    } else {
        let mut boundary = names(n, n, |r, c| r == 0 || c == 0 || r == n - 1 || c == n - 1);
        let mut rng = seed::rng(seed::derive(od_seed, seed::stream::OD ^ config_id as u64));
        boundary.shuffle(&mut rng);
        let dests = boundary.split_off(10);
        boundary.sort();
        let mut dests = dests;
        dests.sort();
        (boundary, dests)
    };
    Ok(Scenario {
        name: format!("grid5x5-config{config_id}"),
        network: NetworkSpec::Grid {
            rows: n,
            cols: n,
            link_m: 200.0,
            lanes: 2,
            ec_ratio: 0.0,
        },
        flows: peaked_flows(&origins, &dests, rates, (400.0, 800.0), horizon),
        emv: Some(EmvSpecNamed {
            origin: GridSpec::node_name(n - 1, 0),
            dest: GridSpec::node_name(0, n - 1),
            dispatch_s: 600.0,
        }),
        control: ControlSpec::new(Policy::GreenWaveFixed),
        routing: RoutingSpec::new(RoutingMode::Static),
        sim: SimSpec {
            horizon_s: horizon,
            tick_s: 1.0,
            control_step_s: 5.0,
            seed: 0,
            repetitions: 5,
        },
    })
}

/// Desk-scale 3x3 scenario: config-1 style flows at 100/120 veh/lane/hr,
/// a 600 s horizon with the peak from 200 s to 400 s, and the EMV crossing
/// from the south-west to the north-east corner at 300 s.
pub fn smoke_grid3x3() -> Scenario {
    let n = 3;
    let origins = names(n, n, |r, _| r == 0 || r == n - 1);
    let dests = names(n, n, |_, c| c == 0 || c == n - 1);
    Scenario {
        name: "grid3x3-smoke".into(),
        network: NetworkSpec::Grid {
            rows: n,
            cols: n,
            link_m: 200.0,
            lanes: 2,
            ec_ratio: 0.0,
        },
        flows: peaked_flows(&origins, &dests, (100.0, 120.0), (200.0, 400.0), 600.0),
        emv: Some(EmvSpecNamed {
            origin: GridSpec::node_name(n - 1, 0),
            dest: GridSpec::node_name(0, n - 1),
            dispatch_s: 300.0,
        }),
        control: ControlSpec::new(Policy::GreenWaveFixed),
        routing: RoutingSpec::new(RoutingMode::Static),
        sim: SimSpec {
            horizon_s: 600.0,
            tick_s: 1.0,
            control_step_s: 5.0,
            seed: 0,
            repetitions: 1,
        },
    }
}
