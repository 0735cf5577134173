//! Episode driver, metrics and CSV logs.

use std::io::Write;

use serde::Serialize;

use super::{
    DynamicsConfig, DynamicsError, EmvPhase, EmvRouter, EmvSpec, FlowConfig, Signal, SimState,
    Transit,
};
use crate::network::{LinkId, TrafficNetwork};

/// Chooses one signal per node at every control step.
pub trait SignalController {
    fn name(&self) -> &str;
    fn reset(&mut self, _net: &TrafficNetwork, _seed: u64) {}
    fn decide(&mut self, net: &TrafficNetwork, state: &SimState, router: &dyn EmvRouter) -> Vec<Signal>;
}

/// Every movement green at every node.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllGreen;

impl SignalController for AllGreen {
    fn name(&self) -> &str {
        "allgreen"
    }
    fn decide(&mut self, net: &TrafficNetwork, _: &SimState, _: &dyn EmvRouter) -> Vec<Signal> {
        vec![Signal::AllGreen; net.node_count()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub flows: Vec<FlowConfig>,
    pub emv: Option<EmvSpec>,
    pub horizon_s: f64,
    pub seed: u64,
    pub config: DynamicsConfig,
    pub log_steps: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmvOutcome {
    Absent,
    Arrived,
    /// Still travelling when the grace period ran out; `t_emv_s` is censored.
    TimedOut,
    Unreachable,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLogRow {
    pub t_s: f64,
    pub node: String,
    pub phase: Option<usize>,
    pub lane_id: usize,
    pub occupancy: usize,
    pub emv_link: Option<String>,
    pub emv_dist_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub t_emv_s: Option<f64>,
    pub emv_outcome: EmvOutcome,
    pub t_avg_s: Option<f64>,
    pub n_completed: usize,
    pub n_injected: usize,
    pub em_lanes_formed: usize,
    pub transits: Vec<Transit>,
    pub emv_path: Vec<LinkId>,
    pub step_log: Vec<StepLogRow>,
}

impl EpisodeMetrics {
    pub fn from_state(state: &SimState, horizon_s: f64) -> EpisodeMetrics {
        let done: Vec<f64> = state
            .trips
            .iter()
            .filter(|t| t.exit_time <= horizon_s + 1e-9)
            .map(|t| t.duration())
            .collect();
        let t_avg_s = (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
        let (t_emv_s, emv_outcome, lanes, transits, path) = match &state.emv {
            None => (None, EmvOutcome::Absent, 0, Vec::new(), Vec::new()),
            Some(e) => {
                let (t, o) = match &e.phase {
                    EmvPhase::Arrived => (
                        e.arrived_at.map(|a| a - e.spec.dispatch_s),
                        EmvOutcome::Arrived,
                    ),
                    EmvPhase::Failed(_) => (None, EmvOutcome::Unreachable),
                    EmvPhase::OnLink | EmvPhase::Pending => {
                        (Some(state.t - e.spec.dispatch_s), EmvOutcome::TimedOut)
                    }
                };
                (t, o, e.lanes_formed, e.transits.clone(), e.path.clone())
            }
        };
        EpisodeMetrics {
            t_emv_s,
            emv_outcome,
            t_avg_s,
            n_completed: done.len(),
            n_injected: state.injected,
            em_lanes_formed: lanes,
            transits,
            emv_path: path,
            step_log: Vec::new(),
        }
    }
}

fn log_rows(net: &TrafficNetwork, state: &SimState, signals: &[Signal], out: &mut Vec<StepLogRow>) {
    let (emv_link, emv_dist_m) = match &state.emv {
        Some(e) if e.is_active() => (
            e.link.map(|l| net.links[l].name.clone()),
            e.distance_to_stop_line(net),
        ),
        _ => (None, None),
    };
    for (node, ix) in net.intersections.iter().enumerate() {
        let phase = match signals[node] {
            Signal::Phase(p) => Some(p),
            Signal::AllGreen => None,
        };
        for &lane in &ix.incoming_lanes {
            out.push(StepLogRow {
                t_s: state.t,
                node: net.nodes[node].name.clone(),
                phase,
                lane_id: lane,
                occupancy: state.lane_count(lane),
                emv_link: emv_link.clone(),
                emv_dist_m,
            });
        }
    }
}

/// Simulate one episode. Background traffic stops being counted at the
/// horizon; the EMV may continue for up to `emv_grace_s` more.
pub fn run_episode(
    net: &TrafficNetwork,
    spec: &EpisodeSpec,
    controller: &mut dyn SignalController,
    router: &mut dyn EmvRouter,
) -> Result<EpisodeMetrics, DynamicsError> {
    controller.reset(net, spec.seed);
    let mut state = SimState::new(net, &spec.flows, spec.emv, spec.config, spec.horizon_s, spec.seed)?;
    let limit = spec.horizon_s + spec.config.emv_grace_s;
    let mut log = Vec::new();
    loop {
        let emv_running = state
            .emv
            .as_ref()
            .is_some_and(|e| matches!(e.phase, EmvPhase::Pending | EmvPhase::OnLink));
        let before_horizon = state.t < spec.horizon_s - 1e-9;
        if !(before_horizon || (emv_running && state.t < limit - 1e-9)) {
            break;
        }
        router.on_control_step(net, &state);
        let signals = controller.decide(net, &state, &*router);
        if spec.log_steps && before_horizon {
            log_rows(net, &state, &signals, &mut log);
        }
        state.step(net, &signals, spec.config.control_step_s, router)?;
    }
    let mut m = EpisodeMetrics::from_state(&state, spec.horizon_s);
    m.step_log = log;
    Ok(m)
}

pub fn write_step_log(rows: &[StepLogRow], out: impl Write) -> Result<(), DynamicsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub controller: String,
    pub router: String,
    pub t_emv_s: Option<f64>,
    pub t_avg_s: Option<f64>,
    pub n_completed: usize,
    pub em_lanes_formed: usize,
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: impl Write) -> Result<(), DynamicsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
