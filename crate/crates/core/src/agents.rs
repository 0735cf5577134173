//! Multi-agent advantage actor-critic signal control.
//!
//! Each intersection is an agent. While the EMV is on a link, the node it
//! approaches is the primary pre-emption agent and that node's Next hop is
//! the secondary agent; the rest are normal agents rewarded by negative
//! pressure. Rewards are mixed across agents with a hop-distance spatial
//! discount before one-step bootstrapped returns are formed against a
//! critic frozen at batch start.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    DynamicsError, EmvRouter, EpisodeMetrics, EpisodeSpec, Signal, SignalController,
    SimState,
};
use crate::network::{LinkId, NodeId, TrafficNetwork};
use crate::nn::{self, Arch, Checkpoint, Head, Model, NetSpec, NnError, RecurrentState, Tape};
use crate::pressure::{
    intersection_pressure_emvlight, intersection_pressure_sum, PressureError, PressureSnapshot,
};
use crate::routing::DecentralizedRouter;
use crate::seed;

pub const NODE_FEATURES: usize = 22;
pub const NEIGHBORS: usize = 4;
pub const OBS_DIM: usize = (NEIGHBORS + 1) * NODE_FEATURES;
pub const ACTIONS: usize = crate::network::PHASE_COUNT;
pub const FP_DIM: usize = NEIGHBORS * ACTIONS;
const LANES_PER_ARM: usize = 2;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("secondary agent {0} has no upstream EMV link")]
    Classification(NodeId),
    #[error("node {node}: link {link} has {lanes} lanes; observations encode at most 2 per arm")]
    Layout { node: NodeId, link: LinkId, lanes: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("policy bundle does not fit the network: {0}")]
    Bundle(String),
    #[error("non-finite loss at update {update} (episode {episode}): {source}")]
    Diverged {
        update: usize,
        episode: usize,
        source: NnError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pressure(#[from] PressureError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentType {
    Primary,
    Secondary,
    Normal,
}

/// Agent types given the Next column of the routing view.
pub fn classify_agents(
    net: &TrafficNetwork,
    state: &SimState,
    next: &[Option<NodeId>],
) -> Vec<AgentType> {
    let mut types = vec![AgentType::Normal; net.node_count()];
    let Some(p) = state
        .emv
        .as_ref()
        .filter(|e| e.is_active())
        .and_then(|e| e.approaching(net))
    else {
        return types;
    };
    types[p] = AgentType::Primary;
    if let Some(s) = next.get(p).copied().flatten() {
        if s != p {
            types[s] = AgentType::Secondary;
        }
    }
    types
}

/// Which intersection pressure the normal and secondary rewards use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PressureReward {
    #[default]
    Average,
    Sum,
}

fn pressure(
    net: &TrafficNetwork,
    node: NodeId,
    snap: &PressureSnapshot,
    kind: PressureReward,
) -> Result<f64, PressureError> {
    match kind {
        PressureReward::Average => intersection_pressure_emvlight(net, node, snap),
        PressureReward::Sum => intersection_pressure_sum(net, node, snap),
    }
}

/// Per-agent reward. `emv_link` is the link from the primary to the
/// secondary agent and is required for a secondary agent.
pub fn reward(
    net: &TrafficNetwork,
    kind: AgentType,
    node: NodeId,
    snap: &PressureSnapshot,
    emv_link: Option<LinkId>,
    beta: f64,
    variant: PressureReward,
) -> Result<f64, AgentError> {
    Ok(match kind {
        AgentType::Primary => -1.0,
        AgentType::Normal => -pressure(net, node, snap, variant)?,
        AgentType::Secondary => {
            let link = emv_link.ok_or(AgentError::Classification(node))?;
            let lanes = net.links[link].lane_ids.clone();
            let n = lanes.len() as f64;
            let density: f64 = lanes.map(|l| snap.density(l)).sum::<f64>() / n;
            -beta * pressure(net, node, snap, variant)? - (1.0 - beta) * density
        }
    })
}

/// `r̃_i = Σ_j α^{d(i,j)} r_j` over all reachable `j`.
pub fn adjusted_reward(rewards: &[f64], hops: &[Vec<usize>], alpha: f64) -> Vec<f64> {
    hops.iter()
        .map(|row| {
            row.iter()
                .zip(rewards)
                .filter(|(d, _)| **d != usize::MAX)
                .map(|(&d, r)| alpha.powi(d as i32) * r)
                .sum()
        })
        .collect()
}

/// `R̃ = r̃ + γ V(next)`; `None` marks a terminal step.
pub fn local_return(r_adj: f64, v_next: Option<f64>, gamma: f64) -> f64 {
    r_adj + gamma * v_next.unwrap_or(0.0)
}

/// Per-node part of an observation.
fn node_features(
    net: &TrafficNetwork,
    state: &SimState,
    node: NodeId,
    snap: &PressureSnapshot,
    view: Option<(&[f64], &[Option<NodeId>])>,
    eta_scale: f64,
    out: &mut [f64],
) -> Result<(), AgentError> {
    let ix = &net.intersections[node];
    let lanes_of = |link: Option<LinkId>, out: &mut [f64]| -> Result<(), AgentError> {
        if let Some(l) = link {
            let link = &net.links[l];
            if link.lanes > LANES_PER_ARM {
                return Err(AgentError::Layout {
                    node,
                    link: l,
                    lanes: link.lanes,
                });
            }
            for (k, lane) in link.lane_ids.clone().enumerate() {
                out[k] = snap.density(lane);
            }
        }
        Ok(())
    };
    out.fill(0.0);
    for arm in 0..4 {
        lanes_of(ix.arm_in[arm], &mut out[arm * 2..arm * 2 + 2])?;
        lanes_of(ix.arm_out[arm], &mut out[8 + arm * 2..8 + arm * 2 + 2])?;
    }
    let emv = state.emv.as_ref().filter(|e| e.is_active());
    for arm in 0..4 {
        out[16 + arm] = -1.0;
        if let (Some(e), Some(l)) = (emv, ix.arm_in[arm]) {
            if e.link == Some(l) {
                out[16 + arm] = e.distance_to_stop_line(net).unwrap_or(0.0) / net.links[l].length;
            }
        }
    }
    out[20] = -1.0;
    out[21] = -1.0;
    if let (Some(_), Some((eta, next))) = (emv, view) {
        if eta[node].is_finite() {
            out[20] = eta[node] / eta_scale;
        }
        if let Some(arm) = next[node].and_then(|j| ix.arm_of_neighbor(j)) {
            out[21] = arm.index() as f64 / 3.0;
        }
    }
    Ok(())
}

/// Observations of every agent: own features then each arm's neighbor
/// (N, E, S, W), zero-padded where an arm has no neighbor.
pub fn observations(
    net: &TrafficNetwork,
    state: &SimState,
    snap: &PressureSnapshot,
    view: Option<(&[f64], &[Option<NodeId>])>,
    eta_scale: f64,
) -> Result<Vec<Vec<f64>>, AgentError> {
    let n = net.node_count();
    let mut own = vec![0.0; n * NODE_FEATURES];
    for v in 0..n {
        node_features(
            net,
            state,
            v,
            snap,
            view,
            eta_scale,
            &mut own[v * NODE_FEATURES..(v + 1) * NODE_FEATURES],
        )?;
    }
    Ok((0..n)
        .map(|v| {
            let mut o = vec![0.0; OBS_DIM];
            o[..NODE_FEATURES].copy_from_slice(&own[v * NODE_FEATURES..(v + 1) * NODE_FEATURES]);
            for (k, nb) in net.intersections[v].arm_neighbor.iter().enumerate() {
                if let Some(j) = nb {
                    o[(k + 1) * NODE_FEATURES..(k + 2) * NODE_FEATURES]
                        .copy_from_slice(&own[j * NODE_FEATURES..(j + 1) * NODE_FEATURES]);
                }
            }
            o
        })
        .collect())
}

/// Previous-step policies of each arm's neighbor, zero-padded.
pub fn fingerprints(net: &TrafficNetwork, policies: &[Vec<f64>]) -> Vec<Vec<f64>> {
    net.intersections
        .iter()
        .map(|ix| {
            let mut f = vec![0.0; FP_DIM];
            for (k, nb) in ix.arm_neighbor.iter().enumerate() {
                if let Some(j) = nb {
                    f[k * ACTIONS..(k + 1) * ACTIONS].copy_from_slice(&policies[*j]);
                }
            }
            f
        })
        .collect()
}

/// One transition with its bootstrapped return and advantage.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub fp: Vec<f64>,
    pub action: usize,
    /// `R̃`.
    pub ret: f64,
    /// `Ã = R̃ - V_frozen(obs)`.
    pub adv: f64,
}

/// Consecutive samples of one agent; gradients flow through the recurrent
/// state within the sequence, starting from the constant `init`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub init: RecurrentState,
    pub steps: Vec<Sample>,
}

fn batch_size(seqs: &[Sequence]) -> usize {
    seqs.iter().map(|s| s.steps.len()).sum()
}

/// `1/(2|B|) Σ (R̃ - V)²` and its parameter gradient.
pub fn value_loss(model: &Model, seqs: &[Sequence]) -> Result<(f64, nn::ParamSet), NnError> {
    let b = batch_size(seqs);
    assert!(b > 0, "empty batch");
    let mut tape = Tape::new(&model.params);
    let mut terms = Vec::with_capacity(b);
    for seq in seqs {
        let mut s = model.state_vars(&mut tape, &seq.init);
        for x in &seq.steps {
            let (v, next) = model.step(&mut tape, &x.obs, &x.fp, s)?;
            let target = tape.constant(vec![-x.ret]);
            let d = tape.add(v, target);
            terms.push(tape.dot(d, d));
            s = next;
        }
    }
    let total = tape.sum_scalars(&terms);
    let loss = tape.scale(total, 0.5 / b as f64);
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), g))
}

/// `-1/|B| Σ [log π(a) Ã - λ Σ_a π log π]` and its parameter gradient.
pub fn policy_loss(
    model: &Model,
    seqs: &[Sequence],
    lambda: f64,
) -> Result<(f64, nn::ParamSet), NnError> {
    let b = batch_size(seqs);
    assert!(b > 0, "empty batch");
    let mut tape = Tape::new(&model.params);
    let mut terms = Vec::with_capacity(2 * b);
    for seq in seqs {
        let mut s = model.state_vars(&mut tape, &seq.init);
        for x in &seq.steps {
            let (logp, next) = model.step(&mut tape, &x.obs, &x.fp, s)?;
            let mut pick = vec![0.0; model.spec.actions];
            pick[x.action] = x.adv;
            let pick = tape.constant(pick);
            terms.push(tape.dot(logp, pick));
            let p = tape.exp(logp);
            let neg_h = tape.dot(p, logp);
            terms.push(tape.scale(neg_h, -lambda));
            s = next;
        }
    }
    let total = tape.sum_scalars(&terms);
    let loss = tape.scale(total, -1.0 / b as f64);
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), g))
}

/// Values of a frozen critic along a sequence, the bootstrap value of the
/// observation after it, and the recurrent state after the last step.
fn frozen_values(
    critic: &Model,
    init: &RecurrentState,
    steps: &[(Vec<f64>, Vec<f64>)],
    bootstrap: Option<(&[f64], &[f64])>,
) -> Result<(Vec<f64>, Option<f64>, RecurrentState), NnError> {
    let mut s = init.clone();
    let mut vals = Vec::with_capacity(steps.len());
    for (o, f) in steps {
        let (v, next) = critic.forward_value(o, f, &s)?;
        vals.push(v);
        s = next;
    }
    let boot = match bootstrap {
        Some((o, f)) => Some(critic.forward_value(o, f, &s)?.0),
        None => None,
    };
    Ok((vals, boot, s))
}

fn default_n_bs() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_alpha() -> f64 {
    0.9
}
fn default_gamma() -> f64 {
    0.99
}
fn default_lambda() -> f64 {
    0.01
}
fn default_beta() -> f64 {
    0.5
}
fn default_episodes() -> usize {
    100
}
fn default_init_std() -> f64 {
    0.1
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Control steps per episode; defaults to the scenario horizon.
    #[serde(rename = "T", default)]
    pub t_steps: Option<usize>,
    #[serde(default = "default_n_bs")]
    pub n_bs: usize,
    #[serde(default = "default_lr")]
    pub lr_theta: f64,
    #[serde(default = "default_lr")]
    pub lr_phi: f64,
    #[serde(default = "default_alpha")]
    pub alpha_spatial: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub arch: Arch,
    /// One actor and one critic for every intersection.
    #[serde(default)]
    pub share_policy: bool,
    #[serde(default)]
    pub pressure: PressureReward,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Write `policy_epNNNN.json` every this many episodes.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if self.n_bs == 0 {
            return bad("n_bs must be positive");
        }
        if !(self.lr_theta >= 0.0 && self.lr_phi >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha_spatial) {
            return bad("alpha_spatial must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        if self.t_steps == Some(0) {
            return bad("T must be positive");
        }
        Ok(())
    }
}

/// Trained actors and critics plus what is needed to rebuild observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub shared: bool,
    pub eta_scale: f64,
    pub node_names: Vec<String>,
    pub actors: Vec<Model>,
    pub critics: Vec<Model>,
    /// Episodes of training behind these parameters.
    pub episodes: usize,
    pub config: TrainConfig,
}

impl PolicyBundle {
    pub fn new(net: &TrafficNetwork, cfg: &TrainConfig, eta_scale: f64) -> PolicyBundle {
        let count = if cfg.share_policy { 1 } else { net.node_count() };
        let root = seed::derive(cfg.seed, seed::stream::INIT);
        let model = |head: Head, i: usize| {
            let spec = NetSpec::new(cfg.arch, head);
            let key = seed::pack([head as u64, i as u64, 0, 0]);
            Model {
                spec,
                params: spec.init(seed::derive(root, key), cfg.init_std),
            }
        };
        PolicyBundle {
            shared: cfg.share_policy,
            eta_scale,
            node_names: net.nodes.iter().map(|n| n.name.clone()).collect(),
            actors: (0..count).map(|i| model(Head::Policy, i)).collect(),
            critics: (0..count).map(|i| model(Head::Value, i)).collect(),
            episodes: 0,
            config: cfg.clone(),
        }
    }

    /// Model index serving `node`.
    pub fn slot(&self, node: NodeId) -> usize {
        if self.shared {
            0
        } else {
            node
        }
    }

    pub fn check_fits(&self, net: &TrafficNetwork) -> Result<(), AgentError> {
        if !self.shared && self.actors.len() != net.node_count() {
            return Err(AgentError::Bundle(format!(
                "{} per-node policies for {} nodes",
                self.actors.len(),
                net.node_count()
            )));
        }
        if self.actors.is_empty() || self.actors.len() != self.critics.len() {
            return Err(AgentError::Bundle("actor/critic count mismatch".into()));
        }
        for m in self.actors.iter().chain(&self.critics) {
            if m.spec.obs_dim != OBS_DIM || m.spec.fp_dim != FP_DIM || m.spec.actions != ACTIONS {
                return Err(AgentError::Bundle("network input/output sizes".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        Ok(Checkpoint::new(self.clone()).save(path)?)
    }

    pub fn load(path: &Path) -> Result<PolicyBundle, AgentError> {
        Ok(Checkpoint::load(path)?)
    }
}

/// Per-episode training log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub t_emv_s: Option<f64>,
    pub t_avg_s: Option<f64>,
    pub mean_reward: f64,
}

pub fn write_curve_csv(rows: &[EpisodeLog], path: &Path) -> Result<(), AgentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: PolicyBundle,
    pub curve: Vec<EpisodeLog>,
}

/// Rollout bookkeeping of one agent.
#[derive(Clone)]
struct Slot {
    actor: RecurrentState,
    actor_init: RecurrentState,
    critic_init: RecurrentState,
    buf: Vec<(Vec<f64>, Vec<f64>, usize, f64)>,
}

struct Learner {
    bundle: PolicyBundle,
    adam_actor: Vec<nn::Adam>,
    adam_critic: Vec<nn::Adam>,
    updates: usize,
}

impl Learner {
    /// Flush every agent's buffer. `bootstrap` carries the next observation
    /// and fingerprint per agent, or `None` at the end of an episode.
    fn flush(
        &mut self,
        slots: &mut [Slot],
        bootstrap: Option<(&[Vec<f64>], &[Vec<f64>])>,
        lr: (f64, f64),
        episode: usize,
    ) -> Result<(), AgentError> {
        let cfg = self.bundle.config.clone();
        if slots.iter().all(|s| s.buf.is_empty()) {
            return Ok(());
        }
        // returns and advantages against the critics as they stand now
        let mut seqs: Vec<(usize, Sequence, Sequence)> = Vec::with_capacity(slots.len());
        for (i, slot) in slots.iter_mut().enumerate() {
            let k = self.bundle.slot(i);
            let critic = &self.bundle.critics[k];
            let pairs: Vec<(Vec<f64>, Vec<f64>)> =
                slot.buf.iter().map(|(o, f, _, _)| (o.clone(), f.clone())).collect();
            let boot = bootstrap.map(|(o, f)| (o[i].as_slice(), f[i].as_slice()));
            let (vals, vboot, after) = frozen_values(critic, &slot.critic_init, &pairs, boot)?;
            let n = slot.buf.len();
            let mut steps = Vec::with_capacity(n);
            for (t, (o, f, a, r)) in slot.buf.drain(..).enumerate() {
                let v_next = if t + 1 < n { Some(vals[t + 1]) } else { vboot };
                let ret = local_return(r, v_next, cfg.gamma);
                steps.push(Sample {
                    obs: o,
                    fp: f,
                    action: a,
                    ret,
                    adv: ret - vals[t],
                });
            }
            let actor_seq = Sequence {
                init: slot.actor_init.clone(),
                steps,
            };
            let critic_seq = Sequence {
                init: slot.critic_init.clone(),
                steps: actor_seq.steps.clone(),
            };
            slot.critic_init = after;
            slot.actor_init = slot.actor.clone();
            seqs.push((k, actor_seq, critic_seq));
        }
        let groups = self.bundle.actors.len();
        let mut by_group: Vec<(Vec<Sequence>, Vec<Sequence>)> = vec![(Vec::new(), Vec::new()); groups];
        for (k, a, c) in seqs {
            by_group[k].0.push(a);
            by_group[k].1.push(c);
        }
        let update = self.updates;
        let grads: Vec<Result<(nn::ParamSet, nn::ParamSet), NnError>> = by_group
            .par_iter()
            .enumerate()
            .map(|(k, (a, c))| {
                let (_, ga) = policy_loss(&self.bundle.actors[k], a, cfg.lambda)?;
                let (_, gc) = value_loss(&self.bundle.critics[k], c)?;
                Ok((ga, gc))
            })
            .collect();
        for (k, g) in grads.into_iter().enumerate() {
            let (ga, gc) = g.map_err(|source| AgentError::Diverged {
                update,
                episode,
                source,
            })?;
            self.adam_actor[k].step(&mut self.bundle.actors[k].params, &ga, lr.0);
            self.adam_critic[k].step(&mut self.bundle.critics[k].params, &gc, lr.1);
        }
        self.updates += 1;
        Ok(())
    }
}

/// Run one episode under the current policies, collecting and flushing
/// batches along the way. With `learner == None` nothing is updated.
fn rollout(
    net: &TrafficNetwork,
    spec: &EpisodeSpec,
    bundle_ro: Option<&PolicyBundle>,
    mut learner: Option<&mut Learner>,
    steps: usize,
    episode: usize,
    lr: (f64, f64),
) -> Result<(EpisodeMetrics, f64), AgentError> {
    let (cfg, eta_scale, width) = {
        let b = learner.as_deref().map(|l| &l.bundle).or(bundle_ro).expect("a policy bundle");
        (b.config.clone(), b.eta_scale, b.actors[0].spec.recurrent)
    };
    let n = net.node_count();
    let hops = net.hop_distances();
    let mut state = SimState::new(net, &spec.flows, spec.emv, spec.config, spec.horizon_s, spec.seed)?;
    let mut router = DecentralizedRouter::new();
    let mut rng = seed::rng(seed::derive(
        seed::derive(cfg.seed, seed::stream::POLICY),
        spec.seed,
    ));
    let zero = RecurrentState::zeros(width);
    let mut slots = vec![
        Slot {
            actor: zero.clone(),
            actor_init: zero.clone(),
            critic_init: zero.clone(),
            buf: Vec::new(),
        };
        n
    ];
    let mut policies = vec![vec![1.0 / ACTIONS as f64; ACTIONS]; n];
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;

    for _ in 0..steps {
        router.on_control_step(net, &state);
        let snap = PressureSnapshot::from_counts(net, &state.lane_counts());
        let obs = observations(net, &state, &snap, router.routing_view(), eta_scale)?;
        let fps = fingerprints(net, &policies);
        if let Some(l) = learner.as_deref_mut() {
            if slots[0].buf.len() >= cfg.n_bs {
                l.flush(&mut slots, Some((&obs, &fps)), lr, episode)?;
            }
        }
        let current = learner.as_deref().map(|l| &l.bundle).or(bundle_ro).expect("a policy bundle");
        let mut actions = Vec::with_capacity(n);
        for v in 0..n {
            let (p, s) = current.actors[current.slot(v)].forward_policy(&obs[v], &fps[v], &slots[v].actor)?;
            slots[v].actor = s;
            actions.push(nn::sample_categorical(&p, &mut rng));
            policies[v] = p;
        }
        let next = router.routing_view().map(|(_, nx)| nx.to_vec());
        let types = match &next {
            Some(nx) => classify_agents(net, &state, nx),
            None => vec![AgentType::Normal; n],
        };
        let signals: Vec<Signal> = actions.iter().map(|&a| Signal::Phase(a)).collect();
        state.step(net, &signals, spec.config.control_step_s, &mut router)?;

        let snap = PressureSnapshot::from_counts(net, &state.lane_counts());
        let primary = types.iter().position(|t| *t == AgentType::Primary);
        let secondary = types.iter().position(|t| *t == AgentType::Secondary);
        let emv_link = primary.zip(secondary).and_then(|(p, s)| net.link_between(p, s));
        let raw: Vec<f64> = (0..n)
            .map(|v| reward(net, types[v], v, &snap, emv_link, cfg.beta, cfg.pressure))
            .collect::<Result<_, _>>()?;
        reward_sum += raw.iter().sum::<f64>();
        reward_count += n;
        let adj = adjusted_reward(&raw, &hops, cfg.alpha_spatial);
        if learner.is_some() {
            for v in 0..n {
                slots[v]
                    .buf
                    .push((obs[v].clone(), fps[v].clone(), actions[v], adj[v]));
            }
        }
        if state.t >= spec.horizon_s - 1e-9 {
            break;
        }
    }
    if let Some(l) = learner {
        // the horizon truncates the episode; bootstrap from the final state
        let snap = PressureSnapshot::from_counts(net, &state.lane_counts());
        let obs = observations(net, &state, &snap, router.routing_view(), eta_scale)?;
        let fps = fingerprints(net, &policies);
        l.flush(&mut slots, Some((&obs, &fps)), lr, episode)?;
    }
    let metrics = EpisodeMetrics::from_state(&state, spec.horizon_s);
    Ok((metrics, reward_sum / reward_count.max(1) as f64))
}

/// Seed of training episode `e`.
pub fn episode_seed(root: u64, e: usize) -> u64 {
    seed::derive(root, seed::pack([0x7a, e as u64, 0, 0]))
}

/// Train per the actor-critic loop, logging one row per episode. With
/// `out_dir` set, the curve CSV and checkpoints are written there.
pub fn train(
    net: &TrafficNetwork,
    base: &EpisodeSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, AgentError> {
    cfg.validate()?;
    if base.emv.is_none() {
        return Err(AgentError::Config("training scenario needs an EMV".into()));
    }
    let steps = cfg
        .t_steps
        .unwrap_or((base.horizon_s / base.config.control_step_s).ceil() as usize);
    let bundle = PolicyBundle::new(net, cfg, base.horizon_s);
    bundle.check_fits(net)?;
    let mut learner = Learner {
        adam_actor: bundle.actors.iter().map(|m| nn::Adam::new(&m.params)).collect(),
        adam_critic: bundle.critics.iter().map(|m| nn::Adam::new(&m.params)).collect(),
        bundle,
        updates: 0,
    };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut curve = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let lr = (
            nn::linear_decay(cfg.lr_theta, e, cfg.episodes),
            nn::linear_decay(cfg.lr_phi, e, cfg.episodes),
        );
        let spec = EpisodeSpec {
            seed: episode_seed(cfg.seed, e),
            log_steps: false,
            ..base.clone()
        };
        let (m, mean_reward) = rollout(net, &spec, None, Some(&mut learner), steps, e, lr)?;
        learner.bundle.episodes = e + 1;
        curve.push(EpisodeLog {
            episode: e,
            t_emv_s: m.t_emv_s,
            t_avg_s: m.t_avg_s,
            mean_reward,
        });
        if let (Some(d), Some(k)) = (out_dir, cfg.checkpoint_every) {
            if k > 0 && (e + 1) % k == 0 {
                learner.bundle.save(&d.join(format!("policy_ep{:04}.json", e + 1)))?;
            }
        }
    }
    if let Some(d) = out_dir {
        write_curve_csv(&curve, &d.join("curve.csv"))?;
        learner.bundle.save(&d.join("policy.json"))?;
    }
    Ok(TrainOutcome {
        bundle: learner.bundle,
        curve,
    })
}

/// Mean per-agent reward of one episode under the policies, sampling
/// actions as in training but without updates.
pub fn evaluate_reward(
    net: &TrafficNetwork,
    spec: &EpisodeSpec,
    bundle: &PolicyBundle,
) -> Result<f64, AgentError> {
    let steps = (spec.horizon_s / spec.config.control_step_s).ceil() as usize;
    Ok(rollout(net, spec, Some(bundle), None, steps, 0, (0.0, 0.0))?.1)
}

/// How the controller turns a policy into a phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// Draw from the policy with an RNG seeded by the episode seed.
    #[default]
    Sample,
    Greedy,
}

/// Signal controller driven by a trained bundle.
#[derive(Clone, Debug)]
pub struct EmvLightController {
    bundle: PolicyBundle,
    states: Vec<RecurrentState>,
    policies: Vec<Vec<f64>>,
    pub mode: ActionMode,
    rng: seed::Rng,
    /// Path the bundle was loaded from, if any.
    pub source: Option<PathBuf>,
    pub error: Option<String>,
}

impl EmvLightController {
    pub fn new(net: &TrafficNetwork, bundle: PolicyBundle) -> Result<Self, AgentError> {
        bundle.check_fits(net)?;
        let mut c = EmvLightController {
            bundle,
            states: Vec::new(),
            policies: Vec::new(),
            mode: ActionMode::Sample,
            rng: seed::rng(0),
            source: None,
            error: None,
        };
        c.clear(net);
        Ok(c)
    }

    pub fn from_checkpoint(net: &TrafficNetwork, path: &Path) -> Result<Self, AgentError> {
        let mut c = Self::new(net, PolicyBundle::load(path)?)?;
        c.source = Some(path.to_path_buf());
        Ok(c)
    }

    pub fn bundle(&self) -> &PolicyBundle {
        &self.bundle
    }

    pub fn is_trained(&self) -> bool {
        self.bundle.episodes > 0
    }

    fn clear(&mut self, net: &TrafficNetwork) {
        let width = self.bundle.actors[0].spec.recurrent;
        self.states = vec![RecurrentState::zeros(width); net.node_count()];
        self.policies = vec![vec![1.0 / ACTIONS as f64; ACTIONS]; net.node_count()];
    }

    fn try_decide(
        &mut self,
        net: &TrafficNetwork,
        state: &SimState,
        router: &dyn EmvRouter,
    ) -> Result<Vec<Signal>, AgentError> {
        let snap = PressureSnapshot::from_counts(net, &state.lane_counts());
        let obs = observations(net, state, &snap, router.routing_view(), self.bundle.eta_scale)?;
        let fps = fingerprints(net, &self.policies);
        let mut out = Vec::with_capacity(net.node_count());
        for v in 0..net.node_count() {
            let actor = &self.bundle.actors[self.bundle.slot(v)];
            let (p, s) = actor.forward_policy(&obs[v], &fps[v], &self.states[v])?;
            let a = match self.mode {
                ActionMode::Sample => nn::sample_categorical(&p, &mut self.rng),
                ActionMode::Greedy => nn::argmax(&p),
            };
            out.push(Signal::Phase(a));
            self.states[v] = s;
            self.policies[v] = p;
        }
        Ok(out)
    }
}

impl SignalController for EmvLightController {
    fn name(&self) -> &str {
        "emvlight"
    }

    fn reset(&mut self, net: &TrafficNetwork, seed: u64) {
        self.clear(net);
        self.rng = seed::rng(seed::derive(seed, seed::stream::POLICY));
        self.error = None;
    }

    fn decide(&mut self, net: &TrafficNetwork, state: &SimState, router: &dyn EmvRouter) -> Vec<Signal> {
        match self.try_decide(net, state, router) {
            Ok(s) => s,
            Err(e) => {
                // keep the episode running; the caller can inspect `error`
                self.error = Some(e.to_string());
                vec![Signal::Phase(0); net.node_count()]
            }
        }
    }
}
