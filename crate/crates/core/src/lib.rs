//! Emergency-vehicle traffic laboratory.
//!
//! A mesoscopic traffic simulator with signal control, decentralized
//! emergency-vehicle routing, multi-agent actor-critic signal agents, the
//! classical baselines they are compared against, and an intersection-aware
//! EMS accessibility model.
//!
//! Module map:
//! - [`network`]: intersections, links, lanes, movements and 8-phase signal tables.
//! - [`dynamics`]: point-queue traffic dynamics and EMV motion with emergency lanes.
//! - [`pressure`]: lane, intersection and phase pressures.
//! - [`routing`]: ETA/Next tables with Dijkstra pre-population and Bellman sweeps.
//! - [`nn`]: reverse-mode tape, dense/LSTM actor and critic networks, Adam.
//! - [`agents`]: agent typing, observations, rewards, losses and the A2C trainer.
//! - [`baselines`]: fixed time, max pressure, green wave, static and periodic A*.
//! - [`accessibility`]: intersection density, adjusted travel times, Voronoi
//!   population assignment, coverage curves and vulnerability reports.
//! - [`harness`]: scenarios, seeded benchmark matrices, result tables and plots.

pub mod accessibility;
pub mod agents;
pub mod baselines;
pub mod dynamics;
pub mod harness;
pub mod network;
pub mod nn;
pub mod pressure;
pub mod routing;
pub mod seed;

pub use dynamics::{emv_speed, EpisodeMetrics, SimState};
pub use network::{generate_grid, load_network, TrafficNetwork};
pub use routing::{LinkTimeField, RoutingTable};
