//! Secure multi-UAV OFDMA: joint scheduling, power control, cooperative
//! jamming and trajectory design that maximize the average minimum secrecy
//! rate over a set of ground users in the presence of eavesdroppers.

pub mod channel;
pub mod comm_alloc;
pub mod convex_core;
pub mod jam_alloc;
pub mod orchestrator;
pub mod rates;
pub mod scenario;
pub mod traj_opt;

pub use channel::{channel_gain, inside_nfz, link_distance, Point, Waypoint};
pub use rates::{AllocationState, ConstraintReport, Dims, TrajectorySet};
pub use scenario::{default_scenario, load_scenario, validate, NoFlyZone, Scenario, ScenarioError, UavSpec};
pub use orchestrator::{solve, solve_nj, solve_pa, solve_sp, Scheme, SolveError, SolveOptions, SolveReport};
