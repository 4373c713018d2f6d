//! Shared fixtures for the solver benchmarks in `benches/`.

use uavsec_core::comm_alloc::{solve_subproblem1, CommOptions};
use uavsec_core::traj_opt::initial_trajectory;
use uavsec_core::{default_scenario, AllocationState, Dims, Scenario, TrajectorySet};

/// Default geometry with fewer subcarriers so one sample stays short.
pub fn bench_scenario(subcarriers: usize) -> Scenario {
    default_scenario().with_subcarriers(subcarriers)
}

/// A warm point: initial trajectories plus one scheduling and power pass.
pub fn warm_point(s: &Scenario) -> (AllocationState, TrajectorySet) {
    let traj = initial_trajectory(s).expect("default geometry has a feasible start");
    let comm = solve_subproblem1(&AllocationState::zeros(Dims::of(s)), &traj, s, &CommOptions::default());
    (comm.state, traj)
}
