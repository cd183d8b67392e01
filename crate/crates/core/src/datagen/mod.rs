//! Synthetic operator-learning problems: random inputs, reference solvers,
//! dataset assembly and text persistence.

mod burgers;
mod dataset;
mod diffusion;
mod grf;
mod jump;
mod pendulum;

pub use burgers::{periodic_grid, sample_burgers_ic, solve_burgers, BurgersIc, BurgersProfile, BurgersSpec};
pub use dataset::{
    assemble_dataset, assemble_trajectories, eval_mesh, read_opds, read_optraj, sample_seed, write_opds, write_optraj,
    JumpTarget, Problem, Solution, Split, Trajectory, TrajectoryDataset, SENSORS,
};
pub use diffusion::{solve_diffusion_reaction, DiffusionProfile, DiffusionReactionSpec};
pub use grf::{sample_grf, GrfSampler, GrfSpec};
pub use jump::{jump_fidelity_eval, JumpFidelity};
pub use pendulum::{solve_pendulum, PendulumSolution, PendulumSpec};

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let h = (b - a) / (n - 1) as f64;
            (0..n).map(|i| if i + 1 == n { b } else { a + i as f64 * h }).collect()
        }
    }
}

/// Piecewise-linear interpolation of samples on a uniform grid over
/// `[a, b]`; `t` outside the grid is clamped.
pub(crate) fn interp_uniform(values: &[f64], a: f64, b: f64, t: f64) -> f64 {
    let n = values.len();
    let pos = ((t - a) / (b - a) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let i = (pos.floor() as usize).min(n - 2);
    let w = pos - i as f64;
    if w == 0.0 {
        values[i]
    } else {
        values[i] + w * (values[i + 1] - values[i])
    }
}

pub(crate) fn rk4_step<const N: usize>(
    f: &impl Fn(f64, &[f64; N]) -> [f64; N],
    t: f64,
    s: &[f64; N],
    dt: f64,
) -> [f64; N] {
    let add = |a: &[f64; N], b: &[f64; N], c: f64| std::array::from_fn(|i| a[i] + c * b[i]);
    let k1 = f(t, s);
    let k2 = f(t + 0.5 * dt, &add(s, &k1, 0.5 * dt));
    let k3 = f(t + 0.5 * dt, &add(s, &k2, 0.5 * dt));
    let k4 = f(t + dt, &add(s, &k3, dt));
    std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}
