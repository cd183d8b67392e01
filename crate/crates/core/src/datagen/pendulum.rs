use crate::error::{Error, Result};

use super::{interp_uniform, rk4_step};

/// Forced pendulum `s1' = s2`, `s2' = -k sin(s1) + u(t)` from rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumSpec {
    pub k: f64,
    pub t_end: f64,
    /// Requested step; the solver may shorten it (see [`solve_pendulum`]).
    pub dt: f64,
}

impl Default for PendulumSpec {
    fn default() -> Self {
        Self {
            k: 1.0,
            t_end: 1.0,
            dt: 1e-3,
        }
    }
}

/// `s1` on a uniform time grid over `[0, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PendulumSolution {
    t_end: f64,
    s1: Vec<f64>,
}

impl PendulumSolution {
    /// Linear interpolation between solver steps; `t` is clamped to the span.
    pub fn eval(&self, t: f64) -> f64 {
        interp_uniform(&self.s1, 0.0, self.t_end, t)
    }

    pub fn steps(&self) -> usize {
        self.s1.len() - 1
    }

    pub fn terminal(&self) -> f64 {
        *self.s1.last().expect("at least one state")
    }
}

/// Classical RK4 with `u` linearly interpolated between sensors at
/// `linspace(0, t_end, m)`.
///
/// The step count is rounded up to a multiple of `m - 1` so every sensor is a
/// step boundary and the piecewise-linear forcing is smooth within each step.
pub fn solve_pendulum(u: &[f64], spec: &PendulumSpec) -> Result<PendulumSolution> {
    if u.len() < 2 {
        return Err(Error::invalid("pendulum forcing needs at least two sensors"));
    }
    if !(spec.dt > 0.0 && spec.t_end > 0.0) {
        return Err(Error::invalid("pendulum dt and t_end must be positive"));
    }
    let intervals = u.len() - 1;
    let per_interval = ((spec.t_end / spec.dt) / intervals as f64 - 1e-9).ceil().max(1.0) as usize;
    let steps = per_interval * intervals;
    let dt = spec.t_end / steps as f64;
    let k = spec.k;
    let forcing = |t: f64| interp_uniform(u, 0.0, spec.t_end, t);
    let rhs = |t: f64, s: &[f64; 2]| [s[1], -k * s[0].sin() + forcing(t)];

    let mut s1 = Vec::with_capacity(steps + 1);
    let mut state = [0.0, 0.0];
    s1.push(0.0);
    for i in 0..steps {
        state = rk4_step(&rhs, i as f64 * dt, &state, dt);
        s1.push(state[0]);
    }
    if !state[0].is_finite() {
        return Err(Error::Unstable("pendulum state became non-finite".into()));
    }
    Ok(PendulumSolution {
        t_end: spec.t_end,
        s1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_grf, GrfSpec};

    #[test]
    fn zero_forcing_stays_at_rest() {
        let sol = solve_pendulum(&[0.0; 100], &PendulumSpec::default()).unwrap();
        assert!((0..=20).all(|i| sol.eval(i as f64 / 20.0) == 0.0));
    }

    #[test]
    fn step_count_aligns_with_sensors() {
        let sol = solve_pendulum(&[0.0; 100], &PendulumSpec::default()).unwrap();
        assert_eq!(sol.steps(), 1089);
        assert_eq!(sol.steps() % 99, 0);
    }

    #[test]
    fn small_constant_forcing_matches_linearization() {
        let c = 1e-3;
        let sol = solve_pendulum(&[c; 100], &PendulumSpec::default()).unwrap();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let lin = c * (1.0 - t.cos());
            assert!((sol.eval(t) - lin).abs() < 1e-8, "t={t}: {} vs {lin}", sol.eval(t));
        }
    }

    #[test]
    fn halving_dt_changes_terminal_state_below_1e8() {
        let u = sample_grf(&GrfSpec::unit_interval(100), 7).unwrap();
        let coarse = solve_pendulum(&u, &PendulumSpec::default()).unwrap();
        let fine = solve_pendulum(&u, &PendulumSpec { dt: 5e-4, ..PendulumSpec::default() }).unwrap();
        let diff = (coarse.terminal() - fine.terminal()).abs();
        assert!(diff < 1e-8, "diff {diff:e}");
    }
}
