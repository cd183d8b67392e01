use crate::error::{Error, Result};

use super::interp_uniform;

/// `s_t = D s_xx + k s^2 + u(x)` on `[0, 1]` with zero boundary and initial
/// values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionReactionSpec {
    pub diffusion: f64,
    pub reaction: f64,
    pub t_end: f64,
    /// Number of grid intervals; nodes sit at `i / nx`.
    pub nx: usize,
    /// Requested step; shortened when it exceeds the RK4 stability bound.
    pub dt: f64,
}

impl Default for DiffusionReactionSpec {
    fn default() -> Self {
        Self {
            diffusion: 0.01,
            reaction: 0.01,
            t_end: 1.0,
            nx: 100,
            dt: 0.002,
        }
    }
}

impl DiffusionReactionSpec {
    /// Step actually taken: `t_end` split evenly into steps no longer than
    /// `dt` or 90% of the RK4 stability limit of the diffusion operator.
    pub fn effective_dt(&self) -> f64 {
        let h = 1.0 / self.nx as f64;
        let bound = 2.785 * h * h / (4.0 * self.diffusion);
        let target = self.dt.min(0.9 * bound);
        self.t_end / (self.t_end / target).ceil()
    }
}

/// Terminal profile `s(., t_end)` on the solver nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionProfile {
    values: Vec<f64>,
}

impl DiffusionProfile {
    /// Linear interpolation between nodes; `x` is clamped to `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        interp_uniform(&self.values, 0.0, 1.0, x)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.values
    }
}

/// Method of lines: second-order central differences in space, classical RK4
/// in time. The source is the linear interpolant of the sensor values at
/// `linspace(0, 1, m)`.
pub fn solve_diffusion_reaction(u: &[f64], spec: &DiffusionReactionSpec) -> Result<DiffusionProfile> {
    if u.len() < 2 {
        return Err(Error::invalid("source needs at least two sensors"));
    }
    if spec.nx < 2 || !(spec.dt > 0.0 && spec.t_end > 0.0 && spec.diffusion > 0.0) {
        return Err(Error::invalid("diffusion spec needs nx >= 2 and positive dt, t_end, D"));
    }
    let nx = spec.nx;
    let h = 1.0 / nx as f64;
    let interior = nx - 1;
    let source: Vec<f64> = (1..nx)
        .map(|i| interp_uniform(u, 0.0, 1.0, i as f64 * h))
        .collect();
    let dt = spec.effective_dt();
    let steps = (spec.t_end / dt).round() as usize;
    let (dc, kc) = (spec.diffusion / (h * h), spec.reaction);

    let rhs = |s: &[f64], out: &mut [f64]| {
        for i in 0..interior {
            let left = if i == 0 { 0.0 } else { s[i - 1] };
            let right = if i + 1 == interior { 0.0 } else { s[i + 1] };
            out[i] = dc * (left - 2.0 * s[i] + right) + kc * s[i] * s[i] + source[i];
        }
    };

    let mut s = vec![0.0; interior];
    let mut k1 = vec![0.0; interior];
    let mut k2 = vec![0.0; interior];
    let mut k3 = vec![0.0; interior];
    let mut k4 = vec![0.0; interior];
    let mut tmp = vec![0.0; interior];
    for step in 0..steps {
        rhs(&s, &mut k1);
        axpy_into(&mut tmp, &s, 0.5 * dt, &k1);
        rhs(&tmp, &mut k2);
        axpy_into(&mut tmp, &s, 0.5 * dt, &k2);
        rhs(&tmp, &mut k3);
        axpy_into(&mut tmp, &s, dt, &k3);
        rhs(&tmp, &mut k4);
        for i in 0..interior {
            s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if s.iter().any(|v| !(v.abs() <= 1e6)) {
            return Err(Error::Unstable(format!(
                "diffusion-reaction state exceeded 1e6 at step {step} (dt={dt:e})"
            )));
        }
    }
    let mut values = Vec::with_capacity(nx + 1);
    values.push(0.0);
    values.extend_from_slice(&s);
    values.push(0.0);
    Ok(DiffusionProfile { values })
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}
