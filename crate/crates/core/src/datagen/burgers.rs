use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Viscous Burgers `u_t + (u^2/2)_x = nu u_xx` on the periodic domain
/// `[0, 2 pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersSpec {
    pub viscosity: f64,
    pub t_end: f64,
    /// Number of collocation points; must be even.
    pub nx: usize,
    pub dt: f64,
}

impl Default for BurgersSpec {
    fn default() -> Self {
        Self {
            viscosity: 0.05,
            t_end: 0.3,
            nx: 128,
            dt: 2e-4,
        }
    }
}

/// Sensor locations `2 pi j / m`, `j = 0..m`.
pub fn periodic_grid(m: usize) -> Vec<f64> {
    (0..m).map(|j| 2.0 * PI * j as f64 / m as f64).collect()
}

fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Terminal profile as a truncated Fourier series `sum_k a_k e^{ikx}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BurgersProfile {
    coeffs: Vec<Complex64>,
}

impl BurgersProfile {
    /// Spectral interpolation at any `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.coeffs.len();
        let mut sum = self.coeffs[0].re;
        for k in 1..n / 2 {
            let phase = Complex64::from_polar(1.0, k as f64 * x);
            sum += 2.0 * (self.coeffs[k] * phase).re;
        }
        sum
    }

    /// Mean value over one period.
    pub fn mean(&self) -> f64 {
        self.coeffs[0].re
    }

    pub fn grid_values(&self) -> Vec<f64> {
        let n = self.coeffs.len();
        let mut buf = self.coeffs.clone();
        FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }
}

struct Spectral {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    k: Vec<f64>,
    keep: Vec<bool>,
    scratch: Vec<Complex64>,
}

impl Spectral {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let k: Vec<f64> = (0..n).map(|i| wavenumber(i, n) as f64).collect();
        // Two-thirds rule: products are formed only from |k| <= n/3.
        let cut = (n / 3) as f64;
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            keep: k.iter().map(|&kk| kk.abs() <= cut).collect(),
            k,
            scratch: vec![Complex64::default(); n],
        }
    }

    /// `-ik (u^2/2)^ - nu k^2 a`; returns the max |u| seen on the grid.
    fn rhs(&mut self, a: &[Complex64], nu: f64, out: &mut [Complex64]) -> f64 {
        for i in 0..self.n {
            self.scratch[i] = if self.keep[i] { a[i] } else { Complex64::default() };
        }
        self.inverse.process(&mut self.scratch);
        let mut umax: f64 = 0.0;
        for c in &mut self.scratch {
            let u = c.re;
            umax = umax.max(u.abs());
            *c = Complex64::new(0.5 * u * u, 0.0);
        }
        self.forward.process(&mut self.scratch);
        let inv_n = 1.0 / self.n as f64;
        for i in 0..self.n {
            let k = self.k[i];
            let flux = if self.keep[i] { self.scratch[i] * inv_n } else { Complex64::default() };
            out[i] = Complex64::new(0.0, -k) * flux - nu * k * k * a[i];
        }
        if umax.is_nan() {
            f64::INFINITY
        } else {
            umax
        }
    }
}

/// Fourier pseudo-spectral solve with explicit RK4. The initial condition is
/// the trigonometric interpolant of the samples on [`periodic_grid`]`(m)`
/// (Nyquist mode dropped) resampled onto `nx` points.
pub fn solve_burgers(u0: &[f64], spec: &BurgersSpec) -> Result<BurgersProfile> {
    let m = u0.len();
    let n = spec.nx;
    if m < 2 || n < 4 || !n.is_multiple_of(2) {
        return Err(Error::invalid("Burgers needs >= 2 sensors and an even nx >= 4"));
    }
    if !(spec.dt > 0.0 && spec.t_end > 0.0 && spec.viscosity >= 0.0) {
        return Err(Error::invalid("Burgers dt and t_end must be positive"));
    }
    let mut sensors: Vec<Complex64> = u0.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut sensors);
    let mut a = vec![Complex64::default(); n];
    let kmax = ((m - 1) / 2).min(n / 2 - 1) as i64;
    for (i, c) in sensors.iter().enumerate() {
        let k = wavenumber(i, m);
        if k.abs() <= kmax {
            let j = if k >= 0 { k as usize } else { (n as i64 + k) as usize };
            a[j] = c / m as f64;
        }
    }

    let steps = (spec.t_end / spec.dt).ceil() as usize;
    let dt = spec.t_end / steps as f64;
    let nu = spec.viscosity;
    let mut sp = Spectral::new(n);
    let zero = vec![Complex64::default(); n];
    let (mut k1, mut k2, mut k3, mut k4) = (zero.clone(), zero.clone(), zero.clone(), zero.clone());
    let mut tmp = zero;
    for step in 0..steps {
        let umax = sp.rhs(&a, nu, &mut k1);
        if !(umax <= 1e6) {
            return Err(Error::Unstable(format!(
                "Burgers solution exceeded 1e6 at step {step} (dt={dt:e})"
            )));
        }
        for i in 0..n {
            tmp[i] = a[i] + 0.5 * dt * k1[i];
        }
        sp.rhs(&tmp, nu, &mut k2);
        for i in 0..n {
            tmp[i] = a[i] + 0.5 * dt * k2[i];
        }
        sp.rhs(&tmp, nu, &mut k3);
        for i in 0..n {
            tmp[i] = a[i] + dt * k3[i];
        }
        sp.rhs(&tmp, nu, &mut k4);
        for i in 0..n {
            a[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    if a.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Unstable("Burgers coefficients became non-finite".into()));
    }
    Ok(BurgersProfile { coeffs: a })
}

/// Weighted sum of two Gaussian densities, wrapped onto the period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersIc {
    pub weight: f64,
    pub means: [f64; 2],
    pub stds: [f64; 2],
}

impl BurgersIc {
    /// `weight ~ U[0,5]`, means `~ U[0, 2 pi]`, stds `~ U[0.1, 1]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let weight = rng.random_range(0.0..5.0);
        let means = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        let stds = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        Self { weight, means, stds }
    }

    /// `w phi(x; mu1, s1) + phi(x; mu2, s2)`, each density summed over the
    /// images shifted by `-2 pi, 0, 2 pi` so the profile is periodic.
    pub fn eval(&self, x: f64) -> f64 {
        let density = |mu: f64, sd: f64| -> f64 {
            [-2.0 * PI, 0.0, 2.0 * PI]
                .iter()
                .map(|shift| {
                    let z = (x - mu + shift) / sd;
                    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
                })
                .sum()
        };
        self.weight * density(self.means[0], self.stds[0]) + density(self.means[1], self.stds[1])
    }

    pub fn on_grid(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&x| self.eval(x)).collect()
    }
}

/// Initial condition drawn from `seed`, sampled on `periodic_grid(m)`.
pub fn sample_burgers_ic(seed: u64, m: usize) -> Vec<f64> {
    BurgersIc::sample(&mut ChaCha8Rng::seed_from_u64(seed)).on_grid(&periodic_grid(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_ic() -> Vec<f64> {
        let ic = BurgersIc {
            weight: 1.0,
            means: [2.0, 4.0],
            stds: [0.8, 0.9],
        };
        ic.on_grid(&periodic_grid(100))
    }

    #[test]
    fn constants_are_steady() {
        let p = solve_burgers(&[0.7; 100], &BurgersSpec::default()).unwrap();
        for j in 0..50 {
            assert!((p.eval(j as f64 * 0.1) - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_is_conserved() {
        let u0 = sample_burgers_ic(3, 100);
        let mean0 = u0.iter().sum::<f64>() / u0.len() as f64;
        let p = solve_burgers(&u0, &BurgersSpec::default()).unwrap();
        assert!((p.mean() - mean0).abs() < 1e-10);
        let grid = p.grid_values();
        assert!((grid.iter().sum::<f64>() / grid.len() as f64 - mean0).abs() < 1e-10);
    }

    #[test]
    fn profile_is_periodic_and_grid_consistent() {
        let p = solve_burgers(&smooth_ic(), &BurgersSpec::default()).unwrap();
        assert!((p.eval(0.0) - p.eval(2.0 * PI)).abs() < 1e-12);
        let grid = p.grid_values();
        for (j, v) in grid.iter().enumerate() {
            assert!((p.eval(2.0 * PI * j as f64 / 128.0) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_bump_peaks_at_its_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ic = BurgersIc::sample(&mut rng);
        ic.weight = 0.0;
        let grid = periodic_grid(100);
        let vals = ic.on_grid(&grid);
        let argmax = (0..100).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let d = (grid[argmax] - ic.means[1]).abs();
        let d = d.min(2.0 * PI - d);
        assert!(d <= 2.0 * PI / 100.0);
    }

    #[test]
    fn samples_are_finite_nonnegative_and_deterministic() {
        for seed in 0..10_000 {
            let u = sample_burgers_ic(seed, 100);
            assert!(u.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        assert_eq!(sample_burgers_ic(9, 100), sample_burgers_ic(9, 100));
    }

    #[test]
    fn odd_grid_rejected() {
        let spec = BurgersSpec { nx: 127, ..BurgersSpec::default() };
        assert!(solve_burgers(&[0.0; 100], &spec).is_err());
    }
}
