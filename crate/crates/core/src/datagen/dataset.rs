use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::textio::{header_field, join_g17, parse_reals, Lines};
use crate::training::OperatorTriplet;

use super::burgers::{periodic_grid, solve_burgers, BurgersIc, BurgersProfile, BurgersSpec};
use super::diffusion::{solve_diffusion_reaction, DiffusionProfile, DiffusionReactionSpec};
use super::grf::{GrfSampler, GrfSpec};
use super::jump::jump_from_input;
use super::pendulum::{solve_pendulum, PendulumSolution, PendulumSpec};
use super::{interp_uniform, linspace};

/// Sensor count shared by every problem.
pub const SENSORS: usize = 100;

/// Which quantity of the jump function a dataset targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpTarget {
    Low,
    High,
    /// `y_H - y_L`, the residual learned on top of a low-fidelity model.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Problem {
    Pendulum(PendulumSpec),
    Diffusion(DiffusionReactionSpec),
    Burgers(BurgersSpec),
    Jump(JumpTarget),
}

impl Problem {
    pub fn pendulum() -> Self {
        Problem::Pendulum(PendulumSpec::default())
    }

    pub fn diffusion() -> Self {
        Problem::Diffusion(DiffusionReactionSpec::default())
    }

    pub fn burgers() -> Self {
        Problem::Burgers(BurgersSpec::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Problem::Pendulum(_) => "pendulum",
            Problem::Diffusion(_) => "diffusion",
            Problem::Burgers(_) => "burgers",
            Problem::Jump(JumpTarget::Low) => "jump-low",
            Problem::Jump(JumpTarget::High) => "jump-high",
            Problem::Jump(JumpTarget::Residual) => "jump-residual",
        }
    }

    pub fn sensors(&self) -> usize {
        SENSORS
    }

    pub fn coord_dim(&self) -> usize {
        1
    }

    /// Evaluation domain of the output function.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            Problem::Burgers(_) => (0.0, 2.0 * PI),
            _ => (0.0, 1.0),
        }
    }

    /// Solve for the output function of input `u`.
    pub fn solve(&self, u: &[f64]) -> Result<Solution> {
        check_len("input sensors", SENSORS, u.len())?;
        Ok(match self {
            Problem::Pendulum(spec) => Solution::Pendulum(solve_pendulum(u, spec)?),
            Problem::Diffusion(spec) => Solution::Diffusion(solve_diffusion_reaction(u, spec)?),
            Problem::Burgers(spec) => Solution::Burgers(solve_burgers(u, spec)?),
            Problem::Jump(target) => Solution::Jump {
                u: u.to_vec(),
                target: *target,
            },
        })
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pendulum" => Problem::pendulum(),
            "diffusion" => Problem::diffusion(),
            "burgers" => Problem::burgers(),
            "jump-low" => Problem::Jump(JumpTarget::Low),
            "jump-high" => Problem::Jump(JumpTarget::High),
            "jump-residual" => Problem::Jump(JumpTarget::Residual),
            other => return Err(Error::invalid(format!("unknown problem {other:?}"))),
        })
    }
}

/// Output function of one input, evaluable anywhere in the domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Pendulum(PendulumSolution),
    Diffusion(DiffusionProfile),
    Burgers(BurgersProfile),
    Jump { u: Vec<f64>, target: JumpTarget },
}

impl Solution {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Solution::Pendulum(s) => s.eval(x),
            Solution::Diffusion(s) => s.eval(x),
            Solution::Burgers(s) => s.eval(x),
            Solution::Jump { u, target } => {
                // The input is affine, so the sensor interpolant is exact.
                let y = jump_from_input(interp_uniform(u, 0.0, 1.0, x), x);
                match target {
                    JumpTarget::Low => y.low,
                    JumpTarget::High => y.high,
                    JumpTarget::Residual => y.high - y.low,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Calibration,
    Test,
    /// Extra pool for calibration-size studies.
    Pool,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Calibration => 0x6361_6c69_6200_0002,
            Split::Test => 0x7465_7374_0000_0003,
            Split::Pool => 0x706f_6f6c_0000_0004,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "calib" | "calibration" => Ok(Split::Calibration),
            "test" => Ok(Split::Test),
            "pool" => Ok(Split::Pool),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in `split`, derived from the base seed.
pub fn sample_seed(base: u64, split: Split, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ split.tag()) ^ index)
}

/// Draws input functions for one problem; the GRF factor is computed once.
struct InputSampler {
    problem: Problem,
    grf: Option<GrfSampler>,
}

impl InputSampler {
    fn new(problem: Problem) -> Result<Self> {
        let grf = match problem {
            Problem::Pendulum(_) | Problem::Diffusion(_) => Some(GrfSampler::new(&GrfSpec::unit_interval(SENSORS))?),
            _ => None,
        };
        Ok(Self { problem, grf })
    }

    fn input(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match (&self.grf, self.problem) {
            (Some(grf), _) => grf.sample_with(rng),
            (None, Problem::Burgers(_)) => BurgersIc::sample(rng).on_grid(&periodic_grid(SENSORS)),
            (None, _) => {
                let a = rng.random_range(10.0..14.0);
                linspace(0.0, 1.0, SENSORS).iter().map(|x| a * x - 4.0).collect()
            }
        }
    }
}

fn with_seed<T>(seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Sample {
        seed,
        source: Box::new(e),
    })
}

/// `count` triplets, each pairing a fresh input with one uniformly random
/// evaluation point.
pub fn assemble_dataset(problem: Problem, split: Split, count: usize, seed: u64) -> Result<Vec<OperatorTriplet>> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let sampler = InputSampler::new(problem)?;
    let (lo, hi) = problem.domain();
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = sample_seed(seed, split, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let u = sampler.input(&mut rng);
            let x = rng.random_range(lo..hi);
            let sol = with_seed(s, problem.solve(&u))?;
            Ok(OperatorTriplet::new(u, vec![x], sol.eval(x)))
        })
        .collect()
}

/// One input function with reference values on an evaluation mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: Vec<f64>,
    /// Row-major `n_eval x d` coordinates.
    pub x: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub m: usize,
    pub d: usize,
    pub n_eval: usize,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(m: usize, d: usize, n_eval: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        for t in &trajectories {
            check_len("trajectory sensors", m, t.u.len())?;
            check_len("trajectory coordinates", n_eval * d, t.x.len())?;
            check_len("trajectory targets", n_eval, t.g.len())?;
            if t.g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("trajectory target".into()));
            }
        }
        Ok(Self {
            m,
            d,
            n_eval,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Cell centres `lo + (i + 1/2) (hi - lo) / n`: equal weight per point, the
/// same law as the uniform `x` of calibration triplets, and no duplicated
/// point on a periodic domain.
pub fn eval_mesh(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

/// `n_traj` inputs, each solved and evaluated on the `n_eval`-point
/// [`eval_mesh`] of the domain.
pub fn assemble_trajectories(problem: Problem, n_traj: usize, n_eval: usize, seed: u64) -> Result<TrajectoryDataset> {
    if n_traj == 0 || n_eval == 0 {
        return Err(Error::invalid("n_traj and n_eval must be at least 1"));
    }
    let sampler = InputSampler::new(problem)?;
    let (lo, hi) = problem.domain();
    let mesh = eval_mesh(lo, hi, n_eval);
    let trajectories = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let s = sample_seed(seed, Split::Test, i);
            let u = sampler.input(&mut ChaCha8Rng::seed_from_u64(s));
            let sol = with_seed(s, problem.solve(&u))?;
            let g = mesh.iter().map(|&x| sol.eval(x)).collect();
            Ok(Trajectory {
                u,
                x: mesh.clone(),
                g,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(SENSORS, problem.coord_dim(), n_eval, trajectories)
}

/// `opds v1` text for a triplet list.
pub fn write_opds(data: &[OperatorTriplet]) -> Result<String> {
    let (m, d) = data.first().map_or((0, 0), |t| (t.u.len(), t.x.len()));
    let mut out = format!("opds v1 m={m} d={d} count={}\n", data.len());
    for t in data {
        check_len("triplet sensors", m, t.u.len())?;
        check_len("triplet coordinates", d, t.x.len())?;
        out.push_str(&join_g17(t.u.iter().chain(&t.x).chain(std::iter::once(&t.g))));
        out.push('\n');
    }
    Ok(out)
}

pub fn read_opds(text: &str) -> Result<Vec<OperatorTriplet>> {
    let mut lines = Lines::new(text);
    let (n, header) = lines.next_line()?;
    if !header.starts_with("opds v1") {
        return Err(Error::parse(n, "expected an `opds v1` header"));
    }
    let m = header_field(header, "m", n)?;
    let d = header_field(header, "d", n)?;
    let count = header_field(header, "count", n)?;
    (0..count)
        .map(|_| {
            let (n, line) = lines.next_line()?;
            let vals = parse_reals(line, n)?;
            if vals.len() != m + d + 1 {
                return Err(Error::parse(n, format!("expected {} values, found {}", m + d + 1, vals.len())));
            }
            Ok(OperatorTriplet::new(vals[..m].to_vec(), vals[m..m + d].to_vec(), vals[m + d]))
        })
        .collect()
}

/// `optraj v1` text for a trajectory dataset.
pub fn write_optraj(data: &TrajectoryDataset) -> String {
    let mut out = format!(
        "optraj v1 m={} d={} n_traj={} n_eval={}\n",
        data.m,
        data.d,
        data.len(),
        data.n_eval
    );
    for t in &data.trajectories {
        out.push_str(&join_g17(&t.u));
        out.push('\n');
        for (x, g) in t.x.chunks(data.d).zip(&t.g) {
            out.push_str(&join_g17(x.iter().chain(std::iter::once(g))));
            out.push('\n');
        }
    }
    out
}

pub fn read_optraj(text: &str) -> Result<TrajectoryDataset> {
    let mut lines = Lines::new(text);
    let (n, header) = lines.next_line()?;
    if !header.starts_with("optraj v1") {
        return Err(Error::parse(n, "expected an `optraj v1` header"));
    }
    let m = header_field(header, "m", n)?;
    let d = header_field(header, "d", n)?;
    let n_traj = header_field(header, "n_traj", n)?;
    let n_eval = header_field(header, "n_eval", n)?;
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let (n, line) = lines.next_line()?;
        let u = parse_reals(line, n)?;
        if u.len() != m {
            return Err(Error::parse(n, format!("expected {m} sensor values, found {}", u.len())));
        }
        let mut x = Vec::with_capacity(n_eval * d);
        let mut g = Vec::with_capacity(n_eval);
        for _ in 0..n_eval {
            let (n, line) = lines.next_line()?;
            let vals = parse_reals(line, n)?;
            if vals.len() != d + 1 {
                return Err(Error::parse(n, format!("expected {} values, found {}", d + 1, vals.len())));
            }
            x.extend_from_slice(&vals[..d]);
            g.push(vals[d]);
        }
        trajectories.push(Trajectory { u, x, g });
    }
    TrajectoryDataset::new(m, d, n_eval, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_mesh_is_cell_centred() {
        assert_eq!(eval_mesh(0.0, 1.0, 4), vec![0.125, 0.375, 0.625, 0.875]);
        let m = eval_mesh(0.0, 2.0 * std::f64::consts::PI, 100);
        assert_eq!(m.len(), 100);
        assert!(m[0] > 0.0 && m[99] < 2.0 * std::f64::consts::PI);
        // Points are symmetric about the domain midpoint.
        assert!((m[0] + m[99] - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }
    use std::collections::HashSet;

    fn fingerprint(u: &[f64]) -> Vec<u64> {
        u.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn triplets_replay_through_the_solver() {
        for problem in [Problem::pendulum(), Problem::diffusion(), Problem::burgers(), Problem::Jump(JumpTarget::High)] {
            let data = assemble_dataset(problem, Split::Train, 5, 3).unwrap();
            let (lo, hi) = problem.domain();
            for t in &data {
                assert!(t.x[0] >= lo && t.x[0] < hi);
                assert_eq!(problem.solve(&t.u).unwrap().eval(t.x[0]), t.g);
            }
        }
    }

    #[test]
    fn splits_share_no_inputs() {
        let problem = Problem::Jump(JumpTarget::Low);
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Calibration, Split::Pool] {
            for t in assemble_dataset(problem, split, 300, 1).unwrap() {
                assert!(seen.insert(fingerprint(&t.u)));
            }
        }
        for t in assemble_trajectories(problem, 100, 5, 1).unwrap().trajectories {
            assert!(seen.insert(fingerprint(&t.u)));
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let a = assemble_dataset(Problem::pendulum(), Split::Calibration, 4, 9).unwrap();
        assert_eq!(a, assemble_dataset(Problem::pendulum(), Split::Calibration, 4, 9).unwrap());
        assert_ne!(a, assemble_dataset(Problem::pendulum(), Split::Calibration, 4, 10).unwrap());
        assert!(assemble_dataset(Problem::pendulum(), Split::Train, 0, 9).is_err());
    }

    #[test]
    fn jump_targets_follow_the_formula() {
        let data = assemble_dataset(Problem::Jump(JumpTarget::Residual), Split::Train, 20, 2).unwrap();
        for t in data {
            let a = t.u[SENSORS - 1] - t.u[0];
            assert!((10.0..14.0).contains(&a));
            let y = super::super::jump_fidelity_eval(a, t.x[0]);
            assert!((t.g - (y.high - y.low)).abs() < 1e-9);
        }
    }

    #[test]
    fn opds_round_trip_is_bit_exact() {
        let data = assemble_dataset(Problem::diffusion(), Split::Train, 7, 4).unwrap();
        let text = write_opds(&data).unwrap();
        assert!(text.starts_with("opds v1 m=100 d=1 count=7\n"));
        assert_eq!(read_opds(&text).unwrap(), data);
        assert_eq!(write_opds(&read_opds(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn optraj_round_trip_is_bit_exact() {
        let data = assemble_trajectories(Problem::pendulum(), 3, 10, 4).unwrap();
        let text = write_optraj(&data);
        assert!(text.starts_with("optraj v1 m=100 d=1 n_traj=3 n_eval=10\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 11);
        assert_eq!(read_optraj(&text).unwrap(), data);
        assert_eq!(data.trajectories[0].x, eval_mesh(0.0, 1.0, 10));
    }

    #[test]
    fn malformed_files_report_lines() {
        let err = read_opds("opds v1 m=2 d=1 count=1\n1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(read_opds("opds v1 m=2 d=1 count=2\n1 2 3 4\n").is_err());
        assert!(read_optraj("nope\n").is_err());
    }

    #[test]
    fn solver_failures_name_the_seed() {
        let problem = Problem::Diffusion(DiffusionReactionSpec {
            reaction: 1e4,
            ..DiffusionReactionSpec::default()
        });
        let err = assemble_dataset(problem, Split::Train, 1, 0).unwrap_err();
        let seed = sample_seed(0, Split::Train, 0);
        assert!(matches!(err, Error::Sample { seed: s, .. } if s == seed), "{err}");
    }
}
