//! DeepONet architectures.
//!
//! A model is a branch network on the discretized input function and a trunk
//! network on the evaluation coordinate. Each head `h` produces
//! `sum_k b_k^h(u) * tau_k^h(x) + bias_h`. Point models have one head,
//! probabilistic models a mean head and a log-std head, quantile models a
//! lower and an upper quantile head.
//!
//! Branch and trunk are each split into shared hidden layers (ReLU applied
//! to their output) followed by one independent MLP per head ending in a
//! linear layer of width `k`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::nn::{Mlp, MlpGrad, MlpSpec, MlpTape};
use crate::textio::{join_g17, parse_reals, Lines};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Point,
    Prob,
    Quantile,
}

impl HeadKind {
    pub fn num_heads(self) -> usize {
        match self {
            HeadKind::Point => 1,
            HeadKind::Prob | HeadKind::Quantile => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Point => "point",
            HeadKind::Prob => "prob",
            HeadKind::Quantile => "quantile",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(HeadKind::Point),
            "prob" => Ok(HeadKind::Prob),
            "quantile" => Ok(HeadKind::Quantile),
            other => Err(Error::invalid(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Depth and width of a branch or trunk network in the `shared(independent)`
/// notation, e.g. `3(1)x100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubnetSpec {
    pub shared: usize,
    pub independent: usize,
    pub width: usize,
}

impl SubnetSpec {
    pub const fn new(shared: usize, independent: usize, width: usize) -> Self {
        Self {
            shared,
            independent,
            width,
        }
    }
}

impl fmt::Display for SubnetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})x{}", self.shared, self.independent, self.width)
    }
}

impl FromStr for SubnetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("expected `S(I)xW`, found {s:?}"));
        let (depths, width) = s.split_once('x').ok_or_else(bad)?;
        let (shared, rest) = depths.split_once('(').ok_or_else(bad)?;
        let independent = rest.strip_suffix(')').ok_or_else(bad)?;
        Ok(Self {
            shared: shared.trim().parse().map_err(|_| bad())?,
            independent: independent.trim().parse().map_err(|_| bad())?,
            width: width.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeepONetSpec {
    /// Sensor count of the discretized input function.
    pub m: usize,
    /// Coordinate dimension.
    pub d: usize,
    /// Latent basis size.
    pub k: usize,
    pub branch: SubnetSpec,
    pub trunk: SubnetSpec,
    pub head_kind: HeadKind,
    pub output_bias: bool,
}

impl DeepONetSpec {
    /// Spec with `k` equal to the network width and output biases enabled.
    pub fn new(m: usize, d: usize, branch: SubnetSpec, trunk: SubnetSpec, head_kind: HeadKind) -> Self {
        Self {
            m,
            d,
            k: trunk.width,
            branch,
            trunk,
            head_kind,
            output_bias: true,
        }
    }

    pub fn with_head(mut self, head_kind: HeadKind) -> Self {
        self.head_kind = head_kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::invalid("m, d and k must all be positive"));
        }
        if self.branch.width == 0 || self.trunk.width == 0 {
            return Err(Error::invalid("network widths must be positive"));
        }
        Ok(())
    }

    /// Hidden layers (shared, per-head) actually built; point models fold
    /// every hidden layer into the shared part.
    fn layout(&self, sub: SubnetSpec) -> (usize, usize) {
        match self.head_kind {
            HeadKind::Point => (sub.shared + sub.independent, 0),
            _ => (sub.shared, sub.independent),
        }
    }

    fn subnet_specs(&self, input: usize, sub: SubnetSpec) -> (Option<MlpSpec>, MlpSpec) {
        let (shared, independent) = self.layout(sub);
        let shared_spec = (shared > 0).then(|| {
            let mut sizes = vec![input];
            sizes.extend(std::iter::repeat_n(sub.width, shared));
            MlpSpec::new(sizes).expect("positive sizes")
        });
        let head_in = if shared > 0 { sub.width } else { input };
        let mut sizes = vec![head_in];
        sizes.extend(std::iter::repeat_n(sub.width, independent));
        sizes.push(self.k);
        (shared_spec, MlpSpec::new(sizes).expect("positive sizes"))
    }

    fn header(&self) -> String {
        format!(
            "m={} d={} k={} head={} branch={} trunk={} output_bias={}",
            self.m,
            self.d,
            self.k,
            self.head_kind,
            self.branch,
            self.trunk,
            u8::from(self.output_bias)
        )
    }

    fn parse_header(text: &str, line: usize) -> Result<Self> {
        let field = |key: &str| -> Result<&str> {
            text.split_whitespace()
                .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::parse(line, format!("missing `{key}=`")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::parse(line, format!("bad integer for `{key}`")))
        };
        let wrap = |e: Error| Error::parse(line, e.to_string());
        let spec = Self {
            m: num("m")?,
            d: num("d")?,
            k: num("k")?,
            head_kind: field("head")?.parse().map_err(wrap)?,
            branch: field("branch")?.parse().map_err(wrap)?,
            trunk: field("trunk")?.parse().map_err(wrap)?,
            output_bias: num("output_bias")? != 0,
        };
        spec.validate().map_err(wrap)?;
        Ok(spec)
    }
}

/// Shared trunk of layers plus one MLP per head.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNet {
    pub shared: Option<Mlp>,
    pub heads: Vec<Mlp>,
}

#[derive(Debug, Clone)]
struct SubNetTape {
    shared: Option<(MlpTape, Array2<f64>)>,
    heads: Vec<MlpTape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubNetGrad {
    pub shared: Option<MlpGrad>,
    pub heads: Vec<MlpGrad>,
}

impl SubNet {
    fn init<R: Rng + ?Sized>(shared: Option<MlpSpec>, head: MlpSpec, n_heads: usize, rng: &mut R) -> Self {
        let shared = shared.map(|s| Mlp::init(s, rng));
        // Hidden layers are He-uniform. The linear output layer is rescaled
        // to LeCun variance and by K^(-1/4), so the K-term branch/trunk inner
        // product starts with O(1) variance independent of K.
        let k = head.output_dim() as f64;
        let out_scale = std::f64::consts::FRAC_1_SQRT_2 * k.powf(-0.25);
        let heads = (0..n_heads)
            .map(|_| {
                let mut mlp = Mlp::init(head.clone(), rng);
                let last = mlp.layers_mut().last_mut().expect("at least one layer");
                last.weight.mapv_inplace(|w| w * out_scale);
                mlp
            })
            .collect();
        Self { shared, heads }
    }

    fn features(&self, x: ArrayView2<f64>) -> Option<Array2<f64>> {
        self.shared.as_ref().map(|s| {
            let mut h = s.forward_rows(x);
            h.mapv_inplace(|z| z.max(0.0));
            h
        })
    }

    fn forward_rows(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let feats = self.features(x);
        let input = feats.as_ref().map_or(x, |f| f.view());
        self.heads.iter().map(|h| h.forward_rows(input)).collect()
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, SubNetTape)> {
        let shared = match &self.shared {
            Some(s) => {
                let (z, tape) = s.forward_batch(x)?;
                Some((tape, z))
            }
            None => None,
        };
        let feats = shared.as_ref().map(|(_, z)| z.mapv(|v| v.max(0.0)));
        let input = feats.as_ref().map_or(x, |f| f.view());
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut tapes = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (o, t) = head.forward_batch(input)?;
            outs.push(o);
            tapes.push(t);
        }
        Ok((outs, SubNetTape { shared, heads: tapes }))
    }

    fn backward(&self, tape: &SubNetTape, upstream: &[Array2<f64>]) -> Result<SubNetGrad> {
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut d_feat: Option<Array2<f64>> = None;
        for ((head, t), up) in self.heads.iter().zip(&tape.heads).zip(upstream) {
            let (g, dx) = head.backward_batch(t, up.view())?;
            heads.push(g);
            d_feat = Some(match d_feat {
                Some(acc) => acc + &dx,
                None => dx,
            });
        }
        let shared = match (&self.shared, &tape.shared) {
            (Some(net), Some((t, z))) => {
                let mut d = d_feat.expect("at least one head");
                d.zip_mut_with(z, |g, &zv| {
                    if zv <= 0.0 {
                        *g = 0.0
                    }
                });
                Some(net.backward_batch(t, d.view())?.0)
            }
            _ => None,
        };
        Ok(SubNetGrad { shared, heads })
    }

    fn mlps(&self) -> impl Iterator<Item = &Mlp> {
        self.shared.iter().chain(self.heads.iter())
    }

    fn mlps_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        self.shared.iter_mut().chain(self.heads.iter_mut())
    }
}

impl SubNetGrad {
    fn mlps(&self) -> impl Iterator<Item = &MlpGrad> {
        self.shared.iter().chain(self.heads.iter())
    }
}

/// Affine standardization applied to raw inputs before the sub-networks:
/// every sensor value becomes `(u - shift) / scale` with one shared pair,
/// and trunk coordinate `j` uses its own pair.
///
/// One branch pair keeps the relative shape of the input function intact.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    pub branch: (f64, f64),
    pub trunk: Vec<(f64, f64)>,
}

impl InputScaling {
    pub fn identity(d: usize) -> Self {
        Self {
            branch: (0.0, 1.0),
            trunk: vec![(0.0, 1.0); d],
        }
    }

    /// Mean and population std of the training inputs. A constant input
    /// keeps scale 1 so it maps to zero instead of dividing by zero.
    pub fn fit(u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Self> {
        if u.is_empty() || x.nrows() == 0 {
            return Err(Error::invalid("cannot fit input scaling on an empty batch"));
        }
        let pair = |values: &mut dyn Iterator<Item = f64>| {
            let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
            for v in values {
                n += 1.0;
                sum += v;
                sq += v * v;
            }
            let mean = sum / n;
            let std = (sq / n - mean * mean).max(0.0).sqrt();
            (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
        };
        let branch = pair(&mut u.iter().copied());
        let trunk = x.columns().into_iter().map(|c| pair(&mut c.iter().copied())).collect();
        let scaling = Self { branch, trunk };
        scaling.validate(x.ncols())?;
        Ok(scaling)
    }

    fn validate(&self, d: usize) -> Result<()> {
        check_len("trunk scaling pairs", d, self.trunk.len())?;
        let ok = |&(shift, scale): &(f64, f64)| shift.is_finite() && scale.is_finite() && scale > 0.0;
        if ok(&self.branch) && self.trunk.iter().all(ok) {
            Ok(())
        } else {
            Err(Error::invalid("input scaling needs finite shifts and positive scales"))
        }
    }

    fn apply(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (bs, bk) = self.branch;
        let us = u.mapv(|v| (v - bs) / bk);
        let mut xs = x.to_owned();
        for (mut col, &(ts, tk)) in xs.columns_mut().into_iter().zip(&self.trunk) {
            col.mapv_inplace(|v| (v - ts) / tk);
        }
        (us, xs)
    }

    fn to_line(&self) -> String {
        let mut values = vec![self.branch.0, self.branch.1];
        for &(s, k) in &self.trunk {
            values.extend([s, k]);
        }
        format!("scaling {}", join_g17(&values))
    }

    fn parse_line(text: &str, line: usize, d: usize) -> Result<Self> {
        let rest = text
            .strip_prefix("scaling")
            .ok_or_else(|| Error::parse(line, "expected a `scaling` line"))?;
        let v = parse_reals(rest, line)?;
        if v.len() != 2 + 2 * d {
            return Err(Error::parse(line, format!("scaling needs {} values, found {}", 2 + 2 * d, v.len())));
        }
        let scaling = Self {
            branch: (v[0], v[1]),
            trunk: v[2..].chunks(2).map(|c| (c[0], c[1])).collect(),
        };
        scaling.validate(d).map_err(|e| Error::parse(line, e.to_string()))?;
        Ok(scaling)
    }
}

/// Branch/trunk parameters for one head configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepONetModel {
    spec: DeepONetSpec,
    pub branch: SubNet,
    pub trunk: SubNet,
    /// Scalar output bias per head; stays zero when the spec disables it.
    pub bias: Vec<f64>,
    scaling: InputScaling,
}

/// Everything the reverse pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct DeepONetTape {
    branch: SubNetTape,
    trunk: SubNetTape,
    b: Vec<Array2<f64>>,
    tau: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepONetGrad {
    pub branch: SubNetGrad,
    pub trunk: SubNetGrad,
    pub bias: Vec<f64>,
    output_bias: bool,
}

impl DeepONetGrad {
    /// Gradient blocks in the order of [`DeepONetModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self
            .branch
            .mlps()
            .chain(self.trunk.mlps())
            .flat_map(|g| g.slices())
            .collect();
        if self.output_bias {
            out.push(&self.bias);
        }
        out
    }
}

impl DeepONetModel {
    pub fn init<R: Rng + ?Sized>(spec: DeepONetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let n_heads = spec.head_kind.num_heads();
        let (bs, bh) = spec.subnet_specs(spec.m, spec.branch);
        let (ts, th) = spec.subnet_specs(spec.d, spec.trunk);
        let branch = SubNet::init(bs, bh, n_heads, rng);
        let trunk = SubNet::init(ts, th, n_heads, rng);
        Ok(Self {
            scaling: InputScaling::identity(spec.d),
            spec,
            branch,
            trunk,
            bias: vec![0.0; n_heads],
        })
    }

    /// Assemble from explicit parts, checking every shape against `spec`.
    pub fn from_parts(spec: DeepONetSpec, branch: SubNet, trunk: SubNet, bias: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let n_heads = spec.head_kind.num_heads();
        check_len("output bias count", n_heads, bias.len())?;
        for (sub, input, net) in [(spec.branch, spec.m, &branch), (spec.trunk, spec.d, &trunk)] {
            let (shared, head) = spec.subnet_specs(input, sub);
            check_len("head count", n_heads, net.heads.len())?;
            let shared_ok = match (&shared, &net.shared) {
                (Some(s), Some(n)) => s == n.spec(),
                (None, None) => true,
                _ => false,
            };
            if !shared_ok || net.heads.iter().any(|h| h.spec() != &head) {
                return Err(Error::Incompatible(
                    "sub-network layer sizes disagree with the DeepONet spec".into(),
                ));
            }
        }
        if !spec.output_bias && bias.iter().any(|&b| b != 0.0) {
            return Err(Error::invalid("output bias disabled but non-zero bias given"));
        }
        Ok(Self {
            scaling: InputScaling::identity(spec.d),
            spec,
            branch,
            trunk,
            bias,
        })
    }

    /// Replace the input standardization; parameters are left untouched.
    pub fn with_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        scaling.validate(self.spec.d)?;
        self.scaling = scaling;
        Ok(self)
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn spec(&self) -> &DeepONetSpec {
        &self.spec
    }

    pub fn head_kind(&self) -> HeadKind {
        self.spec.head_kind
    }

    pub fn num_params(&self) -> usize {
        let nets: usize = self
            .branch
            .mlps()
            .chain(self.trunk.mlps())
            .map(|m| m.num_params())
            .sum();
        nets + if self.spec.output_bias { self.bias.len() } else { 0 }
    }

    fn check_batch(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<()> {
        check_len("branch input width", self.spec.m, u.ncols())?;
        check_len("trunk input width", self.spec.d, x.ncols())?;
        check_len("batch rows", u.nrows(), x.nrows())
    }

    /// Raw head outputs for a batch: one row per query, one column per head.
    pub fn predict_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(u, x)?;
        let (u, x) = self.scaling.apply(u, x);
        let b = self.branch.forward_rows(u.view());
        let tau = self.trunk.forward_rows(x.view());
        Ok(self.combine(&b, &tau))
    }

    fn combine(&self, b: &[Array2<f64>], tau: &[Array2<f64>]) -> Array2<f64> {
        let rows = b[0].nrows();
        let mut out = Array2::zeros((rows, b.len()));
        for (h, (bh, th)) in b.iter().zip(tau).enumerate() {
            let bias = self.bias[h];
            Zip::from(out.column_mut(h))
                .and(bh.rows())
                .and(th.rows())
                .for_each(|o, br, tr| *o = br.dot(&tr) + bias);
        }
        out
    }

    pub fn forward_batch(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(Array2<f64>, DeepONetTape)> {
        self.check_batch(u, x)?;
        let (u, x) = self.scaling.apply(u, x);
        let (b, branch) = self.branch.forward_batch(u.view())?;
        let (tau, trunk) = self.trunk.forward_batch(x.view())?;
        let out = self.combine(&b, &tau);
        Ok((
            out,
            DeepONetTape {
                branch,
                trunk,
                b,
                tau,
            },
        ))
    }

    /// Gradients of `sum_{i,h} upstream[i,h] * out[i,h]`.
    pub fn backward(&self, tape: &DeepONetTape, upstream: ArrayView2<f64>) -> Result<DeepONetGrad> {
        check_len("upstream head count", self.bias.len(), upstream.ncols())?;
        let mut d_b = Vec::with_capacity(self.bias.len());
        let mut d_tau = Vec::with_capacity(self.bias.len());
        let mut d_bias = vec![0.0; self.bias.len()];
        for h in 0..self.bias.len() {
            let g = upstream.column(h).insert_axis(Axis(1));
            d_b.push(&tape.tau[h] * &g);
            d_tau.push(&tape.b[h] * &g);
            d_bias[h] = if self.spec.output_bias { g.sum() } else { 0.0 };
        }
        Ok(DeepONetGrad {
            branch: self.branch.backward(&tape.branch, &d_b)?,
            trunk: self.trunk.backward(&tape.trunk, &d_tau)?,
            bias: d_bias,
            output_bias: self.spec.output_bias,
        })
    }

    /// Trainable parameter blocks: branch MLPs, trunk MLPs, then the output
    /// biases when enabled.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let output_bias = self.spec.output_bias;
        let mut out: Vec<&mut [f64]> = self
            .branch
            .mlps_mut()
            .chain(self.trunk.mlps_mut())
            .flat_map(|m| m.param_slices_mut())
            .collect();
        if output_bias {
            out.push(&mut self.bias);
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self
            .branch
            .mlps()
            .chain(self.trunk.mlps())
            .flat_map(|m| m.param_slices())
            .collect();
        if self.spec.output_bias {
            out.push(&self.bias);
        }
        out
    }

    fn single(&self, u: &[f64], x: &[f64], kind: HeadKind) -> Result<Array1<f64>> {
        if self.spec.head_kind != kind {
            return Err(Error::Incompatible(format!(
                "expected a {kind} model, found {}",
                self.spec.head_kind
            )));
        }
        check_len("branch input", self.spec.m, u.len())?;
        check_len("trunk input", self.spec.d, x.len())?;
        let uv = ArrayView2::from_shape((1, u.len()), u).expect("row view");
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.predict_rows(uv, xv)?.row(0).to_owned())
    }

    /// Write the `deeponet v1` container.
    pub fn write_text(&self, out: &mut String) {
        out.push_str("deeponet v1\n");
        out.push_str(&self.spec.header());
        out.push('\n');
        out.push_str("bias ");
        out.push_str(&join_g17(&self.bias));
        out.push('\n');
        out.push_str(&self.scaling.to_line());
        out.push('\n');
        for mlp in self.branch.mlps().chain(self.trunk.mlps()) {
            mlp.write_text(out);
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub fn read_text(lines: &mut Lines<'_>) -> Result<Self> {
        lines.expect_tag("deeponet v1")?;
        let (n, header) = lines.next_line()?;
        let spec = DeepONetSpec::parse_header(header, n)?;
        let (n, bias_line) = lines.next_line()?;
        let bias = bias_line
            .strip_prefix("bias")
            .ok_or_else(|| Error::parse(n, "expected a `bias` line"))
            .and_then(|rest| parse_reals(rest, n))?;
        let (n, scaling_line) = lines.next_line()?;
        let scaling = InputScaling::parse_line(scaling_line, n, spec.d)?;
        let n_heads = spec.head_kind.num_heads();
        let mut read_subnet = |sub: SubnetSpec, input: usize| -> Result<SubNet> {
            let (shared_spec, _) = spec.subnet_specs(input, sub);
            let shared = match shared_spec {
                Some(_) => Some(Mlp::read_text(lines)?),
                None => None,
            };
            let heads = (0..n_heads)
                .map(|_| Mlp::read_text(lines))
                .collect::<Result<Vec<_>>>()?;
            Ok(SubNet { shared, heads })
        };
        let branch = read_subnet(spec.branch, spec.m)?;
        let trunk = read_subnet(spec.trunk, spec.d)?;
        Self::from_parts(spec, branch, trunk, bias)?.with_scaling(scaling)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read_text(&mut Lines::new(text))
    }
}

/// Mean and standard deviation of a Gaussian prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Lower and upper quantile-head outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantilePair {
    pub lo: f64,
    pub hi: f64,
}

/// `G(u)(x)` for a point model.
pub fn deeponet_eval(model: &DeepONetModel, u: &[f64], x: &[f64]) -> Result<f64> {
    Ok(model.single(u, x, HeadKind::Point)?[0])
}

/// `(mu, sigma)` for a probabilistic model, `sigma = exp(log-sigma head)`.
pub fn prob_eval(model: &DeepONetModel, u: &[f64], x: &[f64]) -> Result<MeanStd> {
    let out = model.single(u, x, HeadKind::Prob)?;
    mean_std_from_heads(out[0], out[1])
}

/// Raw `(t_lo, t_hi)` for a quantile model; crossing is not corrected.
pub fn quantile_eval(model: &DeepONetModel, u: &[f64], x: &[f64]) -> Result<QuantilePair> {
    let out = model.single(u, x, HeadKind::Quantile)?;
    Ok(QuantilePair {
        lo: out[0],
        hi: out[1],
    })
}

pub(crate) fn mean_std_from_heads(mean: f64, log_std: f64) -> Result<MeanStd> {
    let std = log_std.exp();
    if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
        return Err(Error::NonFinite(format!(
            "probabilistic head output (mu={mean}, log sigma={log_std})"
        )));
    }
    Ok(MeanStd { mean, std })
}

/// Independently trained point models whose spread stands in for a
/// posterior ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<DeepONetModel>,
}

impl EnsembleModel {
    pub fn new(members: Vec<DeepONetModel>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid("an ensemble needs at least two members"));
        }
        let spec = members[0].spec();
        if spec.head_kind != HeadKind::Point || members.iter().any(|m| m.spec() != spec) {
            return Err(Error::Incompatible(
                "ensemble members must be point models sharing one spec".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[DeepONetModel] {
        &self.members
    }

    pub fn spec(&self) -> &DeepONetSpec {
        self.members[0].spec()
    }

    pub fn write_text(&self, out: &mut String) {
        out.push_str(&format!("ensemble v1 members={}\n", self.members.len()));
        for m in &self.members {
            m.write_text(out);
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let (n, header) = lines.next_line()?;
        if !header.starts_with("ensemble v1") {
            return Err(Error::parse(n, "expected `ensemble v1`"));
        }
        let count = crate::textio::header_field(header, "members", n)?;
        let members = (0..count)
            .map(|_| DeepONetModel::read_text(&mut lines))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    /// Population mean and std of member predictions for a batch.
    pub fn stats_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<MeanStd>> {
        let preds = self
            .members
            .par_iter()
            .map(|m| m.predict_rows(u, x).map(|p| p.column(0).to_owned()))
            .collect::<Result<Vec<_>>>()?;
        let m = preds.len() as f64;
        Ok((0..u.nrows())
            .map(|i| {
                let mean = preds.iter().map(|p| p[i]).sum::<f64>() / m;
                let var = preds.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / m;
                MeanStd {
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect())
    }
}

/// Population mean and standard deviation of the member predictions.
pub fn ensemble_stats(ens: &EnsembleModel, u: &[f64], x: &[f64]) -> Result<MeanStd> {
    let preds = ens
        .members
        .iter()
        .map(|m| deeponet_eval(m, u, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(population_mean_std(&preds))
}

pub(crate) fn population_mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(kind: HeadKind) -> DeepONetSpec {
        DeepONetSpec::new(5, 2, SubnetSpec::new(2, 1, 8), SubnetSpec::new(1, 1, 8), kind)
    }

    fn random_model(kind: HeadKind, seed: u64) -> DeepONetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = DeepONetModel::init(small_spec(kind), &mut rng).unwrap();
        for b in &mut model.bias {
            *b = rng.random_range(-1.0..1.0);
        }
        model
    }

    fn relu_vec(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|z| z.max(0.0)).collect()
    }

    /// Recompute every head from individual `Mlp::forward` calls.
    fn manual_heads(model: &DeepONetModel, u: &[f64], x: &[f64]) -> Vec<f64> {
        let feats = |net: &SubNet, input: &[f64]| match &net.shared {
            Some(s) => relu_vec(s.forward(input).unwrap()),
            None => input.to_vec(),
        };
        let bf = feats(&model.branch, u);
        let tf = feats(&model.trunk, x);
        (0..model.bias.len())
            .map(|h| {
                let b = model.branch.heads[h].forward(&bf).unwrap();
                let t = model.trunk.heads[h].forward(&tf).unwrap();
                b.iter().zip(&t).map(|(p, q)| p * q).sum::<f64>() + model.bias[h]
            })
            .collect()
    }

    fn const_mlp(spec: &MlpSpec, out: &[f64]) -> Mlp {
        // Zero weights everywhere; the final bias sets a constant output.
        let mut m = Mlp::zeros(spec.clone());
        let last = m.layers_mut().last_mut().unwrap();
        last.bias = Array1::from(out.to_vec());
        m
    }

    #[test]
    fn inner_product_of_constant_subnets() {
        let spec = DeepONetSpec {
            k: 1,
            ..small_spec(HeadKind::Point)
        };
        let (bs, bh) = spec.subnet_specs(spec.m, spec.branch);
        let (ts, th) = spec.subnet_specs(spec.d, spec.trunk);
        let branch = SubNet {
            shared: bs.map(Mlp::zeros),
            heads: vec![const_mlp(&bh, &[2.0])],
        };
        let trunk = SubNet {
            shared: ts.map(Mlp::zeros),
            heads: vec![const_mlp(&th, &[3.0])],
        };
        let model = DeepONetModel::from_parts(spec, branch, trunk, vec![0.0]).unwrap();
        let g = deeponet_eval(&model, &[0.1; 5], &[0.3, 0.4]).unwrap();
        assert_eq!(g, 6.0);
    }

    #[test]
    fn zero_branch_gives_bias() {
        let mut model = random_model(HeadKind::Point, 1);
        for l in model.branch.heads[0].layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        model.bias[0] = 0.75;
        let g = deeponet_eval(&model, &[1.0, -1.0, 0.5, 2.0, 0.0], &[0.2, 0.9]).unwrap();
        assert_eq!(g, 0.75);
    }

    #[test]
    fn point_eval_matches_compositional_oracle() {
        let model = random_model(HeadKind::Point, 2);
        assert!(model.branch.heads[0].spec().layer_sizes == vec![8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
            let got = deeponet_eval(&model, &u, &x).unwrap();
            assert_abs_diff_eq!(got, manual_heads(&model, &u, &x)[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn prob_sigma_is_exp_of_head() {
        let mut model = random_model(HeadKind::Prob, 3);
        for l in model.branch.heads[1].layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let u = [0.3, 0.1, -0.2, 0.5, 0.9];
        let x = [0.5, 0.5];
        model.bias[1] = 0.0;
        assert_eq!(prob_eval(&model, &u, &x).unwrap().std, 1.0);
        model.bias[1] = 2f64.ln();
        assert_abs_diff_eq!(prob_eval(&model, &u, &x).unwrap().std, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn prob_and_quantile_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [HeadKind::Prob, HeadKind::Quantile] {
            let model = random_model(kind, 4);
            for _ in 0..10 {
                let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
                let want = manual_heads(&model, &u, &x);
                if kind == HeadKind::Prob {
                    let p = prob_eval(&model, &u, &x).unwrap();
                    assert_abs_diff_eq!(p.mean, want[0], epsilon = 1e-12);
                    assert_abs_diff_eq!(p.std, want[1].exp(), epsilon = 1e-12 * want[1].exp().max(1.0));
                } else {
                    let q = quantile_eval(&model, &u, &x).unwrap();
                    assert_abs_diff_eq!(q.lo, want[0], epsilon = 1e-12);
                    assert_abs_diff_eq!(q.hi, want[1], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn quantile_zero_heads_return_biases_and_identical_heads_agree() {
        let mut model = random_model(HeadKind::Quantile, 5);
        for h in 0..2 {
            for l in model.branch.heads[h].layers_mut() {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        model.bias = vec![-0.4, 0.6];
        let u = [0.1; 5];
        let x = [0.2, 0.3];
        let q = quantile_eval(&model, &u, &x).unwrap();
        assert_eq!((q.lo, q.hi), (-0.4, 0.6));

        let mut twin = random_model(HeadKind::Quantile, 6);
        twin.branch.heads[1] = twin.branch.heads[0].clone();
        twin.trunk.heads[1] = twin.trunk.heads[0].clone();
        twin.bias[1] = twin.bias[0];
        let q = quantile_eval(&twin, &u, &x).unwrap();
        assert_eq!(q.lo, q.hi);
    }

    #[test]
    fn wrong_kind_and_shape_are_rejected() {
        let model = random_model(HeadKind::Prob, 7);
        assert!(matches!(
            deeponet_eval(&model, &[0.0; 5], &[0.0; 2]),
            Err(Error::Incompatible(_))
        ));
        assert!(matches!(
            prob_eval(&model, &[0.0; 4], &[0.0; 2]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn prob_overflow_is_reported() {
        let mut model = random_model(HeadKind::Prob, 8);
        model.bias[1] = 1e6;
        assert!(matches!(
            prob_eval(&model, &[0.0; 5], &[0.0; 2]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn output_is_linear_in_trunk_scale() {
        let model = random_model(HeadKind::Point, 9);
        let u = [0.3, -0.7, 0.2, 0.9, -0.1];
        let x = [0.4, 0.6];
        let base = deeponet_eval(&model, &u, &x).unwrap() - model.bias[0];
        let mut scaled = model.clone();
        let c = 2.5;
        let last = scaled.trunk.heads[0].layers_mut().last_mut().unwrap();
        last.weight *= c;
        last.bias *= c;
        let got = deeponet_eval(&scaled, &u, &x).unwrap() - model.bias[0];
        assert_abs_diff_eq!(got, c * base, epsilon = 1e-12);
    }

    #[test]
    fn independent_head_perturbation_leaves_other_head() {
        let model = random_model(HeadKind::Prob, 10);
        let u = [0.3, -0.7, 0.2, 0.9, -0.1];
        let x = [0.4, 0.6];
        let before = prob_eval(&model, &u, &x).unwrap();

        let mut p = model.clone();
        p.branch.heads[1].layers_mut()[0].weight[[0, 0]] += 0.5;
        p.trunk.heads[1].layers_mut()[0].bias[0] += 0.5;
        let after = prob_eval(&p, &u, &x).unwrap();
        assert_eq!(after.mean, before.mean);

        let mut s = model.clone();
        for l in s.branch.shared.as_mut().unwrap().layers_mut() {
            l.weight *= 1.3;
        }
        let shared = prob_eval(&s, &u, &x).unwrap();
        assert_ne!(shared.mean, before.mean);
        assert_ne!(shared.std, before.std);
    }

    #[test]
    fn batched_backward_matches_finite_differences() {
        let model = random_model(HeadKind::Quantile, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(0.0..1.0));
        let up = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let (_, tape) = model.forward_batch(u.view(), x.view()).unwrap();
        let grad = model.backward(&tape, up.view()).unwrap();
        let objective = |m: &DeepONetModel| (m.predict_rows(u.view(), x.view()).unwrap() * &up).sum();
        let analytic: Vec<f64> = grad.slices().concat();
        let mut idx = 0;
        let h = 1e-6;
        let n_blocks = model.param_slices().len();
        for block in 0..n_blocks {
            let len = model.param_slices()[block].len();
            for j in 0..len {
                let mut p = model.clone();
                let mut q = model.clone();
                p.param_slices_mut()[block][j] += h;
                q.param_slices_mut()[block][j] -= h;
                let fd = (objective(&p) - objective(&q)) / (2.0 * h);
                let an = analytic[idx];
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / scale < 1e-5, "block {block}[{j}]: {fd} vs {an}");
                idx += 1;
            }
        }
        assert_eq!(idx, model.num_params());
    }

    #[test]
    fn text_round_trip() {
        for kind in [HeadKind::Point, HeadKind::Prob, HeadKind::Quantile] {
            let model = random_model(kind, 13);
            let back = DeepONetModel::from_text(&model.to_text()).unwrap();
            assert_eq!(back, model);
        }
        let text = random_model(HeadKind::Prob, 1).to_text();
        assert!(text.starts_with("deeponet v1\nm=5 d=2 k=8 head=prob branch=2(1)x8 trunk=1(1)x8 output_bias=1\n"));
    }

    #[test]
    fn scaling_equals_prescaled_inputs() {
        let raw = random_model(HeadKind::Prob, 5);
        let scaling = InputScaling {
            branch: (2.0, 4.0),
            trunk: vec![(1.0, 0.5), (-3.0, 2.0)],
        };
        let scaled = raw.clone().with_scaling(scaling).unwrap();
        let u = [6.0, 2.0, -2.0, 10.0, 4.0];
        let x = [1.25, 1.0];
        let u_std: Vec<f64> = u.iter().map(|v| (v - 2.0) / 4.0).collect();
        let x_std = [0.5, 2.0];
        let a = prob_eval(&scaled, &u, &x).unwrap();
        let b = prob_eval(&raw, &u_std, &x_std).unwrap();
        assert_eq!(a, b);

        let back = DeepONetModel::from_text(&scaled.to_text()).unwrap();
        assert_eq!(back, scaled);
        assert!(scaled.to_text().contains("\nscaling 2 4 1 0.5 -3 2\n"));
        let bad = InputScaling {
            branch: (0.0, 0.0),
            trunk: vec![(0.0, 1.0); 2],
        };
        assert!(raw.clone().with_scaling(bad).is_err());
        assert!(raw.with_scaling(InputScaling::identity(1)).is_err());
    }

    #[test]
    fn scaling_fit_uses_population_moments() {
        let u = Array2::from_shape_vec((2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let x = Array2::from_shape_vec((2, 2), vec![0.0, 2.0, 2.0, 2.0]).unwrap();
        let s = InputScaling::fit(u.view(), x.view()).unwrap();
        assert_eq!(s.branch, (4.0, 5.0f64.sqrt()));
        // A constant coordinate keeps scale 1.
        assert_eq!(s.trunk, vec![(1.0, 1.0), (2.0, 1.0)]);
    }

    #[test]
    fn subnet_notation_parses() {
        let s: SubnetSpec = "3(1)x100".parse().unwrap();
        assert_eq!(s, SubnetSpec::new(3, 1, 100));
        assert_eq!(s.to_string(), "3(1)x100");
        assert!("3x100".parse::<SubnetSpec>().is_err());
    }

    #[test]
    fn ensemble_stats_population_formulas() {
        let members: Vec<_> = (0..5).map(|s| random_model(HeadKind::Point, 20 + s)).collect();
        let ens = EnsembleModel::new(members.clone()).unwrap();
        let u = [0.2, 0.4, -0.3, 0.1, 0.0];
        let x = [0.5, 0.1];
        let preds: Vec<f64> = members.iter().map(|m| deeponet_eval(m, &u, &x).unwrap()).collect();
        let mean = preds.iter().sum::<f64>() / 5.0;
        let var = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / 5.0;
        let st = ensemble_stats(&ens, &u, &x).unwrap();
        assert_abs_diff_eq!(st.mean, mean, epsilon = 1e-12);
        assert_abs_diff_eq!(st.std, var.sqrt(), epsilon = 1e-12);

        let uv = ArrayView2::from_shape((1, 5), &u[..]).unwrap();
        let xv = ArrayView2::from_shape((1, 2), &x[..]).unwrap();
        let rows = ens.stats_rows(uv, xv).unwrap();
        assert_abs_diff_eq!(rows[0].mean, mean, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].std, var.sqrt(), epsilon = 1e-12);

        let s = population_mean_std(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(population_mean_std(&[4.0, 4.0, 4.0]).std, 0.0);

        let same = EnsembleModel::new(vec![members[0].clone(), members[0].clone()]).unwrap();
        assert_eq!(ensemble_stats(&same, &u, &x).unwrap().std, 0.0);
        assert!(EnsembleModel::new(vec![members[0].clone()]).is_err());
        let text = {
            let mut s = String::new();
            ens.write_text(&mut s);
            s
        };
        assert_eq!(EnsembleModel::from_text(&text).unwrap(), ens);
    }
}
