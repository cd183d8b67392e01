//! Dense ReLU networks with batched forward and reverse-mode passes.
//!
//! Every layer is affine, `z = W a + b`, with `W` stored row-major as
//! `(out_dim, in_dim)`. ReLU follows every layer except the last.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::textio::{join_g17, parse_reals, parse_usize, Lines};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative at the pre-activation `z`; the ReLU subgradient at 0 is 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least an input and an output size"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("MLP layer sizes must be positive"));
        }
        Ok(Self {
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// One affine layer. Also used as the gradient container for a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Parameters of a dense network together with the spec they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

/// Per-layer gradients, shaped like the owning [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_batch`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// He/Kaiming-uniform weights scaled by fan-in, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut layer = Dense::zeros(fan_in, fan_out);
                layer
                    .weight
                    .mapv_inplace(|_| rng.random_range(-limit..limit));
                layer
            })
            .collect();
        Self { spec, layers }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Self { spec, layers }
    }

    /// Build from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("an MLP needs at least one layer"))?;
        let mut sizes = vec![first.in_dim()];
        for layer in &layers {
            check_len("chained layer input", *sizes.last().unwrap(), layer.in_dim())?;
            check_len("layer bias", layer.out_dim(), layer.bias.len())?;
            sizes.push(layer.out_dim());
        }
        let spec = MlpSpec::new(sizes)?;
        let mlp = Self { spec, layers };
        mlp.check_finite()?;
        Ok(mlp)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self
            .layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("MLP parameter".into()))
        }
    }

    /// Evaluate a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.input_dim(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_rows(x).into_raw_vec_and_offset().0)
    }

    /// Evaluate a batch, one sample per row, without recording a tape.
    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "mlp batch input width");
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut a = affine(x, &self.layers[0]);
        if last > 0 {
            a.mapv_inplace(|z| act.apply(z));
        }
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            a = affine(a.view(), layer);
            if l < last {
                a.mapv_inplace(|z| act.apply(z));
            }
        }
        a
    }

    /// Batched forward pass that keeps what the reverse pass needs.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpTape)> {
        check_len("mlp batch input width", self.input_dim(), x.ncols())?;
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(a.view(), layer);
            inputs.push(a);
            if l < last {
                a = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                a = z;
            }
        }
        Ok((a, MlpTape { inputs, pre }))
    }

    /// Reverse pass for the batch recorded in `tape`.
    ///
    /// `upstream` holds d(objective)/d(output) per row; gradients are summed
    /// over rows. Returns parameter gradients and the per-row input gradient.
    pub fn backward_batch(
        &self,
        tape: &MlpTape,
        upstream: ArrayView2<f64>,
    ) -> Result<(MlpGrad, Array2<f64>)> {
        check_len("mlp upstream width", self.output_dim(), upstream.ncols())?;
        check_len("mlp upstream rows", tape.inputs[0].nrows(), upstream.nrows())?;
        let act = self.spec.activation;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            // Column-vector operands can make `dot` return Fortran order.
            let weight = delta
                .t()
                .dot(&tape.inputs[l])
                .as_standard_layout()
                .into_owned();
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            let mut prev = delta.dot(&layer.weight);
            if l > 0 {
                prev.zip_mut_with(&tape.pre[l - 1], |d, &z| *d *= act.derivative(z));
            }
            delta = prev;
        }
        grads.reverse();
        Ok((MlpGrad { layers: grads }, delta))
    }

    /// Gradients of `<upstream, f(input)>` with respect to every parameter
    /// and the input.
    pub fn gradient(&self, input: &[f64], upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
        check_len("mlp input", self.input_dim(), input.len())?;
        check_len("mlp upstream", self.output_dim(), upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let g = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row view");
        let (_, tape) = self.forward_batch(x)?;
        let (grad, dx) = self.backward_batch(&tape, g)?;
        Ok((grad, dx.into_raw_vec_and_offset().0))
    }

    /// Mutable views of every parameter block, weights then bias per layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Write in the `mlp v1` text format.
    pub fn write_text(&self, out: &mut String) {
        out.push_str("mlp v1\n");
        let sizes: Vec<String> = self.spec.layer_sizes.iter().map(|s| s.to_string()).collect();
        out.push_str(&sizes.join(" "));
        out.push('\n');
        for layer in &self.layers {
            out.push_str(&join_g17(layer.weight.iter().chain(layer.bias.iter())));
            out.push('\n');
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s);
        s
    }

    pub fn read_text(lines: &mut Lines<'_>) -> Result<Self> {
        lines.expect_tag("mlp v1")?;
        let (n, sizes_line) = lines.next_line()?;
        let sizes = sizes_line
            .split_whitespace()
            .map(|t| parse_usize(t, n))
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(sizes).map_err(|e| crate::Error::parse(n, e.to_string()))?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for w in spec.layer_sizes.windows(2) {
            let (n, text) = lines.next_line()?;
            let values = parse_reals(text, n)?;
            let (fan_in, fan_out) = (w[0], w[1]);
            if values.len() != fan_in * fan_out + fan_out {
                return Err(crate::Error::parse(
                    n,
                    format!(
                        "layer {fan_in}->{fan_out} needs {} values, found {}",
                        fan_in * fan_out + fan_out,
                        values.len()
                    ),
                ));
            }
            let weight = Array2::from_shape_vec((fan_out, fan_in), values[..fan_in * fan_out].to_vec())
                .expect("checked length");
            let bias = Array1::from(values[fan_in * fan_out..].to_vec());
            layers.push(Dense { weight, bias });
        }
        let mlp = Self { spec, layers };
        mlp.check_finite()?;
        Ok(mlp)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read_text(&mut Lines::new(text))
    }
}

fn affine(a: ArrayView2<f64>, layer: &Dense) -> Array2<f64> {
    let mut z = a.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: Vec<Vec<f64>>, b: Vec<f64>) -> Dense {
        let rows = w.len();
        let cols = w[0].len();
        Dense {
            weight: Array2::from_shape_vec((rows, cols), w.concat()).unwrap(),
            bias: Array1::from(b),
        }
    }

    /// Naive nested-loop forward pass, independent of ndarray's matmul.
    fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = mlp.layers().len();
        for (l, layer) in mlp.layers().iter().enumerate() {
            let mut z = vec![0.0; layer.out_dim()];
            for (i, zi) in z.iter_mut().enumerate() {
                let mut acc = layer.bias[i];
                for (j, aj) in a.iter().enumerate() {
                    acc += layer.weight[[i, j]] * aj;
                }
                *zi = if l + 1 < n { acc.max(0.0) } else { acc };
            }
            a = z;
        }
        a
    }

    fn random_mlp(sizes: Vec<usize>, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Mlp::init(MlpSpec::new(sizes).unwrap(), &mut rng);
        // Non-zero biases so the bias path is exercised.
        for l in mlp.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        mlp
    }

    #[test]
    fn single_affine_layer() {
        let mlp = Mlp::from_layers(vec![layer(vec![vec![2.0]], vec![1.0])]).unwrap();
        assert_eq!(mlp.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(MlpSpec::new(vec![3, 4, 2]).unwrap());
        assert_eq!(mlp.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mlp = random_mlp(vec![5, 7, 6, 3], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = mlp.forward(&x).unwrap();
            let want = naive_forward(&mlp, &x);
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let mlp = random_mlp(vec![3, 2], 0);
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            mlp.gradient(&[1.0, 2.0, 3.0], &[1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn linear_layer_gradient() {
        let mlp = Mlp::from_layers(vec![layer(vec![vec![0.5, -1.0, 2.0]], vec![0.3])]).unwrap();
        let x = [1.5, -2.0, 4.0];
        let (g, dx) = mlp.gradient(&x, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weight.as_slice().unwrap(), &x);
        assert_eq!(g.layers[0].bias[0], 1.0);
        assert_eq!(dx, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        // Hidden pre-activations are all negative, so nothing flows back.
        let hidden = layer(vec![vec![1.0, 1.0], vec![2.0, 0.5]], vec![-100.0, -100.0]);
        let out = layer(vec![vec![3.0, -1.0]], vec![0.0]);
        let mlp = Mlp::from_layers(vec![hidden, out]).unwrap();
        let (g, dx) = mlp.gradient(&[1.0, 2.0], &[1.0]).unwrap();
        assert!(g.layers[0].weight.iter().all(|&v| v == 0.0));
        assert!(g.layers[0].bias.iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..10u64 {
            let depth = rng.random_range(1..=5);
            let mut sizes = vec![rng.random_range(1..=6)];
            for _ in 0..depth {
                sizes.push(rng.random_range(1..=16));
            }
            let mlp = random_mlp(sizes.clone(), 1000 + trial);
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..*sizes.last().unwrap())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let (g, _) = mlp.gradient(&x, &up).unwrap();
            let objective = |m: &Mlp| -> f64 {
                m.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for l in 0..mlp.layers().len() {
                for idx in 0..mlp.layers()[l].weight.len() {
                    let mut p = mlp.clone();
                    let mut q = mlp.clone();
                    p.layers_mut()[l].weight.as_slice_mut().unwrap()[idx] += h;
                    q.layers_mut()[l].weight.as_slice_mut().unwrap()[idx] -= h;
                    let fd = (objective(&p) - objective(&q)) / (2.0 * h);
                    let an = g.layers[l].weight.as_slice().unwrap()[idx];
                    let scale = fd.abs().max(an.abs()).max(1e-3);
                    assert!(
                        (fd - an).abs() / scale < 1e-5,
                        "layer {l} weight {idx}: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mlp = random_mlp(vec![4, 8, 3], 5);
        let text = mlp.to_text();
        assert!(text.starts_with("mlp v1\n4 8 3\n"));
        let back = Mlp::from_text(&text).unwrap();
        assert_eq!(back, mlp);
    }

    #[test]
    fn identical_seed_identical_init() {
        let a = random_mlp(vec![3, 10, 2], 42);
        let b = random_mlp(vec![3, 10, 2], 42);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1]).is_err());
    }
}
