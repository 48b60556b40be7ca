//! Minimal dense-network engine: fully-connected layers with ReLU or linear
//! activations, reverse-mode gradients, plain SGD and weight clipping.
//!
//! Weights are stored `in x out` so a batch forward is `X * W + b`.
//! Every network carries an identity and a generation counter; a [`Tape`]
//! produced by [`DenseNet::forward`] is rejected by [`DenseNet::backward`]
//! once the network it came from has been mutated.

mod checkpoint;
pub mod loss;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tape was recorded on a different network or before the last parameter update")]
    StaleTape,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("network has no layers")]
    Empty,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl NnError {
    fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        NnError::ShapeMismatch {
            context,
            expected,
            got,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in_dim x out_dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Matrix::zeros(in_dim, out_dim);
        for w in weight.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight,
            bias,
            activation,
        }
    }
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// A feed-forward stack of dense layers.
#[derive(Debug)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    id: u64,
    generation: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

/// Parameter equality; identity and generation are ignored.
impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    net_id: u64,
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    acts: Vec<Activation>,
}

impl Tape {
    /// ReLU on/off pattern of every ReLU unit in the traced batch. Two traces
    /// with equal patterns lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre
            .iter()
            .zip(&self.acts)
            .filter(|(_, &a)| a == Activation::Relu)
            .flat_map(|(z, _)| z.as_slice().iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Gradient of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Per-parameter gradients, shape-congruent with a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// Flattened view in the same order as [`DenseNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

impl DenseNet {
    /// Builds a network from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Empty);
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::shape("bias", l.out_dim(), l.bias.len()));
            }
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(NnError::shape("layer chain", w[0].out_dim(), w[1].in_dim()));
            }
        }
        Ok(Self {
            layers,
            id: fresh_id(),
            generation: 0,
        })
    }

    /// Multi-layer perceptron over `dims` (`dims.len() - 1` layers): ReLU on
    /// every hidden layer, linear output.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::Empty);
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                DenseLayer::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    /// The three-fully-connected-layer perceptron used for every network here.
    pub fn three_layer<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Self::mlp(&[input, hidden, hidden, output], rng)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    /// All parameters flattened: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable reference to the `i`-th flattened parameter.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        self.generation += 1;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            if i < nw {
                return &mut l.weight.as_mut_slice()[i];
            }
            i -= nw;
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn max_abs_param(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, l| {
            let b = l.bias.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            m.max(l.weight.max_abs()).max(b)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    fn affine(layer: &DenseLayer, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&layer.weight).expect("checked dims");
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        z
    }

    fn activate(act: Activation, z: &Matrix) -> Matrix {
        let mut a = z.clone();
        if act == Activation::Relu {
            a.map_inplace(|v| if v > 0.0 { v } else { 0.0 });
        }
        a
    }

    fn check_input(&self, batch: &Matrix) -> Result<(), NnError> {
        if batch.cols() != self.input_dim() {
            return Err(NnError::shape(
                "forward input",
                self.input_dim(),
                batch.cols(),
            ));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for l in &self.layers {
            let z = Self::affine(l, &x);
            x = Self::activate(l.activation, &z);
        }
        Ok(x)
    }

    /// Forward pass recording the activations needed by [`DenseNet::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, Tape), NnError> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for l in &self.layers {
            let z = Self::affine(l, &x);
            let a = Self::activate(l.activation, &z);
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        let tape = Tape {
            net_id: self.id,
            generation: self.generation,
            inputs,
            pre,
            acts: self.layers.iter().map(|l| l.activation).collect(),
        };
        Ok((x, tape))
    }

    /// Reverse-mode gradients of the traced computation given `dL/d(output)`.
    pub fn backward(&self, tape: &Tape, output_grad: &Matrix) -> Result<GradientSet, NnError> {
        self.backward_impl(tape, output_grad, false).map(|(g, _)| g)
    }

    /// Like [`DenseNet::backward`], also returning `dL/d(input)`.
    pub fn backward_with_input(
        &self,
        tape: &Tape,
        output_grad: &Matrix,
    ) -> Result<(GradientSet, Matrix), NnError> {
        self.backward_impl(tape, output_grad, true)
            .map(|(g, d)| (g, d.expect("input gradient requested")))
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        output_grad: &Matrix,
        want_input: bool,
    ) -> Result<(GradientSet, Option<Matrix>), NnError> {
        if tape.net_id != self.id || tape.generation != self.generation {
            return Err(NnError::StaleTape);
        }
        let batch = tape.inputs[0].rows();
        if output_grad.rows() != batch {
            return Err(NnError::shape(
                "output grad rows",
                batch,
                output_grad.rows(),
            ));
        }
        if output_grad.cols() != self.output_dim() {
            return Err(NnError::shape(
                "output grad cols",
                self.output_dim(),
                output_grad.cols(),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                let z = &tape.pre[i];
                for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let gw = tape.inputs[i].t_matmul(&delta).expect("checked dims");
            let mut gb = vec![0.0; l.out_dim()];
            for r in delta.iter_rows() {
                for (b, v) in gb.iter_mut().zip(r) {
                    *b += v;
                }
            }
            grads.push(LayerGrad {
                weight: gw,
                bias: gb,
            });
            if i > 0 || want_input {
                delta = delta.matmul_t(&l.weight).expect("checked dims");
            }
        }
        grads.reverse();
        Ok((GradientSet { layers: grads }, want_input.then_some(delta)))
    }

    fn check_grads(&self, grads: &GradientSet) -> Result<(), NnError> {
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::shape(
                "gradient layers",
                self.layers.len(),
                grads.layers.len(),
            ));
        }
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            if g.weight.shape() != l.weight.shape() {
                return Err(NnError::shape(
                    "gradient weight",
                    l.weight.as_slice().len(),
                    g.weight.as_slice().len(),
                ));
            }
            if g.bias.len() != l.bias.len() {
                return Err(NnError::shape("gradient bias", l.bias.len(), g.bias.len()));
            }
        }
        Ok(())
    }

    /// In-place `theta <- theta - lr * grad`.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<(), NnError> {
        self.check_grads(grads)?;
        self.generation += 1;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    /// Clamps every weight and bias into `[-bound, bound]`.
    pub fn clip_weights(&mut self, bound: f64) {
        assert!(bound > 0.0, "clip bound must be positive");
        self.generation += 1;
        for l in &mut self.layers {
            for w in l.weight.as_mut_slice() {
                *w = w.clamp(-bound, bound);
            }
            for b in &mut l.bias {
                *b = b.clamp(-bound, bound);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let mut net = DenseNet::three_layer(4, 6, 3, &mut rng(1)).unwrap();
        for l in net.layers_mut() {
            l.weight.map_inplace(|_| 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = random_batch(5, 4, &mut rng(2));
        let y = net.infer(&x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Linear,
        };
        let net = DenseNet::from_layers(vec![layer]).unwrap();
        let x = random_batch(4, 3, &mut rng(3));
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let net = DenseNet::mlp(&[3, 5, 2], &mut rng(4)).unwrap();
        let x = random_batch(6, 3, &mut rng(5));
        let (y, _) = net.forward(&x).unwrap();
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        for r in 0..6 {
            let mut hidden = [0.0; 5];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = l0.bias[j];
                for i in 0..3 {
                    s += x.get(r, i) * l0.weight.get(i, j);
                }
                *h = s.max(0.0);
            }
            for k in 0..2 {
                let mut s = l1.bias[k];
                for (j, h) in hidden.iter().enumerate() {
                    s += h * l1.weight.get(j, k);
                }
                assert!((s - y.get(r, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = DenseNet::mlp(&[3, 2], &mut rng(1)).unwrap();
        let x = Matrix::zeros(2, 4);
        assert!(matches!(
            net.forward(&x),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let net = DenseNet::three_layer(3, 4, 2, &mut rng(6)).unwrap();
        let x = random_batch(3, 3, &mut rng(7));
        let (_, tape) = net.forward(&x).unwrap();
        let g = net.backward(&tape, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn scalar_linear_weight_grad_is_input() {
        let layer = DenseLayer {
            weight: Matrix::from_vec(1, 1, vec![0.7]).unwrap(),
            bias: vec![0.2],
            activation: Activation::Linear,
        };
        let net = DenseNet::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let g = net
            .backward(&tape, &Matrix::from_vec(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(g.layers[0].weight.get(0, 0), 1.5);
        assert_eq!(g.layers[0].bias[0], 1.0);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = DenseNet::mlp(&[2, 3, 1], &mut rng(8)).unwrap();
        let x = random_batch(2, 2, &mut rng(9));
        let (_, tape) = net.forward(&x).unwrap();
        let g = GradientSet::zeros_like(&net);
        net.sgd_step(&g, 0.1).unwrap();
        assert_eq!(
            net.backward(&tape, &Matrix::zeros(2, 1)),
            Err(NnError::StaleTape)
        );
        let other = net.clone();
        let (_, tape) = net.forward(&x).unwrap();
        assert_eq!(
            other.backward(&tape, &Matrix::zeros(2, 1)),
            Err(NnError::StaleTape)
        );
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let mut net = DenseNet::three_layer(3, 4, 2, &mut rng(10)).unwrap();
        let before = net.clone();
        let x = random_batch(3, 3, &mut rng(11));
        let (_, tape) = net.forward(&x).unwrap();
        let g = net
            .backward(&tape, &random_batch(3, 2, &mut rng(12)))
            .unwrap();
        net.sgd_step(&g, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_on_square_from_one() {
        // f(w) = w^2 realised as (w*x)^2 with x = 1: df/dw = 2w.
        let layer = DenseLayer {
            weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Linear,
        };
        let mut net = DenseNet::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let (y, tape) = net.forward(&x).unwrap();
        let dy = Matrix::from_vec(1, 1, vec![2.0 * y.get(0, 0)]).unwrap();
        let mut g = net.backward(&tape, &dy).unwrap();
        g.layers[0].bias[0] = 0.0;
        net.sgd_step(&g, 0.1).unwrap();
        assert!((net.layers()[0].weight.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // L = 0.5 * ||W x + b - t||^2 averaged over a batch: convex in (W, b).
        let mut r = rng(13);
        let mut net = DenseNet::mlp(&[4, 2], &mut r).unwrap();
        let x = random_batch(8, 4, &mut r);
        let t = random_batch(8, 2, &mut r);
        let loss = |net: &DenseNet| {
            let y = net.infer(&x).unwrap();
            y.as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum::<f64>()
                / 8.0
        };
        let mut prev = loss(&net);
        for _ in 0..50 {
            let (y, tape) = net.forward(&x).unwrap();
            let mut dy = y.clone();
            for (d, tv) in dy.as_mut_slice().iter_mut().zip(t.as_slice()) {
                *d = (*d - tv) / 8.0;
            }
            let g = net.backward(&tape, &dy).unwrap();
            net.sgd_step(&g, 0.05).unwrap();
            let cur = loss(&net);
            assert!(cur <= prev + 1e-15, "loss rose: {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn clip_postconditions() {
        let mut net = DenseNet::three_layer(3, 4, 2, &mut rng(14)).unwrap();
        let before = net.clone();
        net.clip_weights(10.0);
        assert_eq!(net, before);

        *net.param_mut(0) = 0.5;
        net.clip_weights(0.01);
        assert_eq!(net.params()[0], 0.01);
        assert!(net.max_abs_param() <= 0.01);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = DenseNet::three_layer(16, 8, 3, &mut rng(15)).unwrap();
        let b = DenseNet::three_layer(16, 8, 3, &mut rng(15)).unwrap();
        assert_eq!(a, b);
        let first = &a.layers()[0];
        assert!(first.weight.max_abs() <= 0.25);
        assert_eq!(a.layers()[2].activation, Activation::Linear);
        assert_eq!(a.layers()[0].activation, Activation::Relu);
    }
}
