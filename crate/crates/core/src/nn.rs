//! Feedforward ReLU networks and closed-loop composition.
//!
//! A [`ReluNet`] is a chain of affine layers with ReLU after every layer but
//! the last. A layer may additionally mark its trailing `linear_tail` units
//! as identity-activated. Such a unit is exactly `ReLU(z) - ReLU(-z)`, so
//! every net here is still a ReLU network ([`ReluNet::to_pure_relu`] spells
//! the equivalence out), but bound propagation can carry pass-through
//! channels without relaxing them.

use crate::autodiff::{Graph, Var};
use crate::tensor::Matrix;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("layer {layer}: {reason}")]
    BadLayer { layer: usize, reason: String },
    #[error("network has no layers")]
    Empty,
    #[error("parameter vector has length {got}, network needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("closed-loop system: {0}")]
    System(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    /// `out_dim x in_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Trailing units that skip the ReLU. Ignored on the output layer.
    pub linear_tail: usize,
}

impl AffineLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Self {
        Self { weight, bias, linear_tail: 0 }
    }

    pub fn with_tail(weight: Matrix, bias: Vec<f64>, linear_tail: usize) -> Self {
        Self { weight, bias, linear_tail }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Units that go through the ReLU.
    pub fn relu_units(&self) -> usize {
        self.out_dim() - self.linear_tail
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet {
    layers: Vec<AffineLayer>,
}

impl ReluNet {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Empty);
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(NnError::BadLayer {
                    layer: i,
                    reason: format!("bias length {} != out dim {}", layer.bias.len(), layer.out_dim()),
                });
            }
            if layer.out_dim() == 0 || layer.in_dim() == 0 {
                return Err(NnError::BadLayer { layer: i, reason: "zero-sized layer".into() });
            }
            if layer.linear_tail > layer.out_dim() {
                return Err(NnError::BadLayer { layer: i, reason: "linear tail exceeds out dim".into() });
            }
            if i + 1 == layers.len() && layer.linear_tail != 0 {
                return Err(NnError::BadLayer { layer: i, reason: "output layer cannot carry a linear tail".into() });
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(NnError::BadLayer { layer: i, reason: "non-finite parameter".into() });
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(NnError::BadLayer {
                    layer: i,
                    reason: format!("input dim {} does not chain from previous out dim {}", layer.in_dim(), layers[i - 1].out_dim()),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Random initialisation with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases.
    pub fn random(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Matrix::from_vec(
                    fan_out,
                    fan_in,
                    (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                );
                let bias = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                AffineLayer::new(weight, bias)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[input, out_0, out_1, ...]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.out_dim())).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimMismatch { expected: self.input_dim(), got: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.mul_vec(&h);
            for (v, b) in z.iter_mut().zip(&layer.bias) {
                *v += b;
            }
            if i < last {
                for v in &mut z[..layer.relu_units()] {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass over a batch stored one input per column.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix, NnError> {
        if x.rows() != self.input_dim() {
            return Err(NnError::DimMismatch { expected: self.input_dim(), got: x.rows() });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matmul(&h);
            z.add_row_bias(&layer.bias);
            if i < last {
                let c = z.cols();
                for v in &mut z.data_mut()[..layer.relu_units() * c] {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Equivalent network without identity units: each one becomes a
    /// `ReLU(z), ReLU(-z)` pair recombined by the next layer.
    pub fn to_pure_relu(&self) -> ReluNet {
        let mut layers: Vec<AffineLayer> = self.layers.clone();
        for i in 0..layers.len() - 1 {
            let tail = layers[i].linear_tail;
            if tail == 0 {
                continue;
            }
            let cur = &layers[i];
            let out = cur.out_dim();
            let neg = cur.weight.row_slice(out - tail, tail).scale(-1.0);
            let weight = cur.weight.vstack(&neg);
            let mut bias = cur.bias.clone();
            bias.extend(cur.bias[out - tail..].iter().map(|b| -b));
            layers[i] = AffineLayer::new(weight, bias);

            let next = &layers[i + 1];
            let mut w = Matrix::zeros(next.out_dim(), out + tail);
            for r in 0..next.out_dim() {
                for c in 0..out {
                    w.set(r, c, next.weight.get(r, c));
                }
                for t in 0..tail {
                    w.set(r, out + t, -next.weight.get(r, out - tail + t));
                }
            }
            layers[i + 1] = AffineLayer::with_tail(w, next.bias.clone(), next.linear_tail);
        }
        ReluNet { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// Flattens parameters: for each layer in order, the weight row-major then the bias.
    pub fn params(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            values.extend_from_slice(layer.weight.data());
            values.extend_from_slice(&layer.bias);
        }
        ParamVector(values)
    }

    /// Same architecture with parameters taken from `params` (ordering of [`ReluNet::params`]).
    pub fn with_params(&self, params: &ParamVector) -> Result<ReluNet, NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::ParamLength { expected: self.num_params(), got: params.len() });
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (r, c) = layer.weight.shape();
            let weight = Matrix::from_vec(r, c, params.0[offset..offset + r * c].to_vec());
            offset += r * c;
            let bias = params.0[offset..offset + r].to_vec();
            offset += r;
            layers.push(AffineLayer::with_tail(weight, bias, layer.linear_tail));
        }
        ReluNet::new(layers)
    }
}

/// Flat list of trainable parameters in the ordering of [`ReluNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-dimension action saturation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionClip {
    pub lo: f64,
    pub hi: f64,
}

/// Controller and dynamics in feedback: `s' = F(s, clip(pi(s)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopSystem {
    pub controller: ReluNet,
    pub dynamics: ReluNet,
    pub action_clip: Option<Vec<ActionClip>>,
}

/// A k-fold closed loop as one net; `step_layers[t]` is the layer whose
/// output is the state after step `t + 1`.
#[derive(Debug, Clone)]
pub struct ComposedNet {
    pub net: ReluNet,
    pub step_layers: Vec<usize>,
}

impl ClosedLoopSystem {
    pub fn new(controller: ReluNet, dynamics: ReluNet, action_clip: Option<Vec<ActionClip>>) -> Result<Self, NnError> {
        let n = controller.input_dim();
        let m = controller.output_dim();
        if dynamics.input_dim() != n + m {
            return Err(NnError::System(format!(
                "dynamics input dim {} != state {} + action {}",
                dynamics.input_dim(),
                n,
                m
            )));
        }
        if dynamics.output_dim() != n {
            return Err(NnError::System(format!("dynamics output dim {} != state dim {}", dynamics.output_dim(), n)));
        }
        if let Some(clip) = &action_clip {
            if clip.len() != m {
                return Err(NnError::System(format!("{} clip intervals for {} action dims", clip.len(), m)));
            }
            if clip.iter().any(|c| !(c.lo.is_finite() && c.hi.is_finite() && c.lo <= c.hi)) {
                return Err(NnError::System("clip intervals must be finite with lo <= hi".into()));
            }
        }
        Ok(Self { controller, dynamics, action_clip })
    }

    pub fn state_dim(&self) -> usize {
        self.controller.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.controller.output_dim()
    }

    pub fn with_controller(&self, controller: ReluNet) -> Result<Self, NnError> {
        Self::new(controller, self.dynamics.clone(), self.action_clip.clone())
    }

    pub fn clip_action(&self, a: &mut [f64]) {
        if let Some(clip) = &self.action_clip {
            for (v, c) in a.iter_mut().zip(clip) {
                *v = v.clamp(c.lo, c.hi);
            }
        }
    }

    /// Closed-loop action for state `s`.
    pub fn action(&self, s: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut a = self.controller.forward(s)?;
        self.clip_action(&mut a);
        Ok(a)
    }

    /// Staged evaluation of one step: controller, clip, dynamics.
    pub fn step(&self, s: &[f64]) -> Result<Vec<f64>, NnError> {
        let a = self.action(s)?;
        let mut sa = s.to_vec();
        sa.extend_from_slice(&a);
        self.dynamics.forward(&sa)
    }

    /// One closed-loop step as a single network mapping `s` to `s'`.
    pub fn compose_step(&self) -> ReluNet {
        self.compose(1).net
    }

    /// The `k`-fold closed loop as a single network. Step boundaries are
    /// all-linear layers so every intermediate state is a layer output.
    pub fn compose(&self, k: usize) -> ComposedNet {
        assert!(k >= 1, "compose needs k >= 1");
        let mut step = Vec::new();
        self.emit_step(&mut step);
        let mut layers = Vec::with_capacity(k * step.len());
        let mut step_layers = Vec::with_capacity(k);
        for _ in 0..k {
            layers.extend(step.iter().cloned());
            step_layers.push(layers.len() - 1);
        }
        if let Some(out) = layers.last_mut() {
            out.linear_tail = 0;
        }
        ComposedNet { net: ReluNet::new(layers).expect("composition preserves layer chaining"), step_layers }
    }

    fn emit_step(&self, layers: &mut Vec<AffineLayer>) {
        let n = self.state_dim();
        let m = self.action_dim();
        // State as an affine map of the current hidden vector h: s = ms h + vs.
        let mut ms = Matrix::identity(n);
        let mut vs = vec![0.0; n];
        let mut mc = ms.clone();
        let mut vc = vs.clone();
        let ctrl = self.controller.layers();
        for layer in &ctrl[..ctrl.len() - 1] {
            let wz = layer.weight.matmul(&mc);
            let bz = affine_bias(&layer.weight, &vc, &layer.bias);
            let out = layer.out_dim();
            layers.push(AffineLayer::with_tail(wz.vstack(&ms), concat(&bz, &vs), layer.linear_tail + n));
            mc = select(out, out + n, 0);
            vc = vec![0.0; out];
            ms = select(n, out + n, out);
            vs = vec![0.0; n];
        }
        let last = &ctrl[ctrl.len() - 1];
        let mut ma = last.weight.matmul(&mc);
        let mut va = affine_bias(&last.weight, &vc, &last.bias);
        match &self.action_clip {
            Some(clip) => {
                let lo: Vec<f64> = clip.iter().map(|c| c.lo).collect();
                let hi: Vec<f64> = clip.iter().map(|c| c.hi).collect();
                // r1 = ReLU(a - lo)
                let b1: Vec<f64> = va.iter().zip(&lo).map(|(v, l)| v - l).collect();
                layers.push(AffineLayer::with_tail(ma.vstack(&ms), concat(&b1, &vs), n));
                // r2 = ReLU((hi - lo) - r1), clipped action = hi - r2
                let mut w2 = Matrix::zeros(m + n, m + n);
                w2.set_block(0, 0, &Matrix::identity(m).scale(-1.0));
                w2.set_block(m, m, &Matrix::identity(n));
                let b2: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| h - l).chain(std::iter::repeat(0.0).take(n)).collect();
                layers.push(AffineLayer::with_tail(w2, b2, n));
                ma = select(m, m + n, 0).scale(-1.0);
                va = hi;
            }
            None => {
                layers.push(AffineLayer::with_tail(ma.vstack(&ms), concat(&va, &vs), m + n));
                ma = select(m, m + n, 0);
                va = vec![0.0; m];
            }
        }
        ms = select(n, m + n, m);
        vs = vec![0.0; n];

        let dynl = self.dynamics.layers();
        let first = &dynl[0];
        let ws = column_block(&first.weight, 0, n);
        let wa = column_block(&first.weight, n, m);
        let wz = {
            let mut w = ws.matmul(&ms);
            w.add_assign(&wa.matmul(&ma));
            w
        };
        let bz: Vec<f64> = ws
            .mul_vec(&vs)
            .iter()
            .zip(wa.mul_vec(&va))
            .zip(&first.bias)
            .map(|((x, y), b)| x + y + b)
            .collect();
        let q = dynl.len();
        let tail_for = |idx: usize, layer: &AffineLayer| -> usize {
            if idx + 1 < q {
                layer.linear_tail
            } else {
                layer.out_dim()
            }
        };
        layers.push(AffineLayer::with_tail(wz, bz, tail_for(0, first)));
        for (idx, layer) in dynl.iter().enumerate().skip(1) {
            layers.push(AffineLayer::with_tail(layer.weight.clone(), layer.bias.clone(), tail_for(idx, layer)));
        }
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

fn affine_bias(w: &Matrix, v: &[f64], b: &[f64]) -> Vec<f64> {
    w.mul_vec(v).iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `rows x width` selector picking `rows` consecutive coordinates starting at `offset`.
fn select(rows: usize, width: usize, offset: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, width);
    for i in 0..rows {
        m.set(i, offset + i, 1.0);
    }
    m
}

fn column_block(w: &Matrix, start: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(w.rows(), len);
    for r in 0..w.rows() {
        out.row_mut(r).copy_from_slice(&w.row(r)[start..start + len]);
    }
    out
}

/// Tape handles for one network's weights and biases.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub layers: Vec<(Var, Var)>,
}

impl NetVars {
    /// Registers the network on the tape; `trainable` selects params vs constants.
    pub fn register(g: &mut Graph, net: &ReluNet, trainable: bool) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let w = l.weight.clone();
                let b = Matrix::column(&l.bias);
                if trainable {
                    (g.param(w), g.param(b))
                } else {
                    (g.constant(w), g.constant(b))
                }
            })
            .collect();
        Self { layers }
    }

    /// Collects gradients into a [`ParamVector`] in the canonical ordering.
    pub fn gradient(&self, net: &ReluNet, grads: &crate::autodiff::Gradients) -> ParamVector {
        let mut out = Vec::with_capacity(net.num_params());
        for ((w, b), layer) in self.layers.iter().zip(net.layers()) {
            out.extend_from_slice(grads.wrt(*w, layer.weight.shape()).data());
            out.extend_from_slice(grads.wrt(*b, (layer.out_dim(), 1)).data());
        }
        ParamVector(out)
    }
}

/// Differentiable batched forward pass (inputs one per column).
pub fn tape_forward(g: &mut Graph, net: &ReluNet, vars: &NetVars, x: Var) -> Var {
    let last = net.layers().len() - 1;
    let mut h = x;
    for (i, (layer, (w, b))) in net.layers().iter().zip(&vars.layers).enumerate() {
        let z = g.matmul(*w, h);
        let z = g.add_bias(z, *b);
        h = if i < last { g.relu_rows(z, layer.relu_units()) } else { z };
    }
    h
}

/// Differentiable batched closed-loop step `s -> F(s, clip(pi(s)))`.
pub fn tape_step(g: &mut Graph, sys: &ClosedLoopSystem, ctrl: &NetVars, dynamics: &NetVars, s: Var) -> Var {
    let a = tape_forward(g, &sys.controller, ctrl, s);
    let a = tape_clip(g, sys, a);
    let sa = g.vstack(s, a);
    tape_forward(g, &sys.dynamics, dynamics, sa)
}

/// `hi - ReLU((hi - lo) - ReLU(a - lo))`, the clip as two ReLU stages.
pub fn tape_clip(g: &mut Graph, sys: &ClosedLoopSystem, a: Var) -> Var {
    match &sys.action_clip {
        None => a,
        Some(clip) => {
            let lo = g.constant(Matrix::column(&clip.iter().map(|c| -c.lo).collect::<Vec<_>>()));
            let span = g.constant(Matrix::column(&clip.iter().map(|c| c.hi - c.lo).collect::<Vec<_>>()));
            let hi = g.constant(Matrix::column(&clip.iter().map(|c| c.hi).collect::<Vec<_>>()));
            let r1 = g.add_bias(a, lo);
            let r1 = g.relu(r1);
            let r2 = g.neg(r1);
            let r2 = g.add_bias(r2, span);
            let r2 = g.relu(r2);
            let out = g.neg(r2);
            g.add_bias(out, hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(w: &[&[f64]], b: &[f64]) -> AffineLayer {
        AffineLayer::new(Matrix::from_rows(&w.iter().map(|r| r.to_vec()).collect::<Vec<_>>()), b.to_vec())
    }

    #[test]
    fn forward_examples() {
        let lin = ReluNet::new(vec![affine(&[&[2.0]], &[1.0])]).unwrap();
        assert_eq!(lin.forward(&[1.0]).unwrap(), vec![3.0]);

        let relu = ReluNet::new(vec![affine(&[&[1.0]], &[0.0]), affine(&[&[1.0]], &[0.0])]).unwrap();
        assert_eq!(relu.forward(&[-5.0]).unwrap(), vec![0.0]);

        let abs = ReluNet::new(vec![affine(&[&[1.0], &[-1.0]], &[0.0, 0.0]), affine(&[&[1.0, 1.0]], &[0.0])]).unwrap();
        assert!((abs.forward(&[-0.7]).unwrap()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let lin = ReluNet::new(vec![affine(&[&[2.0]], &[1.0])]).unwrap();
        assert_eq!(lin.forward(&[1.0, 2.0]), Err(NnError::DimMismatch { expected: 1, got: 2 }));
    }

    #[test]
    fn construction_validates_chaining() {
        let err = ReluNet::new(vec![affine(&[&[1.0, 0.0]], &[0.0]), affine(&[&[1.0, 1.0]], &[0.0])]).unwrap_err();
        assert!(matches!(err, NnError::BadLayer { layer: 1, .. }));
        let err = ReluNet::new(vec![affine(&[&[f64::NAN]], &[0.0])]).unwrap_err();
        assert!(matches!(err, NnError::BadLayer { layer: 0, .. }));
    }

    #[test]
    fn compose_identity_controller_no_clip() {
        let ctrl = ReluNet::new(vec![affine(&[&[1.0]], &[0.0])]).unwrap();
        let dynamics = ReluNet::new(vec![affine(&[&[1.0, 1.0]], &[0.0])]).unwrap();
        let sys = ClosedLoopSystem::new(ctrl, dynamics, None).unwrap();
        let net = sys.compose_step();
        assert!((net.forward(&[0.3]).unwrap()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn compose_clip_saturates() {
        let ctrl = ReluNet::new(vec![affine(&[&[0.0]], &[10.0])]).unwrap();
        let dynamics = ReluNet::new(vec![affine(&[&[0.0, 1.0]], &[0.0])]).unwrap();
        let sys = ClosedLoopSystem::new(ctrl, dynamics, Some(vec![ActionClip { lo: -1.0, hi: 1.0 }])).unwrap();
        let net = sys.compose_step();
        for s in [-3.0, 0.0, 2.5] {
            assert_eq!(net.forward(&[s]).unwrap(), vec![1.0]);
        }
    }

    fn random_system(rng: &mut ChaCha8Rng, clip: bool) -> ClosedLoopSystem {
        let n = rng.gen_range(1..4);
        let m = rng.gen_range(1..3);
        let ctrl = ReluNet::random(&[n, rng.gen_range(2..6), rng.gen_range(2..6), m], rng);
        let dynamics = ReluNet::random(&[n + m, rng.gen_range(2..6), n], rng);
        let clip = clip.then(|| (0..m).map(|_| ActionClip { lo: -0.5, hi: 0.4 }).collect());
        ClosedLoopSystem::new(ctrl, dynamics, clip).unwrap()
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
    }

    #[test]
    fn composed_step_matches_staged_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..1000 {
            let sys = random_system(&mut rng, trial % 2 == 0);
            let net = sys.compose_step();
            let s: Vec<f64> = (0..sys.state_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let staged = sys.step(&s).unwrap();
            let composed = net.forward(&s).unwrap();
            assert!(rel_close(&staged, &composed, 1e-12), "trial {trial}: {staged:?} vs {composed:?}");
            let pure = net.to_pure_relu();
            assert!(pure.layers().iter().all(|l| l.linear_tail == 0));
            assert!(rel_close(&pure.forward(&s).unwrap(), &composed, 1e-12));
        }
    }

    #[test]
    fn k_fold_composition_exposes_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sys = random_system(&mut rng, true);
        let composed = sys.compose(4);
        let s: Vec<f64> = (0..sys.state_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = s.clone();
        let mut expected = Vec::new();
        for _ in 0..4 {
            x = sys.step(&x).unwrap();
            expected.push(x.clone());
        }
        // Walk the composed net recording the boundary outputs.
        let net = &composed.net;
        let mut h = s;
        let mut seen = Vec::new();
        for (i, layer) in net.layers().iter().enumerate() {
            let mut z = layer.weight.mul_vec(&h);
            for (v, b) in z.iter_mut().zip(&layer.bias) {
                *v += b;
            }
            if i + 1 < net.layers().len() {
                for v in &mut z[..layer.relu_units()] {
                    *v = v.max(0.0);
                }
            }
            if composed.step_layers.contains(&i) {
                seen.push(z.clone());
            }
            h = z;
        }
        for (a, b) in seen.iter().zip(&expected) {
            assert!(rel_close(a, b, 1e-12));
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ReluNet::random(&[3, 5, 2], &mut rng);
        let p = net.params();
        assert_eq!(p.len(), 3 * 5 + 5 + 5 * 2 + 2);
        assert_eq!(net.with_params(&p).unwrap(), net);
        assert!(matches!(net.with_params(&ParamVector(vec![0.0; 3])), Err(NnError::ParamLength { .. })));
    }

    #[test]
    fn tape_step_matches_staged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(&mut rng, true);
        let states: Vec<Vec<f64>> = (0..6).map(|_| (0..sys.state_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut g = Graph::new();
        let c = NetVars::register(&mut g, &sys.controller, true);
        let d = NetVars::register(&mut g, &sys.dynamics, false);
        let s = g.constant(Matrix::from_columns(&states));
        let out = tape_step(&mut g, &sys, &c, &d, s);
        for (j, st) in states.iter().enumerate() {
            assert!(rel_close(&g.value(out).col(j), &sys.step(st).unwrap(), 1e-12));
        }
    }
}
