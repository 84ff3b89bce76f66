//! Transition datasets and ReLU dynamics fitting.
//!
//! The fitted model is `F(s, a) = s + L [s; a] + l + N(s, a)`: a linear part
//! initialised by least squares and a two-hidden-layer ReLU residual `N`
//! trained with Adam on standardised data. Everything is folded into a
//! single [`ReluNet`] whose hidden layers carry the linear part on
//! identity-activated channels.

use super::{EnvError, EnvSpec};
use crate::autodiff::Graph;
use crate::nn::{tape_forward, AffineLayer, NetVars, ParamVector, ReluNet};
use crate::optim::Adam;
use crate::tensor::Matrix;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
    /// `[s; a]` per sample.
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// Samples before this index are training data, the rest validation.
    pub n_train: usize,
}

/// `n` uniform `(s, a)` samples over the env's sampling range and action
/// clip, labelled with one Euler step; the first 90% are for training.
pub fn generate_dataset(env: &EnvSpec, n: usize, seed: u64) -> DynamicsDataset {
    assert!(n >= 1, "dataset needs at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let s = env.sample_range.sample(&mut rng);
        let a: Vec<f64> = env.action_clip.iter().map(|c| if c.hi > c.lo { rng.gen_range(c.lo..c.hi) } else { c.lo }).collect();
        targets.push(env.euler_step(&s, &a));
        let mut sa = s;
        sa.extend(a);
        inputs.push(sa);
    }
    DynamicsDataset {
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        seed,
        inputs,
        targets,
        n_train: (n * 9) / 10,
    }
}

impl DynamicsDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn train(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.inputs[..self.n_train], &self.targets[..self.n_train])
    }

    pub fn validation(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.inputs[self.n_train..], &self.targets[self.n_train..])
    }

    /// Header `DYNDATA v1 <state_dim> <action_dim> <count> <seed>\n`, then
    /// each column (states, actions, next states) as little-endian `f64`s.
    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "DYNDATA v1 {} {} {} {}", self.state_dim, self.action_dim, self.len(), self.seed)?;
        let width_in = self.state_dim + self.action_dim;
        for c in 0..width_in {
            for row in &self.inputs {
                f.write_all(&row[c].to_le_bytes())?;
            }
        }
        for c in 0..self.state_dim {
            for row in &self.targets {
                f.write_all(&row[c].to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let bytes = std::fs::read(path)?;
        let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| EnvError::Dataset("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| EnvError::Dataset("header is not text".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 6 || toks[0] != "DYNDATA" || toks[1] != "v1" {
            return Err(EnvError::Dataset(format!("bad header `{header}`")));
        }
        let num = |i: usize, what: &str| -> Result<u64, EnvError> {
            toks[i].parse().map_err(|_| EnvError::Dataset(format!("header field {what} is not an integer")))
        };
        let (n, m, count, seed) = (num(2, "state_dim")? as usize, num(3, "action_dim")? as usize, num(4, "count")? as usize, num(5, "seed")?);
        let body = &bytes[nl + 1..];
        let cols = 2 * n + m;
        if body.len() != cols * count * 8 {
            return Err(EnvError::Dataset(format!("expected {} data bytes, found {}", cols * count * 8, body.len())));
        }
        let value = |c: usize, r: usize| {
            let off = (c * count + r) * 8;
            f64::from_le_bytes(body[off..off + 8].try_into().expect("8 bytes"))
        };
        let inputs = (0..count).map(|r| (0..n + m).map(|c| value(c, r)).collect()).collect();
        let targets = (0..count).map(|r| (0..n).map(|c| value(n + m + c, r)).collect()).collect();
        Ok(Self { state_dim: n, action_dim: m, seed, inputs, targets, n_train: (count * 9) / 10 })
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Initialise the linear part by least squares (otherwise it starts at zero).
    pub linear_init: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 256, lr: 3e-3, seed: 0, linear_init: true }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub net: ReluNet,
    /// Per state dimension.
    pub val_rmse: Vec<f64>,
    /// Validation RMSE of the network before any epoch.
    pub init_val_rmse: Vec<f64>,
}

/// Per-dimension RMSE of `net` on `(inputs, targets)`.
pub fn rmse(net: &ReluNet, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Vec<f64> {
    let n = net.output_dim();
    if inputs.is_empty() {
        return vec![0.0; n];
    }
    let out = net.forward_batch(&Matrix::from_columns(inputs)).expect("dataset dims match net");
    let mut acc = vec![0.0; n];
    for (j, t) in targets.iter().enumerate() {
        for d in 0..n {
            acc[d] += (out.get(d, j) - t[d]).powi(2);
        }
    }
    acc.iter().map(|v| (v / inputs.len() as f64).sqrt()).collect()
}

fn mean_std(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for d in 0..dim {
            mean[d] += r[d] / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for d in 0..dim {
            var[d] += (r[d] - mean[d]).powi(2) / n;
        }
    }
    (mean, var.iter().map(|v| v.sqrt().max(1e-8)).collect())
}

/// Least-squares `[L | l]` with `s' - s ~ L z + l`.
fn least_squares(inputs: &[Vec<f64>], targets: &[Vec<f64>], n: usize) -> (Matrix, Vec<f64>) {
    let p = inputs[0].len();
    let rows = inputs.len();
    let z = DMatrix::from_fn(rows, p + 1, |i, j| if j < p { inputs[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(rows, n, |i, j| targets[i][j] - inputs[i][j]);
    let sol = z.svd(true, true).solve(&y, 1e-12).expect("svd solve");
    let mut l = Matrix::zeros(n, p);
    let mut bias = vec![0.0; n];
    for j in 0..n {
        for k in 0..p {
            l.set(j, k, sol[(k, j)]);
        }
        bias[j] = sol[(p, j)];
    }
    (l, bias)
}

/// Assembles `s + L z + l + N(z)` where `N` acts on standardised inputs
/// and produces standardised residuals.
fn assemble(core: &ReluNet, lin: &Matrix, lin_b: &[f64], mu: &[f64], sd: &[f64], ymu: &[f64], ysd: &[f64]) -> ReluNet {
    let n = lin.rows();
    let p = lin.cols();
    let c = core.layers();
    let h1 = c[0].out_dim();
    let h2 = c[1].out_dim();
    // Layer 0: [W1 diag(1/sd); I_s + L], bias [b1 - W1 (mu/sd); l].
    let mut w0 = Matrix::zeros(h1 + n, p);
    let mut b0 = vec![0.0; h1 + n];
    for i in 0..h1 {
        let mut shift = 0.0;
        for k in 0..p {
            let w = c[0].weight.get(i, k) / sd[k];
            w0.set(i, k, w);
            shift += w * mu[k];
        }
        b0[i] = c[0].bias[i] - shift;
    }
    for j in 0..n {
        for k in 0..p {
            w0.set(h1 + j, k, lin.get(j, k) + if k == j { 1.0 } else { 0.0 });
        }
        b0[h1 + j] = lin_b[j];
    }
    let mut w1 = Matrix::zeros(h2 + n, h1 + n);
    w1.set_block(0, 0, &c[1].weight);
    w1.set_block(h2, h1, &Matrix::identity(n));
    let mut b1 = c[1].bias.clone();
    b1.extend(std::iter::repeat(0.0).take(n));
    let mut w2 = Matrix::zeros(n, h2 + n);
    let mut b2 = vec![0.0; n];
    for j in 0..n {
        for i in 0..h2 {
            w2.set(j, i, c[2].weight.get(j, i) * ysd[j]);
        }
        w2.set(j, h2 + j, 1.0);
        b2[j] = c[2].bias[j] * ysd[j] + ymu[j];
    }
    ReluNet::new(vec![
        AffineLayer::with_tail(w0, b0, n),
        AffineLayer::with_tail(w1, b1, n),
        AffineLayer::new(w2, b2),
    ])
    .expect("assembled dynamics net")
}

/// Fits the env's dynamics architecture to `data`.
pub fn fit_dynamics(env: &EnvSpec, data: &DynamicsDataset, opts: &FitOptions) -> Result<FitResult, EnvError> {
    let n = data.state_dim;
    let p = n + data.action_dim;
    let (tx, ty) = data.train();
    if tx.is_empty() {
        return Err(EnvError::Invalid("empty training split".into()));
    }
    let (lin, lin_b) = if opts.linear_init { least_squares(tx, ty, n) } else { (Matrix::zeros(n, p), vec![0.0; n]) };
    let (mu, sd) = mean_std(tx, p);
    let residual = |x: &[f64], y: &[f64]| -> Vec<f64> {
        let l = lin.mul_vec(x);
        (0..n).map(|j| y[j] - x[j] - l[j] - lin_b[j]).collect()
    };
    let res: Vec<Vec<f64>> = tx.iter().zip(ty).map(|(x, y)| residual(x, y)).collect();
    let (ymu, ysd) = mean_std(&res, n);
    let zs: Vec<Vec<f64>> = tx.iter().map(|x| (0..p).map(|k| (x[k] - mu[k]) / sd[k]).collect()).collect();
    let ys: Vec<Vec<f64>> = res.iter().map(|r| (0..n).map(|j| (r[j] - ymu[j]) / ysd[j]).collect()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = env.dyn_hidden;
    let mut core = ReluNet::random(&[p, h, h, n], &mut rng);
    let (vx, vy) = data.validation();
    let eval = |core: &ReluNet| {
        let net = assemble(core, &lin, &lin_b, &mu, &sd, &ymu, &ysd);
        let r = rmse(&net, vx, vy);
        (net, r)
    };
    let (_, init_val_rmse) = eval(&core);
    let mut params = core.params();
    let mut opt = Adam::new(opts.lr, params.len());
    let mut order: Vec<usize> = (0..zs.len()).collect();
    let bs = opts.batch_size.max(1);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let xb = Matrix::from_columns(&chunk.iter().map(|&i| zs[i].clone()).collect::<Vec<_>>());
            let yb = Matrix::from_columns(&chunk.iter().map(|&i| ys[i].clone()).collect::<Vec<_>>());
            let mut g = Graph::new();
            let vars = NetVars::register(&mut g, &core, true);
            let x = g.constant(xb);
            let y = g.constant(yb);
            let out = tape_forward(&mut g, &core, &vars, x);
            let d = g.sub(out, y);
            let sq = g.square(d);
            let s = g.sum(sq);
            let loss = g.scale(s, 1.0 / (chunk.len() * n) as f64);
            if !g.scalar(loss).is_finite() {
                return Err(EnvError::Divergence(epoch));
            }
            let grads = g.backward(loss).expect("scalar loss");
            let grad = vars.gradient(&core, &grads);
            opt.step(&mut params.0, &grad.0);
            core = core.with_params(&ParamVector(params.0.clone())).map_err(|_| EnvError::Divergence(epoch))?;
        }
    }
    let (net, val_rmse) = eval(&core);
    if val_rmse.iter().any(|v| !v.is_finite()) {
        return Err(EnvError::Divergence(opts.epochs));
    }
    Ok(FitResult { net, val_rmse, init_val_rmse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::IntervalBox;
    use crate::nn::ActionClip;
    use crate::safety::SafetySpec;

    fn linear_env() -> EnvSpec {
        EnvSpec::linear(
            "linear",
            Matrix::from_rows(&[vec![0.9]]),
            Matrix::from_rows(&[vec![0.1]]),
            IntervalBox::from_intervals(&[(-1.0, 1.0)]).unwrap(),
            vec![ActionClip { lo: -1.0, hi: 1.0 }],
            SafetySpec::default(),
            vec![0.0],
        )
    }

    #[test]
    fn dataset_is_deterministic_and_exact() {
        let env = EnvSpec::lane_following();
        let a = generate_dataset(&env, 10, 3);
        assert_eq!(a, generate_dataset(&env, 10, 3));
        assert_eq!(a.n_train, 9);
        for (x, y) in a.inputs.iter().zip(&a.targets) {
            assert_eq!(&env.euler_step(&x[..3], &x[3..]), y);
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let env = EnvSpec::quad2d(false);
        let d = generate_dataset(&env, 37, 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        d.save(&p).unwrap();
        assert_eq!(DynamicsDataset::load(&p).unwrap(), d);
        std::fs::write(&p, b"DYNDATA v1 6 2 37 11\nshort").unwrap();
        assert!(matches!(DynamicsDataset::load(&p), Err(EnvError::Dataset(_))));
    }

    #[test]
    fn coverage_of_sampling_range() {
        let env = EnvSpec::lane_following();
        let d = generate_dataset(&env, 100_000, 5);
        for dim in 0..3 {
            let lo = d.inputs.iter().map(|x| x[dim]).fold(f64::INFINITY, f64::min);
            let hi = d.inputs.iter().map(|x| x[dim]).fold(f64::NEG_INFINITY, f64::max);
            let w = env.sample_range.widths()[dim];
            assert!((lo - env.sample_range.lb()[dim]).abs() < 0.01 * w);
            assert!((hi - env.sample_range.ub()[dim]).abs() < 0.01 * w);
        }
    }

    #[test]
    fn linear_target_is_fit_exactly() {
        let env = linear_env();
        let d = generate_dataset(&env, 2000, 1);
        let fit = fit_dynamics(&env, &d, &FitOptions { epochs: 3, ..FitOptions::default() }).unwrap();
        assert!(fit.val_rmse[0] < 1e-3, "{:?}", fit.val_rmse);
        assert_eq!(fit.net.layers()[0].relu_units(), 8);
    }

    #[test]
    fn zero_epochs_reports_initial_rmse() {
        let env = EnvSpec::lane_following();
        let d = generate_dataset(&env, 500, 2);
        let fit = fit_dynamics(&env, &d, &FitOptions { epochs: 0, ..FitOptions::default() }).unwrap();
        assert_eq!(fit.val_rmse, fit.init_val_rmse);
    }

    #[test]
    fn shuffled_labels_do_not_beat_the_mean() {
        let env = EnvSpec::lane_following();
        let mut d = generate_dataset(&env, 4000, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        d.targets.shuffle(&mut rng);
        let fit = fit_dynamics(&env, &d, &FitOptions { epochs: 5, ..FitOptions::default() }).unwrap();
        let (_, vy) = d.validation();
        let (_, ty) = d.train();
        let (mean, _) = mean_std(ty, 3);
        for dim in 0..3 {
            let base = (vy.iter().map(|y| (y[dim] - mean[dim]).powi(2)).sum::<f64>() / vy.len() as f64).sqrt();
            assert!(fit.val_rmse[dim] >= 0.98 * base, "dim {dim}: {} vs {base}", fit.val_rmse[dim]);
        }
    }
}
