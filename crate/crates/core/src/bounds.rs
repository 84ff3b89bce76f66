//! Sound output bounds of ReLU networks over boxes.
//!
//! [`ibp`] propagates intervals layer by layer in center/radius form.
//! [`crown`] runs backward linear relaxation: each bounded quantity is
//! written as an affine function of the input, substituting a linear upper
//! and lower envelope for every unstable ReLU, then concretised over the
//! input box. CROWN results are intersected with IBP, so they are never
//! looser. Closed-loop rollouts bound the k-fold composed network directly;
//! [`incremental_rollout`] bounds it segment by segment instead.

use crate::autodiff::{Graph, Var};
use crate::boxes::IntervalBox;
use crate::nn::{tape_clip, ClosedLoopSystem, NetVars, ReluNet};
use crate::tensor::Matrix;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("box has dimension {got}, network expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("invalid incremental schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ibp,
    Crown,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ibp => "ibp",
            Method::Crown => "crown",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ibp" => Ok(Method::Ibp),
            "crown" => Ok(Method::Crown),
            other => Err(format!("unknown bound method `{other}` (expected `ibp` or `crown`)")),
        }
    }
}

/// Interval bounds on every layer's pre-activation `z_l = W_l h_{l-1} + b_l`.
fn ibp_preactivations(net: &ReluNet, input: &IntervalBox) -> Vec<(Vec<f64>, Vec<f64>)> {
    let last = net.layers().len() - 1;
    let mut c = input.center();
    let mut r = input.radius();
    let mut out = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let mut zc = layer.weight.mul_vec(&c);
        for (v, b) in zc.iter_mut().zip(&layer.bias) {
            *v += b;
        }
        let zr = layer.weight.abs().mul_vec(&r);
        let lo: Vec<f64> = zc.iter().zip(&zr).map(|(c, r)| c - r).collect();
        let hi: Vec<f64> = zc.iter().zip(&zr).map(|(c, r)| c + r).collect();
        if i < last {
            let k = layer.relu_units();
            let mut hl = lo.clone();
            let mut hh = hi.clone();
            for j in 0..k {
                hl[j] = hl[j].max(0.0);
                hh[j] = hh[j].max(0.0);
            }
            c = hl.iter().zip(&hh).map(|(l, h)| 0.5 * (l + h)).collect();
            r = hl.iter().zip(&hh).map(|(l, h)| 0.5 * (h - l)).collect();
        }
        out.push((lo, hi));
    }
    out
}

fn check_dim(net: &ReluNet, input: &IntervalBox) -> Result<(), BoundError> {
    if input.dim() != net.input_dim() {
        return Err(BoundError::DimMismatch { expected: net.input_dim(), got: input.dim() });
    }
    Ok(())
}

fn to_box(lo: Vec<f64>, hi: Vec<f64>) -> IntervalBox {
    IntervalBox::new(lo, hi).expect("propagated bounds are finite and ordered")
}

/// Interval bound propagation.
pub fn ibp(net: &ReluNet, input: &IntervalBox) -> Result<IntervalBox, BoundError> {
    check_dim(net, input)?;
    let (lo, hi) = ibp_preactivations(net, input).pop().expect("net has layers");
    Ok(to_box(lo, hi))
}

/// IBP bounds of the outputs of the given layers (pre-activation values).
pub fn ibp_layers(net: &ReluNet, input: &IntervalBox, layers: &[usize]) -> Result<Vec<IntervalBox>, BoundError> {
    check_dim(net, input)?;
    let all = ibp_preactivations(net, input);
    Ok(layers.iter().map(|&l| to_box(all[l].0.clone(), all[l].1.clone())).collect())
}

/// Per-unit linear envelopes `slope * z + intercept` of a layer's activation.
#[derive(Clone)]
struct Relaxation {
    lo_slope: Vec<f64>,
    lo_icpt: Vec<f64>,
    up_slope: Vec<f64>,
    up_icpt: Vec<f64>,
}

fn relax(layer_relu: usize, out_dim: usize, lo: &[f64], hi: &[f64]) -> Relaxation {
    let mut r = Relaxation {
        lo_slope: vec![1.0; out_dim],
        lo_icpt: vec![0.0; out_dim],
        up_slope: vec![1.0; out_dim],
        up_icpt: vec![0.0; out_dim],
    };
    for j in 0..layer_relu {
        let (l, u) = (lo[j], hi[j]);
        if l >= 0.0 {
            continue;
        }
        if u <= 0.0 {
            r.lo_slope[j] = 0.0;
            r.up_slope[j] = 0.0;
            continue;
        }
        let s = u / (u - l);
        r.up_slope[j] = s;
        r.up_icpt[j] = -s * l;
        r.lo_slope[j] = if u >= -l { 1.0 } else { 0.0 };
    }
    r
}

/// Backward substitution bounding rows `rows` of layer `target` over `input`.
fn backward_bounds(
    net: &ReluNet,
    relaxations: &[Relaxation],
    target: usize,
    rows: &[usize],
    input: &IntervalBox,
) -> (Vec<f64>, Vec<f64>) {
    let layers = net.layers();
    let w = &layers[target].weight;
    let sel: Vec<Vec<f64>> = rows.iter().map(|&r| w.row(r).to_vec()).collect();
    let mut au = Matrix::from_rows(&sel);
    let mut al = au.clone();
    let mut cu: Vec<f64> = rows.iter().map(|&r| layers[target].bias[r]).collect();
    let mut cl = cu.clone();
    for i in (0..target).rev() {
        let rx = &relaxations[i];
        let cols = au.cols();
        for r in 0..rows.len() {
            let row_u = au.row_mut(r);
            for k in 0..cols {
                let a = row_u[k];
                if a == 0.0 {
                    continue;
                }
                if a >= 0.0 {
                    cu[r] += a * rx.up_icpt[k];
                    row_u[k] = a * rx.up_slope[k];
                } else {
                    cu[r] += a * rx.lo_icpt[k];
                    row_u[k] = a * rx.lo_slope[k];
                }
            }
            let row_l = al.row_mut(r);
            for k in 0..cols {
                let a = row_l[k];
                if a == 0.0 {
                    continue;
                }
                if a >= 0.0 {
                    cl[r] += a * rx.lo_icpt[k];
                    row_l[k] = a * rx.lo_slope[k];
                } else {
                    cl[r] += a * rx.up_icpt[k];
                    row_l[k] = a * rx.up_slope[k];
                }
            }
        }
        let b = &layers[i].bias;
        for (c, v) in cu.iter_mut().zip(au.mul_vec(b)) {
            *c += v;
        }
        for (c, v) in cl.iter_mut().zip(al.mul_vec(b)) {
            *c += v;
        }
        au = au.matmul(&layers[i].weight);
        al = al.matmul(&layers[i].weight);
    }
    let xc = input.center();
    let xr = input.radius();
    let up: Vec<f64> = au
        .mul_vec(&xc)
        .iter()
        .zip(au.abs().mul_vec(&xr))
        .zip(&cu)
        .map(|((m, d), c)| (m + c) + d)
        .collect();
    let lo: Vec<f64> = al
        .mul_vec(&xc)
        .iter()
        .zip(al.abs().mul_vec(&xr))
        .zip(&cl)
        .map(|((m, d), c)| (m + c) - d)
        .collect();
    (lo, up)
}

fn intersect(lo: &mut [f64], hi: &mut [f64], ibp_lo: &[f64], ibp_hi: &[f64]) {
    for j in 0..lo.len() {
        let mut l = lo[j].max(ibp_lo[j]);
        let mut h = hi[j].min(ibp_hi[j]);
        if l > h {
            std::mem::swap(&mut l, &mut h);
        }
        lo[j] = l;
        hi[j] = h;
    }
}

/// CROWN bounds on the pre-activation outputs of `targets` (any layer indices).
pub fn crown_layers(net: &ReluNet, input: &IntervalBox, targets: &[usize]) -> Result<Vec<IntervalBox>, BoundError> {
    check_dim(net, input)?;
    let layers = net.layers();
    let n = layers.len();
    let ibp_all = ibp_preactivations(net, input);
    let max_target = targets.iter().copied().max().unwrap_or(0);
    let mut relaxations: Vec<Relaxation> = Vec::with_capacity(n);
    let mut results: Vec<Option<IntervalBox>> = vec![None; n];
    for j in 0..=max_target.min(n - 1) {
        let layer = &layers[j];
        let is_target = targets.contains(&j);
        let hidden = j + 1 < n;
        let relu_rows = if hidden { layer.relu_units() } else { 0 };
        let rows: Vec<usize> = if is_target { (0..layer.out_dim()).collect() } else { (0..relu_rows).collect() };
        let (mut lo, mut hi) = (ibp_all[j].0.clone(), ibp_all[j].1.clone());
        if !rows.is_empty() {
            let (cl, ch) = backward_bounds(net, &relaxations, j, &rows, input);
            for (idx, &r) in rows.iter().enumerate() {
                lo[r] = cl[idx];
                hi[r] = ch[idx];
            }
            intersect(&mut lo, &mut hi, &ibp_all[j].0, &ibp_all[j].1);
        }
        if is_target {
            results[j] = Some(to_box(lo.clone(), hi.clone()));
        }
        if hidden {
            relaxations.push(relax(relu_rows, layer.out_dim(), &lo, &hi));
        }
    }
    Ok(targets.iter().map(|&t| results[t].clone().expect("target bounded")).collect())
}

/// Backward linear relaxation bounds.
pub fn crown(net: &ReluNet, input: &IntervalBox) -> Result<IntervalBox, BoundError> {
    let last = net.layers().len() - 1;
    Ok(crown_layers(net, input, &[last])?.pop().expect("one target"))
}

pub fn bound(net: &ReluNet, input: &IntervalBox, method: Method) -> Result<IntervalBox, BoundError> {
    match method {
        Method::Ibp => ibp(net, input),
        Method::Crown => crown(net, input),
    }
}

/// Boxes for steps `1..=k` from bounding the k-fold composed network.
pub fn rollout_bounds(
    sys: &ClosedLoopSystem,
    input: &IntervalBox,
    k: usize,
    method: Method,
) -> Result<Vec<IntervalBox>, BoundError> {
    if k == 0 {
        return Err(BoundError::ZeroHorizon);
    }
    if input.dim() != sys.state_dim() {
        return Err(BoundError::DimMismatch { expected: sys.state_dim(), got: input.dim() });
    }
    let composed = sys.compose(k);
    match method {
        Method::Ibp => ibp_layers(&composed.net, input, &composed.step_layers),
        Method::Crown => crown_layers(&composed.net, input, &composed.step_layers),
    }
}

/// Checkpoints `0 < k_1 < ... < k_n = k_target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncrementalSchedule {
    checkpoints: Vec<usize>,
}

impl IncrementalSchedule {
    pub fn new(checkpoints: Vec<usize>) -> Result<Self, BoundError> {
        if checkpoints.is_empty() {
            return Err(BoundError::InvalidSchedule("no checkpoints".into()));
        }
        if checkpoints[0] == 0 {
            return Err(BoundError::InvalidSchedule("checkpoints must be positive".into()));
        }
        if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BoundError::InvalidSchedule("checkpoints must be strictly increasing".into()));
        }
        Ok(Self { checkpoints })
    }

    /// Checkpoints every `segment` steps, ending exactly at `k_target`.
    pub fn uniform(k_target: usize, segment: usize) -> Result<Self, BoundError> {
        if k_target == 0 {
            return Err(BoundError::ZeroHorizon);
        }
        if segment == 0 {
            return Err(BoundError::InvalidSchedule("segment length must be positive".into()));
        }
        let mut cps: Vec<usize> = (1..).map(|i| i * segment).take_while(|&c| c < k_target).collect();
        cps.push(k_target);
        Self::new(cps)
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn k_target(&self) -> usize {
        *self.checkpoints.last().expect("nonempty")
    }

    /// `(start, end)` step pairs, starting from 0.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut prev = 0;
        self.checkpoints
            .iter()
            .map(|&c| {
                let seg = (prev, c);
                prev = c;
                seg
            })
            .collect()
    }

    pub fn max_segment(&self) -> usize {
        self.segments().iter().map(|(a, b)| b - a).max().unwrap_or(0)
    }
}

/// Result of a segment-by-segment rollout.
#[derive(Debug, Clone)]
pub struct IncrementalRollout {
    pub boxes: Vec<IntervalBox>,
    /// Depth (layer count) of the deepest composed net bounded at once.
    pub peak_layers: usize,
}

/// Bounds every step up to the schedule's target, re-seeding each segment
/// with the concretised box at the previous checkpoint.
pub fn incremental_rollout(
    sys: &ClosedLoopSystem,
    input: &IntervalBox,
    sched: &IncrementalSchedule,
    method: Method,
) -> Result<IncrementalRollout, BoundError> {
    let mut boxes = Vec::with_capacity(sched.k_target());
    let mut seed = input.clone();
    let mut peak = 0;
    for (a, b) in sched.segments() {
        let seg = rollout_bounds(sys, &seed, b - a, method)?;
        peak = peak.max(sys.compose(b - a).net.layers().len());
        seed = seg.last().expect("segment nonempty").clone();
        boxes.extend(seg);
    }
    Ok(IncrementalRollout { boxes, peak_layers: peak })
}

/// Differentiable IBP through a network for a batch of boxes (one per column).
pub fn tape_ibp(g: &mut Graph, net: &ReluNet, vars: &NetVars, c: Var, r: Var) -> (Var, Var) {
    let last = net.layers().len() - 1;
    let (mut c, mut r) = (c, r);
    for (i, (layer, (w, b))) in net.layers().iter().zip(&vars.layers).enumerate() {
        let zc = g.matmul(*w, c);
        let zc = g.add_bias(zc, *b);
        let zr = g.abs_matmul(*w, r);
        if i < last && layer.relu_units() > 0 {
            let lo = g.sub(zc, zr);
            let hi = g.add(zc, zr);
            let lo = g.relu_rows(lo, layer.relu_units());
            let hi = g.relu_rows(hi, layer.relu_units());
            let s = g.add(hi, lo);
            let d = g.sub(hi, lo);
            c = g.scale(s, 0.5);
            r = g.scale(d, 0.5);
        } else {
            c = zc;
            r = zr;
        }
    }
    (c, r)
}

/// Differentiable IBP of one closed-loop step, returning `(lower, upper)`.
pub fn tape_ibp_step(
    g: &mut Graph,
    sys: &ClosedLoopSystem,
    ctrl: &NetVars,
    dynamics: &NetVars,
    c: Var,
    r: Var,
) -> (Var, Var) {
    let (ac, ar) = tape_ibp(g, &sys.controller, ctrl, c, r);
    let (ac, ar) = if sys.action_clip.is_some() {
        let lo = g.sub(ac, ar);
        let hi = g.add(ac, ar);
        let lo = tape_clip(g, sys, lo);
        let hi = tape_clip(g, sys, hi);
        let s = g.add(hi, lo);
        let d = g.sub(hi, lo);
        (g.scale(s, 0.5), g.scale(d, 0.5))
    } else {
        (ac, ar)
    };
    let sc = g.vstack(c, ac);
    let sr = g.vstack(r, ar);
    let (nc, nr) = tape_ibp(g, &sys.dynamics, dynamics, sc, sr);
    (g.sub(nc, nr), g.add(nc, nr))
}

/// Differentiable IBP rollout; element `t` is `(lower, upper)` after step `t + 1`.
pub fn tape_ibp_rollout(
    g: &mut Graph,
    sys: &ClosedLoopSystem,
    ctrl: &NetVars,
    dynamics: &NetVars,
    lb: Var,
    ub: Var,
    k: usize,
) -> Vec<(Var, Var)> {
    let mut out = Vec::with_capacity(k);
    let s = g.add(ub, lb);
    let d = g.sub(ub, lb);
    let mut c = g.scale(s, 0.5);
    let mut r = g.scale(d, 0.5);
    for _ in 0..k {
        let (lo, hi) = tape_ibp_step(g, sys, ctrl, dynamics, c, r);
        out.push((lo, hi));
        let s = g.add(hi, lo);
        let d = g.sub(hi, lo);
        c = g.scale(s, 0.5);
        r = g.scale(d, 0.5);
    }
    out
}

/// Stacks boxes as columns of `(lower, upper)` matrices.
pub fn boxes_to_columns(boxes: &[IntervalBox]) -> (Matrix, Matrix) {
    let lo: Vec<Vec<f64>> = boxes.iter().map(|b| b.lb().to_vec()).collect();
    let hi: Vec<Vec<f64>> = boxes.iter().map(|b| b.ub().to_vec()).collect();
    (Matrix::from_columns(&lo), Matrix::from_columns(&hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AffineLayer;

    fn affine(w: &[&[f64]], b: &[f64]) -> AffineLayer {
        AffineLayer::new(Matrix::from_rows(&w.iter().map(|r| r.to_vec()).collect::<Vec<_>>()), b.to_vec())
    }

    fn abs_net() -> ReluNet {
        ReluNet::new(vec![affine(&[&[1.0], &[-1.0]], &[0.0, 0.0]), affine(&[&[1.0, 1.0]], &[0.0])]).unwrap()
    }

    fn interval(l: f64, u: f64) -> IntervalBox {
        IntervalBox::new(vec![l], vec![u]).unwrap()
    }

    #[test]
    fn ibp_examples() {
        let lin = ReluNet::new(vec![affine(&[&[2.0]], &[1.0])]).unwrap();
        assert_eq!(ibp(&lin, &interval(-1.0, 1.0)).unwrap(), interval(-1.0, 3.0));
        let relu = ReluNet::new(vec![affine(&[&[1.0]], &[0.0]), affine(&[&[1.0]], &[0.0])]).unwrap();
        assert_eq!(ibp(&relu, &interval(-1.0, 2.0)).unwrap(), interval(0.0, 2.0));
        assert_eq!(ibp(&abs_net(), &interval(-1.0, 1.0)).unwrap(), interval(0.0, 2.0));
    }

    #[test]
    fn crown_abs_example() {
        assert_eq!(crown(&abs_net(), &interval(-1.0, 1.0)).unwrap(), interval(0.0, 1.0));
    }

    #[test]
    fn crown_equals_ibp_on_affine() {
        let lin = ReluNet::new(vec![affine(&[&[2.0, -1.0], &[0.5, 3.0]], &[1.0, -2.0])]).unwrap();
        let b = IntervalBox::from_intervals(&[(-1.0, 0.5), (0.2, 0.3)]).unwrap();
        assert_eq!(crown(&lin, &b).unwrap(), ibp(&lin, &b).unwrap());
    }

    #[test]
    fn dimension_errors() {
        let b = IntervalBox::from_intervals(&[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        assert_eq!(ibp(&abs_net(), &b), Err(BoundError::DimMismatch { expected: 1, got: 2 }));
        assert!(crown(&abs_net(), &b).is_err());
    }

    fn half_system() -> ClosedLoopSystem {
        let ctrl = ReluNet::new(vec![affine(&[&[1.0]], &[0.0])]).unwrap();
        let dynamics = ReluNet::new(vec![affine(&[&[0.5, 0.0]], &[0.0])]).unwrap();
        ClosedLoopSystem::new(ctrl, dynamics, None).unwrap()
    }

    #[test]
    fn linear_rollout_example() {
        for method in [Method::Ibp, Method::Crown] {
            let boxes = rollout_bounds(&half_system(), &interval(-1.0, 1.0), 3, method).unwrap();
            assert_eq!(boxes, vec![interval(-0.5, 0.5), interval(-0.25, 0.25), interval(-0.125, 0.125)]);
        }
        assert_eq!(rollout_bounds(&half_system(), &interval(-1.0, 1.0), 0, Method::Ibp), Err(BoundError::ZeroHorizon));
    }

    #[test]
    fn schedules() {
        let s = IncrementalSchedule::uniform(12, 5).unwrap();
        assert_eq!(s.checkpoints(), &[5, 10, 12]);
        assert_eq!(s.segments(), vec![(0, 5), (5, 10), (10, 12)]);
        assert_eq!(s.max_segment(), 5);
        assert!(IncrementalSchedule::new(vec![3, 3]).is_err());
        assert!(IncrementalSchedule::new(vec![0, 3]).is_err());
        assert!(IncrementalSchedule::new(vec![]).is_err());
    }

    #[test]
    fn incremental_affine_matches_monolithic() {
        let sys = half_system();
        let sched = IncrementalSchedule::new(vec![1, 3, 4]).unwrap();
        let inc = incremental_rollout(&sys, &interval(-1.0, 1.0), &sched, Method::Crown).unwrap();
        let mono = rollout_bounds(&sys, &interval(-1.0, 1.0), 4, Method::Crown).unwrap();
        assert_eq!(inc.boxes, mono);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("CROWN".parse::<Method>().unwrap(), Method::Crown);
        assert_eq!(Method::Ibp.to_string(), "ibp");
        assert!("zonotope".parse::<Method>().is_err());
    }
}
