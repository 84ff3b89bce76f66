//! Grid splitting, input-split branch-and-bound and horizon certificates.
//!
//! Cell ids are bisection paths: the root is `c`, and bisecting cell `p`
//! yields `p0` (lower half) and `p1` (upper half). Sorting ids as strings is
//! a depth-first order, which fixes the certificate layout independently of
//! how cells were scheduled.

use crate::autodiff::Graph;
use crate::bounds::{incremental_rollout, rollout_bounds, tape_ibp_rollout, BoundError, IncrementalSchedule, Method};
use crate::boxes::IntervalBox;
use crate::netfile::{fmt_f64, to_text};
use crate::nn::{ClosedLoopSystem, NetVars, ReluNet};
use crate::safety::SafetySpec;
use crate::tensor::Matrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Outward padding applied to every bound box before a SAFE verdict.
pub const SOUNDNESS_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("grid budget must be at least 1")]
    Budget,
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("certificate line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub id: String,
    pub bx: IntervalBox,
    pub depth: usize,
}

impl GridCell {
    pub fn root(bx: IntervalBox) -> Self {
        Self { id: "c".into(), bx, depth: 0 }
    }

    pub fn split(&self, dim: usize) -> (GridCell, GridCell) {
        let (lo, hi) = self.bx.bisect(dim);
        (
            GridCell { id: format!("{}0", self.id), bx: lo, depth: self.depth + 1 },
            GridCell { id: format!("{}1", self.id), bx: hi, depth: self.depth + 1 },
        )
    }
}

/// Gradient of the summed region cost over steps `1..=k` with respect to the
/// cell radius, from differentiable IBP.
pub fn cost_radius_gradient(sys: &ClosedLoopSystem, bx: &IntervalBox, spec: &SafetySpec, k: usize) -> Vec<f64> {
    let n = bx.dim();
    let mut g = Graph::new();
    let ctrl = NetVars::register(&mut g, &sys.controller, false);
    let dynamics = NetVars::register(&mut g, &sys.dynamics, false);
    let c = g.constant(Matrix::column(&bx.center()));
    let r = g.param(Matrix::column(&bx.radius()));
    let lb = g.sub(c, r);
    let ub = g.add(c, r);
    let steps = tape_ibp_rollout(&mut g, sys, &ctrl, &dynamics, lb, ub, k);
    let mut total = None;
    for (t, (lo, hi)) in steps.iter().enumerate() {
        if let Some(cost) = spec.tape_cost(&mut g, *lo, *hi, t + 1) {
            total = Some(match total {
                None => cost,
                Some(acc) => g.add(acc, cost),
            });
        }
    }
    let Some(total) = total else { return vec![0.0; n] };
    let total = g.sum(total);
    let grads = g.backward(total).expect("scalar cost");
    grads.wrt(r, (n, 1)).into_vec()
}

/// Dimension to bisect: largest `|dC/dr_j|` among `eligible`, lowest index on
/// ties; the widest eligible dimension when every gradient is zero.
pub fn choose_split_dim(grad: &[f64], bx: &IntervalBox, eligible: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &d in eligible {
        let m = grad[d].abs();
        if m > 0.0 && best.map_or(true, |(_, b)| m > b) {
            best = Some((d, m));
        }
    }
    if let Some((d, _)) = best {
        return Some(d);
    }
    let widths = bx.widths();
    let mut widest: Option<(usize, f64)> = None;
    for &d in eligible {
        if widest.map_or(true, |(_, w)| widths[d] > w) {
            widest = Some((d, widths[d]));
        }
    }
    widest.map(|(d, _)| d)
}

/// Bisects `s0` breadth-first until `budget` cells exist, choosing each
/// split dimension from the cost gradient at `probe_step`.
pub fn split_initial(
    s0: &IntervalBox,
    budget: usize,
    sys: &ClosedLoopSystem,
    spec: &SafetySpec,
    probe_step: usize,
) -> Result<Vec<GridCell>, ReachError> {
    if budget < 1 {
        return Err(ReachError::Budget);
    }
    let relevant = spec.relevant_dims();
    let mut queue: VecDeque<GridCell> = VecDeque::from([GridCell::root(s0.clone())]);
    while queue.len() < budget {
        let cell = queue.pop_front().expect("queue nonempty");
        let eligible: Vec<usize> = relevant.iter().copied().filter(|&d| cell.bx.widths()[d] > 0.0).collect();
        let eligible = if eligible.is_empty() {
            (0..s0.dim()).filter(|&d| cell.bx.widths()[d] > 0.0).collect()
        } else {
            eligible
        };
        let grad = cost_radius_gradient(sys, &cell.bx, spec, probe_step.max(1));
        let Some(dim) = choose_split_dim(&grad, &cell.bx, &eligible) else {
            queue.push_front(cell);
            break;
        };
        let (a, b) = cell.split(dim);
        queue.push_back(a);
        queue.push_back(b);
    }
    let mut cells: Vec<GridCell> = queue.into_iter().collect();
    cells.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Safe,
    /// Not proven safe.
    Unsafe,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Safe => "SAFE",
            Verdict::Unsafe => "UNSAFE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell: GridCell,
    pub verdict: Verdict,
    /// Largest `h` such that steps `1..=h` were all proven safe.
    pub horizon: usize,
    /// Constraints with positive cost at some step of the tightest bounds.
    pub signature: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BabOptions {
    /// Per-dimension width below which a cell is not split further.
    pub precision: f64,
    pub method: Method,
    pub max_cells: Option<usize>,
    /// Segment length for incremental rollouts; `None` bounds the whole horizon at once.
    pub segment: Option<usize>,
}

impl BabOptions {
    pub fn new(precision: f64, method: Method) -> Self {
        Self { precision, method, max_cells: None, segment: None }
    }
}

#[derive(Debug, Clone)]
pub struct BabResult {
    pub verdict: Verdict,
    pub leaves: Vec<CellRecord>,
}

struct Assessment {
    horizon: usize,
    signature: Vec<usize>,
}

fn assess(boxes: &[IntervalBox], spec: &SafetySpec) -> Assessment {
    let mut horizon = None;
    let mut signature: Vec<usize> = Vec::new();
    for (t, b) in boxes.iter().enumerate() {
        let v = spec.violated(&b.inflate(SOUNDNESS_MARGIN), t + 1);
        if !v.is_empty() && horizon.is_none() {
            horizon = Some(t);
        }
        signature.extend(v);
    }
    signature.sort_unstable();
    signature.dedup();
    Assessment { horizon: horizon.unwrap_or(boxes.len()), signature }
}

fn intersect_boxes(a: &[IntervalBox], b: &[IntervalBox]) -> Vec<IntervalBox> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let lo: Vec<f64> = x.lb().iter().zip(y.lb()).map(|(p, q)| p.max(*q)).collect();
            let hi: Vec<f64> = x.ub().iter().zip(y.ub()).map(|(p, q)| p.min(*q)).collect();
            let (lo, hi): (Vec<f64>, Vec<f64>) = lo.iter().zip(&hi).map(|(l, h)| (l.min(*h), l.max(*h))).unzip();
            IntervalBox::new(lo, hi).expect("intersection of sound boxes")
        })
        .collect()
}

/// Whether every step box clears the unsafe set after padding by [`SOUNDNESS_MARGIN`].
pub fn boxes_safe(boxes: &[IntervalBox], spec: &SafetySpec) -> bool {
    boxes.iter().enumerate().all(|(t, b)| spec.violated(&b.inflate(SOUNDNESS_MARGIN), t + 1).is_empty())
}

/// Step boxes of one cell, keeping the per-method rollouts so a longer
/// horizon can reuse every completed segment.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBounds {
    pub ibp: Vec<IntervalBox>,
    /// Present when IBP alone did not prove the cell safe.
    pub crown: Option<Vec<IntervalBox>>,
    pub combined: Vec<IntervalBox>,
}

fn extend_method(
    sys: &ClosedLoopSystem,
    bx: &IntervalBox,
    prev: Option<&[IntervalBox]>,
    k: usize,
    segment: Option<usize>,
    method: Method,
) -> Result<Vec<IntervalBox>, BoundError> {
    let keep = match segment {
        Some(0) => return Err(BoundError::InvalidSchedule("segment length must be positive".into())),
        Some(s) if s < k => ((k - 1) / s) * s,
        _ => 0,
    };
    match prev {
        Some(p) if p.len() >= keep && keep > 0 => {
            let mut boxes = p[..keep].to_vec();
            boxes.extend(rollout_bounds(sys, &p[keep - 1], k - keep, method)?);
            Ok(boxes)
        }
        _ if keep > 0 => {
            Ok(incremental_rollout(sys, bx, &IncrementalSchedule::uniform(k, segment.expect("keep > 0"))?, method)?.boxes)
        }
        _ => rollout_bounds(sys, bx, k, method),
    }
}

/// Bounds for steps `1..=k`, reusing the completed segments of `prev` (the
/// same cell and system at a shorter horizon). The result equals a fresh
/// computation.
pub fn extend_step_bounds(
    sys: &ClosedLoopSystem,
    bx: &IntervalBox,
    prev: Option<&StepBounds>,
    k: usize,
    opts: &BabOptions,
    spec: &SafetySpec,
) -> Result<StepBounds, BoundError> {
    if k == 0 {
        return Err(BoundError::ZeroHorizon);
    }
    let ibp = extend_method(sys, bx, prev.map(|p| p.ibp.as_slice()), k, opts.segment, Method::Ibp)?;
    if opts.method == Method::Ibp || boxes_safe(&ibp, spec) {
        return Ok(StepBounds { combined: ibp.clone(), ibp, crown: None });
    }
    let crown = extend_method(sys, bx, prev.and_then(|p| p.crown.as_deref()), k, opts.segment, Method::Crown)?;
    let combined = intersect_boxes(&ibp, &crown);
    Ok(StepBounds { ibp, crown: Some(crown), combined })
}

/// Tightest available step boxes for `bx` under `opts.method`.
pub fn step_bounds(
    sys: &ClosedLoopSystem,
    bx: &IntervalBox,
    k: usize,
    opts: &BabOptions,
    spec: &SafetySpec,
) -> Result<Vec<IntervalBox>, BoundError> {
    Ok(extend_step_bounds(sys, bx, None, k, opts, spec)?.combined)
}

/// Refines `cell` until every leaf is proven safe for steps `1..=k` or can
/// no longer be split.
pub fn branch_and_bound(
    cell: &GridCell,
    sys: &ClosedLoopSystem,
    k: usize,
    spec: &SafetySpec,
    opts: &BabOptions,
) -> Result<BabResult, ReachError> {
    if k == 0 {
        return Err(BoundError::ZeroHorizon.into());
    }
    let relevant = spec.relevant_dims();
    let mut leaves = Vec::new();
    let mut stack = vec![cell.clone()];
    while let Some(c) = stack.pop() {
        let boxes = step_bounds(sys, &c.bx, k, opts, spec)?;
        let a = assess(&boxes, spec);
        if a.signature.is_empty() {
            leaves.push(CellRecord { cell: c, verdict: Verdict::Safe, horizon: k, signature: vec![] });
            continue;
        }
        let widths = c.bx.widths();
        let eligible: Vec<usize> = relevant.iter().copied().filter(|&d| widths[d] > opts.precision).collect();
        let capped = opts.max_cells.is_some_and(|m| leaves.len() + stack.len() + 2 > m);
        if eligible.is_empty() || capped {
            leaves.push(CellRecord { cell: c, verdict: Verdict::Unsafe, horizon: a.horizon, signature: a.signature });
            continue;
        }
        let grad = cost_radius_gradient(sys, &c.bx, spec, k);
        let dim = choose_split_dim(&grad, &c.bx, &eligible).expect("eligible nonempty");
        let (lo, hi) = c.split(dim);
        stack.push(hi);
        stack.push(lo);
    }
    leaves.sort_by(|a, b| a.cell.id.cmp(&b.cell.id));
    let verdict = if leaves.iter().all(|l| l.verdict == Verdict::Safe) { Verdict::Safe } else { Verdict::Unsafe };
    Ok(BabResult { verdict, leaves })
}

/// Per-cell verification record for the whole initial region.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub env: String,
    pub controller_hash: String,
    pub k: usize,
    pub precision: f64,
    pub method: Method,
    pub records: Vec<CellRecord>,
}

pub fn controller_hash(net: &ReluNet) -> String {
    hex::encode(Sha256::digest(to_text(net).as_bytes()))
}

/// Branch-and-bound on every cell for steps `1..=k`; cells run in parallel
/// and records are merged in id order.
pub fn verify_horizon(
    sys: &ClosedLoopSystem,
    cells: &[GridCell],
    k: usize,
    spec: &SafetySpec,
    opts: &BabOptions,
    env: &str,
) -> Result<Certificate, ReachError> {
    let results: Vec<Result<BabResult, ReachError>> =
        cells.par_iter().map(|c| branch_and_bound(c, sys, k, spec, opts)).collect();
    let mut records = Vec::new();
    for r in results {
        records.extend(r?.leaves);
    }
    records.sort_by(|a, b| a.cell.id.cmp(&b.cell.id));
    Ok(Certificate {
        env: env.to_string(),
        controller_hash: controller_hash(&sys.controller),
        k,
        precision: opts.precision,
        method: opts.method,
        records,
    })
}

impl Certificate {
    pub fn total_volume(&self) -> f64 {
        self.records.iter().map(|r| r.cell.bx.volume()).fold(0.0, |a, v| a + v)
    }

    pub fn safe_volume(&self) -> f64 {
        self.records.iter().filter(|r| r.verdict == Verdict::Safe).map(|r| r.cell.bx.volume()).fold(0.0, |a, v| a + v)
    }

    /// Fraction of the volume whose verified horizon reaches `k`.
    pub fn verified_fraction(&self, k: usize) -> f64 {
        let total = self.total_volume();
        if total == 0.0 {
            let n = self.records.len().max(1) as f64;
            return self.records.iter().filter(|r| r.horizon >= k).count() as f64 / n;
        }
        self.records.iter().filter(|r| r.horizon >= k).map(|r| r.cell.bx.volume()).fold(0.0, |a, v| a + v) / total
    }

    /// Largest horizon verified for every cell.
    pub fn verified_max(&self) -> usize {
        self.records.iter().map(|r| r.horizon).min().unwrap_or(self.k)
    }

    pub fn safe_records(&self) -> impl Iterator<Item = &CellRecord> {
        self.records.iter().filter(|r| r.verdict == Verdict::Safe)
    }

    pub fn unsafe_records(&self) -> impl Iterator<Item = &CellRecord> {
        self.records.iter().filter(|r| r.verdict == Verdict::Unsafe)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "CERTIFICATE v1").unwrap();
        writeln!(out, "env {}", self.env).unwrap();
        writeln!(out, "controller {}", self.controller_hash).unwrap();
        writeln!(out, "K {}", self.k).unwrap();
        writeln!(out, "precision {}", fmt_f64(self.precision)).unwrap();
        writeln!(out, "method {}", self.method).unwrap();
        writeln!(out, "cells {}", self.records.len()).unwrap();
        for r in &self.records {
            write!(out, "{}", r.cell.id).unwrap();
            for (l, u) in r.cell.bx.lb().iter().zip(r.cell.bx.ub()) {
                write!(out, " {} {}", fmt_f64(*l), fmt_f64(*u)).unwrap();
            }
            let sig = if r.signature.is_empty() {
                "-".to_string()
            } else {
                r.signature.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            };
            writeln!(out, " {} {} {}", r.verdict.as_str(), r.horizon, sig).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ReachError> {
        let err = |line: usize, msg: &str| ReachError::Parse { line, msg: msg.to_string() };
        let lines: Vec<&str> = text.lines().collect();
        let field = |i: usize, key: &str| -> Result<&str, ReachError> {
            let line = lines.get(i).ok_or_else(|| err(i + 1, &format!("missing `{key}` line")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .ok_or_else(|| err(i + 1, &format!("expected `{key} <value>`")))
        };
        if lines.first() != Some(&"CERTIFICATE v1") {
            return Err(err(1, "header must be `CERTIFICATE v1`"));
        }
        let env = field(1, "env")?.to_string();
        let controller_hash = field(2, "controller")?.to_string();
        let k = field(3, "K")?.parse().map_err(|_| err(4, "K is not an integer"))?;
        let precision = field(4, "precision")?.parse().map_err(|_| err(5, "precision is not a number"))?;
        let method = field(5, "method")?.parse().map_err(|e: String| err(6, &e))?;
        let n: usize = field(6, "cells")?.parse().map_err(|_| err(7, "cell count is not an integer"))?;
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let ln = 8 + i;
            let line = lines.get(7 + i).ok_or_else(|| err(ln, "missing cell line"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 4 || (toks.len() - 4) % 2 != 0 {
                return Err(err(ln, "malformed cell line"));
            }
            let dims = (toks.len() - 4) / 2;
            let mut lb = Vec::with_capacity(dims);
            let mut ub = Vec::with_capacity(dims);
            for d in 0..dims {
                lb.push(toks[1 + 2 * d].parse::<f64>().map_err(|_| err(ln, "bad lower bound"))?);
                ub.push(toks[2 + 2 * d].parse::<f64>().map_err(|_| err(ln, "bad upper bound"))?);
            }
            let bx = IntervalBox::new(lb, ub).map_err(|e| err(ln, &e.to_string()))?;
            let verdict = match toks[toks.len() - 3] {
                "SAFE" => Verdict::Safe,
                "UNSAFE" => Verdict::Unsafe,
                _ => return Err(err(ln, "verdict must be SAFE or UNSAFE")),
            };
            let horizon = toks[toks.len() - 2].parse().map_err(|_| err(ln, "bad horizon"))?;
            let sig_tok = toks[toks.len() - 1];
            let signature = if sig_tok == "-" {
                vec![]
            } else {
                sig_tok
                    .split(',')
                    .map(|s| s.parse::<usize>().map_err(|_| err(ln, "bad signature")))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let id = toks[0].to_string();
            let depth = id.len().saturating_sub(1);
            records.push(CellRecord { cell: GridCell { id, bx, depth }, verdict, horizon, signature });
        }
        Ok(Certificate { env, controller_hash, k, precision, method, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReachError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReachError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AffineLayer, ReluNet};
    use crate::safety::Obstacle;

    fn identity_system() -> ClosedLoopSystem {
        let ctrl = ReluNet::new(vec![AffineLayer::new(Matrix::from_rows(&[vec![0.0]]), vec![0.0])]).unwrap();
        let dynamics = ReluNet::new(vec![AffineLayer::new(Matrix::from_rows(&[vec![1.0, 0.0]]), vec![0.0])]).unwrap();
        ClosedLoopSystem::new(ctrl, dynamics, None).unwrap()
    }

    fn interval(l: f64, u: f64) -> IntervalBox {
        IntervalBox::new(vec![l], vec![u]).unwrap()
    }

    fn avoid(l: f64, u: f64) -> SafetySpec {
        SafetySpec::new(vec![Obstacle::fixed(vec![0], vec![l], vec![u])], vec![]).unwrap()
    }

    #[test]
    fn bab_examples() {
        let sys = identity_system();
        let spec = avoid(1.0, 2.0);
        for precision in [0.1, 0.01, 0.001] {
            let opts = BabOptions::new(precision, Method::Crown);
            let r = branch_and_bound(&GridCell::root(interval(0.9, 1.1)), &sys, 3, &spec, &opts).unwrap();
            assert_eq!(r.verdict, Verdict::Unsafe);
        }
        let opts = BabOptions::new(0.01, Method::Crown);
        let r = branch_and_bound(&GridCell::root(interval(0.5, 0.9)), &sys, 4, &spec, &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Safe);
        assert_eq!(r.leaves.len(), 1);
    }

    #[test]
    fn verify_identity_marks_overlap() {
        let sys = identity_system();
        let spec = avoid(0.3, 2.0);
        let opts = BabOptions::new(0.125, Method::Ibp);
        let cert = verify_horizon(&sys, &[GridCell::root(interval(0.0, 1.0))], 2, &spec, &opts, "toy").unwrap();
        for r in &cert.records {
            let overlaps = r.cell.bx.ub()[0] > 0.3;
            assert_eq!(r.verdict == Verdict::Unsafe, overlaps, "{:?}", r.cell);
            if overlaps {
                assert_eq!(r.horizon, 0);
                assert_eq!(r.signature, vec![0]);
            }
        }
        assert!((cert.verified_fraction(2) - 0.25).abs() < 1e-12);
        assert!((cert.total_volume() - 1.0).abs() < 1e-12);
        let back = Certificate::from_text(&cert.to_text()).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn vacuous_spec_is_safe() {
        let sys = identity_system();
        let opts = BabOptions::new(0.1, Method::Crown);
        let cells = split_initial(&interval(0.0, 1.0), 4, &sys, &SafetySpec::default(), 1).unwrap();
        let cert = verify_horizon(&sys, &cells, 5, &SafetySpec::default(), &opts, "toy").unwrap();
        assert!(cert.records.iter().all(|r| r.verdict == Verdict::Safe && r.horizon == 5));
        assert_eq!(cert.verified_max(), 5);
    }

    #[test]
    fn split_budget_and_tiebreak() {
        let sys = identity_system();
        let spec = avoid(0.3, 2.0);
        assert!(matches!(split_initial(&interval(0.0, 1.0), 0, &sys, &spec, 1), Err(ReachError::Budget)));
        let one = split_initial(&interval(0.0, 1.0), 1, &sys, &spec, 1).unwrap();
        assert_eq!(one, vec![GridCell::root(interval(0.0, 1.0))]);
        assert_eq!(split_initial(&interval(0.0, 1.0), 7, &sys, &spec, 1).unwrap().len(), 7);
        let b = IntervalBox::from_intervals(&[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        assert_eq!(choose_split_dim(&[0.5, 0.5], &b, &[0, 1]), Some(0));
        assert_eq!(choose_split_dim(&[0.5, -0.7], &b, &[0, 1]), Some(1));
        assert_eq!(choose_split_dim(&[0.0, 0.0], &b, &[0, 1]), Some(0));
    }

    #[test]
    fn certificate_parse_errors() {
        assert!(matches!(Certificate::from_text("nope"), Err(ReachError::Parse { line: 1, .. })));
        let text = "CERTIFICATE v1\nenv toy\ncontroller ab\nK 2\nprecision 0.1\nmethod ibp\ncells 1\n";
        assert!(matches!(Certificate::from_text(text), Err(ReachError::Parse { line: 8, .. })));
    }
}
