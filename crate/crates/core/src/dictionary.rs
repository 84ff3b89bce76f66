//! Initial-state-dependent controller dictionary.
//!
//! Unverified cells are grouped by the exact set of constraints their bounds
//! touch, a controller is fine-tuned per group, and every part that then
//! verifies becomes a dictionary entry. At decision time the controller of
//! the first entry containing `s_0` is used for the whole episode.

use crate::boxes::IntervalBox;
use crate::env::EnvSpec;
use crate::netfile::{fmt_f64, load_net, save_net, NetFileError};
use crate::nn::{ClosedLoopSystem, ReluNet};
use crate::reach::{verify_horizon, BabOptions, Certificate, CellRecord, GridCell, ReachError, Verdict};
use crate::train::{curriculum_train, CurriculumTask, TrainError, TrainingHyper};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("state {0:?} is not covered by any dictionary entry")]
    NotCovered(Vec<f64>),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    NetFile(#[from] NetFileError),
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Unverified cells sharing one violation signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub signature: Vec<usize>,
    pub cells: Vec<GridCell>,
}

/// Groups records by exact signature, ordered lexicographically by signature.
pub fn cluster_regions(records: &[CellRecord]) -> Vec<Cluster> {
    let mut groups: BTreeMap<Vec<usize>, Vec<GridCell>> = BTreeMap::new();
    for r in records {
        groups.entry(r.signature.clone()).or_default().push(r.cell.clone());
    }
    groups.into_iter().map(|(signature, cells)| Cluster { signature, cells }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryEntry {
    /// Cells certified safe for the dictionary horizon under `controller`.
    pub cells: Vec<GridCell>,
    pub controller: ReluNet,
    pub certificate: Certificate,
}

impl DictionaryEntry {
    pub fn volume(&self) -> f64 {
        self.cells.iter().map(|c| c.bx.volume()).fold(0.0, |a, v| a + v)
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        self.cells.iter().any(|c| c.bx.contains(s, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerDictionary {
    pub env: String,
    pub k: usize,
    pub entries: Vec<DictionaryEntry>,
    /// Cells no entry covers.
    pub residual: Vec<GridCell>,
}

/// Progress of one synthesis iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisIteration {
    pub iteration: usize,
    pub clusters: usize,
    pub new_volume: f64,
    pub covered_volume: f64,
    pub residual_volume: f64,
    pub stalled: bool,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub dictionary: ControllerDictionary,
    /// Verified fraction of the base controller alone.
    pub baseline_coverage: f64,
    pub log: Vec<SynthesisIteration>,
    /// Set when synthesis stopped before covering every cell.
    pub diagnostic: Option<String>,
}

impl ControllerDictionary {
    /// Index of the first entry whose cells contain `s0` (closed boxes).
    pub fn lookup(&self, s0: &[f64]) -> Option<usize> {
        self.entries.iter().position(|e| e.contains(s0))
    }

    pub fn controller_for(&self, s0: &[f64]) -> Result<&ReluNet, DictionaryError> {
        self.lookup(s0).map(|i| &self.entries[i].controller).ok_or_else(|| DictionaryError::NotCovered(s0.to_vec()))
    }

    pub fn covered_volume(&self) -> f64 {
        self.entries.iter().map(|e| e.volume()).fold(0.0, |a, v| a + v)
    }

    pub fn residual_volume(&self) -> f64 {
        self.residual.iter().map(|c| c.bx.volume()).fold(0.0, |a, v| a + v)
    }

    /// Covered share of the total cell volume.
    pub fn coverage(&self) -> f64 {
        let total = self.covered_volume() + self.residual_volume();
        if total > 0.0 {
            self.covered_volume() / total
        } else {
            1.0
        }
    }

    /// Writes `dictionary.txt` plus one controller and certificate file per entry into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DictionaryError> {
        std::fs::create_dir_all(dir)?;
        let mut out = String::new();
        writeln!(out, "DICTIONARY v1").unwrap();
        writeln!(out, "env {}", self.env).unwrap();
        writeln!(out, "K {}", self.k).unwrap();
        writeln!(out, "entries {}", self.entries.len()).unwrap();
        for (i, e) in self.entries.iter().enumerate() {
            let net = format!("controller_{i}.net");
            let cert = format!("certificate_{i}.txt");
            save_net(&e.controller, &dir.join(&net))?;
            e.certificate.save(&dir.join(&cert))?;
            writeln!(out, "entry {i} {net} {cert} {}", e.cells.len()).unwrap();
            for c in &e.cells {
                out.push_str(&cell_line(c));
            }
        }
        writeln!(out, "residual {}", self.residual.len()).unwrap();
        for c in &self.residual {
            out.push_str(&cell_line(c));
        }
        std::fs::write(dir.join("dictionary.txt"), out)?;
        Ok(())
    }

    /// Reads a manifest written by [`ControllerDictionary::save`]; file names
    /// are resolved against the manifest's directory.
    pub fn load(manifest: &Path) -> Result<Self, DictionaryError> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(manifest)?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| DictionaryError::Parse { line: 0, msg: format!("missing {what}") });
        let err = |line: usize, msg: &str| DictionaryError::Parse { line, msg: msg.to_string() };
        let (ln, head) = next("header")?;
        if head != "DICTIONARY v1" {
            return Err(err(ln, "expected `DICTIONARY v1`"));
        }
        let field = |(ln, l): (usize, &str), key: &str| -> Result<String, DictionaryError> {
            l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).map(str::to_string).ok_or_else(|| err(ln, &format!("expected `{key}`")))
        };
        let env = field(next("env")?, "env")?;
        let kline = next("K")?;
        let k: usize = field(kline, "K")?.parse().map_err(|_| err(kline.0, "bad K"))?;
        let nline = next("entries")?;
        let n: usize = field(nline, "entries")?.parse().map_err(|_| err(nline.0, "bad entry count"))?;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let (ln, l) = next("entry")?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "entry" || parts[1] != i.to_string() {
                return Err(err(ln, "expected `entry <i> <controller> <certificate> <cells>`"));
            }
            let controller = load_net(&dir.join(parts[2]))?;
            let certificate = Certificate::load(&dir.join(parts[3]))?;
            let count: usize = parts[4].parse().map_err(|_| err(ln, "bad cell count"))?;
            let mut cells = Vec::with_capacity(count);
            for _ in 0..count {
                let (ln, l) = next("cell")?;
                cells.push(parse_cell(l).ok_or_else(|| err(ln, "bad cell line"))?);
            }
            entries.push(DictionaryEntry { cells, controller, certificate });
        }
        let rline = next("residual")?;
        let r: usize = field(rline, "residual")?.parse().map_err(|_| err(rline.0, "bad residual count"))?;
        let mut residual = Vec::with_capacity(r);
        for _ in 0..r {
            let (ln, l) = next("cell")?;
            residual.push(parse_cell(l).ok_or_else(|| err(ln, "bad cell line"))?);
        }
        Ok(Self { env, k, entries, residual })
    }
}

fn cell_line(c: &GridCell) -> String {
    let mut s = c.id.clone();
    for v in c.bx.lb().iter().chain(c.bx.ub()) {
        s.push(' ');
        s.push_str(&fmt_f64(*v));
    }
    s.push('\n');
    s
}

fn parse_cell(line: &str) -> Option<GridCell> {
    let mut parts = line.split_whitespace();
    let id = parts.next()?.to_string();
    let vals: Vec<f64> = parts.map(|p| p.parse().ok()).collect::<Option<_>>()?;
    if vals.is_empty() || vals.len() % 2 != 0 {
        return None;
    }
    let n = vals.len() / 2;
    let bx = IntervalBox::new(vals[..n].to_vec(), vals[n..].to_vec()).ok()?;
    Some(GridCell { depth: id.len().saturating_sub(1), id, bx })
}

/// Synthesis controls beyond the training hyperparameters.
#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub verify: BabOptions,
    pub max_iterations: usize,
}

fn split_records(cert: &Certificate) -> (Vec<GridCell>, Vec<CellRecord>) {
    let safe = cert.safe_records().map(|r| r.cell.clone()).collect();
    let unsafe_ = cert.unsafe_records().cloned().collect();
    (safe, unsafe_)
}

fn halve(cell: &GridCell) -> [GridCell; 2] {
    let widths = cell.bx.widths();
    let dim = (0..widths.len()).fold(0, |best, d| if widths[d] > widths[best] { d } else { best });
    let (a, b) = cell.split(dim);
    [a, b]
}

/// Builds the dictionary starting from `base`, which is verified first on `grid`.
pub fn synthesize(
    env: &EnvSpec,
    dynamics: &ReluNet,
    base: &ReluNet,
    grid: &[GridCell],
    k: usize,
    hyper: &TrainingHyper,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, DictionaryError> {
    let sys_for = |net: &ReluNet| {
        ClosedLoopSystem::new(net.clone(), dynamics.clone(), Some(env.action_clip.clone())).map_err(TrainError::from)
    };
    let cert0 = verify_horizon(&sys_for(base)?, grid, k, &env.spec, &opts.verify, &env.name)?;
    let total = cert0.total_volume();
    let baseline_coverage = if total > 0.0 { cert0.safe_volume() / total } else { 1.0 };
    let (safe, mut residual) = split_records(&cert0);
    let mut entries = Vec::new();
    if !safe.is_empty() {
        entries.push(DictionaryEntry { cells: safe, controller: base.clone(), certificate: cert0 });
    }
    let mut log = Vec::new();
    let mut stalls = 0;
    let mut diagnostic = None;
    let mut iteration = 0;
    while !residual.is_empty() {
        if iteration == opts.max_iterations {
            diagnostic = Some(format!("stopped after {iteration} iterations with {} residual cells", residual.len()));
            break;
        }
        iteration += 1;
        let clusters = cluster_regions(&residual);
        let results: Vec<Result<(ReluNet, Certificate), DictionaryError>> = clusters
            .par_iter()
            .map(|cl| {
                let task = CurriculumTask { env, dynamics, grid: cl.cells.clone(), k_target: k };
                let tuned = curriculum_train(task, base, hyper)?.controller;
                let cert = verify_horizon(&sys_for(&tuned)?, &cl.cells, k, &env.spec, &opts.verify, &env.name)?;
                Ok((tuned, cert))
            })
            .collect();
        let mut new_volume = 0.0;
        let mut next_residual = Vec::new();
        for r in results {
            let (controller, certificate) = r?;
            let (safe, unsafe_) = split_records(&certificate);
            next_residual.extend(unsafe_);
            if !safe.is_empty() {
                new_volume += safe.iter().map(|c| c.bx.volume()).fold(0.0, |a, v| a + v);
                entries.push(DictionaryEntry { cells: safe, controller, certificate });
            }
        }
        next_residual.sort_by(|a, b| a.cell.id.cmp(&b.cell.id));
        let stalled = new_volume <= 0.0;
        if stalled {
            stalls += 1;
            if stalls == 1 {
                next_residual = next_residual
                    .iter()
                    .flat_map(|r| halve(&r.cell).map(|cell| CellRecord { cell, ..r.clone() }))
                    .collect();
            }
        }
        residual = next_residual;
        let covered: f64 = entries.iter().map(|e| e.volume()).fold(0.0, |a, v| a + v);
        log.push(SynthesisIteration {
            iteration,
            clusters: clusters.len(),
            new_volume,
            covered_volume: covered,
            residual_volume: residual.iter().map(|r| r.cell.bx.volume()).fold(0.0, |a, v| a + v),
            stalled,
        });
        if stalled && stalls >= 2 {
            diagnostic = Some(format!("no new volume verified twice; {} residual cells remain", residual.len()));
            break;
        }
    }
    let dictionary = ControllerDictionary {
        env: env.name.clone(),
        k,
        entries,
        residual: residual.into_iter().map(|r| r.cell).collect(),
    };
    Ok(SynthesisResult { dictionary, baseline_coverage, log, diagnostic })
}

/// Share of `records` by volume with a SAFE verdict.
pub fn safe_fraction(records: &[CellRecord]) -> f64 {
    let total: f64 = records.iter().map(|r| r.cell.bx.volume()).fold(0.0, |a, v| a + v);
    let safe: f64 = records.iter().filter(|r| r.verdict == Verdict::Safe).map(|r| r.cell.bx.volume()).fold(0.0, |a, v| a + v);
    if total > 0.0 {
        safe / total
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Method;
    use crate::nn::AffineLayer;
    use crate::tensor::Matrix;

    fn record(id: &str, lo: f64, hi: f64, sig: &[usize]) -> CellRecord {
        CellRecord {
            cell: GridCell { id: id.into(), bx: IntervalBox::new(vec![lo], vec![hi]).unwrap(), depth: id.len() - 1 },
            verdict: Verdict::Unsafe,
            horizon: 0,
            signature: sig.to_vec(),
        }
    }

    #[test]
    fn clustering_examples() {
        let same = [record("c0", 0.0, 1.0, &[2]), record("c1", 1.0, 2.0, &[2])];
        assert_eq!(cluster_regions(&same).len(), 1);
        let mixed = [record("c0", 0.0, 1.0, &[1, 2]), record("c1", 1.0, 2.0, &[2]), record("c2", 2.0, 3.0, &[1])];
        let cl = cluster_regions(&mixed);
        let sigs: Vec<Vec<usize>> = cl.iter().map(|c| c.signature.clone()).collect();
        assert_eq!(sigs, vec![vec![1], vec![1, 2], vec![2]]);
        assert!(cluster_regions(&[]).is_empty());
    }

    fn net(v: f64) -> ReluNet {
        ReluNet::new(vec![AffineLayer::new(Matrix::from_rows(&[vec![0.0]]), vec![v])]).unwrap()
    }

    fn cert(net: &ReluNet) -> Certificate {
        Certificate {
            env: "toy".into(),
            controller_hash: crate::reach::controller_hash(net),
            k: 3,
            precision: 0.1,
            method: Method::Ibp,
            records: vec![],
        }
    }

    fn entry(v: f64, lo: f64, hi: f64, id: &str) -> DictionaryEntry {
        let controller = net(v);
        DictionaryEntry {
            cells: vec![GridCell { id: id.into(), bx: IntervalBox::new(vec![lo], vec![hi]).unwrap(), depth: id.len() - 1 }],
            certificate: cert(&controller),
            controller,
        }
    }

    #[test]
    fn lookup_rules() {
        let dict = ControllerDictionary {
            env: "toy".into(),
            k: 3,
            entries: vec![entry(1.0, 0.0, 0.5, "c0"), entry(2.0, 0.5, 0.75, "c10")],
            residual: vec![GridCell { id: "c11".into(), bx: IntervalBox::new(vec![0.75], vec![1.0]).unwrap(), depth: 2 }],
        };
        assert_eq!(dict.lookup(&[0.2]), Some(0));
        assert_eq!(dict.lookup(&[0.5]), Some(0));
        assert_eq!(dict.lookup(&[0.6]), Some(1));
        assert_eq!(dict.lookup(&[0.9]), None);
        assert!(matches!(dict.controller_for(&[0.9]), Err(DictionaryError::NotCovered(_))));
        assert!((dict.covered_volume() + dict.residual_volume() - 1.0).abs() < 1e-12);

        let single = ControllerDictionary { env: "toy".into(), k: 3, entries: vec![entry(1.0, 0.0, 1.0, "c")], residual: vec![] };
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(single.controller_for(&[x]).unwrap(), &single.entries[0].controller);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dict = ControllerDictionary {
            env: "toy".into(),
            k: 3,
            entries: vec![entry(1.0, 0.0, 0.5, "c0"), entry(-2.5, 0.5, 0.75, "c10")],
            residual: vec![GridCell { id: "c11".into(), bx: IntervalBox::new(vec![0.75], vec![1.0]).unwrap(), depth: 2 }],
        };
        dict.save(dir.path()).unwrap();
        let back = ControllerDictionary::load(&dir.path().join("dictionary.txt")).unwrap();
        assert_eq!(back, dict);
    }
}
