//! Text container for [`ReluNet`]s.
//!
//! ```text
//! RELUNET v1 <n_layers> <d_0> <d_1> ... <d_n>
//! layer <i> <out_dim> <in_dim> [linear <count>]
//! weight
//! <in_dim floats>            (one line per output row)
//! bias
//! <out_dim floats>
//! ...
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips `f64`
//! exactly. The optional `linear <count>` marks identity-activated trailing
//! units of a hidden layer.

use crate::nn::{AffineLayer, NnError, ReluNet};
use crate::tensor::Matrix;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unexpected end of file: missing {0}")]
    Missing(String),
    #[error("invalid network: {0}")]
    Invalid(#[from] NnError),
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_text(net: &ReluNet) -> String {
    let mut out = String::new();
    let dims: Vec<String> = net.dims().iter().map(|d| d.to_string()).collect();
    writeln!(out, "RELUNET v1 {} {}", net.layers().len(), dims.join(" ")).unwrap();
    for (i, layer) in net.layers().iter().enumerate() {
        write!(out, "layer {} {} {}", i, layer.out_dim(), layer.in_dim()).unwrap();
        if layer.linear_tail > 0 {
            write!(out, " linear {}", layer.linear_tail).unwrap();
        }
        out.push('\n');
        out.push_str("weight\n");
        for r in 0..layer.out_dim() {
            let row: Vec<String> = layer.weight.row(r).iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out.push_str("bias\n");
        let bias: Vec<String> = layer.bias.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&bias.join(" "));
        out.push('\n');
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str), NetFileError> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| NetFileError::Missing(what.to_string()))
    }
}

fn parse_usize(tok: Option<&str>, line: usize, field: &str) -> Result<usize, NetFileError> {
    let tok = tok.ok_or_else(|| NetFileError::Parse { line, msg: format!("missing field `{field}`") })?;
    tok.parse().map_err(|_| NetFileError::Parse { line, msg: format!("field `{field}`: `{tok}` is not an integer") })
}

fn parse_floats(text: &str, line: usize, expected: usize, what: &str) -> Result<Vec<f64>, NetFileError> {
    let vals = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| NetFileError::Parse { line, msg: format!("{what}: `{t}` is not a number") })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(NetFileError::Parse { line, msg: format!("{what}: expected {expected} values, found {}", vals.len()) });
    }
    Ok(vals)
}

fn expect_keyword(lines: &mut Lines<'_>, kw: &str, section: &str) -> Result<(), NetFileError> {
    let (ln, text) = lines.next(section)?;
    if text != kw {
        return Err(NetFileError::Parse { line: ln, msg: format!("expected `{kw}`, found `{text}`") });
    }
    Ok(())
}

pub fn from_text(text: &str) -> Result<ReluNet, NetFileError> {
    let mut lines = Lines { inner: text.lines().enumerate() };
    let (ln, header) = lines.next("header")?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("RELUNET") || toks.next() != Some("v1") {
        return Err(NetFileError::Parse { line: ln, msg: "header must start with `RELUNET v1`".into() });
    }
    let n_layers = parse_usize(toks.next(), ln, "n_layers")?;
    if n_layers == 0 {
        return Err(NetFileError::Parse { line: ln, msg: "n_layers must be positive".into() });
    }
    let dims = toks
        .map(|t| parse_usize(Some(t), ln, "dims"))
        .collect::<Result<Vec<_>, _>>()?;
    if dims.len() != n_layers + 1 {
        return Err(NetFileError::Parse {
            line: ln,
            msg: format!("header declares {n_layers} layers but lists {} dims (need {})", dims.len(), n_layers + 1),
        });
    }

    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let section = format!("layer {i}");
        let (ln, head) = lines.next(&section)?;
        let mut t = head.split_whitespace();
        if t.next() != Some("layer") {
            return Err(NetFileError::Parse { line: ln, msg: format!("expected `layer {i}` section, found `{head}`") });
        }
        let idx = parse_usize(t.next(), ln, "layer index")?;
        if idx != i {
            return Err(NetFileError::Parse { line: ln, msg: format!("expected layer {i}, found layer {idx}") });
        }
        let out = parse_usize(t.next(), ln, "out_dim")?;
        let inp = parse_usize(t.next(), ln, "in_dim")?;
        if out != dims[i + 1] || inp != dims[i] {
            return Err(NetFileError::Parse {
                line: ln,
                msg: format!("layer {i} is {out}x{inp} but the header declares {}x{}", dims[i + 1], dims[i]),
            });
        }
        let tail = match t.next() {
            None => 0,
            Some("linear") => parse_usize(t.next(), ln, "linear count")?,
            Some(other) => return Err(NetFileError::Parse { line: ln, msg: format!("unexpected token `{other}`") }),
        };
        if let Some(extra) = t.next() {
            return Err(NetFileError::Parse { line: ln, msg: format!("unexpected token `{extra}`") });
        }
        expect_keyword(&mut lines, "weight", &format!("{section} weight"))?;
        let mut data = Vec::with_capacity(out * inp);
        for r in 0..out {
            let (ln, row) = lines.next(&format!("{section} weight row {r}"))?;
            data.extend(parse_floats(row, ln, inp, &format!("{section} weight row {r}"))?);
        }
        expect_keyword(&mut lines, "bias", &format!("{section} bias"))?;
        let (ln, row) = lines.next(&format!("{section} bias values"))?;
        let bias = parse_floats(row, ln, out, &format!("{section} bias"))?;
        layers.push(AffineLayer::with_tail(Matrix::from_vec(out, inp, data), bias, tail));
    }
    for (i, l) in lines.inner {
        if !l.trim().is_empty() {
            return Err(NetFileError::Parse { line: i + 1, msg: "trailing content after last layer".into() });
        }
    }
    Ok(ReluNet::new(layers)?)
}

pub fn save_net(net: &ReluNet, path: &Path) -> Result<(), NetFileError> {
    std::fs::write(path, to_text(net))?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<ReluNet, NetFileError> {
    from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ReluNet {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = ReluNet::random(&[3, 4, 2], &mut rng);
        let mut layers = net.layers().to_vec();
        layers[0].linear_tail = 1;
        layers[0].weight.set(0, 0, -0.0);
        layers[0].bias[1] = 1e-300;
        net = ReluNet::new(layers).unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample();
        let back = from_text(&to_text(&net)).unwrap();
        let a: Vec<u64> = net.params().0.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().0.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.layers()[0].linear_tail, 1);
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample();
        let (p1, p2) = (dir.path().join("a.net"), dir.path().join("b.net"));
        save_net(&net, &p1).unwrap();
        save_net(&net, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(load_net(&p1).unwrap(), net);
    }

    #[test]
    fn truncated_file_names_missing_section() {
        let text = to_text(&sample());
        let cut: String = text.lines().take(9).collect::<Vec<_>>().join("\n");
        match from_text(&cut) {
            Err(NetFileError::Missing(what)) => assert!(what.starts_with("layer 1"), "{what}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let text = to_text(&sample()).replacen("RELUNET v1 2 3 4 2", "RELUNET v1 2 3 5 2", 1);
        match from_text(&text) {
            Err(NetFileError::Parse { line: 2, msg }) => assert!(msg.contains("header declares")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let text = to_text(&sample());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = "1.0 abc 2.0".into();
        match from_text(&lines.join("\n")) {
            Err(NetFileError::Parse { line: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
