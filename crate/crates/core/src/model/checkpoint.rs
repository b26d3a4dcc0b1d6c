//! Plain-text checkpoint format.
//!
//! ```text
//! format multibalance-checkpoint/1
//! input_dim <usize>
//! bottom_layers <count>
//! layer <out> <in> <activation>
//! w <out·in values, row-major>
//! b <out values>
//! ...                                  (one layer/w/b triple per layer)
//! heads <count>
//! head <binary|regression> <layer count>
//! layer ... / w ... / b ...            (per head layer)
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every parameter bit for bit. Lines starting
//! with `#` and blank lines are ignored.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Activation, Dense, SharedBottomModel, TaskHead, TaskKind};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

const MAGIC: &str = "multibalance-checkpoint/1";

fn write_layer(out: &mut impl Write, l: &Dense) -> Result<()> {
    writeln!(out, "layer {} {} {}", l.out_dim(), l.in_dim(), l.activation().name())?;
    write!(out, "w")?;
    for v in l.weight().as_slice() {
        write!(out, " {v}")?;
    }
    writeln!(out)?;
    write!(out, "b")?;
    for v in l.bias() {
        write!(out, " {v}")?;
    }
    writeln!(out)?;
    Ok(())
}

pub fn write_checkpoint(model: &SharedBottomModel, out: &mut impl Write) -> Result<()> {
    writeln!(out, "format {MAGIC}")?;
    writeln!(out, "input_dim {}", model.input_dim())?;
    writeln!(out, "bottom_layers {}", model.bottom().len())?;
    for l in model.bottom() {
        write_layer(out, l)?;
    }
    writeln!(out, "heads {}", model.heads().len())?;
    for h in model.heads() {
        writeln!(out, "head {} {}", h.kind().name(), h.layers().len())?;
        for l in h.layers() {
            write_layer(out, l)?;
        }
    }
    writeln!(out, "end")?;
    Ok(())
}

pub fn save_checkpoint(model: &SharedBottomModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    line_no: usize,
}

impl<R: Read> Lines<R> {
    fn next_tokens(&mut self) -> Result<Vec<String>> {
        loop {
            let line = self
                .inner
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of checkpoint".into()))??;
            self.line_no += 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Ok(t.split_whitespace().map(str::to_owned).collect());
        }
    }

    fn expect(&mut self, key: &str) -> Result<Vec<String>> {
        let toks = self.next_tokens()?;
        if toks.first().map(String::as_str) != Some(key) {
            return Err(Error::Parse(format!(
                "line {}: expected `{key}`, found `{}`",
                self.line_no,
                toks.join(" ")
            )));
        }
        Ok(toks[1..].to_vec())
    }

    fn expect_usize(&mut self, key: &str) -> Result<usize> {
        let toks = self.expect(key)?;
        self.parse_usize(toks.first())
    }

    fn parse_usize(&self, tok: Option<&String>) -> Result<usize> {
        tok.and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("line {}: expected an unsigned integer", self.line_no)))
    }

    fn floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let toks = self.expect(key)?;
        if toks.len() != count {
            return Err(Error::Parse(format!(
                "line {}: expected {count} values after `{key}`, found {}",
                self.line_no,
                toks.len()
            )));
        }
        toks.iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number `{t}`", self.line_no)))
            })
            .collect()
    }

    fn layer(&mut self) -> Result<Dense> {
        let toks = self.expect("layer")?;
        if toks.len() != 3 {
            return Err(Error::Parse(format!(
                "line {}: layer needs `out in activation`",
                self.line_no
            )));
        }
        let out = self.parse_usize(toks.first())?;
        let inp = self.parse_usize(toks.get(1))?;
        let act = Activation::from_name(&toks[2])
            .ok_or_else(|| Error::Parse(format!("line {}: unknown activation `{}`", self.line_no, toks[2])))?;
        let w = self.floats("w", out * inp)?;
        let b = self.floats("b", out)?;
        Dense::new(DenseMatrix::from_row_major(out, inp, w)?, b, act)
    }
}

pub fn read_checkpoint(input: impl Read) -> Result<SharedBottomModel> {
    let mut lines = Lines {
        inner: BufReader::new(input).lines(),
        line_no: 0,
    };
    let magic = lines.expect("format")?;
    if magic.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::Parse(format!("unsupported checkpoint format {magic:?}")));
    }
    let input_dim = lines.expect_usize("input_dim")?;
    let n_bottom = lines.expect_usize("bottom_layers")?;
    let bottom = (0..n_bottom).map(|_| lines.layer()).collect::<Result<Vec<_>>>()?;
    let n_heads = lines.expect_usize("heads")?;
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let toks = lines.expect("head")?;
        let kind = toks
            .first()
            .and_then(|k| TaskKind::from_name(k))
            .ok_or_else(|| Error::Parse(format!("line {}: unknown task kind", lines.line_no)))?;
        let n_layers = lines.parse_usize(toks.get(1))?;
        let layers = (0..n_layers).map(|_| lines.layer()).collect::<Result<Vec<_>>>()?;
        heads.push(TaskHead::new(layers, kind)?);
    }
    lines.expect("end")?;
    SharedBottomModel::new(input_dim, bottom, heads)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SharedBottomModel> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use crate::model::ModelArch;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = ModelArch {
            input_dim: 5,
            bottom: vec![7, 4],
            head_hidden: vec![3],
        };
        let model = SharedBottomModel::random(&arch, &[TaskKind::Binary, TaskKind::Regression], &mut SeededRng::new(8))
            .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        let a: Vec<u64> = model.flat_params().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.flat_params().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.task_kinds(), model.task_kinds());
    }

    #[test]
    fn rejects_truncated_and_malformed_files() {
        assert!(read_checkpoint("format multibalance-checkpoint/1\ninput_dim 2\n".as_bytes()).is_err());
        assert!(read_checkpoint("format other/9\n".as_bytes()).is_err());
        let bad_count = "format multibalance-checkpoint/1\ninput_dim 1\nbottom_layers 1\nlayer 1 1 tanh\nw 1 2\nb 0\n";
        assert!(read_checkpoint(bad_count.as_bytes()).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# saved by hand\nformat multibalance-checkpoint/1\n\ninput_dim 1\nbottom_layers 1\nlayer 1 1 identity\nw 2\nb 0\nheads 1\nhead regression 1\nlayer 1 1 identity\nw 1\nb 0\nend\n";
        let m = read_checkpoint(text.as_bytes()).unwrap();
        assert_eq!(m.flat_params(), vec![2.0, 0.0, 1.0, 0.0]);
    }
}
