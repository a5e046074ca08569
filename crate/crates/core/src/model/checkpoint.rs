//! Text checkpoints: a header with the encoder configuration, then one
//! `tensor <name> <dims..>` line per tensor followed by a line of values.
//! Values use Rust's shortest round-trip formatting, so reloading is exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &str = "pcuda-checkpoint v1";
const BANK_NOTE: &str = "memory_bank excluded";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> std::io::Result<()> {
    let c = &params.config;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{BANK_NOTE}")?;
    let hidden: Vec<String> = c.hidden.iter().map(usize::to_string).collect();
    writeln!(w, "hidden {}", hidden.join(" "))?;
    writeln!(w, "feature_dim {}", c.feature_dim)?;
    writeln!(w, "edge_conv {}", c.edge_conv)?;
    writeln!(w, "edge_k {}", c.edge_k)?;
    writeln!(w, "num_classes {}", c.num_classes)?;
    writeln!(w, "translation_classes {}", c.translation_classes)?;
    writeln!(w, "projector_dim {}", c.projector_dim)?;
    for (name, t) in params.named_tensors() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "tensor {name} {}", dims.join(" "))?;
        let mut first = true;
        for v in t.data() {
            if !first {
                w.write_all(b" ")?;
            }
            write!(w, "{v:e}")?;
            first = false;
        }
        writeln!(w)?;
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), path)
}

struct Lines<'a, R> {
    inner: std::io::Lines<R>,
    line: usize,
    path: &'a Path,
}

impl<R: BufRead> Lines<'_, R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(self.path, e)),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`, found {l:?}")));
        }
        Ok(parts.map(str::to_string).collect())
    }

    fn number<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key)?;
        match v.as_slice() {
            [one] => one
                .parse()
                .map_err(|_| self.err(format!("`{key}` value {one:?} is not valid"))),
            _ => Err(self.err(format!("`{key}` takes one value"))),
        }
    }
}

/// Reads a checkpoint; `path` only labels diagnostics.
pub fn read_checkpoint<R: BufRead>(reader: R, path: &Path) -> Result<ModelParams> {
    let mut lines = Lines {
        inner: reader.lines(),
        line: 0,
        path,
    };
    if lines.next()? != MAGIC {
        return Err(lines.err(format!("missing `{MAGIC}` header")));
    }
    if lines.next()? != BANK_NOTE {
        return Err(lines.err(format!("expected `{BANK_NOTE}`")));
    }
    let hidden = lines
        .keyed("hidden")?
        .iter()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| lines.err("hidden widths must be integers"))?;
    let config = EncoderConfig {
        hidden,
        feature_dim: lines.number("feature_dim")?,
        edge_conv: lines.number("edge_conv")?,
        edge_k: lines.number("edge_k")?,
        num_classes: lines.number("num_classes")?,
        translation_classes: lines.number("translation_classes")?,
        projector_dim: lines.number("projector_dim")?,
    };
    config
        .validate()
        .map_err(|e| lines.err(format!("invalid configuration: {e}")))?;

    // Shapes come from a throwaway initialization; values are overwritten.
    let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for ((name, shape), tensor) in expected.into_iter().zip(params.tensors_mut()) {
        let header = lines.keyed("tensor")?;
        let want: Vec<String> = std::iter::once(name.clone())
            .chain(shape.iter().map(usize::to_string))
            .collect();
        if header != want {
            return Err(lines.err(format!(
                "expected tensor `{}`, found `{}`",
                want.join(" "),
                header.join(" ")
            )));
        }
        let row = lines.next()?;
        let mut n = 0;
        for (i, tok) in row.split_whitespace().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| lines.err(format!("value {} of `{name}` is not a number: {tok:?}", i + 1)))?;
            if !v.is_finite() {
                return Err(lines.err(format!("value {} of `{name}` is not finite", i + 1)));
            }
            if i < tensor.len() {
                tensor.data_mut()[i] = v;
            }
            n = i + 1;
        }
        if n != tensor.len() {
            return Err(lines.err(format!("`{name}` needs {} values, found {n}", tensor.len())));
        }
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::model::predict;
    use rand::Rng;

    fn params(edge: bool) -> ModelParams {
        let cfg = EncoderConfig {
            hidden: vec![5, 7],
            feature_dim: 9,
            edge_conv: edge,
            edge_k: 3,
            num_classes: 4,
            translation_classes: 4,
            projector_dim: 6,
        };
        ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn dump(p: &ModelParams) -> String {
        let mut buf = Vec::new();
        write_checkpoint(p, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    fn load(s: &str) -> Result<ModelParams> {
        read_checkpoint(s.as_bytes(), Path::new("ckpt.txt"))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for edge in [false, true] {
            let p = params(edge);
            let back = load(&dump(&p)).unwrap();
            assert_eq!(back, p);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let cloud = PointCloud::new((0..16).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap();
            let a = predict(&p, &[&cloud]).unwrap();
            let b = predict(&back, &[&cloud]).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_value_names_line() {
        let text = dump(&params(false));
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        // line 11 is the first tensor's values (1-based)
        lines[10] = lines[10].replacen(' ', " oops ", 1);
        let err = load(&lines.join("\n")).unwrap_err().to_string();
        assert!(err.starts_with("ckpt.txt:11:"), "{err}");
        assert!(err.contains("oops"));
    }

    #[test]
    fn truncated_and_wrong_header() {
        let text = dump(&params(false));
        let cut: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(load(&cut).unwrap_err().to_string().contains("end of file"));
        let err = load(&text.replacen("pcuda-checkpoint v1", "pcuda-checkpoint v9", 1)).unwrap_err();
        assert!(err.to_string().starts_with("ckpt.txt:1:"));
        let err = load(&text.replacen("tensor encoder.0.weight 3 5", "tensor encoder.0.weight 3 4", 1)).unwrap_err();
        assert!(err.to_string().starts_with("ckpt.txt:10:"), "{err}");
    }
}
