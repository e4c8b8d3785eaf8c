//! Versioned named-tensor checkpoint container.
//!
//! A plain-text header (`PMLM-CHECKPOINT 1`, then `key=value` lines, then
//! `end_header`) followed by little-endian binary records. See
//! `docs/checkpoint-format.md` for the byte layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Mat, Scalar, Transformer};
use crate::objectives::OptimizerState;

pub const MAGIC: &str = "PMLM-CHECKPOINT";
pub const VERSION: u32 = 1;
pub const HEADER_END: &str = "end_header";
/// Header keys with this prefix describe the file, not the run config.
pub const META_PREFIX: &str = "meta.";

const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated record"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated record"))?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_header(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.header_value(&format!("{META_PREFIX}{key}"))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.set_header(&format!("{META_PREFIX}{key}"), value);
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, t: NamedTensor) {
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
    }

    pub fn push_mat<T: Scalar>(&mut self, name: &str, m: &Mat<T>) {
        self.insert(NamedTensor {
            name: name.to_string(),
            dims: vec![m.rows, m.cols],
            data: m.data.iter().map(|v| v.to_f64c() as f32).collect(),
        });
    }

    /// Reads a rank-2 (or rank-1, as one row) tensor back as a matrix.
    pub fn mat<T: Scalar>(&self, name: &str) -> Result<Mat<T>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let (rows, cols) = match t.dims[..] {
            [c] => (1, c),
            [r, c] => (r, c),
            _ => return Err(bad(format!("tensor {name} has rank {}", t.dims.len()))),
        };
        Ok(Mat::from_vec(
            rows,
            cols,
            t.data.iter().map(|&v| T::of(v as f64)).collect(),
        ))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("writing checkpoint", e);
        writeln!(w, "{MAGIC} {VERSION}").map_err(io)?;
        for (k, v) in &self.header {
            if k.contains('=') || k.contains('\n') || v.contains('\n') || k == HEADER_END {
                return Err(bad(format!("header entry {k:?} cannot be stored")));
            }
            writeln!(w, "{k}={v}").map_err(io)?;
        }
        writeln!(w, "{HEADER_END}").map_err(io)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() {
                return Err(bad(format!(
                    "tensor {} has {} values for dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
            w.write_all(&(t.name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(t.name.as_bytes()).map_err(io)?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes()).map_err(io)?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        let next_line = |r: &mut R, line: &mut String| -> Result<()> {
            line.clear();
            let n = r
                .read_line(line)
                .map_err(|_| bad("header is not UTF-8 text"))?;
            if n == 0 {
                return Err(bad("unexpected end of header"));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next_line(r, &mut line)?;
        let version = line
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        loop {
            next_line(r, &mut line)?;
            if line == HEADER_END {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            ck.header.push((k.to_string(), v.to_string()));
        }
        let count = read_u32(r)?;
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated record"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(r)?;
            if rank > MAX_RANK {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(read_u64(r)? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
            let mut bytes = Vec::new();
            r.by_ref()
                .take(n as u64 * 4)
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io("reading checkpoint", e))?;
            if bytes.len() != n * 4 {
                return Err(bad(format!("tensor {name} is truncated")));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.tensors.push(NamedTensor { name, dims, data });
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp)
            .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        drop(w);
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(&mut BufReader::new(file))
            .map_err(|e| match e {
                Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    /// Model parameters plus the run config that produced them.
    pub fn from_model<T: Scalar>(model: &Transformer<T>, config: &RunConfig) -> Self {
        let mut ck = Checkpoint::new();
        let mut config = config.clone();
        config.model = model.config.clone();
        for (k, v) in config.entries() {
            ck.set_header(k, v);
        }
        for (name, m) in model.params.named() {
            ck.push_mat(&name, m);
        }
        ck
    }

    /// Run config from the non-meta header entries.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        for (k, v) in &self.header {
            if !k.starts_with(META_PREFIX) {
                c.set(k, v)?;
            }
        }
        Ok(c)
    }

    pub fn model<T: Scalar>(&self) -> Result<Transformer<T>> {
        let config = self.run_config()?.model;
        let mut params = crate::model::ModelParameters::<T>::zeros(&config);
        for (name, slot) in params.named_mut() {
            let m = self.mat::<T>(&name)?;
            if (m.rows, m.cols) != (slot.rows, slot.cols) {
                return Err(bad(format!(
                    "{name} is {}x{}, config expects {}x{}",
                    m.rows, m.cols, slot.rows, slot.cols
                )));
            }
            *slot = m;
        }
        Transformer::from_parts(config, params)
    }

    pub fn push_optimizer<T: Scalar>(&mut self, opt: &OptimizerState<T>) {
        self.set_meta("optimizer_step", opt.step);
        for (name, (m, v)) in &opt.moments {
            self.push_mat(&format!("optimizer.m.{name}"), m);
            self.push_mat(&format!("optimizer.v.{name}"), v);
        }
    }

    /// Optimizer state, or a fresh one if the file holds none.
    pub fn optimizer<T: Scalar>(&self) -> Result<OptimizerState<T>> {
        let mut opt = OptimizerState::new();
        let Some(step) = self.meta("optimizer_step") else {
            return Ok(opt);
        };
        opt.step = step
            .parse()
            .map_err(|_| bad(format!("bad optimizer step {step:?}")))?;
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix("optimizer.m.") {
                let m = self.mat(&t.name)?;
                let v = self.mat(&format!("optimizer.v.{name}"))?;
                opt.moments.insert(name.to_string(), (m, v));
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_header("layers", 2);
        ck.set_meta("kind", "test");
        ck.insert(NamedTensor {
            name: "a".into(),
            dims: vec![2, 3],
            data: vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 1e30],
        });
        ck.insert(NamedTensor {
            name: "scalar".into(),
            dims: vec![],
            data: vec![7.0],
        });
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, ck);
        assert!(buf.starts_with(b"PMLM-CHECKPOINT 1\n"));
    }

    #[test]
    fn record_layout_is_little_endian() {
        let mut ck = Checkpoint::new();
        ck.insert(NamedTensor {
            name: "w".into(),
            dims: vec![1],
            data: vec![1.0],
        });
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let header = b"PMLM-CHECKPOINT 1\nend_header\n";
        assert_eq!(&buf[..header.len()], header);
        let body = &buf[header.len()..];
        let mut expected = vec![1, 0, 0, 0, 1, 0, 0, 0, b'w', 1, 0, 0, 0];
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(body, &expected[..]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for cut in [5, buf.len() - 3] {
            assert!(Checkpoint::read_from(&mut &buf[..cut]).is_err());
        }
        let v2 = String::from_utf8_lossy(&buf).replacen("CHECKPOINT 1", "CHECKPOINT 2", 1);
        let err = Checkpoint::read_from(&mut v2.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(Checkpoint::read_from(&mut &b"hello\n"[..]).is_err());
    }

    #[test]
    fn model_and_optimizer_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = Transformer::<f32>::new(ModelConfig::tiny(16), 3).unwrap();
        let mut opt = OptimizerState::<f32>::new();
        opt.step = 4;
        for (name, p) in model.params.named() {
            let mut m = p.clone();
            m.scale(0.5);
            opt.moments.insert(name, (m, p.clone()));
        }
        let mut ck = Checkpoint::from_model(&model, &RunConfig::default());
        ck.push_optimizer(&opt);
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let m2 = back.model::<f32>().unwrap();
        assert_eq!(m2.params, model.params);
        assert_eq!(m2.config, model.config);
        assert_eq!(back.optimizer::<f32>().unwrap(), opt);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let model = Transformer::<f32>::new(ModelConfig::tiny(16), 3).unwrap();
        let mut ck = Checkpoint::from_model(&model, &RunConfig::default());
        ck.set_header("hidden_size", 4);
        ck.set_header("ffn_inner_hidden_size", 4);
        let err = ck.model::<f32>().unwrap_err();
        assert!(err.to_string().contains("embeddings.token"), "{err}");
    }
}
