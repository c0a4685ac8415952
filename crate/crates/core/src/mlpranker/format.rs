//! Binary model file, all values little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `EXMPLMLP` | 8 bytes |
//! | format version | u32 (= 1) |
//! | widths `[in, h1, h2, h3, out]` | 5 × u32 |
//! | batch-norm eps, momentum | 2 × f64 |
//! | input mean, input std | 2 × `in` × f64 |
//! | per layer: weight (row-major, one row per output unit), bias | f64 |
//! | per hidden layer: gamma, beta, running mean, running var | 4 × width × f64 |
//! | seed, epochs | 2 × u64 |
//! | learning rate | f64 |
//! | batch size | u64 |

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::model::{BatchNorm, Linear, MlpModel, TrainMeta};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EXMPLMLP";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::ModelFormat(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec(&mut self, n: usize) -> Result<Array1<f64>> {
        (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>().map(Array1::from)
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let flat = self.vec(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), flat.to_vec()).expect("shape matches length"))
    }
}

pub fn to_bytes(model: &MlpModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    for width in model.widths() {
        w.u32(width as u32);
    }
    w.f64s(&[model.bn_eps, model.bn_momentum]);
    w.f64s(&model.input_mean);
    w.f64s(&model.input_std);
    for layer in &model.layers {
        w.f64s(layer.weight.iter());
        w.f64s(&layer.bias);
    }
    for norm in &model.norms {
        w.f64s(&norm.gamma);
        w.f64s(&norm.beta);
        w.f64s(&norm.running_mean);
        w.f64s(&norm.running_var);
    }
    w.u64(model.meta.seed);
    w.u64(model.meta.epochs);
    w.f64s(&[model.meta.learning_rate]);
    w.u64(model.meta.batch_size);
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<MlpModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::ModelFormat("bad magic; not a model file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported format version {version}")));
    }
    let mut widths = [0usize; 5];
    for w in &mut widths {
        *w = r.u32()? as usize;
    }
    if widths.contains(&0) || widths[4] != 1 {
        return Err(Error::ModelFormat(format!("invalid widths {widths:?}")));
    }
    let expected: usize = 8 + 4 + 20 + 16 + 8 * (2 * widths[0])
        + widths.windows(2).map(|p| 8 * (p[0] * p[1] + p[1])).sum::<usize>()
        + widths[1..4].iter().map(|w| 8 * 4 * w).sum::<usize>()
        + 32;
    if buf.len() != expected {
        return Err(Error::ModelFormat(format!("file is {} bytes, widths imply {expected}", buf.len())));
    }
    let bn_eps = r.f64()?;
    let bn_momentum = r.f64()?;
    let input_mean = r.vec(widths[0])?;
    let input_std = r.vec(widths[0])?;
    let mut layers = Vec::with_capacity(4);
    for p in widths.windows(2) {
        let weight = r.matrix(p[1], p[0])?;
        let bias = r.vec(p[1])?;
        layers.push(Linear { weight, bias });
    }
    let mut norms = Vec::with_capacity(3);
    for &w in &widths[1..4] {
        norms.push(BatchNorm {
            gamma: r.vec(w)?,
            beta: r.vec(w)?,
            running_mean: r.vec(w)?,
            running_var: r.vec(w)?,
        });
    }
    let meta = TrainMeta {
        seed: r.u64()?,
        epochs: r.u64()?,
        learning_rate: r.f64()?,
        batch_size: r.u64()?,
    };
    let model = MlpModel {
        input_mean,
        input_std,
        layers,
        norms,
        bn_eps,
        bn_momentum,
        meta,
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
