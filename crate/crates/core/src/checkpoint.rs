//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"SFAC"
//! version u32
//! count   u32
//! count × record:
//!     name_len u32, name [u8; name_len] (UTF-8)
//!     rank     u32, extents [u64; rank]
//!     payload  [f32; Π extents], row-major
//! ```
//!
//! Model parameters are stored under their own names. Batch norm running
//! statistics use `<layer>.bn.running_mean`, `<layer>.bn.running_var` and
//! `<layer>.bn.batches_tracked`. Optimizer state, when present, uses
//! `optim.step`, `optim.m.<param>` and `optim.v.<param>`. Records under
//! `train.` belong to the training loop and are ignored by model loads.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use crate::training::AdamState;

pub const MAGIC: &[u8; 4] = b"SFAC";
pub const VERSION: u32 = 1;

const OPTIM_PREFIX: &str = "optim.";
/// Prefix for training-loop bookkeeping records.
pub const TRAIN_PREFIX: &str = "train.";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0, path };
        if rd.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, not an SFAC checkpoint"));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| Error::format(path, "record name is not UTF-8"))?
                .to_owned();
            let rank = rd.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(rd.u64()?).map_err(|_| {
                    Error::format(path, format!("extent of `{name}` overflows"))
                })?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::format(path, format!("`{name}` is too large")))?;
            let raw = rd.take(numel.checked_mul(4).ok_or_else(|| {
                Error::format(path, format!("`{name}` is too large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            records.push(Record { name, shape, data });
        }
        if rd.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(Self { records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn stat_names(layer: &str) -> [String; 3] {
    [
        format!("{layer}.running_mean"),
        format!("{layer}.running_var"),
        format!("{layer}.batches_tracked"),
    ]
}

/// Snapshot of model parameters, running statistics and optional
/// optimizer state.
pub fn to_checkpoint<T: Scalar>(model: &Model<T>, optimizer: Option<&AdamState<T>>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for p in model.parameters() {
        ck.push(p.name.clone(), &p.value);
    }
    for s in model.batch_norm_stats() {
        let [mean, var, tracked] = stat_names(&s.name);
        let c = s.stats.mean.len();
        ck.push(mean, &Tensor::new([c], s.stats.mean.clone()).expect("shape"));
        ck.push(var, &Tensor::new([c], s.stats.var.clone()).expect("shape"));
        ck.push(
            tracked,
            &Tensor::<T>::new([1], vec![T::of(s.stats.batches_tracked as f64)]).expect("shape"),
        );
    }
    if let Some(opt) = optimizer {
        ck.push(
            "optim.step",
            &Tensor::<T>::new([1], vec![T::of(opt.step as f64)]).expect("shape"),
        );
        for (p, m) in model.parameters().iter().zip(&opt.m) {
            ck.push(format!("optim.m.{}", p.name), m);
        }
        for (p, v) in model.parameters().iter().zip(&opt.v) {
            ck.push(format!("optim.v.{}", p.name), v);
        }
    }
    ck
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    optimizer: Option<&AdamState<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    to_checkpoint(model, optimizer).write(path)
}

/// Which records a load applied.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
    pub missing: Vec<String>,
}

fn to_tensor<T: Scalar>(r: &Record) -> Tensor<T> {
    Tensor::new(
        r.shape.clone(),
        r.data.iter().map(|&v| T::of(v as f64)).collect(),
    )
    .expect("record payload matches its shape")
}

/// Applies `ck` to `model`. Everything is validated before the model is
/// touched, so on error the model is unchanged.
///
/// In strict mode every parameter and statistic must be present with the
/// right shape and no unknown model records may appear. Otherwise the
/// intersection by name and shape is loaded and the rest reported.
pub fn apply_checkpoint<T: Scalar>(
    ck: &Checkpoint,
    model: &mut Model<T>,
    strict: bool,
) -> Result<LoadReport> {
    let by_name: HashMap<&str, &Record> = ck.records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut expected: Vec<(String, Vec<usize>)> = model
        .parameters()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for s in model.batch_norm_stats() {
        let c = s.stats.mean.len();
        let [mean, var, tracked] = stat_names(&s.name);
        expected.push((mean, vec![c]));
        expected.push((var, vec![c]));
        expected.push((tracked, vec![1]));
    }

    let mut report = LoadReport::default();
    let mut apply = HashMap::new();
    for (name, shape) in &expected {
        match by_name.get(name.as_str()) {
            Some(r) if &r.shape == shape => {
                apply.insert(name.clone(), *r);
                report.loaded.push(name.clone());
            }
            Some(r) => {
                if strict {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: r.shape.clone(),
                    });
                }
                log::warn!(
                    "skipping `{name}`: checkpoint shape {:?}, model {:?}",
                    r.shape,
                    shape
                );
                report.skipped.push(name.clone());
            }
            None => {
                if strict {
                    return Err(Error::CheckpointMissing(name.clone()));
                }
                report.missing.push(name.clone());
            }
        }
    }
    let known: std::collections::HashSet<&str> =
        expected.iter().map(|(n, _)| n.as_str()).collect();
    for r in &ck.records {
        if !known.contains(r.name.as_str()) && !r.name.starts_with(OPTIM_PREFIX)
            && !r.name.starts_with(TRAIN_PREFIX)
        {
            if strict {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint record `{}` does not belong to this model",
                    r.name
                )));
            }
            report.skipped.push(r.name.clone());
        }
    }

    for p in model.parameters_mut() {
        if let Some(r) = apply.get(&p.name) {
            p.value = to_tensor(r);
        }
    }
    for s in model.batch_norm_stats_mut() {
        let [mean, var, tracked] = stat_names(&s.name);
        if let Some(r) = apply.get(&mean) {
            s.stats.mean = to_tensor::<T>(r).into_data();
        }
        if let Some(r) = apply.get(&var) {
            s.stats.var = to_tensor::<T>(r).into_data();
        }
        if let Some(r) = apply.get(&tracked) {
            s.stats.batches_tracked = r.data[0] as u64;
        }
    }
    Ok(report)
}

/// Rebuilds optimizer state for `model` from `ck`, if the checkpoint has
/// a complete one.
pub fn optimizer_state<T: Scalar>(ck: &Checkpoint, model: &Model<T>) -> Result<Option<AdamState<T>>> {
    let Some(step) = ck.get("optim.step") else {
        return Ok(None);
    };
    let mut state = AdamState::new(model.parameters());
    state.step = step.data.first().copied().unwrap_or(0.0) as u64;
    for (i, p) in model.parameters().iter().enumerate() {
        for (kind, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let name = format!("optim.{kind}.{}", p.name);
            let r = ck
                .get(&name)
                .ok_or_else(|| Error::CheckpointMissing(name.clone()))?;
            if r.shape != p.value.shape() {
                return Err(Error::CheckpointShape {
                    name,
                    expected: p.value.shape().to_vec(),
                    found: r.shape.clone(),
                });
            }
            *slot = to_tensor(r);
        }
    }
    Ok(Some(state))
}

/// Reads `path` and loads it into `model`, returning optimizer state when
/// the file carries one.
pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &mut Model<T>,
    strict: bool,
) -> Result<(LoadReport, Option<AdamState<T>>)> {
    let ck = Checkpoint::read(path)?;
    let optim = optimizer_state(&ck, model)?;
    let report = apply_checkpoint(&ck, model, strict)?;
    Ok((report, optim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let mut ck = Checkpoint::default();
        ck.push("a", &Tensor::<f32>::new([2], vec![1.0, -2.0]).unwrap());
        let b = ck.to_bytes();
        let mut want = Vec::new();
        want.extend_from_slice(b"SFAC");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'a');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(Checkpoint::from_bytes(&b, Path::new("x")).unwrap(), ck);
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let mut ck = Checkpoint::default();
        ck.push("w", &Tensor::<f32>::ones([3, 2]));
        let b = ck.to_bytes();
        for cut in [0, 3, 10, b.len() - 1] {
            assert!(Checkpoint::from_bytes(&b[..cut], Path::new("x")).is_err());
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(&bad, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("x")).is_err());
    }
}
