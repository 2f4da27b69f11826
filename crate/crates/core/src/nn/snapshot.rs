//! Frozen parameter copies and their `RSNP` binary encoding.
//!
//! Layout (all integers and values little-endian):
//!
//! ```text
//! "RSNP" | version u32 | step u64 | origin u8 | count u32
//! count × ( name_len u16 | name utf-8 | rank u8 | dims u32 × rank | f64 × Π dims )
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{check_layers, eager_forward, param_layout, NnError, Param, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RSNP";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Where a snapshot's values came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotOrigin {
    /// Independent random initialization, used before the first refresh.
    RandomInit,
    /// Copied from the model being trained.
    Trained,
}

impl SnapshotOrigin {
    fn code(self) -> u8 {
        match self {
            Self::RandomInit => 0,
            Self::Trained => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::RandomInit),
            1 => Ok(Self::Trained),
            other => Err(NnError::Format(format!("unknown origin code {other}"))),
        }
    }
}

/// Immutable copy of every parameter at one training step.
///
/// Cloning shares the underlying values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot<S> {
    step: u64,
    origin: SnapshotOrigin,
    entries: Arc<[(String, Tensor<S>)]>,
}

impl<S: Scalar> ParamSnapshot<S> {
    pub(crate) fn from_params(params: &[Param<S>], step: u64, origin: SnapshotOrigin) -> Self {
        let entries: Vec<_> = params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.detached()))
            .collect();
        Self {
            step,
            origin,
            entries: entries.into(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn origin(&self) -> SnapshotOrigin {
        self.origin
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Verifies names and shapes against the MLP layout for `layer_sizes`.
    pub fn check_layout(&self, layer_sizes: &[usize]) -> Result<()> {
        check_layers(layer_sizes)?;
        let layout = param_layout(layer_sizes);
        if layout.len() != self.entries.len() {
            return Err(NnError::SnapshotMismatch(format!(
                "{} entries, expected {}",
                self.entries.len(),
                layout.len()
            )));
        }
        for ((name, shape), (have_name, t)) in layout.iter().zip(self.entries.iter()) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(NnError::SnapshotMismatch(format!(
                    "expected {name}{shape:?}, found {have_name}{:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u8(self.origin.code())?;
        w.write_u32::<LittleEndian>(len_u32(self.entries.len())?)?;
        for (name, t) in self.entries.iter() {
            let bytes = name.as_bytes();
            let name_len = u16::try_from(bytes.len())
                .map_err(|_| NnError::Format(format!("name `{name}` too long")))?;
            w.write_u16::<LittleEndian>(name_len)?;
            w.write_all(bytes)?;
            let rank = u8::try_from(t.rank()).map_err(|_| NnError::Format("rank above 255".into()))?;
            w.write_u8(rank)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(len_u32(d)?)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v.to_f64_lossy())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(NnError::Format(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != SNAPSHOT_VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let step = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let origin = SnapshotOrigin::from_code(r.read_u8().map_err(truncated)?)?;
        let count = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut entries = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>().map_err(truncated)?;
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|e| NnError::Format(e.to_string()))?;
            let rank = r.read_u8().map_err(truncated)?;
            let dims = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize).map_err(truncated))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let values = (0..n)
                .map(|_| r.read_f64::<LittleEndian>().map(S::of).map_err(truncated))
                .collect::<Result<Vec<_>>>()?;
            entries.push((name, Tensor::new(dims, values)?));
        }
        let mut names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(NnError::Format("duplicate entry names".into()));
        }
        Ok(Self {
            step,
            origin,
            entries: entries.into(),
        })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| NnError::Format(format!("{n} does not fit in u32")))
}

fn truncated(e: std::io::Error) -> NnError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NnError::Format("truncated snapshot".into())
    } else {
        NnError::Io(e)
    }
}

/// Forward pass with snapshot values and no gradient recording.
///
/// The result is a plain tensor: inserting it on a tape yields a constant,
/// so nothing flows back into the snapshot.
pub fn forward_frozen<S: Scalar>(
    snapshot: &ParamSnapshot<S>,
    layer_sizes: &[usize],
    batch: &Tensor<S>,
) -> Result<Tensor<S>> {
    snapshot.check_layout(layer_sizes)?;
    let tensors: Vec<&Tensor<S>> = snapshot.entries().iter().map(|(_, t)| t).collect();
    eager_forward(layer_sizes, &tensors, batch)
}
