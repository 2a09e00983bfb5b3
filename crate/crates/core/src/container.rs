//! The `LELD` tensor container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "LELD" | u16 version = 1 | u8 dtype (1 = f32, 2 = f64) | u8 rank
//! | rank × u64 dims | payload | u64 metadata length | UTF-8 metadata
//! ```
//!
//! Dataset files carry a `[N × C × T]` f32 tensor; the metadata block holds
//! `sampling_rate` and `n_classes` header lines followed by one
//! `subject<TAB>trial<TAB>label` record per window.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2};

use crate::data::{Recording, TrialSet};
use crate::error::{LelError, Result};

pub const MAGIC: &[u8; 4] = b"LELD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            _ => Err(LelError::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub metadata: String,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(LelError::Format(format!(
                "shape {:?} holds {n} elements, data has {}",
                self.shape,
                self.data.len()
            )));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(LelError::Format("rank exceeds 255".into()));
        }
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + n * self.dtype.width() + self.metadata.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        Ok(out)
    }

    /// Decodes one container from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(LelError::Format(format!("bad magic {magic:?}, expected \"LELD\"")));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(LelError::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let dtype = DType::from_code(cur.take(1)?[0])?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| LelError::Format("dimension product overflows".into()))?;
        let payload = cur.take(
            n.checked_mul(dtype.width())
                .ok_or_else(|| LelError::Format("payload size overflows".into()))?,
        )?;
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let meta_len = cur.u64()? as usize;
        let metadata = String::from_utf8(cur.take(meta_len)?.to_vec())
            .map_err(|e| LelError::Format(format!("metadata is not UTF-8: {e}")))?;
        Ok((
            Self {
                dtype,
                shape,
                data,
                metadata,
            },
            cur.pos,
        ))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let bytes = self
            .encode()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        w.write_all(&bytes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| LelError::Format(format!("read failed: {e}")))?;
        let (c, used) = Self::decode(&bytes)?;
        if used != bytes.len() {
            return Err(LelError::Format(format!(
                "{} trailing bytes after container",
                bytes.len() - used
            )));
        }
        Ok(c)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LelError::Format(format!("truncated container at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn check_field(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(LelError::Format(format!(
            "identifier {s:?} is empty or contains tab/newline"
        )));
    }
    Ok(())
}

pub fn dataset_to_container(set: &TrialSet) -> Result<Container> {
    set.validate()?;
    let (c, t) = (set.n_channels(), set.n_samples());
    let mut data = Vec::with_capacity(set.len() * c * t);
    let mut metadata = format!("sampling_rate\t{}\nn_classes\t{}\n", set.sampling_rate(), set.n_classes);
    for r in &set.recordings {
        check_field(&r.subject_id)?;
        check_field(&r.trial_id)?;
        data.extend(r.samples.iter());
        metadata.push_str(&format!("{}\t{}\t{}\n", r.subject_id, r.trial_id, r.label));
    }
    Ok(Container {
        dtype: DType::F32,
        shape: vec![set.len(), c, t],
        data,
        metadata,
    })
}

pub fn dataset_from_container(cont: &Container) -> Result<TrialSet> {
    if cont.shape.len() != 3 {
        return Err(LelError::Format(format!(
            "dataset tensor must be rank 3, got {:?}",
            cont.shape
        )));
    }
    let (n, c, t) = (cont.shape[0], cont.shape[1], cont.shape[2]);
    let mut sampling_rate = None;
    let mut n_classes = None;
    let mut records = Vec::new();
    for line in cont.metadata.lines().filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["sampling_rate", v] => {
                sampling_rate = Some(
                    v.parse::<f64>()
                        .map_err(|e| LelError::Format(format!("sampling_rate: {e}")))?,
                )
            }
            ["n_classes", v] => {
                n_classes = Some(
                    v.parse::<usize>()
                        .map_err(|e| LelError::Format(format!("n_classes: {e}")))?,
                )
            }
            [subject, trial, label] => {
                let label = label
                    .parse::<usize>()
                    .map_err(|e| LelError::Format(format!("label in {line:?}: {e}")))?;
                records.push((subject.to_string(), trial.to_string(), label));
            }
            _ => return Err(LelError::Format(format!("unrecognized metadata line {line:?}"))),
        }
    }
    let sampling_rate = sampling_rate.ok_or_else(|| LelError::Format("missing sampling_rate".into()))?;
    let n_classes = n_classes.ok_or_else(|| LelError::Format("missing n_classes".into()))?;
    if records.len() != n {
        return Err(LelError::Format(format!(
            "{} metadata records for {n} windows",
            records.len()
        )));
    }
    let all =
        ndarray::Array3::from_shape_vec((n, c, t), cont.data.clone()).map_err(|e| LelError::Format(e.to_string()))?;
    let recordings = records
        .into_iter()
        .enumerate()
        .map(|(i, (subject_id, trial_id, label))| Recording {
            samples: all.slice(s![i, .., ..]).to_owned(),
            sampling_rate,
            subject_id,
            trial_id,
            label,
        })
        .collect();
    let set = TrialSet { recordings, n_classes };
    set.validate()?;
    Ok(set)
}

pub fn save_dataset(path: &Path, set: &TrialSet) -> Result<()> {
    let bytes = dataset_to_container(set)?.encode()?;
    fs::write(path, bytes).map_err(|e| LelError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<TrialSet> {
    let bytes = fs::read(path).map_err(|e| LelError::io(path, e))?;
    let (cont, used) = Container::decode(&bytes)?;
    if used != bytes.len() {
        return Err(LelError::Format(format!(
            "{} trailing bytes in {}",
            bytes.len() - used,
            path.display()
        )));
    }
    dataset_from_container(&cont)
}

/// A single `[C × T]` recording round-tripped through f32 storage.
pub fn quantize_f32(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            dtype: DType::F64,
            shape: vec![2, 3],
            data: vec![1.0, -2.5, 3.25, 0.0, 1e-300, f64::MAX],
            metadata: "name\tw\n".into(),
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let b = sample().encode().unwrap();
        assert_eq!(&b[0..4], b"LELD");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 2);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &3u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        let meta_at = 24 + 6 * 8;
        assert_eq!(&b[meta_at..meta_at + 8], &7u64.to_le_bytes());
        assert_eq!(&b[meta_at + 8..], b"name\tw\n");
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut b = sample().encode().unwrap();
        b[0] = b'X';
        assert!(Container::decode(&b).unwrap_err().to_string().contains("magic"));
        let mut b = sample().encode().unwrap();
        b[4] = 2;
        assert!(Container::decode(&b).unwrap_err().to_string().contains("version"));
        let b = sample().encode().unwrap();
        assert!(Container::decode(&b[..b.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn f32_payload_rounds() {
        let c = Container {
            dtype: DType::F32,
            shape: vec![1],
            data: vec![0.1],
            metadata: String::new(),
        };
        let (d, _) = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(d.data[0], 0.1f32 as f64);
    }
}
