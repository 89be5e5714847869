//! Synthetic datasets and an IDX file reader/writer.
//!
//! * `blobs2d`: 8x8x3 images holding one Gaussian blob (width 1.5) centred
//!   uniformly in `[1.5, 6.5]^2`. The per-channel amplitude encodes the class:
//!   class 0 uses `(1.0, 0.2, 0.5)`, class 1 uses `(0.2, 1.0, 0.5)`. Every pixel
//!   gets i.i.d. `N(0, noise^2)` added.
//! * `waves1d`: 32-sample single-channel signals `sin(2 pi f x / 32 + phi)`
//!   with `f = 2` for class 0 and `f = 5` for class 1, `phi` uniform in
//!   `[0, 2 pi)`, plus `N(0, noise^2)` noise.
//!
//! Labels alternate `0, 1, 0, 1, ...` so both classes have equal counts
//! (differing by at most one).

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::ByteReader;
use crate::error::{NesError, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(|t| t.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Blobs2d,
    Waves1d,
}

pub const BLOB_AMPLITUDES: [[f64; 3]; 2] = [[1.0, 0.2, 0.5], [0.2, 1.0, 0.5]];
pub const BLOB_WIDTH: f64 = 1.5;
pub const WAVE_FREQUENCIES: [f64; 2] = [2.0, 5.0];

pub fn generate_dataset(kind: SyntheticKind, seed: u64, n: usize, noise: f64) -> Result<Dataset> {
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(NesError::config(format!("noise {noise} must be finite and >= 0")));
    }
    let mut rng = Rng::new(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = match kind {
            SyntheticKind::Blobs2d => {
                let cx = rng.uniform_range(1.5, 6.5);
                let cy = rng.uniform_range(1.5, 6.5);
                let amp = BLOB_AMPLITUDES[label];
                let mut t = Tensor::from_fn(&[8, 8, 3], |ix| {
                    let d2 = (ix[0] as f64 - cx).powi(2) + (ix[1] as f64 - cy).powi(2);
                    amp[ix[2]] * (-d2 / (2.0 * BLOB_WIDTH * BLOB_WIDTH)).exp()
                });
                t.data_mut().iter_mut().for_each(|v| *v += noise * rng.normal());
                t
            }
            SyntheticKind::Waves1d => {
                let phase = rng.uniform_range(0.0, 2.0 * PI);
                let f = WAVE_FREQUENCIES[label];
                let mut t = Tensor::from_fn(&[32, 1], |ix| (2.0 * PI * f * ix[0] as f64 / 32.0 + phase).sin());
                t.data_mut().iter_mut().for_each(|v| *v += noise * rng.normal());
                t
            }
        };
        inputs.push(t);
        labels.push(label);
    }
    Ok(Dataset {
        inputs,
        labels,
        classes: 2,
    })
}

/// An IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_U8: u8 = 0x08;

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let mut r = ByteReader::new(bytes);
    r.expect(&[0, 0], "idx magic")?;
    let at = r.position();
    let ty = r.u8("idx type")?;
    if ty != IDX_U8 {
        return Err(NesError::parse(at, format!("unsupported idx element type 0x{ty:02x}")));
    }
    let ndim = r.u8("idx rank")? as usize;
    if ndim == 0 {
        return Err(NesError::parse(3, "idx rank must be >= 1"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r.take(4, "idx dimension")?;
        dims.push(u32::from_be_bytes(d.try_into().unwrap()) as usize);
    }
    let at = r.position();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| NesError::parse(at, "idx element count overflows"))?;
    let data = r.take(n, "idx data")?.to_vec();
    r.finish()?;
    Ok(IdxArray { dims, data })
}

pub fn write_idx(a: &IdxArray) -> Result<Vec<u8>> {
    let n: usize = a.dims.iter().product();
    if n != a.data.len() || a.dims.is_empty() || a.dims.len() > 255 {
        return Err(NesError::config("idx dims do not match data"));
    }
    let mut out = vec![0, 0, IDX_U8, a.dims.len() as u8];
    for &d in &a.dims {
        let d = u32::try_from(d).map_err(|_| NesError::config("idx dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    Ok(out)
}

/// Images `[N, rows, cols]` become `[rows, cols, 1]` tensors scaled by
/// `1/255`; labels `[N]` are class ids.
pub fn idx_dataset(images: &IdxArray, labels: &IdxArray) -> Result<Dataset> {
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(NesError::DimensionMismatch {
            op: "idx images vs labels",
            left: images.dims.clone(),
            right: labels.dims.clone(),
        });
    }
    let (rows, cols) = (images.dims[1], images.dims[2]);
    let per = rows * cols;
    let inputs = images
        .data
        .chunks(per.max(1))
        .take(images.dims[0])
        .map(|c| Tensor::new(vec![rows, cols, 1], c.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        inputs,
        labels,
        classes,
    })
}

pub fn ingest_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let im = parse_idx(&std::fs::read(images)?)?;
    let lb = parse_idx(&std::fs::read(labels)?)?;
    idx_dataset(&im, &lb)
}
