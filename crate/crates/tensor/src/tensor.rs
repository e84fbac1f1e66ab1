use std::io::{Read, Write};

use crate::error::{Result, TensorError};

pub const NTTN_MAGIC: &[u8; 4] = b"NTTN";
pub const NTTN_VERSION: u32 = 1;

/// Dense row-major array of `f64` values.
///
/// A rank-0 tensor (empty shape) holds exactly one value and is what the
/// reductions return.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| TensorError::ShapeMismatch {
                op: "slice_outer",
                detail: "rank-0 tensor".into(),
            })?;
        if start > end || end > outer {
            return Err(TensorError::ShapeMismatch {
                op: "slice_outer",
                detail: format!("range {start}..{end} outside leading dim {outer}"),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Tensor> {
        let outer = self.shape.first().copied().unwrap_or(0);
        let inner: usize = self.shape.iter().skip(1).product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= outer {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_outer",
                    detail: format!("row {r} outside leading dim {outer}"),
                });
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Writes the tensor in NTTN layout: magic, version, rank and dims as
    /// little-endian `u32`, then the values as little-endian `f32`.
    pub fn write_nttn<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NTTN_MAGIC)?;
        w.write_all(&NTTN_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_nttn<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != NTTN_MAGIC {
            return Err(TensorError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32_le(&mut r)?;
        if version != NTTN_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let rank = read_u32_le(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32_le(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                TensorError::Format(format!("truncated payload, expected {} bytes", n * 4))
            } else {
                TensorError::Io(e)
            }
        })?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor { shape, data })
    }
}

fn read_u32_le<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
