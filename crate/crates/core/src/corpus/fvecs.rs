use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-item text embeddings, stored row-major as `f32` (the on-disk precision).
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl TextEmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("embedding dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite component in row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(TextEmbeddingMatrix { dim, data })
    }

    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        let data = a.iter().map(|&v| v as f32).collect();
        Self::new(a.ncols(), data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows(), self.dim), |(i, j)| {
            self.data[i * self.dim + j] as f64
        })
    }

    pub fn select_rows(&self, rows: impl IntoIterator<Item = usize>) -> Self {
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(self.row(r));
        }
        TextEmbeddingMatrix {
            dim: self.dim,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn concat(&self, other: &TextEmbeddingMatrix) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(TextEmbeddingMatrix {
            dim: self.dim,
            data,
        })
    }
}

/// Reads an fvecs file: each record is a little-endian `i32` dimension
/// followed by that many little-endian `f32` components.
pub fn read_fvecs(path: &Path) -> Result<TextEmbeddingMatrix> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_fvecs(&bytes)
}

pub(crate) fn parse_fvecs(bytes: &[u8]) -> Result<TextEmbeddingMatrix> {
    let mut pos = 0;
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut index = 0;
    while pos < bytes.len() {
        let header = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Format(format!("truncated header for vector {index}")))?;
        let d = i32::from_le_bytes(header.try_into().unwrap());
        if d <= 0 {
            return Err(Error::Format(format!("vector {index} has dimension {d}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Format(format!(
                    "vector {index} has dimension {d}, expected {expected}"
                )))
            }
            _ => {}
        }
        pos += 4;
        let body = bytes
            .get(pos..pos + 4 * d)
            .ok_or_else(|| Error::Format(format!("truncated body for vector {index}")))?;
        data.extend(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        pos += 4 * d;
        index += 1;
    }
    let dim = dim.ok_or_else(|| Error::Format("file contains no vectors".into()))?;
    TextEmbeddingMatrix::new(dim, data)
}

pub fn write_fvecs(path: &Path, m: &TextEmbeddingMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dim = (m.dim as i32).to_le_bytes();
    for i in 0..m.rows() {
        w.write_all(&dim)?;
        for v in m.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
