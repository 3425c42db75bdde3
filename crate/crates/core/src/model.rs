//! A scoring view over encoder, code embedding table and item codes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::corpus::{ItemId, SplitDataset};
use crate::error::{Error, Result};
use crate::itemrep::CodeEmbeddingTable;
use crate::quantizer::ItemCodeTable;
use crate::seqencoder::{encode_sequence, EncoderParams};

/// Row-wise L2 normalization. Returns the normalized rows and the original norms.
pub fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut y = x.to_owned();
    for (mut row, &n) in y.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    (y, norms)
}

/// Gradient w.r.t. the raw rows given the gradient w.r.t. the normalized rows:
/// `dx = (dy - y (y . dy)) / |x|`.
pub fn normalize_rows_backward(y: ArrayView2<f64>, norms: ArrayView1<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    for ((mut d, yr), &n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms.iter()) {
        if n > 0.0 {
            let proj = yr.dot(&d);
            d.scaled_add(-proj, &yr);
            d /= n;
        } else {
            d.fill(0.0);
        }
    }
    dx
}

pub fn normalize(x: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let n = x.dot(&x).sqrt();
    if n > 0.0 {
        (&x / n, n)
    } else {
        (x.to_owned(), n)
    }
}

pub fn normalize_backward(y: ArrayView1<f64>, norm: f64, dy: ArrayView1<f64>) -> Array1<f64> {
    if norm == 0.0 {
        return Array1::zeros(dy.len());
    }
    let proj = y.dot(&dy);
    (&dy - &(&y * proj)) / norm
}

/// Scores every catalog item for a context by temperature-scaled cosine
/// similarity between the sequence representation and the item representation.
#[derive(Clone, Debug)]
pub struct Recommender {
    pub encoder: EncoderParams,
    pub tau: f64,
    item_reps: Array2<f64>,
    unit_reps: Array2<f64>,
}

impl Recommender {
    pub fn new(encoder: EncoderParams, table: &CodeEmbeddingTable, codes: &ItemCodeTable, tau: f64) -> Result<Self> {
        let item_reps = table.item_reps(codes)?;
        Self::from_item_reps(encoder, item_reps, tau)
    }

    pub fn from_item_reps(encoder: EncoderParams, item_reps: Array2<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        if item_reps.ncols() != encoder.config.dim {
            return Err(Error::Dimension {
                expected: encoder.config.dim,
                got: item_reps.ncols(),
            });
        }
        let (unit_reps, _) = normalize_rows(item_reps.view());
        Ok(Recommender {
            encoder,
            tau,
            item_reps,
            unit_reps,
        })
    }

    pub fn num_items(&self) -> usize {
        self.item_reps.nrows()
    }

    /// Raw (unnormalized) item representations.
    pub fn item_reps(&self) -> ArrayView2<'_, f64> {
        self.item_reps.view()
    }

    /// Sequence representation of a context; only the most recent
    /// `max_len` items are used.
    pub fn encode_context(&self, context: &[ItemId]) -> Result<Array1<f64>> {
        if context.is_empty() {
            return Err(Error::Data("cannot encode an empty context".into()));
        }
        let context = SplitDataset::truncate(context, self.encoder.config.max_len);
        let mut inputs = Array2::zeros((context.len(), self.encoder.config.dim));
        for (t, &item) in context.iter().enumerate() {
            if item >= self.num_items() {
                return Err(Error::Lookup(format!(
                    "item {item} outside catalog of {} items",
                    self.num_items()
                )));
            }
            inputs.row_mut(t).assign(&self.item_reps.row(item));
        }
        encode_sequence(&self.encoder, inputs.view(), context.len())
    }

    /// Scores of all items for `context`.
    pub fn score(&self, context: &[ItemId]) -> Result<Array1<f64>> {
        let s = self.encode_context(context)?;
        let (s, _) = normalize(s.view());
        Ok(self.unit_reps.dot(&s) / self.tau)
    }
}
