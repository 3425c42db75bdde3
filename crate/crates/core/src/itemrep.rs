//! Code embedding table and pooled item representations.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quantizer::{ItemCode, ItemCodeTable};
use crate::seeded_rng;

pub const INIT_STD: f64 = 0.02;

/// `D` matrices of shape `M x d_V`; row `j` of matrix `k` is the embedding of
/// index `j` in sub-space `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeEmbeddingTable {
    pub weights: Array3<f64>,
}

impl CodeEmbeddingTable {
    pub fn init(num_subspaces: usize, num_centroids: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_subspaces == 0 || num_centroids == 0 || dim == 0 {
            return Err(Error::Config(
                "code embedding table dimensions must be positive".into(),
            ));
        }
        let mut rng = seeded_rng(seed);
        let weights = Array3::from_shape_simple_fn((num_subspaces, num_centroids, dim), || {
            INIT_STD * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(CodeEmbeddingTable { weights })
    }

    pub fn from_weights(weights: Array3<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("code embedding table has non-finite entries".into()));
        }
        Ok(CodeEmbeddingTable { weights })
    }

    pub fn num_subspaces(&self) -> usize {
        self.weights.dim().0
    }

    pub fn num_centroids(&self) -> usize {
        self.weights.dim().1
    }

    pub fn dim(&self) -> usize {
        self.weights.dim().2
    }

    fn check_code(&self, code: &[usize]) -> Result<()> {
        if code.len() != self.num_subspaces() {
            return Err(Error::Lookup(format!(
                "code has {} indices, table has {} sub-spaces",
                code.len(),
                self.num_subspaces()
            )));
        }
        if let Some(&bad) = code.iter().find(|&&c| c >= self.num_centroids()) {
            return Err(Error::Lookup(format!(
                "index {bad} out of range for M = {}",
                self.num_centroids()
            )));
        }
        Ok(())
    }

    /// Mean of the `D` rows selected by `code`.
    pub fn item_rep(&self, code: &ItemCode) -> Result<Array1<f64>> {
        self.check_code(&code.0)?;
        Ok(self.pool(&code.0))
    }

    pub(crate) fn pool(&self, code: &[usize]) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim());
        for (k, &c) in code.iter().enumerate() {
            v += &self.weights.slice(s![k, c, ..]);
        }
        v / code.len() as f64
    }

    /// Representations of every item in `codes`, one row each.
    pub fn item_reps(&self, codes: &ItemCodeTable) -> Result<Array2<f64>> {
        if codes.num_subspaces() != self.num_subspaces() || codes.num_centroids() != self.num_centroids() {
            return Err(Error::Config(format!(
                "code table (D={}, M={}) does not match embedding table (D={}, M={})",
                codes.num_subspaces(),
                codes.num_centroids(),
                self.num_subspaces(),
                self.num_centroids()
            )));
        }
        let mut out = Array2::zeros((codes.num_items(), self.dim()));
        for (i, row) in codes.rows().enumerate() {
            out.row_mut(i).assign(&self.pool(row));
        }
        Ok(out)
    }

    /// The table with each sub-space matrix left-multiplied by its alignment.
    pub fn aligned(&self, alignment: &[Array2<f64>]) -> Result<CodeEmbeddingTable> {
        self.check_alignment(alignment)?;
        let mut weights = Array3::zeros(self.weights.dim());
        for (k, pi) in alignment.iter().enumerate() {
            weights
                .index_axis_mut(Axis(0), k)
                .assign(&pi.dot(&self.weights.index_axis(Axis(0), k)));
        }
        Ok(CodeEmbeddingTable { weights })
    }

    fn check_alignment(&self, alignment: &[Array2<f64>]) -> Result<()> {
        let m = self.num_centroids();
        if alignment.len() != self.num_subspaces() || alignment.iter().any(|p| p.dim() != (m, m)) {
            return Err(Error::Config(format!(
                "alignment must be {} matrices of {m}x{m}",
                self.num_subspaces()
            )));
        }
        Ok(())
    }

    /// `(1/D) sum_k (Pi_k E_k)[c_k]` computed as a weighted combination of the
    /// rows of `E_k`, without forming `Pi_k E_k`.
    pub fn aligned_item_rep(&self, alignment: &[Array2<f64>], code: &ItemCode) -> Result<Array1<f64>> {
        self.check_code(&code.0)?;
        self.check_alignment(alignment)?;
        let mut v = Array1::zeros(self.dim());
        for (k, (&c, pi)) in code.0.iter().zip(alignment).enumerate() {
            let weights = pi.row(c);
            let e: ArrayView2<f64> = self.weights.index_axis(Axis(0), k);
            v += &weights.dot(&e);
        }
        Ok(v / code.0.len() as f64)
    }
}

/// Adds `g / D` to every table row selected by `code`: the gradient of the
/// mean pooling.
pub(crate) fn scatter_code_grad(grad: &mut Array3<f64>, code: &[usize], g: ArrayView1<f64>) {
    let scale = 1.0 / code.len() as f64;
    for (k, &c) in code.iter().enumerate() {
        grad.slice_mut(s![k, c, ..]).scaled_add(scale, &g);
    }
}

/// Resamples each index uniformly from `0..m` with probability `rho`.
/// The resampled index may coincide with the original.
pub fn semi_synthetic<R: Rng>(code: &ItemCode, rho: f64, m: usize, rng: &mut R) -> Result<ItemCode> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho = {rho} is outside [0, 1]")));
    }
    if m == 0 {
        return Err(Error::Config("M must be positive".into()));
    }
    Ok(ItemCode(semi_synthetic_indices(&code.0, rho, m, rng)))
}

pub(crate) fn semi_synthetic_indices<R: Rng>(code: &[usize], rho: f64, m: usize, rng: &mut R) -> Vec<usize> {
    code.iter()
        .map(|&c| {
            if rng.gen::<f64>() < rho {
                rng.gen_range(0..m)
            } else {
                c
            }
        })
        .collect()
}

pub fn semi_synthetic_rep<R: Rng>(
    table: &CodeEmbeddingTable,
    code: &ItemCode,
    rho: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let corrupted = semi_synthetic(code, rho, table.num_centroids(), rng)?;
    table.item_rep(&corrupted)
}
