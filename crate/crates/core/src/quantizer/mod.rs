//! Text embeddings to discrete item codes.

mod kmeans;
mod opq;
mod stats;

pub use kmeans::{kmeans, lloyd, KMeansResult};
pub use opq::{train_opq, train_opq_rows, OpqCodebook, OpqParams, OpqTraining, DEFAULT_OUTER_ITERS};
pub use stats::{code_stats, CodeStats};

use crate::error::{Error, Result};

/// Zero-based per-sub-space centroid indices of one item.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ItemCode(pub Vec<usize>);

impl ItemCode {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Codes of a whole catalog, `num_items x D`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemCodeTable {
    num_subspaces: usize,
    num_centroids: usize,
    codes: Vec<usize>,
}

impl ItemCodeTable {
    pub fn new(num_subspaces: usize, num_centroids: usize, codes: Vec<usize>) -> Result<Self> {
        if num_subspaces == 0 || codes.len() % num_subspaces != 0 {
            return Err(Error::Format(format!(
                "{} code entries do not form rows of width {num_subspaces}",
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c >= num_centroids) {
            return Err(Error::Lookup(format!(
                "code index {bad} out of range for M = {num_centroids}"
            )));
        }
        Ok(ItemCodeTable {
            num_subspaces,
            num_centroids,
            codes,
        })
    }

    pub fn num_items(&self) -> usize {
        self.codes.len() / self.num_subspaces
    }

    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    pub fn num_centroids(&self) -> usize {
        self.num_centroids
    }

    pub fn row(&self, item: usize) -> &[usize] {
        &self.codes[item * self.num_subspaces..(item + 1) * self.num_subspaces]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.codes.chunks_exact(self.num_subspaces)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.codes
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn extend(&self, other: &ItemCodeTable) -> Result<Self> {
        if other.num_subspaces != self.num_subspaces || other.num_centroids != self.num_centroids {
            return Err(Error::Config("code tables have different (D, M)".into()));
        }
        let mut codes = self.codes.clone();
        codes.extend_from_slice(&other.codes);
        ItemCodeTable::new(self.num_subspaces, self.num_centroids, codes)
    }

    /// Applies `relabel[k][old] = new` independently in each sub-space.
    pub fn relabel(&self, relabel: &[Vec<usize>]) -> Result<Self> {
        if relabel.len() != self.num_subspaces {
            return Err(Error::Config("one relabeling per sub-space required".into()));
        }
        let codes = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| relabel[i % self.num_subspaces][c])
            .collect();
        ItemCodeTable::new(self.num_subspaces, self.num_centroids, codes)
    }

    /// Reorders rows: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut codes = Vec::with_capacity(self.codes.len());
        for &p in perm {
            codes.extend_from_slice(self.row(p));
        }
        ItemCodeTable {
            num_subspaces: self.num_subspaces,
            num_centroids: self.num_centroids,
            codes,
        }
    }
}
