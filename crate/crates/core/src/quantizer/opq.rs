//! Optimized product quantization: alternating sub-space k-means and an
//! orthogonal Procrustes rotation update.

use log::debug;
use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};

use super::kmeans::{kmeans, lloyd, nearest, sq_dist, DEFAULT_MAX_ITERS};
use super::{ItemCode, ItemCodeTable};
use crate::corpus::TextEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seeded_rng;

pub const DEFAULT_OUTER_ITERS: usize = 20;

/// `D` sub-space codebooks of `M` centroids each, applied after a learned
/// orthogonal rotation of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct OpqCodebook {
    /// `d_W x d_W`; the quantizer sees `rotation . x`.
    pub rotation: Array2<f64>,
    /// `(D, M, d_W / D)`.
    pub centroids: Array3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpqParams {
    pub num_subspaces: usize,
    pub num_centroids: usize,
    /// Rotation updates; zero yields plain PQ with an identity rotation.
    pub outer_iters: usize,
    pub kmeans_iters: usize,
}

impl Default for OpqParams {
    fn default() -> Self {
        OpqParams {
            num_subspaces: 8,
            num_centroids: 16,
            outer_iters: DEFAULT_OUTER_ITERS,
            kmeans_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OpqTraining {
    pub codebook: OpqCodebook,
    /// Mean squared reconstruction error: the plain-PQ start, then one entry
    /// per rotation update.
    pub error_trace: Vec<f64>,
}

impl OpqCodebook {
    pub fn new(rotation: Array2<f64>, centroids: Array3<f64>) -> Result<Self> {
        let (d, m, sub) = centroids.dim();
        if d == 0 || m == 0 || sub == 0 {
            return Err(Error::Config("codebook shape must be positive".into()));
        }
        if rotation.dim() != (d * sub, d * sub) {
            return Err(Error::Format(format!(
                "rotation is {:?}, expected {}x{}",
                rotation.dim(),
                d * sub,
                d * sub
            )));
        }
        if rotation.iter().chain(centroids.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("codebook contains non-finite values".into()));
        }
        Ok(OpqCodebook {
            rotation,
            centroids,
        })
    }

    pub fn num_subspaces(&self) -> usize {
        self.centroids.dim().0
    }

    pub fn num_centroids(&self) -> usize {
        self.centroids.dim().1
    }

    pub fn sub_dim(&self) -> usize {
        self.centroids.dim().2
    }

    pub fn input_dim(&self) -> usize {
        self.rotation.nrows()
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = self.rotation.t().dot(&self.rotation);
        rtr.indexed_iter()
            .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn rotate(&self, x: ArrayView1<f64>) -> Result<ndarray::Array1<f64>> {
        self.check_dim(x.len())?;
        Ok(self.rotation.dot(&x))
    }

    /// Nearest centroid per sub-space of the rotated vector (lowest index on ties).
    pub fn encode(&self, x: ArrayView1<f64>) -> Result<ItemCode> {
        let y = self.rotate(x)?;
        let sub = self.sub_dim();
        let code = (0..self.num_subspaces())
            .map(|k| {
                let part = y.slice(s![k * sub..(k + 1) * sub]);
                nearest(part, self.centroids.index_axis(Axis(0), k)).0
            })
            .collect();
        Ok(ItemCode(code))
    }

    pub fn encode_all(&self, x: &TextEmbeddingMatrix) -> Result<ItemCodeTable> {
        self.check_dim(x.dim())?;
        let rows = x.to_f64();
        self.encode_rows(rows.view())
    }

    pub fn encode_rows(&self, rows: ArrayView2<f64>) -> Result<ItemCodeTable> {
        self.check_dim(rows.ncols())?;
        let d = self.num_subspaces();
        let mut codes = Vec::with_capacity(rows.nrows() * d);
        for row in rows.outer_iter() {
            codes.extend(self.encode(row)?.0);
        }
        ItemCodeTable::new(d, self.num_centroids(), codes)
    }

    /// The same quantizer with centroid `j` of sub-space `k` moved to index
    /// `relabel[k][j]`; codes change accordingly, reconstructions do not.
    pub fn relabel(&self, relabel: &[Vec<usize>]) -> Result<OpqCodebook> {
        let (d, m, _) = self.centroids.dim();
        let valid = relabel.len() == d
            && relabel.iter().all(|p| {
                let mut seen = vec![false; m];
                p.len() == m && p.iter().all(|&j| j < m && !std::mem::replace(&mut seen[j], true))
            });
        if !valid {
            return Err(Error::Config(format!("relabeling must be {d} permutations of 0..{m}")));
        }
        let mut centroids = self.centroids.clone();
        for (k, perm) in relabel.iter().enumerate() {
            for (old, &new) in perm.iter().enumerate() {
                centroids
                    .slice_mut(s![k, new, ..])
                    .assign(&self.centroids.slice(s![k, old, ..]));
            }
        }
        OpqCodebook::new(self.rotation.clone(), centroids)
    }

    /// Concatenation of the selected centroids, in the rotated space.
    pub fn decode(&self, code: &[usize]) -> ndarray::Array1<f64> {
        let sub = self.sub_dim();
        let mut out = ndarray::Array1::zeros(self.input_dim());
        for (k, &c) in code.iter().enumerate() {
            out.slice_mut(s![k * sub..(k + 1) * sub])
                .assign(&self.centroids.slice(s![k, c, ..]));
        }
        out
    }

    /// Mean over items of `|R x - decode(encode(x))|^2`.
    pub fn reconstruction_error(&self, x: ArrayView2<f64>) -> Result<f64> {
        self.check_dim(x.ncols())?;
        if x.nrows() == 0 {
            return Err(Error::Data("no vectors to reconstruct".into()));
        }
        let mut total = 0.0;
        for row in x.outer_iter() {
            let code = self.encode(row)?;
            let y = self.rotation.dot(&row);
            total += sq_dist(y.view(), self.decode(&code.0).view());
        }
        Ok(total / x.nrows() as f64)
    }
}

fn validate(n: usize, dim: usize, p: &OpqParams) -> Result<()> {
    if p.num_subspaces == 0 || p.num_centroids == 0 {
        return Err(Error::Config("quantizer D and M must be positive".into()));
    }
    if dim % p.num_subspaces != 0 {
        return Err(Error::Config(format!(
            "embedding dimension {dim} is not divisible by D = {}",
            p.num_subspaces
        )));
    }
    if n < p.num_centroids {
        return Err(Error::InsufficientData(format!(
            "{n} items cannot train {} centroids",
            p.num_centroids
        )));
    }
    Ok(())
}

pub fn train_opq(x: &TextEmbeddingMatrix, params: &OpqParams, seed: u64) -> Result<OpqTraining> {
    train_opq_rows(x.to_f64().view(), params, seed)
}

/// Trains a codebook on the rows of `x`. The first pass is plain PQ with an
/// identity rotation; each outer iteration then solves the Procrustes problem
/// for the current reconstruction and refines the centroids with warm-started
/// Lloyd iterations, so the error never increases.
pub fn train_opq_rows(x: ArrayView2<f64>, params: &OpqParams, seed: u64) -> Result<OpqTraining> {
    let (n, dim) = x.dim();
    validate(n, dim, params)?;
    let d = params.num_subspaces;
    let m = params.num_centroids;
    let sub = dim / d;
    let mut rng = seeded_rng(seed);

    let mut rotation = Array2::<f64>::eye(dim);
    let mut centroids = Array3::<f64>::zeros((d, m, sub));
    let mut assignments = vec![vec![0usize; n]; d];
    for k in 0..d {
        let part = x.slice(s![.., k * sub..(k + 1) * sub]);
        let r = kmeans(part, m, params.kmeans_iters, &mut rng)?;
        centroids.index_axis_mut(Axis(0), k).assign(&r.centroids);
        assignments[k] = r.assignments;
    }
    let mut trace = vec![assigned_error(x.view(), &rotation, &centroids, &assignments)];

    for it in 0..params.outer_iters {
        let mut recon = Array2::<f64>::zeros((n, dim));
        for k in 0..d {
            for i in 0..n {
                recon
                    .slice_mut(s![i, k * sub..(k + 1) * sub])
                    .assign(&centroids.slice(s![k, assignments[k][i], ..]));
            }
        }
        rotation = procrustes(x, recon.view());
        let rotated = x.dot(&rotation.t());
        for k in 0..d {
            let part = rotated.slice(s![.., k * sub..(k + 1) * sub]);
            let warm = centroids.index_axis(Axis(0), k).to_owned();
            let r = lloyd(part, warm, params.kmeans_iters)?;
            centroids.index_axis_mut(Axis(0), k).assign(&r.centroids);
            assignments[k] = r.assignments;
        }
        let err = assigned_error(x.view(), &rotation, &centroids, &assignments);
        debug!("opq iter={it} mse={err:.6}");
        trace.push(err);
    }

    Ok(OpqTraining {
        codebook: OpqCodebook::new(rotation, centroids)?,
        error_trace: trace,
    })
}

fn assigned_error(
    x: ArrayView2<f64>,
    rotation: &Array2<f64>,
    centroids: &Array3<f64>,
    assignments: &[Vec<usize>],
) -> f64 {
    let sub = centroids.dim().2;
    let rotated = x.dot(&rotation.t());
    let mut total = 0.0;
    for (i, y) in rotated.outer_iter().enumerate() {
        for (k, assign) in assignments.iter().enumerate() {
            total += sq_dist(
                y.slice(s![k * sub..(k + 1) * sub]),
                centroids.slice(s![k, assign[i], ..]),
            );
        }
    }
    total / x.nrows() as f64
}

/// Orthogonal `R` minimizing `|X R^T - Y|_F`: with `X^T Y = U S V^T`,
/// `R^T = U V^T`.
fn procrustes(x: ArrayView2<f64>, target: ArrayView2<f64>) -> Array2<f64> {
    let cross = x.t().dot(&target);
    let (r, c) = cross.dim();
    let mat = DMatrix::from_fn(r, c, |i, j| cross[[i, j]]);
    let svd = mat.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let w = u * vt;
    Array2::from_shape_fn((c, r), |(i, j)| w[(j, i)])
}
