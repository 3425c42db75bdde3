//! Two-stage transfer to a new domain: learn a relaxed permutation between the
//! new domain's code indices and the pre-trained embedding rows with the
//! encoder frozen, then fine-tune the permuted code embedding table.

use log::info;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::corpus::{ItemId, SplitDataset, Stage, TextEmbeddingMatrix};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions};
use crate::itemrep::{scatter_code_grad, CodeEmbeddingTable};
use crate::model::{normalize, normalize_backward, normalize_rows, normalize_rows_backward, Recommender};
use crate::optim::Adam;
use crate::parallel::ordered_map;
use crate::pretrain::{initial_checkpoint, validation_subset};
use crate::quantizer::{train_opq, ItemCodeTable, OpqCodebook, OpqParams};
use crate::seqencoder::{backward, forward, EncoderParams};
use crate::seeded_rng;

/// Sequences per work unit; fixed so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Per-sub-space parameters `Theta_k` of the relaxed permutations.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrices {
    pub theta: Vec<Array2<f64>>,
    pub sinkhorn_temp: f64,
    pub sinkhorn_iters: usize,
    pub gumbel_noise_scale: f64,
}

impl AlignmentMatrices {
    /// `Theta_k` drawn i.i.d. from `N(0, init_std^2)`.
    pub fn init(
        num_subspaces: usize,
        num_centroids: usize,
        sinkhorn_temp: f64,
        sinkhorn_iters: usize,
        gumbel_noise_scale: f64,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(sinkhorn_temp > 0.0) || sinkhorn_iters == 0 || !(gumbel_noise_scale >= 0.0) {
            return Err(Error::Config(
                "sinkhorn temperature must be positive, iterations >= 1, noise scale >= 0".into(),
            ));
        }
        let mut rng = seeded_rng(seed);
        let theta = (0..num_subspaces)
            .map(|_| {
                Array2::from_shape_simple_fn((num_centroids, num_centroids), || {
                    init_std * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        Ok(AlignmentMatrices {
            theta,
            sinkhorn_temp,
            sinkhorn_iters,
            gumbel_noise_scale,
        })
    }

    pub fn num_subspaces(&self) -> usize {
        self.theta.len()
    }

    pub fn num_centroids(&self) -> usize {
        self.theta.first().map_or(0, |t| t.nrows())
    }

    /// Noise-free relaxed permutations, optionally hardened to 0/1 matrices.
    pub fn permutations(&self, harden: bool) -> Result<Vec<Array2<f64>>> {
        let mut rng = seeded_rng(0);
        self.theta
            .iter()
            .map(|t| {
                let pi = gumbel_sinkhorn(t.view(), self.sinkhorn_temp, self.sinkhorn_iters, 0.0, &mut rng)?.pi;
                Ok(if harden { harden_permutation(pi.view()) } else { pi })
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        crate::checkpoint::hash_tensors(self.theta.iter().map(|t| t.as_slice().unwrap()))
    }
}

/// Output of [`gumbel_sinkhorn`] with what its backward pass needs.
#[derive(Clone, Debug)]
pub struct Sinkhorn {
    pub pi: Array2<f64>,
    temp: f64,
    /// Log-domain matrix after each normalization, with its axis.
    steps: Vec<(Array2<f64>, Axis)>,
}

fn log_normalize(x: &mut Array2<f64>, axis: Axis) {
    // axis 0: every column sums to one; axis 1: every row
    let lse = x.map_axis(axis, |lane| {
        let m = lane.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        m + lane.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
    });
    match axis.index() {
        0 => *x -= &lse.insert_axis(Axis(0)),
        _ => *x -= &lse.insert_axis(Axis(1)),
    }
}

/// Perturbs `theta` with Gumbel noise of the given scale, divides by `temp`,
/// exponentiates and alternately normalizes columns then rows `iters` times
/// (in the log domain). The final normalization is row-wise, so every row of
/// the result sums to one.
pub fn gumbel_sinkhorn<R: Rng>(
    theta: ArrayView2<f64>,
    temp: f64,
    iters: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<Sinkhorn> {
    if !(temp > 0.0) || iters == 0 {
        return Err(Error::Config(format!(
            "gumbel_sinkhorn needs temp > 0 and iters >= 1 (got {temp}, {iters})"
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("theta has non-finite entries".into()));
    }
    if theta.nrows() != theta.ncols() || theta.is_empty() {
        return Err(Error::Config("theta must be a non-empty square matrix".into()));
    }
    let mut x = theta.to_owned();
    if noise_scale > 0.0 {
        x.mapv_inplace(|v| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            v + noise_scale * -(-u.ln()).ln()
        });
    }
    x /= temp;
    let mut steps = Vec::with_capacity(2 * iters);
    for _ in 0..iters {
        for axis in [Axis(0), Axis(1)] {
            log_normalize(&mut x, axis);
            steps.push((x.clone(), axis));
        }
    }
    Ok(Sinkhorn {
        pi: x.mapv(f64::exp),
        temp,
        steps,
    })
}

impl Sinkhorn {
    /// Gradient w.r.t. `theta` given the gradient w.r.t. `pi` (the noise is
    /// treated as a constant).
    pub fn backward(&self, d_pi: ArrayView2<f64>) -> Array2<f64> {
        let mut dx = &d_pi * &self.pi;
        for (y, axis) in self.steps.iter().rev() {
            // y = x - lse(x) along `axis`; dx = dy - softmax(x) * sum(dy)
            let sums = dx.sum_axis(*axis);
            let sums = sums.insert_axis(*axis);
            dx = &dx - &(y.mapv(f64::exp) * &sums);
        }
        dx / self.temp
    }
}

/// Greedy assignment: repeatedly fixes the largest remaining entry whose row
/// and column are both still free.
pub fn harden_permutation(pi: ArrayView2<f64>) -> Array2<f64> {
    let m = pi.nrows();
    let mut entries: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    entries.sort_by(|a, b| pi[[b.0, b.1]].total_cmp(&pi[[a.0, a.1]]).then(a.cmp(b)));
    let mut out = Array2::zeros((m, m));
    let mut row_used = vec![false; m];
    let mut col_used = vec![false; m];
    for (i, j) in entries {
        if !row_used[i] && !col_used[j] {
            out[[i, j]] = 1.0;
            row_used[i] = true;
            col_used[j] = true;
        }
    }
    out
}

/// Loss and gradients of one next-item prediction.
#[derive(Clone, Debug)]
pub struct NextItemLoss {
    pub loss: f64,
    pub d_seq: Array1<f64>,
    pub d_items: Array2<f64>,
}

/// Softmax cross-entropy of `target` over `cos(s, v_i) / tau` for all items.
pub fn next_item_loss(seq_rep: ArrayView1<f64>, target: usize, items: ArrayView2<f64>, tau: f64) -> Result<NextItemLoss> {
    if target >= items.nrows() {
        return Err(Error::Lookup(format!("target {target} outside {} items", items.nrows())));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if seq_rep.iter().chain(items.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite representation".into()));
    }
    let (s_hat, s_norm) = normalize(seq_rep);
    let (v_hat, v_norm) = normalize_rows(items);
    let s_mat = s_hat.view().insert_axis(Axis(0));
    let mut d_unit = Array2::zeros(items.dim());
    let (loss, d_s) = softmax_ce(s_mat, &[target], v_hat.view(), tau, 1.0, &mut d_unit);
    Ok(NextItemLoss {
        loss,
        d_seq: normalize_backward(s_hat.view(), s_norm, d_s.row(0)),
        d_items: normalize_rows_backward(v_hat.view(), v_norm.view(), d_unit.view()),
    })
}

/// Cross-entropy over `s_hat . v_hat^T / tau` for each row of `s_hat`. Returns
/// the summed loss and `scale * d/ds_hat`; `scale * d/dv_hat` is added to `d_unit`.
fn softmax_ce(
    s_hat: ArrayView2<f64>,
    targets: &[usize],
    v_hat: ArrayView2<f64>,
    tau: f64,
    scale: f64,
    d_unit: &mut Array2<f64>,
) -> (f64, Array2<f64>) {
    let mut g = s_hat.dot(&v_hat.t()) / tau;
    let mut loss = 0.0;
    for (mut row, &t) in g.rows_mut().into_iter().zip(targets) {
        let max = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        row.mapv_inplace(|x| (x - lse).exp() * scale);
        row[t] -= scale;
    }
    *d_unit += &(g.t().dot(&s_hat) / tau);
    (loss, g.dot(&v_hat) / tau)
}

/// Input windows covering every training instance of a sequence of length `n`:
/// `(start, len, first_row)`. Output row `r >= first_row` of the window
/// predicts item `start + r + 1`.
fn windows(n: usize, max_len: usize) -> Vec<(usize, usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let first = (n - 1).min(max_len);
    let mut out = vec![(0, first, 0)];
    for end in max_len + 1..n {
        out.push((end - max_len, max_len, max_len - 1));
    }
    out
}

struct NextItemGrads {
    loss: f64,
    d_reps: Array2<f64>,
}

/// Mean next-item loss over every training instance of `seqs` under a frozen
/// encoder, with its gradient w.r.t. the raw item representations.
fn next_item_batch(encoder: &EncoderParams, reps: &Array2<f64>, seqs: &[&[ItemId]], tau: f64, threads: usize) -> Result<NextItemGrads> {
    let count: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    let (n, d) = reps.dim();
    if count == 0 {
        return Ok(NextItemGrads {
            loss: 0.0,
            d_reps: Array2::zeros((n, d)),
        });
    }
    let scale = 1.0 / count as f64;
    let (unit, norms) = normalize_rows(reps.view());
    let max_len = encoder.config.max_len;
    let chunks: Vec<&[&[ItemId]]> = seqs.chunks(CHUNK).collect();
    let partial = ordered_map(threads, &chunks, |chunk| -> Result<(f64, Array2<f64>, Array2<f64>)> {
        let mut d_unit = Array2::zeros((n, d));
        let mut d_raw = Array2::zeros((n, d));
        let mut loss = 0.0;
        for items in chunk.iter() {
            for (start, len, from) in windows(items.len(), max_len) {
                let window = &items[start..start + len];
                let mut inputs = Array2::zeros((len, d));
                for (t, &i) in window.iter().enumerate() {
                    inputs.row_mut(t).assign(&reps.row(i));
                }
                let (out, cache) = forward::<crate::SeededRng>(encoder, inputs.view(), None)?;
                let (s_hat, s_norm) = normalize_rows(out.slice(s![from.., ..]));
                let targets = &items[start + from + 1..start + len + 1];
                let (l, d_s) = softmax_ce(s_hat.view(), targets, unit.view(), tau, scale, &mut d_unit);
                loss += l;
                let mut d_out = Array2::zeros((len, d));
                d_out
                    .slice_mut(s![from.., ..])
                    .assign(&normalize_rows_backward(s_hat.view(), s_norm.view(), d_s.view()));
                let d_in = backward(encoder, &cache, d_out.view(), None);
                for (row, &i) in d_in.rows().into_iter().zip(window) {
                    d_raw.row_mut(i).scaled_add(1.0, &row);
                }
            }
        }
        Ok((loss, d_unit, d_raw))
    });
    let mut loss = 0.0;
    let mut d_unit = Array2::zeros((n, d));
    let mut d_reps = Array2::zeros((n, d));
    for p in partial {
        let (l, du, dr) = p?;
        loss += l;
        d_unit += &du;
        d_reps += &dr;
    }
    d_reps += &normalize_rows_backward(unit.view(), norms.view(), d_unit.view());
    Ok(NextItemGrads {
        loss: loss * scale,
        d_reps,
    })
}

/// Gradient of the table given per-item gradients of the pooled representations.
fn table_grad(codes: &ItemCodeTable, d_reps: &Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut g = Array3::zeros(shape);
    for (i, row) in codes.rows().enumerate() {
        scatter_code_grad(&mut g, row, d_reps.row(i));
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Full passes over the target training data while learning `Theta`.
    pub align_epochs: usize,
    /// Full passes while fine-tuning the table.
    pub table_epochs: usize,
    pub align_lr: f64,
    pub table_lr: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Non-improving table epochs tolerated before stopping.
    pub patience: usize,
    pub sinkhorn_temp: f64,
    pub sinkhorn_iters: usize,
    pub gumbel_noise_scale: f64,
    pub theta_init_std: f64,
    /// Replace the relaxed permutation by a greedy hard assignment when
    /// materializing the table.
    pub harden: bool,
    pub seed: u64,
    pub threads: usize,
    pub valid_cap: usize,
    /// Use `Pi = I` instead of learning the alignment.
    pub skip_alignment: bool,
    /// Give every target item a uniformly random code.
    pub random_code: bool,
    /// Encode target items with the pre-training codebook instead of a
    /// retrained one.
    pub reuse_pretrain_codebook: bool,
    /// Start from randomly initialized table and encoder.
    pub no_pretrain: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            align_epochs: 3,
            table_epochs: 5,
            align_lr: 0.2,
            table_lr: 1e-3,
            batch_size: 64,
            patience: 10,
            sinkhorn_temp: 0.1,
            sinkhorn_iters: 3,
            gumbel_noise_scale: 1.0,
            theta_init_std: 0.1,
            harden: false,
            seed: 0,
            threads: 1,
            valid_cap: 2000,
            skip_alignment: false,
            random_code: false,
            reuse_pretrain_codebook: false,
            no_pretrain: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.valid_cap == 0 {
            return Err(Error::Config("transfer.batch_size and valid_cap must be positive".into()));
        }
        if !(self.align_lr > 0.0) || !(self.table_lr > 0.0) {
            return Err(Error::Config("transfer learning rates must be positive".into()));
        }
        if !(self.sinkhorn_temp > 0.0) || self.sinkhorn_iters == 0 {
            return Err(Error::Config("transfer.sinkhorn_temp must be positive and sinkhorn_iters >= 1".into()));
        }
        if !(self.gumbel_noise_scale >= 0.0) || !(self.theta_init_std >= 0.0) {
            return Err(Error::Config("transfer noise scale and theta init std must be non-negative".into()));
        }
        if self.random_code && self.reuse_pretrain_codebook {
            return Err(Error::Config(
                "transfer.random_code and transfer.reuse_pretrain_codebook both choose the item codes".into(),
            ));
        }
        Ok(())
    }
}

/// Codebook and codes of the target catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Downstream {
    pub codebook: OpqCodebook,
    pub codes: ItemCodeTable,
}

/// Quantizes the target catalog with the same `(D, M)` as the checkpoint:
/// a retrained codebook by default, the pre-training one when reusing, and
/// random codes under `random_code`.
pub fn downstream_codes(
    ckpt: &Checkpoint,
    embeddings: &TextEmbeddingMatrix,
    opq: &OpqParams,
    cfg: &FinetuneConfig,
) -> Result<Downstream> {
    cfg.validate()?;
    let (d, m) = (ckpt.codebook.num_subspaces(), ckpt.codebook.num_centroids());
    let codebook = if cfg.reuse_pretrain_codebook {
        ckpt.codebook.clone()
    } else {
        let params = OpqParams {
            num_subspaces: d,
            num_centroids: m,
            ..opq.clone()
        };
        train_opq(embeddings, &params, cfg.seed)?.codebook
    };
    let mut codes = codebook.encode_all(embeddings)?;
    if cfg.random_code {
        let mut rng = seeded_rng(cfg.seed ^ 0xc0de);
        let random = (0..codes.as_slice().len()).map(|_| rng.gen_range(0..m)).collect();
        codes = ItemCodeTable::new(d, m, random)?;
    }
    Ok(Downstream { codebook, codes })
}

/// The pre-training codebook with the centroids of every sub-space shuffled by
/// a random permutation: the target codes carry the pre-trained semantics under
/// unknown index labels.
pub fn permuted_downstream(ckpt: &Checkpoint, embeddings: &TextEmbeddingMatrix, seed: u64) -> Result<(Downstream, Vec<Vec<usize>>)> {
    let m = ckpt.codebook.num_centroids();
    let mut rng = seeded_rng(seed);
    let perms: Vec<Vec<usize>> = (0..ckpt.codebook.num_subspaces())
        .map(|_| {
            let mut p: Vec<usize> = (0..m).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let codebook = ckpt.codebook.relabel(&perms)?;
    let codes = codebook.encode_all(embeddings)?;
    Ok((Downstream { codebook, codes }, perms))
}

fn check_compat(ckpt: &Checkpoint, split: &SplitDataset, down: &Downstream) -> Result<()> {
    if down.codes.num_subspaces() != ckpt.table.num_subspaces() || down.codes.num_centroids() != ckpt.table.num_centroids() {
        return Err(Error::Config(format!(
            "downstream codes use (D={}, M={}) but the checkpoint table has (D={}, M={})",
            down.codes.num_subspaces(),
            down.codes.num_centroids(),
            ckpt.table.num_subspaces(),
            ckpt.table.num_centroids()
        )));
    }
    if down.codes.num_items() != split.num_items {
        return Err(Error::Config(format!(
            "{} downstream codes for {} target items",
            down.codes.num_items(),
            split.num_items
        )));
    }
    Ok(())
}

fn train_sequences(split: &SplitDataset) -> Vec<&[ItemId]> {
    split.sequences.iter().map(|s| s.train()).filter(|t| t.len() >= 2).collect()
}

fn valid_ndcg(encoder: &EncoderParams, reps: Array2<f64>, tau: f64, split: &SplitDataset, subset: &Option<Vec<usize>>, threads: usize) -> Result<f64> {
    let model = Recommender::from_item_reps(encoder.clone(), reps, tau)?;
    let opts = EvalOptions {
        ks: vec![10],
        subset: subset.clone(),
        threads,
        ..EvalOptions::default()
    };
    Ok(evaluate(&model, split, Stage::Valid, &opts)?.ndcg[0])
}

/// Learns `Theta` with the encoder and the code embedding table frozen.
/// Returns the `Theta` of the best validation epoch (the initialization
/// counts as epoch 0).
pub fn align_stage(ckpt: &Checkpoint, split: &SplitDataset, down: &Downstream, cfg: &FinetuneConfig) -> Result<AlignmentMatrices> {
    cfg.validate()?;
    check_compat(ckpt, split, down)?;
    let (d, m) = (ckpt.table.num_subspaces(), ckpt.table.num_centroids());
    let mut align = AlignmentMatrices::init(
        d,
        m,
        cfg.sinkhorn_temp,
        cfg.sinkhorn_iters,
        cfg.gumbel_noise_scale,
        cfg.theta_init_std,
        cfg.seed ^ 0xa11,
    )?;
    let subset = validation_subset(split.sequences.len(), cfg.valid_cap, cfg.seed);
    let eval_reps = |a: &AlignmentMatrices| -> Result<Array2<f64>> {
        ckpt.table.aligned(&a.permutations(cfg.harden)?)?.item_reps(&down.codes)
    };
    let mut best = (valid_ndcg(&ckpt.encoder, eval_reps(&align)?, ckpt.tau, split, &subset, cfg.threads)?, align.clone());
    info!("stage=align epoch=0 valid_ndcg@10={:.6}", best.0);

    let mut seqs = train_sequences(split);
    let mut adam = Adam::new(cfg.align_lr, &vec![m * m; d]);
    let mut rng = seeded_rng(cfg.seed ^ 0xa1);
    for epoch in 1..=cfg.align_epochs {
        seqs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in seqs.chunks(cfg.batch_size) {
            let sinks = align
                .theta
                .iter()
                .map(|t| gumbel_sinkhorn(t.view(), align.sinkhorn_temp, align.sinkhorn_iters, align.gumbel_noise_scale, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let pis: Vec<Array2<f64>> = sinks.iter().map(|s| s.pi.clone()).collect();
            let aligned = ckpt.table.aligned(&pis)?;
            let reps = aligned.item_reps(&down.codes)?;
            let g = next_item_batch(&ckpt.encoder, &reps, batch, ckpt.tau, cfg.threads)?;
            if !g.loss.is_finite() {
                return Err(Error::Divergence(format!("alignment epoch {epoch}: loss {}", g.loss)));
            }
            let d_aligned = table_grad(&down.codes, &g.d_reps, aligned.weights.dim());
            let d_theta: Vec<Array2<f64>> = sinks
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let d_pi = d_aligned.index_axis(Axis(0), k).dot(&ckpt.table.weights.index_axis(Axis(0), k).t());
                    s.backward(d_pi.view())
                })
                .collect();
            adam.update(
                align.theta.iter_mut().map(|t| t.as_slice_mut().unwrap()).collect(),
                d_theta.iter().map(|t| t.as_slice().unwrap()).collect(),
            );
            total += g.loss;
            steps += 1;
        }
        let ndcg = valid_ndcg(&ckpt.encoder, eval_reps(&align)?, ckpt.tau, split, &subset, cfg.threads)?;
        info!(
            "stage=align epoch={epoch} loss={:.6} valid_ndcg@10={ndcg:.6}",
            total / steps.max(1) as f64
        );
        if ndcg > best.0 {
            best = (ndcg, align.clone());
        }
    }
    Ok(best.1)
}

/// Materializes `Pi_k E_k` (or `E_k` without an alignment) and fine-tunes it
/// with the encoder frozen. The returned checkpoint carries the target
/// codebook and codes, the best-validation table and the hash of the
/// pre-trained checkpoint it descends from; the alignment is recorded in the
/// log by its hash.
pub fn finetune_stage(
    ckpt: &Checkpoint,
    alignment: Option<&AlignmentMatrices>,
    split: &SplitDataset,
    down: &Downstream,
    cfg: &FinetuneConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_compat(ckpt, split, down)?;
    let mut table = match alignment {
        Some(a) => ckpt.table.aligned(&a.permutations(cfg.harden)?)?,
        None => ckpt.table.clone(),
    };
    let subset = validation_subset(split.sequences.len(), cfg.valid_cap, cfg.seed);
    let score = |t: &CodeEmbeddingTable| -> Result<f64> {
        valid_ndcg(&ckpt.encoder, t.item_reps(&down.codes)?, ckpt.tau, split, &subset, cfg.threads)
    };
    let mut log = vec![];
    if let Some(a) = alignment {
        log.push(format!("stage=finetune alignment_hash={}", a.hash()));
    }
    let mut best = (score(&table)?, table.clone());
    log.push(format!("stage=finetune epoch=0 valid_ndcg@10={:.6}", best.0));
    info!("{}", log.last().unwrap());

    let mut seqs = train_sequences(split);
    let mut adam = Adam::new(cfg.table_lr, &[table.weights.len()]);
    let mut rng = seeded_rng(cfg.seed ^ 0xf1);
    let mut bad = 0;
    for epoch in 1..=cfg.table_epochs {
        seqs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in seqs.chunks(cfg.batch_size) {
            let reps = table.item_reps(&down.codes)?;
            let g = next_item_batch(&ckpt.encoder, &reps, batch, ckpt.tau, cfg.threads)?;
            if !g.loss.is_finite() {
                return Err(Error::Divergence(format!("fine-tuning epoch {epoch}: loss {}", g.loss)));
            }
            let grad = table_grad(&down.codes, &g.d_reps, table.weights.dim());
            adam.update(vec![table.weights.as_slice_mut().unwrap()], vec![grad.as_slice().unwrap()]);
            total += g.loss;
            steps += 1;
        }
        let ndcg = score(&table)?;
        let line = format!(
            "stage=finetune epoch={epoch} loss={:.6} valid_ndcg@10={ndcg:.6}",
            total / steps.max(1) as f64
        );
        info!("{line}");
        log.push(line);
        if ndcg > best.0 {
            best = (ndcg, table.clone());
            bad = 0;
        } else {
            bad += 1;
            if bad > cfg.patience {
                break;
            }
        }
    }

    let mut full_log = ckpt.log.clone();
    full_log.extend(log);
    let out = Checkpoint {
        config: ckpt.config.clone(),
        tau: ckpt.tau,
        codebook: down.codebook.clone(),
        codes: down.codes.clone(),
        table: best.1,
        encoder: ckpt.encoder.clone(),
        optimizer: Some(adam),
        log: full_log,
        alignment: None,
        source: Some(ckpt.source.clone().unwrap_or_else(|| ckpt.provenance_hash())),
    };
    out.validate()?;
    Ok(out)
}

/// The pre-trained checkpoint re-targeted to downstream codes, with the
/// learned alignment attached but not yet applied to the table.
pub fn aligned_checkpoint(ckpt: &Checkpoint, down: &Downstream, alignment: Option<AlignmentMatrices>) -> Result<Checkpoint> {
    if ckpt.alignment.is_some() {
        return Err(Error::Config("checkpoint already carries an unapplied alignment".into()));
    }
    let out = Checkpoint {
        codebook: down.codebook.clone(),
        codes: down.codes.clone(),
        optimizer: None,
        alignment,
        source: Some(ckpt.source.clone().unwrap_or_else(|| ckpt.provenance_hash())),
        ..ckpt.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Applies a checkpoint's pending alignment to its table.
pub fn materialize(ckpt: &Checkpoint, harden: bool) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    if let Some(a) = out.alignment.take() {
        out.table = ckpt.table.aligned(&a.permutations(harden)?)?;
    }
    Ok(out)
}

/// Fine-tunes an [`aligned_checkpoint`] on its own codes.
pub fn finetune_aligned(ckpt: &Checkpoint, split: &SplitDataset, cfg: &FinetuneConfig) -> Result<Checkpoint> {
    let down = Downstream {
        codebook: ckpt.codebook.clone(),
        codes: ckpt.codes.clone(),
    };
    let base = Checkpoint {
        alignment: None,
        ..ckpt.clone()
    };
    finetune_stage(&base, ckpt.alignment.as_ref(), split, &down, cfg)
}

/// A checkpoint with the same shapes as `ckpt` but freshly initialized table
/// and encoder.
pub fn fresh_like(ckpt: &Checkpoint, seed: u64) -> Result<Checkpoint> {
    initial_checkpoint(ckpt.codebook.clone(), ckpt.codes.clone(), &ckpt.encoder.config, ckpt.tau, seed)
}

/// The whole transfer pipeline under the flags of `cfg`.
pub fn transfer(
    ckpt: &Checkpoint,
    split: &SplitDataset,
    embeddings: &TextEmbeddingMatrix,
    opq: &OpqParams,
    cfg: &FinetuneConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let fresh;
    let source = if cfg.no_pretrain {
        fresh = fresh_like(ckpt, cfg.seed ^ 0x5c7a)?;
        &fresh
    } else {
        ckpt
    };
    let down = downstream_codes(source, embeddings, opq, cfg)?;
    let alignment = if cfg.skip_alignment {
        None
    } else {
        Some(align_stage(source, split, &down, cfg)?)
    };
    finetune_stage(source, alignment.as_ref(), split, &down, cfg)
}

/// Appends items described by `new_embeddings` to a fine-tuned checkpoint by
/// encoding them with its codebook. No parameter changes.
pub fn inductive_extend(ckpt: &Checkpoint, new_embeddings: &TextEmbeddingMatrix) -> Result<Checkpoint> {
    if new_embeddings.dim() != ckpt.codebook.input_dim() {
        return Err(Error::Dimension {
            expected: ckpt.codebook.input_dim(),
            got: new_embeddings.dim(),
        });
    }
    let new_codes = ckpt.codebook.encode_all(new_embeddings)?;
    let mut out = ckpt.clone();
    out.codes = ckpt.codes.extend(&new_codes)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqencoder::EncoderConfig;

    fn random(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_simple_fn((m, n), || rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn many_iterations_give_doubly_stochastic() {
        let mut rng = seeded_rng(0);
        for seed in 0..10 {
            let theta = random(16, 16, seed);
            let pi = gumbel_sinkhorn(theta.view(), 1.0, 50, 0.0, &mut rng).unwrap().pi;
            for s in pi.sum_axis(Axis(0)).iter().chain(pi.sum_axis(Axis(1)).iter()) {
                assert!((s - 1.0).abs() < 1e-6, "sum {s}");
            }
            assert!(pi.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn dominant_diagonal_saturates() {
        let theta = Array2::<f64>::eye(5) * 5.0;
        let pi = gumbel_sinkhorn(theta.view(), 0.1, 20, 0.0, &mut seeded_rng(0)).unwrap().pi;
        let err = (&pi - &Array2::<f64>::eye(5)).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn three_iterations_have_exact_row_sums() {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            // default initialization scale: Theta ~ N(0, 0.1^2), temperature 0.1
            let theta = random(16, 16, seed) * 0.1;
            let pi = gumbel_sinkhorn(theta.view(), 0.1, 3, 0.0, &mut seeded_rng(0)).unwrap().pi;
            for s in pi.sum_axis(Axis(1)) {
                assert!((s - 1.0).abs() < 1e-12);
            }
            for s in pi.sum_axis(Axis(0)) {
                worst = worst.max((s - 1.0).abs());
            }
        }
        assert!(worst < 0.2, "column deviation {worst}");
    }

    #[test]
    fn sinkhorn_gradient_matches_finite_differences() {
        let theta = random(4, 4, 3) * 0.5;
        let w = random(4, 4, 4);
        let f = |t: &Array2<f64>| {
            let pi = gumbel_sinkhorn(t.view(), 0.7, 5, 0.0, &mut seeded_rng(0)).unwrap().pi;
            (&pi * &w).sum()
        };
        let sk = gumbel_sinkhorn(theta.view(), 0.7, 5, 0.0, &mut seeded_rng(0)).unwrap();
        let g = sk.backward(w.view());
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut p = theta.clone();
                p[[i, j]] += h;
                let mut q = theta.clone();
                q[[i, j]] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                let rel = (fd - g[[i, j]]).abs() / fd.abs().max(g[[i, j]].abs()).max(1e-6);
                assert!(rel < 1e-4, "[{i},{j}] {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let mut rng = seeded_rng(0);
        let mut t = Array2::<f64>::zeros((3, 3));
        assert!(gumbel_sinkhorn(t.view(), 0.0, 3, 0.0, &mut rng).is_err());
        assert!(gumbel_sinkhorn(t.view(), 1.0, 0, 0.0, &mut rng).is_err());
        t[[0, 0]] = f64::NAN;
        assert!(gumbel_sinkhorn(t.view(), 1.0, 3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn noise_changes_the_output_and_is_seeded() {
        let theta = random(6, 6, 1);
        let a = gumbel_sinkhorn(theta.view(), 0.5, 3, 1.0, &mut seeded_rng(5)).unwrap().pi;
        let b = gumbel_sinkhorn(theta.view(), 0.5, 3, 1.0, &mut seeded_rng(5)).unwrap().pi;
        let c = gumbel_sinkhorn(theta.view(), 0.5, 3, 0.0, &mut seeded_rng(5)).unwrap().pi;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn harden_gives_permutation() {
        let pi = random(7, 7, 2).mapv(f64::exp);
        let p = harden_permutation(pi.view());
        assert!(p.sum_axis(Axis(0)).iter().all(|&s| s == 1.0));
        assert!(p.sum_axis(Axis(1)).iter().all(|&s| s == 1.0));
        let perm = Array2::from_shape_fn((4, 4), |(i, j)| if j == (i + 1) % 4 { 0.9 } else { 0.03 });
        assert_eq!(harden_permutation(perm.view()), perm.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }));
    }

    #[test]
    fn next_item_closed_forms() {
        let s = Array1::from(vec![1.0, 2.0]);
        let one = Array2::from_shape_vec((1, 2), vec![3.0, -1.0]).unwrap();
        assert!(next_item_loss(s.view(), 0, one.view(), 0.1).unwrap().loss.abs() < 1e-15);
        // all items orthogonal to s: equal logits
        let items = Array2::from_shape_vec((4, 2), vec![2.0, -1.0, -2.0, 1.0, 4.0, -2.0, -1.0, 0.5]).unwrap();
        let l = next_item_loss(s.view(), 2, items.view(), 0.07).unwrap().loss;
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(next_item_loss(s.view(), 4, items.view(), 0.07).is_err());
    }

    #[test]
    fn next_item_matches_naive_and_finite_differences() {
        let s = random(1, 6, 11).row(0).to_owned();
        let items = random(5, 6, 12);
        let tau = 0.5;
        let naive = |s: &Array1<f64>, v: &Array2<f64>| {
            let cos = |a: ArrayView1<f64>, b: ArrayView1<f64>| a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            let z: f64 = (0..5).map(|i| (cos(s.view(), v.row(i)) / tau).exp()).sum();
            -((cos(s.view(), v.row(3)) / tau).exp() / z).ln()
        };
        let out = next_item_loss(s.view(), 3, items.view(), tau).unwrap();
        assert!((out.loss - naive(&s, &items)).abs() < 1e-12);
        let h = 1e-6;
        let check = |fd: f64, an: f64| {
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{an} vs {fd}");
        };
        for k in 0..6 {
            let (mut p, mut q) = (s.clone(), s.clone());
            p[k] += h;
            q[k] -= h;
            check((naive(&p, &items) - naive(&q, &items)) / (2.0 * h), out.d_seq[k]);
        }
        for i in 0..5 {
            for k in 0..6 {
                let (mut p, mut q) = (items.clone(), items.clone());
                p[[i, k]] += h;
                q[[i, k]] -= h;
                check((naive(&s, &p) - naive(&s, &q)) / (2.0 * h), out.d_items[[i, k]]);
            }
        }
    }

    #[test]
    fn windows_cover_every_instance_once() {
        for n in 0..12 {
            for max_len in 1..6 {
                let mut ends = Vec::new();
                for (start, len, from) in windows(n, max_len) {
                    assert!(len <= max_len);
                    for r in from..len {
                        // context items[start..=start+r] must be the truncated prefix
                        let end = start + r + 1;
                        assert_eq!(start, end.saturating_sub(max_len));
                        ends.push(end);
                    }
                }
                let expect: Vec<usize> = (1..n.max(1)).collect();
                assert_eq!(ends, expect, "n={n} max_len={max_len}");
            }
        }
    }

    #[test]
    fn batched_next_item_matches_per_instance_loop() {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            dim: 6,
            max_len: 3,
            dropout: 0.0,
        };
        let enc = EncoderParams::init(&cfg, 1).unwrap();
        let reps = random(7, 6, 2);
        let seqs: Vec<Vec<usize>> = vec![vec![0, 3, 5, 1, 6], vec![2, 4], vec![6]];
        let views: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let g = next_item_batch(&enc, &reps, &views, 0.2, 1).unwrap();

        let model = Recommender::from_item_reps(enc.clone(), reps.clone(), 0.2).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for s in &seqs {
            for end in 1..s.len() {
                let rep = model.encode_context(&s[..end]).unwrap();
                total += next_item_loss(rep.view(), s[end], reps.view(), 0.2).unwrap().loss;
                count += 1;
            }
        }
        assert!((g.loss - total / count as f64).abs() < 1e-12);

        // gradient w.r.t. item representations by finite differences
        let h = 1e-6;
        for (i, k) in [(0, 0), (3, 2), (5, 5), (6, 1), (2, 3)] {
            let mut p = reps.clone();
            p[[i, k]] += h;
            let mut q = reps.clone();
            q[[i, k]] -= h;
            let fp = next_item_batch(&enc, &p, &views, 0.2, 1).unwrap().loss;
            let fq = next_item_batch(&enc, &q, &views, 0.2, 1).unwrap().loss;
            let fd = (fp - fq) / (2.0 * h);
            let an = g.d_reps[[i, k]];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4, "{an} vs {fd}");
        }
        let g2 = next_item_batch(&enc, &reps, &views, 0.2, 3).unwrap();
        assert_eq!(g2.loss, g.loss);
        assert_eq!(g2.d_reps, g.d_reps);
    }
}
