//! Multi-domain contrastive pre-training of the code embedding table and the
//! sequence encoder.

use log::info;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::{BatchSampler, ItemId, Sampling, SplitDataset, Stage};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions};
use crate::itemrep::{scatter_code_grad, semi_synthetic_indices, CodeEmbeddingTable};
use crate::model::{normalize_rows, normalize_rows_backward, Recommender};
use crate::optim::Adam;
use crate::parallel::ordered_map;
use crate::quantizer::{ItemCodeTable, OpqCodebook};
use crate::seqencoder::{backward, forward, EncoderConfig, EncoderParams};
use crate::{seeded_rng, SeededRng};

/// Instances per work unit. Fixed so that the gradient reduction order, and
/// therefore the result, does not depend on the thread count.
const CHUNK: usize = 16;

/// Tolerance on row norms accepted by [`contrastive_loss`].
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub tau: f64,
    pub rho: f64,
    pub lr: f64,
    pub max_epochs: usize,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub disable_semi_synthetic: bool,
    pub threads: usize,
    /// Validation sequences scored per epoch (a fixed sample when exceeded).
    pub valid_cap: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 256,
            tau: 0.07,
            rho: 0.75,
            lr: 1e-3,
            max_epochs: 30,
            patience: 10,
            steps_per_epoch: 20,
            seed: 0,
            disable_semi_synthetic: false,
            threads: 1,
            valid_cap: 2000,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "pretrain.batch_size = {} but in-batch negatives need at least 2",
                self.batch_size
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("pretrain.tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("pretrain.rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("pretrain.lr must be positive".into()));
        }
        if self.steps_per_epoch == 0 || self.max_epochs == 0 {
            return Err(Error::Config("pretrain.steps_per_epoch and max_epochs must be positive".into()));
        }
        if self.valid_cap == 0 {
            return Err(Error::Config("pretrain.valid_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Loss value and gradients w.r.t. each input matrix.
#[derive(Clone, Debug)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub d_seq: Array2<f64>,
    pub d_pos: Array2<f64>,
    pub d_semi: Option<Array2<f64>>,
}

fn check_unit_rows(name: &str, x: ArrayView2<f64>) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Contract(format!("{name} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// In-batch contrastive loss with an optional per-row hard negative.
///
/// Row `j` contributes `-log(exp(a_jj) / (exp(b_j) + sum_j' exp(a_jj')))` with
/// `a_jj' = s_j . v_j' / tau` and `b_j = s_j . semi_j / tau`; the result is the
/// mean over rows. All rows must be unit length.
pub fn contrastive_loss(
    seq: ArrayView2<f64>,
    pos: ArrayView2<f64>,
    semi: Option<ArrayView2<f64>>,
    tau: f64,
) -> Result<ContrastiveLoss> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (b, d) = seq.dim();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if pos.dim() != (b, d) || semi.is_some_and(|m| m.dim() != (b, d)) {
        return Err(Error::Config("contrastive inputs must share one B x d shape".into()));
    }
    check_unit_rows("sequence", seq)?;
    check_unit_rows("positive", pos)?;
    if let Some(m) = semi {
        check_unit_rows("semi-synthetic", m)?;
    }

    let logits = seq.dot(&pos.t()) / tau;
    let mut d_logits = Array2::zeros((b, b));
    let mut d_semi_logit = Array1::zeros(b);
    let mut loss = 0.0;
    for j in 0..b {
        let row = logits.row(j);
        let extra = semi.map(|m| seq.row(j).dot(&m.row(j)) / tau);
        let max = row.fold(extra.unwrap_or(f64::NEG_INFINITY), |a, &x| a.max(x));
        let mut z = row.iter().map(|&x| (x - max).exp()).sum::<f64>();
        if let Some(e) = extra {
            z += (e - max).exp();
        }
        let lse = max + z.ln();
        loss += lse - row[j];
        for (k, &x) in row.iter().enumerate() {
            d_logits[[j, k]] = (x - lse).exp() / b as f64;
        }
        d_logits[[j, j]] -= 1.0 / b as f64;
        if let Some(e) = extra {
            d_semi_logit[j] = (e - lse).exp() / b as f64;
        }
    }
    let mut d_seq = d_logits.dot(&pos) / tau;
    let d_pos = d_logits.t().dot(&seq) / tau;
    let d_semi = semi.map(|m| {
        let mut g = m.to_owned();
        for (j, mut row) in g.rows_mut().into_iter().enumerate() {
            row.assign(&(&seq.row(j) * (d_semi_logit[j] / tau)));
        }
        for j in 0..b {
            d_seq.row_mut(j).scaled_add(d_semi_logit[j] / tau, &m.row(j));
        }
        g
    });
    Ok(ContrastiveLoss {
        loss: loss / b as f64,
        d_seq,
        d_pos,
        d_semi,
    })
}

/// A fixed, seeded subset of at most `cap` sequence indices (all when `n <= cap`).
pub fn validation_subset(n: usize, cap: usize, seed: u64) -> Option<Vec<usize>> {
    if n <= cap {
        return None;
    }
    let mut rng = seeded_rng(seed ^ 0x5eed_0f_7a11d);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    Some(idx)
}

/// A randomly initialized checkpoint around a trained codebook.
pub fn initial_checkpoint(
    codebook: OpqCodebook,
    codes: ItemCodeTable,
    encoder: &EncoderConfig,
    tau: f64,
    seed: u64,
) -> Result<Checkpoint> {
    let table = CodeEmbeddingTable::init(
        codebook.num_subspaces(),
        codebook.num_centroids(),
        encoder.dim,
        seed.wrapping_add(1),
    )?;
    let encoder = EncoderParams::init(encoder, seed.wrapping_add(2))?;
    let ckpt = Checkpoint {
        config: String::new(),
        tau,
        codebook,
        codes,
        table,
        encoder,
        optimizer: None,
        log: Vec::new(),
        alignment: None,
        source: None,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub(crate) fn adam_sizes(table: &CodeEmbeddingTable, encoder: &EncoderParams) -> Vec<usize> {
    let mut sizes = vec![table.weights.len()];
    sizes.extend(encoder.tensors().iter().map(|t| t.len()));
    sizes
}

pub(crate) fn scatter_item_grads(grad: &mut Array3<f64>, codes: &ItemCodeTable, item: ItemId, g: ArrayView1<f64>) {
    scatter_code_grad(grad, codes.row(item), g);
}

struct Forwarded {
    output: Array1<f64>,
    cache: crate::seqencoder::ForwardCache,
}

struct ChunkGrads {
    encoder: EncoderParams,
    table: Array3<f64>,
}

/// One optimizer step on a sampled batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    ckpt: &mut Checkpoint,
    adam: &mut Adam,
    sampler: &BatchSampler,
    split: &SplitDataset,
    cfg: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let batch = sampler.sample(split, cfg.batch_size, rng)?;
    let b = batch.len();
    let d = ckpt.encoder.config.dim;
    let m = ckpt.table.num_centroids();
    let reps = ckpt.table.item_reps(&ckpt.codes)?;

    let mut pos = Array2::zeros((b, d));
    for (j, &t) in batch.targets.iter().enumerate() {
        pos.row_mut(j).assign(&reps.row(t));
    }
    let semi_codes: Option<Vec<Vec<usize>>> = (!cfg.disable_semi_synthetic).then(|| {
        batch
            .targets
            .iter()
            .map(|&t| semi_synthetic_indices(ckpt.codes.row(t), cfg.rho, m, rng))
            .collect()
    });
    let semi = semi_codes.as_ref().map(|codes| {
        let mut out = Array2::zeros((b, d));
        for (j, c) in codes.iter().enumerate() {
            out.row_mut(j).assign(&ckpt.table.pool(c));
        }
        out
    });
    let dropout_seeds: Vec<u64> = if ckpt.encoder.config.dropout > 0.0 {
        (0..b).map(|_| rng.gen()).collect()
    } else {
        Vec::new()
    };

    let chunks: Vec<Vec<usize>> = (0..b).collect::<Vec<_>>().chunks(CHUNK).map(<[usize]>::to_vec).collect();
    let encoder = &ckpt.encoder;
    let forwarded = ordered_map(cfg.threads, &chunks, |chunk| -> Result<Vec<Forwarded>> {
        chunk
            .iter()
            .map(|&j| {
                let ctx = &batch.contexts[j];
                let mut inputs = Array2::zeros((ctx.len(), d));
                for (t, &item) in ctx.iter().enumerate() {
                    inputs.row_mut(t).assign(&reps.row(item));
                }
                let mut drng = dropout_seeds.get(j).map(|&s| seeded_rng(s));
                let (out, cache) = forward(encoder, inputs.view(), drng.as_mut())?;
                Ok(Forwarded {
                    output: out.row(ctx.len() - 1).to_owned(),
                    cache,
                })
            })
            .collect()
    });
    let forwarded: Vec<Vec<Forwarded>> = forwarded.into_iter().collect::<Result<_>>()?;

    let mut seq = Array2::zeros((b, d));
    for (j, f) in forwarded.iter().flatten().enumerate() {
        seq.row_mut(j).assign(&f.output);
    }
    let (seq_n, seq_norm) = normalize_rows(seq.view());
    let (pos_n, pos_norm) = normalize_rows(pos.view());
    let semi_n = semi.as_ref().map(|x| normalize_rows(x.view()));
    let out = contrastive_loss(
        seq_n.view(),
        pos_n.view(),
        semi_n.as_ref().map(|(x, _)| x.view()),
        cfg.tau,
    )?;
    if !out.loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite contrastive loss {}", out.loss)));
    }
    let d_seq = normalize_rows_backward(seq_n.view(), seq_norm.view(), out.d_seq.view());
    let d_pos = normalize_rows_backward(pos_n.view(), pos_norm.view(), out.d_pos.view());

    let table_shape = ckpt.table.weights.dim();
    let codes = &ckpt.codes;
    let work: Vec<(&Vec<usize>, &Vec<Forwarded>)> = chunks.iter().zip(&forwarded).collect();
    let partial = ordered_map(cfg.threads, &work, |(chunk, fw)| {
        let mut g = ChunkGrads {
            encoder: encoder.zeros_like(),
            table: Array3::zeros(table_shape),
        };
        for (&j, f) in chunk.iter().zip(fw.iter()) {
            let t = batch.contexts[j].len();
            let mut d_out = Array2::zeros((t, d));
            d_out.row_mut(t - 1).assign(&d_seq.row(j));
            let d_in = backward(encoder, &f.cache, d_out.view(), Some(&mut g.encoder));
            for (row, &item) in d_in.rows().into_iter().zip(&batch.contexts[j]) {
                scatter_item_grads(&mut g.table, codes, item, row);
            }
        }
        g
    });

    let mut enc_grad = encoder.zeros_like();
    let mut table_grad = Array3::zeros(table_shape);
    for g in &partial {
        enc_grad.add_assign(&g.encoder);
        table_grad += &g.table;
    }
    for (j, &t) in batch.targets.iter().enumerate() {
        scatter_item_grads(&mut table_grad, codes, t, d_pos.row(j));
    }
    if let (Some((semi_x, semi_norm)), Some(ds), Some(sc)) = (&semi_n, &out.d_semi, &semi_codes) {
        let d_semi = normalize_rows_backward(semi_x.view(), semi_norm.view(), ds.view());
        for (j, c) in sc.iter().enumerate() {
            scatter_code_grad(&mut table_grad, c, d_semi.row(j));
        }
    }

    let mut params = vec![ckpt.table.weights.as_slice_mut().unwrap()];
    params.extend(ckpt.encoder.tensors_mut());
    let mut grads = vec![table_grad.as_slice().unwrap()];
    grads.extend(enc_grad.tensors());
    adam.update(params, grads);
    if !ckpt.encoder.is_finite() || ckpt.table.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    Ok(out.loss)
}

fn validation_ndcg(ckpt: &Checkpoint, split: &SplitDataset, subset: &Option<Vec<usize>>, threads: usize) -> Result<f64> {
    let model = Recommender::new(ckpt.encoder.clone(), &ckpt.table, &ckpt.codes, ckpt.tau)?;
    let opts = EvalOptions {
        ks: vec![10],
        subset: subset.clone(),
        threads,
        ..EvalOptions::default()
    };
    Ok(evaluate(&model, split, Stage::Valid, &opts)?.ndcg[0])
}

/// Contrastive pre-training from a fresh initialization.
///
/// `codes` are the codebook's codes for every item of `split`. The returned
/// checkpoint holds the parameters of the best validation epoch.
pub fn pretrain(
    split: &SplitDataset,
    codebook: &OpqCodebook,
    codes: &ItemCodeTable,
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    encoder.validate()?;
    if codes.num_items() != split.num_items {
        return Err(Error::Config(format!(
            "{} item codes for a corpus of {} items",
            codes.num_items(),
            split.num_items
        )));
    }
    let ckpt = initial_checkpoint(codebook.clone(), codes.clone(), encoder, cfg.tau, cfg.seed)?;
    pretrain_from(ckpt, split, cfg)
}

/// Continues contrastive training of an existing checkpoint.
pub fn pretrain_from(mut ckpt: Checkpoint, split: &SplitDataset, cfg: &PretrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    ckpt.validate()?;
    ckpt.tau = cfg.tau;
    let sampler = BatchSampler::new(split, ckpt.encoder.config.max_len, Sampling::WithReplacement)?;
    let subset = validation_subset(split.sequences.len(), cfg.valid_cap, cfg.seed);
    let mut adam = ckpt
        .optimizer
        .take()
        .filter(|a| a.sizes() == adam_sizes(&ckpt.table, &ckpt.encoder))
        .unwrap_or_else(|| Adam::new(cfg.lr, &adam_sizes(&ckpt.table, &ckpt.encoder)));
    adam.lr = cfg.lr;
    let mut rng = seeded_rng(cfg.seed);

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut bad_epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let loss = train_step(&mut ckpt, &mut adam, &sampler, split, cfg, &mut rng).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch} step {step}: {msg}")),
                other => other,
            })?;
            total += loss;
        }
        let loss = total / cfg.steps_per_epoch as f64;
        let ndcg = validation_ndcg(&ckpt, split, &subset, cfg.threads)?;
        let improved = best.as_ref().map_or(true, |(b, _)| ndcg > *b);
        let line = format!("stage=pretrain epoch={epoch} loss={loss:.6} valid_ndcg@10={ndcg:.6} improved={improved}");
        info!("{line}");
        ckpt.log.push(line);
        if improved {
            bad_epochs = 0;
            let mut snap = ckpt.clone();
            snap.optimizer = Some(adam.clone());
            best = Some((ndcg, snap));
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }
    let (_, mut out) = best.expect("at least one epoch runs");
    out.log = ckpt.log;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn unit_rows(b: usize, d: usize, rng: &mut SeededRng) -> Array2<f64> {
        let x = Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal));
        normalize_rows(x.view()).0
    }

    /// Straight-line per-row reference without max subtraction.
    fn naive(s: &Array2<f64>, v: &Array2<f64>, semi: Option<&Array2<f64>>, tau: f64) -> f64 {
        let b = s.nrows();
        let mut total = 0.0;
        for j in 0..b {
            let mut denom = 0.0;
            for k in 0..b {
                denom += (s.row(j).dot(&v.row(k)) / tau).exp();
            }
            if let Some(m) = semi {
                denom += (s.row(j).dot(&m.row(j)) / tau).exp();
            }
            total -= ((s.row(j).dot(&v.row(j)) / tau).exp() / denom).ln();
        }
        total / b as f64
    }

    #[test]
    fn orthogonal_single_row_gives_log_two() {
        let s = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let v = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        let m = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 1.0]).unwrap();
        let out = contrastive_loss(s.view(), v.view(), Some(m.view()), 0.07).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn dominant_positive_has_tiny_loss() {
        let tau = 0.05;
        // s1.v1 / tau = 20, everything else orthogonal
        let s = Array2::from_shape_vec((2, 4), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let v = Array2::from_shape_vec((2, 4), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = contrastive_loss(s.view(), v.view(), None, tau).unwrap();
        let row0 = -((20.0f64).exp() / ((20.0f64).exp() + 1.0)).ln();
        assert!(row0 < 3e-9);
        // row 1 has two equal logits
        assert!((out.loss - (row0 + 2f64.ln()) / 2.0).abs() < 1e-12);
        assert!(row0 < 1e-8);
    }

    #[test]
    fn matches_naive_reference_and_finite_differences() {
        let mut rng = seeded_rng(8);
        let (b, d, tau) = (4, 8, 0.3);
        let s = unit_rows(b, d, &mut rng);
        let v = unit_rows(b, d, &mut rng);
        let m = unit_rows(b, d, &mut rng);
        let out = contrastive_loss(s.view(), v.view(), Some(m.view()), tau).unwrap();
        assert!((out.loss - naive(&s, &v, Some(&m), tau)).abs() < 1e-12);
        let out_plain = contrastive_loss(s.view(), v.view(), None, tau).unwrap();
        assert!((out_plain.loss - naive(&s, &v, None, tau)).abs() < 1e-12);

        // the loss is a function of raw dot products, so unit rows are not
        // required for differentiation; use the naive form as the oracle
        let h = 1e-6;
        let grads = [&out.d_seq, &out.d_pos, out.d_semi.as_ref().unwrap()];
        for which in 0..3 {
            for i in 0..b {
                for k in 0..d {
                    let mut inputs = [s.clone(), v.clone(), m.clone()];
                    inputs[which][[i, k]] += h;
                    let fp = naive(&inputs[0], &inputs[1], Some(&inputs[2]), tau);
                    inputs[which][[i, k]] -= 2.0 * h;
                    let fm = naive(&inputs[0], &inputs[1], Some(&inputs[2]), tau);
                    let fd = (fp - fm) / (2.0 * h);
                    let an = grads[which][[i, k]];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-4, "input {which} [{i},{k}]: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let s = Array2::from_elem((2, 2), 1.0);
        let v = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            contrastive_loss(s.view(), v.view(), None, 0.1),
            Err(Error::Contract(_))
        ));
        assert!(contrastive_loss(v.view(), v.view(), None, 0.0).is_err());
    }

    #[test]
    fn loss_is_positive_and_argmax_is_tau_invariant() {
        let mut rng = seeded_rng(9);
        for _ in 0..20 {
            let s = unit_rows(5, 6, &mut rng);
            let v = unit_rows(5, 6, &mut rng);
            let m = unit_rows(5, 6, &mut rng);
            for tau in [0.01, 0.07, 1.0, 10.0] {
                assert!(contrastive_loss(s.view(), v.view(), Some(m.view()), tau).unwrap().loss > 0.0);
            }
            let l = s.dot(&v.t());
            let argmax = |r: ArrayView1<f64>| r.iter().enumerate().fold(0, |bi, (i, &x)| if x > r[bi] { i } else { bi });
            let (la, lb) = (&l / 0.07, &l / 0.5);
            for j in 0..5 {
                assert_eq!(argmax(la.row(j)), argmax(lb.row(j)));
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = PretrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            PretrainConfig { batch_size: 1, ..ok.clone() },
            PretrainConfig { tau: 0.0, ..ok.clone() },
            PretrainConfig { rho: 1.5, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn validation_subset_is_fixed_and_capped() {
        assert!(validation_subset(10, 20, 1).is_none());
        let a = validation_subset(100, 20, 1).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, validation_subset(100, 20, 1).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
