//! Code-embedding alignment.
//!
//! First a toy problem: recover a hidden row permutation of a matrix by
//! gradient descent through Gumbel-Sinkhorn. Then the real use: a pre-trained
//! model meets target codes whose centroid labels were shuffled, and the
//! alignment stage learns to route each code index back to the right
//! pre-trained embedding row.
//!
//! ```text
//! cargo run --release --example alignment
//! ```

use ndarray::Array2;
use pqrec::corpus::{leave_one_out_split, synth_corpus, Stage, SynthConfig};
use pqrec::evaluator::{evaluate, EvalOptions};
use pqrec::model::Recommender;
use pqrec::optim::Adam;
use pqrec::pretrain::{pretrain, PretrainConfig};
use pqrec::quantizer::{train_opq, OpqParams};
use pqrec::seqencoder::EncoderConfig;
use pqrec::transfer::{align_stage, finetune_stage, gumbel_sinkhorn, harden_permutation, permuted_downstream, FinetuneConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn toy(m: usize, dim: usize) -> pqrec::Result<()> {
    let mut rng = pqrec::seeded_rng(1);
    let a = Array2::from_shape_simple_fn((m, dim), || rng.sample::<f64, _>(StandardNormal));
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let b = Array2::from_shape_fn((m, dim), |(i, j)| a[[perm[i], j]]);

    let mut theta = Array2::from_shape_simple_fn((m, m), || 0.1 * rng.sample::<f64, _>(StandardNormal));
    let mut adam = Adam::new(0.1, &[m * m]);
    for step in 0..=300 {
        let s = gumbel_sinkhorn(theta.view(), 0.1, 3, 1.0, &mut rng)?;
        let resid = s.pi.dot(&a) - &b;
        let d_theta = s.backward(resid.dot(&a.t()).view());
        adam.update(vec![theta.as_slice_mut().unwrap()], vec![d_theta.as_slice().unwrap()]);
        if step % 100 == 0 {
            let clean = gumbel_sinkhorn(theta.view(), 0.1, 3, 0.0, &mut rng)?;
            let err = (clean.pi.dot(&a) - &b).mapv(|x| x * x).sum() / 2.0;
            println!("step {step:>3}: noiseless loss {err:.4}");
        }
    }
    let hard = harden_permutation(gumbel_sinkhorn(theta.view(), 0.1, 20, 0.0, &mut rng)?.pi.view());
    let recovered = (0..m).filter(|&i| hard[[i, perm[i]]] == 1.0).count();
    println!("recovered {recovered}/{m} rows of the hidden permutation\n");
    Ok(())
}

fn main() -> pqrec::Result<()> {
    toy(16, 8)?;

    let synth = SynthConfig {
        users_per_domain: 1000,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth, 5)?;
    let (pre_ds, pre_emb) = corpus.subset(&[0, 1, 2])?;
    let (tgt_ds, tgt_emb) = corpus.subset(&[3])?;
    let pre = leave_one_out_split(&pre_ds)?;
    let tgt = leave_one_out_split(&tgt_ds)?;
    let codebook = train_opq(&pre_emb, &OpqParams::default(), 5)?.codebook;
    let codes = codebook.encode_all(&pre_emb)?;
    let pcfg = PretrainConfig {
        max_epochs: 10,
        seed: 5,
        ..PretrainConfig::default()
    };
    println!("pre-training...");
    let ckpt = pretrain(&pre, &codebook, &codes, &EncoderConfig::default(), &pcfg)?;

    let (down, _) = permuted_downstream(&ckpt, &tgt_emb, 5)?;
    let ft = FinetuneConfig {
        seed: 5,
        ..FinetuneConfig::default()
    };
    let test_ndcg = |table: &pqrec::itemrep::CodeEmbeddingTable| -> pqrec::Result<f64> {
        let model = Recommender::new(ckpt.encoder.clone(), table, &down.codes, ckpt.tau)?;
        Ok(evaluate(&model, &tgt, Stage::Test, &EvalOptions::default())?.ndcg[0])
    };

    let alignment = align_stage(&ckpt, &tgt, &down, &ft)?;
    let aligned_table = ckpt.table.aligned(&alignment.permutations(false)?)?;
    println!("\nzero-shot test NDCG@10 on shuffled codes");
    println!("  identity alignment  {:.4}", test_ndcg(&ckpt.table)?);
    println!("  learned alignment   {:.4}", test_ndcg(&aligned_table)?);

    let with = finetune_stage(&ckpt, Some(&alignment), &tgt, &down, &ft)?;
    let without = finetune_stage(&ckpt, None, &tgt, &down, &ft)?;
    println!("after fine-tuning the table");
    println!("  skip alignment      {:.4}", test_ndcg(&without.table)?);
    println!("  with alignment      {:.4}", test_ndcg(&with.table)?);
    Ok(())
}
