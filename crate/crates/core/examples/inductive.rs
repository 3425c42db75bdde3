//! Inductive recommendation: items that never appeared during fine-tuning are
//! added afterwards by encoding their text embeddings with the downstream
//! codebook. No parameter changes, and the extended model scores them exactly
//! as a model rebuilt from scratch would.
//!
//! ```text
//! cargo run --release --example inductive
//! ```

use pqrec::corpus::{hold_out_items, leave_one_out_split, synth_corpus, Stage, SynthConfig};
use pqrec::evaluator::{evaluate, EvalOptions};
use pqrec::model::Recommender;
use pqrec::pretrain::{pretrain, PretrainConfig};
use pqrec::quantizer::{train_opq, OpqParams};
use pqrec::seqencoder::EncoderConfig;
use pqrec::transfer::{inductive_extend, transfer, FinetuneConfig};

fn main() -> pqrec::Result<()> {
    let synth = SynthConfig {
        users_per_domain: 1000,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth, 9)?;
    let (pre_ds, pre_emb) = corpus.subset(&[0, 1, 2])?;
    let (tgt_ds, tgt_emb) = corpus.subset(&[3])?;
    let opq = OpqParams::default();
    let codebook = train_opq(&pre_emb, &opq, 9)?.codebook;
    let codes = codebook.encode_all(&pre_emb)?;
    let pcfg = PretrainConfig {
        max_epochs: 8,
        seed: 9,
        ..PretrainConfig::default()
    };
    let ckpt = pretrain(&leave_one_out_split(&pre_ds)?, &codebook, &codes, &EncoderConfig::default(), &pcfg)?;

    let held = hold_out_items(&tgt_ds, 0.1, 9)?;
    let emb = tgt_emb.select_rows(held.order.iter().copied());
    let known_emb = emb.select_rows(0..held.num_known);
    let new_emb = emb.select_rows(held.num_known..emb.rows());
    println!("{} known items, {} held out", held.num_known, new_emb.rows());

    let ft = FinetuneConfig {
        seed: 9,
        ..FinetuneConfig::default()
    };
    let tuned = transfer(&ckpt, &leave_one_out_split(&held.known)?, &known_emb, &opq, &ft)?;
    let extended = inductive_extend(&tuned, &new_emb)?;
    println!("catalog grows from {} to {} items", tuned.codes.num_items(), extended.codes.num_items());

    let incremental = Recommender::new(extended.encoder.clone(), &extended.table, &extended.codes, extended.tau)?;
    let rebuilt_codes = tuned.codebook.encode_all(&emb)?;
    let rebuilt = Recommender::new(tuned.encoder.clone(), &tuned.table, &rebuilt_codes, tuned.tau)?;
    let split = leave_one_out_split(&held.full)?;
    let mut max_diff: f64 = 0.0;
    for s in split.sequences.iter().take(200) {
        let a = incremental.score(s.context(Stage::Test))?;
        let b = rebuilt.score(s.context(Stage::Test))?;
        max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(max_diff, f64::max);
    }
    println!("max |score difference| against a rebuilt model: {max_diff:e}");

    let subset: Vec<usize> = (0..split.sequences.len())
        .filter(|&i| held.is_new(split.sequences[i].target(Stage::Test)))
        .collect();
    let opts = EvalOptions {
        subset: Some(subset),
        ..EvalOptions::default()
    };
    let report = evaluate(&incremental, &split, Stage::Test, &opts)?;
    println!("\ntest instances whose target is a new item:\n{report}");
    Ok(())
}
