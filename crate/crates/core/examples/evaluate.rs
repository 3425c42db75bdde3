//! Full-catalog ranking metrics: closed-form values for single ranks, then a
//! report with a popularity breakdown for a briefly pre-trained model, in both
//! the pretty and the key=value form.
//!
//! ```text
//! cargo run --release --example evaluate
//! ```

use pqrec::corpus::{leave_one_out_split, synth_corpus, Stage, SynthConfig};
use pqrec::evaluator::{evaluate, ndcg_at_k, rank_target, recall_at_k, EvalOptions, EvalReport, DEFAULT_BUCKET_EDGES};
use pqrec::model::Recommender;
use pqrec::pretrain::{pretrain, PretrainConfig};
use pqrec::quantizer::{train_opq, OpqParams};
use pqrec::seqencoder::EncoderConfig;

fn main() -> pqrec::Result<()> {
    for rank in [1, 3, 10, 11] {
        println!("rank {rank:>2}: Recall@10 {:.4}  NDCG@10 {:.4}", recall_at_k(rank, 10), ndcg_at_k(rank, 10));
    }
    let scores = ndarray::arr1(&[0.3, 0.9, 0.3, 0.1]);
    println!("ties rank pessimistically: target 0 of {scores} ranks {}\n", rank_target(scores.view(), 0)?);

    let synth = SynthConfig {
        num_domains: 2,
        users_per_domain: 800,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth, 2)?;
    let split = leave_one_out_split(&corpus.dataset)?;
    let codebook = train_opq(&corpus.embeddings, &OpqParams::default(), 2)?.codebook;
    let codes = codebook.encode_all(&corpus.embeddings)?;
    let cfg = PretrainConfig {
        max_epochs: 4,
        seed: 2,
        ..PretrainConfig::default()
    };
    let ckpt = pretrain(&split, &codebook, &codes, &EncoderConfig::default(), &cfg)?;
    let model = Recommender::new(ckpt.encoder.clone(), &ckpt.table, &ckpt.codes, ckpt.tau)?;

    let opts = EvalOptions {
        bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &split, Stage::Test, &opts)?;
    println!("{report}\n");
    let kv = report.to_kv();
    print!("{kv}");
    assert_eq!(EvalReport::from_kv(&kv)?, report);

    let filtered = evaluate(
        &model,
        &split,
        Stage::Test,
        &EvalOptions {
            exclude_context: true,
            ..opts
        },
    )?;
    println!("\nexcluding already-seen items: NDCG@10 {:.4}", filtered.ndcg_at(10).unwrap());
    Ok(())
}
