//! Contrastive pre-training on three synthetic domains, with and without
//! semi-synthetic hard negatives, followed by a checkpoint round trip.
//!
//! ```text
//! cargo run --release --example pretrain -- [epochs]
//! ```

use pqrec::checkpoint::{load_checkpoint, save_checkpoint};
use pqrec::corpus::{leave_one_out_split, synth_corpus, Stage, SynthConfig};
use pqrec::evaluator::{evaluate, EvalOptions};
use pqrec::model::Recommender;
use pqrec::pretrain::{pretrain, PretrainConfig};
use pqrec::quantizer::{train_opq, OpqParams};
use pqrec::seqencoder::EncoderConfig;

fn main() -> pqrec::Result<()> {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);

    let synth = SynthConfig {
        num_domains: 3,
        users_per_domain: 1000,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth, 3)?;
    let split = leave_one_out_split(&corpus.dataset)?;
    let codebook = train_opq(&corpus.embeddings, &OpqParams::default(), 3)?.codebook;
    let codes = codebook.encode_all(&corpus.embeddings)?;
    let encoder = EncoderConfig::default();

    let mut results = Vec::new();
    for disable in [false, true] {
        let cfg = PretrainConfig {
            max_epochs: epochs,
            disable_semi_synthetic: disable,
            seed: 3,
            ..PretrainConfig::default()
        };
        let ckpt = pretrain(&split, &codebook, &codes, &encoder, &cfg)?;
        let model = Recommender::new(ckpt.encoder.clone(), &ckpt.table, &ckpt.codes, ckpt.tau)?;
        let report = evaluate(&model, &split, Stage::Test, &EvalOptions::default())?;
        results.push((disable, report, ckpt));
    }
    for (disable, report, _) in &results {
        let name = if *disable { "in-batch only" } else { "with semi-synthetic" };
        println!("{name:<20} test NDCG@10 {:.4}  Recall@10 {:.4}", report.ndcg_at(10).unwrap(), report.recall_at(10).unwrap());
    }

    let ckpt = &results[0].2;
    println!("\ntraining log:");
    for line in &ckpt.log {
        println!("  {line}");
    }
    let dir = tempfile_dir();
    let path = dir.join("pretrained.ckpt");
    save_checkpoint(ckpt, &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(&back, ckpt);
    println!("\nsaved {} ({} bytes), reload is identical", path.display(), std::fs::metadata(&path)?.len());
    println!("provenance {}", ckpt.provenance_hash());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("pqrec-pretrain-example");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
