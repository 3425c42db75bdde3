//! Transfer ablation on a synthetic target domain: the full pipeline against
//! variants without pre-training, without semi-synthetic negatives, without
//! fine-tuning, reusing the pre-training codebook, without alignment, and with
//! random codes.
//!
//! ```text
//! cargo run --release --example ablation -- [seed] [pretrain_epochs]
//! ```

use pqrec::ablation::{run_ablation, Variant};
use pqrec::config::GlobalConfig;
use pqrec::corpus::{leave_one_out_split, synth_corpus};
use pqrec::pretrain::{pretrain, PretrainConfig};
use pqrec::quantizer::train_opq;

fn main() -> pqrec::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);

    let mut cfg = GlobalConfig::default();
    cfg.run.seed = seed;
    cfg.pretrain.max_epochs = epochs;
    cfg.validate()?;

    let corpus = synth_corpus(&cfg.synth, seed)?;
    let (pre_ds, pre_emb) = corpus.subset(&cfg.study.pretrain_domains)?;
    let (tgt_ds, tgt_emb) = corpus.subset(&cfg.study.target_domains)?;
    let pre = leave_one_out_split(&pre_ds)?;
    let tgt = leave_one_out_split(&tgt_ds)?;
    let codebook = train_opq(&pre_emb, &cfg.quantizer, seed)?.codebook;
    let codes = codebook.encode_all(&pre_emb)?;

    let pcfg = cfg.pretrain_config();
    let ckpt = pretrain(&pre, &codebook, &codes, &cfg.encoder, &pcfg)?;
    let no_semi_cfg = PretrainConfig {
        disable_semi_synthetic: true,
        ..pcfg
    };
    let no_semi = pretrain(&pre, &codebook, &codes, &cfg.encoder, &no_semi_cfg)?;

    let report = run_ablation(
        &ckpt,
        Some(&no_semi),
        &tgt,
        &tgt_emb,
        &cfg.quantizer,
        &cfg.finetune_config(),
        &cfg.eval_options(),
        &Variant::ALL,
    )?;
    println!("{report}");
    Ok(())
}
