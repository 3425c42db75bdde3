//! Generates a four-domain synthetic corpus, prints per-domain statistics and
//! writes the pre-training and target parts to disk in the interchange formats
//! (`user<TAB>domain<TAB>items` and `.fvecs`).
//!
//! ```text
//! cargo run --release --example synth_corpus -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use pqrec::corpus::{leave_one_out_split, read_fvecs, synth_corpus, write_fvecs, write_interactions, SynthConfig};

fn main() -> pqrec::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_out".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);

    let cfg = SynthConfig::default();
    let corpus = synth_corpus(&cfg, seed)?;
    println!(
        "{} domains x {} items, {} shared of {} latent dims",
        cfg.num_domains,
        cfg.items_per_domain,
        cfg.shared_latent_dims(),
        cfg.latent_dim
    );

    for d in 0..cfg.num_domains as u32 {
        let (ds, _) = corpus.subset(&[d])?;
        let split = leave_one_out_split(&ds)?;
        let pop = split.train_popularity();
        let cold = pop.iter().filter(|&&c| c < 5).count();
        println!(
            "domain {d}: {} users, {} interactions, avg len {:.1}, {cold} items with <5 training interactions",
            ds.sequences.len(),
            ds.num_interactions(),
            ds.num_interactions() as f64 / ds.sequences.len() as f64
        );
    }

    std::fs::create_dir_all(&out)?;
    let (pre, pre_emb) = corpus.subset(&[0, 1, 2])?;
    let (tgt, tgt_emb) = corpus.subset(&[3])?;
    write_interactions(&out.join("pretrain.tsv"), &pre)?;
    write_fvecs(&out.join("pretrain.fvecs"), &pre_emb)?;
    write_interactions(&out.join("target.tsv"), &tgt)?;
    write_fvecs(&out.join("target.fvecs"), &tgt_emb)?;

    let back = read_fvecs(&out.join("target.fvecs"))?;
    assert_eq!(back, tgt_emb);
    println!("wrote {} (embedding round trip is exact)", out.display());
    Ok(())
}
