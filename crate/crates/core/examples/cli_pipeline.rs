//! Drives the command-line front end through a complete run in a scratch
//! directory: synth, quantize, stats, pretrain, align, finetune, eval and
//! extend, with a small config file of overrides.
//!
//! ```text
//! cargo run --release --example cli_pipeline
//! ```

use std::fs;

fn pqrec(args: &[&str]) {
    let mut argv = vec!["pqrec"];
    argv.extend_from_slice(args);
    println!("$ {}", argv.join(" "));
    let code = pqrec::cli::run(argv);
    assert_eq!(code, 0, "command failed");
}

fn main() -> std::io::Result<()> {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let dir = std::env::temp_dir().join("pqrec-cli-example");
    fs::create_dir_all(&dir)?;
    let config = dir.join("small.conf");
    fs::write(
        &config,
        format!(
            "# quick run\nrun.workdir = {}\nsynth.users_per_domain = 500\npretrain.max_epochs = 3\ntransfer.align_epochs = 1\ntransfer.table_epochs = 2\n",
            dir.display()
        ),
    )?;
    let c = config.to_str().unwrap();

    pqrec(&["synth", "--config", c, "--out-dir", "data"]);
    pqrec(&["quantize", "--config", c, "--embeddings", "data/pretrain.fvecs", "--out", "codebook.bin"]);
    pqrec(&["stats", "--config", c, "--codebook", "codebook.bin"]);
    pqrec(&["pretrain", "--config", c, "--interactions", "data/pretrain.tsv", "--codebook", "codebook.bin", "--out", "pretrained.ckpt"]);
    pqrec(&[
        "align", "--config", c, "--checkpoint", "pretrained.ckpt", "--interactions", "data/target.tsv", "--embeddings",
        "data/target.fvecs", "--out", "aligned.ckpt",
    ]);
    pqrec(&["finetune", "--config", c, "--checkpoint", "aligned.ckpt", "--interactions", "data/target.tsv", "--out", "target.ckpt"]);
    pqrec(&["eval", "--config", c, "--checkpoint", "target.ckpt", "--interactions", "data/target.tsv", "--out", "report.txt"]);
    pqrec(&["extend", "--config", c, "--checkpoint", "target.ckpt", "--embeddings", "data/target.fvecs", "--out", "extended.ckpt"]);

    println!("\nmissing input exits with status {}", pqrec::cli::run(["pqrec", "stats", "--codebook", "/nonexistent/codebook.bin"]));
    println!("artifacts in {}", dir.display());
    Ok(())
}
