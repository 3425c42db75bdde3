//! Optimized product quantization of item text embeddings: compares the
//! learned rotation against plain PQ and reports how evenly the codes use
//! every sub-space.
//!
//! ```text
//! cargo run --release --example quantize
//! ```

use pqrec::corpus::{synth_corpus, SynthConfig};
use pqrec::quantizer::{code_stats, train_opq, OpqParams};

fn main() -> pqrec::Result<()> {
    let corpus = synth_corpus(&SynthConfig::default(), 11)?;
    let emb = &corpus.embeddings;
    println!("{} items, d_W = {}", emb.rows(), emb.dim());

    let opq = OpqParams::default();
    let plain = OpqParams {
        outer_iters: 0,
        ..opq.clone()
    };
    let pq = train_opq(emb, &plain, 0)?;
    let trained = train_opq(emb, &opq, 0)?;
    println!(
        "reconstruction MSE: pq {:.5}  opq {:.5}",
        pq.error_trace.last().unwrap(),
        trained.error_trace.last().unwrap()
    );
    println!("rotation orthogonality error: {:.2e}", trained.codebook.orthogonality_error());
    print!("opq error by rotation update:");
    for e in &trained.error_trace {
        print!(" {e:.5}");
    }
    println!();

    let codes = trained.codebook.encode_all(emb)?;
    println!("\n{}", code_stats(&codes)?);
    println!("item 0 code: {:?}", codes.row(0));
    Ok(())
}
