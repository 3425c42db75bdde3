#![allow(dead_code)]

use pqrec::checkpoint::Checkpoint;
use pqrec::corpus::{leave_one_out_split, synth_corpus, SplitDataset, SynthConfig, TextEmbeddingMatrix};
use pqrec::pretrain::{pretrain, PretrainConfig};
use pqrec::quantizer::{train_opq, OpqParams};
use pqrec::seqencoder::EncoderConfig;
use pqrec::transfer::FinetuneConfig;

pub struct Tiny {
    pub pre: SplitDataset,
    pub tgt: SplitDataset,
    pub tgt_emb: TextEmbeddingMatrix,
    pub opq: OpqParams,
    pub ckpt: Checkpoint,
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        num_domains: 3,
        items_per_domain: 120,
        users_per_domain: 250,
        ..SynthConfig::default()
    }
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        max_len: 10,
        dropout: 0.0,
    }
}

pub fn tiny_opq() -> OpqParams {
    OpqParams {
        num_subspaces: 4,
        num_centroids: 8,
        outer_iters: 3,
        kmeans_iters: 20,
    }
}

pub fn tiny_pretrain(seed: u64) -> PretrainConfig {
    PretrainConfig {
        batch_size: 32,
        max_epochs: 2,
        steps_per_epoch: 5,
        seed,
        ..PretrainConfig::default()
    }
}

pub fn tiny_finetune(seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        align_epochs: 1,
        table_epochs: 2,
        batch_size: 32,
        seed,
        ..FinetuneConfig::default()
    }
}

/// Two pre-training domains, one target domain, a briefly pre-trained model.
pub fn tiny(seed: u64) -> Tiny {
    let corpus = synth_corpus(&tiny_synth(), seed).unwrap();
    let (pre_ds, pre_emb) = corpus.subset(&[0, 1]).unwrap();
    let (tgt_ds, tgt_emb) = corpus.subset(&[2]).unwrap();
    let pre = leave_one_out_split(&pre_ds).unwrap();
    let tgt = leave_one_out_split(&tgt_ds).unwrap();
    let opq = tiny_opq();
    let codebook = train_opq(&pre_emb, &opq, seed).unwrap().codebook;
    let codes = codebook.encode_all(&pre_emb).unwrap();
    let ckpt = pretrain(&pre, &codebook, &codes, &tiny_encoder(), &tiny_pretrain(seed)).unwrap();
    Tiny {
        pre,
        tgt,
        tgt_emb,
        opq,
        ckpt,
    }
}
