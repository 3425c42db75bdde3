//! Side-by-side comparison of transfer variants on one downstream corpus.

use std::fmt;

use log::info;

use crate::checkpoint::Checkpoint;
use crate::corpus::{SplitDataset, Stage, TextEmbeddingMatrix};
use crate::error::Result;
use crate::evaluator::{evaluate, EvalOptions, EvalReport};
use crate::model::Recommender;
use crate::quantizer::OpqParams;
use crate::transfer::{transfer, FinetuneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoPretrain,
    NoSemiSynthetic,
    NoFinetune,
    ReuseCodebook,
    NoAlignment,
    RandomCode,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPretrain,
        Variant::NoSemiSynthetic,
        Variant::NoFinetune,
        Variant::ReuseCodebook,
        Variant::NoAlignment,
        Variant::RandomCode,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "w/o pre-training",
            Variant::NoSemiSynthetic => "w/o semi-synthetic NS",
            Variant::NoFinetune => "w/o fine-tuning",
            Variant::ReuseCodebook => "reuse PQ index set",
            Variant::NoAlignment => "w/o code-emb alignment",
            Variant::RandomCode => "random code",
        }
    }

    /// Transfer flags for this variant on top of `base`.
    pub fn finetune_config(self, base: &FinetuneConfig) -> FinetuneConfig {
        let mut cfg = FinetuneConfig {
            skip_alignment: false,
            random_code: false,
            reuse_pretrain_codebook: false,
            no_pretrain: false,
            ..base.clone()
        };
        match self {
            Variant::Full | Variant::NoSemiSynthetic => {}
            Variant::NoPretrain => cfg.no_pretrain = true,
            Variant::NoFinetune => {
                cfg.skip_alignment = true;
                cfg.table_epochs = 0;
            }
            Variant::ReuseCodebook => cfg.reuse_pretrain_codebook = true,
            Variant::NoAlignment => cfg.skip_alignment = true,
            Variant::RandomCode => cfg.random_code = true,
        }
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<(Variant, EvalReport)>,
    /// Variants that could not run, with the reason.
    pub skipped: Vec<(Variant, String)>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&EvalReport> {
        self.rows.iter().find(|(x, _)| *x == v).map(|(_, r)| r)
    }
}

/// Runs `variants` against the target split. `no_semi` is a checkpoint
/// pre-trained without semi-synthetic negatives; without it that variant is
/// skipped.
pub fn run_ablation(
    pretrained: &Checkpoint,
    no_semi: Option<&Checkpoint>,
    split: &SplitDataset,
    embeddings: &TextEmbeddingMatrix,
    opq: &OpqParams,
    cfg: &FinetuneConfig,
    eval: &EvalOptions,
    variants: &[Variant],
) -> Result<AblationReport> {
    let mut report = AblationReport {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for &v in variants {
        let source = match (v, no_semi) {
            (Variant::NoSemiSynthetic, Some(c)) => c,
            (Variant::NoSemiSynthetic, None) => {
                let why = "needs a checkpoint pre-trained with semi-synthetic negatives disabled".to_string();
                info!("stage=ablate variant={:?} skipped=true reason={why:?}", v.label());
                report.skipped.push((v, why));
                continue;
            }
            _ => pretrained,
        };
        let out = transfer(source, split, embeddings, opq, &v.finetune_config(cfg))?;
        let model = Recommender::new(out.encoder.clone(), &out.table, &out.codes, out.tau)?;
        let r = evaluate(&model, split, Stage::Test, eval)?;
        info!(
            "stage=ablate variant={:?} ndcg@{}={:.6}",
            v.label(),
            r.ks[0],
            r.ndcg[0]
        );
        report.rows.push((v, r));
    }
    Ok(report)
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ks = self.rows.first().map(|(_, r)| r.ks.clone()).unwrap_or_default();
        write!(f, "{:<26}", "variant")?;
        for k in &ks {
            write!(f, "{:>10}{:>10}", format!("R@{k}"), format!("N@{k}"))?;
        }
        writeln!(f)?;
        for (i, (v, r)) in self.rows.iter().enumerate() {
            write!(f, "({i}) {:<22}", v.label())?;
            for (a, b) in r.recall.iter().zip(&r.ndcg) {
                write!(f, "{a:>10.4}{b:>10.4}")?;
            }
            writeln!(f)?;
        }
        for (v, why) in &self.skipped {
            writeln!(f, "skipped {}: {why}", v.label())?;
        }
        Ok(())
    }
}
