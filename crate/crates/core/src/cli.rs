//! Command-line front end. Each subcommand runs one stage and writes its
//! artifact; the binary is a thin wrapper around [`run`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::ablation::{run_ablation, Variant};
use crate::checkpoint::{load_checkpoint, load_codebook, save_checkpoint, save_codebook, Checkpoint};
use crate::config::{GlobalConfig, Preset};
use crate::corpus::{
    leave_one_out_split, load_interactions, read_fvecs, synth_corpus, write_fvecs, write_interactions, LoadOptions,
    SplitDataset, Stage,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalReport};
use crate::model::Recommender;
use crate::pretrain::{pretrain, pretrain_from};
use crate::quantizer::{code_stats, train_opq};
use crate::transfer::{
    align_stage, aligned_checkpoint, downstream_codes, finetune_aligned, finetune_stage, fresh_like, inductive_extend,
    materialize,
};

#[derive(Debug, Parser)]
#[command(name = "pqrec", version, about = "Vector-quantized item codes and transferable sequential recommenders")]
pub struct Cli {
    /// Config file of `section.key = value` overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    pub preset: PresetArg,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `run.threads`.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replace relaxed permutations by hard assignments when applying an alignment.
    #[arg(long, global = true)]
    pub harden: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Valid,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved configuration.
    Config,
    /// Generate a synthetic multi-domain corpus split into pre-training and target parts.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train an OPQ codebook on text embeddings and encode every item.
    Quantize {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-dimension code entropy and collision statistics.
    Stats {
        #[arg(long)]
        codebook: PathBuf,
    },
    /// Contrastive multi-domain pre-training.
    Pretrain {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing pre-training checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Learn the code-embedding alignment for a target domain.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the code embedding table on the target domain.
    Finetune {
        /// Output of `align`, or a pre-trained checkpoint together with `--embeddings`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        /// Target item embeddings; fine-tunes without alignment.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank held-out targets and report Recall/NDCG.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Test)]
        stage: StageArg,
        /// Also write the report as key=value lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add new items to a checkpoint by encoding their embeddings.
    Extend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare transfer variants on the target domain.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Checkpoint pre-trained with semi-synthetic negatives disabled.
        #[arg(long)]
        no_semi_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit status:
/// 0 on success, 1 on runtime failure, 2 on invalid configuration or input.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

/// Resolves the effective configuration from preset, file and flags.
pub fn resolve_config(cli: &Cli) -> Result<GlobalConfig> {
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut cfg = match &cli.config {
        Some(p) => GlobalConfig::load(p, preset)?,
        None => GlobalConfig::preset(preset),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.run.threads = t;
    }
    if cli.harden {
        cfg.transfer.harden = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let p = |x: &Path| cfg.path(x);
    match &cli.command {
        Command::Config => print!("{cfg}"),
        Command::Synth { out_dir } => cmd_synth(&cfg, &p(out_dir))?,
        Command::Quantize { embeddings, out } => cmd_quantize(&cfg, &p(embeddings), &p(out))?,
        Command::Stats { codebook } => cmd_stats(&cfg, &p(codebook))?,
        Command::Pretrain {
            interactions,
            codebook,
            out,
            resume,
        } => cmd_pretrain(&cfg, &p(interactions), &p(codebook), resume.as_deref().map(p).as_deref(), &p(out))?,
        Command::Align {
            checkpoint,
            interactions,
            embeddings,
            out,
        } => cmd_align(&cfg, &p(checkpoint), &p(interactions), &p(embeddings), &p(out))?,
        Command::Finetune {
            checkpoint,
            interactions,
            embeddings,
            out,
        } => cmd_finetune(&cfg, &p(checkpoint), &p(interactions), embeddings.as_deref().map(p).as_deref(), &p(out))?,
        Command::Eval {
            checkpoint,
            interactions,
            stage,
            out,
        } => {
            let stage = match stage {
                StageArg::Valid => Stage::Valid,
                StageArg::Test => Stage::Test,
            };
            let report = cmd_eval(&cfg, &p(checkpoint), &p(interactions), stage)?;
            println!("{report}");
            if let Some(o) = out {
                fs::write(p(o), report.to_kv())?;
            }
        }
        Command::Extend {
            checkpoint,
            embeddings,
            out,
        } => cmd_extend(&cfg, &p(checkpoint), &p(embeddings), &p(out))?,
        Command::Ablate {
            checkpoint,
            interactions,
            embeddings,
            no_semi_checkpoint,
            out,
        } => {
            let ckpt = load_pretrained(&cfg, &p(checkpoint))?;
            let no_semi = no_semi_checkpoint
                .as_deref()
                .map(|c| load_pretrained(&cfg, &p(c)))
                .transpose()?;
            let emb = read_fvecs(&p(embeddings))?;
            let split = load_split(&cfg, &p(interactions), emb.rows())?;
            let report = run_ablation(
                &ckpt,
                no_semi.as_ref(),
                &split,
                &emb,
                &cfg.quantizer,
                &cfg.finetune_config(),
                &cfg.eval_options(),
                &Variant::ALL,
            )?;
            print!("{report}");
            if let Some(o) = out {
                fs::write(p(o), report.to_string())?;
            }
        }
    }
    Ok(())
}

fn load_split(cfg: &GlobalConfig, path: &Path, num_items: usize) -> Result<SplitDataset> {
    let opts = LoadOptions {
        num_items: Some(num_items),
        ..cfg.data.clone()
    };
    leave_one_out_split(&load_interactions(path, &opts)?)
}

fn load_pretrained(cfg: &GlobalConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    cfg.check_codes(
        &format!("checkpoint {}", path.display()),
        ckpt.codebook.num_subspaces(),
        ckpt.codebook.num_centroids(),
    )?;
    Ok(ckpt)
}

fn with_config(mut ckpt: Checkpoint, cfg: &GlobalConfig) -> Checkpoint {
    ckpt.config = cfg.to_string();
    ckpt
}

pub fn cmd_synth(cfg: &GlobalConfig, out_dir: &Path) -> Result<()> {
    let corpus = synth_corpus(&cfg.synth, cfg.run.seed)?;
    fs::create_dir_all(out_dir)?;
    for (name, domains) in [("pretrain", &cfg.study.pretrain_domains), ("target", &cfg.study.target_domains)] {
        let (ds, emb) = corpus.subset(domains)?;
        write_interactions(&out_dir.join(format!("{name}.tsv")), &ds)?;
        write_fvecs(&out_dir.join(format!("{name}.fvecs")), &emb)?;
        info!(
            "cmd=synth part={name} sequences={} items={} interactions={}",
            ds.sequences.len(),
            ds.num_items,
            ds.num_interactions()
        );
    }
    Ok(())
}

pub fn cmd_quantize(cfg: &GlobalConfig, embeddings: &Path, out: &Path) -> Result<()> {
    let emb = read_fvecs(embeddings)?;
    if emb.dim() % cfg.quantizer.num_subspaces != 0 {
        return Err(Error::Config(format!(
            "embedding dimension {} of {} is not divisible by quantizer.num_subspaces = {}",
            emb.dim(),
            embeddings.display(),
            cfg.quantizer.num_subspaces
        )));
    }
    let trained = train_opq(&emb, &cfg.quantizer, cfg.run.seed)?;
    let codes = trained.codebook.encode_all(&emb)?;
    save_codebook(&trained.codebook, &codes, out)?;
    info!(
        "cmd=quantize items={} mse={:.6} orthogonality_error={:.3e} out={}",
        codes.num_items(),
        trained.error_trace.last().copied().unwrap_or(f64::NAN),
        trained.codebook.orthogonality_error(),
        out.display()
    );
    Ok(())
}

pub fn cmd_stats(cfg: &GlobalConfig, codebook: &Path) -> Result<()> {
    let (cb, codes) = load_codebook(codebook)?;
    cfg.check_codes(&format!("codebook {}", codebook.display()), cb.num_subspaces(), cb.num_centroids())?;
    println!("{}", code_stats(&codes)?);
    Ok(())
}

pub fn cmd_pretrain(
    cfg: &GlobalConfig,
    interactions: &Path,
    codebook: &Path,
    resume: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (cb, codes) = load_codebook(codebook)?;
    cfg.check_codes(&format!("codebook {}", codebook.display()), cb.num_subspaces(), cb.num_centroids())?;
    let split = load_split(cfg, interactions, codes.num_items())?;
    let ckpt = match resume {
        Some(r) => {
            let c = load_pretrained(cfg, r)?;
            if c.codes != codes {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with different item codes than {}",
                    r.display(),
                    codebook.display()
                )));
            }
            pretrain_from(c, &split, &cfg.pretrain_config())?
        }
        None => pretrain(&split, &cb, &codes, &cfg.encoder, &cfg.pretrain_config())?,
    };
    save_checkpoint(&with_config(ckpt, cfg), out)?;
    info!("cmd=pretrain out={}", out.display());
    Ok(())
}

pub fn cmd_align(cfg: &GlobalConfig, checkpoint: &Path, interactions: &Path, embeddings: &Path, out: &Path) -> Result<()> {
    let ft = cfg.finetune_config();
    let mut ckpt = load_pretrained(cfg, checkpoint)?;
    if ft.no_pretrain {
        ckpt = fresh_like(&ckpt, cfg.run.seed ^ 0x5c7a)?;
    }
    let emb = read_fvecs(embeddings)?;
    let split = load_split(cfg, interactions, emb.rows())?;
    let down = downstream_codes(&ckpt, &emb, &cfg.quantizer, &ft)?;
    let alignment = if ft.skip_alignment {
        None
    } else {
        Some(align_stage(&ckpt, &split, &down, &ft)?)
    };
    let aligned = aligned_checkpoint(&ckpt, &down, alignment)?;
    save_checkpoint(&with_config(aligned, cfg), out)?;
    info!("cmd=align out={}", out.display());
    Ok(())
}

pub fn cmd_finetune(
    cfg: &GlobalConfig,
    checkpoint: &Path,
    interactions: &Path,
    embeddings: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ft = cfg.finetune_config();
    let ckpt = load_pretrained(cfg, checkpoint)?;
    let tuned = match embeddings {
        Some(e) => {
            let emb = read_fvecs(e)?;
            let split = load_split(cfg, interactions, emb.rows())?;
            let base = materialize(&ckpt, ft.harden)?;
            let down = downstream_codes(&base, &emb, &cfg.quantizer, &ft)?;
            finetune_stage(&base, None, &split, &down, &ft)?
        }
        None => {
            let split = load_split(cfg, interactions, ckpt.codes.num_items())?;
            finetune_aligned(&ckpt, &split, &ft)?
        }
    };
    save_checkpoint(&with_config(tuned, cfg), out)?;
    info!("cmd=finetune out={}", out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &GlobalConfig, checkpoint: &Path, interactions: &Path, stage: Stage) -> Result<EvalReport> {
    let ckpt = materialize(&load_pretrained(cfg, checkpoint)?, cfg.transfer.harden)?;
    let split = load_split(cfg, interactions, ckpt.codes.num_items())?;
    let model = Recommender::new(ckpt.encoder.clone(), &ckpt.table, &ckpt.codes, ckpt.tau)?;
    let report = evaluate(&model, &split, stage, &cfg.eval_options())?;
    for (i, k) in report.ks.iter().enumerate() {
        info!(
            "cmd=eval stage={stage:?} recall@{k}={:.6} ndcg@{k}={:.6}",
            report.recall[i], report.ndcg[i]
        );
    }
    Ok(report)
}

pub fn cmd_extend(cfg: &GlobalConfig, checkpoint: &Path, embeddings: &Path, out: &Path) -> Result<()> {
    let ckpt = load_pretrained(cfg, checkpoint)?;
    let emb = read_fvecs(embeddings)?;
    let extended = inductive_extend(&ckpt, &emb)?;
    save_checkpoint(&extended, out)?;
    info!(
        "cmd=extend items_before={} items_after={} out={}",
        ckpt.codes.num_items(),
        extended.codes.num_items(),
        out.display()
    );
    Ok(())
}
