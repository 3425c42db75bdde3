//! Interaction data: loading, filtering, leave-one-out splitting and
//! mixed-domain batch sampling.

mod fvecs;
mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub use fvecs::{read_fvecs, write_fvecs, TextEmbeddingMatrix};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};

pub type ItemId = usize;

/// Default cap on context length.
pub const DEFAULT_MAX_CONTEXT: usize = 50;

/// One user's chronologically ordered interactions within one domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub user: String,
    pub domain: u32,
    pub items: Vec<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    pub sequences: Vec<Sequence>,
    pub num_items: usize,
    pub num_domains: usize,
}

impl InteractionDataset {
    /// Builds a dataset, checking item ranges and minimum sequence length.
    pub fn new(sequences: Vec<Sequence>, num_items: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (idx, seq) in sequences.iter().enumerate() {
            if seq.items.len() < 3 {
                return Err(Error::Data(format!(
                    "sequence {idx} of user {} has {} items, need at least 3",
                    seq.user,
                    seq.items.len()
                )));
            }
            if let Some(&bad) = seq.items.iter().find(|&&i| i >= num_items) {
                return Err(Error::Data(format!(
                    "item {bad} out of range for catalog of {num_items}"
                )));
            }
        }
        let num_domains = sequences.iter().map(|s| s.domain as usize + 1).max().unwrap_or(0);
        Ok(InteractionDataset {
            sequences,
            num_items,
            num_domains,
        })
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// Catalog size. When `None` it is inferred as one past the largest index.
    pub num_items: Option<usize>,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            num_items: None,
            min_user_interactions: 5,
            min_item_interactions: 5,
        }
    }
}

/// Reads `user<TAB>domain<TAB>i1 i2 ...` lines and applies the
/// minimum-interaction filter until it reaches a fixed point.
pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<InteractionDataset> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut sequences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        sequences.push(parse_line(&line, lineno, opts.num_items)?);
    }
    let num_items = match opts.num_items {
        Some(n) => n,
        None => sequences
            .iter()
            .flat_map(|s| s.items.iter())
            .max()
            .map_or(0, |&m| m + 1),
    };
    let sequences = filter_min_interactions(
        sequences,
        num_items,
        opts.min_user_interactions.max(3),
        opts.min_item_interactions,
    );
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    InteractionDataset::new(sequences, num_items)
}

fn parse_line(line: &str, lineno: usize, num_items: Option<usize>) -> Result<Sequence> {
    let parse_err = |msg: String| Error::Parse { line: lineno, msg };
    let mut fields = line.split('\t');
    let user = fields
        .next()
        .filter(|u| !u.is_empty())
        .ok_or_else(|| parse_err("missing user id".into()))?;
    let domain = fields
        .next()
        .ok_or_else(|| parse_err("missing domain id".into()))?
        .trim()
        .parse::<u32>()
        .map_err(|e| parse_err(format!("bad domain id: {e}")))?;
    let items_field = fields
        .next()
        .ok_or_else(|| parse_err("missing item list".into()))?;
    if fields.next().is_some() {
        return Err(parse_err("too many tab-separated fields".into()));
    }
    let mut items = Vec::new();
    for tok in items_field.split_whitespace() {
        let item = tok
            .parse::<ItemId>()
            .map_err(|e| parse_err(format!("bad item index {tok:?}: {e}")))?;
        if let Some(n) = num_items {
            if item >= n {
                return Err(parse_err(format!("item index {item} >= catalog size {n}")));
            }
        }
        items.push(item);
    }
    Ok(Sequence {
        user: user.to_string(),
        domain,
        items,
    })
}

fn filter_min_interactions(
    mut sequences: Vec<Sequence>,
    num_items: usize,
    min_user: usize,
    min_item: usize,
) -> Vec<Sequence> {
    loop {
        let before: usize = sequences.iter().map(|s| s.items.len()).sum();
        let before_seqs = sequences.len();

        let mut item_counts = vec![0usize; num_items];
        for seq in &sequences {
            for &i in &seq.items {
                item_counts[i] += 1;
            }
        }
        for seq in &mut sequences {
            seq.items.retain(|&i| item_counts[i] >= min_item);
        }

        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for seq in &sequences {
            *user_counts.entry(seq.user.as_str()).or_default() += seq.items.len();
        }
        let keep: Vec<bool> = sequences
            .iter()
            .map(|s| user_counts[s.user.as_str()] >= min_user && s.items.len() >= 3)
            .collect();
        let mut keep = keep.into_iter();
        sequences.retain(|_| keep.next().unwrap());

        let after: usize = sequences.iter().map(|s| s.items.len()).sum();
        if after == before && sequences.len() == before_seqs {
            return sequences;
        }
    }
}

pub fn write_interactions(path: &Path, dataset: &InteractionDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for seq in &dataset.sequences {
        let items: Vec<String> = seq.items.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}\t{}\t{}", seq.user, seq.domain, items.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Which held-out target an evaluation pass ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Valid,
    Test,
}

/// Leave-one-out view of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSequence {
    pub user: String,
    pub domain: u32,
    items: Vec<ItemId>,
}

impl SplitSequence {
    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    /// Training prefix (everything but the last two items).
    pub fn train(&self) -> &[ItemId] {
        &self.items[..self.items.len() - 2]
    }

    pub fn valid_target(&self) -> ItemId {
        self.items[self.items.len() - 2]
    }

    pub fn test_target(&self) -> ItemId {
        self.items[self.items.len() - 1]
    }

    pub fn context(&self, stage: Stage) -> &[ItemId] {
        match stage {
            Stage::Valid => &self.items[..self.items.len() - 2],
            Stage::Test => &self.items[..self.items.len() - 1],
        }
    }

    pub fn target(&self, stage: Stage) -> ItemId {
        match stage {
            Stage::Valid => self.valid_target(),
            Stage::Test => self.test_target(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub sequences: Vec<SplitSequence>,
    pub num_items: usize,
    pub num_domains: usize,
}

pub fn leave_one_out_split(dataset: &InteractionDataset) -> Result<SplitDataset> {
    let sequences = dataset
        .sequences
        .iter()
        .map(|s| {
            if s.items.len() < 3 {
                Err(Error::Split(format!(
                    "sequence of user {} has length {}, need at least 3",
                    s.user,
                    s.items.len()
                )))
            } else {
                Ok(SplitSequence {
                    user: s.user.clone(),
                    domain: s.domain,
                    items: s.items.clone(),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitDataset {
        sequences,
        num_items: dataset.num_items,
        num_domains: dataset.num_domains,
    })
}

impl SplitDataset {
    /// Number of times each item occurs in the training prefixes.
    pub fn train_popularity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for seq in &self.sequences {
            for &i in seq.train() {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Enumerates every (sequence, prefix end) training instance.
    pub fn train_instances(&self) -> Vec<TrainInstance> {
        let mut out = Vec::new();
        for (s, seq) in self.sequences.iter().enumerate() {
            for end in 1..seq.train().len() {
                out.push(TrainInstance {
                    sequence: s as u32,
                    end: end as u32,
                });
            }
        }
        out
    }

    /// Keeps the `max_len` most recent items of a context.
    pub fn truncate(context: &[ItemId], max_len: usize) -> &[ItemId] {
        &context[context.len().saturating_sub(max_len)..]
    }
}

/// A training instance: the context is `train()[..end]`, the target `train()[end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrainInstance {
    pub sequence: u32,
    pub end: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingBatch {
    pub contexts: Vec<Vec<ItemId>>,
    pub targets: Vec<ItemId>,
    pub domains: Vec<u32>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

/// Draws training batches uniformly over all instances of all domains.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    instances: Vec<TrainInstance>,
    max_context: usize,
    mode: Sampling,
}

impl BatchSampler {
    pub fn new(split: &SplitDataset, max_context: usize, mode: Sampling) -> Result<Self> {
        let instances = split.train_instances();
        if instances.is_empty() {
            return Err(Error::Data("training split has no instances".into()));
        }
        if max_context == 0 {
            return Err(Error::Config("max context length must be positive".into()));
        }
        Ok(BatchSampler {
            instances,
            max_context,
            mode,
        })
    }

    pub fn instances(&self) -> &[TrainInstance] {
        &self.instances
    }

    pub fn sample<R: Rng>(
        &self,
        split: &SplitDataset,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<TrainingBatch> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let picks: Vec<usize> = match self.mode {
            Sampling::WithReplacement => (0..batch_size)
                .map(|_| rng.gen_range(0..self.instances.len()))
                .collect(),
            Sampling::WithoutReplacement => {
                if batch_size > self.instances.len() {
                    return Err(Error::Config(format!(
                        "batch size {batch_size} exceeds {} available instances",
                        self.instances.len()
                    )));
                }
                rand::seq::index::sample(rng, self.instances.len(), batch_size).into_vec()
            }
        };
        let mut batch = TrainingBatch {
            contexts: Vec::with_capacity(batch_size),
            targets: Vec::with_capacity(batch_size),
            domains: Vec::with_capacity(batch_size),
        };
        for p in picks {
            let inst = self.instances[p];
            let seq = &split.sequences[inst.sequence as usize];
            let train = seq.train();
            let end = inst.end as usize;
            batch
                .contexts
                .push(SplitDataset::truncate(&train[..end], self.max_context).to_vec());
            batch.targets.push(train[end]);
            batch.domains.push(seq.domain);
        }
        Ok(batch)
    }
}

/// Convenience wrapper: builds a sampler and draws one batch with replacement.
pub fn sample_batch<R: Rng>(
    split: &SplitDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    BatchSampler::new(split, DEFAULT_MAX_CONTEXT, Sampling::WithReplacement)?
        .sample(split, batch_size, rng)
}

/// A catalog split into items available for training and items that only
/// appear later, re-indexed so that the held-out items come last.
#[derive(Clone, Debug)]
pub struct HoldOut {
    /// All sequences under the new indexing.
    pub full: InteractionDataset,
    /// Sequences with held-out items removed, over the first `num_known` items.
    pub known: InteractionDataset,
    /// `order[new] = old` item index.
    pub order: Vec<ItemId>,
    pub num_known: usize,
}

impl HoldOut {
    pub fn is_new(&self, item: ItemId) -> bool {
        item >= self.num_known
    }
}

/// Holds out `fraction` of the items, chosen uniformly at random.
pub fn hold_out_items(dataset: &InteractionDataset, fraction: f64, seed: u64) -> Result<HoldOut> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("hold-out fraction {fraction} is outside [0, 1)")));
    }
    let n = dataset.num_items;
    let mut order: Vec<ItemId> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut crate::seeded_rng(seed));
    let num_known = n - (fraction * n as f64).round() as usize;
    order[..num_known].sort_unstable();
    order[num_known..].sort_unstable();
    let mut new_of = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        new_of[old] = new;
    }
    let full: Vec<Sequence> = dataset
        .sequences
        .iter()
        .map(|s| Sequence {
            items: s.items.iter().map(|&i| new_of[i]).collect(),
            ..s.clone()
        })
        .collect();
    let known: Vec<Sequence> = full
        .iter()
        .map(|s| Sequence {
            items: s.items.iter().copied().filter(|&i| i < num_known).collect(),
            ..s.clone()
        })
        .filter(|s| s.items.len() >= 3)
        .collect();
    Ok(HoldOut {
        full: InteractionDataset::new(full, n)?,
        known: InteractionDataset::new(known, num_known)?,
        order,
        num_known,
    })
}
