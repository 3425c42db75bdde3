//! Full-ranking leave-one-out evaluation.

use std::fmt;
use std::time::Instant;

use ndarray::ArrayView1;

use crate::corpus::{SplitDataset, Stage};
use crate::error::{Error, Result};
use crate::model::Recommender;
use crate::parallel::ordered_map;

pub const DEFAULT_KS: [usize; 2] = [10, 50];
pub const DEFAULT_BUCKET_EDGES: [usize; 4] = [0, 5, 20, 50];

/// 1-based rank of `target`: the number of items scoring at least as high as
/// the target, the target included. Ties count against the target.
pub fn rank_target(scores: ArrayView1<f64>, target: usize) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Data("no candidate items to rank".into()));
    }
    let Some(&t) = scores.get(target) else {
        return Err(Error::Lookup(format!(
            "target {target} outside {} candidates",
            scores.len()
        )));
    };
    if t.is_nan() {
        return Err(Error::Data("target score is NaN".into()));
    }
    Ok(scores.iter().filter(|&&s| s >= t).count())
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Ascending popularity edges starting at 0; bucket `i` holds targets whose
    /// training popularity lies in `[edges[i], edges[i+1])`, the last bucket is
    /// open-ended. Empty disables the breakdown.
    pub bucket_edges: Vec<usize>,
    /// Drop context items (other than the target) from the candidate set.
    pub exclude_context: bool,
    /// Evaluate only these sequence indices.
    pub subset: Option<Vec<usize>>,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: DEFAULT_KS.to_vec(),
            bucket_edges: Vec::new(),
            exclude_context: false,
            subset: None,
            threads: 1,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty positive integers".into()));
        }
        if !self.bucket_edges.is_empty() {
            if self.bucket_edges[0] != 0 {
                return Err(Error::Config("eval.bucket_edges must start at 0".into()));
            }
            if self.bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("eval.bucket_edges must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub lo: usize,
    /// Exclusive upper edge; `None` for the open-ended last bucket.
    pub hi: Option<usize>,
    pub users: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// Mean metrics over evaluated users. Equality ignores the wall-clock time.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
    pub buckets: Vec<BucketReport>,
    pub seconds: f64,
}

impl PartialEq for EvalReport {
    fn eq(&self, o: &Self) -> bool {
        self.ks == o.ks && self.recall == o.recall && self.ndcg == o.ndcg && self.users == o.users && self.buckets == o.buckets
    }
}

impl EvalReport {
    fn position(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|i| self.ndcg[i])
    }

    /// Machine-readable form, one `key=value` per line:
    /// `users`, `seconds`, `recall@K`, `ndcg@K`, and per bucket
    /// `bucket.<lo>-<hi|inf>.users|recall@K|ndcg@K`.
    pub fn to_kv(&self) -> String {
        let mut out = format!("users={}\nseconds={}\n", self.users, self.seconds);
        for (i, k) in self.ks.iter().enumerate() {
            out += &format!("recall@{k}={}\nndcg@{k}={}\n", self.recall[i], self.ndcg[i]);
        }
        for b in &self.buckets {
            let name = bucket_name(b.lo, b.hi);
            out += &format!("bucket.{name}.users={}\n", b.users);
            for (i, k) in self.ks.iter().enumerate() {
                out += &format!("bucket.{name}.recall@{k}={}\n", b.recall[i]);
                out += &format!("bucket.{name}.ndcg@{k}={}\n", b.ndcg[i]);
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut users = None;
        let mut seconds = 0.0;
        let mut metrics: Vec<(usize, Option<f64>, Option<f64>)> = Vec::new();
        let mut buckets: Vec<(String, BucketReport)> = Vec::new();
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad(n + 1, "expected key=value"))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(n + 1, "bad number"));
            if key == "users" {
                users = Some(value.parse::<usize>().map_err(|_| bad(n + 1, "bad user count"))?);
            } else if key == "seconds" {
                seconds = num(value)?;
            } else if let Some(rest) = key.strip_prefix("bucket.") {
                let (name, field) = rest.split_once('.').ok_or_else(|| bad(n + 1, "bad bucket key"))?;
                let idx = match buckets.iter().position(|(b, _)| b == name) {
                    Some(i) => i,
                    None => {
                        let (lo, hi) = parse_bucket_name(name).ok_or_else(|| bad(n + 1, "bad bucket name"))?;
                        buckets.push((
                            name.to_string(),
                            BucketReport {
                                lo,
                                hi,
                                users: 0,
                                recall: Vec::new(),
                                ndcg: Vec::new(),
                            },
                        ));
                        buckets.len() - 1
                    }
                };
                let b = &mut buckets[idx].1;
                if field == "users" {
                    b.users = value.parse().map_err(|_| bad(n + 1, "bad bucket user count"))?;
                } else if field.starts_with("recall@") {
                    b.recall.push(num(value)?);
                } else if field.starts_with("ndcg@") {
                    b.ndcg.push(num(value)?);
                } else {
                    return Err(bad(n + 1, "unknown bucket field"));
                }
            } else {
                let (metric, k) = key.split_once('@').ok_or_else(|| bad(n + 1, "unknown key"))?;
                let k: usize = k.parse().map_err(|_| bad(n + 1, "bad cutoff"))?;
                let slot = match metrics.iter().position(|m| m.0 == k) {
                    Some(i) => i,
                    None => {
                        metrics.push((k, None, None));
                        metrics.len() - 1
                    }
                };
                match metric {
                    "recall" => metrics[slot].1 = Some(num(value)?),
                    "ndcg" => metrics[slot].2 = Some(num(value)?),
                    _ => return Err(bad(n + 1, "unknown metric")),
                }
            }
        }
        let users = users.ok_or_else(|| bad(0, "missing users"))?;
        let mut ks = Vec::new();
        let mut recall = Vec::new();
        let mut ndcg = Vec::new();
        for (k, r, g) in metrics {
            ks.push(k);
            recall.push(r.ok_or_else(|| bad(0, "missing recall"))?);
            ndcg.push(g.ok_or_else(|| bad(0, "missing ndcg"))?);
        }
        Ok(EvalReport {
            ks,
            recall,
            ndcg,
            users,
            buckets: buckets.into_iter().map(|(_, b)| b).collect(),
            seconds,
        })
    }
}

fn bucket_name(lo: usize, hi: Option<usize>) -> String {
    match hi {
        Some(h) => format!("{lo}-{h}"),
        None => format!("{lo}-inf"),
    }
}

fn parse_bucket_name(s: &str) -> Option<(usize, Option<usize>)> {
    let (lo, hi) = s.split_once('-')?;
    let lo = lo.parse().ok()?;
    let hi = if hi == "inf" { None } else { Some(hi.parse().ok()?) };
    Some((lo, hi))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<14}{:>8}", "group", "users")?;
        for k in &self.ks {
            write!(f, "{:>11}{:>11}", format!("Recall@{k}"), format!("NDCG@{k}"))?;
        }
        writeln!(f)?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, users: usize, r: &[f64], g: &[f64]| {
            write!(f, "{name:<14}{users:>8}")?;
            for (a, b) in r.iter().zip(g) {
                write!(f, "{a:>11.4}{b:>11.4}")?;
            }
            writeln!(f)
        };
        row(f, "all", self.users, &self.recall, &self.ndcg)?;
        for b in &self.buckets {
            let name = format!("pop {}", bucket_name(b.lo, b.hi));
            row(f, &name, b.users, &b.recall, &b.ndcg)?;
        }
        write!(f, "elapsed: {:.2}s", self.seconds)
    }
}

/// Per-sequence ranks of the `stage` target under `model`, in sequence order.
pub fn ranks(model: &Recommender, split: &SplitDataset, stage: Stage, opts: &EvalOptions) -> Result<Vec<(usize, usize)>> {
    let indices: Vec<usize> = match &opts.subset {
        Some(s) => s.clone(),
        None => (0..split.sequences.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::Data("nothing to evaluate: split is empty".into()));
    }
    if model.num_items() != split.num_items {
        return Err(Error::Config(format!(
            "model scores {} items but the split has {}",
            model.num_items(),
            split.num_items
        )));
    }
    let results = ordered_map(opts.threads, &indices, |&i| -> Result<(usize, usize)> {
        let seq = split
            .sequences
            .get(i)
            .ok_or_else(|| Error::Lookup(format!("sequence {i} out of range")))?;
        let context = seq.context(stage);
        let target = seq.target(stage);
        let mut scores = model.score(context)?;
        if opts.exclude_context {
            for &c in context {
                if c != target {
                    scores[c] = f64::NEG_INFINITY;
                }
            }
        }
        Ok((target, rank_target(scores.view(), target)?))
    });
    results.into_iter().collect()
}

/// Mean Recall@K and NDCG@K over the evaluated sequences.
pub fn evaluate(model: &Recommender, split: &SplitDataset, stage: Stage, opts: &EvalOptions) -> Result<EvalReport> {
    opts.validate()?;
    let start = Instant::now();
    let ranked = ranks(model, split, stage, opts)?;
    let mut report = aggregate(&ranked, &opts.ks, &opts.bucket_edges, &split.train_popularity());
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Builds a report from `(target, rank)` pairs.
pub fn aggregate(ranked: &[(usize, usize)], ks: &[usize], edges: &[usize], popularity: &[usize]) -> EvalReport {
    let mean = |f: &dyn Fn(usize) -> f64, sel: &[&(usize, usize)]| {
        if sel.is_empty() {
            0.0
        } else {
            sel.iter().map(|(_, r)| f(*r)).sum::<f64>() / sel.len() as f64
        }
    };
    let all: Vec<&(usize, usize)> = ranked.iter().collect();
    let recall = ks.iter().map(|&k| mean(&|r| recall_at_k(r, k), &all)).collect();
    let ndcg = ks.iter().map(|&k| mean(&|r| ndcg_at_k(r, k), &all)).collect();
    let buckets = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let hi = edges.get(i + 1).copied();
            let sel: Vec<&(usize, usize)> = ranked
                .iter()
                .filter(|(t, _)| {
                    let p = popularity.get(*t).copied().unwrap_or(0);
                    p >= lo && hi.map_or(true, |h| p < h)
                })
                .collect();
            BucketReport {
                lo,
                hi,
                users: sel.len(),
                recall: ks.iter().map(|&k| mean(&|r| recall_at_k(r, k), &sel)).collect(),
                ndcg: ks.iter().map(|&k| mean(&|r| ndcg_at_k(r, k), &sel)).collect(),
            }
        })
        .collect();
    EvalReport {
        ks: ks.to_vec(),
        recall,
        ndcg,
        users: ranked.len(),
        buckets,
        seconds: 0.0,
    }
}
