//! Seeded multi-domain corpus generator.
//!
//! Every domain owns `items_per_domain` items. Item `j` of every domain shares
//! a prototype vector; a fraction `overlap` of the latent coordinates is copied
//! from that prototype and the rest is drawn per domain. Text embeddings are a
//! fixed linear projection of the latent vector, distorted by a per-domain
//! affine shift and isotropic noise. Sequences follow a Markov chain whose
//! transition logits are latent similarities, blended with a per-user taste.

use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{InteractionDataset, Sequence, TextEmbeddingMatrix};
use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_domains: usize,
    pub items_per_domain: usize,
    pub users_per_domain: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub embedding_dim: usize,
    pub latent_dim: usize,
    /// Fraction of latent coordinates shared across domains, in `[0, 1]`.
    pub overlap: f64,
    pub noise_std: f64,
    pub shift_scale: f64,
    /// Softmax temperature of the transition logits.
    pub transition_temp: f64,
    /// Weight of the user's taste vector against the current item.
    pub taste_weight: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 4,
            items_per_domain: 500,
            users_per_domain: 2000,
            min_len: 6,
            max_len: 14,
            embedding_dim: 32,
            latent_dim: 16,
            overlap: 0.7,
            noise_std: 0.1,
            shift_scale: 0.3,
            transition_temp: 0.25,
            taste_weight: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "synth.overlap = {} is outside [0, 1]",
                self.overlap
            )));
        }
        if self.num_domains == 0 || self.items_per_domain < 2 || self.users_per_domain == 0 {
            return Err(Error::Config(
                "synth needs at least one domain, two items and one user per domain".into(),
            ));
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "synth sequence length range [{}, {}] is invalid (minimum 3)",
                self.min_len, self.max_len
            )));
        }
        if self.embedding_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("synth dimensions must be positive".into()));
        }
        if self.noise_std < 0.0 || self.shift_scale < 0.0 || self.transition_temp <= 0.0 {
            return Err(Error::Config(
                "synth noise/shift must be non-negative and temperature positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.taste_weight) {
            return Err(Error::Config("synth.taste_weight must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn shared_latent_dims(&self) -> usize {
        (self.overlap * self.latent_dim as f64).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dataset: InteractionDataset,
    pub embeddings: TextEmbeddingMatrix,
    /// Global item range owned by each domain.
    pub domain_items: Vec<Range<usize>>,
    /// Latent item vectors, one row per global item.
    pub latents: Array2<f64>,
}

impl SynthCorpus {
    /// Extracts the given domains as a standalone corpus with items
    /// re-indexed contiguously in domain order.
    pub fn subset(&self, domains: &[u32]) -> Result<(InteractionDataset, TextEmbeddingMatrix)> {
        let mut offset = vec![None; self.domain_items.len()];
        let mut next = 0;
        for &d in domains {
            let range = self
                .domain_items
                .get(d as usize)
                .ok_or_else(|| Error::Config(format!("domain {d} does not exist")))?;
            offset[d as usize] = Some(next);
            next += range.len();
        }
        let sequences = self
            .dataset
            .sequences
            .iter()
            .filter_map(|s| {
                let base = offset[s.domain as usize]?;
                let start = self.domain_items[s.domain as usize].start;
                Some(Sequence {
                    user: s.user.clone(),
                    domain: s.domain,
                    items: s.items.iter().map(|&i| i - start + base).collect(),
                })
            })
            .collect();
        let rows = domains
            .iter()
            .flat_map(|&d| self.domain_items[d as usize].clone());
        let embeddings = self.embeddings.select_rows(rows);
        Ok((InteractionDataset::new(sequences, next)?, embeddings))
    }
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn synth_corpus(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let n = config.items_per_domain;
    let k = config.latent_dim;
    let shared = config.shared_latent_dims();

    let prototypes = gaussian_matrix(&mut rng, n, k, 1.0);
    let projection = gaussian_matrix(&mut rng, config.embedding_dim, k, 1.0 / (k as f64).sqrt());

    let total = n * config.num_domains;
    let mut latents = Array2::<f64>::zeros((total, k));
    let mut emb = Array2::<f64>::zeros((total, config.embedding_dim));
    let mut domain_items = Vec::with_capacity(config.num_domains);

    for d in 0..config.num_domains {
        let own = gaussian_matrix(&mut rng, n, k, 1.0);
        let shift_mat = gaussian_matrix(
            &mut rng,
            config.embedding_dim,
            config.embedding_dim,
            1.0 / (config.embedding_dim as f64).sqrt(),
        );
        let shift_bias: Array1<f64> =
            Array1::from_shape_simple_fn(config.embedding_dim, || rng.sample(StandardNormal));
        for j in 0..n {
            let g = d * n + j;
            for c in 0..k {
                latents[[g, c]] = if c < shared {
                    prototypes[[j, c]]
                } else {
                    own[[j, c]]
                };
            }
            let text = projection.dot(&latents.row(g));
            let shifted = &text + &(config.shift_scale * (shift_mat.dot(&text) + &shift_bias));
            for c in 0..config.embedding_dim {
                let noise: f64 = rng.sample(StandardNormal);
                emb[[g, c]] = shifted[c] + config.noise_std * noise;
            }
        }
        domain_items.push(d * n..(d + 1) * n);
    }

    let scale = 1.0 / (config.transition_temp * (k as f64).sqrt());
    let mut sequences = Vec::with_capacity(config.num_domains * config.users_per_domain);
    let mut weights = vec![0.0f64; n];
    for d in 0..config.num_domains {
        let block = latents.slice(ndarray::s![d * n..(d + 1) * n, ..]);
        for u in 0..config.users_per_domain {
            let taste: Array1<f64> = Array1::from_shape_simple_fn(k, || rng.sample(StandardNormal));
            let len = rng.gen_range(config.min_len..=config.max_len);
            let mut items = Vec::with_capacity(len);
            let first_logits = block.dot(&taste);
            let mut cur = sample_softmax(&first_logits, scale, None, &mut weights, &mut rng);
            items.push(d * n + cur);
            while items.len() < len {
                let query =
                    (1.0 - config.taste_weight) * &block.row(cur) + config.taste_weight * &taste;
                let logits = block.dot(&query);
                cur = sample_softmax(&logits, scale, Some(cur), &mut weights, &mut rng);
                items.push(d * n + cur);
            }
            sequences.push(Sequence {
                user: format!("d{d}_u{u}"),
                domain: d as u32,
                items,
            });
        }
    }

    let dataset = InteractionDataset::new(sequences, total)?;
    let embeddings = TextEmbeddingMatrix::from_array(&emb)?;
    Ok(SynthCorpus {
        dataset,
        embeddings,
        domain_items,
        latents,
    })
}

fn sample_softmax<R: Rng>(
    logits: &Array1<f64>,
    scale: f64,
    exclude: Option<usize>,
    weights: &mut [f64],
    rng: &mut R,
) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, (&l, w)) in logits.iter().zip(weights.iter_mut()).enumerate() {
        *w = if Some(j) == exclude {
            0.0
        } else {
            ((l - max) * scale).exp()
        };
        total += *w;
    }
    let mut target = rng.gen::<f64>() * total;
    let mut last = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = j;
            if target < w {
                return j;
            }
            target -= w;
        }
    }
    last
}
