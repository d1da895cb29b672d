use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RoutingTrace, TraceMeta, TraceSample};
use crate::error::{Error, Result};

/// Parameters of the synthetic routing-trace generator.
///
/// Samples come from `num_latent_topics` Gaussian embedding clusters. Every
/// layer has a global expert popularity ranking; each topic perturbs it by
/// `rank_jitter` ranks (Gaussian) and routes its tokens by a Zipf law over
/// the perturbed ranking, `top_k` distinct experts per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceConfig {
    pub num_samples: usize,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub num_latent_topics: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
    pub tokens_per_sample: usize,
    /// Standard deviation of topic centres around the origin.
    pub topic_spread: f64,
    /// Standard deviation, in ranks, of each topic's deviation from the
    /// global expert ranking.
    pub rank_jitter: f64,
}

impl Default for SyntheticTraceConfig {
    fn default() -> Self {
        SyntheticTraceConfig {
            num_samples: 10_000,
            embedding_dim: 16,
            num_layers: 4,
            experts_per_layer: 64,
            top_k: 8,
            num_latent_topics: 8,
            zipf_exponent: 1.2,
            seed: 0,
            tokens_per_sample: 4,
            topic_spread: 4.0,
            rank_jitter: 4.0,
        }
    }
}

impl SyntheticTraceConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_samples", self.num_samples),
            ("embedding_dim", self.embedding_dim),
            ("num_layers", self.num_layers),
            ("experts_per_layer", self.experts_per_layer),
            ("top_k", self.top_k),
            ("num_latent_topics", self.num_latent_topics),
            ("tokens_per_sample", self.tokens_per_sample),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.top_k > self.experts_per_layer {
            return Err(Error::config("top_k", "must not exceed experts_per_layer"));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return Err(Error::config("zipf_exponent", "must be finite and > 0"));
        }
        if !(self.topic_spread >= 0.0 && self.rank_jitter >= 0.0) {
            return Err(Error::config("rank_jitter", "spreads must be >= 0"));
        }
        Ok(())
    }
}

/// Generates a deterministic synthetic trace.
pub fn generate_synthetic_trace(cfg: &SyntheticTraceConfig) -> Result<RoutingTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n_exp = cfg.experts_per_layer;

    let centres: Vec<Vec<f64>> = (0..cfg.num_latent_topics)
        .map(|_| {
            (0..cfg.embedding_dim)
                .map(|_| unit.sample(&mut rng) * cfg.topic_spread)
                .collect()
        })
        .collect();

    // weights[topic][layer][expert]
    let zipf: Vec<f64> = (0..n_exp)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let mut weights = vec![vec![vec![0.0; n_exp]; cfg.num_layers]; cfg.num_latent_topics];
    for layer in 0..cfg.num_layers {
        let mut global: Vec<usize> = (0..n_exp).collect();
        global.shuffle(&mut rng);
        for topic_weights in weights.iter_mut() {
            let mut keyed: Vec<(f64, usize)> = global
                .iter()
                .enumerate()
                .map(|(rank, &e)| (rank as f64 + cfg.rank_jitter * unit.sample(&mut rng), e))
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (rank, &(_, e)) in keyed.iter().enumerate() {
                topic_weights[layer][e] = zipf[rank];
            }
        }
    }

    let mut samples = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let topic = rng.random_range(0..cfg.num_latent_topics);
        let embedding = centres[topic]
            .iter()
            .map(|c| c + unit.sample(&mut rng))
            .collect();
        let layers = weights[topic]
            .iter()
            .map(|w| {
                let mut counts = vec![0u64; n_exp];
                for _ in 0..cfg.tokens_per_sample {
                    let picked = index::sample_weighted(&mut rng, n_exp, |e| w[e], cfg.top_k)
                        .expect("positive weights");
                    for e in picked {
                        counts[e] += 1;
                    }
                }
                counts
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, c)| c > 0)
                    .collect()
            })
            .collect();
        samples.push(TraceSample { embedding, layers });
    }

    RoutingTrace::new(
        TraceMeta {
            num_layers: cfg.num_layers,
            experts_per_layer: n_exp,
            embedding_dim: cfg.embedding_dim,
        },
        samples,
    )
}
