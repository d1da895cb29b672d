//! Expert-aware stratification.
//!
//! Given a routing trace for a whole offline workload, pick which experts to
//! preload into VRAM without profiling every sample: embed, cluster into
//! strata, take proportional prototypes from each stratum (nearest to the
//! centroid first), probe only those prototypes, and keep the experts the
//! approximated activation map ranks highest.

mod cluster;
mod synth;
mod trace;

pub use cluster::{cluster, Clustering};
pub use synth::{generate_synthetic_trace, SyntheticTraceConfig};
pub use trace::{read_trace, write_trace, RoutingTrace, TraceMeta, TraceSample, TRACE_VERSION};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer activation counts (token-weighted) for every expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub counts: Vec<Vec<u64>>,
}

impl ActivationMap {
    pub fn zeros(num_layers: usize, experts_per_layer: usize) -> Self {
        ActivationMap {
            counts: vec![vec![0; experts_per_layer]; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn experts_per_layer(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn layer_total(&self, layer: usize) -> u64 {
        self.counts[layer].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Counts normalized to frequencies; an empty layer yields all zeros.
    pub fn frequencies(&self, layer: usize) -> Vec<f64> {
        let total = self.layer_total(layer) as f64;
        self.counts[layer]
            .iter()
            .map(|&c| if total > 0.0 { c as f64 / total } else { 0.0 })
            .collect()
    }

    /// Element-wise sum. Panics if the shapes differ.
    pub fn add(&self, other: &ActivationMap) -> ActivationMap {
        assert_eq!(self.counts.len(), other.counts.len(), "layer count mismatch");
        ActivationMap {
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| {
                    assert_eq!(a.len(), b.len(), "expert count mismatch");
                    a.iter().zip(b).map(|(x, y)| x + y).collect()
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.experts_per_layer();
        if self.counts.is_empty() || e == 0 {
            return Err(Error::InvalidTrace("activation map is empty".into()));
        }
        if self.counts.iter().any(|l| l.len() != e) {
            return Err(Error::InvalidTrace(
                "activation map layers have different expert counts".into(),
            ));
        }
        Ok(())
    }
}

/// Experts preloaded into VRAM, per layer. Indices are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidencyPlan {
    pub capacity_per_layer: usize,
    pub layers: Vec<Vec<usize>>,
}

impl ResidencyPlan {
    pub fn is_resident(&self, layer: usize, expert: usize) -> bool {
        self.layers[layer].binary_search(&expert).is_ok()
    }

    fn membership(&self, experts_per_layer: usize) -> Vec<Vec<bool>> {
        self.layers
            .iter()
            .map(|set| {
                let mut m = vec![false; experts_per_layer];
                for &e in set {
                    if e < experts_per_layer {
                        m[e] = true;
                    }
                }
                m
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationConfig {
    pub num_clusters: usize,
    pub sample_ratio: f64,
    pub seed: u64,
    pub max_kmeans_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tolerance: f64,
}

impl Default for StratificationConfig {
    fn default() -> Self {
        StratificationConfig {
            num_clusters: 8,
            sample_ratio: 0.05,
            seed: 0,
            max_kmeans_iters: 50,
            tolerance: 1e-6,
        }
    }
}

impl StratificationConfig {
    pub fn validate(&self, num_samples: usize) -> Result<()> {
        if self.num_clusters == 0 || self.num_clusters > num_samples {
            return Err(Error::InvalidStratification(format!(
                "num_clusters must be in 1..={num_samples}, got {}",
                self.num_clusters
            )));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::InvalidStratification(format!(
                "sample_ratio must be in (0, 1], got {}",
                self.sample_ratio
            )));
        }
        Ok(())
    }
}

/// Proportional prototype selection: `round(ratio * n_k)` samples from each
/// non-empty cluster (at least one), nearest to the centroid first.
/// Returned in cluster order, then by distance.
pub fn select_prototypes(clustering: &Clustering, sample_ratio: f64) -> Vec<usize> {
    let k = clustering.centroids.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in clustering.assignments.iter().enumerate() {
        members[c].push(i);
    }
    let mut picked = Vec::new();
    for group in &mut members {
        if group.is_empty() {
            continue;
        }
        group.sort_by(|&a, &b| {
            clustering.distances[a]
                .total_cmp(&clustering.distances[b])
                .then(a.cmp(&b))
        });
        let want = ((sample_ratio * group.len() as f64).round() as usize).clamp(1, group.len());
        picked.extend_from_slice(&group[..want]);
    }
    picked
}

/// Sums the activation counts of the given samples.
pub fn probe(trace: &RoutingTrace, samples: &[usize]) -> Result<ActivationMap> {
    let mut map = ActivationMap::zeros(trace.meta.num_layers, trace.meta.experts_per_layer);
    for &s in samples {
        let sample = trace
            .samples
            .get(s)
            .ok_or_else(|| Error::InvalidTrace(format!("prototype index {s} out of range")))?;
        for (layer, acts) in sample.layers.iter().enumerate() {
            for &(e, c) in acts {
                map.counts[layer][e] += c;
            }
        }
    }
    Ok(map)
}

/// The activation map of the full trace.
pub fn exact_map(trace: &RoutingTrace) -> ActivationMap {
    let all: Vec<usize> = (0..trace.samples.len()).collect();
    probe(trace, &all).expect("indices in range")
}

/// Experts of `layer` ordered hottest first, ties by lower index.
pub fn experts_by_heat(map: &ActivationMap, layer: usize) -> Vec<usize> {
    let counts = &map.counts[layer];
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `capacity_per_layer` hottest experts of every layer.
pub fn select_resident_experts(map: &ActivationMap, capacity_per_layer: usize) -> ResidencyPlan {
    let layers = (0..map.num_layers())
        .map(|l| {
            let mut set: Vec<usize> = experts_by_heat(map, l)
                .into_iter()
                .take(capacity_per_layer)
                .collect();
            set.sort_unstable();
            set
        })
        .collect();
    ResidencyPlan {
        capacity_per_layer,
        layers,
    }
}

/// Token-weighted fraction of activation events whose expert is resident.
/// Returns 0 for a trace without events.
pub fn hit_ratio(trace: &RoutingTrace, plan: &ResidencyPlan) -> f64 {
    hit_ratio_on_map(&exact_map(trace), plan)
}

/// [`hit_ratio`] evaluated on a precomputed exact map.
pub fn hit_ratio_on_map(map: &ActivationMap, plan: &ResidencyPlan) -> f64 {
    let member = plan.membership(map.experts_per_layer());
    let mut hits = 0u64;
    let mut total = 0u64;
    for (layer, counts) in map.counts.iter().enumerate() {
        for (e, &c) in counts.iter().enumerate() {
            total += c;
            if member.get(layer).is_some_and(|m| m[e]) {
                hits += c;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// A routing-blind residency plan: a uniform random subset per layer.
/// Each layer takes a prefix of a seeded permutation, so for a fixed seed
/// larger capacities keep every smaller capacity's experts.
pub fn random_baseline(
    experts_per_layer: usize,
    capacity: usize,
    num_layers: usize,
    seed: u64,
) -> ResidencyPlan {
    let capacity = capacity.min(experts_per_layer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..num_layers)
        .map(|_| {
            let mut set: Vec<usize> = (0..experts_per_layer).collect();
            set.shuffle(&mut rng);
            set.truncate(capacity);
            set.sort_unstable();
            set
        })
        .collect();
    ResidencyPlan {
        capacity_per_layer: capacity,
        layers,
    }
}

/// Everything the stratification pipeline produced for one trace.
#[derive(Debug, Clone)]
pub struct Stratification {
    pub clustering: Clustering,
    pub prototypes: Vec<usize>,
    pub probed: ActivationMap,
}

impl Stratification {
    pub fn residency(&self, capacity_per_layer: usize) -> ResidencyPlan {
        select_resident_experts(&self.probed, capacity_per_layer)
    }
}

/// Cluster, select prototypes and probe them.
pub fn stratify(trace: &RoutingTrace, config: &StratificationConfig) -> Result<Stratification> {
    config.validate(trace.samples.len())?;
    let clustering = cluster(trace, config)?;
    let prototypes = select_prototypes(&clustering, config.sample_ratio);
    let probed = probe(trace, &prototypes)?;
    Ok(Stratification {
        clustering,
        prototypes,
        probed,
    })
}

/// Hit ratios of one residency capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRatioPoint {
    pub capacity: usize,
    /// Residency chosen from the stratified (probed) map.
    pub eas: f64,
    /// Mean over the random baseline seeds.
    pub random_mean: f64,
    /// Residency chosen from the exact map; the best any plan can do.
    pub oracle: f64,
}

/// Event-weighted hit ratios on the full trace for every capacity. The
/// random baseline uses `baseline_seeds` seeds drawn from `seed`.
pub fn hit_ratio_curve(
    trace: &RoutingTrace,
    strat: &Stratification,
    capacities: &[usize],
    baseline_seeds: usize,
    seed: u64,
) -> Vec<HitRatioPoint> {
    let exact = exact_map(trace);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..baseline_seeds).map(|_| rng.random()).collect();
    let (layers, experts) = (exact.num_layers(), exact.experts_per_layer());
    capacities
        .iter()
        .map(|&capacity| {
            let random_mean = if seeds.is_empty() {
                0.0
            } else {
                seeds
                    .iter()
                    .map(|&s| hit_ratio_on_map(&exact, &random_baseline(experts, capacity, layers, s)))
                    .sum::<f64>()
                    / seeds.len() as f64
            };
            HitRatioPoint {
                capacity,
                eas: hit_ratio_on_map(&exact, &strat.residency(capacity)),
                random_mean,
                oracle: hit_ratio_on_map(&exact, &select_resident_experts(&exact, capacity)),
            }
        })
        .collect()
}

/// Uniform-random prototypes of the same budget, for comparison with the
/// stratified selection.
pub fn random_prototypes(num_samples: usize, budget: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, num_samples, budget.min(num_samples)).into_vec();
    picked.sort_unstable();
    picked
}
