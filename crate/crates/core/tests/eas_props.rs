use moesched_core::eas::{
    exact_map, generate_synthetic_trace, hit_ratio_on_map, probe, random_prototypes,
    select_resident_experts, stratify, RoutingTrace, StratificationConfig, SyntheticTraceConfig,
};

const SEEDS: u64 = 20;
const CAPACITY: usize = 8;

fn trace(seed: u64) -> RoutingTrace {
    generate_synthetic_trace(&SyntheticTraceConfig {
        num_samples: 2_000,
        experts_per_layer: 32,
        top_k: 4,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn strat_config(ratio: f64, seed: u64) -> StratificationConfig {
    StratificationConfig {
        sample_ratio: ratio,
        seed,
        ..Default::default()
    }
}

#[test]
fn probed_plans_never_beat_the_exact_plan_and_the_gap_closes() {
    let ratios = [0.05, 0.1, 0.25, 1.0];
    let mut gaps = [0.0; 4];
    for seed in 0..SEEDS {
        let t = trace(seed);
        let exact = exact_map(&t);
        let best = hit_ratio_on_map(&exact, &select_resident_experts(&exact, CAPACITY));
        for (gap, &ratio) in gaps.iter_mut().zip(&ratios) {
            let s = stratify(&t, &strat_config(ratio, seed)).unwrap();
            let hit = hit_ratio_on_map(&exact, &s.residency(CAPACITY));
            assert!(hit <= best + 1e-12, "seed {seed} ratio {ratio}: {hit} > {best}");
            *gap += (best - hit) / SEEDS as f64;
        }
    }
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "mean gaps {gaps:?}");
    assert_eq!(gaps[3], 0.0);
}

#[test]
fn stratified_prototypes_beat_random_ones() {
    let (mut stratified, mut random) = (0.0, 0.0);
    for seed in 0..SEEDS {
        let t = trace(seed);
        let exact = exact_map(&t);
        let s = stratify(&t, &strat_config(0.02, seed)).unwrap();
        stratified += hit_ratio_on_map(&exact, &s.residency(CAPACITY));
        let picked = random_prototypes(t.samples.len(), s.prototypes.len(), seed);
        let map = probe(&t, &picked).unwrap();
        random += hit_ratio_on_map(&exact, &select_resident_experts(&map, CAPACITY));
    }
    let (stratified, random) = (stratified / SEEDS as f64, random / SEEDS as f64);
    assert!(stratified >= random, "stratified {stratified} < random {random}");
}
