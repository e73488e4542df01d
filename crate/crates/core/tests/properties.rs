use craft_core::loreft::orthonormality_error;
use craft_core::pipeline::RunConfig;
use craft_core::router::{decide, routing_distance, sym_kl, DistributionSignature, InterventionSpec, PositionDist};
use craft_core::tasks::{generate_stream, split_halves, FamilyKind, SplitSizes, TaskFamily};
use craft_core::trainer::{anchored_loss, train_task, TrainConfig};
use craft_core::{BackboneConfig, Decision, FrozenBackbone, GroupState, RouterParams};
use proptest::prelude::*;

fn small_backbone() -> FrozenBackbone {
    FrozenBackbone::build(BackboneConfig {
        hidden_dim: 16,
        num_layers: 2,
        ..Default::default()
    })
    .unwrap()
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

fn signature(rows: &[Vec<f64>], top_k: usize) -> DistributionSignature {
    DistributionSignature {
        vocab: rows[0].len(),
        positions: rows.iter().map(|r| PositionDist::from_probs(&distribution(r), top_k, 1e-6)).collect(),
    }
}

fn divergences() -> impl Strategy<Value = (f64, Vec<(f64, f64)>)> {
    (0.0..20.0f64, prop::collection::vec((0.0..20.0f64, 0.0..40.0f64), 0..6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sym_kl_is_symmetric_and_nonnegative(
        p in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 8), 1..4),
        q in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 8), 4),
        k in 1usize..=8,
    ) {
        let q = &q[..p.len()];
        let (a, b) = (signature(&p, k), signature(q, k));
        let ab = sym_kl(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - sym_kl(&b, &a).unwrap()).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(sym_kl(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn decisions_follow_the_join_rule((d_k, groups) in divergences(), delta in 0.0..3.0f64) {
        let params = RouterParams { delta, ..Default::default() };
        let g: Vec<(usize, f64, f64)> = groups.iter().enumerate().map(|(i, &(d_g, d_kg))| (i, d_g, d_kg)).collect();
        let d = decide(9, d_k, &g, &params, g.len());
        let best = g
            .iter()
            .map(|&(_, d_g, d_kg)| routing_distance(d_kg, d_k, d_g, params.epsilon))
            .fold(f64::INFINITY, f64::min);
        match d.decision {
            Decision::Join => {
                prop_assert!(!d.floor_triggered);
                prop_assert!(d.gid < g.len());
                prop_assert_eq!(d.best.unwrap().distance, best);
                prop_assert!(best <= delta);
            }
            Decision::New => {
                prop_assert_eq!(d.gid, g.len());
                prop_assert!(g.is_empty() || d.floor_triggered || best > delta);
            }
        }
    }

    #[test]
    fn zero_distance_always_joins(d_k in 0.01..20.0f64, d_g in 0.01..20.0f64, others in prop::collection::vec((0.0..20.0f64, 0.0..40.0f64), 0..4)) {
        let mut g = vec![(0, d_g, 0.0)];
        g.extend(others.iter().enumerate().map(|(i, &(a, b))| (i + 1, a, b)));
        let d = decide(1, d_k, &g, &RouterParams::default(), g.len());
        prop_assert_eq!(d.decision, Decision::Join);
        prop_assert_eq!(d.best.unwrap().distance, 0.0);
    }

    #[test]
    fn generation_is_a_pure_function_of_the_seed(seed in any::<u64>()) {
        let fams = [(TaskFamily::new(0, FamilyKind::Reverse), 1), (TaskFamily::new(1, FamilyKind::MarkerClassification), 2)];
        let sizes = SplitSizes { train: 12, probe: 4, heldout: 6 };
        let a = generate_stream(&fams, sizes, seed).unwrap();
        prop_assert_eq!(&a, &generate_stream(&fams, sizes, seed).unwrap());
        let (x, y) = split_halves(&a[0]).unwrap();
        prop_assert_eq!(x.train.len() + y.train.len(), a[0].train.len());
        prop_assert!(x.train.iter().all(|e| !y.train.contains(e)));
        prop_assert_ne!(x.task_id, y.task_id);
    }
}

#[test]
fn routing_partitions_the_stream() {
    let mut cfg = RunConfig::desk();
    cfg.router.warmup_steps = 10;
    let decisions = craft_core::pipeline::route_only(&cfg).unwrap();
    let mut members: Vec<Vec<u32>> = Vec::new();
    for d in &decisions {
        match d.decision {
            Decision::New => {
                assert_eq!(d.gid, members.len());
                members.push(vec![d.task_id]);
            }
            Decision::Join => members[d.gid].push(d.task_id),
        }
    }
    assert_eq!(members.iter().map(Vec::len).sum::<usize>(), decisions.len());
    assert_eq!(decisions, craft_core::pipeline::route_only(&cfg).unwrap());
}

#[test]
fn gradients_reach_only_the_live_intervention() {
    let bb = small_backbone();
    let tasks = generate_stream(
        &[(TaskFamily::new(0, FamilyKind::Copy), 1)],
        SplitSizes { train: 8, probe: 4, heldout: 4 },
        3,
    )
    .unwrap();
    let spec = InterventionSpec { rank: 4, t_pos: 2, ..Default::default() };
    let mut live = spec.fresh(&bb, 1).unwrap();
    let anchor = spec.fresh(&bb, 2).unwrap().snapshot();
    let batch: Vec<_> = tasks[0].train.iter().take(4).collect();
    let loss = anchored_loss(&bb, &batch, &mut live, &anchor, 0.5).unwrap();
    assert!(loss.kl_term >= 0.0);
    assert!((loss.total - loss.task_term - 0.5 * loss.kl_term).abs() < 1e-12);
    assert!(live.params().iter().all(|p| p.grad.is_some()));
    assert!(anchor.intervention().params().iter().all(|p| p.grad.is_none()));
    assert!(bb.named_weights().iter().all(|(_, w)| w.grad.is_none()));
}

#[test]
fn training_never_touches_the_anchor_or_backbone() {
    let bb = small_backbone();
    let sum = bb.checksum();
    let tasks = generate_stream(
        &[(TaskFamily::new(0, FamilyKind::ModularMap), 1)],
        SplitSizes { train: 16, probe: 4, heldout: 4 },
        8,
    )
    .unwrap();
    let spec = InterventionSpec { rank: 4, t_pos: 2, ..Default::default() };
    let group = GroupState { gid: 0, intervention: spec.fresh(&bb, 4).unwrap(), members: vec![0] };
    let before = group.intervention.checksum();
    let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 1e-2, ..Default::default() };
    let (live, anchor, trace) = train_task(&bb, &tasks[0].train, &group, &cfg, None, 0).unwrap();
    assert_eq!(anchor.intervention().checksum(), before);
    assert_eq!(group.intervention.checksum(), before);
    assert_ne!(live.checksum(), before);
    assert_eq!(bb.checksum(), sum);
    assert!(trace.kl().iter().all(|&k| k >= 0.0));
    for site in live.sites.values() {
        assert!(orthonormality_error(&site.projection().unwrap()) < 1e-10);
    }
}
