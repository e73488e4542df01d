use craft_core::metrics::accuracy;
use craft_core::pipeline::{run_stream, run_tasks, sweep, FamilySpec, Mode, RunConfig, SweepAxis};
use craft_core::tasks::FamilyKind;
use craft_core::{Decision, FrozenBackbone};

fn desk(mode: Mode) -> RunConfig {
    RunConfig { mode, ..RunConfig::desk() }
}

fn assert_total_partition(report: &craft_core::pipeline::RunReport, n: usize) {
    let mut seen: Vec<u32> = report.partition().concat();
    assert_eq!(seen.len(), n);
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), n, "a task sits in two groups");
}

#[test]
fn every_task_is_learnable_on_its_own() {
    let r = run_stream(&desk(Mode::TaskWise)).unwrap();
    let n = r.matrix.num_tasks();
    for j in 0..n {
        let acc = r.matrix.get(j, j).unwrap();
        assert!(acc >= 90.0, "task {j} reached only {acc}");
    }
    assert_eq!(r.bwt, 0.0);
    assert_eq!(r.num_groups(), n);
}

#[test]
fn craft_run_is_deterministic_and_reproducible_from_its_table() {
    let cfg = desk(Mode::Craft);
    let a = run_stream(&cfg).unwrap();
    let b = run_stream(&cfg).unwrap();
    assert_eq!(a, b);
    assert_total_partition(&a, 8);
    assert_eq!(a.invariance_violations, 0);
    assert!(a.max_orthonormality_error < 1e-8);

    let backbone = FrozenBackbone::build(cfg.backbone).unwrap();
    assert_eq!(backbone.checksum(), a.backbone_checksum);
    let tasks = cfg.stream.generate(cfg.seeds.data).unwrap();
    let last = tasks.len() - 1;
    for (col, t) in tasks.iter().enumerate() {
        let gid = a.table[&t.task_id];
        let acc = accuracy(&backbone, &t.heldout, Some(&a.groups[gid].intervention)).unwrap();
        assert_eq!(acc.to_bits(), a.matrix.get(last, col).unwrap().to_bits());
    }
}

#[test]
fn partition_is_stable_across_warmup_lengths() {
    let rows = sweep(&desk(Mode::Craft), SweepAxis::WarmupSteps, &[50.0, 100.0, 200.0]).unwrap();
    for r in &rows[1..] {
        assert_eq!(r.partition, rows[0].partition, "warm-up {} regrouped the stream", r.value);
    }
}

#[test]
fn zero_delta_fragments_and_huge_delta_merges() {
    let cfg = desk(Mode::Craft);
    let backbone = FrozenBackbone::build(cfg.backbone).unwrap();
    let tasks = cfg.stream.generate(cfg.seeds.data).unwrap();

    let mut c = cfg.clone();
    c.router.delta = 0.0;
    let r = run_tasks(&c, &backbone, &tasks).unwrap();
    assert_eq!(r.num_groups(), tasks.len());

    c.router.delta = 1e12;
    let r = run_tasks(&c, &backbone, &tasks).unwrap();
    let floors = r.decisions[1..].iter().filter(|d| d.floor_triggered).count();
    let evictions = r.tasks.iter().filter(|t| t.evicted).count();
    for d in &r.decisions[1..] {
        assert_eq!(d.decision == Decision::Join, !d.floor_triggered);
    }
    assert_eq!(r.groups.len(), 1 + floors + evictions);
}

#[test]
fn stronger_anchoring_keeps_merged_states_closer() {
    let cfg = desk(Mode::Craft);
    let backbone = FrozenBackbone::build(cfg.backbone).unwrap();
    let tasks = cfg.stream.generate(cfg.seeds.data).unwrap();
    let drift: Vec<f64> = [0.0, 0.3, 1.0]
        .iter()
        .map(|&beta| {
            let mut c = cfg.clone();
            c.train.beta = beta;
            let r = run_tasks(&c, &backbone, &tasks).unwrap();
            r.tasks.iter().map(|t| t.terminal_sym_kl).sum::<f64>() / r.tasks.len() as f64
        })
        .collect();
    assert!(drift[0] >= drift[1] && drift[1] >= drift[2], "{drift:?}");
}

#[test]
fn two_families_route_into_pure_groups() {
    let mut cfg = desk(Mode::Craft);
    cfg.stream.families = [FamilyKind::Copy, FamilyKind::MarkerClassification]
        .into_iter()
        .map(|kind| FamilySpec { kind, count: 2, width: None, offset: None })
        .collect();
    let r = run_stream(&cfg).unwrap();
    assert_total_partition(&r, 4);
    let family: std::collections::BTreeMap<u32, u32> = r.tasks.iter().map(|t| (t.task_id, t.family_id)).collect();
    for group in r.partition() {
        assert!(group.iter().all(|t| family[t] == family[&group[0]]), "mixed group {group:?}");
    }
}
