//! End-to-end stream driver: warm-up, route, anchored training with
//! eviction, merge, and one evaluation row per task.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{BackboneConfig, FrozenBackbone};
use crate::error::{Error, Result};
use crate::loreft::Intervention;
use crate::metrics::{bwt_metric, evaluate_stream_step, invariance_audit, op_metric, EvalMatrix};
use crate::rng::derive_seed;
use crate::router::{self, Decision, GroupState, InterventionSpec, ProbeBatch, RouterParams, RoutingDecision};
use crate::tasks::{generate_stream, FamilyKind, SplitSizes, TaskFamily, TaskInstance, MARKER_BASE, MIN_VOCAB};
use crate::trainer::{evict, merge, train_task, TrainConfig, TrainTrace};

/// How tasks are assigned to groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Mode {
    /// Routing, anchored training, eviction.
    #[default]
    Craft,
    /// Every task gets its own group.
    TaskWise,
    /// One shared group, no KL term, no eviction.
    AllInOne,
    /// Routing on, KL term and eviction off.
    TaskSimilarNoreg,
    /// Groups follow the true family labels; used to calibrate eta.
    Oracle,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Craft, Mode::TaskWise, Mode::AllInOne, Mode::TaskSimilarNoreg, Mode::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Craft => "craft",
            Mode::TaskWise => "task-wise",
            Mode::AllInOne => "all-in-one",
            Mode::TaskSimilarNoreg => "task-similar-noreg",
            Mode::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    fn beta(self, configured: f64) -> f64 {
        match self {
            Mode::AllInOne | Mode::TaskSimilarNoreg => 0.0,
            _ => configured,
        }
    }

    fn evicts(self) -> bool {
        self == Mode::Craft
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub count: usize,
    /// Overrides the kind's default width when set.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub width: Option<usize>,
    /// Overrides the default copy/reverse window start when set.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StreamConfig {
    pub families: Vec<FamilySpec>,
    pub splits: SplitSizes,
}

impl Default for StreamConfig {
    fn default() -> Self {
        let families = [
            FamilyKind::ModularMap,
            FamilyKind::Copy,
            FamilyKind::Reverse,
            FamilyKind::MarkerClassification,
        ]
        .into_iter()
        .map(|kind| FamilySpec { kind, count: 2, width: None, offset: None })
        .collect();
        StreamConfig {
            families,
            splits: SplitSizes::default(),
        }
    }
}

impl StreamConfig {
    pub fn family_list(&self) -> Vec<(TaskFamily, usize)> {
        self.families
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut fam = TaskFamily::new(i as u32, f.kind);
                if let Some(w) = f.width {
                    fam.width = w;
                }
                if let Some(o) = f.offset {
                    fam.offset = o;
                }
                (fam, f.count)
            })
            .collect()
    }

    pub fn generate(&self, data_seed: u64) -> Result<Vec<TaskInstance>> {
        generate_stream(&self.family_list(), self.splits, data_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Seeds {
    /// Batch order during anchored training.
    pub global: u64,
    /// Task generation.
    pub data: u64,
    /// Shared warm-up initialization.
    pub warmup: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunConfig {
    pub mode: Mode,
    pub backbone: BackboneConfig,
    pub stream: StreamConfig,
    pub intervention: InterventionSpec,
    pub router: RouterParams,
    pub train: TrainConfig,
    /// Per-task epochs, overriding `train.epochs` position by position.
    #[cfg_attr(feature = "serde", serde(default))]
    pub epochs_schedule: Vec<usize>,
    pub seeds: Seeds,
}

/// Eta calibrated for the desk profile with [`calibrate_eta`].
pub const DESK_ETA: f64 = 0.3784;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Craft,
            backbone: BackboneConfig::default(),
            stream: StreamConfig::default(),
            intervention: InterventionSpec::default(),
            router: RouterParams::default(),
            train: TrainConfig::default(),
            epochs_schedule: Vec::new(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    /// Scaled-down settings that train the default stream in seconds.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.intervention.t_pos = 3;
        cfg.router.warmup_lr = 1e-2;
        cfg.train.lr = 2e-2;
        cfg.train.batch_size = 16;
        cfg.train.epochs = 40;
        // a handful of steps per epoch: keep the LR ramp inside epoch 1
        cfg.train.warmup_ratio = 0.01;
        // 20 steps is barely three epochs here, too short to see a plateau
        cfg.train.rolling_window = 40;
        cfg.train.eta = DESK_ETA;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.epochs_schedule.contains(&0) {
            return Err(Error::InvalidConfig("epochs schedule entries must be positive".into()));
        }
        if self.intervention.rank == 0 || self.intervention.rank > self.backbone.hidden_dim {
            return Err(Error::InvalidConfig(alloc::format!(
                "rank {} must be in 1..={}",
                self.intervention.rank,
                self.backbone.hidden_dim
            )));
        }
        if !(self.router.delta >= 0.0) || !(self.router.epsilon > 0.0) {
            return Err(Error::InvalidConfig("delta must be >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }

    fn router_params(&self) -> RouterParams {
        RouterParams {
            wu_seed: self.seeds.warmup,
            ..self.router
        }
    }

    fn epochs_for(&self, j: usize) -> usize {
        self.epochs_schedule.get(j).copied().unwrap_or(self.train.epochs)
    }
}

/// What happened to one task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskRecord {
    pub task_id: u32,
    pub family_id: u32,
    /// Group chosen at routing time.
    pub routed_gid: usize,
    /// Group after a possible eviction.
    pub final_gid: usize,
    pub evicted: bool,
    /// One trace per training phase (two when evicted).
    pub phases: Vec<TrainTrace>,
    /// Symmetric KL between the merged state and the anchor on the task's probe.
    pub terminal_sym_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunReport {
    pub mode: Mode,
    pub decisions: Vec<RoutingDecision>,
    pub tasks: Vec<TaskRecord>,
    pub matrix: EvalMatrix,
    pub op: f64,
    pub bwt: f64,
    pub groups: Vec<GroupState>,
    /// Task id to group id, used at inference.
    pub table: BTreeMap<u32, usize>,
    pub invariance_violations: usize,
    pub backbone_checksum: u64,
    pub max_orthonormality_error: f64,
}

impl RunReport {
    pub fn num_groups(&self) -> usize {
        self.groups.iter().filter(|g| !g.members.is_empty()).count()
    }

    /// Members of each non-empty group, ordered by group id.
    pub fn partition(&self) -> Vec<Vec<u32>> {
        self.groups
            .iter()
            .filter(|g| !g.members.is_empty())
            .map(|g| {
                let mut m = g.members.clone();
                m.sort_unstable();
                m
            })
            .collect()
    }
}

fn at(task: u32, stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| e.at_stage(task, stage)
}

fn forced_decision(mut d: RoutingDecision, decision: Decision, gid: usize) -> RoutingDecision {
    d.decision = decision;
    d.gid = gid;
    d
}

/// Run the full pipeline over `tasks` on a prebuilt backbone.
pub fn run_tasks(cfg: &RunConfig, backbone: &FrozenBackbone, tasks: &[TaskInstance]) -> Result<RunReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyTaskData);
    }
    let params = cfg.router_params();
    let checksum = backbone.checksum();
    let mut groups: Vec<GroupState> = Vec::new();
    let mut table = BTreeMap::new();
    let mut decisions = Vec::with_capacity(tasks.len());
    let mut records = Vec::with_capacity(tasks.len());
    let mut matrix = EvalMatrix::new(tasks.iter().map(|t| t.task_id).collect());
    let mut family_group: BTreeMap<u32, usize> = BTreeMap::new();
    let mut max_ortho: f64 = 0.0;

    for (j, task) in tasks.iter().enumerate() {
        let id = task.task_id;
        let (warm, warm_trace) = router::warmup(backbone, &task.train, &params, &cfg.intervention).map_err(at(id, "warm-up"))?;
        max_ortho = max_ortho.max(warm_trace.max_orthonormality_error);
        let assessed = router::assess(backbone, task, &warm, &groups, &params).map_err(at(id, "route"))?;
        let new_gid = groups.len();
        let decision = match cfg.mode {
            Mode::Craft | Mode::TaskSimilarNoreg => assessed,
            Mode::TaskWise => forced_decision(assessed, Decision::New, new_gid),
            Mode::AllInOne if groups.is_empty() => forced_decision(assessed, Decision::New, new_gid),
            Mode::AllInOne => forced_decision(assessed, Decision::Join, 0),
            Mode::Oracle => match family_group.get(&task.family_id) {
                Some(&g) => forced_decision(assessed, Decision::Join, g),
                None => forced_decision(assessed, Decision::New, new_gid),
            },
        };
        let mut gid = decision.gid;
        match decision.decision {
            Decision::Join => groups[gid].members.push(id),
            Decision::New => {
                router::open_group(&mut groups, id, &warm);
            }
        }
        family_group.entry(task.family_id).or_insert(gid);

        let train_cfg = TrainConfig {
            beta: cfg.mode.beta(cfg.train.beta),
            epochs: cfg.epochs_for(j),
            ..cfg.train
        };
        let eta = (decision.decision == Decision::Join && cfg.mode.evicts()).then_some(cfg.train.eta);
        let seed = derive_seed(cfg.seeds.global, id as u64);
        let (mut live, mut anchor, trace) =
            train_task(backbone, &task.train, &groups[gid], &train_cfg, eta, seed).map_err(at(id, "train"))?;
        let evicted = trace.evicted;
        let mut phases = vec![trace];
        if evicted {
            let fresh_gid = groups.len();
            let fresh = evict(&mut groups[gid], &anchor, &live, fresh_gid, id).map_err(at(id, "evict"))?;
            groups.push(fresh);
            gid = fresh_gid;
            let (l, a, t) = train_task(backbone, &task.train, &groups[gid], &train_cfg, None, derive_seed(seed, 1))
                .map_err(at(id, "train"))?;
            live = l;
            anchor = a;
            phases.push(t);
        }
        merge(&live, &mut groups[gid]).map_err(at(id, "merge"))?;
        for p in &phases {
            max_ortho = max_ortho.max(p.max_orthonormality_error);
        }
        let terminal_sym_kl = probe_divergence(backbone, task, &groups[gid].intervention, anchor.intervention(), &params)
            .map_err(at(id, "merge"))?;
        table.insert(id, gid);
        records.push(TaskRecord {
            task_id: id,
            family_id: task.family_id,
            routed_gid: decision.gid,
            final_gid: gid,
            evicted,
            phases,
            terminal_sym_kl,
        });
        decisions.push(decision);

        let row = evaluate_stream_step(backbone, j, tasks, &groups, &table).map_err(at(id, "evaluate"))?;
        matrix.push_row(row)?;
    }

    let violations = invariance_audit(&matrix, &table)?.len();
    Ok(RunReport {
        mode: cfg.mode,
        decisions,
        tasks: records,
        op: op_metric(&matrix)?,
        bwt: bwt_metric(&matrix)?,
        matrix,
        groups,
        table,
        invariance_violations: violations,
        backbone_checksum: checksum,
        max_orthonormality_error: max_ortho,
    })
}

/// Symmetric KL between two interventions on a task's probe batch.
pub fn probe_divergence(
    backbone: &FrozenBackbone,
    task: &TaskInstance,
    a: &Intervention,
    b: &Intervention,
    params: &RouterParams,
) -> Result<f64> {
    let probe = ProbeBatch::draw(task, params.probe_size)?;
    let sa = router::signature(backbone, Some(a), &probe, params.top_k, params.smoothing)?;
    let sb = router::signature(backbone, Some(b), &probe, params.top_k, params.smoothing)?;
    router::sym_kl(&sa, &sb)
}

/// Build the backbone, generate the configured stream and run it.
pub fn run_stream(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let backbone = FrozenBackbone::build(cfg.backbone)?;
    let tasks = cfg.stream.generate(cfg.seeds.data)?;
    let report = run_tasks(cfg, &backbone, &tasks)?;
    if backbone.checksum() != report.backbone_checksum {
        return Err(Error::InvalidConfig("backbone weights changed during the run".into()));
    }
    Ok(report)
}

/// Routing only: every task is warmed up and routed, new groups keep their
/// warm-up state and nothing is trained.
pub fn route_only(cfg: &RunConfig) -> Result<Vec<RoutingDecision>> {
    cfg.validate()?;
    let backbone = FrozenBackbone::build(cfg.backbone)?;
    let tasks = cfg.stream.generate(cfg.seeds.data)?;
    let params = cfg.router_params();
    let mut groups = Vec::new();
    let mut out = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let (d, _) = router::route(&backbone, task, &mut groups, &params, &cfg.intervention)
            .map_err(at(task.task_id, "route"))?;
        out.push(d);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SweepAxis {
    Delta,
    WarmupSteps,
    Beta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::WarmupSteps => "warmup_steps",
            SweepAxis::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Option<SweepAxis> {
        [SweepAxis::Delta, SweepAxis::WarmupSteps, SweepAxis::Beta]
            .into_iter()
            .find(|a| a.name() == s)
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Delta => cfg.router.delta = value,
            SweepAxis::Beta => cfg.train.beta = value,
            SweepAxis::WarmupSteps => {
                if value < 1.0 || libm::trunc(value) != value {
                    return Err(Error::InvalidConfig(alloc::format!("warm-up steps must be a positive integer, got {value}")));
                }
                cfg.router.warmup_steps = value as usize;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    pub value: f64,
    pub groups: usize,
    pub op: f64,
    pub bwt: f64,
    pub partition: Vec<Vec<u32>>,
}

/// One full run per value with everything else held fixed.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least two values".into()));
    }
    let backbone = FrozenBackbone::build(cfg.backbone)?;
    let tasks = cfg.stream.generate(cfg.seeds.data)?;
    values
        .iter()
        .map(|&value| {
            let mut c = cfg.clone();
            axis.apply(&mut c, value)?;
            let r = run_tasks(&c, &backbone, &tasks)?;
            Ok(SweepRow {
                value,
                groups: r.num_groups(),
                op: r.op,
                bwt: r.bwt,
                partition: r.partition(),
            })
        })
        .collect()
}

/// OP and BWT of the configured stream under `mode`.
pub fn ablate(cfg: &RunConfig, mode: Mode) -> Result<(f64, f64)> {
    let c = RunConfig { mode, ..cfg.clone() };
    let r = run_stream(&c)?;
    Ok((r.op, r.bwt))
}

/// Stream of benign joins: each configured family contributes one task plus
/// `tasks_per_family - 1` siblings that share its mapping and differ only in
/// marker and sampled data.
pub fn calibration_stream(cfg: &RunConfig, tasks_per_family: usize) -> Result<Vec<TaskInstance>> {
    let seed = derive_seed(cfg.seeds.data, 0xCA11B);
    let mut fams = cfg.stream.family_list();
    for f in &mut fams {
        f.1 = 1;
    }
    let bases = generate_stream(&fams, cfg.stream.splits, seed)?;
    let mut free = (MARKER_BASE..MIN_VOCAB).filter(|m| !bases.iter().any(|b| b.marker == *m));
    let mut out = Vec::with_capacity(bases.len() * tasks_per_family);
    for round in 0..tasks_per_family {
        for base in &bases {
            let id = out.len() as u32;
            if round == 0 {
                out.push(TaskInstance { task_id: id, ..base.clone() });
            } else {
                let marker = free
                    .next()
                    .ok_or_else(|| Error::InvalidConfig("calibration stream ran out of markers".into()))?;
                out.push(base.sibling(id, marker, derive_seed(seed, id as u64), cfg.stream.splits)?);
            }
        }
    }
    Ok(out)
}

/// Three times the median epoch-1 KL of the joining tasks of
/// [`calibration_stream`], each routed to its own family's group. Returns
/// the threshold and the samples.
pub fn calibrate_eta(cfg: &RunConfig, tasks_per_family: usize) -> Result<(f64, Vec<f64>)> {
    let c = RunConfig {
        mode: Mode::Oracle,
        ..cfg.clone()
    };
    let backbone = FrozenBackbone::build(c.backbone)?;
    let tasks = calibration_stream(&c, tasks_per_family)?;
    let r = run_tasks(&c, &backbone, &tasks)?;
    let mut mu: Vec<f64> = r
        .tasks
        .iter()
        .zip(&r.decisions)
        .filter(|(_, d)| d.decision == Decision::Join)
        .map(|(t, _)| t.phases[0].mu1)
        .collect();
    if mu.is_empty() {
        return Err(Error::InvalidConfig("calibration stream has no joining tasks".into()));
    }
    mu.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = mu.len();
    let median = if n % 2 == 1 { mu[n / 2] } else { 0.5 * (mu[n / 2 - 1] + mu[n / 2]) };
    Ok((3.0 * median, mu))
}

/// Outcome of routing a far-family task after one trained group.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeparationPoint {
    pub delta: f64,
    pub decision: Decision,
    pub distance: f64,
    pub floor_triggered: bool,
}

/// Two tasks from unrelated families: train the first, then route the
/// second under each `delta`. The smallest delta that yields JOIN is where
/// spurious merging starts.
pub fn adversarial_separation(cfg: &RunConfig, first: FamilyKind, second: FamilyKind, deltas: &[f64]) -> Result<Vec<SeparationPoint>> {
    let mut c = cfg.clone();
    c.stream.families = vec![
        FamilySpec { kind: first, count: 1, width: None, offset: None },
        FamilySpec { kind: second, count: 1, width: None, offset: None },
    ];
    let backbone = FrozenBackbone::build(c.backbone)?;
    let tasks = c.stream.generate(c.seeds.data)?;
    let head = run_tasks(&RunConfig { mode: Mode::TaskWise, ..c.clone() }, &backbone, &tasks[..1])?;
    let params = c.router_params();
    let (warm, _) = router::warmup(&backbone, &tasks[1].train, &params, &c.intervention)?;
    let assessed = router::assess(&backbone, &tasks[1], &warm, &head.groups, &params)?;
    let dists: Vec<(usize, f64, f64)> = assessed.candidates.iter().map(|k| (k.gid, k.d_g, k.d_kg)).collect();
    Ok(deltas
        .iter()
        .map(|&delta| {
            let p = RouterParams { delta, ..params };
            let d = router::decide(tasks[1].task_id, assessed.d_k, &dists, &p, head.groups.len());
            SeparationPoint {
                delta,
                decision: d.decision,
                distance: d.best.map_or(f64::INFINITY, |b| b.distance),
                floor_triggered: d.floor_triggered,
            }
        })
        .collect())
}

/// Short human-readable summary.
pub fn summary(report: &RunReport) -> String {
    alloc::format!(
        "mode: {}\ntasks: {}\ngroups: {}\nOP: {:.2}\nBWT: {:.2}\ninvariance violations: {}\n",
        report.mode.name(),
        report.tasks.len(),
        report.num_groups(),
        report.op,
        report.bwt,
        report.invariance_violations
    )
}
