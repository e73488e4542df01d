//! Deterministic synthetic task streams.
//!
//! Every prompt has the layout `[marker, noise, body.., SEP]`, where the
//! marker token identifies the task instance and the noise token is a random
//! content token that makes prompts distinct. Copy and reverse prompts carry
//! a second noise token since their bodies come from a small alphabet. The
//! vocabulary is carved up as
//!
//! | ids        | use                         |
//! |------------|-----------------------------|
//! | 0          | unused                      |
//! | 1          | separator                   |
//! | 2, 3       | yes / no answers            |
//! | 4..20      | content symbols             |
//! | 20..64     | task markers                |

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

pub const SEP: usize = 1;
pub const YES: usize = 2;
pub const NO: usize = 3;
pub const CONTENT_BASE: usize = 4;
pub const CONTENT_SIZE: usize = 16;
pub const MARKER_BASE: usize = CONTENT_BASE + CONTENT_SIZE;
pub const MARKER_COUNT: usize = 44;
/// Smallest vocabulary that holds every token the generators emit.
pub const MIN_VOCAB: usize = MARKER_BASE + MARKER_COUNT;

/// Bit set on the id of the second half produced by [`split_halves`].
pub const HALF_ID_BIT: u32 = 1 << 31;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Example {
    pub prompt: Vec<usize>,
    pub label: Vec<usize>,
}

impl Example {
    /// Teacher-forced input: prompt followed by all but the last label token.
    pub fn input(&self) -> Vec<usize> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.label[..self.label.len().saturating_sub(1)]);
        seq
    }

    /// Positions of `input()` whose next-token prediction is a label token.
    pub fn label_positions(&self) -> core::ops::Range<usize> {
        let p = self.prompt.len();
        p - 1..p - 1 + self.label.len()
    }
}

/// Generator kind shared by all tasks of a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum FamilyKind {
    /// `y = (a·x + c) mod modulus`, single-token answer.
    ModularMap,
    /// Repeat the two body tokens.
    Copy,
    /// Repeat the two body tokens in reverse order.
    Reverse,
    /// Yes/no: does the designated token occur in the body?
    MarkerClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskFamily {
    pub family_id: u32,
    pub kind: FamilyKind,
    /// Modulus for modular maps; alphabet window size for copy/reverse;
    /// unused for classification.
    pub width: usize,
    /// First content symbol of the copy/reverse alphabet window; the
    /// designated symbol for classification.
    pub offset: usize,
}

impl TaskFamily {
    pub fn new(family_id: u32, kind: FamilyKind) -> Self {
        let width = match kind {
            FamilyKind::ModularMap => 8,
            FamilyKind::Copy | FamilyKind::Reverse => 2,
            FamilyKind::MarkerClassification => 0,
        };
        TaskFamily {
            family_id,
            kind,
            width,
            offset: (5 * family_id as usize + 3) % (CONTENT_SIZE - width.max(1) + 1),
        }
    }
}

/// A family's kind plus the instance parameters drawn for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TaskKind {
    ModularMap { a: usize, c: usize, modulus: usize },
    Copy { offset: usize, width: usize },
    Reverse { offset: usize, width: usize },
    MarkerClassification { designated: usize },
}

impl TaskKind {
    pub fn label_len(&self) -> usize {
        match self {
            TaskKind::ModularMap { .. } | TaskKind::MarkerClassification { .. } => 1,
            TaskKind::Copy { .. } | TaskKind::Reverse { .. } => 2,
        }
    }

    pub fn family_kind(&self) -> FamilyKind {
        match self {
            TaskKind::ModularMap { .. } => FamilyKind::ModularMap,
            TaskKind::Copy { .. } => FamilyKind::Copy,
            TaskKind::Reverse { .. } => FamilyKind::Reverse,
            TaskKind::MarkerClassification { .. } => FamilyKind::MarkerClassification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitSizes {
    pub train: usize,
    pub probe: usize,
    pub heldout: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 96,
            probe: 16,
            heldout: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskInstance {
    pub task_id: u32,
    pub family_id: u32,
    pub kind: TaskKind,
    pub marker: usize,
    pub data_seed: u64,
    pub train: Vec<Example>,
    pub probe: Vec<Example>,
    pub heldout: Vec<Example>,
}

fn content(rng: &mut Rng) -> usize {
    CONTENT_BASE + rng.below(CONTENT_SIZE)
}

impl TaskInstance {
    /// Build a task purely from `(task_id, family, data_seed, sizes)`.
    pub fn generate(task_id: u32, family: TaskFamily, data_seed: u64, sizes: SplitSizes) -> Result<Self> {
        let mut rng = Rng::new(derive_seed(data_seed, task_id as u64));
        let kind = match family.kind {
            FamilyKind::ModularMap => {
                let modulus = family.width.clamp(2, CONTENT_SIZE);
                // odd multipliers are units mod a power of two; other moduli
                // still get a valid (possibly non-bijective) map
                let a = 1 + 2 * rng.below(modulus / 2);
                TaskKind::ModularMap {
                    a,
                    c: rng.below(modulus),
                    modulus,
                }
            }
            FamilyKind::Copy | FamilyKind::Reverse => {
                let width = family.width.clamp(2, CONTENT_SIZE);
                let offset = family.offset.min(CONTENT_SIZE - width);
                if family.kind == FamilyKind::Copy {
                    TaskKind::Copy { offset, width }
                } else {
                    TaskKind::Reverse { offset, width }
                }
            }
            FamilyKind::MarkerClassification => TaskKind::MarkerClassification {
                designated: CONTENT_BASE + family.offset.min(CONTENT_SIZE - 1),
            },
        };
        let marker = MARKER_BASE + rng.below(MARKER_COUNT);
        Self::with_kind(task_id, family.family_id, kind, marker, data_seed, sizes, &mut rng)
    }

    /// A task with the same mapping as `self` but its own marker and data.
    pub fn sibling(&self, task_id: u32, marker: usize, data_seed: u64, sizes: SplitSizes) -> Result<Self> {
        if !(MARKER_BASE..MIN_VOCAB).contains(&marker) {
            return Err(Error::TokenOutOfRange { token: marker, vocab: MIN_VOCAB });
        }
        let mut rng = Rng::new(derive_seed(data_seed, task_id as u64));
        Self::with_kind(task_id, self.family_id, self.kind, marker, data_seed, sizes, &mut rng)
    }

    fn with_kind(
        task_id: u32,
        family_id: u32,
        kind: TaskKind,
        marker: usize,
        data_seed: u64,
        sizes: SplitSizes,
        rng: &mut Rng,
    ) -> Result<Self> {
        let total = sizes.train + sizes.probe + sizes.heldout;
        let mut seen = BTreeSet::new();
        let mut examples = Vec::with_capacity(total);
        let mut attempts = 0;
        while examples.len() < total {
            attempts += 1;
            if attempts > 200 * total.max(1) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "task {task_id}: cannot draw {total} distinct prompts"
                )));
            }
            let ex = sample(&kind, marker, examples.len(), rng);
            if seen.insert(ex.prompt.clone()) {
                examples.push(ex);
            }
        }
        let heldout = examples.split_off(sizes.train + sizes.probe);
        let probe = examples.split_off(sizes.train);
        Ok(TaskInstance {
            task_id,
            family_id,
            kind,
            marker,
            data_seed,
            train: examples,
            probe,
            heldout,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.train.first().map_or(0, |e| e.prompt.len())
    }

    pub fn label_len(&self) -> usize {
        self.kind.label_len()
    }
}

fn sample(kind: &TaskKind, marker: usize, index: usize, rng: &mut Rng) -> Example {
    let mut prompt = alloc::vec![marker, content(rng)];
    if matches!(kind, TaskKind::Copy { .. } | TaskKind::Reverse { .. }) {
        prompt.push(content(rng));
    }
    let label = match *kind {
        TaskKind::ModularMap { a, c, modulus } => {
            let x = rng.below(CONTENT_SIZE);
            prompt.push(CONTENT_BASE + x);
            alloc::vec![CONTENT_BASE + (a * x + c) % modulus]
        }
        TaskKind::Copy { offset, width } | TaskKind::Reverse { offset, width } => {
            let x1 = CONTENT_BASE + offset + rng.below(width);
            let x2 = CONTENT_BASE + offset + rng.below(width);
            prompt.extend([x1, x2]);
            if matches!(kind, TaskKind::Copy { .. }) {
                alloc::vec![x1, x2]
            } else {
                alloc::vec![x2, x1]
            }
        }
        TaskKind::MarkerClassification { designated } => {
            let positive = index % 2 == 0;
            let mut body = [0usize; 3];
            for slot in body.iter_mut() {
                *slot = loop {
                    let t = content(rng);
                    if t != designated {
                        break t;
                    }
                };
            }
            if positive {
                body[rng.below(3)] = designated;
            }
            prompt.extend(body);
            alloc::vec![if positive { YES } else { NO }]
        }
    };
    prompt.push(SEP);
    Example { prompt, label }
}

/// Generate `count` tasks for each family. Families are interleaved
/// round-robin so related tasks arrive spread through the stream.
pub fn generate_stream(spec: &[(TaskFamily, usize)], sizes: SplitSizes, stream_seed: u64) -> Result<Vec<TaskInstance>> {
    if let Some((f, _)) = spec.iter().find(|(_, c)| *c == 0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "family {} has zero tasks",
            f.family_id
        )));
    }
    let rounds = spec.iter().map(|(_, c)| *c).max().unwrap_or(0);
    let mut tasks = Vec::new();
    let mut used_markers = BTreeSet::new();
    for round in 0..rounds {
        for (family, count) in spec {
            if round >= *count {
                continue;
            }
            let task_id = tasks.len() as u32;
            // re-draw the data seed until the task gets an unused marker
            let mut salt = 0u64;
            let task = loop {
                let seed = derive_seed(stream_seed, ((task_id as u64) << 16) | salt);
                let t = TaskInstance::generate(task_id, *family, seed, sizes)?;
                if used_markers.insert(t.marker) || salt > 64 {
                    break t;
                }
                salt += 1;
            };
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Deterministic reordering of a stream, renumbering task ids to stream
/// order is left to the caller.
pub fn permute_stream(tasks: &[TaskInstance], seed: u64) -> Vec<TaskInstance> {
    let mut out = tasks.to_vec();
    Rng::new(seed).shuffle(&mut out);
    out
}

/// Split a task's training data into two disjoint halves posing as separate
/// tasks. Both halves keep the probe and held-out splits.
pub fn split_halves(task: &TaskInstance) -> Result<(TaskInstance, TaskInstance)> {
    if task.train.len() < 2 {
        return Err(Error::TaskTooSmall {
            train: task.train.len(),
        });
    }
    let mid = task.train.len() / 2;
    let mut first = task.clone();
    let mut second = task.clone();
    first.train = task.train[..mid].to_vec();
    second.train = task.train[mid..].to_vec();
    second.task_id = task.task_id | HALF_ID_BIT;
    Ok((first, second))
}

/// The default desk stream: two tasks from each of the four family kinds.
pub fn default_families() -> Vec<(TaskFamily, usize)> {
    [
        FamilyKind::ModularMap,
        FamilyKind::Copy,
        FamilyKind::Reverse,
        FamilyKind::MarkerClassification,
    ]
    .iter()
    .enumerate()
    .map(|(i, &k)| (TaskFamily::new(i as u32, k), 2))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_deterministic() {
        let a = generate_stream(&default_families(), SplitSizes::default(), 5).unwrap();
        let b = generate_stream(&default_families(), SplitSizes::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let families: Vec<u32> = a.iter().map(|t| t.family_id).collect();
        assert_eq!(families, [0, 1, 2, 3, 0, 1, 2, 3]);
        let c = generate_stream(&default_families(), SplitSizes::default(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn regeneration_from_seed() {
        let stream = generate_stream(&default_families(), SplitSizes::default(), 1).unwrap();
        for t in &stream {
            let fam = default_families()[t.family_id as usize].0;
            let again = TaskInstance::generate(t.task_id, fam, t.data_seed, SplitSizes::default()).unwrap();
            assert_eq!(&again, t);
        }
    }

    #[test]
    fn splits_disjoint() {
        for t in generate_stream(&default_families(), SplitSizes::default(), 2).unwrap() {
            let mut all = BTreeSet::new();
            for ex in t.train.iter().chain(&t.probe).chain(&t.heldout) {
                assert!(all.insert(ex.prompt.clone()));
                assert_eq!(ex.label.len(), t.label_len());
                assert_eq!(ex.prompt[0], t.marker);
            }
        }
    }

    #[test]
    fn labels_follow_rules() {
        let fam = TaskFamily::new(0, FamilyKind::ModularMap);
        let t = TaskInstance::generate(0, fam, 9, SplitSizes::default()).unwrap();
        let TaskKind::ModularMap { a, c, modulus } = t.kind else { panic!() };
        for ex in &t.train {
            let x = ex.prompt[2] - CONTENT_BASE;
            assert_eq!(ex.label[0], CONTENT_BASE + (a * x + c) % modulus);
        }
        let fam = TaskFamily::new(1, FamilyKind::Reverse);
        let t = TaskInstance::generate(1, fam, 9, SplitSizes::default()).unwrap();
        for ex in &t.train {
            assert_eq!(ex.label, [ex.prompt[4], ex.prompt[3]]);
        }
        let fam = TaskFamily::new(2, FamilyKind::MarkerClassification);
        let t = TaskInstance::generate(2, fam, 9, SplitSizes::default()).unwrap();
        let TaskKind::MarkerClassification { designated } = t.kind else { panic!() };
        for ex in &t.train {
            let present = ex.prompt[2..5].contains(&designated);
            assert_eq!(ex.label[0] == YES, present);
        }
    }

    #[test]
    fn halves_partition_training_data() {
        let t = &generate_stream(&default_families(), SplitSizes::default(), 3).unwrap()[0];
        let (a, b) = split_halves(t).unwrap();
        assert_ne!(a.task_id, b.task_id);
        assert_eq!(a.family_id, b.family_id);
        assert_eq!(a.heldout, b.heldout);
        let mut union = a.train.clone();
        union.extend(b.train.clone());
        assert_eq!(union, t.train);
        assert!(a.train.iter().all(|e| !b.train.contains(e)));

        let mut tiny = t.clone();
        tiny.train.truncate(1);
        assert_eq!(split_halves(&tiny).unwrap_err(), Error::TaskTooSmall { train: 1 });
    }

    #[test]
    fn teacher_forcing_layout() {
        let ex = Example { prompt: alloc::vec![20, 5, 6, 7, SEP], label: alloc::vec![6, 7] };
        assert_eq!(ex.input(), alloc::vec![20, 5, 6, 7, SEP, 6]);
        assert_eq!(ex.label_positions(), 4..6);
    }
}
