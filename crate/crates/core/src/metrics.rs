//! Lower-triangular score matrix and stream-level metrics.
//!
//! Row `j` holds the scores on tasks `0..=j` after task `j` has been learned,
//! in percent. OP is the mean of the last row; BWT is the mean over tasks of
//! the score right after learning minus the final score, so forgetting makes
//! it positive.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::loreft::Intervention;
use crate::router::GroupState;
use crate::tasks::{Example, TaskInstance};

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalMatrix {
    pub task_order: Vec<u32>,
    pub rows: Vec<Vec<f64>>,
}

/// A cell that changed although its task sits in a different group from
/// the task trained at that row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub row: usize,
    pub col: usize,
    pub before: f64,
    pub after: f64,
}

impl EvalMatrix {
    pub fn new(task_order: Vec<u32>) -> Self {
        EvalMatrix {
            task_order,
            rows: Vec::new(),
        }
    }

    /// Build from complete rows; row `j` must have `j + 1` entries.
    pub fn from_rows(task_order: Vec<u32>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = EvalMatrix::new(task_order);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let j = self.rows.len();
        if j >= self.task_order.len() {
            return Err(Error::IncompleteMatrix {
                rows: j + 1,
                expected: self.task_order.len(),
            });
        }
        if row.len() != j + 1 {
            return Err(Error::DimensionMismatch {
                expected: j + 1,
                found: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.task_order.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.task_order.len() && !self.rows.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.rows.get(row).and_then(|r| r.get(col)).copied()
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::IncompleteMatrix {
                rows: self.rows.len(),
                expected: self.task_order.len(),
            })
        }
    }
}

/// Mean of the final row.
pub fn op_metric(m: &EvalMatrix) -> Result<f64> {
    m.require_complete()?;
    let last = &m.rows[m.rows.len() - 1];
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over tasks of (score after learning − final score).
pub fn bwt_metric(m: &EvalMatrix) -> Result<f64> {
    m.require_complete()?;
    let t = m.num_tasks();
    let last = &m.rows[t - 1];
    Ok((0..t).map(|i| m.rows[i][i] - last[i]).sum::<f64>() / t as f64)
}

/// Every off-cluster cell whose score moved from one row to the next.
pub fn invariance_audit(m: &EvalMatrix, cluster_of: &BTreeMap<u32, usize>) -> Result<Vec<Violation>> {
    let cluster = |id: u32| cluster_of.get(&id).copied().ok_or(Error::UnknownTask(id));
    let mut out = Vec::new();
    for j in 1..m.rows.len() {
        let cj = cluster(m.task_order[j])?;
        for t in 0..j {
            if cluster(m.task_order[t])? == cj {
                continue;
            }
            let (before, after) = (m.rows[j - 1][t], m.rows[j][t]);
            if before.to_bits() != after.to_bits() {
                out.push(Violation { row: j, col: t, before, after });
            }
        }
    }
    Ok(out)
}

/// Exact-match accuracy in percent under greedy decoding.
pub fn accuracy(backbone: &FrozenBackbone, examples: &[Example], iv: Option<&Intervention>) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyTaskData);
    }
    let mut correct = 0usize;
    for ex in examples {
        if backbone.greedy_decode(&ex.prompt, ex.label.len(), iv)? == ex.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Row `j` of the matrix: held-out scores of tasks `0..=j` under the groups
/// they currently belong to.
pub fn evaluate_stream_step(
    backbone: &FrozenBackbone,
    j: usize,
    tasks: &[TaskInstance],
    groups: &[GroupState],
    table: &BTreeMap<u32, usize>,
) -> Result<Vec<f64>> {
    tasks
        .iter()
        .take(j + 1)
        .map(|t| {
            let gid = *table.get(&t.task_id).ok_or(Error::UnknownTask(t.task_id))?;
            let g = groups.get(gid).ok_or(Error::UnknownGroup(gid))?;
            accuracy(backbone, &t.heldout, Some(&g.intervention))
        })
        .collect()
}

/// Reference 15-task lower-triangular matrix used as a metric fixture.
pub fn reference_fixture() -> EvalMatrix {
    const ROWS: [&[f64]; 15] = [
        &[39.0],
        &[39.0, 57.0],
        &[39.0, 57.0, 19.3],
        &[39.0, 57.0, 19.3, 37.9],
        &[39.0, 57.0, 19.3, 37.2, 61.0],
        &[39.0, 49.0, 19.3, 37.2, 61.0, 34.2],
        &[39.0, 51.0, 19.3, 37.2, 61.0, 34.2, 41.0],
        &[41.0, 51.0, 19.3, 37.2, 61.0, 34.2, 41.0, 38.4],
        &[38.0, 51.0, 19.3, 37.2, 61.0, 34.2, 41.0, 38.2, 79.0],
        &[38.0, 51.0, 19.3, 43.4, 57.0, 34.2, 41.0, 38.2, 79.0, 52.0],
        &[40.0, 51.0, 19.3, 43.4, 57.0, 34.2, 41.0, 37.6, 80.0, 52.0, 61.0],
        &[41.0, 51.0, 19.3, 43.4, 57.0, 34.2, 41.0, 38.1, 74.0, 52.0, 45.0, 88.0],
        &[37.0, 51.0, 19.3, 43.4, 57.0, 34.2, 41.0, 36.5, 72.0, 52.0, 44.0, 85.0, 50.0],
        &[40.0, 51.0, 19.3, 43.4, 57.0, 34.2, 41.0, 37.8, 77.0, 52.0, 42.0, 82.0, 46.0, 61.0],
        &[40.0, 51.0, 19.3, 36.4, 60.0, 34.2, 41.0, 37.8, 77.0, 52.0, 42.0, 82.0, 46.0, 61.0, 75.0],
    ];
    let rows = ROWS.iter().map(|r| r.to_vec()).collect();
    EvalMatrix::from_rows((0..15).collect(), rows).expect("fixture is lower-triangular")
}

pub const REFERENCE_TASKS: [&str; 15] = [
    "C-STANCE", "FOMC", "MeetingBank", "Py150", "ScienceQA", "NumGLUE-cm", "NumGLUE-ds", "20Minuten", "dbpedia",
    "amazon", "yahoo", "agnews", "yelp", "BoolQA", "QQP",
];

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn two_task_metrics() {
        let m = EvalMatrix::from_rows(vec![0, 1], vec![vec![80.0], vec![70.0, 90.0]]).unwrap();
        assert_eq!(op_metric(&m).unwrap(), 80.0);
        assert_eq!(bwt_metric(&m).unwrap(), 5.0);
    }

    #[test]
    fn incomplete_rejected() {
        let m = EvalMatrix::from_rows(vec![0, 1], vec![vec![80.0]]).unwrap();
        assert!(matches!(op_metric(&m), Err(Error::IncompleteMatrix { .. })));
        let mut m = EvalMatrix::new(vec![0, 1]);
        assert!(m.push_row(vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn audit_flags_only_cross_cluster_moves() {
        let m = EvalMatrix::from_rows(
            vec![0, 1, 2],
            vec![vec![50.0], vec![50.0, 60.0], vec![40.0, 55.0, 70.0]],
        )
        .unwrap();
        // task 2 shares a cluster with task 1 but not with task 0
        let clusters = BTreeMap::from([(0, 0), (1, 1), (2, 1)]);
        let v = invariance_audit(&m, &clusters).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].row, v[0].col), (2, 0));
    }
}
