//! Run directories: every artifact of a run plus a SHA-256 over all of them.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use craft_core::metrics::{bwt_metric, op_metric};
use craft_core::pipeline::{summary, RunConfig, RunReport};
use craft_core::FrozenBackbone;
use sha2::{Digest, Sha256};

use crate::config::to_toml;
use crate::formats;

/// Largest acceptable deviation of `R Rᵀ` from the identity.
pub const ORTHO_TOLERANCE: f64 = 1e-5;

pub const HASH_FILE: &str = "report.sha256";

/// Audits a run must pass for the command to succeed.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditOutcome {
    pub invariance_violations: usize,
    pub max_orthonormality_error: f64,
}

impl AuditOutcome {
    pub fn of(report: &RunReport) -> Self {
        AuditOutcome {
            invariance_violations: report.invariance_violations,
            max_orthonormality_error: report.max_orthonormality_error,
        }
    }

    pub fn passed(&self) -> bool {
        self.invariance_violations == 0 && self.max_orthonormality_error < ORTHO_TOLERANCE
    }
}

pub fn task_names(report: &RunReport) -> Vec<String> {
    report.matrix.task_order.iter().map(|id| format!("T{id}")).collect()
}

/// Files of a run as (relative path, contents), in the order they are hashed.
pub fn run_files(cfg: &RunConfig, report: &RunReport, backbone: &FrozenBackbone) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![
        ("config.toml".to_string(), to_toml(cfg)?.into_bytes()),
        ("routing.csv".into(), formats::routing_csv(&report.decisions).into_bytes()),
        (
            "matrix.csv".into(),
            formats::matrix_csv(&report.matrix, &task_names(report), report.op, report.bwt).into_bytes(),
        ),
        ("traces.jsonl".into(), formats::traces_jsonl(report)?.into_bytes()),
        ("tasks.jsonl".into(), formats::tasks_jsonl(report)?.into_bytes()),
    ];
    let mut s = summary(report);
    let _ = writeln!(s, "max orthonormality error: {:e}", report.max_orthonormality_error);
    let _ = writeln!(s, "backbone checksum: {:016x}", report.backbone_checksum);
    files.push(("summary.txt".into(), s.into_bytes()));
    let mut table = String::from("task,gid\n");
    for (t, g) in &report.table {
        let _ = writeln!(table, "{t},{g}");
    }
    files.push(("groups/table.csv".into(), table.into_bytes()));

    files.push(("backbone.bin".into(), formats::encode_backbone(backbone)));
    for g in &report.groups {
        files.push((format!("groups/group-{}.ivt", g.gid), formats::encode_intervention(&g.intervention)));
    }
    Ok(files)
}

pub fn digest(files: &[(String, Vec<u8>)]) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

/// Write every artifact under `dir` and return the report hash.
pub fn write_run(dir: &Path, cfg: &RunConfig, report: &RunReport, backbone: &FrozenBackbone) -> Result<String> {
    let files = run_files(cfg, report, backbone)?;
    let hash = digest(&files);
    for (name, bytes) in &files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    std::fs::write(dir.join(HASH_FILE), format!("{hash}\n"))?;
    Ok(hash)
}

/// What `report` finds in a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DirCheck {
    pub op: f64,
    pub bwt: f64,
    pub metrics_match: bool,
    pub stored_hash: String,
    pub actual_hash: String,
}

impl DirCheck {
    pub fn ok(&self) -> bool {
        self.metrics_match && self.stored_hash == self.actual_hash
    }
}

fn collect(dir: &Path, rel: &str, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir.join(rel))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let rel_name = if rel.is_empty() { name } else { format!("{rel}/{name}") };
        if entry.file_type()?.is_dir() {
            collect(dir, &rel_name, out)?;
        } else if rel_name != HASH_FILE {
            out.push(rel_name);
        }
    }
    Ok(())
}

/// Recompute OP/BWT from the stored matrix and the hash from the stored files.
pub fn check_dir(dir: &Path) -> Result<DirCheck> {
    let text = std::fs::read_to_string(dir.join("matrix.csv")).context("run directory has no matrix.csv")?;
    let (_, m, op, bwt) = formats::parse_matrix_csv(&text)?;
    let (op2, bwt2) = (op_metric(&m)?, bwt_metric(&m)?);
    let stored_hash = std::fs::read_to_string(dir.join(HASH_FILE))
        .context("run directory has no hash file")?
        .trim()
        .to_string();
    let order = [
        "config.toml",
        "routing.csv",
        "matrix.csv",
        "traces.jsonl",
        "tasks.jsonl",
        "summary.txt",
        "groups/table.csv",
        "backbone.bin",
    ];
    let mut names: Vec<String> = order.iter().map(|s| s.to_string()).collect();
    let mut rest = Vec::new();
    collect(dir, "", &mut rest)?;
    let mut groups: Vec<(usize, String)> = rest
        .into_iter()
        .filter_map(|n| {
            let id = n.strip_prefix("groups/group-")?.strip_suffix(".ivt")?.parse().ok()?;
            Some((id, n))
        })
        .collect();
    groups.sort();
    names.extend(groups.into_iter().map(|(_, n)| n));
    let files = names
        .into_iter()
        .map(|n| {
            let bytes = std::fs::read(dir.join(&n)).with_context(|| format!("reading {n}"))?;
            Ok((n, bytes))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DirCheck {
        op,
        bwt,
        metrics_match: op.to_bits() == op2.to_bits() && bwt.to_bits() == bwt2.to_bits(),
        stored_hash,
        actual_hash: digest(&files),
    })
}
