//! Binary weight files and text report formats.
//!
//! Weight files start with a UTF-8 header of `key: value` lines closed by a
//! line holding `---`, followed by little-endian `f64` payload in the order
//! the header lists. Interventions store `R_raw`, never the orthonormalized
//! `R`, so loading reproduces the exact state that was saved.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use craft_core::loreft::{LayerIntervention, StreamSpec};
use craft_core::metrics::EvalMatrix;
use craft_core::pipeline::RunReport;
use craft_core::router::{Candidate, RoutingDecision};
use craft_core::{BackboneConfig, FrozenBackbone, Intervention, Tensor};

const BACKBONE_MAGIC: &str = "craft-backbone/1";
const INTERVENTION_MAGIC: &str = "craft-intervention/1";

struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .with_context(|| format!("header is missing `{key}`"))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| anyhow::anyhow!("header field `{key}` is not a number"))
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn encode_weight_file(header: &[(String, String)], tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for (k, v) in header {
        out.extend_from_slice(format!("{k}: {v}\n").as_bytes());
    }
    out.extend_from_slice(b"---\n");
    for t in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_weight_file(path: &Path, magic: &str) -> Result<(Header, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", path.display()))?;
    let end = bytes
        .windows(4)
        .position(|w| w == b"---\n")
        .context("weight file has no header terminator")?;
    let text = std::str::from_utf8(&bytes[..end]).context("weight file header is not UTF-8")?;
    let entries = text
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(": ").with_context(|| format!("bad header line `{l}`"))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = Header { entries };
    ensure!(header.get("format")? == magic, "{} is not a {magic} file", path.display());
    let payload = &bytes[end + 4..];
    ensure!(payload.len() % 8 == 0, "payload length {} is not a multiple of 8", payload.len());
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, data))
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse().with_context(|| format!("bad shape `{s}`")))
        .collect()
}

pub fn write_backbone(path: &Path, model: &FrozenBackbone) -> Result<()> {
    write_bytes(path, &encode_backbone(model))
}

pub fn encode_backbone(model: &FrozenBackbone) -> Vec<u8> {
    let c = model.config();
    let mut header = vec![
        ("format".to_string(), BACKBONE_MAGIC.to_string()),
        ("num_layers".into(), c.num_layers.to_string()),
        ("hidden_dim".into(), c.hidden_dim.to_string()),
        ("num_heads".into(), c.num_heads.to_string()),
        ("vocab_size".into(), c.vocab_size.to_string()),
        ("max_seq_len".into(), c.max_seq_len.to_string()),
        ("init_seed".into(), c.init_seed.to_string()),
        ("checksum".into(), format!("{:016x}", model.checksum())),
    ];
    let weights = model.named_weights();
    for (name, t) in &weights {
        header.push(("tensor".into(), format!("{name} {}", shape_str(t.shape()))));
    }
    let tensors: Vec<&Tensor> = weights.iter().map(|(_, t)| *t).collect();
    encode_weight_file(&header, &tensors)
}

pub fn read_backbone(path: &Path) -> Result<FrozenBackbone> {
    let (h, data) = read_weight_file(path, BACKBONE_MAGIC)?;
    let config = BackboneConfig {
        num_layers: h.num("num_layers")?,
        hidden_dim: h.num("hidden_dim")?,
        num_heads: h.num("num_heads")?,
        vocab_size: h.num("vocab_size")?,
        max_seq_len: h.num("max_seq_len")?,
        init_seed: h.num("init_seed")?,
    };
    let mut weights = Vec::new();
    let mut offset = 0;
    for entry in h.all("tensor") {
        let (_, shape) = entry.split_once(' ').with_context(|| format!("bad tensor entry `{entry}`"))?;
        let n: usize = parse_shape(shape)?.iter().product();
        ensure!(offset + n <= data.len(), "payload too short for tensor `{entry}`");
        weights.push(data[offset..offset + n].to_vec());
        offset += n;
    }
    ensure!(offset == data.len(), "payload has {} trailing values", data.len() - offset);
    let model = FrozenBackbone::from_weights(config, weights)?;
    let expected = h.get("checksum")?;
    ensure!(
        format!("{:016x}", model.checksum()) == expected,
        "backbone checksum mismatch in {}",
        path.display()
    );
    Ok(model)
}

pub fn write_intervention(path: &Path, iv: &Intervention) -> Result<()> {
    write_bytes(path, &encode_intervention(iv))
}

pub fn encode_intervention(iv: &Intervention) -> Vec<u8> {
    let layers: Vec<String> = iv.layers().map(|l| l.to_string()).collect();
    let dim = iv.sites.values().next().map_or(0, |s| s.dim());
    let header = vec![
        ("format".to_string(), INTERVENTION_MAGIC.to_string()),
        ("dim".into(), dim.to_string()),
        ("rank".into(), iv.rank().to_string()),
        ("t_pos".into(), iv.stream.t_pos.to_string()),
        ("layers".into(), layers.join(",")),
        ("params".into(), "r_raw,w,b".into()),
    ];
    encode_weight_file(&header, &iv.params())
}

pub fn read_intervention(path: &Path) -> Result<Intervention> {
    let (h, data) = read_weight_file(path, INTERVENTION_MAGIC)?;
    let dim: usize = h.num("dim")?;
    let rank: usize = h.num("rank")?;
    let layers_field = h.get("layers")?;
    let layers: Vec<usize> = if layers_field.is_empty() {
        Vec::new()
    } else {
        layers_field
            .split(',')
            .map(|l| l.parse().with_context(|| format!("bad layer `{l}`")))
            .collect::<Result<_>>()?
    };
    let per_layer = 2 * rank * dim + rank;
    ensure!(
        data.len() == per_layer * layers.len(),
        "expected {} values, found {}",
        per_layer * layers.len(),
        data.len()
    );
    let mut sites = BTreeMap::new();
    for (i, &l) in layers.iter().enumerate() {
        let chunk = &data[i * per_layer..(i + 1) * per_layer];
        let (r, rest) = chunk.split_at(rank * dim);
        let (w, b) = rest.split_at(rank * dim);
        sites.insert(
            l,
            LayerIntervention {
                r_raw: Tensor::new(vec![rank, dim], r.to_vec())?.trainable(),
                w: Tensor::new(vec![rank, dim], w.to_vec())?.trainable(),
                b: Tensor::new(vec![rank], b.to_vec())?.trainable(),
            },
        );
    }
    Ok(Intervention {
        sites,
        stream: StreamSpec { t_pos: h.num("t_pos")? },
    })
}

fn opt_gid(c: &Option<Candidate>) -> String {
    c.map_or(String::new(), |c| c.gid.to_string())
}

fn opt_dist(c: &Option<Candidate>) -> String {
    c.map_or(String::new(), |c| c.distance.to_string())
}

/// One row per task with the best and runner-up groups and the raw
/// divergences behind the best candidate.
pub fn routing_csv(decisions: &[RoutingDecision]) -> String {
    let mut s = String::from("task,decision,gid,best_gid,d_best,runner_gid,d_runner,floor,D_K,D_G,D_KG\n");
    for d in decisions {
        let decision = match d.decision {
            craft_core::Decision::Join => "JOIN",
            craft_core::Decision::New => "NEW",
        };
        let (d_g, d_kg) = d.best.map_or((String::new(), String::new()), |b| (b.d_g.to_string(), b.d_kg.to_string()));
        let _ = writeln!(
            s,
            "{},{decision},{},{},{},{},{},{},{},{d_g},{d_kg}",
            d.task_id,
            d.gid,
            opt_gid(&d.best),
            opt_dist(&d.best),
            opt_gid(&d.runner_up),
            opt_dist(&d.runner_up),
            d.floor_triggered,
            d.d_k,
        );
    }
    s
}

/// Lower-triangular matrix with task names as header, then OP and BWT.
pub fn matrix_csv(m: &EvalMatrix, names: &[String], op: f64, bwt: f64) -> String {
    let mut s = String::from("after");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (j, row) in m.rows.iter().enumerate() {
        s.push_str(&names[j]);
        for i in 0..names.len() {
            s.push(',');
            if let Some(v) = row.get(i) {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    let _ = writeln!(s, "OP,{op}");
    let _ = writeln!(s, "BWT,{bwt}");
    s
}

/// Inverse of [`matrix_csv`]: task names, rows, and the stored OP/BWT.
pub fn parse_matrix_csv(text: &str) -> Result<(Vec<String>, EvalMatrix, f64, f64)> {
    let mut lines = text.lines();
    let head = lines.next().context("empty matrix file")?;
    let names: Vec<String> = head.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let (mut op, mut bwt) = (None, None);
    for line in lines {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        match label {
            "OP" => op = Some(cells.next().context("OP value")?.parse()?),
            "BWT" => bwt = Some(cells.next().context("BWT value")?.parse()?),
            _ => rows.push(
                cells
                    .filter(|c| !c.is_empty())
                    .map(|c| c.parse::<f64>().with_context(|| format!("bad score `{c}`")))
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }
    let m = EvalMatrix::from_rows((0..names.len() as u32).collect(), rows)?;
    match (op, bwt) {
        (Some(op), Some(bwt)) => Ok((names, m, op, bwt)),
        _ => bail!("matrix file lacks OP/BWT footer"),
    }
}

#[derive(serde::Serialize)]
struct TraceLine<'a> {
    task: u32,
    phase: usize,
    step: usize,
    epoch: usize,
    task_loss: f64,
    kl: f64,
    lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    event: Option<&'a str>,
}

/// Per-step KL trajectory of every training phase.
pub fn traces_jsonl(report: &RunReport) -> Result<String> {
    let mut s = String::new();
    for t in &report.tasks {
        for (p, trace) in t.phases.iter().enumerate() {
            let last = trace.steps.len().saturating_sub(1);
            for (i, st) in trace.steps.iter().enumerate() {
                let event = if i != last {
                    None
                } else if trace.evicted {
                    Some("evicted")
                } else if trace.stopped_early() {
                    Some("early-stop")
                } else {
                    None
                };
                let line = TraceLine {
                    task: t.task_id,
                    phase: p,
                    step: st.step,
                    epoch: st.epoch,
                    task_loss: st.task_loss,
                    kl: st.kl,
                    lr: st.lr,
                    event,
                };
                s.push_str(&serde_json::to_string(&line)?);
                s.push('\n');
            }
        }
    }
    Ok(s)
}

#[derive(serde::Serialize)]
struct TaskLine {
    task: u32,
    family: u32,
    routed_gid: usize,
    final_gid: usize,
    evicted: bool,
    mu1: f64,
    steps: Vec<usize>,
    terminal_sym_kl: f64,
}

pub fn tasks_jsonl(report: &RunReport) -> Result<String> {
    let mut s = String::new();
    for t in &report.tasks {
        let line = TaskLine {
            task: t.task_id,
            family: t.family_id,
            routed_gid: t.routed_gid,
            final_gid: t.final_gid,
            evicted: t.evicted,
            mu1: t.phases[0].mu1,
            steps: t.phases.iter().map(|p| p.stop_step).collect(),
            terminal_sym_kl: t.terminal_sym_kl,
        };
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_round_trip() {
        assert_eq!(parse_shape(&shape_str(&[3, 4, 5])).unwrap(), vec![3, 4, 5]);
        assert!(parse_shape("3xq").is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = craft_core::metrics::reference_fixture();
        let names: Vec<String> = craft_core::metrics::REFERENCE_TASKS.iter().map(|s| s.to_string()).collect();
        let text = matrix_csv(&m, &names, 1.5, -0.25);
        let (n2, m2, op, bwt) = parse_matrix_csv(&text).unwrap();
        assert_eq!(n2, names);
        assert_eq!(m2.rows, m.rows);
        assert_eq!((op, bwt), (1.5, -0.25));
    }
}
