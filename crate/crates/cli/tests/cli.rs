use std::path::Path;
use std::process::Command;

use craft_cli::config::{resolve, Profile};
use craft_cli::formats::{parse_matrix_csv, read_backbone, read_intervention, write_backbone, write_intervention};
use craft_cli::output::check_dir;
use craft_core::{BackboneConfig, FrozenBackbone, Intervention};
use craft_core::loreft::StreamSpec;

const TINY: &[&str] = &[
    "stream.families=[{kind=\"copy\",count=1},{kind=\"marker-classification\",count=1}]",
    "stream.splits={train=16,probe=4,heldout=8}",
    "train.epochs=2",
    "router.warmup_steps=4",
];

fn craft(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_craft")).args(args).output().expect("binary runs")
}

fn run_into(dir: &Path) -> std::process::Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["run", "--out", out];
    for o in TINY {
        args.extend(["--set", o]);
    }
    craft(&args)
}

#[test]
fn backbone_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = FrozenBackbone::build(BackboneConfig { init_seed: 11, ..Default::default() }).unwrap();
    let p = dir.path().join("b.bin");
    write_backbone(&p, &model).unwrap();
    let back = read_backbone(&p).unwrap();
    assert_eq!(back.checksum(), model.checksum());
    for ((n1, t1), (n2, t2)) in model.named_weights().iter().zip(back.named_weights().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data());
    }
}

#[test]
fn corrupted_backbone_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = FrozenBackbone::build(BackboneConfig::default()).unwrap();
    let p = dir.path().join("b.bin");
    write_backbone(&p, &model).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&p, &bytes).unwrap();
    assert!(read_backbone(&p).is_err());
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_backbone(&p).is_err());
}

#[test]
fn intervention_file_keeps_raw_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let iv = Intervention::random(32, 8, &[0, 1], StreamSpec { t_pos: 3 }, 0.01, 5).unwrap();
    let p = dir.path().join("g.ivt");
    write_intervention(&p, &iv).unwrap();
    let back = read_intervention(&p).unwrap();
    assert_eq!(back.checksum(), iv.checksum());
    assert_eq!(back.sites[&1].r_raw.data(), iv.sites[&1].r_raw.data());
    assert_eq!(back.stream, iv.stream);
}

#[test]
fn config_file_and_overrides_layer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "[router]\ndelta = 0.4\n[train]\nbeta = 0.1\n").unwrap();
    let cfg = resolve(Profile::Desk, Some(&p), &["train.beta=0.9".into()]).unwrap();
    assert_eq!(cfg.router.delta, 0.4);
    assert_eq!(cfg.train.beta, 0.9);
    std::fs::write(&p, "[router]\ndelta = \"far\"\n").unwrap();
    assert!(resolve(Profile::Desk, Some(&p), &[]).is_err());
}

#[test]
fn run_writes_a_verifiable_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "routing.csv", "matrix.csv", "traces.jsonl", "tasks.jsonl", "summary.txt", "backbone.bin", "groups/table.csv", "groups/group-0.ivt"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let routing = std::fs::read_to_string(dir.path().join("routing.csv")).unwrap();
    assert_eq!(routing.lines().count(), 3);
    assert!(routing.lines().nth(1).unwrap().starts_with("0,NEW,0,"));
    let (names, m, _, _) = parse_matrix_csv(&std::fs::read_to_string(dir.path().join("matrix.csv")).unwrap()).unwrap();
    assert_eq!(names.len(), 2);
    assert!(m.is_complete());
    for line in std::fs::read_to_string(dir.path().join("traces.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "epoch", "task_loss", "kl", "lr"] {
            assert!(v.get(k).is_some(), "trace line lacks {k}");
        }
    }

    let check = check_dir(dir.path()).unwrap();
    assert!(check.ok());
    let rep = craft(&["report", dir.path().to_str().unwrap()]);
    assert!(rep.status.success());

    // tampering with any artifact breaks the stored hash
    let p = dir.path().join("routing.csv");
    std::fs::write(&p, routing.replace("NEW", "JOIN")).unwrap();
    assert!(!check_dir(dir.path()).unwrap().ok());
    assert_eq!(craft(&["report", dir.path().to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn bad_input_exits_with_error() {
    let out = craft(&["run", "--set", "router.delta=-1", "--out", "/nonexistent/x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = craft(&["sweep", "--axis", "delta", "--values", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = craft(&["ablate", "--modes", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixtures_print_reference_metrics() {
    let out = craft(&["fixtures"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let (_, _, op, bwt) = parse_matrix_csv(&text).unwrap();
    assert!((op - 50.3133).abs() < 1e-4);
    assert!((bwt - 2.6067).abs() < 1e-4);
}
