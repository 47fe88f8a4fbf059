//! End-to-end behaviour of the `psg` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use psg_core::metrics::MetricsReport;
use psg_core::model::load_checkpoint;
use psg_core::scene::load_corpus;

fn psg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psg"))
        .args(args)
        .env_remove("PSG_THREADS")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let path = dir.join(name);
    let mut args = vec!["gen", "-o", p(&path)];
    args.extend_from_slice(extra);
    let out = psg(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    path
}

#[test]
fn usage_and_configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.psgc");
    for args in [
        vec!["gen", "--no-such-flag"],
        vec!["gen", "-o", p(&out), "--hw", "15x15", "--patches", "4"],
        vec!["gen", "-o", p(&out), "--objects", "5..2"],
        vec!["gen", "-o", p(&out), "--hw", "16"],
        vec!["gen"],
        vec!["eval", "--corpus", p(&out)],
        vec!["train", "--corpus", p(&out), "-o", p(dir.path()), "--tau", "1.5"],
        vec!["--threads", "0", "gradcheck"],
    ] {
        let res = psg(&args);
        assert_eq!(res.status.code(), Some(2), "{args:?}: {}", stderr(&res));
    }
    assert!(!out.exists());
}

#[test]
fn runtime_errors_exit_1_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.psgc");
    let out = psg(&["eval", "--oracle", "--corpus", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.psgc"), "{}", stderr(&out));

    let corrupt = gen(dir.path(), "c.psgc", &["--scenes", "3"]);
    let mut bytes = fs::read(&corrupt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&corrupt, bytes).unwrap();
    let out = psg(&["eval", "--oracle", "--corpus", p(&corrupt)]);
    assert_eq!(out.status.code(), Some(1));

    // A model whose channel count does not match the corpus.
    let wide = gen(dir.path(), "wide.psgc", &["--scenes", "4", "--channels", "16"]);
    let narrow = gen(dir.path(), "narrow.psgc", &["--scenes", "4", "--channels", "8"]);
    let run = dir.path().join("run");
    let out = psg(&[
        "train",
        "--corpus",
        p(&narrow),
        "--phase1",
        "1",
        "--phase2",
        "0",
        "-o",
        p(&run),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = psg(&["eval", "--corpus", p(&wide), "--ckpt", p(&run.join("model.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_corpus_is_fine_to_generate_but_not_to_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "empty.psgc", &["--scenes", "0"]);
    let (manifest, scenes) = load_corpus(&path).unwrap();
    assert_eq!((manifest.num_scenes, scenes.len()), (0, 0));
    let out = psg(&["eval", "--oracle", "--corpus", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
    let out = psg(&["train", "--corpus", p(&path), "-o", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generation_is_reproducible_and_snapshotted() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.psgc", &["--scenes", "8", "--seed", "3"]);
    let b = gen(dir.path(), "b.psgc", &["--scenes", "8", "--seed", "3"]);
    let c = gen(dir.path(), "c.psgc", &["--scenes", "8", "--seed", "4"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let snapshot: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.psgc.config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["command"], "gen");
}

#[test]
fn printed_table_matches_the_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), "c.psgc", &["--scenes", "20"]);
    let run = dir.path().join("run");
    assert!(psg(&[
        "train",
        "--corpus",
        p(&corpus),
        "--phase1",
        "1",
        "--phase2",
        "1",
        "-o",
        p(&run)
    ])
    .status
    .success());
    let report = dir.path().join("r.json");
    let out = psg(&[
        "eval",
        "--corpus",
        p(&corpus),
        "--ckpt",
        p(&run.join("model.ckpt")),
        "--k",
        "5,20",
        "-o",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json = MetricsReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json.ks, vec![5, 20]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut rows = 0;
    for line in stdout.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        match cols[0] {
            "PQ" => assert_eq!(cols[1].parse::<f64>().unwrap(), json.pq),
            "SQ" => assert_eq!(cols[1].parse::<f64>().unwrap(), json.sq),
            "RQ" => assert_eq!(cols[1].parse::<f64>().unwrap(), json.rq),
            k => {
                if let Ok(k) = k.parse::<usize>() {
                    assert_eq!(cols[1].parse::<f64>().unwrap(), json.recall[&k]);
                    assert_eq!(cols[2].parse::<f64>().unwrap(), json.mean_recall[&k]);
                    rows += 1;
                }
            }
        }
    }
    assert_eq!(rows, 2);
    assert_eq!(json.checkpoint_id.len(), 8);
    assert_eq!(json.corpus_id.len(), 8);
}

#[test]
fn training_outputs_follow_the_phases() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), "c.psgc", &["--scenes", "12"]);
    let hard = dir.path().join("hard");
    let out = psg(&[
        "train",
        "--corpus",
        p(&corpus),
        "--phase1",
        "2",
        "--phase2",
        "0",
        "-o",
        p(&hard),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(hard.join("model.ckpt").exists());
    assert!(!hard.join("teacher.ckpt").exists());
    assert_eq!(
        fs::read_to_string(hard.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let both = dir.path().join("both");
    let out = psg(&[
        "train",
        "--corpus",
        p(&corpus),
        "--phase1",
        "1",
        "--phase2",
        "2",
        "--model",
        "pairwise",
        "--refresh",
        "per-epoch",
        "--phase2-loss",
        "bce",
        "-o",
        p(&both),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let teacher = load_checkpoint(both.join("teacher.ckpt")).unwrap();
    assert_eq!(teacher.header.ema_decay, Some(0.999));
    let log: Vec<serde_json::Value> = fs::read_to_string(both.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let phases: Vec<u64> = log.iter().map(|r| r["phase"].as_u64().unwrap()).collect();
    assert_eq!(phases, vec![1, 2, 2]);
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(both.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["command"], "train");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("psg.toml");
    fs::write(&config, "[gen]\nscenes = 5\nseed = 2\nhw = \"8x8\"\nchannels = 4\n").unwrap();
    let from_file = dir.path().join("f.psgc");
    let out = psg(&["--config", p(&config), "gen", "--scenes", "3", "-o", p(&from_file)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let direct = gen(
        dir.path(),
        "d.psgc",
        &["--scenes", "3", "--seed", "2", "--hw", "8x8", "--channels", "4"],
    );
    assert_eq!(fs::read(&from_file).unwrap(), fs::read(&direct).unwrap());

    fs::write(&config, "[gen]\nno-such-key = 1\n").unwrap();
    let out = psg(&["--config", p(&config), "gen", "-o", p(&from_file)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let out = psg(&["gradcheck", "--seed", "2", "-o", p(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["blocks"].as_array().unwrap().len() > 10);
    assert_eq!(psg(&["gradcheck", "--corrupt"]).status.code(), Some(1));
}
