use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use privtx_core::model::{save_weights, ModelConfig, ModelWeights};
use privtx_core::RingParams;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

const TOY: &str = r#"seed = 5
mode = "fpc"

[model]
n_blocks = 1
d_emb = 8
heads = 2
n_tokens = 4
vocab = 32
d_ff = 16
d_out = 4
"#;

fn privtx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privtx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn plan_picks_tokens_first_for_large_vocab() {
    let o = privtx(&["plan", "30", "30522", "4096"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("tokens_first, c=224"), "{}", stdout(&o));
    let o = privtx(&["plan", "30", "30522", "4096", "--json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ciphertexts"], 224);
    assert_eq!(v["layout"]["strategy"], "tokens_first");
}

#[test]
fn verify_passes_on_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let o = privtx(&["verify", "--config", cfg.to_str().unwrap()]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}{}", stderr(&o));
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 23, "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn verify_exits_one_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tight.toml", &format!("{TOY}\n[he]\nnoise_budget = 4\n"));
    let o = privtx(&["verify", "--config", cfg.to_str().unwrap(), "--mode", "f"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("noise budget"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &TOY.replace("mode = \"fpc\"", "mode = \"fastest\""),
    );
    let o = privtx(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("line 2") && e.contains("fastest"), "{e}");

    let cfg = write(
        dir.path(),
        "bad2.toml",
        &TOY.replace("d_out = 4", "d_out = 4\nd_hidden = 3"),
    );
    let e = stderr(&privtx(&["verify", "--config", cfg.to_str().unwrap()]));
    assert!(e.contains("line 12") && e.contains("d_hidden"), "{e}");
}

#[test]
fn same_seed_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let run = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let o = privtx(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--report",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("seconds are modeled"));
        std::fs::read(p).unwrap()
    };
    let a = run("a.json", "9");
    assert_eq!(a, run("b.json", "9"));
    assert_ne!(a, run("c.json", "10"));
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["equivalence"]["exact"], true);
    assert_eq!(v["prefix_interactions"], 1);
}

#[test]
fn report_totals_are_step_sums() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let p = dir.path().join("r.json");
    let o = privtx(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "base",
        "--report",
        p.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
    for phase in ["offline", "online"] {
        for field in ["bytes", "interactions", "and_garbled", "ot_chunks", "messages"] {
            let sum: u64 = v["steps"]
                .as_array()
                .unwrap()
                .iter()
                .map(|s| s[phase][field].as_u64().unwrap())
                .sum();
            assert_eq!(sum, v["total"][phase][field].as_u64().unwrap(), "{phase} {field}");
        }
    }
}

#[test]
fn compare_shows_no_online_he_in_embed_and_qkv_for_f() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let p = dir.path().join("cmp.json");
    let o = privtx(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--report",
        p.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("online HE operations"));
    let v: Value = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
    let reports = v[0]["reports"].as_array().unwrap();
    let modes: Vec<&str> = reports.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["base", "f", "fp", "fpc"]);
    let online_he = |r: &Value, step: &str| -> u64 {
        let s = r["steps"]
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["step"] == step)
            .unwrap();
        s["online"]["he"]
            .as_object()
            .unwrap()
            .values()
            .map(|x| x.as_u64().unwrap())
            .sum()
    };
    for step in ["Embed", "QKV"] {
        assert!(online_he(&reports[0], step) > 0, "base {step}");
        assert_eq!(online_he(&reports[1], step), 0, "f {step}");
    }
}

#[test]
fn weights_file_supplies_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::toy(1, 8, 1, 2);
    let ring = RingParams::default();
    let w = ModelWeights::random(&model, &ring, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
    save_weights(&dir.path().join("w.prw"), &model, &ring, &w).unwrap();
    let cfg = write(dir.path(), "w.toml", "seed = 2\nweights = \"w.prw\"\nmode = \"f\"\n");
    let o = privtx(&["verify", "--config", cfg.to_str().unwrap(), "--mode", "f"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));

    let cfg = write(dir.path(), "clash.toml", &format!("weights = \"w.prw\"\n{TOY}"));
    let e = stderr(&privtx(&["run", "--config", cfg.to_str().unwrap()]));
    assert!(e.contains("clash.toml:1: field `weights`"), "{e}");
}
