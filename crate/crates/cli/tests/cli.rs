use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const TINY: &[&str] = &[
    "seed_episodes=2",
    "collect_interval=1",
    "batch=3",
    "seq_len=6",
    "horizon=3",
    "episode_len=12",
    "total_steps=120",
    "imagine_starts=8",
    "checkpoint_every=60",
    "model.enc_width=8",
    "model.fwd_hidden=8",
    "model.window=3",
    "model.deter=8",
    "model.hidden=8",
    "model.actor_hidden=8",
    "model.critic_hidden=8",
    "eval.contexts=2",
    "eval.episodes=1",
    "eval.bootstrap=50",
];

fn dali(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dali")).args(args).output().expect("spawn dali")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for s in TINY.iter().chain(extra) {
        args.push("--set");
        args.push(s);
    }
    args
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

struct Runs {
    _root: tempfile::TempDir,
    dali: PathBuf,
    dreamer: PathBuf,
}

/// Two tiny finished runs shared by every test in this file.
fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let train = |variant: &str| {
            let dir = root.path().join(variant);
            let v = format!("variant={variant}");
            let out = dali(&with_tiny(vec!["train", "--out", dir.to_str().unwrap()], &[&v]));
            assert!(out.status.success(), "train {variant}: {}", stderr(&out));
            dir
        };
        let dali = train("dali_s");
        let dreamer = train("dreamer_dr");
        Runs { _root: root, dali, dreamer }
    })
}

#[test]
fn unknown_variant_exits_two_and_names_the_key() {
    let out = dali(&["train", "--set", "variant=dali_x"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("variant"), "{msg}");
    assert!(msg.contains("dali_x"), "{msg}");
}

#[test]
fn unknown_key_and_bad_value_exit_two() {
    let out = dali(&["train", "--set", "model.depth=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.depth"));
    let out = dali(&["train", "--set", "gamma=fast"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gamma"));
}

#[test]
fn train_writes_resolved_config_log_and_checkpoints() {
    let r = runs();
    let cfg = std::fs::read_to_string(r.dali.join("config.cfg")).unwrap();
    assert!(cfg.contains("variant = dali_s"), "{cfg}");
    assert!(cfg.contains("total_steps = 120"));
    assert!(cfg.contains("model.deter = 8"));
    assert!(r.dali.join("final.ckpt").exists());
    assert!(r.dali.join("replay.bin").exists());
    let log = std::fs::read_to_string(r.dali.join("log.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);
    for line in log.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
}

#[test]
fn eval_respects_regimes_and_hashes_deterministically() {
    let r = runs();
    let tmp = tempfile::tempdir().unwrap();
    let run_eval = |name: &str| {
        let out_dir = tmp.path().join(name);
        let out = dali(&with_tiny(
            vec![
                "eval",
                "--checkpoint",
                r.dali.to_str().unwrap(),
                r.dreamer.to_str().unwrap(),
                "--regimes",
                "extrapolate",
                "--out",
                out_dir.to_str().unwrap(),
            ],
            &[],
        ));
        assert!(out.status.success(), "eval: {}", stderr(&out));
        out_dir
    };
    let a = run_eval("a");
    let b = run_eval("b");
    let report = read_json(&a.join("report.json"));
    let sections = report["sections"].as_array().unwrap();
    assert_eq!(sections.len(), 1);
    assert_eq!(sections[0]["regime"], "extrapolate");
    let methods: Vec<&str> = sections[0]["methods"].as_array().unwrap().iter().map(|m| m["method"].as_str().unwrap()).collect();
    assert!(methods.contains(&"dali_s") && methods.contains(&"dreamer_dr"), "{methods:?}");
    let ha = report["archive_sha256"].as_str().unwrap().to_string();
    let hb = read_json(&b.join("report.json"))["archive_sha256"].as_str().unwrap().to_string();
    assert_eq!(ha, hb);
    assert_eq!(std::fs::read(a.join("scores.csv")).unwrap(), std::fs::read(b.join("scores.csv")).unwrap());
    let cfg = std::fs::read_to_string(a.join("config.cfg")).unwrap();
    assert!(cfg.contains("eval.regimes = extrapolate"), "{cfg}");
    assert!(a.join("iqm.svg").exists() && a.join("poi.svg").exists());
}

#[test]
fn eval_rejects_unknown_regime() {
    let r = runs();
    let tmp = tempfile::tempdir().unwrap();
    let out = dali(&[
        "eval",
        "--checkpoint",
        r.dali.to_str().unwrap(),
        "--regimes",
        "sideways",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn counterfactual_on_a_single_dimension() {
    let r = runs();
    let tmp = tempfile::tempdir().unwrap();
    let out = dali(&[
        "counterfactual",
        "--checkpoint",
        r.dali.to_str().unwrap(),
        "--dims",
        "6",
        "--pairs",
        "20",
        "--horizon",
        "6",
        "--history",
        "3",
        "--period-starts",
        "2",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ranking = read_json(&tmp.path().join("ranking.json"));
    let scores = ranking["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 1);
    assert_eq!(scores[0]["dim"], 5);
    let auc = scores[0]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(tmp.path().join("auc.svg").exists());
    assert!(tmp.path().join("trajectory_dim6.svg").exists());
    let period = read_json(&tmp.path().join("period.json"));
    assert_eq!(period["dim"], 6);
    let table = std::fs::read_to_string(tmp.path().join("ranking.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn counterfactual_rejects_bad_dims_and_baselines() {
    let r = runs();
    let tmp = tempfile::tempdir().unwrap();
    let out = dali(&["counterfactual", "--checkpoint", r.dali.to_str().unwrap(), "--dims", "9", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = dali(&["counterfactual", "--checkpoint", r.dreamer.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dreamer_dr"));
}

#[test]
fn probe_compares_runs_and_draws_the_requested_grid() {
    let r = runs();
    let tmp = tempfile::tempdir().unwrap();
    let out = dali(&[
        "probe",
        "--checkpoint",
        r.dali.to_str().unwrap(),
        r.dreamer.to_str().unwrap(),
        "--kgrid",
        "1,2,4,8",
        "--min-episodes",
        "1",
        "--decay-episodes",
        "8",
        "--decay-episode-len",
        "24",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let own = read_json(&tmp.path().join("probe_dali_s_seed0.json"));
    assert_eq!(own.as_array().unwrap().len(), 2);
    let base = read_json(&tmp.path().join("probe_dreamer_dr_seed0.json"));
    assert_eq!(base.as_array().unwrap().len(), 1);
    let cmp = read_json(&tmp.path().join("comparison.json"));
    assert_eq!(cmp.as_array().unwrap().len(), 2);
    let decay = read_json(&tmp.path().join("decay.json"));
    let points = decay[0][1]["points"].as_array().unwrap();
    let ks: Vec<u64> = points.iter().map(|p| p["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, vec![1, 2, 4, 8]);
    assert!(tmp.path().join("decay.svg").exists());
}

#[test]
fn probe_rejects_unordered_grid() {
    let r = runs();
    let out = dali(&["probe", "--checkpoint", r.dali.to_str().unwrap(), "--kgrid", "4,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_root_variable_redirects_default_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dali"))
        .args(with_tiny(vec!["train"], &["total_steps=24", "seed=3"]))
        .env("DALI_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("swing_dali_s_seed3").join("final.ckpt").exists());
}
