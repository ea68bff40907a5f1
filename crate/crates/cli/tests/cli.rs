use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn objcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objcomp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

// Small sampler and planner budgets keep runs to seconds.
fn fast_config(dir: &Path) -> PathBuf {
    let path = dir.join("fast.json");
    let config = serde_json::json!({
        "sampler": { "n_ess_target": 40, "h_size": 120, "t_max": 4000 },
        "planner": { "horizon": 2, "rollouts_per_action": 10, "particles_per_node": 20 },
    });
    fs::write(&path, config.to_string()).unwrap();
    path
}

#[test]
fn sample_reports_the_edge_marginal() {
    let scene = fixture("two_seg.json");
    let out = objcomp(&["sample", "--scene", scene.to_str().unwrap(), "--seed", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let marginal = report["edges"][0]["marginal"].as_f64().unwrap();
    assert!((marginal - 0.7).abs() < 0.06, "marginal {marginal}");
    assert_eq!(report["edges"][0]["prior"].as_f64(), Some(0.7));
    let total: u64 = report["compositions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["count"].as_u64().unwrap())
        .sum();
    assert_eq!(total, report["samples"].as_u64().unwrap());
}

#[test]
fn missing_scene_exits_with_2() {
    let out = objcomp(&["sample", "--scene", "does/not/exist.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).to_lowercase().contains("no such file"), "{}", stderr(&out));
}

#[test]
fn zero_ess_target_exits_with_2() {
    let scene = fixture("two_seg.json");
    let out = objcomp(&["sample", "--scene", scene.to_str().unwrap(), "--ess-target", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_ess_target"), "{}", stderr(&out));
}

#[test]
fn unknown_method_lists_the_valid_ones() {
    let out = objcomp(&["run", "--generate", "1", "--methods", "best_seg,greedy"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for m in ["best_seg", "max_util", "pomdp", "pomdp_halluc"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn one_method_is_not_a_comparison() {
    let out = objcomp(&["run", "--generate", "1", "--methods", "max_util"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let config = fast_config(dir.path());
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = objcomp(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--generate",
            "3",
            "--methods",
            "best_seg,max_util,pomdp,pomdp_halluc",
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    let episodes = fs::read(a.join("episodes.jsonl")).unwrap();
    assert_eq!(episodes, fs::read(b.join("episodes.jsonl")).unwrap());
    assert_eq!(episodes.iter().filter(|&&c| c == b'\n').count(), 12);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pairwise"].as_array().unwrap().len(), 6);
    let timing = fs::read_to_string(a.join("timing.csv")).unwrap();
    assert!(timing.starts_with("scene_id,method,seed,pre_processing_s,segmentation_s,belief_generation_s,planning_s"));
    assert_eq!(timing.lines().count(), 13);
    assert_eq!(fs::read_to_string(a.join("rewards.csv")).unwrap().lines().count(), 13);
}

#[test]
fn runs_on_scene_files_for_table_clearing() {
    let dir = tempfile::tempdir().unwrap();
    let config = fast_config(dir.path());
    let scene = fixture("two_seg.json");
    let out_dir = dir.path().join("out");
    let out = objcomp(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--task",
        "table_clearing",
        "--methods",
        "best_seg,max_util",
        "--trials",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("episodes.jsonl")).unwrap();
    for line in text.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(record["scene_id"], "two_seg");
        assert_eq!(record["task"], "table_clearing");
        assert!(record["total_reward"].as_f64().unwrap() <= 2.0);
        assert!(record["steps"].as_array().unwrap().len() <= 6);
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("max_util > best_seg"));
}

#[test]
fn generated_scene_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = objcomp(&[
        "generate",
        "--count",
        "2",
        "--seed",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for k in 0..2 {
        let path = dir.path().join(format!("scene_{k:04}.json"));
        let sampled = objcomp(&["sample", "--scene", path.to_str().unwrap(), "--h-size", "300"]);
        assert!(sampled.status.success(), "{}", stderr(&sampled));
    }
}

#[test]
fn scene_and_generator_are_exclusive() {
    let scene = fixture("two_seg.json");
    let out = objcomp(&["run", "--generate", "1", "--scene", scene.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
