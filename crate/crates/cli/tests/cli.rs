use std::path::Path;
use std::process::{Command, Output};

use asgat::graph::{homophily, load_graph, write_graph_tsv, Split};
use asgat::synthetic::planted_partition;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = "lr = 0.01\nhidden = 8\nfilter_hidden = 8\nheads = 2\nk = 4\ndropout = 0.2\nmax_epochs = 40\npatience = 20\nseed = 1\n";

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let g = planted_partition(3, 10, 3, 0.3, 5, 0.8, 7).unwrap();
        std::fs::write(dir.path().join("g.tsv"), write_graph_tsv(&g)).unwrap();
        std::fs::write(dir.path().join("small.conf"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_asgat"));
        cmd.args(args)
            .args(["--dataset", &self.path("g.tsv"), "--out", &self.path("out")]);
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8(out.stdout).unwrap();
        let last = stdout.lines().last().expect("summary line");
        serde_json::from_str(last).unwrap()
    }

    fn csv(&self, name: &str) -> Vec<Vec<String>> {
        let text = std::fs::read_to_string(self.dir.path().join("out").join(name)).unwrap();
        text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
    }
}

#[test]
fn split_writes_a_partition() {
    let env = Env::new();
    let v = env.ok(&["split", "--seed", "4"]);
    assert_eq!(v["command"], "split");
    let total: u64 = ["train", "val", "test"].iter().map(|k| v[k].as_u64().unwrap()).sum();
    assert_eq!(total, 30);
    let text = std::fs::read_to_string(v["file"].as_str().unwrap()).unwrap();
    let s = Split::parse(&text, 30).unwrap();
    assert_eq!(s.train.iter().filter(|&&b| b).count() as u64, v["train"].as_u64().unwrap());
}

#[test]
fn homophily_matches_library() {
    let env = Env::new();
    let v = env.ok(&["homophily"]);
    let g = load_graph(env.path("g.tsv")).unwrap();
    let report = homophily(&g);
    assert!((v["beta"].as_f64().unwrap() - report.beta.unwrap()).abs() < 1e-12);
    let rows = env.csv("homophily.csv");
    assert_eq!(rows[0], ["node", "degree", "same_label", "beta"]);
    assert_eq!(rows.len(), 31);
}

#[test]
fn train_then_eval_agree() {
    let env = Env::new();
    let conf = env.path("small.conf");
    let t = env.ok(&["train", "--config", &conf, "--split-seed", "2"]);
    assert_eq!(t["backend"], "exact");
    let curves = env.csv("curves.csv");
    assert_eq!(curves[0], ["epoch", "train_loss", "val_loss", "val_acc"]);
    assert_eq!(curves.len() as u64 - 1, t["epochs"].as_u64().unwrap());
    let split = env.path("out/split.txt");
    let e = env.ok(&["eval", "--config", &conf, "--split", &split, "--model", t["model"].as_str().unwrap()]);
    assert_eq!(e["test_micro_f1"], t["test_micro_f1"]);
    assert_eq!(e["test_macro_f1"], t["test_macro_f1"]);
    assert_eq!(env.csv("predictions.csv").len(), 31);

    let f = env.ok(&["filters", "--resolution", "11", "--model", t["model"].as_str().unwrap()]);
    assert_eq!(f["heads"], 2);
    let rows = env.csv("filters.csv");
    assert_eq!(rows[0], ["lambda", "head_0", "head_1"]);
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[11][0], "2");
}

#[test]
fn every_backend_trains() {
    let env = Env::new();
    let conf = env.path("small.conf");
    for b in ["exact", "cheb", "arma", "heat"] {
        let v = env.ok(&["train", "--config", &conf, "--backend", b]);
        assert_eq!(v["backend"], b);
        let f1 = v["test_micro_f1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f1));
    }
}

#[test]
fn ablations_write_one_row_per_band_and_head() {
    let env = Env::new();
    let conf = env.path("small.conf");
    let v = env.ok(&["ablate-freq", "--config", &conf, "--step", "0.5"]);
    assert_eq!(v["bands"], 4);
    let rows = env.csv("ablate_freq.csv");
    assert_eq!(rows.len(), 5);
    let points: usize = rows[1..].iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(points, 30);

    let v = env.ok(&["ablate-heads", "--config", &conf, "--mode", "drop-one"]);
    assert_eq!(v["mode"], "drop-one");
    assert_eq!(env.csv("ablate_heads.csv").len(), 3);
}

#[test]
fn density_and_heat_baseline() {
    let env = Env::new();
    let conf = env.path("small.conf");
    let v = env.ok(&["density", "--config", &conf, "--k-list", "1,30"]);
    let d: Vec<f64> = v["density"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((d[0] - 1.0 / 30.0).abs() < 1e-12);
    assert!((d[1] - 1.0).abs() < 1e-12);

    let v = env.ok(&["heat-baseline", "--config", &conf, "--s-list", "0.5,2", "--splits", "2"]);
    assert!([0.5, 2.0].contains(&v["best_scale"].as_f64().unwrap()));
    assert_eq!(env.csv("heat_baseline.csv").len(), 3);
}

#[test]
fn grid_resumes_from_its_table() {
    let env = Env::new();
    let conf = env.path("grid.conf");
    std::fs::write(&conf, format!("{SMALL}grid.lr = 0.01, 0.05\n")).unwrap();
    let first = env.ok(&["grid", "--config", &conf, "--splits", "2"]);
    assert_eq!(first["cells"], 2);
    assert!(Path::new(&env.path("out/grid.tsv")).exists());
    let second = env.ok(&["grid", "--config", &conf, "--splits", "2"]);
    assert_eq!(first["best_score"], second["best_score"]);
    assert_eq!(env.csv("grid.csv").len(), 3);
}

#[test]
fn bad_input_fails_cleanly() {
    let env = Env::new();
    let bad = env.path("bad.conf");
    std::fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let out = env.run(&["train", "--config", &bad]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = env.run(&["ablate-freq", "--step", "0.3"]);
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_asgat"))
        .args(["homophily", "--dataset", &env.path("missing.tsv")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.tsv"));
}
