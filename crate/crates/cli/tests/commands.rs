use std::fs;
use std::path::{Path, PathBuf};

use policyscope_cli::{run, EXIT_RUNTIME, EXIT_USAGE};
use tempfile::TempDir;

const TINY: &str = "\
n_rounds = 2
rollouts_per_round = 60
atoms = 4
batch_size = 32
max_epochs = 4
patience = 2
n_layers = 2
hidden = [8]
";

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["policyscope"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn fit(&self, env: &str, policy: &str, seed: &str, out: &str) -> i32 {
        let cfg = self.path("tiny.toml");
        let out = self.path(out);
        let diag = self.path(&format!("{policy}-{seed}.jsonl"));
        cli(&[
            "fit",
            "--env",
            env,
            "--policy",
            policy,
            "--config",
            s(&cfg),
            "--seed",
            seed,
            "--out",
            s(&out),
            "--diagnostics",
            s(&diag),
        ])
    }
}

#[test]
fn fit_is_byte_reproducible_and_logs_each_round() {
    let ws = Workspace::new();
    assert_eq!(ws.fit("gaussbench-d2", "default", "7", "a.json"), 0);
    assert_eq!(ws.fit("gaussbench-d2", "default", "7", "b.json"), 0);
    let a = fs::read(ws.path("a.json")).unwrap();
    let b = fs::read(ws.path("b.json")).unwrap();
    assert_eq!(a, b);

    let log = fs::read_to_string(ws.path("default-7.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["round"], i + 1);
        for key in ["train_loss", "val_loss", "r_star", "wall_time_s"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }

    assert_eq!(ws.fit("gaussbench-d2", "default", "8", "c.json"), 0);
    assert_ne!(fs::read(ws.path("c.json")).unwrap(), a);
}

#[test]
fn sample_eval_and_pairgrid_write_their_files() {
    let ws = Workspace::new();
    assert_eq!(ws.fit("puckworld", "push", "1", "push.json"), 0);
    let cert = ws.path("push.json");

    let samples = ws.path("samples.csv");
    assert_eq!(
        cli(&[
            "sample",
            "--cert",
            s(&cert),
            "-n",
            "25",
            "--out",
            s(&samples)
        ]),
        0
    );
    let text = fs::read_to_string(&samples).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x,y,mass,w,h,fr0,fr1,fr2");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 25);
    for row in rows {
        let v: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(v.len(), 8);
        assert!((1.0..=20.0).contains(&v[2]));
    }

    let metrics = ws.path("metrics.json");
    assert_eq!(
        cli(&[
            "eval",
            "--cert",
            s(&cert),
            "-n",
            "200",
            "--out",
            s(&metrics)
        ]),
        0
    );
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let frac = v["oracle_success_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));
    assert!(v["self_entropy_estimate"].is_number());

    let grid = ws.path("grid.csv");
    let code = cli(&[
        "pairgrid",
        "--cert",
        s(&cert),
        "-n",
        "300",
        "--bins",
        "5",
        "--out",
        s(&grid),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&grid).unwrap();
    assert!(text.starts_with("dim_a,dim_b,bin_a,bin_b,center_a,center_b,density\n"));
    // 8 marginals of 5 bins plus 28 pairs of 25 cells
    assert_eq!(text.lines().count(), 1 + 8 * 5 + 28 * 25);
}

#[test]
fn select_writes_one_row_per_method() {
    let ws = Workspace::new();
    assert_eq!(ws.fit("puckworld", "push", "2", "push.json"), 0);
    assert_eq!(ws.fit("puckworld", "pickplace", "3", "pick.json"), 0);
    let certs = format!("{},{}", s(&ws.path("push.json")), s(&ws.path("pick.json")));
    let out = ws.path("select.csv");
    let choices = ws.path("choices.csv");
    let code = cli(&[
        "select",
        "--certs",
        &certs,
        "--env",
        "puckworld",
        "--beliefs",
        "50",
        "--seed",
        "4",
        "--score-samples",
        "32",
        "--out",
        s(&out),
        "--choices",
        s(&choices),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,mean_reward,std_err,n");
    let methods: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        methods,
        ["learned", "random", "always-pickplace", "always-push"]
    );
    assert!(lines[1..].iter().all(|l| l.ends_with(",50")));
    assert_eq!(fs::read_to_string(&choices).unwrap().lines().count(), 51);
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = Workspace::new();
    let out = ws.path("x.json");
    assert_eq!(cli(&["fit", "--bogus"]), EXIT_USAGE);
    assert_eq!(cli(&[]), EXIT_USAGE);
    assert_eq!(ws.fit("fetch", "push", "1", "x.json"), EXIT_USAGE);
    assert_eq!(ws.fit("puckworld", "throw", "1", "x.json"), EXIT_USAGE);
    let bad = ws.path("bad.toml");
    fs::write(&bad, "n_round = 3\n").unwrap();
    let code = cli(&[
        "fit",
        "--env",
        "puckworld",
        "--policy",
        "push",
        "--config",
        s(&bad),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn runtime_errors_exit_with_three() {
    let ws = Workspace::new();
    let missing = ws.path("missing.json");
    let out = ws.path("out.csv");
    assert_eq!(
        cli(&["sample", "--cert", s(&missing), "-n", "3", "--out", s(&out)]),
        EXIT_RUNTIME
    );

    assert_eq!(ws.fit("gaussbench-d2", "default", "1", "good.json"), 0);
    let text = fs::read_to_string(ws.path("good.json")).unwrap();
    let cut = ws.path("cut.json");
    fs::write(&cut, &text[..text.len() / 3]).unwrap();
    assert_eq!(
        cli(&["sample", "--cert", s(&cut), "-n", "3", "--out", s(&out)]),
        EXIT_RUNTIME
    );
    assert!(!out.exists());
}

#[test]
fn seed_falls_back_to_environment_variable() {
    let ws = Workspace::new();
    assert_eq!(ws.fit("gaussbench-d2", "default", "5", "cert.json"), 0);
    let cert = ws.path("cert.json");
    let (a, b) = (ws.path("a.csv"), ws.path("b.csv"));
    std::env::set_var(policyscope_cli::SEED_VAR, "11");
    assert_eq!(
        cli(&["sample", "--cert", s(&cert), "-n", "5", "--out", s(&a)]),
        0
    );
    std::env::remove_var(policyscope_cli::SEED_VAR);
    assert_eq!(
        cli(&[
            "sample",
            "--cert",
            s(&cert),
            "-n",
            "5",
            "--seed",
            "11",
            "--out",
            s(&b)
        ]),
        0
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
