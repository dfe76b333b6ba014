use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnet"))
        .args(args)
        .env_remove("GNET_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

#[test]
fn count_params_inference_total() {
    assert_eq!(ok(gnet(&["count-params", "--groups", "8"])).trim(), "total=4591168 (4.6M)");
}

#[test]
fn count_params_reduction_scope() {
    assert_eq!(
        ok(gnet(&["count-params", "--groups", "1", "--scope", "reduction"])).trim(),
        "1708544 (1.709M)"
    );
    assert_eq!(
        ok(gnet(&["count-params", "--groups", "4", "--scope", "reduction"])).trim(),
        "430592 (0.431M)"
    );
    let bad = gnet(&["count-params", "--scope", "nowhere"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}

fn tiny_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let text = format!(
        "# small network, small synthetic set\n\
         preset = desk\n\
         seed = 3\n\
         output.dir = {}\n\
         dataset.kind = synth\n\
         dataset.ids = 3\n\
         dataset.per_id = 4\n\
         dataset.cameras = 2\n\
         model.arch = tiny\n\
         augment.height = 192\n\
         augment.width = 64\n\
         sgd.epochs = 2\n\
         sgd.batch_size = 4\n\
         train.eval_every = 1\n",
        out.display()
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_train_eval_extract() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let summary = ok(gnet(&[
        "synth", "--out", data.to_str().unwrap(), "--ids", "3", "--per-id", "4", "--cameras", "2", "--seed", "3",
    ]));
    assert!(!summary.is_empty());
    assert!(data.join("bounding_box_train").is_dir() && data.join("query").is_dir());

    let cfg = tiny_config(dir.path(), &run);
    let log = ok(gnet(&["train", "--config", cfg.to_str().unwrap()]));
    assert!(log.contains("epoch 1") && log.contains("epoch 2"), "{log}");
    for file in ["weights.gnw", "config.txt", "history.csv", "report.txt"] {
        assert!(run.join(file).is_file(), "{file} missing");
    }
    assert_eq!(fs::read_to_string(run.join("history.csv")).unwrap().lines().count(), 3);

    // A finished run is not silently overwritten.
    assert!(!gnet(&["train", "--config", cfg.to_str().unwrap()]).status.success());

    let weights = run.join("weights.gnw");
    let report_dir = dir.path().join("eval");
    let report = ok(gnet(&[
        "eval",
        "--weights",
        weights.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]));
    assert!(report.contains("mAP"), "{report}");
    // The synthetic layout on disk is the data the run trained on, so the
    // report matches the one written at the end of training.
    assert_eq!(report, fs::read_to_string(run.join("report.txt")).unwrap());
    assert!(report_dir.join("per_query.csv").is_file());

    let image = fs::read_dir(data.join("query")).unwrap().next().unwrap().unwrap().path();
    let feature = dir.path().join("feature.csv");
    ok(gnet(&[
        "extract",
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        feature.to_str().unwrap(),
    ]));
    let values: Vec<f32> = fs::read_to_string(&feature)
        .unwrap()
        .trim()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
    let norm: f32 = values.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(norm > 0.0);
}

#[test]
fn train_is_deterministic_and_seed_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let weights = |name: &str, extra: &[&str], env_seed: Option<&str>| {
        let run = dir.path().join(name);
        let cfg = tiny_config(dir.path(), &run);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gnet"));
        cmd.args(["train", "--config", cfg.to_str().unwrap()]).args(extra).env_remove("GNET_SEED");
        if let Some(s) = env_seed {
            cmd.env("GNET_SEED", s);
        }
        ok(cmd.output().unwrap());
        (
            fs::read(run.join("weights.gnw")).unwrap(),
            fs::read_to_string(run.join("config.txt")).unwrap(),
        )
    };
    let (a, cfg_a) = weights("a", &["--seed", "3"], None);
    let (b, _) = weights("b", &[], None);
    let (c, cfg_c) = weights("c", &[], Some("4"));
    let (d, _) = weights("d", &["--seed", "3"], Some("4"));
    assert_eq!(a, b);
    assert_eq!(a, d, "--seed wins over the environment");
    assert_ne!(a, c);
    assert!(cfg_a.contains("seed = 3") && cfg_c.contains("seed = 4"));
}

#[test]
fn bad_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, format!("output.dir = {}\nsgd.learning_rate = 0.1\n", run.display())).unwrap();
    let out = gnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sgd.learning_rate") && err.contains("line 2"), "{err}");
    assert!(!run.exists());

    let missing = gnet(&["eval", "--weights", "/nonexistent/weights.gnw", "--dataset", "/nonexistent"]);
    assert!(!missing.status.success());
}

#[test]
fn selftest_passes() {
    let out = ok(gnet(&["selftest"]));
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}
