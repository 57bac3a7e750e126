use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sync_cli::commands::CliManifest;
use sync_core::domain_stream::load_sequence;

const TINY: &str = r#"
[data]
dataset = "circle"
per_domain = 24

[train]
batch_size = 8
epochs = 2
latent_dim = 4
hidden_width = 8
recurrent_width = 6
mi_monitor_samples = 8
"#;

fn sync(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sync"))
        .args(args)
        .current_dir(dir)
        .env_remove("SYNC_OUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_data_writes_requested_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let out = sync(
        dir.path(),
        &["gen-data", "--dataset", "circle", "--domains", "30", "--per-domain", "100", "--seed", "0", "--out", "c.txt"],
    );
    ok(&out);
    let seq = load_sequence(dir.path().join("c.txt")).unwrap();
    assert_eq!(seq.len(), 30);
    assert!(seq.domains.iter().all(|d| d.len() == 100));
    ok(&sync(dir.path(), &["gen-data", "--dataset", "sine", "--per-domain", "10", "--out", "s.txt"]));
    assert_eq!(load_sequence(dir.path().join("s.txt")).unwrap().len(), 24);
    ok(&sync(dir.path(), &["gen-data", "--variant", "abrupt", "--per-domain", "10", "--out", "a.txt"]));
    assert_eq!(load_sequence(dir.path().join("a.txt")).unwrap().name, "circle-abrupt");
}

#[test]
fn output_root_variable_applies_to_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_sync"))
        .args(["gen-data", "--per-domain", "4", "--domains", "3", "--out", "d.txt"])
        .current_dir(dir.path())
        .env("SYNC_OUT_ROOT", &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("d.txt").exists());
    assert!(!dir.path().join("d.txt").exists());
}

#[test]
fn train_is_reproducible_and_eval_plot_work() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for run in ["a", "b"] {
        ok(&sync(
            dir.path(),
            &["train", "--config", "tiny.toml", "--method", "both", "--seed", "3", "--out-dir", run],
        ));
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for f in ["sync_loss_log.csv", "erm_loss_log.csv", "sync_checkpoint.json", "mi_curve.csv", "dataset.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let ma = CliManifest::load(&a.join("sync_manifest.json")).unwrap();
    let mb = CliManifest::load(&b.join("sync_manifest.json")).unwrap();
    assert_eq!(ma.run.without_timing(), mb.run.without_timing());
    assert_eq!(ma.run_config.train.epochs, 2);
    assert_eq!(ma.run_config.train.seed, 3);
    assert_eq!(ma.run.epochs.len(), 2);
    // the manifest embeds the resolved config verbatim
    let written = fs::read_to_string(a.join("run_config.toml")).unwrap();
    assert_eq!(written, ma.run_config.to_toml().unwrap());

    for (ck, split) in [("sync", "target"), ("erm", "target"), ("sync", "intermediate")] {
        let out = sync(
            dir.path(),
            &[
                "eval",
                "--checkpoint",
                &format!("a/{ck}_checkpoint.json"),
                "--data",
                "a/dataset.txt",
                "--split",
                split,
                "--out",
                "eval",
            ],
        );
        ok(&out);
        let csv = fs::read_to_string(dir.path().join(format!("eval/{ck}_{split}_metrics.csv"))).unwrap();
        assert!(csv.starts_with("method,dataset,seed,wst,avg\n"));
        assert!(csv.lines().nth(1).unwrap().starts_with(ck));
    }
    let recs = fs::read_to_string(dir.path().join("eval/sync_target_records.json")).unwrap();
    let recs: serde_json::Value = serde_json::from_str(&recs).unwrap();
    assert_eq!(recs.as_array().unwrap().len(), 10);

    ok(&sync(dir.path(), &["plot", "--checkpoint", "a/sync_checkpoint.json", "--t", "25", "--resolution", "20", "--data", "a/dataset.txt", "--out", "p/grid.png"]));
    assert!(dir.path().join("p/grid.png").exists());
    let grid = fs::read_to_string(dir.path().join("p/grid.grid.txt")).unwrap();
    assert_eq!(grid.lines().count(), 4 + 20);
    ok(&sync(dir.path(), &["plot", "--grid", "p/grid.grid.txt", "--out", "p/again.png"]));
    ok(&sync(dir.path(), &["plot", "--curve", "a/mi_curve.csv", "--out", "p/mi.png"]));
    ok(&sync(dir.path(), &["plot", "--truth", "circle", "--t", "30", "--out", "p/truth.png"]));
    for f in ["again.png", "mi.png", "truth.png"] {
        let bytes = fs::read(dir.path().join("p").join(f)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}

#[test]
fn bad_config_lists_every_problem_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 1\nlearning_rate = \"fast\"\n[data]\nshape = 2\n").unwrap();
    let out = sync(dir.path(), &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    for key in ["train.epochz", "train.learning_rate", "data.shape"] {
        assert!(err.contains(key), "{key} missing: {err}");
    }
    let out = sync(dir.path(), &["eval", "--checkpoint", "missing.json", "--data", "x.txt", "--out", "o"]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().trim_end().lines().count(), 1);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(&sync(
        dir.path(),
        &["train", "--config", "tiny.toml", "--epochs", "1", "--set", "train.alpha2=0.5", "--out-dir", "r"],
    ));
    let m = CliManifest::load(&dir.path().join("r/sync_manifest.json")).unwrap();
    assert_eq!(m.run_config.train.epochs, 1);
    assert_eq!(m.run_config.train.alpha2, 0.5);
    assert_eq!(m.run_config.train.batch_size, 8);
    assert_eq!(m.run_config.train.learning_rate, sync_core::trainer::DEFAULT_LEARNING_RATE);
}

#[test]
fn compare_tabulates_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = sync(dir.path(), &["compare", "--config", "tiny.toml", "--epochs", "1", "--seeds", "0,1", "--out-dir", "cmp"]);
    ok(&out);
    let table = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,wst,avg");
    assert!(lines[1].starts_with("SYNC,") && lines[2].starts_with("ERM,"));
    let per_seed = fs::read_to_string(dir.path().join("cmp/compare_per_seed.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 1 + 4);
    assert!(dir.path().join("cmp/seed_1/sync_checkpoint.json").exists());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("Wst") && stdout.contains("Avg") && stdout.contains("SYNC") && stdout.contains("ERM"));
}
