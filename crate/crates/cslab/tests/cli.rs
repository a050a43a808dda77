use std::fs;
use std::path::Path;
use std::process::Command;

fn cslab(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cslab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "cslab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SPEC: &str = "feature_dim = 8\nn_a = 3\nn_b = 3\ntrain.size = 12\nvalid.size = 6\n\
                    dev_A_heavy.size = 6\ndev_B_heavy.size = 6\n";

const CONFIG: &str = "epochs = 2\nbatch_size = 4\nwarmup_steps = 4\nd_model = 8\nff_dim = 8\n\
                      n_shared_blocks = 1\nn_specific_blocks = 1\ncheckpoint_average_k = 2\nbeam_width = 3\n";

fn setup(dir: &Path) {
    fs::write(dir.join("spec.txt"), SPEC).unwrap();
    fs::write(dir.join("config.txt"), CONFIG).unwrap();
    let stats = cslab(&["gen", "--spec", "spec.txt", "--out", "data"], dir);
    assert_eq!(stats.lines().count(), 4, "{stats}");
}

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    cslab(&["train", "--config", "config.txt", "--data", "data", "--out", "run"], dir);
    let run = dir.join("run");
    for f in ["config.txt", "train_log.tsv", "epochs.tsv", "model.ckpt", "checkpoints/epoch_000.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("epochs.tsv")).unwrap().lines().count(), 2);

    let csv = cslab(
        &["eval", "--model", "run/model.ckpt", "--data", "data", "--split", "dev_B_heavy", "--beam", "3"],
        dir,
    );
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[1].starts_with("moe_lae+cd,") && rows[1].contains("dev_B_heavy"));
    assert!(rows[2].contains("beam3"));
}

#[test]
fn report_rebuilds_the_matrix_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    fs::write(
        dir.join("config.txt"),
        format!("{CONFIG}matrix_systems = baseline_single,moe_lae+cd\n"),
    )
    .unwrap();
    let printed = cslab(&["matrix", "--config", "config.txt", "--data", "data", "--out", "m"], dir);
    assert_eq!(printed.lines().count(), 8, "{printed}");

    let m = dir.join("m");
    let names = ["score_report.csv", "gating_report.csv", "separation_report.csv"];
    let before: Vec<Vec<u8>> = names.iter().map(|f| fs::read(m.join(f)).unwrap()).collect();
    for f in names {
        fs::remove_file(m.join(f)).unwrap();
    }
    cslab(&["report", "--run", "m"], dir);
    for (f, old) in names.iter().zip(before) {
        assert_eq!(fs::read(m.join(f)).unwrap(), old, "{f}");
    }
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    fs::write(dir.join("bad.txt"), "epochs = two\n").unwrap();
    for args in [
        &["train", "--config", "bad.txt", "--data", "data", "--out", "x"][..],
        &["train", "--data", "missing", "--out", "x"][..],
        &["eval", "--model", "nope.ckpt", "--data", "data", "--split", "dev_B_heavy"][..],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_cslab"))
            .args(args)
            .current_dir(dir)
            .output()
            .unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}
