use std::path::Path;
use std::process::{Command, Output};

use sdistill::checkpoint::{load_checkpoint, Stage};
use sdistill::corpus::read_corpus;

const TINY: &str = "\
# small enough to run every stage in seconds
model.hidden_dim = 16
model.num_heads = 2
model.ffn_dim = 32
target.count.train = 12
target.count.dev = 4
target.count.test = 4
pretrain.epochs = 1
pretrain.batch_size = 4
cp.epochs = 2
cp.batch_size = 4
finetune.epochs = 2
finetune.batch_size = 4
probe.epochs = 1
probe.batch_size = 4
";

fn sdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdistill"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> bool {
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    o.status.success()
}

#[test]
fn full_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let c = ["--config", "tiny.cfg"];
    let run = |args: &[&str]| {
        let mut v: Vec<&str> = args.to_vec();
        v.extend_from_slice(&c);
        sdistill(d, &v)
    };

    assert!(ok(&run(&["gen-data", "--seed", "7", "--out", "a.sdcp"])));
    assert!(ok(&run(&["gen-data", "--seed", "7", "--out", "b.sdcp"])));
    assert_eq!(std::fs::read(d.join("a.sdcp")).unwrap(), std::fs::read(d.join("b.sdcp")).unwrap());

    assert!(ok(&run(&["pretrain", "--data", "a.sdcp", "--out", "pre.sdck", "--seed", "1"])));
    assert!(ok(&run(&["cp", "--init", "pre.sdck", "--data", "a.sdcp", "--out", "teacher.sdck"])));
    assert!(ok(&run(&["cp", "--init", "pre.sdck", "--data", "a.sdcp", "--out", "vanilla.sdck", "--baseline", "--snapshot-every", "3"])));
    assert!(ok(&run(&[
        "distill", "--init", "pre.sdck", "--teacher", "teacher.sdck", "--data", "a.sdcp", "--out", "sd.sdck", "--alpha", "0.05",
    ])));
    assert!(ok(&run(&["finetune", "--init", "sd.sdck", "--data", "a.sdcp", "--out", "ft.sdck"])));
    let eval = run(&["eval", "--init", "ft.sdck", "--data", "a.sdcp"]);
    assert!(ok(&eval));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("WER"));
    assert!(ok(&run(&["wdist", "pre.sdck", "sd.sdck", "--out", "wd.txt"])));
    assert!(std::fs::read_to_string(d.join("wd.txt")).unwrap().contains("kind=total"));
    let curve = run(&["curve", "pre.sdck", "vanilla.step3.sdck", "vanilla.sdck", "--data", "a.sdcp", "--out", "curve.txt"]);
    assert!(ok(&curve));
    // Teachers are never fine-tuned, so they cannot be scored on a curve.
    assert_eq!(run(&["curve", "teacher.sdck", "--data", "a.sdcp", "--out", "t.txt"]).status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(d.join("curve.txt")).unwrap().lines().count(), 4);

    let teacher = load_checkpoint(&d.join("teacher.sdck")).unwrap();
    assert_eq!(teacher.stage, Stage::TeacherCp);
    assert!(teacher.meta.get("config.digest").is_some());
    let sd = load_checkpoint(&d.join("sd.sdck")).unwrap();
    assert_eq!(sd.meta.get("distill.alpha"), Some("0.05"));
    let report = std::fs::read_to_string(d.join("sd.sdck.report")).unwrap();
    assert!(report.lines().next().unwrap().contains("config.digest="));
    assert_eq!(load_checkpoint(&d.join("vanilla.sdck")).unwrap().stage, Stage::BaselineCp);
    assert!(read_corpus(&d.join("a.sdcp")).unwrap().spec_digest != 0);

    // Distilling toward anything but a teacher is a provenance error.
    let bad = run(&["distill", "--init", "pre.sdck", "--teacher", "vanilla.sdck", "--data", "a.sdcp", "--out", "x.sdck"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("provenance"));
    // Evaluating an encoder without a CTC head is refused too.
    assert_eq!(run(&["eval", "--init", "pre.sdck", "--data", "a.sdcp"]).status.code(), Some(2));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(sdistill(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(sdistill(d, &["gen-data", "--out", "x", "--nonsense"]).status.code(), Some(1));
    std::fs::write(d.join("bad.cfg"), "model.hiden_dim = 3\n").unwrap();
    assert_eq!(
        sdistill(d, &["gen-data", "--out", "x", "--config", "bad.cfg"]).status.code(),
        Some(1)
    );
    assert_eq!(
        sdistill(d, &["eval", "--init", "missing.sdck", "--data", "missing.sdcp"]).status.code(),
        Some(2)
    );
    for sub in ["gen-data", "pretrain", "cp", "distill", "finetune", "eval", "curve", "wdist", "bench"] {
        let o = sdistill(d, &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--config"), "{sub}");
    }
}

#[test]
fn eval_refuses_mismatched_feature_dims() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    std::fs::write(
        d.join("narrow.cfg"),
        format!("{TINY}model.feature_dim = 8\nsource.feature_dim = 8\ntarget.feature_dim = 8\n"),
    )
    .unwrap();
    assert!(ok(&sdistill(d, &["gen-data", "--out", "wide.sdcp", "--config", "tiny.cfg"])));
    assert!(ok(&sdistill(d, &["gen-data", "--out", "narrow.sdcp", "--config", "narrow.cfg"])));
    for args in [
        &["pretrain", "--data", "wide.sdcp", "--out", "pre.sdck"],
        &["finetune", "--init", "pre.sdck", "--data", "wide.sdcp", "--out", "ft.sdck"][..],
    ] {
        let mut v = args.to_vec();
        v.extend(["--config", "tiny.cfg"]);
        assert!(ok(&sdistill(d, &v)));
    }
    let o = sdistill(d, &["eval", "--init", "ft.sdck", "--data", "narrow.sdcp"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("feature dim"));
}
