use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowsr_core::checkpoint::{load_checkpoint, Stage};
use flowsr_core::grid::{FlowGrid, Granularity, GridMeta, Precision};
use flowsr_core::gridfile::{load_grid, save_grid};
use flowsr_core::metrics::read_metrics_csv;

const TINY: &str = r#"
seed = 3

[data]
height = 4
width = 4
frames = 96
slots_per_day = 24
blobs = 3

[model]
channels = 8
heads = 2
city_blocks = 1

[pretrain]
epochs = 3
batch = 4
city_anchors = 32

[train]
epochs = 2
batch = 4
batches_per_epoch = 2
"#;

fn flowsr(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_flowsr"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn ok(o: Output) -> String {
    let (out, err) = text(&o);
    assert!(o.status.success(), "status {:?}\nstdout:\n{out}\nstderr:\n{err}", o.status);
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn prepared() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_path_buf();
    ok(flowsr(&p, &["gen-data"]));
    (dir, p)
}

#[test]
fn gen_data_writes_paired_grids_and_echoes_config() {
    let (_d, p) = prepared();
    let out = ok(flowsr(&p, &["gen-data"]));
    assert!(out.contains("# effective config"));
    assert!(out.contains("[train]") && out.contains("lambda = 0.1"));
    assert!(out.contains("constraint residual: 0\n"));
    let coarse = load_grid(p.join("coarse.uflw")).unwrap();
    let fine = load_grid(p.join("fine.uflw")).unwrap();
    assert_eq!((coarse.height(), fine.height(), coarse.frames()), (4, 8, 96));
    assert_eq!(coarse.meta().granularity, Granularity::Coarse);
}

#[test]
fn bad_arguments_and_config_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = flowsr(p, &["pretrain", "--stage", "x"]);
    assert_eq!(code(&o), 2);
    let o = flowsr(p, &["train", "--end-to-end", "--from-pretrained", "a", "b"]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).1.contains("cannot be used with"));

    let bad = p.join("bad.toml");
    std::fs::write(&bad, "[train]\nlamda = 0.5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_flowsr")).arg("--config").arg(&bad).arg("gen-data").output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(text(&o).1.contains("lamda"), "{}", text(&o).1);

    let o = flowsr(p, &["--precision", "16", "gen-data"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn two_stage_pipeline() {
    let (_d, p) = prepared();
    let out = ok(flowsr(&p, &["pretrain", "--stage", "b"]));
    assert!(out.contains("stage I"));
    ok(flowsr(&p, &["pretrain", "--stage", "c"]));
    assert_eq!(load_checkpoint(p.join("encoder_b.ckpt")).unwrap().stage, Stage::I);
    assert_eq!(load_checkpoint(p.join("encoder_c.ckpt")).unwrap().stage, Stage::II);
    let losses = std::fs::read_to_string(p.join("pretrain_b_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 3);

    // stage tags are checked
    let (b, c) = (p.join("encoder_b.ckpt"), p.join("encoder_c.ckpt"));
    let o = flowsr(&p, &["train", "--from-pretrained", c.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).1.contains("checkpoint error"), "{}", text(&o).1);

    let o = flowsr(&p, &["train"]);
    assert_eq!(code(&o), 2, "two-stage mode without checkpoints is a usage error");

    let out = ok(flowsr(&p, &["train", "--from-pretrained", b.to_str().unwrap(), c.to_str().unwrap()]));
    let last = out.lines().last().unwrap();
    assert!(last.contains("val RMSE") && last.contains("MAE") && last.contains("MAPE"), "{last}");
    assert_eq!(std::fs::read_to_string(p.join("train_history.csv")).unwrap().lines().count(), 3);

    let model = p.join("model.ckpt");
    let out = ok(flowsr(&p, &["eval", "--model", model.to_str().unwrap()]));
    let table: Vec<&str> = out.lines().skip_while(|l| !l.contains("RMSE")).collect();
    assert!(table[0].contains("MAE") && table[0].contains("MAPE"));
    assert!(table[1].starts_with("MEAN") && table[2].starts_with("HA") && table[3].starts_with("model"));
    let rows = read_metrics_csv(std::fs::File::open(p.join("metrics.csv")).unwrap()).unwrap();
    let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["MEAN", "HA", "model"]);
    assert!(rows[2].1.constraint_residual < 1e-4);
    assert!(table[3].contains(&format!("{:.4}", rows[2].1.rmse)));

    let out = ok(flowsr(&p, &["infer", "--model", model.to_str().unwrap(), "--input", p.join("coarse.uflw").to_str().unwrap()]));
    let fine = load_grid(p.join("inferred.uflw")).unwrap();
    assert_eq!((fine.frames(), fine.height(), fine.width()), (96, 8, 8));
    assert_eq!(fine.meta().granularity, Granularity::Fine);
    let r: f64 = out.lines().last().unwrap().trim_start_matches("constraint residual: ").parse().unwrap();
    assert!(r < 1e-4);

    // zero mass in, zero mass out
    let zero = FlowGrid::new(
        GridMeta { frames: 2, height: 3, width: 5, granularity: Granularity::Coarse, upscale: 2, slots_per_day: 24, precision: Precision::F32 },
        vec![0.0; 30],
    )
    .unwrap();
    save_grid(&zero, p.join("zero.uflw")).unwrap();
    let zout = p.join("zero_fine.uflw");
    ok(flowsr(&p, &["infer", "--model", model.to_str().unwrap(), "--input", p.join("zero.uflw").to_str().unwrap(), "--output", zout.to_str().unwrap()]));
    let z = load_grid(&zout).unwrap();
    assert_eq!((z.height(), z.width()), (6, 10));
    assert!(z.values().iter().all(|&v| v == 0.0));

    // a fine grid is not a valid inference input
    let o = flowsr(&p, &["infer", "--model", model.to_str().unwrap(), "--input", p.join("fine.uflw").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).1.contains("granularity"));

    // an encoder checkpoint is not a trained model
    let o = flowsr(&p, &["eval", "--model", b.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn end_to_end_training_is_deterministic() {
    let (_d, p) = prepared();
    let a = ok(flowsr(&p, &["train", "--end-to-end"]));
    let first = std::fs::read(p.join("model.ckpt")).unwrap();
    let b = ok(flowsr(&p, &["train", "--end-to-end"]));
    assert_eq!(a, b);
    assert_eq!(first, std::fs::read(p.join("model.ckpt")).unwrap());
}

#[test]
fn missing_inputs_are_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = flowsr(p, &["pretrain", "--stage", "b"]);
    assert_eq!(code(&o), 1);
    let o = flowsr(p, &["eval", "--model", p.join("none.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_reports_and_detects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(flowsr(dir.path(), &["gradcheck"]));
    assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains("deform") && l.contains("max_rel_err")));
    assert!(out.contains(", 0 failed"));
    let o = flowsr(dir.path(), &["gradcheck", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    let (out, _) = text(&o);
    assert!(out.lines().any(|l| l.starts_with("FAIL") && l.contains("faulty")), "{out}");
}
