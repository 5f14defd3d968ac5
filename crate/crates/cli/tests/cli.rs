use std::path::Path;
use std::process::{Command, Output};

use mino_core::data_io::{read_container, read_header};
use mino_core::metrics::MetricReport;

fn mino(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mino"))
        .args(args)
        .current_dir(dir)
        .env_remove("MINO_OUT_DIR")
        .env_remove("MINO_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mino(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

const LINE: &[&str] = &[
    "--points.kind=regular_grid",
    "--points.nx=24",
    "--points.ny=1",
    "--data.n_train=32",
    "--data.n_test=16",
    "--model.latent_grid={ kind = \"regular\", nx = 6, ny = 1, lower = [0.0], upper = [1.0] }",
    "--model.radius=0.25",
    "--model.L_dim=8",
    "--model.heads=2",
    "--model.gno_hidden=8",
    "--model.pos_embed_dim=4",
    "--model.time_embed_dim=4",
    "--train.batch_size=8",
    "--train.learning_rate=1e-3",
    "--train.base_gp.length_scale=0.05",
];

fn with(extra: &[&'static str]) -> Vec<&'static str> {
    LINE.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn gen_data_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--out_dir=a", "--data.n_train=6", "--data.n_test=4"];
    ok(dir.path(), &args);
    let mut again = args;
    again[1] = "--out_dir=b";
    ok(dir.path(), &again);
    for f in ["train.mfs", "test.mfs", "mesh.mfs"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let h = read_header(dir.path().join("a/train.mfs")).unwrap();
    assert_eq!((h.n_points, h.p_dim, h.n_samples), (500, 2, 6));
    assert!(h.notes.contains("length_scale=0.4"));
    let echoed = std::fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(echoed.contains("n_train = 6"));

    // A user mesh read back from a container.
    ok(dir.path(), &["gen-data", "--out_dir=c", "--points.kind=file", "--points.file=a/mesh.mfs", "--data.n_train=2", "--data.n_test=2"]);
    let c = read_container::<f32>(dir.path().join("c/train.mfs")).unwrap();
    let mesh = read_container::<f32>(dir.path().join("a/mesh.mfs")).unwrap();
    assert_eq!(c.points().positions(), mesh.points().positions());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mino(dir.path(), &["train", "--train.epoch=3"]).status.code(), Some(1));
    assert_eq!(mino(dir.path(), &["not-a-command"]).status.code(), Some(1));
    assert_eq!(mino(dir.path(), &["train", "--config", "missing.toml"]).status.code(), Some(1));
    assert_eq!(mino(dir.path(), &["train", "--data.train=missing.mfs"]).status.code(), Some(2));
    assert_eq!(mino(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[data]\nn_train = 3\nn_test = 2\n\n[points]\nn = 20\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mino"))
        .args(["gen-data", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("MINO_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let h = read_header(dir.path().join("from_env/train.mfs")).unwrap();
    assert_eq!((h.n_samples, h.n_points), (3, 20));
}

#[test]
fn train_resume_generate_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["gen-data", "--out_dir=data"]));

    ok(d, &with(&["train", "--out_dir=full", "--train.epochs=2"]));
    ok(d, &with(&["train", "--out_dir=half", "--train.epochs=1"]));
    ok(d, &with(&["train", "--out_dir=resumed", "--train.epochs=2", "--resume.from=half"]));
    let full = std::fs::read_to_string(d.join("full/loss.txt")).unwrap();
    let resumed = std::fs::read_to_string(d.join("resumed/loss.txt")).unwrap();
    assert_eq!(full, resumed);
    assert_eq!(full.lines().count(), 3);

    ok(d, &with(&["train", "--out_dir=no_ot", "--train.epochs=2", "--train.use_ot_coupling=false"]));

    let gen = ["generate", "--generate.checkpoint=full/checkpoint.mck", "--generate.n=4"];
    let mut a = with(&gen);
    a.extend(["--out_dir=gen_rk4", "--solver.method=rk4_fixed", "--solver.steps=100"]);
    ok(d, &a);
    let mut b = with(&gen);
    b.push("--out_dir=gen_dopri");
    ok(d, &b);
    let rk4 = read_container::<f64>(d.join("gen_rk4/generated.mfs")).unwrap();
    let dopri = read_container::<f64>(d.join("gen_dopri/generated.mfs")).unwrap();
    for (x, y) in rk4.values().iter().zip(dopri.values()) {
        assert!((x - y).abs() <= 1e-3 * x.abs().max(1.0), "{x} vs {y}");
    }

    // Zero-shot on a twice finer grid, and an empty request.
    ok(d, &["gen-data", "--out_dir=fine", "--points.kind=regular_grid", "--points.nx=48", "--points.ny=1", "--data.n_train=1", "--data.n_test=1"]);
    let mut fine = with(&gen);
    fine.extend(["--out_dir=gen_fine", "--positions", "fine/mesh.mfs"]);
    ok(d, &fine);
    let f = read_container::<f32>(d.join("gen_fine/generated.mfs")).unwrap();
    assert_eq!(f.n_points(), 48);
    assert!(f.values().iter().all(|v| v.is_finite()));
    let mut empty = with(&["generate", "--generate.checkpoint=full/checkpoint.mck", "--generate.n=0"]);
    empty.push("--out_dir=gen_empty");
    ok(d, &empty);
    assert!(read_container::<f32>(d.join("gen_empty/generated.mfs")).unwrap().is_empty());

    ok(d, &["eval", "--out_dir=ev", "--eval.x=data/test.mfs", "--eval.y=data/test.mfs"]);
    let report = MetricReport::from_text(&std::fs::read_to_string(d.join("ev/report.toml")).unwrap()).unwrap();
    assert_eq!(report.swd_mean, 0.0);
    assert!(report.mmd_squared.abs() < 0.1);
    assert_eq!(mino(d, &["eval", "--eval.x=data/test.mfs", "--eval.y=fine/train.mfs"]).status.code(), Some(2));

    ok(d, &["plot", "--out_dir=pl", "--plot.loss=full/loss.txt", "--plot.samples=data/test.mfs", "--plot.ratios=[0.5, 1.0]", "--eval.x=data/test.mfs", "--eval.y=data/test.mfs"]);
    let loss = std::fs::read_to_string(d.join("pl/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let curve = std::fs::read_to_string(d.join("pl/consistency.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let sample = std::fs::read_to_string(d.join("pl/sample_0.csv")).unwrap();
    assert_eq!(sample.lines().next(), Some("x,value0"));
    assert_eq!(sample.lines().count(), 25);
}

#[test]
fn heatmap_for_a_grid_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["sample-gp", "--out_dir=s", "--points.kind=regular_grid", "--points.nx=64", "--points.ny=64", "--sample_gp.n=1"]);
    ok(d, &["plot", "--out_dir=p", "--plot.samples=s/samples.mfs"]);
    let svg = std::fs::read_to_string(d.join("p/sample_0.svg")).unwrap();
    assert!(svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<rect").count(), 64 * 64);
    assert!(d.join("p/spectrum.csv").exists());
}

#[test]
fn annotated_example_config_matches_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    ok(dir.path(), &["plot", "--config", example.to_str().unwrap(), "--out_dir=with_file"]);
    ok(dir.path(), &["plot", "--out_dir=defaults"]);
    let a = std::fs::read_to_string(dir.path().join("with_file/config.toml")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("defaults/config.toml")).unwrap();
    assert_eq!(a.replace("with_file", "defaults"), b);
}
