use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hierlight::image::{encode_ppm, RgbImage};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hierlight"));
    c.env_remove("HIERLIGHT_THREADS");
    c
}

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../models/{name}.model"))
}

fn hl(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn noise_ppm(path: &Path, w: usize, h: usize, seed: u64) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.gen()).collect();
    std::fs::write(path, encode_ppm(&RgbImage::new(w, h, data).unwrap())).unwrap();
}

fn json_totals(out: &str) -> (u64, u64) {
    let v: serde_json::Value = serde_json::from_str(out).unwrap();
    (v["total_params"].as_u64().unwrap(), v["total_flops"].as_u64().unwrap())
}

#[test]
fn analyze_reports_table_totals() {
    for (scale, params, gflops) in [("n", 2.2, 11.7), ("m", 17.9, 88.2)] {
        let o = hl(&["analyze", p(&model("hierlight")), "--scale", scale, "--format", "json"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let (pt, ft) = json_totals(&stdout(&o));
        assert!((pt as f64 / 1e6 - params).abs() <= 0.05 * params);
        assert!((ft as f64 / 1e9 - gflops).abs() <= 0.10 * gflops);
    }
    let csv = hl(&["analyze", p(&model("hierlight")), "--scale", "n", "--format", "csv"]);
    assert!(stdout(&csv).starts_with("node,kind,out_shape,params,flops\n"));
}

#[test]
fn missing_model_exits_2() {
    let o = hl(&["analyze", "/nonexistent/x.model"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot open"));
}

#[test]
fn init_is_seeded_and_matches_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("hierlight");
    let paths: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| dir.path().join(format!("{n}.hlwt"))).collect();
    let mut printed = Vec::new();
    for (path, seed) in paths.iter().zip(["0", "0", "1"]) {
        let o = hl(&["init", p(&m), "--scale", "n", "--seed", seed, "-o", p(path)]);
        assert!(o.status.success(), "{}", stderr(&o));
        printed.push(stdout(&o).split_whitespace().next().unwrap().parse::<u64>().unwrap());
    }
    let bytes: Vec<Vec<u8>> = paths.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0], bytes[2]);
    let (total, _) = json_totals(&stdout(&hl(&["analyze", p(&m), "--scale", "n", "--format", "json"])));
    assert_eq!(printed, [total; 3]);

    let bad = hl(&["init", p(&m), "--scale", "n", "-o", "/nonexistent/dir/w.hlwt"]);
    assert_eq!(bad.status.code(), Some(2));
}

struct RunFixture {
    dir: tempfile::TempDir,
    weights: PathBuf,
}

fn fixture() -> RunFixture {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("n.hlwt");
    let o = hl(&["init", p(&model("hierlight")), "--scale", "n", "--seed", "5", "-o", p(&weights)]);
    assert!(o.status.success());
    RunFixture { dir, weights }
}

fn run(f: &RunFixture, images: &[&Path], extra: &[&str]) -> Output {
    let m = model("hierlight");
    let mut args = vec!["run", p(&m), p(&f.weights)];
    args.extend(images.iter().map(|i| p(i)));
    args.extend(["--scale", "n", "--imgsz", "64"]);
    args.extend(extra);
    hl(&args)
}

#[test]
fn run_is_deterministic_and_ordered() {
    let f = fixture();
    let black = f.dir.path().join("black.ppm");
    std::fs::write(&black, encode_ppm(&RgbImage::filled(48, 32, [0, 0, 0]).unwrap())).unwrap();
    let noise = f.dir.path().join("noise.ppm");
    noise_ppm(&noise, 40, 56, 1);

    let a = run(&f, &[&black], &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, run(&f, &[&black], &[]).stdout);

    let both = run(&f, &[&noise, &black, &noise], &["--conf", "0.2"]);
    assert!(both.status.success());
    let names: Vec<String> = stdout(&both)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["image"].as_str().unwrap().to_string())
        .collect();
    let mut dedup = names.clone();
    dedup.dedup();
    // input order: noise block, black block, noise block
    let expect: Vec<String> = [&noise, &black, &noise]
        .iter()
        .map(|x| x.display().to_string())
        .filter(|n| names.contains(n))
        .collect();
    assert_eq!(expect.len(), 3);
    assert_eq!(dedup, expect);

    // a single worker gives the same bytes
    let one = bin()
        .env("HIERLIGHT_THREADS", "1")
        .args(["run", p(&model("hierlight")), p(&f.weights), p(&noise), p(&black), p(&noise)])
        .args(["--scale", "n", "--imgsz", "64", "--conf", "0.2"])
        .output()
        .unwrap();
    assert_eq!(one.stdout, both.stdout);
}

#[test]
fn high_confidence_threshold_yields_nothing() {
    let f = fixture();
    let noise = f.dir.path().join("noise.ppm");
    noise_ppm(&noise, 64, 64, 2);
    let o = run(&f, &[&noise], &["--conf", "0.999"]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
}

#[test]
fn tiny_image_is_letterboxed() {
    let f = fixture();
    let tiny = f.dir.path().join("tiny.ppm");
    noise_ppm(&tiny, 2, 2, 3);
    let o = run(&f, &[&tiny], &["--conf", "0.2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let b: Vec<f64> = v["box"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 2.0 && b[3] <= 2.0);
    }
}

#[test]
fn run_error_codes() {
    let f = fixture();
    let bad = f.dir.path().join("bad.ppm");
    std::fs::write(&bad, b"P6\n4 4\n255\nshort").unwrap();
    let o = run(&f, &[&bad], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("offset 16"), "{}", stderr(&o));

    let good = f.dir.path().join("ok.ppm");
    noise_ppm(&good, 8, 8, 4);
    let mismatch = hl(&["run", p(&model("hierlight")), p(&f.weights), p(&good), "--scale", "s", "--imgsz", "64"]);
    assert_eq!(mismatch.status.code(), Some(3));

    let missing = hl(&["run", p(&model("hierlight")), "/nonexistent.hlwt", p(&good), "--scale", "n"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("cannot open"));

    let threads = bin()
        .env("HIERLIGHT_THREADS", "many")
        .args(["gradcheck", "--block", "conv"])
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn gradcheck_command() {
    let up = hl(&["gradcheck", "--block", "upsample"]);
    assert!(up.status.success(), "{}", stdout(&up));
    assert!(stdout(&up).contains("PASS"));
    let ir = hl(&["gradcheck", "--block", "irdcb", "--seed", "7"]);
    assert!(ir.status.success());
    assert!(!stdout(&ir).contains("FAIL"));
    let unknown = hl(&["gradcheck", "--block", "attention"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn dump_graph_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.model");
    std::fs::write(&toy, "model toy\nlayer 0 from=-1 Conv out=8 k=3 s=2\nlayer 1 from=-1 Conv out=8 k=3 s=2\n").unwrap();
    let o = hl(&["dump-graph", p(&toy), "--imgsz", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dot = stdout(&o);
    assert_eq!(dot.lines().filter(|l| l.contains("[label=")).count(), 2);
    assert!(dot.contains("n0 -> n1;"));

    let full = hl(&["dump-graph", p(&model("hierlight")), "--scale", "s"]);
    assert_eq!(full.stdout, hl(&["dump-graph", p(&model("hierlight")), "--scale", "s"]).stdout);

    std::fs::write(&toy, "model toy\nlayer 0 from=-1 Bogus\n").unwrap();
    assert_eq!(hl(&["dump-graph", p(&toy)]).status.code(), Some(2));
}
