use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rawdeblur::blur::{Manifest, MANIFEST_NAME};
use rawdeblur::isp::read_pnm;
use rawdeblur::model::{save_checkpoint, DeblurNet, ModelConfig, Variant};
use rawdeblur::raw::{read_rawb_file, write_rawb_file, BayerFrame, CfaPattern, Levels};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawdeblur")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "--out", p(&out), "--scenes", "3", "--frames", "3", "--m", "3", "--seed", "5"];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tiny_net(variant: Variant) -> DeblurNet<f32> {
    DeblurNet::new(ModelConfig { variant, base_channels: 2, n_resblocks: 1, channel_multiplier: 1 }, 1).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_and_parses() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let da = synth(a.path(), &[]);
    let db = synth(b.path(), &[]);
    let manifest = Manifest::load(da.join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.entries.len(), 3);
    assert_eq!(tree(&da), tree(&db));
}

#[test]
fn synth_defaults_produce_pairs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&run(&["synth", "--out", p(&out)])), 0);
    assert!(!Manifest::load(out.join(MANIFEST_NAME)).unwrap().entries.is_empty());
}

#[test]
fn synth_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&run(&["synth", "--out", p(&out), "--frames", "2"])), 2);
    assert_eq!(code(&run(&["synth", "--out", p(&out), "--bogus", "1"])), 2);
    assert!(!out.exists());
}

#[test]
fn synth_failure_removes_partial_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    // too fast for the motion model
    let o = run(&["synth", "--out", p(&out), "--max-speed", "9"]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn render_black_frame_and_demosaic_names() {
    let dir = TempDir::new().unwrap();
    let levels = Levels::new(12, 64, 4095).unwrap();
    let input = dir.path().join("black.rawb");
    write_rawb_file(&BayerFrame::filled(16, 16, CfaPattern::Rggb, levels, 64).unwrap(), &input).unwrap();
    for method in ["bilinear", "ahd"] {
        let out = dir.path().join(format!("{method}.ppm"));
        assert_eq!(code(&run(&["render", "--input", p(&input), "--demosaic", method, "--out", p(&out)])), 0);
        let (channels, w, h, data) = read_pnm(&out).unwrap();
        assert_eq!((w, h, channels), (16, 16, 3));
        assert!(data.iter().all(|&v| v == 0));
    }
    let out = dir.path().join("x.ppm");
    assert_eq!(code(&run(&["render", "--input", p(&input), "--demosaic", "vng", "--out", p(&out)])), 2);
    let missing = dir.path().join("missing.rawb");
    assert_eq!(code(&run(&["render", "--input", p(&missing), "--out", p(&out)])), 1);
}

#[test]
fn eval_ground_truth_and_empty_split() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &["--test", "1"]);
    let manifest = data.join(MANIFEST_NAME);
    let report = dir.path().join("report.tsv");
    let o = run(&["eval", "--ground-truth", "--manifest", p(&manifest), "--split", "test", "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id\traw_psnr\traw_ssim\tsrgb_psnr\tsrgb_ssim");
    for line in &lines[1..] {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(&f[1..], &["inf", "1.000000", "inf", "1.000000"]);
    }
    let o = run(&["eval", "--ground-truth", "--manifest", p(&manifest), "--split", "val", "--out", p(&report)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
    let o = run(&["eval", "--manifest", p(&manifest), "--out", p(&report)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_checkpoint_reports_finite_scores() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &["--test", "1"]);
    let ck = dir.path().join("net.dbrw");
    save_checkpoint(&tiny_net(Variant::TwoBranchBca), &ck).unwrap();
    let report = dir.path().join("r.tsv");
    let o = run(&["eval", "--checkpoint", p(&ck), "--manifest", p(&data.join(MANIFEST_NAME)), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("mean(n=1)"));
    assert!(last.split('\t').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()));
}

#[test]
fn train_writes_loadable_checkpoint_and_trace() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &["--val", "1"]);
    let config = dir.path().join("tiny.cfg");
    fs::write(&config, "# tiny\nbase_channels = 2\nn_resblocks = 1\ncrop_size = 16\ncheckpoint_every = 1\n").unwrap();
    let out = dir.path().join("run");
    let manifest = data.join(MANIFEST_NAME);
    let o = run(&[
        "train", "--manifest", p(&manifest), "--config", p(&config), "--out", p(&out),
        "--variant", "spatial_only", "--max-iterations", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let net = rawdeblur::model::load_checkpoint::<f32>(out.join("final.dbrw")).unwrap();
    assert_eq!(net.config().variant, Variant::SpatialOnly);
    let trace = fs::read_to_string(out.join("trace.tsv")).unwrap();
    let rows: Vec<_> = trace.lines().map(|l| rawdeblur::trainer::TraceRow::parse(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.val_psnr.is_some_and(f64::is_finite)));
    assert!(out.join("epoch_00001.dbrw").exists());
}

#[test]
fn train_failures() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("nope.tsv");
    assert_eq!(code(&run(&["train", "--manifest", p(&missing), "--out", p(&out)])), 1);
    assert!(!out.exists());
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "width = 3\n").unwrap();
    let o = run(&["train", "--manifest", p(&missing), "--config", p(&config), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["train", "--manifest", p(&missing), "--out", p(&out), "--crop-size", "18"])), 2);
    assert_eq!(code(&run(&["train", "--manifest", p(&missing), "--out", p(&out), "--variant", "fancy"])), 2);
}

#[test]
fn deblur_with_identity_network() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &[]);
    let manifest = Manifest::load(data.join(MANIFEST_NAME)).unwrap();
    let input = data.join(&manifest.entries[0].blur);
    let ck = dir.path().join("id.dbrw");
    let net = tiny_net(Variant::TwoBranchBca);
    net.zero_output_head();
    save_checkpoint(&net, &ck).unwrap();
    let output = dir.path().join("out.rawb");
    let preview = dir.path().join("out.ppm");
    let o = run(&["deblur", "--checkpoint", p(&ck), "--input", p(&input), "--output", p(&output), "--srgb", p(&preview)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (read_rawb_file(&input).unwrap(), read_rawb_file(&output).unwrap());
    assert!(a.same_layout(&b));
    assert!(a.samples().iter().zip(b.samples()).all(|(&x, &y)| x.abs_diff(y) <= 1));
    assert_eq!(read_pnm(&preview).unwrap().1, a.width());

    let odd = dir.path().join("odd.rawb");
    let levels = Levels::new(12, 64, 4095).unwrap();
    write_rawb_file(&BayerFrame::filled(18, 16, CfaPattern::Rggb, levels, 100).unwrap(), &odd).unwrap();
    assert_eq!(code(&run(&["deblur", "--checkpoint", p(&ck), "--input", p(&odd), "--output", p(&output)])), 1);
}

#[test]
fn attention_maps() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), &[]);
    let manifest = Manifest::load(data.join(MANIFEST_NAME)).unwrap();
    let input = data.join(&manifest.entries[0].blur);
    let ck = dir.path().join("bca.dbrw");
    save_checkpoint(&tiny_net(Variant::TwoBranchBca), &ck).unwrap();
    let dump = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&["dump-attention", "--checkpoint", p(&ck), "--input", p(&input), "--out-dir", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        tree(&out)
    };
    let first = dump("a");
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["bca1_color_to_spatial.pgm", "bca1_spatial_to_color.pgm", "bca2_color_to_spatial.pgm", "bca2_spatial_to_color.pgm"]
    );
    for (name, _) in &first {
        let (channels, w, h, data) = read_pnm(dir.path().join("a").join(name)).unwrap();
        assert_eq!(channels, 1);
        assert_eq!(data.len(), w * h);
        assert!(w == 32 || w == 16, "{name}: {w}x{h}");
    }
    assert_eq!(dump("b"), first);

    let plain = dir.path().join("plain.dbrw");
    save_checkpoint(&tiny_net(Variant::TwoBranch), &plain).unwrap();
    let out = dir.path().join("c");
    assert_eq!(code(&run(&["dump-attention", "--checkpoint", p(&plain), "--input", p(&input), "--out-dir", p(&out)])), 2);
}
