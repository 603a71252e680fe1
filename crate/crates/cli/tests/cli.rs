use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ggpfn::model::Checkpoint;
use ggpfn::volume::{load_volume, save_volume, VolumeFormat, VolumeGrid};

fn ggpfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ggpfn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64) -> Output {
    ggpfn(&[
        "synth",
        "--count",
        &count.to_string(),
        "--extents",
        "16,32,32",
        "--seed",
        &seed.to_string(),
        "--out",
        p(dir),
    ])
}

const TINY: &str = r#"
[model]
slice_halfwidth = 2
group_convs = [1, 1, 0, 0]
channels = [4, 8, 8, 8]
decoder_channels = [4, 8, 8]
global_channels = [4, 4, 8, 8, 8]
patch_h = 16
patch_w = 16
overlap = 8
hg = 32
wg = 32

[train]
lr = 0.003
augment = false
val_interval = 2

[train.global]
epochs = 2
batch_size = 4

[train.pfn]
epochs = 2
batch_size = 4

[train.joint]
epochs = 2
batch_size = 4

[data]
train = ["data/phantom_000.vol", "data/phantom_001.vol"]
val = ["data/phantom_002.vol"]
"#;

/// Phantoms plus a tiny run configuration in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(&dir.path().join("data"), 3, 5).status.success());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn log_lines(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("train.log")).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn synth_writes_volumes_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(synth(&a, 3, 7).status.success());
    assert!(synth(&b, 3, 7).status.success());
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let (name, seed) = line.split_once('\t').unwrap();
        assert_eq!(seed, (7 + i).to_string());
        assert!(a.join(name).exists());
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert!(load_volume(a.join(name), VolumeFormat::RawV1).unwrap().labels.is_some());
    }
    let vols = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "vol").count();
    assert_eq!(vols, 3);
}

#[test]
fn train_writes_checkpoints_and_log() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("run");
    let o = ggpfn(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "train.log", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let lines = log_lines(&out);
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("stage=init epoch=0"));
    assert!(lines[6].starts_with("stage=joint epoch=6"));
    assert_eq!(Checkpoint::load(out.join("last.ckpt")).unwrap().epoch, 6);
}

#[test]
fn single_stage_and_resume_continue_numbering() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("run");
    let o = ggpfn(&["train", "--config", p(&cfg), "--out", p(&out), "--stage", "global"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = log_lines(&out);
    assert!(lines[1..].iter().all(|l| l.starts_with("stage=global")), "{lines:?}");
    assert_eq!(Checkpoint::load(out.join("last.ckpt")).unwrap().epoch, 2);

    let last = out.join("last.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    fs::copy(&last, &resumed).unwrap();
    let o = ggpfn(&["train", "--config", p(&cfg), "--out", p(&out), "--resume", p(&resumed)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = log_lines(&out);
    // The resumed run appends: an init line at epoch 2, then epochs 3..=6.
    assert!(lines.iter().any(|l| l.starts_with("stage=init epoch=2")));
    assert!(lines.iter().any(|l| l.starts_with("stage=pfn epoch=3")));
    assert!(!lines.iter().any(|l| l.starts_with("stage=global epoch=3")));
    assert_eq!(Checkpoint::load(out.join("last.ckpt")).unwrap().epoch, 6);
}

#[test]
fn bad_config_key_exits_with_usage_error() {
    let (dir, cfg) = workspace();
    let o = ggpfn(&["train", "--config", p(&cfg), "--out", p(dir.path()), "--set", "train.lrate=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lrate"), "{}", stderr(&o));
    let o = ggpfn(&["train", "--config", p(&cfg), "--out", p(dir.path()), "--stage", "warmup"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_exits_with_data_error() {
    let (dir, cfg) = workspace();
    fs::remove_file(dir.path().join("data/phantom_002.vol")).unwrap();
    let o = ggpfn(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_lists_config_defaults() {
    let o = ggpfn(&["train", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["slice_halfwidth", "group_convs", "lr = 0.0001", "[train.joint]", "val_interval"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn infer_single_view_matches_extents_and_is_deterministic() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("run");
    assert!(ggpfn(&["train", "--config", p(&cfg), "--out", p(&out)]).status.success());
    let ck = out.join("best.ckpt");
    let vol = dir.path().join("data/phantom_002.vol");
    let (a, b) = (dir.path().join("a.vol"), dir.path().join("b.vol"));
    for target in [&a, &b] {
        let o = ggpfn(&[
            "infer",
            "--checkpoint",
            p(&ck),
            "--volume",
            p(&vol),
            "--views",
            "axial",
            "--out",
            p(target),
            "--per-view",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let probs = load_volume(&a, VolumeFormat::RawV1).unwrap();
    let input = load_volume(&vol, VolumeFormat::RawV1).unwrap();
    assert_eq!(probs.extents, input.extents);
    assert!(probs.intensities.iter().all(|v| (0.0..=1.0).contains(v)));
    // A single view bypasses fusion.
    assert_eq!(fs::read(dir.path().join("a.axial.vol")).unwrap(), fs::read(&a).unwrap());

    let o = ggpfn(&["infer", "--checkpoint", p(&ck), "--volume", p(&vol), "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sagittal"), "{}", stderr(&o));
}

fn write(path: &Path, vg: &VolumeGrid) {
    save_volume(vg, path, VolumeFormat::RawV1).unwrap();
}

#[test]
fn eval_scores_identical_and_disjoint_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<u8> = (0..16 * 16 * 16).map(|i| (i % 3 == 0) as u8).collect();
    let gt = VolumeGrid::new([16, 16, 16], [1.0; 3], vec![0.0; labels.len()], Some(labels.clone())).unwrap();
    let same: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
    let inverse: Vec<f32> = labels.iter().map(|&l| 1.0 - l as f32).collect();
    write(&dir.path().join("gt.vol"), &gt);
    for (name, probs, expected) in [("same", same, "1.000000"), ("inverse", inverse, "0.000000")] {
        let pred = dir.path().join(format!("{name}.vol"));
        write(&pred, &VolumeGrid::new([16, 16, 16], [1.0; 3], probs, None).unwrap());
        let out = dir.path().join(format!("{name}.txt"));
        let o = ggpfn(&[
            "eval",
            "--pred",
            p(&pred),
            "--gt",
            p(&dir.path().join("gt.vol")),
            "--out",
            p(&out),
            "--thresholds",
            "9",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(fs::read_to_string(&out).unwrap().starts_with(&format!("dsc\t{expected}")));
        let pr = fs::read_to_string(dir.path().join(format!("{name}.txt.pr.tsv"))).unwrap();
        assert_eq!(pr.lines().count(), 9);
    }
    let small = dir.path().join("small.vol");
    write(&small, &VolumeGrid::new([16, 16, 8], [1.0; 3], vec![0.0; 16 * 16 * 8], None).unwrap());
    let o =
        ggpfn(&["eval", "--pred", p(&small), "--gt", p(&dir.path().join("gt.vol")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_reports_every_operator() {
    let o = ggpfn(&["gradcheck", "--per-tensor", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    for name in ggpfn::gradcheck::op_check_names().into_iter().chain([ggpfn::gradcheck::MODEL_CHECK]) {
        assert!(report.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name} missing");
    }
}

#[test]
fn gradcheck_with_injected_fault_exits_with_code_three() {
    let o = ggpfn(&["gradcheck", "--per-tensor", "1", "--inject-fault", "transposed_conv2d"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).lines().any(|l| l.starts_with("transposed_conv2d") && l.ends_with("FAIL")));
}
