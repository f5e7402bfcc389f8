use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma, Rgb, RgbImage};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_harmonize-lab"));
    c.env_remove("HARMONIZE_LAB_DATA").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn make_toy(dir: &Path, n: usize) -> Output {
    run(bin().args(["make-toy-data", "--n", &n.to_string(), "--size", "32", "--out"]).arg(dir))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for sub in ["composite_images", "masks", "real_images"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            out.push(e.unwrap().path());
        }
    }
    out.sort();
    out
}

fn train_tiny(data: &Path, runs: &Path, extra: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(["train", "--preset", "toy", "--override", "steps=1", "--override", "image_size=32"])
        .args(["--override", "batch_size=2", "--data"])
        .arg(data)
        .arg("--runs-dir")
        .arg(runs);
    for e in extra {
        cmd.arg(e);
    }
    run(&mut cmd)
}

fn checkpoint_line(o: &Output) -> PathBuf {
    let s = stdout(o);
    let line = s.lines().find(|l| l.starts_with("checkpoint: ")).expect("checkpoint line");
    PathBuf::from(line.trim_start_matches("checkpoint: "))
}

#[test]
fn make_toy_data_reports_count_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = make_toy(&a, 8);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "8 samples"), "{}", stdout(&o));
    let list = fs::read_to_string(a.join("Toy_train.txt")).unwrap();
    assert_eq!(list.lines().count(), 8);
    assert!(make_toy(&b, 8).status.success());
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn dataset_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args(["make-toy-data", "--n", "2", "--size", "16"])
        .env("HARMONIZE_LAB_DATA", tmp.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("Toy_train.txt").exists());
}

#[test]
fn missing_dataset_root_is_a_usage_error() {
    let o = run(bin().args(["make-toy-data", "--n", "2"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("HARMONIZE_LAB_DATA"));
}

#[test]
fn unknown_override_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args(["train", "--preset", "toy", "--override", "lambda9=0.5", "--data"])
        .arg(tmp.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`lambda9`"), "{}", stderr(&o));
}

#[test]
fn unknown_config_file_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"k": 8, "temperature": 0.1}"#).unwrap();
    let o = run(bin().args(["train", "--config"]).arg(&cfg).arg("--data").arg(tmp.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`temperature`"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_values_exit_with_usage_code() {
    assert_eq!(run(bin().args(["train", "--no-such-flag"])).status.code(), Some(1));
    assert_eq!(run(bin().args(["frobnicate"])).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args(["train", "--override", "learning_rate=0", "--data"])
        .arg(tmp.path()));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(run(bin().arg("--help")).status.success());
}

#[test]
fn train_one_step_writes_checkpoint_and_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("toy"), tmp.path().join("runs"));
    assert!(make_toy(&data, 4).status.success());
    let o = train_tiny(&data, &runs, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = checkpoint_line(&o);
    assert!(ckpt.exists());
    let run_dir = ckpt.parent().unwrap();
    let name = run_dir.file_name().unwrap().to_string_lossy().into_owned();
    let (stamp, hash) = name.rsplit_once('-').unwrap();
    assert!(stamp.starts_with(char::is_numeric) && stamp.ends_with('Z'), "{name}");
    assert_eq!(hash.len(), 8);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    for f in ["config.json", "train_log.jsonl", "eval_final.jsonl"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let table = stdout(&o);
    assert!(table.contains("composite") && table.contains("model"), "{table}");
}

#[test]
fn lambda3_override_disables_contrastive_term() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("toy"), tmp.path().join("runs"));
    assert!(make_toy(&data, 4).status.success());
    let o = train_tiny(&data, &runs, &["--override", "lambda3=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(checkpoint_line(&o).parent().unwrap().join("train_log.jsonl")).unwrap();
    let step: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(step["kind"], "step");
    assert_eq!(step["l_hcl"], 0.0, "{step}");
}

#[test]
fn composite_baseline_records_requested_resolutions() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("toy"), tmp.path().join("runs"));
    assert!(make_toy(&data, 4).status.success());
    let o = run(bin()
        .args(["evaluate", "--baseline", "composite", "--resolution", "16", "--resolution", "32", "--data"])
        .arg(&data)
        .arg("--runs-dir")
        .arg(&runs));
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    for res in [16usize, 32] {
        let text = fs::read_to_string(dir.join(format!("eval_composite_{res}.jsonl"))).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["resolution"], res);
        }
    }
}

#[test]
fn evaluate_and_harmonize_need_an_existing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.ckpt");
    let o = run(bin().args(["evaluate", "--checkpoint"]).arg(&missing).arg("--data").arg(tmp.path()));
    assert_eq!(o.status.code(), Some(1));
    let o = run(bin()
        .args(["harmonize", "--checkpoint"])
        .arg(&missing)
        .args(["--composite", "a.png", "--mask", "b.png", "--out", "c.png"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn harmonize_keeps_size_and_zero_mask_blend_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("toy"), tmp.path().join("runs"));
    assert!(make_toy(&data, 4).status.success());
    let trained = train_tiny(&data, &runs, &[]);
    assert!(trained.status.success(), "{}", stderr(&trained));
    let ckpt = checkpoint_line(&trained);

    let (w, h) = (50, 30);
    let comp = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 5) as u8, (y * 8) as u8, ((x + y) * 3) as u8]));
    let comp_path = tmp.path().join("comp.png");
    comp.save(&comp_path).unwrap();
    let zero_path = tmp.path().join("zero.png");
    GrayImage::from_pixel(w, h, Luma([0])).save(&zero_path).unwrap();
    let box_path = tmp.path().join("box.png");
    GrayImage::from_fn(w, h, |x, y| Luma([if (10..30).contains(&x) && (5..20).contains(&y) { 255 } else { 0 }]))
        .save(&box_path)
        .unwrap();

    let out = tmp.path().join("out.png");
    let grid = tmp.path().join("grid.png");
    let o = run(bin()
        .arg("harmonize")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--composite")
        .arg(&comp_path)
        .arg("--mask")
        .arg(&zero_path)
        .arg("--out")
        .arg(&out)
        .arg("--blend")
        .arg("--grid")
        .arg(&grid));
    assert!(o.status.success(), "{}", stderr(&o));
    let got = image::open(&out).unwrap().to_rgb8();
    assert_eq!(got, comp);
    let strip = image::open(&grid).unwrap().to_rgb8();
    assert_eq!(strip.dimensions(), (3 * w, h));

    let o = run(bin()
        .arg("harmonize")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--composite")
        .arg(&comp_path)
        .arg("--mask")
        .arg(&box_path)
        .arg("--out")
        .arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(image::open(&out).unwrap().to_rgb8().dimensions(), (w, h));
}

#[test]
fn selftest_passes_and_temperature_hook_fails() {
    let o = run(bin().args(["selftest", "--quick"]));
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = run(bin().args(["selftest", "--quick", "--tau", "-1"]));
    assert_eq!(o.status.code(), Some(2));
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("temperature"))
        .map(str::to_owned)
        .expect("temperature check line");
    assert!(line.contains("FAIL"), "{line}");
}
