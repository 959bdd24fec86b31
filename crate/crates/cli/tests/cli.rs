use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const PLAN: &str = r#"
seed = 3

[model]
channels = 8
hyper_channels = 4
hidden = 8
kernel = 3
context_hidden = 8

[[phases]]
name = "base"
loss = "hvs"
dataset = "shapes"
epochs = 1
learning_rate = 1e-3
lambdas = [0.01]
"#;

fn ncn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncn")).args(args).env_remove("NCN_CACHE_DIR").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, plan and one trained model shared by all tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        ok(&ncn(&["gen-synthetic", "--n", "10", "--val", "4", "--seed", "2", "--out", s(&dir.join("shapes"))]));
        std::fs::write(dir.join("plan.toml"), PLAN).unwrap();
        ok(&ncn(&["train", "--plan", s(&dir.join("plan.toml")), "--out", s(&dir.join("run"))]));
        dir
    })
}

fn model() -> PathBuf {
    fixture().join("run/model_0.ncnw")
}

fn image() -> PathBuf {
    fixture().join("shapes/images/img_00003.png")
}

#[test]
fn round_trip_preserves_dimensions_and_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let bits = dir.path().join("x.ncn");
    let back = dir.path().join("back.png");
    let enc = ok(&ncn(&["encode", "--model", s(&model()), "--in", s(&image()), "--out", s(&bits)]));
    let size = std::fs::metadata(&bits).unwrap().len();
    assert!(enc.contains("header 27 B"), "{enc}");
    assert!(enc.contains(&format!("total {size} B")), "{enc}");
    ok(&ncn(&["decode", "--model", s(&model()), "--in", s(&bits), "--out", s(&back)]));
    let (a, b) = (image::open(image()).unwrap(), image::open(&back).unwrap());
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
}

#[test]
fn mask_without_head_is_a_capability_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.ncn");
    let r = ncn(&["encode", "--model", s(&model()), "--in", s(&image()), "--out", s(&out), "--mask"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_model_and_bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = ncn(&["encode", "--model", s(&dir.path().join("none.ncnw")), "--in", s(&image()), "--out", s(&dir.path().join("x"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
    assert_eq!(ncn(&["encode", "--bogus"]).status.code(), Some(1));
    assert_eq!(ncn(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_stream_fails_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let bits = dir.path().join("x.ncn");
    ok(&ncn(&["encode", "--model", s(&model()), "--in", s(&image()), "--out", s(&bits)]));
    let mut bytes = std::fs::read(&bits).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&bits, &bytes).unwrap();
    let out = dir.path().join("back.png");
    let r = ncn(&["decode", "--model", s(&model()), "--in", s(&bits), "--out", s(&out)]);
    assert!(!r.status.success());
    let left: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("x.ncn")]);
}

#[test]
fn gen_synthetic_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&ncn(&["gen-synthetic", "--n", "5", "--seed", "11", "--out", s(&a)]));
    ok(&ncn(&["gen-synthetic", "--n", "5", "--seed", "11", "--out", s(&b)]));
    for f in ["manifest.json", "train.jsonl", "val.jsonl", "images/img_00004.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // Without --out or a cache directory there is nowhere to write.
    assert_eq!(ncn(&["gen-synthetic", "--n", "5"]).status.code(), Some(1));
}

#[test]
fn sweep_writes_curves_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    ok(&ncn(&["sweep", "--plan", s(&fixture().join("plan.toml")), "--lambdas", "0.001,1", "--out", s(&out)]));
    let text = std::fs::read_to_string(out.join("rd_hvs.csv")).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert!(text.contains("# lambdas=0.001,1\nlabel,quality_kind,bpp,quality\nhvs,psnr,"), "{text}");
    let png = image::open(out.join("rd_hvs.png")).unwrap();
    assert_eq!((png.width(), png.height()), (640, 480));
    assert!(out.join("model_1.ncnw").exists());
    assert_eq!(ncn(&["sweep", "--plan", s(&fixture().join("plan.toml")), "--lambdas", "0.1", "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn eval_reports_bd_rate_against_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let rows = |label: &str, f: f64| {
        let mut t = String::from("label,quality_kind,bpp,quality\n");
        for (b, q) in [(0.1, 30.0), (0.2, 32.5), (0.4, 34.0), (0.8, 36.0)] {
            t += &format!("{label},psnr,{},{q}\n", b * f);
        }
        t
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    std::fs::write(&a, rows("anchor", 1.0)).unwrap();
    std::fs::write(&b, rows("half", 0.5)).unwrap();
    let report = ok(&ncn(&["eval", "--curves", s(&a), s(&b), s(&a), "--bd", "--anchor", "anchor"]));
    let line = |name: &str| report.lines().find(|l| l.starts_with(name) && l.contains('%')).map(str::to_owned).unwrap_or_else(|| panic!("{report}"));
    assert!(line("half ").contains("-50.00%"), "{report}");
    assert!(line("anchor#3").contains(" 0.00%"), "{report}");
    assert_eq!(ncn(&["eval", "--curves", s(&a), "--bd", "--anchor", "nope"]).status.code(), Some(1));
}
