use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn dipreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dipreg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dipreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, extent: usize) {
    ok(&["phantom", "--set", &format!("phantom_extent={extent}"), "-o", s(dir)]);
}

fn report_value(p: &Path, column: &str) -> f64 {
    let text = fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = head.iter().position(|h| *h == column).unwrap();
    row[k].parse().unwrap()
}

#[test]
fn phantom_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path(), 16);
    for f in ["fixed.nvol", "moving.nvol", "phi_gt.nvol", "velocity_gt.nvol", "body_mask.nvol", "masks/masks.txt", "config.txt"] {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }
}

#[test]
fn registering_an_image_to_itself_stays_regular() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, 16);
    let fixed = ph.join("fixed.nvol");
    let out = tmp.path().join("reg");
    ok(&[
        "register",
        "--set",
        &format!("fixed={}", s(&fixed)),
        "--set",
        &format!("moving={}", s(&fixed)),
        "--set",
        &format!("masks={}", s(&ph.join("masks"))),
        "--set",
        "iters_per_level=20,20,20",
        "-o",
        s(&out),
    ]);
    for f in ["displacement.nvol", "warped.nvol", "loss.csv", "network.nprm", "displacement_level1.nvol", "displacement_level2.nvol", "report.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let sdj = report_value(&out.join("report.csv"), "sdjdet");
    assert!(sdj <= 0.05, "SDJDet {sdj}");
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 61);
}

#[test]
fn direct_method_rejects_an_initial_field() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path(), 16);
    let f = tmp.path().join("fixed.nvol");
    let out = dipreg(&[
        "register",
        "--set",
        "method=direct",
        "--set",
        &format!("fixed={}", s(&f)),
        "--set",
        &format!("moving={}", s(&f)),
        "--set",
        &format!("init_field={}", s(&tmp.path().join("phi_gt.nvol"))),
        "-o",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_within_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    ok(&["gradcheck", "-o", s(tmp.path())]);
    assert!(t.elapsed().as_secs_f64() < 60.0);
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn overlay_writes_three_planes() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path(), 16);
    let out = tmp.path().join("ov");
    ok(&[
        "overlay",
        "--set",
        &format!("fixed={}", s(&tmp.path().join("fixed.nvol"))),
        "--set",
        &format!("moving={}", s(&tmp.path().join("moving.nvol"))),
        "-o",
        s(&out),
    ]);
    for p in ["axial", "coronal", "sagittal"] {
        let bytes = fs::read(out.join(format!("overlay_{p}.ppm"))).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 16 * 16 * 3);
    }
}

#[test]
fn ablate_writes_the_table_header_and_rows() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&[
        "ablate",
        "--variants",
        "depth_1,level_2,no_regularization",
        "--set",
        "phantom_extent=16",
        "--set",
        "iters_per_level=3,3,3",
        "-o",
        s(tmp.path()),
    ]);
    let csv = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "config_id,dice_organs_mean,dice_organs_std,dice_lesions_mean,dice_lesions_std,detection_rate,disappearing_rate,sdjdet,iterations,seconds"
    );
    let ids: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["depth_1", "level_2", "no_regularization"]);
    assert!(lines[2].contains(",6,"), "level_2 row counts two levels: {}", lines[2]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(dipreg(&["--help"]).status.code(), Some(0));
    assert_eq!(dipreg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dipreg(&["eval", "--set", "colour=blue"]).status.code(), Some(1));
    assert_eq!(dipreg(&["register"]).status.code(), Some(1));
    let missing = tmp.path().join("nope.nvol");
    let out = dipreg(&["overlay", "--set", &format!("fixed={}", s(&missing)), "--set", &format!("moving={}", s(&missing))]);
    assert_eq!(out.status.code(), Some(2));
    let bad = tmp.path().join("bad.nvol");
    fs::write(&bad, "NVOL1\ndims: 2 2\n").unwrap();
    let out = dipreg(&["overlay", "--set", &format!("fixed={}", s(&bad)), "--set", &format!("moving={}", s(&bad))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn divergent_registration_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path(), 16);
    let f = tmp.path().join("fixed.nvol");
    let out = dipreg(&[
        "register",
        "--set",
        &format!("fixed={}", s(&f)),
        "--set",
        &format!("moving={}", s(&tmp.path().join("moving.nvol"))),
        "--set",
        "lr=1e30",
        "--set",
        "iters_per_level=5,5,5",
        "-o",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
