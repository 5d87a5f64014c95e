use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use azinorm::scene_io::{read_labels, read_predictions};
use azinorm::MetricReport;

fn azinorm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_azinorm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = azinorm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--output", "a", "--seed", "7"]);
    ok(dir.path(), &["gen", "--output", "b", "--seed", "7"]);
    ok(dir.path(), &["gen", "--output", "c", "--seed", "8"]);
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_ne!(read("a.bin"), read("c.bin"));
    let la = String::from_utf8(read("a.labels.json")).unwrap();
    let lb = String::from_utf8(read("b.labels.json")).unwrap();
    assert_eq!(la.replace("\"a\"", "\"b\""), lb);
}

#[test]
fn gen_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("scene.cfg"),
        "# small\nn_objects = 3\nground_points = 100\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "gen",
            "--output",
            "s",
            "--config",
            "scene.cfg",
            "--seed",
            "1",
        ],
    );
    let labels =
        read_labels(&fs::read_to_string(dir.path().join("s.labels.json")).unwrap()).unwrap();
    assert_eq!(labels.boxes.len(), 3);
    assert_eq!(labels.point_labels.unwrap().len(), 100 + 3 * 200);
}

#[test]
fn oracle_detect_reports_full_recall() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--output", "s", "--seed", "2"]);
    let out = ok(
        dir.path(),
        &[
            "detect",
            "--input",
            "s.bin",
            "--labels",
            "s.labels.json",
            "--output",
            "p.json",
            "--perceiver",
            "oracle",
        ],
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("recall@0.7 1.0000"), "{stderr}");
    let preds = read_predictions(&fs::read_to_string(dir.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(preds.frame, "s");
    assert_eq!(preds.boxes.len(), 12);
}

#[test]
fn empty_scene_gives_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.bin"), b"").unwrap();
    ok(
        dir.path(),
        &["detect", "--input", "empty.bin", "--output", "p.json"],
    );
    assert_eq!(
        fs::read_to_string(dir.path().join("p.json")).unwrap(),
        r#"{"frame":"empty","boxes":[]}"#
    );
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = azinorm(
        dir.path(),
        &[
            "detect",
            "--input",
            "no_such_scene.bin",
            "--output",
            "p.json",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_scene.bin"));
    assert!(!dir.path().join("p.json").exists());
}

#[test]
fn schema_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--output", "s", "--seed", "2"]);
    fs::write(
        dir.path().join("bad.json"),
        r#"{"frame":"s","boxes":[{"cx":0}]}"#,
    )
    .unwrap();
    let out = azinorm(
        dir.path(),
        &[
            "detect", "--input", "s.bin", "--labels", "bad.json", "--output", "p.json",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
    assert!(!dir.path().join("p.json").exists());
}

#[test]
fn invalid_config_touches_no_output() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--output", "s", "--seed", "2"]);
    for bad in [
        &["--stride", "0"][..],
        &["--radius", "-1"],
        &["--nms-iou", "1.5"],
        &[
            "--layout",
            "sector",
            "--sectors",
            "4",
            "--overlap-deg",
            "60",
        ],
        &["--neg-ratio", "1"],
        &["--perceiver", "knn"],
        &["--z-min", "2", "--z-max", "1"],
    ] {
        let mut args = vec!["detect", "--input", "s.bin", "--output", "p.json"];
        args.extend_from_slice(bad);
        let out = azinorm(dir.path(), &args);
        assert!(!out.status.success(), "{bad:?} was accepted");
        assert!(!dir.path().join("p.json").exists(), "{bad:?} wrote output");
    }
    let out = azinorm(
        dir.path(),
        &["gen", "--output", "t", "--config", "missing.cfg"],
    );
    assert!(!out.status.success());
    assert!(!dir.path().join("t.bin").exists());
}

#[test]
fn segment_self_reference_matches_labels() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--output", "s", "--seed", "5"]);
    ok(
        dir.path(),
        &[
            "segment",
            "--input",
            "s.bin",
            "--labels",
            "s.labels.json",
            "--output",
            "seg.json",
            "--extent",
            "30",
        ],
    );
    let gt = read_labels(&fs::read_to_string(dir.path().join("s.labels.json")).unwrap())
        .unwrap()
        .point_labels
        .unwrap();
    let got = read_labels(&fs::read_to_string(dir.path().join("seg.json")).unwrap())
        .unwrap()
        .point_labels
        .unwrap();
    assert_eq!(got.len(), gt.len());
    let unknown = got.iter().filter(|&&l| l == -1).count();
    assert!(unknown > 0);
    for (g, t) in got.iter().zip(&gt) {
        assert!(*g == -1 || g == t);
    }
}

#[test]
fn bench_prints_one_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["bench", "--seed", "1", "--repetitions", "3"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    let report: MetricReport = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(report.timings.len(), 3);
    assert_eq!(report.recall_at(0.7), Some(1.0));
    assert_eq!(serde_json::to_string(&report).unwrap(), stdout.trim());
}

#[test]
fn render_draws_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--output", "s", "--seed", "3"]);
    ok(
        dir.path(),
        &[
            "detect",
            "--input",
            "s.bin",
            "--labels",
            "s.labels.json",
            "--output",
            "p.json",
            "--z-min",
            "0.3",
        ],
    );
    ok(
        dir.path(),
        &[
            "render",
            "--input",
            "s.bin",
            "--labels",
            "s.labels.json",
            "--predictions",
            "p.json",
            "--output",
            "r.svg",
            "--render-patches",
        ],
    );
    let svg = fs::read_to_string(dir.path().join("r.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches(r#"class="pt""#).count(), 8400);
    assert_eq!(svg.matches(r#"<polygon class="gt""#).count(), 12);
    assert!(svg.contains(r#"<polygon class="pred""#));
    assert!(svg.contains(r#"<circle class="patch""#));
}

#[test]
fn render_empty_scene() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.bin"), b"").unwrap();
    ok(
        dir.path(),
        &["render", "--input", "empty.bin", "--output", "e.svg"],
    );
    let svg = fs::read_to_string(dir.path().join("e.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("<circle") && !svg.contains("<polygon"));
    assert!(svg.contains(r#"class="frame""#));
}

#[test]
fn fast_preset_uses_fewer_patches() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--output", "s", "--seed", "4"]);
    let units = |preset: &str| {
        let out = ok(
            dir.path(),
            &[
                "bench",
                "--input",
                "s.bin",
                "--labels",
                "s.labels.json",
                "--repetitions",
                "1",
                "--preset",
                preset,
            ],
        );
        let r: MetricReport = serde_json::from_slice(&out.stdout).unwrap();
        r.patches_processed
    };
    assert!(units("fast") * 4 < units("paper"));
}
