use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use azinorm::{
    bench_throughput, gen_scene, Bounds, LabeledScene, Layout, MetricReport, NmsParams,
    OracleDetector, PatchParams, Point, PointCloud, SceneSpec, SplitMode,
};

fn uniform_scene(seed: u64, n: usize, half: f64) -> LabeledScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud: PointCloud = (0..n)
        .map(|_| {
            Point::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                0.0,
                0.0,
            )
        })
        .collect();
    LabeledScene {
        cloud,
        gt_boxes: vec![],
        point_labels: None,
    }
}

fn duplication(scene: &LabeledScene, layout: Layout, stride: f64, extent: f64) -> f64 {
    let mode = SplitMode::Patches(PatchParams {
        layout,
        stride,
        bounds: Bounds::square(extent),
        ..PatchParams::default()
    });
    bench_throughput(scene, &mode, &NmsParams::default(), &OracleDetector, 3, 1)
        .unwrap()
        .duplication_mean
}

#[test]
fn circular_duplication_matches_area_ratio() {
    let (r, d) = (9.6, 6.4);
    let scene = uniform_scene(1, 50_000, 100.0 - r);
    let got = duplication(&scene, Layout::Circular { radius: r }, d, 100.0);
    let want = PI * r * r / (d * d);
    assert!((got - want).abs() <= 0.1 * want, "{got} vs {want}");
}

#[test]
fn square_tiling_has_no_duplication() {
    let r = 9.6;
    let d = 2.0 * r;
    let scene = uniform_scene(2, 50_000, 96.0);
    let got = duplication(&scene, Layout::Square { side: d }, d, 96.0);
    assert!((got - 1.0).abs() <= 0.1, "{got}");
}

#[test]
fn single_repetition_report() {
    let scene = gen_scene(&SceneSpec {
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let mode = SplitMode::Patches(PatchParams::default());
    let report =
        bench_throughput(&scene, &mode, &NmsParams::default(), &OracleDetector, 3, 1).unwrap();
    assert_eq!(report.timings.len(), 1);
    assert_eq!(report.wall_time, report.timings[0]);
    assert_eq!(report.recall_at(0.7), Some(1.0));
    assert_eq!(report.precision_at(0.7), Some(1.0));
    assert_eq!(report.coverage_fraction, 1.0);
    assert!(report.patches_processed > 0);
    assert!(bench_throughput(&scene, &mode, &NmsParams::default(), &OracleDetector, 3, 0).is_err());
}

#[test]
fn report_json_is_lossless() {
    let scene = gen_scene(&SceneSpec {
        seed: 10,
        ..Default::default()
    })
    .unwrap();
    let mode = SplitMode::Patches(PatchParams::default());
    let report =
        bench_throughput(&scene, &mode, &NmsParams::default(), &OracleDetector, 3, 4).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    assert!(!text.contains('\n'));
    let back: MetricReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}
