//! Seeded synthetic scenes and desk-scale metrics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{OrientedBox, Point};
use crate::merge::{nms_order, rotated_iou_bev, NmsParams};
use crate::patching::Bounds;
use crate::perceive::Perceiver;
use crate::pipeline::{self, RunStats, SplitMode};
use crate::scene_io::{LabeledScene, PointCloud};

pub const GROUND_LABEL: i32 = 0;
pub const CAR_CLASS: u32 = 1;
pub const PEDESTRIAN_CLASS: u32 = 2;
pub const N_CLASSES: usize = 3;

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Object noise is truncated at this many standard deviations per axis.
const NOISE_TRUNCATION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectClass {
    pub class_id: u32,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
}

pub const CAR: ObjectClass = ObjectClass {
    class_id: CAR_CLASS,
    length: (3.5, 5.0),
    width: (1.6, 2.1),
    height: (1.4, 1.9),
};

pub const PEDESTRIAN: ObjectClass = ObjectClass {
    class_id: PEDESTRIAN_CLASS,
    length: (0.4, 0.8),
    width: (0.4, 0.8),
    height: (1.5, 1.9),
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_objects: usize,
    /// Scene bounds are `[-extent, extent]` on both BEV axes.
    pub extent: f64,
    pub ground_points: usize,
    pub points_per_object: usize,
    pub noise_sigma: f64,
    /// Probability that an object is a pedestrian rather than a car.
    pub pedestrian_fraction: f64,
    /// Minimum free space kept between object footprints.
    pub min_gap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            n_objects: 12,
            extent: 40.0,
            ground_points: 6000,
            points_per_object: 200,
            noise_sigma: 0.02,
            pedestrian_fraction: 0.3,
            min_gap: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn bounds(&self) -> Bounds {
        Bounds::square(self.extent)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(Error::invalid(format!(
                "extent must be positive, got {}",
                self.extent
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.pedestrian_fraction) {
            return Err(Error::invalid("pedestrian_fraction must lie in [0, 1]"));
        }
        if !(self.min_gap.is_finite() && self.min_gap >= 0.0) {
            return Err(Error::invalid("min_gap must be >= 0"));
        }
        Ok(())
    }

    /// Parses either a JSON object or `key = value` lines (`#` comments).
    pub fn from_config_str(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let spec: SceneSpec = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed).map_err(|e| Error::schema("$", e.to_string()))?
        } else {
            let mut spec = SceneSpec::default();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let err = |m: &str| Error::LineFormat {
                    line: i + 1,
                    message: m.to_string(),
                };
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| err("expected key = value"))?;
                let (key, value) = (key.trim(), value.trim());
                let bad = || err(&format!("bad value `{value}` for `{key}`"));
                match key {
                    "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                    "n_objects" => spec.n_objects = value.parse().map_err(|_| bad())?,
                    "extent" => spec.extent = value.parse().map_err(|_| bad())?,
                    "ground_points" => spec.ground_points = value.parse().map_err(|_| bad())?,
                    "points_per_object" => {
                        spec.points_per_object = value.parse().map_err(|_| bad())?
                    }
                    "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad())?,
                    "pedestrian_fraction" => {
                        spec.pedestrian_fraction = value.parse().map_err(|_| bad())?
                    }
                    "min_gap" => spec.min_gap = value.parse().map_err(|_| bad())?,
                    _ => return Err(err(&format!("unknown key `{key}`"))),
                }
            }
            spec
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn truncated(rng: &mut ChaCha8Rng, normal: &Normal<f64>, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let v = normal.sample(rng);
        if v.abs() <= NOISE_TRUNCATION * sigma {
            return v;
        }
    }
}

fn place_object(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    class: &ObjectClass,
    placed: &[OrientedBox],
) -> Result<OrientedBox> {
    let length = rng.random_range(class.length.0..=class.length.1);
    let width = rng.random_range(class.width.0..=class.width.1);
    let height = rng.random_range(class.height.0..=class.height.1);
    let margin = 0.5 * length.hypot(width);
    if margin >= spec.extent {
        return Err(Error::Generation(format!(
            "object of {length:.2} x {width:.2} m does not fit in extent {}",
            spec.extent
        )));
    }
    let inflate = |b: &OrientedBox| OrientedBox {
        length: b.length + spec.min_gap,
        width: b.width + spec.min_gap,
        ..*b
    };
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let lim = spec.extent - margin;
        let yaw = std::f64::consts::PI - rng.random_range(0.0..std::f64::consts::TAU);
        let candidate = OrientedBox {
            cx: rng.random_range(-lim..=lim),
            cy: rng.random_range(-lim..=lim),
            cz: height / 2.0,
            length,
            width,
            height,
            yaw,
            score: 1.0,
            class_id: class.class_id,
        };
        let grown = inflate(&candidate);
        if placed
            .iter()
            .all(|b| rotated_iou_bev(&grown, &inflate(b)) == 0.0)
        {
            return Ok(candidate);
        }
    }
    Err(Error::Generation(format!(
        "could not place object {} after {MAX_PLACEMENT_ATTEMPTS} attempts",
        placed.len()
    )))
}

/// Uniform sample on the surface of `b`, faces weighted by area, before
/// noise.
fn surface_point(rng: &mut ChaCha8Rng, b: &OrientedBox) -> (f64, f64, f64) {
    let (l, w, h) = (b.length, b.width, b.height);
    let faces = [l * w, l * w, w * h, w * h, l * h, l * h];
    let total: f64 = faces.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = faces.len() - 1;
    for (k, a) in faces.iter().enumerate() {
        if pick < *a {
            face = k;
            break;
        }
        pick -= a;
    }
    let mut u = || rng.random_range(-0.5..=0.5);
    let (x, y, z) = match face {
        0 => (u() * l, u() * w, 0.5 * h),
        1 => (u() * l, u() * w, -0.5 * h),
        2 => (0.5 * l, u() * w, u() * h),
        3 => (-0.5 * l, u() * w, u() * h),
        4 => (u() * l, 0.5 * w, u() * h),
        _ => (u() * l, -0.5 * w, u() * h),
    };
    let (s, c) = b.yaw.sin_cos();
    (b.cx + c * x - s * y, b.cy + s * x + c * y, b.cz + z)
}

/// Generates a labelled scene. Ground points come first, then each
/// object's surface points in object order.
pub fn gen_scene(spec: &SceneSpec) -> Result<LabeledScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;

    let mut gt_boxes = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let class = if rng.random_bool(spec.pedestrian_fraction) {
            &PEDESTRIAN
        } else {
            &CAR
        };
        let b = place_object(&mut rng, spec, class, &gt_boxes)?;
        gt_boxes.push(b);
    }

    let mut cloud =
        PointCloud::with_capacity(spec.ground_points + spec.n_objects * spec.points_per_object);
    cloud.frame_id = format!("synthetic-{}", spec.seed);
    let mut labels = vec![GROUND_LABEL; spec.ground_points];
    let e = spec.extent;
    for _ in 0..spec.ground_points {
        let z = if spec.noise_sigma > 0.0 {
            normal.sample(&mut rng)
        } else {
            0.0
        };
        cloud.push(Point::new(
            rng.random_range(-e..=e),
            rng.random_range(-e..=e),
            z,
            0.1,
        ));
    }
    for b in &gt_boxes {
        for _ in 0..spec.points_per_object {
            let (x, y, z) = surface_point(&mut rng, b);
            let p = Point::new(
                x + truncated(&mut rng, &normal, spec.noise_sigma),
                y + truncated(&mut rng, &normal, spec.noise_sigma),
                z + truncated(&mut rng, &normal, spec.noise_sigma),
                if b.class_id == CAR_CLASS { 0.6 } else { 0.4 },
            );
            cloud.push(p);
            labels.push(b.class_id as i32);
        }
    }
    Ok(LabeledScene {
        cloud,
        gt_boxes,
        point_labels: Some(labels),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRate {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at_iou: Vec<ThresholdRate>,
    pub precision_at_iou: Vec<ThresholdRate>,
    pub coverage_fraction: f64,
    pub duplication_mean: f64,
    pub patches_processed: usize,
    /// Median wall time of one end-to-end run, seconds.
    pub wall_time: f64,
    pub patches_per_sec: f64,
    pub points_per_sec: f64,
    /// Every timing sample, seconds.
    pub timings: Vec<f64>,
}

impl MetricReport {
    pub fn with_stats(stats: &RunStats) -> Self {
        MetricReport {
            coverage_fraction: stats.coverage_fraction(),
            duplication_mean: stats.duplication_mean(),
            patches_processed: stats.units,
            ..Default::default()
        }
    }

    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.recall_at_iou
            .iter()
            .find(|r| r.threshold == threshold)
            .map(|r| r.value)
    }

    pub fn precision_at(&self, threshold: f64) -> Option<f64> {
        self.precision_at_iou
            .iter()
            .find(|r| r.threshold == threshold)
            .map(|r| r.value)
    }
}

pub const REPORT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Greedy one-to-one matching per threshold. Predictions are visited by
/// descending score; each takes the unmatched GT box with the highest
/// BEV IoU when that IoU exceeds the threshold.
pub fn recall_precision(
    pred: &[OrientedBox],
    gt: &[OrientedBox],
    thresholds: &[f64],
) -> (Vec<ThresholdRate>, Vec<ThresholdRate>) {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| nms_order(&pred[a], &pred[b]));
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&p| gt.iter().map(|g| rotated_iou_bev(&pred[p], g)).collect())
        .collect();
    let mut recall = Vec::with_capacity(thresholds.len());
    let mut precision = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut taken = vec![false; gt.len()];
        let mut matched = 0usize;
        for row in &ious {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[g] || iou <= threshold {
                    continue;
                }
                if best.map(|(_, v)| iou > v).unwrap_or(true) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                matched += 1;
            }
        }
        let r = if gt.is_empty() {
            1.0
        } else {
            matched as f64 / gt.len() as f64
        };
        let p = if pred.is_empty() {
            1.0
        } else {
            matched as f64 / pred.len() as f64
        };
        recall.push(ThresholdRate {
            threshold,
            value: r,
        });
        precision.push(ThresholdRate {
            threshold,
            value: p,
        });
    }
    (recall, precision)
}

/// Times `repetitions` end-to-end detection runs (or segmentation runs
/// for perceivers that only segment) and reports the median.
pub fn bench_throughput(
    scene: &LabeledScene,
    mode: &SplitMode,
    nms: &NmsParams,
    perceiver: &dyn Perceiver,
    n_classes: usize,
    repetitions: usize,
) -> Result<MetricReport> {
    if repetitions == 0 {
        return Err(Error::invalid("repetitions must be at least 1"));
    }
    let mut timings = Vec::with_capacity(repetitions);
    let mut last = None;
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = if perceiver.capabilities().detects {
            pipeline::detect(scene, mode, nms, perceiver)?
        } else {
            pipeline::segment(scene, mode, n_classes, perceiver)?
        };
        timings.push(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    let (prediction, stats) = last.expect("at least one repetition");
    let mut sorted = timings.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let mut report = MetricReport::with_stats(&stats);
    if perceiver.capabilities().detects && !scene.gt_boxes.is_empty() {
        let (r, p) = recall_precision(&prediction.boxes, &scene.gt_boxes, &REPORT_THRESHOLDS);
        report.recall_at_iou = r;
        report.precision_at_iou = p;
    }
    report.wall_time = median;
    let rate = |n: usize| if median > 0.0 { n as f64 / median } else { 0.0 };
    report.patches_per_sec = rate(stats.units);
    report.points_per_sec = rate(stats.scene_points);
    report.timings = timings;
    Ok(report)
}
