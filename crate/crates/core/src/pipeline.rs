//! End-to-end orchestration: split, perceive, merge.
//!
//! Units are perceived in parallel on the ambient rayon pool; results are
//! collected in unit order, so output does not depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{FrameMap, NormTransform, OrientedBox, Point};
use crate::merge::{merge_detections, merge_segmentation, NmsParams, ScenePrediction};
use crate::patching::{positive_mask, split_scene, PatchParams};
use crate::perceive::{PatchPrediction, Perceiver, PerceptionInput, Region};
use crate::scene_io::{LabeledScene, PointCloud};
use crate::sectorial::{split_sectors, SectorParams, SectorRotation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    Patches(PatchParams),
    Sectors(SectorParams),
}

impl SplitMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            SplitMode::Patches(p) => p.validate(),
            SplitMode::Sectors(s) => s.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnitFrame {
    Patch(NormTransform),
    Sector(SectorRotation),
}

impl FrameMap for UnitFrame {
    fn point_to_frame(&self, p: &Point) -> Point {
        match self {
            UnitFrame::Patch(t) => t.point_to_frame(p),
            UnitFrame::Sector(r) => r.point_to_frame(p),
        }
    }

    fn point_from_frame(&self, p: &Point) -> Point {
        match self {
            UnitFrame::Patch(t) => t.point_from_frame(p),
            UnitFrame::Sector(r) => r.point_from_frame(p),
        }
    }

    fn box_to_frame(&self, b: &OrientedBox) -> OrientedBox {
        match self {
            UnitFrame::Patch(t) => t.box_to_frame(b),
            UnitFrame::Sector(r) => r.box_to_frame(b),
        }
    }

    fn box_from_frame(&self, b: &OrientedBox) -> OrientedBox {
        match self {
            UnitFrame::Patch(t) => t.box_from_frame(b),
            UnitFrame::Sector(r) => r.box_from_frame(b),
        }
    }
}

/// A patch or a sector, reduced to what perception and merging need.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub frame: UnitFrame,
    pub region: Region,
    pub point_indices: Vec<usize>,
    pub normalized_points: PointCloud,
}

pub fn split(pc: &PointCloud, mode: &SplitMode) -> Result<Vec<Unit>> {
    Ok(match mode {
        SplitMode::Patches(params) => split_scene(pc, params)?
            .into_iter()
            .map(|p| Unit {
                frame: UnitFrame::Patch(p.transform),
                region: Region::Patch {
                    layout: p.layout,
                    theta: p.transform.theta().radians(),
                },
                point_indices: p.point_indices,
                normalized_points: p.normalized_points,
            })
            .collect(),
        SplitMode::Sectors(params) => split_sectors(pc, params)?
            .into_iter()
            .map(|s| Unit {
                frame: UnitFrame::Sector(s.rotation),
                region: s.region,
                point_indices: s.point_indices,
                normalized_points: s.normalized_points,
            })
            .collect(),
    })
}

/// Runs the perceiver on every unit. GT boxes and point labels, when
/// given, are mapped into each unit's frame first.
pub fn perceive_units(
    units: &[Unit],
    gt_boxes: &[OrientedBox],
    point_labels: Option<&[i32]>,
    perceiver: &dyn Perceiver,
) -> Result<Vec<PatchPrediction>> {
    units
        .par_iter()
        .map(|unit| {
            let local_gt: Vec<OrientedBox> = gt_boxes
                .iter()
                .map(|b| unit.frame.box_to_frame(b))
                .collect();
            let local_labels: Option<Vec<i32>> =
                point_labels.map(|labels| unit.point_indices.iter().map(|&i| labels[i]).collect());
            perceiver.perceive(&PerceptionInput {
                points: &unit.normalized_points,
                region: unit.region,
                gt_boxes: &local_gt,
                point_labels: local_labels.as_deref(),
            })
        })
        .collect()
}

/// Deterministic counts gathered while running the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunStats {
    pub units: usize,
    pub scene_points: usize,
    pub unit_points: usize,
    pub covered_points: usize,
}

impl RunStats {
    fn from_units(units: &[Unit], scene_points: usize) -> Self {
        let mut covered = vec![false; scene_points];
        let mut unit_points = 0;
        for u in units {
            unit_points += u.point_indices.len();
            for &i in &u.point_indices {
                covered[i] = true;
            }
        }
        RunStats {
            units: units.len(),
            scene_points,
            unit_points,
            covered_points: covered.iter().filter(|c| **c).count(),
        }
    }

    /// Mean number of units holding each scene point.
    pub fn duplication_mean(&self) -> f64 {
        if self.scene_points == 0 {
            0.0
        } else {
            self.unit_points as f64 / self.scene_points as f64
        }
    }

    pub fn coverage_fraction(&self) -> f64 {
        if self.scene_points == 0 {
            1.0
        } else {
            self.covered_points as f64 / self.scene_points as f64
        }
    }
}

fn check_labels(scene: &LabeledScene) -> Result<()> {
    scene.validate()
}

/// Positive sampling applied to units before perception.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub neg_ratio: f64,
    pub seed: u64,
}

/// Keeps units holding a GT box center plus a seeded share of the rest.
pub fn sample_units(
    units: Vec<Unit>,
    gt_boxes: &[OrientedBox],
    selection: &Selection,
) -> Result<Vec<Unit>> {
    let foreground: Vec<bool> = units
        .iter()
        .map(|u| {
            gt_boxes.iter().any(|b| {
                let c = u.frame.point_to_frame(&Point::new(b.cx, b.cy, 0.0, 0.0));
                u.region.contains(c.x, c.y)
            })
        })
        .collect();
    let keep = positive_mask(&foreground, selection.neg_ratio, selection.seed)?;
    Ok(units
        .into_iter()
        .zip(keep)
        .filter_map(|(u, k)| k.then_some(u))
        .collect())
}

fn prepare(
    scene: &LabeledScene,
    mode: &SplitMode,
    selection: Option<&Selection>,
) -> Result<Vec<Unit>> {
    mode.validate()?;
    check_labels(scene)?;
    let units = split(&scene.cloud, mode)?;
    match selection {
        Some(sel) => sample_units(units, &scene.gt_boxes, sel),
        None => Ok(units),
    }
}

pub fn detect(
    scene: &LabeledScene,
    mode: &SplitMode,
    nms: &NmsParams,
    perceiver: &dyn Perceiver,
) -> Result<(ScenePrediction, RunStats)> {
    detect_selected(scene, mode, nms, perceiver, None)
}

pub fn detect_selected(
    scene: &LabeledScene,
    mode: &SplitMode,
    nms: &NmsParams,
    perceiver: &dyn Perceiver,
    selection: Option<&Selection>,
) -> Result<(ScenePrediction, RunStats)> {
    nms.validate()?;
    if !perceiver.capabilities().detects {
        return Err(Error::invalid("perceiver does not produce detections"));
    }
    let units = prepare(scene, mode, selection)?;
    let preds = perceive_units(
        &units,
        &scene.gt_boxes,
        scene.point_labels.as_deref(),
        perceiver,
    )?;
    let stats = RunStats::from_units(&units, scene.cloud.len());
    let per_unit: Vec<(UnitFrame, PatchPrediction)> =
        units.iter().map(|u| u.frame).zip(preds).collect();
    Ok((merge_detections(&per_unit, nms), stats))
}

pub fn segment(
    scene: &LabeledScene,
    mode: &SplitMode,
    n_classes: usize,
    perceiver: &dyn Perceiver,
) -> Result<(ScenePrediction, RunStats)> {
    segment_selected(scene, mode, n_classes, perceiver, None)
}

pub fn segment_selected(
    scene: &LabeledScene,
    mode: &SplitMode,
    n_classes: usize,
    perceiver: &dyn Perceiver,
    selection: Option<&Selection>,
) -> Result<(ScenePrediction, RunStats)> {
    if !perceiver.capabilities().segments {
        return Err(Error::invalid("perceiver does not produce segmentation"));
    }
    let units = prepare(scene, mode, selection)?;
    let preds = perceive_units(
        &units,
        &scene.gt_boxes,
        scene.point_labels.as_deref(),
        perceiver,
    )?;
    let stats = RunStats::from_units(&units, scene.cloud.len());
    let per_unit: Vec<(&[usize], &PatchPrediction)> = units
        .iter()
        .map(|u| u.point_indices.as_slice())
        .zip(preds.iter())
        .collect();
    Ok((
        merge_segmentation(&per_unit, scene.cloud.len(), n_classes)?,
        stats,
    ))
}
