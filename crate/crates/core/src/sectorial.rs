//! K-sector normalization: the scene is cut into `K` overlapping angular
//! sectors, each rotated so its bisector lies on +X. No translation.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{wrap, FrameMap, OrientedBox, Point};
use crate::merge::{merge_detections, NmsParams, ScenePrediction};
use crate::perceive::{PatchPrediction, Region};
use crate::scene_io::PointCloud;

pub const DEFAULT_OVERLAP_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorParams {
    pub count: usize,
    /// Extra angle added on each side of a sector, radians.
    pub overlap: f64,
    /// Azimuth where sector 0 starts (before overlap), radians.
    pub anchor: f64,
}

impl SectorParams {
    pub fn new(count: usize, overlap: f64) -> Self {
        SectorParams {
            count,
            overlap,
            anchor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("sector count must be at least 1"));
        }
        let limit = PI / self.count as f64;
        if !(self.overlap.is_finite()
            && self.overlap >= 0.0
            && (self.overlap < limit || self.overlap == 0.0))
        {
            return Err(Error::invalid(format!(
                "sector overlap must lie in [0, pi/K) = [0, {limit}), got {}",
                self.overlap
            )));
        }
        if !self.anchor.is_finite() {
            return Err(Error::invalid("sector anchor must be finite"));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        TAU / self.count as f64
    }

    /// Bisector azimuth of sector `k`.
    pub fn center_azimuth(&self, k: usize) -> f64 {
        self.anchor + (k as f64 + 0.5) * self.span()
    }

    /// Half-width of a sector including overlap.
    pub fn half_extent(&self) -> f64 {
        self.span() / 2.0 + self.overlap
    }

    /// Whether an azimuth falls in the half-open, wrapped interval of
    /// sector `k`.
    pub fn sector_contains(&self, k: usize, azimuth: f64) -> bool {
        let width = self.span() + 2.0 * self.overlap;
        if width >= TAU {
            return true;
        }
        let start = self.anchor + k as f64 * self.span() - self.overlap;
        (azimuth - start).rem_euclid(TAU) < width
    }
}

/// Rotation about +Z by `-theta` into a sector frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorRotation {
    theta: f64,
    cos: f64,
    sin: f64,
}

impl SectorRotation {
    pub fn new(theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        SectorRotation { theta, cos, sin }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl FrameMap for SectorRotation {
    fn point_to_frame(&self, p: &Point) -> Point {
        Point {
            x: self.cos * p.x + self.sin * p.y,
            y: -self.sin * p.x + self.cos * p.y,
            ..*p
        }
    }

    fn point_from_frame(&self, p: &Point) -> Point {
        Point {
            x: self.cos * p.x - self.sin * p.y,
            y: self.sin * p.x + self.cos * p.y,
            ..*p
        }
    }

    fn box_to_frame(&self, b: &OrientedBox) -> OrientedBox {
        OrientedBox {
            cx: self.cos * b.cx + self.sin * b.cy,
            cy: -self.sin * b.cx + self.cos * b.cy,
            yaw: wrap(b.yaw - self.theta),
            ..*b
        }
    }

    fn box_from_frame(&self, b: &OrientedBox) -> OrientedBox {
        OrientedBox {
            cx: self.cos * b.cx - self.sin * b.cy,
            cy: self.sin * b.cx + self.cos * b.cy,
            yaw: wrap(b.yaw + self.theta),
            ..*b
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sector {
    pub index: usize,
    pub rotation: SectorRotation,
    pub region: Region,
    pub point_indices: Vec<usize>,
    pub normalized_points: PointCloud,
}

/// Assigns every point to each sector whose interval holds its azimuth
/// and rotates each sector onto +X. Points at the origin go to sector 0.
/// All `K` sectors are returned, in index order, even when empty.
pub fn split_sectors(pc: &PointCloud, params: &SectorParams) -> Result<Vec<Sector>> {
    params.validate()?;
    let (xs, ys) = (pc.xs(), pc.ys());
    let azimuths: Vec<Option<f64>> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (x != 0.0 || y != 0.0).then(|| y.atan2(x)))
        .collect();
    let region = Region::Wedge {
        half_span: params.half_extent(),
    };
    Ok((0..params.count)
        .into_par_iter()
        .map(|k| {
            let rotation = SectorRotation::new(params.center_azimuth(k));
            let point_indices: Vec<usize> = azimuths
                .iter()
                .enumerate()
                .filter(|(_, a)| match a {
                    Some(a) => params.sector_contains(k, *a),
                    None => k == 0,
                })
                .map(|(i, _)| i)
                .collect();
            let mut normalized_points = PointCloud::with_capacity(point_indices.len());
            normalized_points.frame_id = pc.frame_id.clone();
            for &i in &point_indices {
                normalized_points.push(rotation.point_to_frame(&pc.get(i)));
            }
            Sector {
                index: k,
                rotation,
                region,
                point_indices,
                normalized_points,
            }
        })
        .collect())
}

/// Rotates each sector's boxes back by `+theta_k` and runs NMS.
pub fn merge_sector_detections(
    per_sector: &[(SectorRotation, PatchPrediction)],
    params: &NmsParams,
) -> ScenePrediction {
    merge_detections(per_sector, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at_azimuth(deg: f64, range: f64) -> Point {
        let a = deg.to_radians();
        Point::new(range * a.cos(), range * a.sin(), 0.2, 0.0)
    }

    #[test]
    fn single_membership_without_overlap() {
        let pc: PointCloud = [at_azimuth(10.0, 20.0)].into_iter().collect();
        let sectors = split_sectors(&pc, &SectorParams::new(4, 0.0)).unwrap();
        assert_eq!(sectors.len(), 4);
        assert_eq!(sectors[0].point_indices, vec![0]);
        assert!(sectors[1..].iter().all(|s| s.point_indices.is_empty()));
        let q = sectors[0].normalized_points.get(0);
        let az = q.y.atan2(q.x).to_degrees();
        assert!((az - (10.0 - 45.0)).abs() < 1e-9);
        assert!((q.x.hypot(q.y) - 20.0).abs() < 1e-12 && q.z == 0.2);
    }

    #[test]
    fn overlap_band_membership() {
        let pc: PointCloud = [
            at_azimuth(89.0, 5.0),
            at_azimuth(-3.0, 5.0),
            at_azimuth(180.0, 5.0),
        ]
        .into_iter()
        .collect();
        let sectors = split_sectors(&pc, &SectorParams::new(4, 5f64.to_radians())).unwrap();
        let owners = |i: usize| -> Vec<usize> {
            sectors
                .iter()
                .filter(|s| s.point_indices.contains(&i))
                .map(|s| s.index)
                .collect()
        };
        assert_eq!(owners(0), vec![0, 1]);
        assert_eq!(owners(1), vec![0, 3]);
        assert_eq!(owners(2), vec![1, 2]);
    }

    #[test]
    fn origin_goes_to_sector_zero() {
        let pc: PointCloud = [Point::new(0.0, 0.0, 1.0, 0.0)].into_iter().collect();
        let sectors = split_sectors(&pc, &SectorParams::new(8, 0.05)).unwrap();
        assert_eq!(sectors[0].point_indices, vec![0]);
        assert!(sectors[1..].iter().all(|s| s.point_indices.is_empty()));
    }

    #[test]
    fn normalized_azimuths_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pc: PointCloud = (0..20_000)
            .map(|_| {
                Point::new(
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-80.0..80.0),
                    0.0,
                    0.0,
                )
            })
            .collect();
        for k in [2usize, 4, 8, 16] {
            let params = SectorParams::new(k, 5f64.to_radians().min(PI / k as f64 * 0.5));
            let lim = params.half_extent();
            let sectors = split_sectors(&pc, &params).unwrap();
            let mut seen = vec![0usize; pc.len()];
            for s in &sectors {
                for (j, &i) in s.point_indices.iter().enumerate() {
                    seen[i] += 1;
                    let q = s.normalized_points.get(j);
                    let a = q.y.atan2(q.x);
                    assert!(a >= -lim && a <= lim);
                    let p = pc.get(i);
                    assert_eq!(q.z, p.z);
                    assert!((q.x.hypot(q.y) - p.x.hypot(p.y)).abs() < 1e-12);
                }
            }
            assert!(seen.iter().all(|&n| n == 1 || n == 2));
        }
    }

    #[test]
    fn merge_rotates_back() {
        let params = SectorParams::new(4, 0.0);
        let rot = SectorRotation::new(params.center_azimuth(1));
        let b = OrientedBox::new(10.0, 0.0, 0.5, 4.0, 2.0, 1.5, 0.0, 0.9, 0).unwrap();
        let out = merge_sector_detections(
            &[(
                rot,
                PatchPrediction {
                    boxes: vec![b],
                    point_probs: None,
                },
            )],
            &NmsParams::default(),
        );
        let r = out.boxes[0];
        let a = 135f64.to_radians();
        assert!((r.cx - 10.0 * a.cos()).abs() < 1e-12 && (r.cy - 10.0 * a.sin()).abs() < 1e-12);
        assert!((r.yaw - a).abs() < 1e-12);
    }

    #[test]
    fn duplicate_in_overlap_band_collapses() {
        let params = SectorParams::new(4, 5f64.to_radians());
        let object = OrientedBox::new(0.2, 30.0, 0.8, 4.5, 1.9, 1.6, 0.4, 0.7, 0).unwrap();
        let units: Vec<(SectorRotation, PatchPrediction)> = [0, 1]
            .iter()
            .map(|&k| {
                let rot = SectorRotation::new(params.center_azimuth(k));
                (
                    rot,
                    PatchPrediction {
                        boxes: vec![rot.box_to_frame(&object)],
                        point_probs: None,
                    },
                )
            })
            .collect();
        let out = merge_sector_detections(&units, &NmsParams::default());
        assert_eq!(out.boxes.len(), 1);
        assert!((out.boxes[0].cx - 0.2).abs() < 1e-9 && (out.boxes[0].cy - 30.0).abs() < 1e-9);
    }

    #[test]
    fn single_sector_is_half_turn() {
        let params = SectorParams::new(1, 0.0);
        assert!((params.center_azimuth(0) - PI).abs() < 1e-15);
        let pc: PointCloud = [Point::new(3.0, 4.0, 1.0, 0.5)].into_iter().collect();
        let sectors = split_sectors(&pc, &params).unwrap();
        let q = sectors[0].normalized_points.get(0);
        assert!((q.x + 3.0).abs() < 1e-12 && (q.y + 4.0).abs() < 1e-12 && q.intensity == 0.5);
    }

    #[test]
    fn invalid_params() {
        assert!(SectorParams::new(0, 0.0).validate().is_err());
        assert!(SectorParams::new(4, PI / 4.0).validate().is_err());
        assert!(SectorParams::new(4, -0.1).validate().is_err());
        assert!(SectorParams::new(8, 5f64.to_radians()).validate().is_ok());
    }
}
