//! Coordinate types and the per-patch normalization transform.
//!
//! A patch frame is obtained from the LiDAR frame by translating the patch
//! center to the origin and then rotating by `-theta` about +Z, where
//! `theta` is the azimuth of the center. The outward radial direction at the
//! center therefore maps onto +X. The vertical axis is never translated.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A LiDAR return. Coordinates are meters, right-handed, z up.
/// Intensity is carried through every transform untouched.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn bev(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// A point in the bird's-eye-view plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotates counter-clockwise about the origin.
    pub fn rotated(&self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// An angle in radians, canonically wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Angle(f64);

impl Angle {
    pub fn radians(self) -> f64 {
        self.0
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

/// Wraps a finite angle into `(-pi, pi]`. Values already in range are
/// returned unchanged, which makes the operation idempotent bit for bit.
#[inline]
pub(crate) fn wrap(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        let w = r - TAU;
        if w > -PI {
            w
        } else {
            PI
        }
    } else {
        r
    }
}

pub fn wrap_angle(a: f64) -> Result<Angle> {
    if !a.is_finite() {
        return Err(Error::invalid(format!("angle {a} is not finite")));
    }
    Ok(Angle(wrap(a)))
}

/// Azimuth of a BEV location measured from +X. The origin has azimuth 0.
pub fn azimuth_of(center: Point2) -> Result<Angle> {
    if !center.x.is_finite() || !center.y.is_finite() {
        return Err(Error::invalid(format!(
            "azimuth of non-finite location ({}, {})",
            center.x, center.y
        )));
    }
    if center.x == 0.0 && center.y == 0.0 {
        return Ok(Angle(0.0));
    }
    Ok(Angle(wrap(center.y.atan2(center.x))))
}

/// BEV-oriented 3D box. `yaw` is the heading of the length axis measured
/// from +X of whatever frame the box is expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub score: f64,
    pub class_id: u32,
}

impl OrientedBox {
    /// Builds a box, wrapping `yaw` and checking dimensions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        length: f64,
        width: f64,
        height: f64,
        yaw: f64,
        score: f64,
        class_id: u32,
    ) -> Result<Self> {
        let b = OrientedBox {
            cx,
            cy,
            cz,
            length,
            width,
            height,
            yaw: wrap_angle(yaw)?.radians(),
            score,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.cx,
            self.cy,
            self.cz,
            self.length,
            self.width,
            self.height,
            self.yaw,
            self.score,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("box has non-finite fields"));
        }
        if self.length <= 0.0 || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::invalid(format!(
                "box dimensions must be positive, got {} x {} x {}",
                self.length, self.width, self.height
            )));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::invalid(format!("box yaw {} not wrapped", self.yaw)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!(
                "box score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    pub fn center_bev(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn bev_area(&self) -> f64 {
        self.length * self.width
    }

    /// Rigid BEV rotation about the LiDAR origin.
    pub fn rotated_about_origin(&self, angle: f64) -> OrientedBox {
        let c = self.center_bev().rotated(angle);
        OrientedBox {
            cx: c.x,
            cy: c.y,
            yaw: wrap(self.yaw + angle),
            ..*self
        }
    }
}

/// Mapping between the LiDAR frame and a local processing frame.
pub trait FrameMap {
    fn point_to_frame(&self, p: &Point) -> Point;
    fn point_from_frame(&self, p: &Point) -> Point;
    fn box_to_frame(&self, b: &OrientedBox) -> OrientedBox;
    fn box_from_frame(&self, b: &OrientedBox) -> OrientedBox;
}

/// The rigid transform that takes the LiDAR frame into a patch frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormTransform {
    center: Point2,
    theta: Angle,
    cos: f64,
    sin: f64,
}

impl NormTransform {
    pub fn new(center: Point2) -> Result<Self> {
        let theta = azimuth_of(center)?;
        let (sin, cos) = theta.radians().sin_cos();
        Ok(NormTransform {
            center,
            theta,
            cos,
            sin,
        })
    }

    pub fn center(&self) -> Point2 {
        self.center
    }

    pub fn theta(&self) -> Angle {
        self.theta
    }

    #[inline]
    fn forward_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.center.x;
        let dy = y - self.center.y;
        (
            self.cos * dx + self.sin * dy,
            -self.sin * dx + self.cos * dy,
        )
    }

    #[inline]
    fn inverse_xy(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.cos * x - self.sin * y + self.center.x,
            self.sin * x + self.cos * y + self.center.y,
        )
    }
}

impl FrameMap for NormTransform {
    fn point_to_frame(&self, p: &Point) -> Point {
        normalize_point(self, p)
    }

    fn point_from_frame(&self, p: &Point) -> Point {
        denormalize_point(self, p)
    }

    fn box_to_frame(&self, b: &OrientedBox) -> OrientedBox {
        normalize_box(self, b)
    }

    fn box_from_frame(&self, b: &OrientedBox) -> OrientedBox {
        denormalize_box(self, b)
    }
}

pub fn normalize_point(t: &NormTransform, p: &Point) -> Point {
    let (x, y) = t.forward_xy(p.x, p.y);
    Point { x, y, ..*p }
}

pub fn denormalize_point(t: &NormTransform, p: &Point) -> Point {
    let (x, y) = t.inverse_xy(p.x, p.y);
    Point { x, y, ..*p }
}

pub fn normalize_box(t: &NormTransform, b: &OrientedBox) -> OrientedBox {
    let (cx, cy) = t.forward_xy(b.cx, b.cy);
    OrientedBox {
        cx,
        cy,
        yaw: wrap(b.yaw - t.theta.radians()),
        ..*b
    }
}

pub fn denormalize_box(t: &NormTransform, b: &OrientedBox) -> OrientedBox {
    let (cx, cy) = t.inverse_xy(b.cx, b.cy);
    OrientedBox {
        cx,
        cy,
        yaw: wrap(b.yaw + t.theta.radians()),
        ..*b
    }
}

/// Smallest absolute difference between two angles, in `[0, pi]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap(a - b).abs()
}

/// Difference between two axis orientations, treating headings that differ
/// by pi as the same axis. Result is in `[0, pi/2]`.
pub fn axis_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}
