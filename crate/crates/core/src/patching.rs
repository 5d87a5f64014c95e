//! Patch lattice, spatial hashing and per-patch extraction.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{normalize_point, NormTransform, OrientedBox, Point2};
use crate::scene_io::PointCloud;

pub const DEFAULT_RADIUS: f64 = 9.6;
pub const DEFAULT_STRIDE: f64 = 6.4;
pub const DEFAULT_MIN_POINTS: usize = 5;
pub const DEFAULT_NEG_RATIO: f64 = 1.0;

/// Shape of the BEV region covered by one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    Circular { radius: f64 },
    Square { side: f64 },
}

impl Layout {
    /// Half extent of the axis-aligned square enclosing the region.
    pub fn reach(&self) -> f64 {
        match *self {
            Layout::Circular { radius } => radius,
            Layout::Square { side } => side / 2.0,
        }
    }

    /// Closed membership test for an offset from the patch center.
    #[inline]
    pub fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Layout::Circular { radius } => dx * dx + dy * dy <= radius * radius,
            Layout::Square { side } => {
                let h = side / 2.0;
                dx.abs() <= h && dy.abs() <= h
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let size = match *self {
            Layout::Circular { radius } => radius,
            Layout::Square { side } => side,
        };
        if !(size.is_finite() && size > 0.0) {
            return Err(Error::invalid(format!(
                "patch size must be positive, got {size}"
            )));
        }
        Ok(())
    }
}

/// Axis-aligned BEV rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn new(min: Point2, max: Point2) -> Self {
        Bounds { min, max }
    }

    /// `[-extent, extent]` on both axes.
    pub fn square(extent: f64) -> Self {
        Bounds::new(Point2::new(-extent, -extent), Point2::new(extent, extent))
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchParams {
    pub layout: Layout,
    pub stride: f64,
    pub bounds: Bounds,
    pub min_points: usize,
    pub z_range: Option<(f64, f64)>,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            layout: Layout::Circular {
                radius: DEFAULT_RADIUS,
            },
            stride: DEFAULT_STRIDE,
            bounds: Bounds::square(150.0),
            min_points: DEFAULT_MIN_POINTS,
            z_range: None,
        }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return Err(Error::invalid(format!(
                "stride must be positive, got {}",
                self.stride
            )));
        }
        let b = &self.bounds;
        let finite = [b.min.x, b.min.y, b.max.x, b.max.y]
            .iter()
            .all(|v| v.is_finite());
        if !finite || b.min.x > b.max.x || b.min.y > b.max.y {
            return Err(Error::invalid(format!(
                "bounds {b:?} are not a valid rectangle"
            )));
        }
        if let Some((lo, hi)) = self.z_range {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::invalid(format!("z range ({lo}, {hi}) is empty")));
            }
        }
        Ok(())
    }

    fn z_ok(&self, z: f64) -> bool {
        match self.z_range {
            Some((lo, hi)) => z >= lo && z <= hi,
            None => true,
        }
    }
}

/// One patch: its frame, the scene indices it covers and the normalized
/// sub-cloud (`normalized_points[k]` is scene point `point_indices[k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: Point2,
    pub layout: Layout,
    pub transform: NormTransform,
    pub point_indices: Vec<usize>,
    pub normalized_points: PointCloud,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    /// Whether a LiDAR-frame BEV location falls inside this patch.
    pub fn covers(&self, p: Point2) -> bool {
        self.layout
            .contains(p.x - self.center.x, p.y - self.center.y)
    }
}

type Cell = (i64, i64);

/// Uniform BEV hash grid. Each point lives in exactly one cell.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell_size: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl SpatialIndex {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Cell {
        cell_of(x, y, self.cell_size)
    }

    pub fn cell(&self, key: Cell) -> &[usize] {
        self.cells.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn indexed_count(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    /// Indices of every point whose cell intersects the given rectangle.
    pub fn candidates(&self, min: Point2, max: Point2) -> Vec<usize> {
        let (i0, j0) = self.cell_of(min.x, min.y);
        let (i1, j1) = self.cell_of(max.x, max.y);
        let mut out = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                out.extend_from_slice(self.cell((i, j)));
            }
        }
        out
    }
}

#[inline]
fn cell_of(x: f64, y: f64, size: f64) -> Cell {
    ((x / size).floor() as i64, (y / size).floor() as i64)
}

pub fn build_index(pc: &PointCloud, cell_size: f64) -> Result<SpatialIndex> {
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(Error::invalid(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, (&x, &y)) in pc.xs().iter().zip(pc.ys()).enumerate() {
        cells.entry(cell_of(x, y, cell_size)).or_default().push(i);
    }
    Ok(SpatialIndex { cell_size, cells })
}

/// Lattice `{(i*d, j*d)}` clipped to the closed bounds, ordered by
/// `(y, x)` ascending. The lattice is anchored at the LiDAR origin.
pub fn enumerate_centers(params: &PatchParams) -> Vec<Point2> {
    let d = params.stride;
    let b = &params.bounds;
    let steps = |lo: f64, hi: f64| -> Vec<f64> {
        let first = (lo / d).ceil() as i64 - 1;
        let last = (hi / d).floor() as i64 + 1;
        (first..=last)
            .map(|k| k as f64 * d)
            .filter(|v| *v >= lo && *v <= hi)
            .collect()
    };
    let xs = steps(b.min.x, b.max.x);
    let ys = steps(b.min.y, b.max.y);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| Point2::new(x, y)))
        .collect()
}

pub fn extract_patch(
    pc: &PointCloud,
    index: &SpatialIndex,
    center: Point2,
    params: &PatchParams,
) -> Result<Patch> {
    let transform = NormTransform::new(center)?;
    let reach = params.layout.reach();
    let mut indices: Vec<usize> = index
        .candidates(
            Point2::new(center.x - reach, center.y - reach),
            Point2::new(center.x + reach, center.y + reach),
        )
        .into_iter()
        .filter(|&i| {
            params
                .layout
                .contains(pc.xs()[i] - center.x, pc.ys()[i] - center.y)
                && params.z_ok(pc.zs()[i])
        })
        .collect();
    indices.sort_unstable();

    let mut normalized_points = PointCloud::with_capacity(indices.len());
    normalized_points.frame_id = pc.frame_id.clone();
    for &i in &indices {
        normalized_points.push(normalize_point(&transform, &pc.get(i)));
    }
    Ok(Patch {
        center,
        layout: params.layout,
        transform,
        point_indices: indices,
        normalized_points,
    })
}

/// Extracts every lattice patch and drops those with fewer than
/// `min_points` points. Output order follows [`enumerate_centers`].
pub fn split_scene(pc: &PointCloud, params: &PatchParams) -> Result<Vec<Patch>> {
    params.validate()?;
    let index = build_index(pc, params.layout.reach())?;
    let centers = enumerate_centers(params);
    let patches: Vec<Option<Patch>> = centers
        .par_iter()
        .map(|&c| {
            extract_patch(pc, &index, c, params)
                .map(|p| (p.len() >= params.min_points).then_some(p))
        })
        .collect::<Result<_>>()?;
    Ok(patches.into_iter().flatten().collect())
}

/// Keeps every patch holding at least one GT box center and a seeded
/// uniform sample of `round(neg_ratio * foreground)` background patches.
/// Input order is preserved.
pub fn sample_positive(
    patches: Vec<Patch>,
    gt_boxes: &[OrientedBox],
    neg_ratio: f64,
    seed: u64,
) -> Result<Vec<Patch>> {
    let foreground: Vec<bool> = patches
        .iter()
        .map(|p| gt_boxes.iter().any(|b| p.covers(b.center_bev())))
        .collect();
    let keep = positive_mask(&foreground, neg_ratio, seed)?;
    Ok(patches
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect())
}

/// Keep-mask for positive sampling: every foreground entry plus
/// `round(neg_ratio * #foreground)` background entries drawn without
/// replacement.
pub fn positive_mask(foreground: &[bool], neg_ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if !(neg_ratio.is_finite() && neg_ratio >= 0.0) {
        return Err(Error::invalid(format!(
            "neg_ratio must be >= 0, got {neg_ratio}"
        )));
    }
    let n_fg = foreground.iter().filter(|f| **f).count();
    let background: Vec<usize> = (0..foreground.len()).filter(|&i| !foreground[i]).collect();
    let wanted = ((neg_ratio * n_fg as f64).round() as usize).min(background.len());

    let mut keep = foreground.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in index::sample(&mut rng, background.len(), wanted) {
        keep[background[k]] = true;
    }
    Ok(keep)
}
