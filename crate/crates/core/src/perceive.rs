//! Per-patch perception contract and the deterministic reference perceivers.
//!
//! A perceiver only ever sees frame-local data: the normalized points, the
//! region the patch covers in its own frame, and (for the oracle and the
//! self-referencing segmenter) annotations already expressed in that frame.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::patching::Layout;
use crate::scene_io::PointCloud;

/// Row-major per-point class probabilities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbRows {
    n_classes: usize,
    data: Vec<f64>,
}

impl ProbRows {
    pub fn new(n_classes: usize) -> Self {
        ProbRows {
            n_classes,
            data: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, n_classes: usize) -> Self {
        ProbRows {
            n_classes,
            data: vec![0.0; rows * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.n_classes).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n_classes, "row width");
        self.data.extend_from_slice(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_classes.max(1))
    }
}

/// Output of one perceiver call, in the patch frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchPrediction {
    pub boxes: Vec<OrientedBox>,
    pub point_probs: Option<ProbRows>,
}

/// The BEV footprint of a processing unit, expressed in its own frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    /// Patch footprint. `theta` is the patch rotation; it only matters for
    /// square layouts, whose sides stay parallel to the LiDAR axes.
    Patch { layout: Layout, theta: f64 },
    /// Angular sector `[-half_span, half_span)` around +X.
    Wedge { half_span: f64 },
}

impl Region {
    pub fn centered(layout: Layout) -> Self {
        Region::Patch { layout, theta: 0.0 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Patch {
                layout: layout @ Layout::Circular { .. },
                ..
            } => layout.contains(x, y),
            Region::Patch { layout, theta } => {
                let (s, c) = theta.sin_cos();
                layout.contains(c * x - s * y, s * x + c * y)
            }
            Region::Wedge { half_span } => {
                if x == 0.0 && y == 0.0 {
                    return true;
                }
                let a = y.atan2(x);
                a >= -half_span && a < half_span
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub detects: bool,
    pub segments: bool,
}

/// Everything a perceiver may look at for one unit.
#[derive(Debug, Clone, Copy)]
pub struct PerceptionInput<'a> {
    pub points: &'a PointCloud,
    pub region: Region,
    /// Ground-truth boxes already mapped into this frame.
    pub gt_boxes: &'a [OrientedBox],
    /// Ground-truth labels aligned with `points`.
    pub point_labels: Option<&'a [i32]>,
}

impl<'a> PerceptionInput<'a> {
    pub fn points_only(points: &'a PointCloud, region: Region) -> Self {
        PerceptionInput {
            points,
            region,
            gt_boxes: &[],
            point_labels: None,
        }
    }
}

/// A deterministic, frame-local mapping from one unit to its predictions.
/// Implementations must be pure: the pipeline calls them concurrently.
pub trait Perceiver: Send + Sync {
    fn capabilities(&self) -> Capabilities;
    fn perceive(&self, input: &PerceptionInput<'_>) -> Result<PatchPrediction>;
}

/// GT boxes whose centers lie inside `region`, each with score 1.
pub fn oracle_detect(region: &Region, gt_in_frame: &[OrientedBox]) -> PatchPrediction {
    PatchPrediction {
        boxes: gt_in_frame
            .iter()
            .filter(|b| region.contains(b.cx, b.cy))
            .map(|b| OrientedBox { score: 1.0, ..*b })
            .collect(),
        point_probs: None,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleDetector;

impl Perceiver for OracleDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            detects: true,
            segments: false,
        }
    }

    fn perceive(&self, input: &PerceptionInput<'_>) -> Result<PatchPrediction> {
        Ok(oracle_detect(&input.region, input.gt_boxes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub link_radius: f64,
    pub min_cluster: usize,
    pub default_height: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            link_radius: 0.8,
            min_cluster: 5,
            default_height: 1.5,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.link_radius.is_finite() && self.link_radius > 0.0) {
            return Err(Error::invalid(format!(
                "link radius must be positive, got {}",
                self.link_radius
            )));
        }
        if self.min_cluster < 1 {
            return Err(Error::invalid("min_cluster must be at least 1"));
        }
        if !(self.default_height.is_finite() && self.default_height > 0.0) {
            return Err(Error::invalid("default height must be positive"));
        }
        Ok(())
    }
}

/// Disjoint-set forest with path halving and union by rank.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Single-link BEV components: points closer than `link_radius` (closed)
/// are connected. Clusters come out ordered by their smallest member
/// index and each cluster's members are ascending.
pub fn single_link_clusters(points: &PointCloud, link_radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let (xs, ys) = (points.xs(), points.ys());
    let key = |i: usize| {
        (
            (xs[i] / link_radius).floor() as i64,
            (ys[i] / link_radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for i in 0..n {
        grid.entry(key(i)).or_default().push(i);
    }
    let r2 = link_radius * link_radius;
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        let (ci, cj) = key(i);
        for dj in -1..=1 {
            for di in -1..=1 {
                let Some(cell) = grid.get(&(ci + di, cj + dj)) else {
                    continue;
                };
                for &j in cell {
                    if j <= i {
                        continue;
                    }
                    let dx = xs[i] - xs[j];
                    let dy = ys[i] - ys[j];
                    if dx * dx + dy * dy <= r2 {
                        uf.union(i, j);
                    }
                }
            }
        }
    }
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = uf.find(i);
        let k = *slot.entry(root).or_insert_with(|| {
            clusters.push(Vec::new());
            clusters.len() - 1
        });
        clusters[k].push(i);
    }
    clusters
}

const MIN_EXTENT: f64 = 1e-3;
const FLAT_EXTENT: f64 = 0.1;

/// Principal BEV axis of a point set, in `(-pi/2, pi/2]`. Returns 0 when
/// the covariance is isotropic (including a single point).
pub fn principal_yaw(points: &PointCloud, members: &[usize]) -> f64 {
    let n = members.len() as f64;
    let (xs, ys) = (points.xs(), points.ys());
    let mx = members.iter().map(|&i| xs[i]).sum::<f64>() / n;
    let my = members.iter().map(|&i| ys[i]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &i in members {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let trace = sxx + syy;
    let gap = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    if trace <= 0.0 || gap <= 1e-12 * trace {
        return 0.0;
    }
    0.5 * (2.0 * sxy).atan2(sxx - syy)
}

fn fit_box(points: &PointCloud, members: &[usize], params: &ClusterParams) -> OrientedBox {
    let yaw = principal_yaw(points, members);
    let (s, c) = yaw.sin_cos();
    let (xs, ys, zs) = (points.xs(), points.ys(), points.zs());
    let n = members.len() as f64;
    let mx = members.iter().map(|&i| xs[i]).sum::<f64>() / n;
    let my = members.iter().map(|&i| ys[i]).sum::<f64>() / n;
    let (mut u0, mut u1, mut v0, mut v1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    let (mut z0, mut z1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in members {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
        z0 = z0.min(zs[i]);
        z1 = z1.max(zs[i]);
    }
    let (uc, vc) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
    let height = if z1 - z0 < FLAT_EXTENT {
        params.default_height
    } else {
        z1 - z0
    };
    OrientedBox {
        cx: mx + c * uc - s * vc,
        cy: my + s * uc + c * vc,
        cz: z0 + height / 2.0,
        length: (u1 - u0).max(MIN_EXTENT),
        width: (v1 - v0).max(MIN_EXTENT),
        height,
        yaw,
        score: (members.len() as f64 / 100.0).min(1.0),
        class_id: 0,
    }
}

/// Single-link clustering followed by a principal-axis rectangle fit per
/// cluster.
pub fn cluster_detect(points: &PointCloud, params: &ClusterParams) -> Result<PatchPrediction> {
    params.validate()?;
    let boxes = single_link_clusters(points, params.link_radius)
        .into_iter()
        .filter(|c| c.len() >= params.min_cluster)
        .map(|c| fit_box(points, &c, params))
        .collect();
    Ok(PatchPrediction {
        boxes,
        point_probs: None,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClusterDetector {
    pub params: ClusterParams,
}

impl Perceiver for ClusterDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            detects: true,
            segments: false,
        }
    }

    fn perceive(&self, input: &PerceptionInput<'_>) -> Result<PatchPrediction> {
        cluster_detect(input.points, &self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact k-nearest-neighbour search over a BEV bucket grid. Distances are
/// 3D; equal distances resolve to the lower reference index.
struct KnnGrid<'a> {
    refs: &'a PointCloud,
    cell: f64,
    origin: (f64, f64),
    dims: (i64, i64),
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> KnnGrid<'a> {
    fn new(refs: &'a PointCloud) -> Self {
        let (xs, ys) = (refs.xs(), refs.ys());
        let fold = |v: &[f64]| {
            v.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                })
        };
        let (x0, x1) = fold(xs);
        let (y0, y1) = fold(ys);
        let area = ((x1 - x0) * (y1 - y0)).max(1e-6);
        let cell = (4.0 * area / refs.len() as f64).sqrt().max(1e-3);
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for i in 0..refs.len() {
            let key = (
                ((xs[i] - x0) / cell).floor() as i64,
                ((ys[i] - y0) / cell).floor() as i64,
            );
            buckets.entry(key).or_default().push(i);
        }
        let dims = (
            ((x1 - x0) / cell).floor() as i64 + 1,
            ((y1 - y0) / cell).floor() as i64 + 1,
        );
        KnnGrid {
            refs,
            cell,
            origin: (x0, y0),
            dims,
            buckets,
        }
    }

    fn nearest(&self, x: f64, y: f64, z: f64, k: usize) -> Vec<usize> {
        let qi = ((x - self.origin.0) / self.cell).floor() as i64;
        let qj = ((y - self.origin.1) / self.cell).floor() as i64;
        let (xs, ys, zs) = (self.refs.xs(), self.refs.ys(), self.refs.zs());
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let visit = |i: usize, heap: &mut BinaryHeap<Candidate>| {
            let d2 = (xs[i] - x).powi(2) + (ys[i] - y).powi(2) + (zs[i] - z).powi(2);
            let cand = Candidate { d2, index: i };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap holds k items") {
                heap.pop();
                heap.push(cand);
            }
        };
        // Rings beyond this radius cannot contain any bucket.
        let max_ring = [qi, self.dims.0 - 1 - qi, qj, self.dims.1 - 1 - qj]
            .iter()
            .map(|v| v.abs())
            .max()
            .unwrap_or(0)
            + 1;
        let mut ring = 0i64;
        loop {
            for j in (qj - ring)..=(qj + ring) {
                for i in (qi - ring)..=(qi + ring) {
                    if (i - qi).abs() != ring && (j - qj).abs() != ring {
                        continue;
                    }
                    if let Some(bucket) = self.buckets.get(&(i, j)) {
                        for &idx in bucket {
                            visit(idx, &mut heap);
                        }
                    }
                }
            }
            // Anything unvisited is farther than ring * cell in BEV alone.
            let bound = ring as f64 * self.cell;
            let done =
                heap.len() == k && heap.peek().map(|c| c.d2 < bound * bound).unwrap_or(false);
            if done || ring > max_ring {
                break;
            }
            ring += 1;
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.index).collect()
    }
}

/// For each point, the class histogram of its `k` nearest labelled
/// references divided by the number of neighbours used.
pub fn knn_segment(
    points: &PointCloud,
    refs: &PointCloud,
    ref_labels: &[i32],
    k: usize,
    n_classes: usize,
) -> Result<PatchPrediction> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n_classes == 0 {
        return Err(Error::invalid("n_classes must be at least 1"));
    }
    if refs.len() != ref_labels.len() {
        return Err(Error::Contract(format!(
            "{} reference labels for {} reference points",
            ref_labels.len(),
            refs.len()
        )));
    }
    if let Some(bad) = ref_labels
        .iter()
        .find(|&&l| l < 0 || l as usize >= n_classes)
    {
        return Err(Error::Contract(format!(
            "reference label {bad} outside 0..{n_classes}"
        )));
    }
    let mut probs = ProbRows::new(n_classes);
    if points.is_empty() {
        return Ok(PatchPrediction {
            boxes: Vec::new(),
            point_probs: Some(probs),
        });
    }
    if refs.is_empty() {
        return Err(Error::invalid(
            "knn segmentation needs at least one reference point",
        ));
    }
    let grid = KnnGrid::new(refs);
    let k = k.min(refs.len());
    let mut row = vec![0.0; n_classes];
    for p in points.iter() {
        row.iter_mut().for_each(|v| *v = 0.0);
        for idx in grid.nearest(p.x, p.y, p.z, k) {
            row[ref_labels[idx] as usize] += 1.0;
        }
        row.iter_mut().for_each(|v| *v /= k as f64);
        probs.push_row(&row);
    }
    Ok(PatchPrediction {
        boxes: Vec::new(),
        point_probs: Some(probs),
    })
}

/// k-NN segmenter that uses the unit's own labelled points as references.
#[derive(Debug, Clone, Copy)]
pub struct KnnSegmenter {
    pub k: usize,
    pub n_classes: usize,
}

impl Perceiver for KnnSegmenter {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            detects: false,
            segments: true,
        }
    }

    fn perceive(&self, input: &PerceptionInput<'_>) -> Result<PatchPrediction> {
        let labels = input.point_labels.ok_or_else(|| {
            Error::Contract("knn segmenter needs labelled reference points".into())
        })?;
        knn_segment(input.points, input.points, labels, self.k, self.n_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{axis_distance, Point, Point2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn gt(cx: f64, cy: f64) -> OrientedBox {
        OrientedBox::new(cx, cy, 0.5, 4.0, 2.0, 1.5, 0.3, 0.4, 1).unwrap()
    }

    #[test]
    fn oracle_keeps_boxes_inside_region() {
        let region = Region::centered(Layout::Circular { radius: 9.6 });
        let out = oracle_detect(&region, &[gt(0.0, 0.0), gt(10.6, 0.0), gt(9.6, 0.0)]);
        assert_eq!(out.boxes.len(), 2);
        assert!(out.boxes.iter().all(|b| b.score == 1.0));
        assert_eq!(out.boxes[0].cx, 0.0);
        assert_eq!(out.boxes[1].cx, 9.6);
    }

    #[test]
    fn rotated_square_region_matches_lidar_footprint() {
        // square of side 4 centred at (0, 10); theta = pi/2
        let region = Region::Patch {
            layout: Layout::Square { side: 4.0 },
            theta: PI / 2.0,
        };
        // LiDAR offset (1.9, 0) maps to patch frame (0, -1.9)
        assert!(region.contains(0.0, -1.9));
        assert!(region.contains(1.9, 1.9));
        assert!(!region.contains(2.1, 0.0));
    }

    fn blob(rng: &mut ChaCha8Rng, cx: f64, cy: f64, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| {
                Point::new(
                    cx + rng.random_range(-0.3..0.3),
                    cy + rng.random_range(-0.3..0.3),
                    rng.random_range(0.0..1.5),
                    0.0,
                )
            })
            .collect()
    }

    #[test]
    fn two_separate_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = blob(&mut rng, 0.0, 0.0, 50);
        pts.extend(blob(&mut rng, 5.0, 0.0, 50));
        let pc: PointCloud = pts.into_iter().collect();
        let params = ClusterParams {
            link_radius: 0.5,
            min_cluster: 5,
            default_height: 1.5,
        };
        let out = cluster_detect(&pc, &params).unwrap();
        assert_eq!(out.boxes.len(), 2);
        assert!(out.boxes[0].cx < out.boxes[1].cx);
        assert!(out.boxes.iter().all(|b| (b.score - 0.5).abs() < 1e-15));
    }

    fn grid_4x1() -> Vec<Point> {
        let mut pts = Vec::new();
        for i in 0..=40 {
            for j in 0..=10 {
                pts.push(Point::new(
                    -2.0 + 0.1 * i as f64,
                    -0.5 + 0.1 * j as f64,
                    0.0,
                    0.0,
                ));
            }
        }
        pts
    }

    #[test]
    fn axis_aligned_grid_box() {
        let pc: PointCloud = grid_4x1().into_iter().collect();
        let out = cluster_detect(&pc, &ClusterParams::default()).unwrap();
        assert_eq!(out.boxes.len(), 1);
        let b = out.boxes[0];
        assert!(b.yaw.abs() < 1e-6);
        assert!((b.length - 4.0).abs() < 1e-6 && (b.width - 1.0).abs() < 1e-6);
        assert!(b.cx.abs() < 1e-6 && b.cy.abs() < 1e-6);
        // flat cluster: default height sits on the lowest point
        assert_eq!(b.height, 1.5);
        assert!((b.cz - 0.75).abs() < 1e-12);
        assert_eq!(b.score, 1.0);
    }

    #[test]
    fn rotated_grid_box_rotates() {
        let angle = 30f64.to_radians();
        let pts: Vec<Point> = grid_4x1()
            .into_iter()
            .map(|p| {
                let q = Point2::new(p.x, p.y).rotated(angle);
                Point::new(q.x + 3.0, q.y - 1.0, p.z, 0.0)
            })
            .collect();
        let pc: PointCloud = pts.into_iter().collect();
        let b = cluster_detect(&pc, &ClusterParams::default())
            .unwrap()
            .boxes[0];
        assert!(axis_distance(b.yaw, angle) < 1e-6);
        assert!((b.length - 4.0).abs() < 1e-6 && (b.width - 1.0).abs() < 1e-6);
        assert!((b.cx - 3.0).abs() < 1e-6 && (b.cy + 1.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_clusters() {
        let pc: PointCloud = [Point::new(1.0, 2.0, 0.0, 0.0)].into_iter().collect();
        let params = ClusterParams {
            min_cluster: 1,
            ..Default::default()
        };
        let b = cluster_detect(&pc, &params).unwrap().boxes[0];
        assert_eq!(b.yaw, 0.0);
        assert!(b.length > 0.0 && b.width > 0.0);
        assert_eq!((b.cx, b.cy), (1.0, 2.0));
        // square symmetric cloud: isotropic covariance
        let pc: PointCloud = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
            .iter()
            .map(|&(x, y)| Point::new(x * 0.2, y * 0.2, 0.0, 0.0))
            .collect();
        assert_eq!(cluster_detect(&pc, &params).unwrap().boxes[0].yaw, 0.0);
    }

    #[test]
    fn box_contains_cluster_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut pts = Vec::new();
            for _ in 0..4 {
                let (cx, cy) = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
                let n = rng.random_range(3..40);
                pts.extend(blob(&mut rng, cx, cy, n));
            }
            let pc: PointCloud = pts.iter().copied().collect();
            let params = ClusterParams::default();
            let out = cluster_detect(&pc, &params).unwrap();
            for (c, b) in single_link_clusters(&pc, params.link_radius)
                .iter()
                .filter(|c| c.len() >= params.min_cluster)
                .zip(&out.boxes)
            {
                let (s, co) = b.yaw.sin_cos();
                for &i in c {
                    let p = pc.get(i);
                    let (dx, dy) = (p.x - b.cx, p.y - b.cy);
                    assert!((co * dx + s * dy).abs() <= b.length / 2.0 + 1e-9);
                    assert!((-s * dx + co * dy).abs() <= b.width / 2.0 + 1e-9);
                }
            }
            let mut shuffled = pts.clone();
            shuffled.reverse();
            let pc2: PointCloud = shuffled.into_iter().collect();
            let mut a: Vec<_> = out
                .boxes
                .iter()
                .map(|b| (b.cx, b.cy, b.length, b.width))
                .collect();
            let mut b: Vec<_> = cluster_detect(&pc2, &params)
                .unwrap()
                .boxes
                .iter()
                .map(|b| (b.cx, b.cy, b.length, b.width))
                .collect();
            assert_eq!(a.len(), b.len());
            a.sort_by(|x, y| x.0.total_cmp(&y.0));
            b.sort_by(|x, y| x.0.total_cmp(&y.0));
            for (x, y) in a.iter().zip(&b) {
                assert!((x.0 - y.0).abs() < 1e-9 && (x.1 - y.1).abs() < 1e-9);
                assert!((x.2 - y.2).abs() < 1e-9 && (x.3 - y.3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clustering_matches_all_pairs_union_find() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pc: PointCloud = (0..300)
                .map(|_| {
                    Point::new(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        0.0,
                        0.0,
                    )
                })
                .collect();
            let r = 0.7;
            let mut uf = UnionFind::new(pc.len());
            for i in 0..pc.len() {
                for j in i + 1..pc.len() {
                    let (a, b) = (pc.get(i), pc.get(j));
                    if (a.x - b.x).powi(2) + (a.y - b.y).powi(2) <= r * r {
                        uf.union(i, j);
                    }
                }
            }
            let clusters = single_link_clusters(&pc, r);
            for c in &clusters {
                let root = uf.find(c[0]);
                assert!(c.iter().all(|&i| uf.find(i) == root));
            }
            let roots: std::collections::HashSet<usize> =
                (0..pc.len()).map(|i| uf.find(i)).collect();
            assert_eq!(roots.len(), clusters.len());
            assert!(clusters.windows(2).all(|w| w[0][0] < w[1][0]));
        }
    }

    #[test]
    fn knn_examples() {
        let pts: PointCloud = [
            Point::new(0.0, 0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0, 0.0),
            Point::new(5.0, 5.0, 1.0, 0.0),
        ]
        .into_iter()
        .collect();
        let out = knn_segment(&pts, &pts, &[2, 0, 1], 1, 3).unwrap();
        let rows = out.point_probs.unwrap();
        assert_eq!(rows.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(rows.row(1), &[1.0, 0.0, 0.0]);
        assert_eq!(rows.row(2), &[0.0, 1.0, 0.0]);

        let refs: PointCloud = [
            Point::new(-1.0, 0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0, 0.0),
        ]
        .into_iter()
        .collect();
        let q: PointCloud = [Point::new(0.0, 0.0, 0.0, 0.0)].into_iter().collect();
        let rows = knn_segment(&q, &refs, &[0, 1], 2, 2)
            .unwrap()
            .point_probs
            .unwrap();
        assert_eq!(rows.row(0), &[0.5, 0.5]);
        // tie at k = 1 resolves to the lower reference index
        let rows = knn_segment(&q, &refs, &[0, 1], 1, 2)
            .unwrap()
            .point_probs
            .unwrap();
        assert_eq!(rows.row(0), &[1.0, 0.0]);

        assert!(knn_segment(&q, &refs, &[0, 2], 1, 2).is_err());
        assert!(knn_segment(&q, &refs, &[0], 1, 2).is_err());
        assert!(knn_segment(&q, &refs, &[0, 1], 0, 2).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let spread = if trial % 2 == 0 { 10.0 } else { 0.5 };
            let refs: PointCloud = (0..400)
                .map(|_| {
                    // coarse lattice values produce many exact distance ties
                    let q = |v: f64| (v * 4.0).round() / 4.0;
                    Point::new(
                        q(rng.random_range(-spread..spread)),
                        q(rng.random_range(-spread..spread)),
                        q(rng.random_range(-1.0..1.0)),
                        0.0,
                    )
                })
                .collect();
            let labels: Vec<i32> = (0..refs.len()).map(|_| rng.random_range(0..4)).collect();
            let queries: PointCloud = (0..100)
                .map(|_| {
                    Point::new(
                        rng.random_range(-12.0..12.0),
                        rng.random_range(-12.0..12.0),
                        rng.random_range(-1.0..1.0),
                        0.0,
                    )
                })
                .collect();
            for k in [1, 3, 8] {
                let rows = knn_segment(&queries, &refs, &labels, k, 4)
                    .unwrap()
                    .point_probs
                    .unwrap();
                for (qi, q) in queries.iter().enumerate() {
                    let mut all: Vec<(f64, usize)> = refs
                        .iter()
                        .enumerate()
                        .map(|(i, r)| {
                            (
                                (r.x - q.x).powi(2) + (r.y - q.y).powi(2) + (r.z - q.z).powi(2),
                                i,
                            )
                        })
                        .collect();
                    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let mut expected = [0.0; 4];
                    for &(_, i) in &all[..k] {
                        expected[labels[i] as usize] += 1.0 / k as f64;
                    }
                    for (a, b) in rows.row(qi).iter().zip(&expected) {
                        assert!((a - b).abs() < 1e-12);
                    }
                    assert!((rows.row(qi).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
