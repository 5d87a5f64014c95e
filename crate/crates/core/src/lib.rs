//! Azimuth normalization for LiDAR point clouds.
//!
//! A scene is split into overlapping BEV patches on a lattice anchored at
//! the sensor. Each patch is translated to its center and rotated so that
//! its radial direction points along +X, which removes the azimuth of the
//! patch from everything a per-patch perceiver sees. Patch predictions are
//! mapped back to the LiDAR frame and merged: boxes through rotated-IoU
//! NMS, per-point class probabilities by averaging.
//!
//! Module map:
//! * [`geom`]: points, angles, boxes and the normalization transform.
//! * [`scene_io`]: binary/ASCII clouds and JSON labels/predictions.
//! * [`patching`]: patch lattice, spatial index, extraction and selection.
//! * [`perceive`]: the perceiver contract and reference perceivers.
//! * [`merge`]: rotated IoU, NMS and segmentation averaging.
//! * [`sectorial`]: the coarser K-sector variant.
//! * [`pipeline`]: split, perceive and merge in one call.
//! * [`synth`]: seeded synthetic scenes and metrics.

pub mod error;
pub mod geom;
pub mod merge;
pub mod patching;
pub mod perceive;
pub mod pipeline;
pub mod scene_io;
pub mod sectorial;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{
    azimuth_of, denormalize_box, denormalize_point, normalize_box, normalize_point, wrap_angle,
    Angle, FrameMap, NormTransform, OrientedBox, Point, Point2,
};
pub use merge::{
    box_corners_bev, merge_detections, merge_segmentation, nms, rotated_iou_bev, ConvexPolygon,
    NmsParams, ScenePrediction, UNKNOWN_LABEL,
};
pub use patching::{
    build_index, enumerate_centers, extract_patch, positive_mask, sample_positive, split_scene,
    Bounds, Layout, Patch, PatchParams, SpatialIndex,
};
pub use perceive::{
    cluster_detect, knn_segment, oracle_detect, Capabilities, ClusterDetector, ClusterParams,
    KnnSegmenter, OracleDetector, PatchPrediction, Perceiver, PerceptionInput, ProbRows, Region,
};
pub use pipeline::{RunStats, Selection, SplitMode, Unit, UnitFrame};
pub use scene_io::{LabeledScene, PointCloud};
pub use sectorial::{merge_sector_detections, split_sectors, Sector, SectorParams, SectorRotation};
pub use synth::{bench_throughput, gen_scene, recall_precision, MetricReport, SceneSpec};
