//! Static BEV rendering to SVG.

use std::fmt::Write as _;

use azinorm::patching::split_scene;
use azinorm::{box_corners_bev, Layout, OrientedBox, Point2, PointCloud, Result, SplitMode};

const CANVAS_PX: f64 = 1000.0;

pub enum Overlay {
    Patches(Vec<(Point2, Layout)>),
    /// Sector boundary azimuths.
    Sectors(Vec<f64>),
}

impl Overlay {
    pub fn new(cloud: &PointCloud, mode: &SplitMode) -> Result<Self> {
        Ok(match mode {
            SplitMode::Patches(params) => Overlay::Patches(
                split_scene(cloud, params)?
                    .into_iter()
                    .map(|p| (p.center, p.layout))
                    .collect(),
            ),
            SplitMode::Sectors(params) => {
                params.validate()?;
                Overlay::Sectors(
                    (0..params.count)
                        .map(|k| params.anchor + k as f64 * params.span())
                        .collect(),
                )
            }
        })
    }
}

fn view_extent(cloud: &PointCloud, boxes: &[&[OrientedBox]], overlay: Option<&Overlay>) -> f64 {
    let mut m: f64 = 10.0;
    for p in cloud.iter() {
        if p.x.is_finite() && p.y.is_finite() {
            m = m.max(p.x.abs()).max(p.y.abs());
        }
    }
    for b in boxes.iter().flat_map(|s| s.iter()) {
        for c in box_corners_bev(b).vertices {
            m = m.max(c.x.abs()).max(c.y.abs());
        }
    }
    if let Some(Overlay::Patches(patches)) = overlay {
        for (c, layout) in patches {
            m = m
                .max(c.x.abs() + layout.reach())
                .max(c.y.abs() + layout.reach());
        }
    }
    (m / 10.0).ceil() * 10.0
}

fn polygon(out: &mut String, b: &OrientedBox, class: &str) {
    let pts: Vec<String> = box_corners_bev(b)
        .vertices
        .iter()
        .map(|c| format!("{:.3},{:.3}", c.x, c.y))
        .collect();
    let _ = writeln!(
        out,
        r#"<polygon class="{class}" points="{}"/>"#,
        pts.join(" ")
    );
}

/// Renders in metres with +Y up. Points are dots; GT boxes are solid
/// green, predictions dashed red.
pub fn svg(
    cloud: &PointCloud,
    gt: &[OrientedBox],
    pred: &[OrientedBox],
    overlay: Option<&Overlay>,
) -> String {
    let e = view_extent(cloud, &[gt, pred], overlay);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_PX}" height="{CANVAS_PX}" viewBox="{:.3} {:.3} {:.3} {:.3}">"#,
        -e,
        -e,
        2.0 * e,
        2.0 * e
    );
    out.push_str(
        "<style>\
         *{vector-effect:non-scaling-stroke}\
         .frame{fill:white;stroke:black;stroke-width:1.5}\
         .axis{stroke:gray;stroke-width:0.75}\
         .pt{fill:#345}\
         .gt{fill:none;stroke:#1a9641;stroke-width:1.5}\
         .pred{fill:none;stroke:#d7191c;stroke-width:1.5;stroke-dasharray:4 3}\
         .patch{fill:none;stroke:#2c7bb6;stroke-width:0.5;stroke-opacity:0.6}\
         </style>\n",
    );
    let _ = writeln!(out, r#"<g transform="scale(1,-1)">"#);
    let _ = writeln!(
        out,
        r#"<rect class="frame" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}"/>"#,
        -e,
        -e,
        2.0 * e,
        2.0 * e
    );
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{:.3}" y1="0" x2="{:.3}" y2="0"/>"#,
        -e, e
    );
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="0" y1="{:.3}" x2="0" y2="{:.3}"/>"#,
        -e, e
    );

    match overlay {
        Some(Overlay::Patches(patches)) => {
            for (c, layout) in patches {
                match layout {
                    Layout::Circular { radius } => {
                        let _ = writeln!(
                            out,
                            r#"<circle class="patch" cx="{:.3}" cy="{:.3}" r="{:.3}"/>"#,
                            c.x, c.y, radius
                        );
                    }
                    Layout::Square { side } => {
                        let _ = writeln!(
                            out,
                            r#"<rect class="patch" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}"/>"#,
                            c.x - side / 2.0,
                            c.y - side / 2.0,
                            side,
                            side
                        );
                    }
                }
            }
        }
        Some(Overlay::Sectors(azimuths)) => {
            let reach = e * std::f64::consts::SQRT_2;
            for a in azimuths {
                let _ = writeln!(
                    out,
                    r#"<line class="patch" x1="0" y1="0" x2="{:.3}" y2="{:.3}"/>"#,
                    reach * a.cos(),
                    reach * a.sin()
                );
            }
        }
        None => {}
    }

    let dot = e / 400.0;
    for p in cloud.iter().filter(|p| p.x.is_finite() && p.y.is_finite()) {
        let _ = writeln!(
            out,
            r#"<circle class="pt" cx="{:.3}" cy="{:.3}" r="{dot:.3}"/>"#,
            p.x, p.y
        );
    }
    for b in gt {
        polygon(&mut out, b, "gt");
    }
    for b in pred {
        polygon(&mut out, b, "pred");
    }
    out.push_str("</g>\n</svg>\n");
    out
}
