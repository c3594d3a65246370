//! Axis-aligned box arithmetic: IoU, interaction region, union box,
//! threshold gating, and rasterization of the two-channel binary pair map.
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with continuous pixel coordinates. `(x1, y1)` is the
/// left-upper corner, `(x2, y2)` the right-lower corner. Invariants
/// (`x1 < x2`, `y1 < y2`, all finite) are enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("coordinates must be finite"));
        }
        if x1 >= x2 {
            return Err(invalid("x1 must be strictly less than x2"));
        }
        if y1 >= y2 {
            return Err(invalid("y1 must be strictly less than y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Half-open membership test: `x1 <= x < x2` and `y1 <= y < y2`.
    /// The half-open convention gives deterministic tie-breaking when a
    /// sample point lands exactly on a shared edge.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }

    /// True when `other` lies inside `self` (closed comparison on all edges).
    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        BoundingBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        BoundingBox::new(
            self.x1 * factor,
            self.y1 * factor,
            self.x2 * factor,
            self.y2 * factor,
        )
    }

    /// Intersects with the frame rectangle `[0, w) x [0, h)`; `None` when
    /// the box lies entirely outside.
    pub fn clamped_to_frame(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(width);
        let y2 = self.y2.min(height);
        BoundingBox::new(x1, y1, x2, y2).ok()
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            x1: f64,
            y1: f64,
            x2: f64,
            y2: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        BoundingBox::new(raw.x1, raw.y1, raw.x2, raw.y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes; 0 when disjoint, symmetric in its
/// arguments.
pub fn iou(b1: &BoundingBox, b2: &BoundingBox) -> f64 {
    let iw = (b1.x2.min(b2.x2) - b1.x1.max(b2.x1)).max(0.0);
    let ih = (b1.y2.min(b2.y2) - b1.y1.max(b2.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (b1.area() + b2.area() - inter)
}

/// The intersection rectangle of two overlapping boxes: componentwise max
/// of the left-upper corners and min of the right-lower corners.
pub fn interaction_region(b1: &BoundingBox, b2: &BoundingBox) -> Result<BoundingBox> {
    BoundingBox::new(
        b1.x1.max(b2.x1),
        b1.y1.max(b2.y1),
        b1.x2.min(b2.x2),
        b1.y2.min(b2.y2),
    )
    .map_err(|_| Error::NoOverlap)
}

/// Smallest box containing both inputs.
pub fn union_box(b1: &BoundingBox, b2: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x1: b1.x1.min(b2.x1),
        y1: b1.y1.min(b2.y1),
        x2: b1.x2.max(b2.x2),
        y2: b1.y2.max(b2.y2),
    }
}

/// IoU gate with strict bounds on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouGate {
    pub lower: f64,
    pub upper: f64,
}

impl Default for IouGate {
    fn default() -> Self {
        IouGate {
            lower: 0.2,
            upper: 0.7,
        }
    }
}

impl IouGate {
    pub fn passes(&self, value: f64) -> bool {
        self.lower < value && value < self.upper
    }

    pub fn passes_boxes(&self, b1: &BoundingBox, b2: &BoundingBox) -> bool {
        self.passes(iou(b1, b2))
    }
}

/// Default-gate convenience: true iff `0.2 < iou(b1, b2) < 0.7`.
pub fn passes_interaction_threshold(b1: &BoundingBox, b2: &BoundingBox) -> bool {
    IouGate::default().passes_boxes(b1, b2)
}

/// Two-channel binary image encoding the spatial configuration of a box
/// pair inside their (square-padded) union frame. Channel 0 marks the first
/// box, channel 1 the second.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMap {
    channels: Array3<f64>,
    pair_id: Option<(u32, u32)>,
}

impl GeometricMap {
    pub fn resolution(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.channels
    }

    pub fn into_data(self) -> Array3<f64> {
        self.channels
    }

    pub fn pair_id(&self) -> Option<(u32, u32)> {
        self.pair_id
    }

    pub fn with_pair_id(mut self, a: u32, b: u32) -> Self {
        self.pair_id = Some((a, b));
        self
    }

    #[cfg(test)]
    pub(crate) fn from_raw_for_tests(channels: Array3<f64>) -> GeometricMap {
        GeometricMap {
            channels,
            pair_id: None,
        }
    }

    /// Swaps the two channels; the map for `(b2, b1)` equals the map for
    /// `(b1, b2)` with channels swapped.
    pub fn swapped_channels(&self) -> GeometricMap {
        let r = self.resolution();
        let mut out = Array3::zeros((2, r, r));
        out.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&self.channels.index_axis(ndarray::Axis(0), 1));
        out.index_axis_mut(ndarray::Axis(0), 1)
            .assign(&self.channels.index_axis(ndarray::Axis(0), 0));
        GeometricMap {
            channels: out,
            pair_id: self.pair_id.map(|(a, b)| (b, a)),
        }
    }
}

/// Square reference frame used for pair-map sampling: the union box padded
/// symmetrically along its shorter axis.
pub(crate) fn square_frame(b1: &BoundingBox, b2: &BoundingBox) -> (f64, f64, f64) {
    let u = union_box(b1, b2);
    let side = u.width().max(u.height());
    let fx = u.x1 - (side - u.width()) / 2.0;
    let fy = u.y1 - (side - u.height()) / 2.0;
    (fx, fy, side)
}

/// Rasterizes the pair `(b1, b2)` into a two-channel binary map.
///
/// The reference frame is the union box padded symmetrically along the
/// shorter axis to a square, sampled at `resolution x resolution` pixel
/// centers; a cell is 1 iff its center lies inside the corresponding box
/// under half-open membership.
pub fn rasterize_pair_map(
    b1: &BoundingBox,
    b2: &BoundingBox,
    resolution: usize,
) -> Result<GeometricMap> {
    if resolution < 2 {
        return Err(Error::InvalidResolution(resolution));
    }
    let (fx, fy, side) = square_frame(b1, b2);
    let step = side / resolution as f64;
    let mut channels = Array3::zeros((2, resolution, resolution));
    for row in 0..resolution {
        let cy = fy + (row as f64 + 0.5) * step;
        for col in 0..resolution {
            let cx = fx + (col as f64 + 0.5) * step;
            if b1.contains_point(cx, cy) {
                channels[[0, row, col]] = 1.0;
            }
            if b2.contains_point(cx, cy) {
                channels[[1, row, col]] = 1.0;
            }
        }
    }
    Ok(GeometricMap {
        channels,
        pair_id: None,
    })
}
