//! Normalized bounding-box arithmetic: areas, Jaccard overlap, clipping,
//! and crop-window to image coordinate remapping.
//!
//! All coordinates are unitless fractions of image width/height. Boxes are
//! closed intervals, so two boxes that merely touch have zero intersection
//! area but are not "disjoint" in the interval sense.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates.
///
/// Invariant: `xmin <= xmax` and `ymin <= ymax`. Degenerate zero-area boxes
/// are permitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl NormBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        debug_assert!(xmin <= xmax && ymin <= ymax, "inverted box");
        NormBox { xmin, ymin, xmax, ymax }
    }

    /// Builds a box from any four finite coordinates, swapping inverted
    /// axes so the ordering invariant holds.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        NormBox {
            xmin: x0.min(x1),
            ymin: y0.min(y1),
            xmax: x0.max(x1),
            ymax: y0.max(y1),
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    /// Box as the flat coordinate vector `[xmin, ymin, xmax, ymax]` used by
    /// the loss and the predictor heads.
    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        NormBox { xmin: a[0], ymin: a[1], xmax: a[2], ymax: a[3] }
    }
}

/// Area of a box; ≥ 0 for any valid `NormBox`.
pub fn area(b: &NormBox) -> f64 {
    b.width() * b.height()
}

/// Intersection area of two boxes; 0 when they do not overlap.
pub fn intersection_area(a: &NormBox, b: &NormBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    w * h
}

/// Jaccard overlap (intersection over union) in [0,1].
///
/// Defined as 0 when the union has zero area, which keeps matching and
/// suppression total over degenerate boxes.
pub fn jaccard(a: &NormBox, b: &NormBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Clamps every coordinate to [0,1]. Preserves ordering and is idempotent.
pub fn clip(b: &NormBox) -> NormBox {
    NormBox {
        xmin: b.xmin.clamp(0.0, 1.0),
        ymin: b.ymin.clamp(0.0, 1.0),
        xmax: b.xmax.clamp(0.0, 1.0),
        ymax: b.ymax.clamp(0.0, 1.0),
    }
}

/// Identifier of the scale/pass that produced a crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleTag {
    /// The single full-image (maximum center square) window.
    Full,
    /// One window of the secondary sub-window grid.
    Sub,
}

/// A square crop of the full image, in full-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub window: NormBox,
    pub scale_tag: ScaleTag,
}

impl CropWindow {
    pub fn new(window: NormBox, scale_tag: ScaleTag) -> Self {
        debug_assert!(
            (window.width() - window.height()).abs() < 1e-9,
            "crop windows are square"
        );
        CropWindow { window, scale_tag }
    }

    /// The identity window covering the whole image.
    pub fn full() -> Self {
        CropWindow {
            window: NormBox::new(0.0, 0.0, 1.0, 1.0),
            scale_tag: ScaleTag::Full,
        }
    }
}

/// Maps a box in window-local normalized coordinates into full-image
/// coordinates: scale by the window size, translate by its origin, then clip.
pub fn window_to_image(b: &NormBox, w: &CropWindow) -> NormBox {
    let wb = &w.window;
    let sx = wb.width();
    let sy = wb.height();
    let mapped = NormBox {
        xmin: wb.xmin + b.xmin * sx,
        ymin: wb.ymin + b.ymin * sy,
        xmax: wb.xmin + b.xmax * sx,
        ymax: wb.ymin + b.ymax * sy,
    };
    clip(&mapped)
}

/// Maps a box in full-image coordinates into window-local coordinates
/// (inverse of the affine part of [`window_to_image`]), without clipping.
pub fn image_to_window(b: &NormBox, w: &CropWindow) -> NormBox {
    let wb = &w.window;
    let sx = wb.width();
    let sy = wb.height();
    NormBox {
        xmin: (b.xmin - wb.xmin) / sx,
        ymin: (b.ymin - wb.ymin) / sy,
        xmax: (b.xmax - wb.xmin) / sx,
        ymax: (b.ymax - wb.ymin) / sy,
    }
}
