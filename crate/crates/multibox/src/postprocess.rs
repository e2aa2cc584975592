//! Inference-side assembly: crop-window generation, per-crop localization,
//! coordinate remapping, greedy non-maximum suppression, optional classifier
//! scoring, and the detections text format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::datagen::{extract_resized, Raster};
use crate::error::{MultiboxError, Result};
use crate::geometry::{clip, jaccard, window_to_image, CropWindow, NormBox, ScaleTag};
use crate::predictor::{classify_crop, forward, ClassifierParams, ModelParams};
use crate::priors::PriorSet;

/// One localized (and optionally classified) box in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: NormBox,
    pub localizer_conf: f64,
    pub class_label: Option<usize>,
    pub class_score: Option<f64>,
    /// `localizer_conf * class_score`; present iff `class_score` is.
    pub combined_score: Option<f64>,
}

impl Detection {
    pub fn agnostic(bbox: NormBox, localizer_conf: f64) -> Detection {
        Detection {
            bbox,
            localizer_conf,
            class_label: None,
            class_score: None,
            combined_score: None,
        }
    }

    pub fn with_class(mut self, label: usize, class_score: f64) -> Detection {
        self.class_label = Some(label);
        self.class_score = Some(class_score);
        self.combined_score = Some(self.localizer_conf * class_score);
        self
    }

    /// Ranking score: the combined score when classified, otherwise the
    /// localizer confidence alone.
    pub fn score(&self) -> f64 {
        self.combined_score.unwrap_or(self.localizer_conf)
    }
}

/// Greedy non-maximum suppression. Candidates are visited in descending
/// `localizer_conf` (ties broken by original index, ascending); one is kept
/// iff its Jaccard overlap with every already-kept detection is strictly
/// below `threshold`. Output is in acceptance order, so confidences are
/// non-increasing, and the pass is idempotent.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .localizer_conf
            .total_cmp(&dets[a].localizer_conf)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| jaccard(&k.bbox, &dets[i].bbox) < threshold) {
            kept.push(dets[i].clone());
        }
    }
    kept
}

/// Window layouts for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropStrategy {
    /// The single maximal centered square (the identity window on square
    /// images).
    MaxCenter,
    /// The identity window plus a 3×3 grid of windows with side 0.6 and
    /// origin offsets {0, 0.2, 0.4} on each axis: 10 windows total,
    /// jointly spanning [0,1]².
    TwoScale,
}

pub fn crop_windows(strategy: CropStrategy) -> Vec<CropWindow> {
    match strategy {
        CropStrategy::MaxCenter => vec![CropWindow::full()],
        CropStrategy::TwoScale => {
            let mut windows = vec![CropWindow::full()];
            for &y0 in &[0.0, 0.2, 0.4] {
                for &x0 in &[0.0, 0.2, 0.4] {
                    windows.push(CropWindow::new(
                        NormBox::new(x0, y0, x0 + 0.6, y0 + 0.6),
                        ScaleTag::Sub,
                    ));
                }
            }
            windows
        }
    }
}

fn square_input_side(input: usize, what: &'static str) -> Result<usize> {
    let side = (input as f64).sqrt().round() as usize;
    if side * side != input {
        return Err(MultiboxError::ShapeMismatch {
            what,
            expected: side * side,
            actual: input,
        });
    }
    Ok(side)
}

/// Runs the localizer over every crop window of `strategy`, repairs and
/// clips each predicted box in window coordinates, maps it back to image
/// coordinates, pools everything in (crop index, slot index) order, applies
/// NMS, and keeps the `top_n` strongest survivors.
pub fn localize_image(
    raster: &Raster,
    params: &ModelParams,
    priors: &PriorSet,
    strategy: CropStrategy,
    nms_threshold: f64,
    top_n: usize,
) -> Result<Vec<Detection>> {
    let side = square_input_side(params.topology().input, "localizer input pixels")?;
    let mut pool = Vec::new();
    for w in crop_windows(strategy) {
        let pixels = extract_resized(raster, &w.window, side);
        let preds = forward(params, &pixels, priors)?;
        for slot in 0..preds.k() {
            let l = preds.locations()[slot];
            let local = clip(&NormBox::from_corners(l[0], l[1], l[2], l[3]));
            let bbox = window_to_image(&local, &w);
            pool.push(Detection::agnostic(bbox, preds.confidences()[slot]));
        }
    }
    let mut kept = nms(&pool, nms_threshold);
    kept.truncate(top_n);
    Ok(kept)
}

/// Square region handed to the classifier for each detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SquareRegion {
    /// Smallest square containing the box, centered on the box center,
    /// clipped to the image.
    Max,
    /// Largest square inscribed in the box, centered on the box center,
    /// clipped to the image.
    Min,
}

pub fn square_region(b: &NormBox, kind: SquareRegion) -> NormBox {
    let cx = (b.xmin + b.xmax) / 2.0;
    let cy = (b.ymin + b.ymax) / 2.0;
    let side = match kind {
        SquareRegion::Max => b.width().max(b.height()),
        SquareRegion::Min => b.width().min(b.height()),
    };
    clip(&NormBox::from_corners(
        cx - side / 2.0,
        cy - side / 2.0,
        cx + side / 2.0,
        cy + side / 2.0,
    ))
}

/// Classifies the square region around each detection. The argmax class
/// (ties to the lowest index) becomes the label with its softmax
/// probability as `class_score`; detections whose argmax is the background
/// output (the last one) are dropped. Survivors keep input order.
pub fn score_detections(
    dets: &[Detection],
    classifier: &ClassifierParams,
    raster: &Raster,
    region: SquareRegion,
) -> Result<Vec<Detection>> {
    let side = square_input_side(classifier.topology().input, "classifier input pixels")?;
    let background = classifier.topology().outputs - 1;
    let mut out = Vec::new();
    for d in dets {
        let r = square_region(&d.bbox, region);
        let probs = classify_crop(classifier, &extract_resized(raster, &r, side))?;
        let mut argmax = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[argmax] {
                argmax = i;
            }
        }
        if argmax == background {
            continue;
        }
        out.push(d.clone().with_class(argmax, probs[argmax]));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Detections file: headerless text, one detection per line,
// `image_id class_label combined_score localizer_conf xmin ymin xmax ymax`,
// with class_label -1 on class-agnostic runs.

/// Detections grouped under their source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

pub fn write_detections(w: &mut impl Write, images: &[ImageDetections]) -> Result<()> {
    for im in images {
        for d in &im.detections {
            let label = d.class_label.map(|c| c as i64).unwrap_or(-1);
            let b = d.bbox;
            writeln!(
                w,
                "{} {} {} {} {} {} {} {}",
                im.image_id,
                label,
                d.score(),
                d.localizer_conf,
                b.xmin,
                b.ymin,
                b.xmax,
                b.ymax
            )?;
        }
    }
    Ok(())
}

pub fn save_detections(path: &Path, images: &[ImageDetections]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_detections(&mut w, images)?;
    w.flush()?;
    Ok(())
}

/// Reads a detections file, grouping lines by image id in first-seen order.
pub fn load_detections(path: &Path) -> Result<Vec<ImageDetections>> {
    let bad = |detail: String| MultiboxError::Format { what: "detections file", detail };
    let reader = BufReader::new(File::open(path)?);
    let mut images: Vec<ImageDetections> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(bad(format!("line {}: expected 8 fields, got {}", lineno + 1, fields.len())));
        }
        let parse_f = |s: &str, name: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("line {}: bad {name} {s:?}", lineno + 1)))
        };
        let image_id: u64 = fields[0]
            .parse()
            .map_err(|_| bad(format!("line {}: bad image_id {:?}", lineno + 1, fields[0])))?;
        let label: i64 = fields[1]
            .parse()
            .map_err(|_| bad(format!("line {}: bad class_label {:?}", lineno + 1, fields[1])))?;
        let combined = parse_f(fields[2], "combined_score")?;
        let conf = parse_f(fields[3], "localizer_conf")?;
        let coords = [
            parse_f(fields[4], "xmin")?,
            parse_f(fields[5], "ymin")?,
            parse_f(fields[6], "xmax")?,
            parse_f(fields[7], "ymax")?,
        ];
        let bbox = NormBox::from_array(coords);
        let det = if label < 0 {
            Detection::agnostic(bbox, conf)
        } else {
            let class_score = if conf > 0.0 { combined / conf } else { 0.0 };
            Detection {
                bbox,
                localizer_conf: conf,
                class_label: Some(label as usize),
                class_score: Some(class_score),
                combined_score: Some(combined),
            }
        };
        match images.iter_mut().find(|im| im.image_id == image_id) {
            Some(im) => im.detections.push(det),
            None => images.push(ImageDetections { image_id, detections: vec![det] }),
        }
    }
    Ok(images)
}
