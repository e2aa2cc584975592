//! Deterministic synthetic scenes (rasterized shapes with tight box labels),
//! coverage-bucketed crop sampling for localizer training, labeled crops for
//! classifier training, and the on-disk formats for all of them.
//!
//! Everything here is a pure function of (config, seed): per-scene RNG
//! streams are derived as `seed ^ image_id`, so scene order and scheduling
//! cannot change the output.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MultiboxError, Result};
use crate::geometry::{area, clip, image_to_window, jaccard, CropWindow, NormBox, ScaleTag};
use crate::loss::GroundTruthSet;
use crate::predictor::{ClassifierExample, LocalizerExample};

/// Smallest ground-truth box area ever emitted (or kept after crop
/// clipping); avoids degenerate matches downstream.
pub const MIN_BOX_AREA: f64 = 0.002;

/// Gray level per shape class; all well separated from the background band.
const CLASS_INTENSITY: [f64; 3] = [0.95, 0.75, 0.55];
const BACKGROUND_RANGE: (f64, f64) = (0.05, 0.30);

// ---------------------------------------------------------------------------
// Scenes.

/// Row-major grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// One labeled object: shape class and the tight bounds of the continuous
/// shape (for every shape kind those bounds equal the placed box).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class_label: usize,
    pub bbox: NormBox,
}

/// One synthetic image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub raster: Raster,
    pub objects: Vec<SceneObject>,
}

/// Scene-generator configuration.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub n_scenes: usize,
    /// Shape classes in use: 1 = rectangles, 2 = +ellipses, 3 = +triangles.
    pub classes: usize,
    pub m_max: usize,
    /// Raster side in pixels (square images).
    pub size: usize,
    pub seed: u64,
    /// Object box side range, as a fraction of the image side.
    pub side_min: f64,
    pub side_max: f64,
    /// Additive per-pixel noise amplitude on the [0,1] gray scale.
    pub noise: f64,
    /// Largest pairwise Jaccard overlap placement will accept; when no
    /// draw satisfies it, the least-overlapping draw is taken.
    pub max_overlap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_scenes: 1000,
            classes: 3,
            m_max: 4,
            size: 64,
            seed: 0,
            side_min: 0.14,
            side_max: 0.45,
            noise: 0.03,
            max_overlap: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(MultiboxError::InvalidConfig(msg));
        if self.n_scenes == 0 {
            return fail("n_scenes must be >= 1".into());
        }
        if self.classes == 0 || self.classes > CLASS_INTENSITY.len() {
            return fail(format!("classes must be in 1..={}", CLASS_INTENSITY.len()));
        }
        if self.m_max == 0 {
            return fail("m_max must be >= 1".into());
        }
        if self.size < 8 {
            return fail("size must be >= 8 pixels".into());
        }
        if !(self.side_min <= self.side_max && self.side_max <= 1.0) {
            return fail("need side_min <= side_max <= 1".into());
        }
        if self.side_min * self.side_min < MIN_BOX_AREA {
            return fail(format!("side_min must be >= sqrt({MIN_BOX_AREA}) so every box has area >= {MIN_BOX_AREA}"));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return fail("noise must be in [0, 0.2]".into());
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return fail("max_overlap must be in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

impl Shape {
    fn of_class(class: usize) -> Shape {
        match class {
            0 => Shape::Rectangle,
            1 => Shape::Ellipse,
            _ => Shape::Triangle,
        }
    }

    /// Membership test in normalized image coordinates.
    fn contains(&self, b: &NormBox, x: f64, y: f64) -> bool {
        match self {
            Shape::Rectangle => x >= b.xmin && x <= b.xmax && y >= b.ymin && y <= b.ymax,
            Shape::Ellipse => {
                let rx = b.width() / 2.0;
                let ry = b.height() / 2.0;
                if rx <= 0.0 || ry <= 0.0 {
                    return false;
                }
                let dx = (x - (b.xmin + rx)) / rx;
                let dy = (y - (b.ymin + ry)) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle => {
                // Apex at the top-center, base along the bottom edge; the
                // tight bounds are exactly `b`.
                let ax = (b.xmin + b.xmax) / 2.0;
                let ay = b.ymin;
                let (bx, by) = (b.xmin, b.ymax);
                let (cx, cy) = (b.xmax, b.ymax);
                let s1 = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let s2 = (cx - bx) * (y - by) - (cy - by) * (x - bx);
                let s3 = (ax - cx) * (y - cy) - (ay - cy) * (x - cx);
                (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
            }
        }
    }
}

fn generate_scene(config: &SceneConfig, image_id: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ image_id);
    let background = rng.random_range(BACKGROUND_RANGE.0..BACKGROUND_RANGE.1);
    let n_objects = rng.random_range(1..=config.m_max);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class_label = rng.random_range(0..config.classes);
        let mut best: Option<(f64, NormBox)> = None;
        for _ in 0..40 {
            let w = rng.random_range(config.side_min..=config.side_max);
            let h = rng.random_range(config.side_min..=config.side_max);
            let x0 = rng.random_range(0.0..=(1.0 - w));
            let y0 = rng.random_range(0.0..=(1.0 - h));
            let cand = NormBox::new(x0, y0, x0 + w, y0 + h);
            let worst =
                objects.iter().map(|o| jaccard(&o.bbox, &cand)).fold(0.0, f64::max);
            if worst <= config.max_overlap {
                best = Some((worst, cand));
                break;
            }
            if best.is_none_or(|(bw, _)| worst < bw) {
                best = Some((worst, cand));
            }
        }
        objects.push(SceneObject { class_label, bbox: best.unwrap().1 });
    }

    let size = config.size;
    let mut pixels = vec![0u8; size * size];
    for py in 0..size {
        for px in 0..size {
            let x = (px as f64 + 0.5) / size as f64;
            let y = (py as f64 + 0.5) / size as f64;
            let mut v = background;
            for o in &objects {
                if Shape::of_class(o.class_label).contains(&o.bbox, x, y) {
                    v = CLASS_INTENSITY[o.class_label];
                }
            }
            v += rng.random_range(-config.noise..=config.noise);
            pixels[py * size + px] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    Scene { image_id, raster: Raster { width: size, height: size, pixels }, objects }
}

/// Generates `n_scenes` deterministic scenes. Each scene's RNG stream is
/// derived from `seed ^ image_id`, so per-scene content is independent of
/// generation order.
pub fn generate_scenes(config: &SceneConfig) -> Result<Vec<Scene>> {
    config.validate()?;
    Ok((0..config.n_scenes as u64).map(|id| generate_scene(config, id)).collect())
}

// ---------------------------------------------------------------------------
// Coverage and bucketed crop sampling.

/// Fraction of `window` area covered by the union of `boxes`, exact via an
/// x-sweep over slab strips. A zero-area window covers nothing.
pub fn union_coverage(boxes: &[NormBox], window: &NormBox) -> f64 {
    let wa = area(window);
    if wa <= 0.0 {
        return 0.0;
    }
    let clipped: Vec<NormBox> = boxes
        .iter()
        .filter_map(|b| {
            let c = NormBox {
                xmin: b.xmin.max(window.xmin),
                ymin: b.ymin.max(window.ymin),
                xmax: b.xmax.min(window.xmax),
                ymax: b.ymax.min(window.ymax),
            };
            (c.xmin < c.xmax && c.ymin < c.ymax).then_some(c)
        })
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|b| [b.xmin, b.xmax]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut covered = 0.0;
    for slab in xs.windows(2) {
        let (x0, x1) = (slab[0], slab[1]);
        if x1 <= x0 {
            continue;
        }
        // Boxes spanning the whole slab (slab edges are box edges, so a box
        // either spans it or misses it entirely).
        let mut ys: Vec<(f64, f64)> = clipped
            .iter()
            .filter(|b| b.xmin <= x0 && b.xmax >= x1)
            .map(|b| (b.ymin, b.ymax))
            .collect();
        ys.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut len = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (lo, hi) in ys {
            match cur {
                None => cur = Some((lo, hi)),
                Some((clo, chi)) => {
                    if lo <= chi {
                        cur = Some((clo, chi.max(hi)));
                    } else {
                        len += chi - clo;
                        cur = Some((lo, hi));
                    }
                }
            }
        }
        if let Some((clo, chi)) = cur {
            len += chi - clo;
        }
        covered += (x1 - x0) * len;
    }
    // Summation dust can overshoot an exactly-tiled window by an ulp.
    (covered / wa).clamp(0.0, 1.0)
}

/// Coverage-ratio buckets; boundaries are half-open except the final one:
/// [0,0.05), [0.05,0.15), [0.15,0.5), [0.5,1.0].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoverageBucket {
    P0to5,
    P5to15,
    P15to50,
    P50to100,
}

impl CoverageBucket {
    pub const ALL: [CoverageBucket; 4] = [
        CoverageBucket::P0to5,
        CoverageBucket::P5to15,
        CoverageBucket::P15to50,
        CoverageBucket::P50to100,
    ];

    /// The bucket a coverage ratio in [0,1] falls into.
    pub fn of(ratio: f64) -> CoverageBucket {
        debug_assert!((0.0..=1.0).contains(&ratio));
        if ratio < 0.05 {
            CoverageBucket::P0to5
        } else if ratio < 0.15 {
            CoverageBucket::P5to15
        } else if ratio < 0.5 {
            CoverageBucket::P15to50
        } else {
            CoverageBucket::P50to100
        }
    }

    pub fn contains(&self, ratio: f64) -> bool {
        CoverageBucket::of(ratio) == *self
    }

    pub fn label(&self) -> &'static str {
        match self {
            CoverageBucket::P0to5 => "0-5",
            CoverageBucket::P5to15 => "5-15",
            CoverageBucket::P15to50 => "15-50",
            CoverageBucket::P50to100 => "50-100",
        }
    }

    pub fn from_label(s: &str) -> Option<CoverageBucket> {
        CoverageBucket::ALL.iter().copied().find(|b| b.label() == s)
    }

    fn index(&self) -> usize {
        CoverageBucket::ALL.iter().position(|b| b == self).unwrap()
    }
}

/// A sampled training window with its ground-truth coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub image_id: u64,
    pub window: CropWindow,
    pub coverage_ratio: f64,
    pub bucket: CoverageBucket,
}

/// Outcome of sampling one bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketReport {
    pub bucket: CoverageBucket,
    pub requested: usize,
    pub filled: usize,
    pub attempts: usize,
    /// True when the attempt cap was hit before the bucket filled (sparse
    /// scenes may never reach high coverage).
    pub unfillable: bool,
}

/// Per-bucket draw budget before a bucket is declared unfillable.
pub const BUCKET_ATTEMPT_CAP: usize = 10_000;

/// Rejection-samples square windows (side uniform in [0.3, 1.0], origin
/// uniform within bounds) until every coverage bucket holds `n_per_bucket`
/// samples or its attempt budget is spent. Every draw counts one attempt
/// against every still-open bucket, since any draw could have filled it.
pub fn sample_crops_bucketed(
    scene: &Scene,
    n_per_bucket: usize,
    seed: u64,
) -> (Vec<CropSample>, Vec<BucketReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<NormBox> = scene.objects.iter().map(|o| o.bbox).collect();
    let mut filled = [0usize; 4];
    let mut attempts = [0usize; 4];
    let mut unfillable = [false; 4];
    let mut samples = Vec::with_capacity(4 * n_per_bucket);

    let open = |filled: &[usize; 4], unfillable: &[bool; 4], b: usize| {
        filled[b] < n_per_bucket && !unfillable[b]
    };
    while n_per_bucket > 0 && (0..4).any(|b| open(&filled, &unfillable, b)) {
        let side = rng.random_range(0.3..=1.0);
        let slack = 1.0 - side;
        let x0 = if slack > 0.0 { rng.random_range(0.0..slack) } else { 0.0 };
        let y0 = if slack > 0.0 { rng.random_range(0.0..slack) } else { 0.0 };
        let window = NormBox::new(x0, y0, x0 + side, y0 + side);
        let coverage = union_coverage(&gt, &window);
        let bucket = CoverageBucket::of(coverage);

        for b in 0..4 {
            if open(&filled, &unfillable, b) {
                attempts[b] += 1;
            }
        }
        let idx = bucket.index();
        if open(&filled, &unfillable, idx) {
            filled[idx] += 1;
            let tag = if side >= 1.0 - 1e-9 { ScaleTag::Full } else { ScaleTag::Sub };
            samples.push(CropSample {
                image_id: scene.image_id,
                window: CropWindow::new(window, tag),
                coverage_ratio: coverage,
                bucket,
            });
        }
        for b in 0..4 {
            if filled[b] < n_per_bucket && attempts[b] >= BUCKET_ATTEMPT_CAP {
                unfillable[b] = true;
            }
        }
    }

    let reports = CoverageBucket::ALL
        .iter()
        .map(|&bucket| {
            let b = bucket.index();
            BucketReport {
                bucket,
                requested: n_per_bucket,
                filled: filled[b],
                attempts: attempts[b],
                unfillable: unfillable[b],
            }
        })
        .collect();
    (samples, reports)
}

// ---------------------------------------------------------------------------
// Crop pixels and training examples.

/// Extracts `window` from the raster and resizes it to `s`×`s` grayscale in
/// [0,1] by exact area averaging (each output pixel is the mean of the
/// source region it covers). Deterministic; no interpolation ambiguity.
pub fn extract_resized(raster: &Raster, window: &NormBox, s: usize) -> Vec<f64> {
    assert!(s > 0);
    // Per output index: (source index, weight) pairs along one axis.
    fn axis_weights(lo: f64, hi: f64, out_n: usize, src_n: usize) -> Vec<Vec<(usize, f64)>> {
        let step = (hi - lo) / out_n as f64;
        (0..out_n)
            .map(|i| {
                let a = lo + i as f64 * step;
                let b = a + step;
                let mut w = Vec::new();
                if step <= 0.0 {
                    return w;
                }
                let first = a.floor().max(0.0) as usize;
                let last = (b.ceil().max(0.0) as usize).min(src_n);
                for p in first..last {
                    let overlap = (b.min((p + 1) as f64) - a.max(p as f64)).max(0.0);
                    if overlap > 0.0 {
                        w.push((p, overlap));
                    }
                }
                let total: f64 = w.iter().map(|(_, x)| x).sum();
                if total > 0.0 {
                    for e in &mut w {
                        e.1 /= total;
                    }
                }
                w
            })
            .collect()
    }
    let xw = axis_weights(
        window.xmin * raster.width as f64,
        window.xmax * raster.width as f64,
        s,
        raster.width,
    );
    let yw = axis_weights(
        window.ymin * raster.height as f64,
        window.ymax * raster.height as f64,
        s,
        raster.height,
    );
    // Horizontal pass over the source rows the window touches.
    let mut hp = vec![0.0f64; raster.height * s];
    let rows: Vec<usize> = {
        let mut r: Vec<usize> = yw.iter().flatten().map(|&(p, _)| p).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    for &y in &rows {
        let row = &raster.pixels[y * raster.width..(y + 1) * raster.width];
        for (i, xs) in xw.iter().enumerate() {
            hp[y * s + i] = xs.iter().map(|&(px, wx)| wx * row[px] as f64).sum();
        }
    }
    let mut out = vec![0.0f64; s * s];
    for (j, ys) in yw.iter().enumerate() {
        for i in 0..s {
            out[j * s + i] =
                ys.iter().map(|&(py, wy)| wy * hp[py * s + i]).sum::<f64>() / 255.0;
        }
    }
    out
}

/// Builds one localizer training example from a crop window: resized
/// pixels plus the scene's boxes mapped into window coordinates. A box is
/// kept when its clipped, window-local area is at least [`MIN_BOX_AREA`].
pub fn localizer_example(scene: &Scene, window: &CropWindow, input_side: usize) -> LocalizerExample {
    let pixels = extract_resized(&scene.raster, &window.window, input_side);
    let mut boxes = Vec::new();
    for obj in &scene.objects {
        let local = clip(&image_to_window(&obj.bbox, window));
        if area(&local) >= MIN_BOX_AREA {
            boxes.push(local);
        }
    }
    LocalizerExample { pixels, gt: GroundTruthSet::new(boxes) }
}

/// Bulk variant of [`localizer_example`] over a crop set.
pub fn build_localizer_dataset(
    scenes: &[Scene],
    crops: &[CropSample],
    input_side: usize,
) -> Result<Vec<LocalizerExample>> {
    let by_id: HashMap<u64, &Scene> = scenes.iter().map(|s| (s.image_id, s)).collect();
    crops
        .iter()
        .map(|c| {
            let scene = by_id.get(&c.image_id).ok_or_else(|| MultiboxError::Format {
                what: "crop set",
                detail: format!("crop references unknown image_id {}", c.image_id),
            })?;
            Ok(localizer_example(scene, &c.window, input_side))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Classifier crops.

/// A labeled classifier window; `label == num_classes` means background.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierCrop {
    pub image_id: u64,
    pub window: NormBox,
    pub label: usize,
}

/// Builds classifier crops: one jittered positive per object (Jaccard with
/// its source box at least `pos_iou`, labeled with the object's class) and
/// two square negatives per positive (Jaccard at most `neg_iou` against
/// every box, labeled `num_classes` = background).
pub fn make_classifier_crops(
    scenes: &[Scene],
    num_classes: usize,
    pos_iou: f64,
    neg_iou: f64,
    seed: u64,
) -> Result<Vec<ClassifierCrop>> {
    if !(0.0 <= neg_iou && neg_iou < pos_iou && pos_iou <= 1.0) {
        return Err(MultiboxError::InvalidConfig(format!(
            "need 0 <= neg_iou < pos_iou <= 1, got neg={neg_iou} pos={pos_iou}"
        )));
    }
    let mut crops = Vec::new();
    for scene in scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.image_id);
        let gt: Vec<NormBox> = scene.objects.iter().map(|o| o.bbox).collect();
        for obj in &scene.objects {
            if obj.class_label >= num_classes {
                return Err(MultiboxError::LabelOutOfRange {
                    label: obj.class_label,
                    max: num_classes - 1,
                });
            }
            // Positive: jitter corners until overlap stays above pos_iou;
            // the unjittered box always qualifies as a fallback.
            let b = obj.bbox;
            let amp = 0.15 * b.width().min(b.height());
            let mut pos = b;
            for _ in 0..50 {
                let cand = clip(&NormBox::from_corners(
                    b.xmin + rng.random_range(-amp..=amp),
                    b.ymin + rng.random_range(-amp..=amp),
                    b.xmax + rng.random_range(-amp..=amp),
                    b.ymax + rng.random_range(-amp..=amp),
                ));
                if jaccard(&cand, &b) >= pos_iou {
                    pos = cand;
                    break;
                }
            }
            crops.push(ClassifierCrop {
                image_id: scene.image_id,
                window: pos,
                label: obj.class_label,
            });
            // Two square negatives per positive.
            let mut found = 0;
            for _ in 0..1000 {
                if found == 2 {
                    break;
                }
                let side = rng.random_range(0.08..0.5);
                let x0 = rng.random_range(0.0..(1.0 - side));
                let y0 = rng.random_range(0.0..(1.0 - side));
                let cand = NormBox::new(x0, y0, x0 + side, y0 + side);
                if gt.iter().all(|g| jaccard(g, &cand) <= neg_iou) {
                    crops.push(ClassifierCrop {
                        image_id: scene.image_id,
                        window: cand,
                        label: num_classes,
                    });
                    found += 1;
                }
            }
        }
    }
    Ok(crops)
}

/// Extracts pixels for classifier crops.
pub fn build_classifier_dataset(
    scenes: &[Scene],
    crops: &[ClassifierCrop],
    input_side: usize,
) -> Result<Vec<ClassifierExample>> {
    let by_id: HashMap<u64, &Scene> = scenes.iter().map(|s| (s.image_id, s)).collect();
    crops
        .iter()
        .map(|c| {
            let scene = by_id.get(&c.image_id).ok_or_else(|| MultiboxError::Format {
                what: "crop set",
                detail: format!("crop references unknown image_id {}", c.image_id),
            })?;
            Ok(ClassifierExample {
                pixels: extract_resized(&scene.raster, &c.window, input_side),
                label: c.label,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenes file format (JSON-lines header + records, raster bytes sidecar).

const SCENES_FORMAT: &str = "multibox-scenes";
const CROPS_FORMAT: &str = "multibox-crops";
const RASTER_MAGIC: &str = "multibox-raster v1";

#[derive(Serialize, Deserialize)]
struct ScenesHeader {
    format: String,
    version: u32,
    count: usize,
    width: usize,
    height: usize,
    classes: usize,
    raster: String,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    image_id: u64,
    objects: Vec<ObjectRecord>,
}

/// Writes scenes as a JSON-lines file (header line, then one record per
/// scene) plus a raster sidecar named `<scenes stem>.raster` in the same
/// directory.
pub fn save_scenes(scenes_path: &Path, scenes: &[Scene], classes: usize) -> Result<()> {
    let raster_path = scenes_path.with_extension("raster");
    let raster_name = raster_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| MultiboxError::Format {
            what: "scenes path",
            detail: "cannot derive raster sidecar name".into(),
        })?
        .to_string();
    let (width, height) = scenes
        .first()
        .map(|s| (s.raster.width, s.raster.height))
        .unwrap_or((0, 0));

    let mut w = BufWriter::new(File::create(scenes_path)?);
    let header = ScenesHeader {
        format: SCENES_FORMAT.into(),
        version: 1,
        count: scenes.len(),
        width,
        height,
        classes,
        raster: raster_name,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for s in scenes {
        if s.raster.width != width || s.raster.height != height {
            return Err(MultiboxError::Format {
                what: "scenes",
                detail: "mixed raster dimensions in one file".into(),
            });
        }
        let record = SceneRecord {
            image_id: s.image_id,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord { class: o.class_label, bbox: o.bbox.to_array() })
                .collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    w.flush()?;

    let mut rw = BufWriter::new(File::create(&raster_path)?);
    writeln!(rw, "{RASTER_MAGIC} count={} width={width} height={height}", scenes.len())?;
    for s in scenes {
        rw.write_all(&s.raster.pixels)?;
    }
    rw.flush()?;
    Ok(())
}

/// Loads a scenes file and its raster sidecar. Returns the scenes and the
/// class count declared in the header.
pub fn load_scenes(scenes_path: &Path) -> Result<(Vec<Scene>, usize)> {
    let reader = BufReader::new(File::open(scenes_path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| MultiboxError::Format {
        what: "scenes file",
        detail: "empty file".into(),
    })??;
    let header: ScenesHeader =
        serde_json::from_str(&header_line).map_err(|e| MultiboxError::Format {
            what: "scenes file",
            detail: format!("bad header: {e}"),
        })?;
    if header.format != SCENES_FORMAT || header.version != 1 {
        return Err(MultiboxError::Format {
            what: "scenes file",
            detail: format!("unsupported format {}/{}", header.format, header.version),
        });
    }
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| MultiboxError::Format {
            what: "scenes file",
            detail: format!("bad record: {e}"),
        })?;
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(MultiboxError::Format {
            what: "scenes file",
            detail: format!("header count {} but {} records", header.count, records.len()),
        });
    }

    let raster_path = scenes_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.raster);
    let mut rr = BufReader::new(File::open(&raster_path)?);
    let raster_header = {
        let mut line = String::new();
        rr.read_line(&mut line)?;
        line
    };
    let expected = format!(
        "{RASTER_MAGIC} count={} width={} height={}\n",
        header.count, header.width, header.height
    );
    if raster_header != expected {
        return Err(MultiboxError::Format {
            what: "raster file",
            detail: format!("header {raster_header:?} does not match scenes header"),
        });
    }
    let per_scene = header.width * header.height;
    let mut scenes = Vec::with_capacity(records.len());
    for rec in records {
        let mut pixels = vec![0u8; per_scene];
        rr.read_exact(&mut pixels).map_err(|e| MultiboxError::Format {
            what: "raster file",
            detail: format!("short pixel block: {e}"),
        })?;
        scenes.push(Scene {
            image_id: rec.image_id,
            raster: Raster { width: header.width, height: header.height, pixels },
            objects: rec
                .objects
                .into_iter()
                .map(|o| SceneObject {
                    class_label: o.class,
                    bbox: NormBox::from_array(o.bbox),
                })
                .collect(),
        });
    }
    Ok((scenes, header.classes))
}

// ---------------------------------------------------------------------------
// Crop-set files.

#[derive(Serialize, Deserialize)]
struct CropsHeader {
    format: String,
    version: u32,
    kind: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct LocalizerCropRecord {
    image_id: u64,
    window: [f64; 4],
    scale_tag: String,
    coverage: f64,
    bucket: String,
}

#[derive(Serialize, Deserialize)]
struct ClassifierCropRecord {
    image_id: u64,
    window: [f64; 4],
    label: usize,
}

fn write_crops_header(w: &mut impl Write, kind: &str, count: usize) -> Result<()> {
    let header = CropsHeader { format: CROPS_FORMAT.into(), version: 1, kind: kind.into(), count };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    Ok(())
}

fn read_crops_header(line: &str, kind: &str) -> Result<CropsHeader> {
    let header: CropsHeader = serde_json::from_str(line).map_err(|e| MultiboxError::Format {
        what: "crops file",
        detail: format!("bad header: {e}"),
    })?;
    if header.format != CROPS_FORMAT || header.version != 1 || header.kind != kind {
        return Err(MultiboxError::Format {
            what: "crops file",
            detail: format!(
                "expected {CROPS_FORMAT} v1 kind={kind}, found {}/{}/{}",
                header.format, header.version, header.kind
            ),
        });
    }
    Ok(header)
}

pub fn save_localizer_crops(path: &Path, crops: &[CropSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_crops_header(&mut w, "localizer", crops.len())?;
    for c in crops {
        let rec = LocalizerCropRecord {
            image_id: c.image_id,
            window: c.window.window.to_array(),
            scale_tag: match c.window.scale_tag {
                ScaleTag::Full => "full".into(),
                ScaleTag::Sub => "sub".into(),
            },
            coverage: c.coverage_ratio,
            bucket: c.bucket.label().into(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_localizer_crops(path: &Path) -> Result<Vec<CropSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| MultiboxError::Format {
        what: "crops file",
        detail: "empty file".into(),
    })??;
    let header = read_crops_header(&header_line, "localizer")?;
    let mut crops = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LocalizerCropRecord =
            serde_json::from_str(&line).map_err(|e| MultiboxError::Format {
                what: "crops file",
                detail: format!("bad record: {e}"),
            })?;
        let tag = match rec.scale_tag.as_str() {
            "full" => ScaleTag::Full,
            "sub" => ScaleTag::Sub,
            other => {
                return Err(MultiboxError::Format {
                    what: "crops file",
                    detail: format!("unknown scale_tag {other:?}"),
                })
            }
        };
        let bucket = CoverageBucket::from_label(&rec.bucket).ok_or_else(|| {
            MultiboxError::Format {
                what: "crops file",
                detail: format!("unknown bucket {:?}", rec.bucket),
            }
        })?;
        crops.push(CropSample {
            image_id: rec.image_id,
            window: CropWindow::new(NormBox::from_array(rec.window), tag),
            coverage_ratio: rec.coverage,
            bucket,
        });
    }
    if crops.len() != header.count {
        return Err(MultiboxError::Format {
            what: "crops file",
            detail: format!("header count {} but {} records", header.count, crops.len()),
        });
    }
    Ok(crops)
}

pub fn save_classifier_crops(path: &Path, crops: &[ClassifierCrop]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_crops_header(&mut w, "classifier", crops.len())?;
    for c in crops {
        let rec = ClassifierCropRecord {
            image_id: c.image_id,
            window: c.window.to_array(),
            label: c.label,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_classifier_crops(path: &Path) -> Result<Vec<ClassifierCrop>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| MultiboxError::Format {
        what: "crops file",
        detail: "empty file".into(),
    })??;
    let header = read_crops_header(&header_line, "classifier")?;
    let mut crops = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClassifierCropRecord =
            serde_json::from_str(&line).map_err(|e| MultiboxError::Format {
                what: "crops file",
                detail: format!("bad record: {e}"),
            })?;
        crops.push(ClassifierCrop {
            image_id: rec.image_id,
            window: NormBox::from_array(rec.window),
            label: rec.label,
        });
    }
    if crops.len() != header.count {
        return Err(MultiboxError::Format {
            what: "crops file",
            detail: format!("header count {} but {} records", header.count, crops.len()),
        });
    }
    Ok(crops)
}
