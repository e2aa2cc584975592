//! Box priors: k-means centroids over ground-truth corner coordinates,
//! residual encoding against those priors, and the priors file format.
//!
//! Clustering operates on raw `[xmin, ymin, xmax, ymax]` 4-vectors — the
//! same coordinates and L2 geometry the matching loss uses — not on
//! width/height/aspect features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MultiboxError, Result};
use crate::geometry::{clip, NormBox};

/// Statistics from a clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitStats {
    /// Lloyd iterations executed.
    pub iterations: usize,
    /// Final objective: sum of squared distances to assigned centroids.
    pub objective: f64,
    /// Objective after each iteration's assignment phase; non-increasing.
    pub objective_trace: Vec<f64>,
}

/// Provenance of a prior set.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMeta {
    pub seed: u64,
    /// Label of the dataset the priors were fit on, when known.
    pub source: Option<String>,
    /// Present when the set came from [`fit_priors`]; absent when loaded
    /// from a file or wrapped from existing boxes.
    pub fit: Option<FitStats>,
}

/// K prior boxes in canonical order. Model weight slots are tied to prior
/// indices, so the order must be stable across runs; [`fit_priors`] sorts
/// centroids by `(xmin, ymin, xmax, ymax)` to guarantee that.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    priors: Vec<NormBox>,
    meta: PriorMeta,
}

impl PriorSet {
    /// Wraps existing boxes as priors, preserving their order (no
    /// clustering, no sort).
    pub fn from_boxes_unsorted(boxes: Vec<NormBox>, seed: u64) -> Self {
        PriorSet {
            priors: boxes.iter().map(clip).collect(),
            meta: PriorMeta { seed, source: None, fit: None },
        }
    }

    pub fn k(&self) -> usize {
        self.priors.len()
    }

    pub fn priors(&self) -> &[NormBox] {
        &self.priors
    }

    pub fn meta(&self) -> &PriorMeta {
        &self.meta
    }

    pub fn set_source(&mut self, source: impl Into<String>) {
        self.meta.source = Some(source.into());
    }
}

fn sqdist4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for k in 0..4 {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

fn canonical_order(a: &NormBox, b: &NormBox) -> std::cmp::Ordering {
    a.xmin
        .total_cmp(&b.xmin)
        .then(a.ymin.total_cmp(&b.ymin))
        .then(a.xmax.total_cmp(&b.xmax))
        .then(a.ymax.total_cmp(&b.ymax))
}

/// k-means++ seeding: first center uniform, each subsequent center drawn
/// with probability proportional to squared distance from the nearest
/// already-chosen center.
fn kmeanspp_init(points: &[[f64; 4]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sqdist4(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with existing centers; any pick works.
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sqdist4(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Fits `k` prior boxes by seeded k-means over box corner 4-vectors.
///
/// Lloyd iterations run until the largest centroid movement drops below
/// 1e-9 or 200 iterations elapse; empty clusters are re-seeded from the
/// point farthest from its assigned centroid. Deterministic for fixed
/// `(boxes, k, seed)`.
pub fn fit_priors(boxes: &[NormBox], k: usize, seed: u64) -> Result<PriorSet> {
    if k == 0 {
        return Err(MultiboxError::InvalidConfig("prior count k must be >= 1".into()));
    }
    if boxes.len() < k {
        return Err(MultiboxError::TooFewBoxes { boxes: boxes.len(), k });
    }
    let points: Vec<[f64; 4]> = boxes.iter().map(|b| clip(b).to_array()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeanspp_init(&points, k, &mut rng);

    let mut labels = vec![0usize; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    for _ in 0..200 {
        iterations += 1;
        // Assignment phase: nearest center, ties to the lowest index.
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = sqdist4(p, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = sqdist4(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
        }
        // Re-seed empty clusters from the farthest point, reassigning it.
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[labels[*i]] > 1)
                    .max_by(|(i, p), (j, q)| {
                        sqdist4(p, &centers[labels[*i]])
                            .total_cmp(&sqdist4(q, &centers[labels[*j]]))
                    })
                    .map(|(i, _)| i);
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    centers[c] = points[i];
                    labels[i] = c;
                    counts[c] = 1;
                }
            }
        }
        trace.push(
            points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| sqdist4(p, &centers[l]))
                .sum::<f64>(),
        );
        // Update phase: move centers to cluster means.
        let mut sums = vec![[0.0f64; 4]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for d in 0..4 {
                sums[l][d] += p[d];
            }
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                let new: [f64; 4] = std::array::from_fn(|d| sums[c][d] / n);
                movement = movement.max(sqdist4(&new, &centers[c]).sqrt());
                centers[c] = new;
            }
        }
        if movement < 1e-9 {
            break;
        }
    }
    let objective = *trace.last().expect("at least one iteration");

    let mut priors: Vec<NormBox> = centers
        .into_iter()
        .map(|c| clip(&NormBox::from_array(c)))
        .collect();
    priors.sort_by(canonical_order);
    Ok(PriorSet {
        priors,
        meta: PriorMeta {
            seed,
            source: None,
            fit: Some(FitStats { iterations, objective, objective_trace: trace }),
        },
    })
}

/// Residual that moves `prior` onto `target`: componentwise subtraction.
pub fn encode_residual(prior: &NormBox, target: &NormBox) -> [f64; 4] {
    let p = prior.to_array();
    let t = target.to_array();
    std::array::from_fn(|d| t[d] - p[d])
}

/// Applies a residual to a prior: componentwise addition, inverted
/// coordinates repaired by swapping, then clipped to the unit square.
pub fn decode(prior: &NormBox, residual: &[f64; 4]) -> NormBox {
    let p = prior.to_array();
    let raw: [f64; 4] = std::array::from_fn(|d| p[d] + residual[d]);
    clip(&NormBox::from_corners(raw[0], raw[1], raw[2], raw[3]))
}

const PRIORS_MAGIC: &str = "multibox-priors v1";

/// Writes a prior set: header `multibox-priors v1 k=<K> seed=<seed>` then
/// one prior per line as four `{:.16e}` fields (17 significant digits, so
/// values round-trip bit-exactly).
pub fn write_priors(w: &mut impl Write, set: &PriorSet) -> Result<()> {
    writeln!(w, "{PRIORS_MAGIC} k={} seed={}", set.k(), set.meta.seed)?;
    for p in set.priors() {
        writeln!(w, "{:.16e} {:.16e} {:.16e} {:.16e}", p.xmin, p.ymin, p.xmax, p.ymax)?;
    }
    Ok(())
}

pub fn save_priors(path: &Path, set: &PriorSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_priors(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn read_priors(r: &mut impl Read) -> Result<PriorSet> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| MultiboxError::Format { what: "priors file", detail: "empty file".into() })??;
    let rest = header.strip_prefix(PRIORS_MAGIC).ok_or_else(|| MultiboxError::Format {
        what: "priors file",
        detail: format!("bad header: {header:?}"),
    })?;
    let mut k: Option<usize> = None;
    let mut seed: Option<u64> = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("k=") {
            k = Some(v.parse().map_err(|_| MultiboxError::Format {
                what: "priors file",
                detail: format!("bad k field: {tok:?}"),
            })?);
        } else if let Some(v) = tok.strip_prefix("seed=") {
            seed = Some(v.parse().map_err(|_| MultiboxError::Format {
                what: "priors file",
                detail: format!("bad seed field: {tok:?}"),
            })?);
        }
    }
    let k = k.ok_or_else(|| MultiboxError::Format {
        what: "priors file",
        detail: "header missing k=".into(),
    })?;
    let seed = seed.ok_or_else(|| MultiboxError::Format {
        what: "priors file",
        detail: "header missing seed=".into(),
    })?;
    let mut priors = Vec::with_capacity(k);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(MultiboxError::Format {
                what: "priors file",
                detail: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| MultiboxError::Format {
                what: "priors file",
                detail: format!("bad coordinate: {f:?}"),
            })?;
        }
        priors.push(NormBox::from_array(vals));
    }
    if priors.len() != k {
        return Err(MultiboxError::Format {
            what: "priors file",
            detail: format!("header says k={k} but file has {} priors", priors.len()),
        });
    }
    Ok(PriorSet { priors, meta: PriorMeta { seed, source: None, fit: None } })
}

pub fn load_priors(path: &Path) -> Result<PriorSet> {
    let mut f = File::open(path)?;
    read_priors(&mut f)
}
