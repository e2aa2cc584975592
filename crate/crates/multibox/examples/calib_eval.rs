//! Scratch: evaluate a saved checkpoint on a configurable scene set.
//! Not part of the example suite; delete before release.

use std::path::Path;
use std::time::Instant;

use multibox::datagen::{generate_scenes, SceneConfig};
use multibox::evalkit::{budget_curve, EvalImage};
use multibox::postprocess::{localize_image, CropStrategy};
use multibox::predictor::load_localizer_checkpoint;
use multibox::priors::load_priors;

fn arg(name: &str, default: usize) -> usize {
    std::env::args()
        .find_map(|a| a.strip_prefix(&format!("{name}=")).map(|v| v.parse().unwrap()))
        .unwrap_or(default)
}

fn main() -> multibox::Result<()> {
    let t0 = Instant::now();
    let params = load_localizer_checkpoint(Path::new("/tmp/calib_ck.json"))?;
    let priors = load_priors(Path::new("/tmp/calib_priors.json"))?;

    let n = arg("n", 500);
    let seed = arg("seed", 0x51A1) as u64;
    let config = SceneConfig {
        n_scenes: n,
        classes: 3,
        m_max: 4,
        size: 64,
        side_min: arg("smin1000", 80) as f64 / 1000.0,
        side_max: arg("smax1000", 150) as f64 / 1000.0,
        noise: arg("noise1000", 10) as f64 / 1000.0,
        max_overlap: arg("overlap1000", 0) as f64 / 1000.0,
        seed,
    };
    let scenes = generate_scenes(&config)?;
    println!(
        "[{:5.1?}] {} scenes sides {:.2}-{:.2}",
        t0.elapsed(),
        scenes.len(),
        config.side_min,
        config.side_max
    );

    let nms = arg("nms1000", 500) as f64 / 1000.0;
    let top = arg("top", 10);
    let iou = arg("iou1000", 500) as f64 / 1000.0;
    for (name, strategy) in
        [("max_center", CropStrategy::MaxCenter), ("two_scale", CropStrategy::TwoScale)]
    {
        let mut images = Vec::new();
        for scene in &scenes {
            let dets = localize_image(&scene.raster, &params, &priors, strategy, nms, top)?;
            images.push(EvalImage { detections: dets, gt: scene.objects.clone() });
        }
        println!(
            "[{:5.1?}] {name}: rate@{top} = {:.3}",
            t0.elapsed(),
            budget_curve(&images, iou, top).rate_at(top)
        );
    }
    Ok(())
}
