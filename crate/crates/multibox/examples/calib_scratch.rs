//! Scratch calibration harness (not part of the deliverable; deleted
//! before release). Usage:
//!   cargo run -q -p multibox --example calib_scratch -- \
//!     scenes=1200 steps=4000 h1=96 h2=48 side=24 batch=128 cpb=1
use std::path::Path;
use std::time::Instant;

use multibox::datagen::{
    generate_scenes, localizer_example, sample_crops_bucketed, SceneConfig,
};
use multibox::evalkit::{budget_curve, EvalImage};
use multibox::geometry::{jaccard, CropWindow};
use multibox::postprocess::{localize_image, CropStrategy};
use multibox::predictor::{
    train_localizer, train_localizer_from, LocalizerTopology, TrainConfig,
};
use multibox::priors::fit_priors;
use multibox::NormBox;

fn arg(name: &str, default: usize) -> usize {
    std::env::args()
        .find_map(|a| a.strip_prefix(&format!("{name}=")).map(|v| v.parse().unwrap()))
        .unwrap_or(default)
}

fn main() -> multibox::Result<()> {
    let n_scenes = arg("scenes", 1200);
    let steps = arg("steps", 4000);
    let h1 = arg("h1", 96);
    let h2 = arg("h2", 48);
    let side = arg("side", 24);
    let batch = arg("batch", 128);
    let cpb = arg("cpb", 1);
    let k = arg("k", 16);

    let smin = arg("smin1000", 140) as f64 / 1000.0;
    let smax = arg("smax1000", 450) as f64 / 1000.0;
    let noise = arg("noise1000", 30) as f64 / 1000.0;

    let t0 = Instant::now();
    let scene_config = SceneConfig {
        n_scenes,
        seed: 10,
        side_min: smin,
        side_max: smax,
        noise,
        m_max: arg("mmax", 4),
        max_overlap: arg("overlap1000", 250) as f64 / 1000.0,
        ..SceneConfig::default()
    };
    let train_scenes = if arg("trainm4", 0) == 1 {
        // Crowd-heavy training set: keep only 4-object scenes.
        let raw = generate_scenes(&SceneConfig {
            n_scenes: n_scenes * 5,
            ..scene_config.clone()
        })?;
        raw.into_iter().filter(|s| s.objects.len() == 4).take(n_scenes).collect()
    } else {
        generate_scenes(&scene_config)?
    };
    let held_scenes = generate_scenes(&SceneConfig {
        n_scenes: 1000,
        seed: 0xB0B0,
        ..scene_config.clone()
    })?;
    println!("[{:6.1?}] scenes n_train={}", t0.elapsed(), train_scenes.len());

    let boxes: Vec<NormBox> =
        train_scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.bbox)).collect();
    let priors = fit_priors(&boxes, k, 1)?;
    println!("[{:6.1?}] priors k={k}", t0.elapsed());

    let idrep = arg("idrep", 1);
    let winmode = arg("winmode", 0);
    let mut dataset = Vec::new();
    for scene in &train_scenes {
        if winmode == 1 {
            // Train on exactly the windows inference will use.
            for w in multibox::postprocess::crop_windows(CropStrategy::TwoScale) {
                dataset.push(localizer_example(scene, &w, side));
            }
            continue;
        }
        for _ in 0..idrep {
            dataset.push(localizer_example(scene, &CropWindow::full(), side));
        }
        if cpb > 0 {
            let (crops, _) = sample_crops_bucketed(scene, cpb, 0xC0FFEE ^ scene.image_id);
            for c in &crops {
                dataset.push(localizer_example(scene, &c.window, side));
            }
        }
    }
    println!("[{:6.1?}] dataset n={}", t0.elapsed(), dataset.len());

    let lr = arg("lr1000", 50) as f64 / 1000.0;
    let alpha = arg("alpha1000", 300) as f64 / 1000.0;
    let topo = LocalizerTopology { input: side * side, hidden1: h1, hidden2: h2, k };
    let config =
        TrainConfig { steps, batch_size: batch, seed: 5, lr, alpha, ..TrainConfig::default() };
    let phase2 = arg("phase2", 0);
    let phase3 = arg("phase3", 0);
    let (params, log) = if phase2 > 0 {
        let lr2 = arg("lr2_1000", 5) as f64 / 1000.0;
        let c1 = TrainConfig { steps: steps - phase2 - phase3, ..config.clone() };
        let (p1, mut log) = train_localizer(&dataset, &priors, topo, &c1)?;
        let c2 = TrainConfig { steps: phase2, lr: lr2, ..config.clone() };
        let (p2, l2) = train_localizer_from(p1, &dataset, &priors, &c2)?;
        log.extend(l2);
        if phase3 > 0 {
            let lr3 = arg("lr3_1000", 1) as f64 / 1000.0;
            let c3 = TrainConfig { steps: phase3, lr: lr3, ..config.clone() };
            let (p3, l3) = train_localizer_from(p2, &dataset, &priors, &c3)?;
            log.extend(l3);
            (p3, log)
        } else {
            (p2, log)
        }
    } else {
        train_localizer(&dataset, &priors, topo, &config)?
    };
    let last = log.last().unwrap();
    println!(
        "[{:6.1?}] trained params={} f: {:.3} -> {:.3} (match {:.3} conf {:.3})",
        t0.elapsed(),
        topo.param_count(),
        log.first().unwrap().f_total,
        last.f_total,
        last.f_match,
        last.f_conf
    );
    let stride = (log.len() / 10).max(1);
    for row in log.iter().step_by(stride) {
        println!(
            "    step {:>6}: f={:.3} match={:.3} conf={:.3}",
            row.step, row.f_total, row.f_match, row.f_conf
        );
    }
    multibox::predictor::save_localizer_checkpoint(Path::new("/tmp/calib_ck.json"), &params)?;
    multibox::priors::save_priors(Path::new("/tmp/calib_priors.json"), &priors)?;

    let eval_scenes = if arg("evaltrain", 0) == 1 { &train_scenes } else { &held_scenes };

    // Hand-rolled pooling diagnostics: sub-windows only, and id+sub split.
    {
        use multibox::datagen::extract_resized;
        use multibox::geometry::{clip, window_to_image, NormBox as NB};
        use multibox::postprocess::{crop_windows, nms, Detection};
        for (label, keep_id, keep_sub) in
            [("sub_only", false, true), ("id_only", true, false)]
        {
            let mut images = Vec::new();
            for scene in eval_scenes {
                let mut pool = Vec::new();
                for w in crop_windows(CropStrategy::TwoScale) {
                    let is_id = w.window.width() > 0.99;
                    if (is_id && !keep_id) || (!is_id && !keep_sub) {
                        continue;
                    }
                    let px = extract_resized(&scene.raster, &w.window, side);
                    let preds = multibox::predictor::forward(&params, &px, &priors)?;
                    for slot in 0..preds.k() {
                        let l = preds.locations()[slot];
                        let local = clip(&NB::from_corners(l[0], l[1], l[2], l[3]));
                        let bbox = window_to_image(&local, &w);
                        pool.push(Detection::agnostic(bbox, preds.confidences()[slot]));
                    }
                }
                let mut kept = nms(&pool, 0.5);
                kept.truncate(10);
                images.push(EvalImage { detections: kept, gt: scene.objects.clone() });
            }
            println!(
                "    {label}: rate@10 = {:.3}",
                budget_curve(&images, 0.5, 10).rate_at(10)
            );
        }
        // Recall by scene object count for full two_scale.
        let mut hit = [0usize; 5];
        let mut tot = [0usize; 5];
        for scene in eval_scenes {
            let dets = localize_image(
                &scene.raster,
                &params,
                &priors,
                CropStrategy::TwoScale,
                0.5,
                10,
            )?;
            let m = scene.objects.len().min(4);
            let outcomes =
                multibox::evalkit::match_detections(&dets, &scene.objects, 0.5, false);
            let tps = outcomes.iter().filter(|o| o.is_true_positive).count();
            hit[m] += tps;
            tot[m] += scene.objects.len();
        }
        for m in 1..=4 {
            println!(
                "    m={m}: recall {:.3} ({} gt)",
                hit[m] as f64 / tot[m].max(1) as f64,
                tot[m]
            );
        }
    }
    // Budget headroom: does recall keep climbing past budget 10?
    {
        let mut images = Vec::new();
        for scene in eval_scenes {
            let dets = localize_image(
                &scene.raster,
                &params,
                &priors,
                CropStrategy::TwoScale,
                0.5,
                64,
            )?;
            images.push(EvalImage { detections: dets, gt: scene.objects.clone() });
        }
        let curve = budget_curve(&images, 0.5, 64);
        for n in [5, 10, 16, 32, 64] {
            println!("    two_scale nms 0.5 rate@{n}: {:.3}", curve.rate_at(n));
        }
        // Budget waste: top-10 boxes that re-hit an already-claimed gt.
        let (mut dup, mut top) = (0usize, 0usize);
        for im in &images {
            let mut claimed = vec![false; im.gt.len()];
            for i in order_by_conf(&im.detections).into_iter().take(10) {
                top += 1;
                let d = &im.detections[i];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in im.gt.iter().enumerate() {
                    let iou = jaccard(&g.bbox, &d.bbox);
                    if iou >= 0.5 && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                if let Some((j, _)) = best {
                    if claimed[j] {
                        dup += 1;
                    }
                    claimed[j] = true;
                }
            }
        }
        println!("    top-10 duplicate hits: {dup}/{top}");
    }
    for (name, strategy) in
        [("max_center", CropStrategy::MaxCenter), ("two_scale", CropStrategy::TwoScale)]
    {
        for nms in [0.4, 0.5, 0.6, 0.7] {
            let mut images = Vec::new();
            for scene in eval_scenes {
                let dets = localize_image(&scene.raster, &params, &priors, strategy, nms, 10)?;
                images.push(EvalImage { detections: dets, gt: scene.objects.clone() });
            }
            println!(
                "    {name} nms {nms}: rate@10 = {:.3}",
                budget_curve(&images, 0.5, 10).rate_at(10)
            );
        }
        let nms = 0.4;
        let mut images = Vec::new();
        for scene in eval_scenes {
            let dets = localize_image(&scene.raster, &params, &priors, strategy, nms, 10)?;
            images.push(EvalImage { detections: dets, gt: scene.objects.clone() });
        }
        let curve = budget_curve(&images, 0.5, 10);
        let rates: Vec<String> =
            curve.points.iter().map(|(n, r)| format!("{n}:{r:.3}")).collect();
        println!("[{:6.1?}] {name}: {}", t0.elapsed(), rates.join(" "));
        for iou in [0.3, 0.4, 0.5] {
            println!("    rate@10 iou {iou}: {:.3}", budget_curve(&images, iou, 10).rate_at(10));
        }
        // Recall at budget 10 bucketed by gt box side.
        let mut hit = [0usize; 4];
        let mut tot = [0usize; 4];
        for im in &images {
            let outcomes =
                multibox::evalkit::match_detections(&im.detections, &im.gt, 0.5, false);
            let mut claimed = vec![false; im.gt.len()];
            for (j, g) in im.gt.iter().enumerate() {
                let s = g.bbox.width().max(g.bbox.height());
                let b = if s < 0.2 {
                    0
                } else if s < 0.3 {
                    1
                } else if s < 0.4 {
                    2
                } else {
                    3
                };
                tot[b] += 1;
                // Re-run greedy matching to see which gt got claimed.
                let _ = (&outcomes, &mut claimed);
            }
            let mut claimed = vec![false; im.gt.len()];
            for i in order_by_conf(&im.detections).into_iter().take(10) {
                let d = &im.detections[i];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in im.gt.iter().enumerate() {
                    if claimed[j] {
                        continue;
                    }
                    let ov = multibox::geometry::jaccard(&d.bbox, &g.bbox);
                    if ov >= 0.5 && best.map_or(true, |(_, bo)| ov > bo) {
                        best = Some((j, ov));
                    }
                }
                if let Some((j, _)) = best {
                    claimed[j] = true;
                }
            }
            for (j, g) in im.gt.iter().enumerate() {
                let s = g.bbox.width().max(g.bbox.height());
                let b = if s < 0.2 {
                    0
                } else if s < 0.3 {
                    1
                } else if s < 0.4 {
                    2
                } else {
                    3
                };
                if claimed[j] {
                    hit[b] += 1;
                }
                let _ = tot[b];
            }
        }
        println!(
            "    recall by side: <0.2 {:.3} ({})  0.2-0.3 {:.3} ({})  0.3-0.4 {:.3} ({})  >0.4 {:.3} ({})",
            hit[0] as f64 / tot[0].max(1) as f64,
            tot[0],
            hit[1] as f64 / tot[1].max(1) as f64,
            tot[1],
            hit[2] as f64 / tot[2].max(1) as f64,
            tot[2],
            hit[3] as f64 / tot[3].max(1) as f64,
            tot[3]
        );
    }
    Ok(())
}


fn order_by_conf(dets: &[multibox::postprocess::Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].localizer_conf.total_cmp(&dets[a].localizer_conf).then(a.cmp(&b))
    });
    order
}
