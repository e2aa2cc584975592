//! The whole pipeline through the library API: generate scenes, fit
//! priors, train the localizer and the crop classifier, run multi-crop
//! inference with NMS, and score the result. Scaled down to finish in
//! about a minute; the acceptance suite runs the full-size version.

use multibox::datagen::{
    build_classifier_dataset, generate_scenes, localizer_example,
    make_classifier_crops, sample_crops_bucketed, SceneConfig,
};
use multibox::evalkit::{
    average_precision, budget_curve, ApStyle, EvalImage,
};
use multibox::geometry::CropWindow;
use multibox::postprocess::{
    localize_image, score_detections, CropStrategy, SquareRegion,
};
use multibox::predictor::{
    train_classifier, train_localizer, ClassifierTopology, ClassifierTrainConfig,
    LocalizerTopology, TrainConfig,
};
use multibox::priors::fit_priors;
use multibox::NormBox;

fn main() -> multibox::Result<()> {
    let input_side = 24;

    // --- Data. ------------------------------------------------------------
    let train_scenes =
        generate_scenes(&SceneConfig { n_scenes: 400, seed: 10, ..SceneConfig::default() })?;
    let test_scenes =
        generate_scenes(&SceneConfig { n_scenes: 100, seed: 900_000, ..SceneConfig::default() })?;
    println!(
        "scenes: {} train / {} test",
        train_scenes.len(),
        test_scenes.len()
    );

    // --- Priors from the training boxes. -----------------------------------
    let boxes: Vec<NormBox> =
        train_scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.bbox)).collect();
    let priors = fit_priors(&boxes, 8, 1)?;
    println!("priors: k = {} fit on {} boxes", priors.k(), boxes.len());

    // --- Localizer: whole scenes plus one crop per coverage bucket. --------
    let mut dataset = Vec::new();
    for scene in &train_scenes {
        dataset.push(localizer_example(scene, &CropWindow::full(), input_side));
        let (crops, _) = sample_crops_bucketed(scene, 1, 77 ^ scene.image_id);
        for c in &crops {
            dataset.push(localizer_example(scene, &c.window, input_side));
        }
    }
    let topo = LocalizerTopology {
        input: input_side * input_side,
        hidden1: 48,
        hidden2: 24,
        k: priors.k(),
    };
    let config = TrainConfig { steps: 600, batch_size: 64, seed: 5, ..TrainConfig::default() };
    println!(
        "localizer: {} examples, {} parameters, {} steps...",
        dataset.len(),
        topo.param_count(),
        config.steps
    );
    let (localizer, log) = train_localizer(&dataset, &priors, topo, &config)?;
    println!(
        "  f_total {:.4} -> {:.4}",
        log.first().unwrap().f_total,
        log.last().unwrap().f_total
    );

    // --- Classifier on jittered positives and background negatives. --------
    let crops = make_classifier_crops(&train_scenes, 3, 0.5, 0.2, 21)?;
    let examples = build_classifier_dataset(&train_scenes, &crops, input_side)?;
    let ctopo = ClassifierTopology {
        input: input_side * input_side,
        hidden1: 48,
        hidden2: 24,
        outputs: 4,
    };
    let cconfig = ClassifierTrainConfig { steps: 600, batch_size: 64, seed: 6, ..Default::default() };
    println!("classifier: {} crops, {} steps...", examples.len(), cconfig.steps);
    let (classifier, _) = train_classifier(&examples, ctopo, &cconfig)?;

    // --- Inference + evaluation on unseen scenes. ---------------------------
    let mut agnostic_images = Vec::new();
    let mut classified_images = Vec::new();
    for scene in &test_scenes {
        let dets = localize_image(
            &scene.raster,
            &localizer,
            &priors,
            CropStrategy::TwoScale,
            0.5,
            10,
        )?;
        let scored = score_detections(&dets, &classifier, &scene.raster, SquareRegion::Max)?;
        agnostic_images.push(EvalImage { detections: dets, gt: scene.objects.clone() });
        classified_images.push(EvalImage { detections: scored, gt: scene.objects.clone() });
    }

    let curve = budget_curve(&agnostic_images, 0.5, 10);
    println!("\ndetection rate vs proposal budget (IoU 0.5):");
    for &(n, rate) in &curve.points {
        if n == 1 || n % 2 == 0 {
            println!("  top {n:>2}: {rate:.4}");
        }
    }

    let mut scored_pairs = Vec::new();
    for im in &agnostic_images {
        for m in multibox::evalkit::match_detections(&im.detections, &im.gt, 0.5, false) {
            scored_pairs.push((m.detection.score(), m.is_true_positive));
        }
    }
    let total_gt: usize = agnostic_images.iter().map(|im| im.gt.len()).sum();
    let ap = average_precision(&scored_pairs, total_gt, ApStyle::Voc2007_11pt)?;
    println!("agnostic AP (11-point): {:.4}", ap.ap);

    let per_class = multibox::evalkit::per_class_average_precision(
        &classified_images,
        0.5,
        ApStyle::Voc2007_11pt,
    );
    print!("per-class AP:");
    for (class, curve) in &per_class {
        print!("  {class}: {:.4}", curve.ap);
    }
    println!();
    if let Some(map) = multibox::evalkit::mean_average_precision(&per_class) {
        println!("mAP: {map:.4}");
    }

    Ok(())
}
