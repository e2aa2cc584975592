//! Round-trips every on-disk artifact: scenes with their raster sidecar,
//! priors, checkpoints, crop sets, detections, and the training log. All
//! formats reload bit-exactly, which is what makes reruns byte-identical.

use multibox::datagen::{
    generate_scenes, load_scenes, make_classifier_crops, sample_crops_bucketed,
    save_classifier_crops, save_localizer_crops, save_scenes, SceneConfig,
};
use multibox::postprocess::{save_detections, load_detections, Detection, ImageDetections};
use multibox::predictor::{
    load_localizer_checkpoint, save_localizer_checkpoint, write_training_log,
    LocalizerTopology, LogRow, ModelParams,
};
use multibox::priors::{fit_priors, load_priors, save_priors};
use multibox::NormBox;

fn main() -> multibox::Result<()> {
    let dir = std::env::temp_dir().join("multibox_formats_demo");
    std::fs::create_dir_all(&dir)?;

    // Scenes: JSONL header + records, pixels in a binary sidecar next to it.
    let scenes = generate_scenes(&SceneConfig { n_scenes: 5, seed: 4, ..Default::default() })?;
    let scenes_path = dir.join("scenes.jsonl");
    save_scenes(&scenes_path, &scenes, 3)?;
    let (back, classes) = load_scenes(&scenes_path)?;
    println!(
        "scenes: wrote {}, reloaded {} (classes = {classes}), equal = {}",
        scenes.len(),
        back.len(),
        back == scenes
    );
    let header = std::fs::read_to_string(&scenes_path)?.lines().next().unwrap().to_string();
    println!("  header: {header}");

    // Priors: versioned text, full-precision hex-free floats.
    let boxes: Vec<NormBox> =
        scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.bbox)).collect();
    let mut priors = fit_priors(&boxes, 4, 2)?;
    priors.set_source("formats-demo");
    let priors_path = dir.join("priors.txt");
    save_priors(&priors_path, &priors)?;
    let priors_back = load_priors(&priors_path)?;
    println!(
        "priors: k = {}, reloaded boxes identical = {}",
        priors_back.k(),
        priors_back.priors() == priors.priors()
    );
    for line in std::fs::read_to_string(&priors_path)?.lines().take(2) {
        println!("  {line}");
    }

    // Checkpoints: text header, little-endian f64 parameter block.
    let topo = LocalizerTopology { input: 16, hidden1: 8, hidden2: 4, k: 4 };
    let params = ModelParams::init(topo, 3);
    let ckpt_path = dir.join("loc.ckpt");
    save_localizer_checkpoint(&ckpt_path, &params)?;
    let params_back = load_localizer_checkpoint(&ckpt_path)?;
    println!(
        "checkpoint: {} params, bit-exact reload = {}",
        params.theta().len(),
        params_back.theta() == params.theta()
    );

    // Crop sets: localizer crops keep their window and coverage bucket;
    // classifier crops keep window and label.
    let (crops, _) = sample_crops_bucketed(&scenes[0], 2, 8);
    save_localizer_crops(&dir.join("loc_crops.jsonl"), &crops)?;
    let ccrops = make_classifier_crops(&scenes, 3, 0.5, 0.2, 9)?;
    save_classifier_crops(&dir.join("cls_crops.jsonl"), &ccrops)?;
    println!("crops: {} localizer, {} classifier", crops.len(), ccrops.len());

    // Detections: headerless text, class -1 when agnostic.
    let dets = vec![ImageDetections {
        image_id: 0,
        detections: vec![
            Detection::agnostic(NormBox::new(0.1, 0.1, 0.4, 0.5), 0.9),
            Detection::agnostic(NormBox::new(0.5, 0.5, 0.8, 0.8), 0.6).with_class(2, 0.7),
        ],
    }];
    let det_path = dir.join("dets.txt");
    save_detections(&det_path, &dets)?;
    println!("detections file:");
    for line in std::fs::read_to_string(&det_path)?.lines() {
        println!("  {line}");
    }
    let dets_back = load_detections(&det_path)?;
    println!("  reloaded equal = {}", dets_back == dets);

    // Training log: plain CSV.
    let mut log_bytes = Vec::new();
    write_training_log(
        &mut log_bytes,
        &[LogRow { step: 1, f_total: 2.5, f_match: 4.0, f_conf: 1.3 }],
    )?;
    println!("training log:\n  {}", String::from_utf8(log_bytes).unwrap().replace('\n', "\n  "));

    println!("artifacts in {}", dir.display());
    Ok(())
}
