//! Trains a small localizer on whole-scene examples and watches the loss
//! fall. Short on purpose; the end_to_end example runs the full recipe.

use multibox::datagen::{generate_scenes, localizer_example, SceneConfig};
use multibox::geometry::CropWindow;
use multibox::predictor::{
    evaluate_loss, forward, train_localizer, LocalizerTopology, TrainConfig,
};
use multibox::priors::fit_priors;
use multibox::NormBox;

fn main() -> multibox::Result<()> {
    let input_side = 24;
    let config = SceneConfig { n_scenes: 240, seed: 3, ..SceneConfig::default() };
    let scenes = generate_scenes(&config)?;

    let boxes: Vec<NormBox> =
        scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.bbox)).collect();
    let priors = fit_priors(&boxes, 8, 1)?;

    // One whole-image example per scene, last 40 held out.
    let dataset: Vec<_> = scenes
        .iter()
        .map(|s| localizer_example(s, &CropWindow::full(), input_side))
        .collect();
    let (train, holdout) = dataset.split_at(dataset.len() - 40);

    let topo = LocalizerTopology {
        input: input_side * input_side,
        hidden1: 32,
        hidden2: 16,
        k: priors.k(),
    };
    let train_config = TrainConfig {
        steps: 400,
        batch_size: 32,
        seed: 7,
        ..TrainConfig::default()
    };

    println!(
        "training: {} examples, {} parameters, {} steps",
        train.len(),
        topo.param_count(),
        train_config.steps
    );
    let (params, log) = train_localizer(train, &priors, topo, &train_config)?;

    println!("\n{:>5}  {:>9}  {:>9}  {:>9}", "step", "f_total", "f_match", "f_conf");
    for row in log.iter().filter(|r| r.step % 50 == 0 || r.step == 1) {
        println!(
            "{:>5}  {:>9.5}  {:>9.5}  {:>9.5}",
            row.step, row.f_total, row.f_match, row.f_conf
        );
    }

    let holdout_loss = evaluate_loss(
        &params,
        holdout,
        &priors,
        train_config.alpha,
        train_config.mode,
    )?;
    println!("\nholdout mean loss after training: {holdout_loss:.5}");

    // Peek at the slots on one held-out scene: confident slots should sit
    // near true boxes.
    let ex = &holdout[0];
    let preds = forward(&params, &ex.pixels, &priors)?;
    let mut order: Vec<usize> = (0..preds.k()).collect();
    order.sort_by(|&a, &b| preds.confidences()[b].total_cmp(&preds.confidences()[a]));
    println!("\ntop slots on one held-out scene ({} true boxes):", ex.gt.len());
    for &i in order.iter().take(3) {
        let l = preds.locations()[i];
        println!(
            "  slot {i}: conf {:.3}  loc [{:+.3} {:+.3} {:+.3} {:+.3}]",
            preds.confidences()[i],
            l[0],
            l[1],
            l[2],
            l[3]
        );
    }

    Ok(())
}
