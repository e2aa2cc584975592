//! Fits k-means box priors to the ground-truth boxes of a generated scene
//! set and shows the clustering trace and the residual encoding.

use multibox::datagen::{generate_scenes, SceneConfig};
use multibox::priors::{decode, encode_residual, fit_priors};
use multibox::NormBox;

fn main() -> multibox::Result<()> {
    let config = SceneConfig { n_scenes: 300, seed: 42, ..SceneConfig::default() };
    let scenes = generate_scenes(&config)?;
    let boxes: Vec<NormBox> =
        scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.bbox)).collect();
    println!("collected {} boxes from {} scenes", boxes.len(), scenes.len());

    let set = fit_priors(&boxes, 16, 1)?;
    let fit = set.meta().fit.as_ref().expect("fit stats present on fresh fits");
    println!(
        "k-means: k = {}, {} iterations, final objective = {:.6}",
        set.k(),
        fit.iterations,
        fit.objective
    );

    let trace = &fit.objective_trace;
    print!("objective trace:");
    for (i, v) in trace.iter().enumerate() {
        if i < 4 || i + 2 >= trace.len() {
            print!(" {v:.4}");
        } else if i == 4 {
            print!(" ...");
        }
    }
    println!();
    let monotone = trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    println!("non-increasing: {monotone}");

    println!("\npriors (sorted canonically):");
    println!("  {:>2}  {:>6} {:>6}  {:>6} {:>6}", "i", "cx", "cy", "w", "h");
    for (i, p) in set.priors().iter().enumerate() {
        println!(
            "  {:>2}  {:>6.3} {:>6.3}  {:>6.3} {:>6.3}",
            i,
            (p.xmin + p.xmax) / 2.0,
            (p.ymin + p.ymax) / 2.0,
            p.width(),
            p.height()
        );
    }

    // A predicted location is prior + residual; encode/decode is exact.
    let prior = set.priors()[0];
    let target = NormBox::new(0.2, 0.25, 0.4, 0.5);
    let r = encode_residual(&prior, &target);
    let back = decode(&prior, &r);
    println!("\nresidual for one target: [{:+.4}, {:+.4}, {:+.4}, {:+.4}]", r[0], r[1], r[2], r[3]);
    println!(
        "decode(prior, residual) == target: {}",
        back.to_array() == target.to_array()
    );

    Ok(())
}
