//! Generates a few synthetic scenes, renders one as ASCII art, and samples
//! coverage-bucketed crops from it.

use multibox::datagen::{
    generate_scenes, sample_crops_bucketed, union_coverage, SceneConfig,
};
use multibox::geometry::ScaleTag;

const SHADES: &[u8] = b" .:-=+*#%@";

fn main() -> multibox::Result<()> {
    let config = SceneConfig { n_scenes: 4, seed: 9, ..SceneConfig::default() };
    let scenes = generate_scenes(&config)?;

    for scene in &scenes {
        let classes: Vec<String> =
            scene.objects.iter().map(|o| o.class_label.to_string()).collect();
        println!(
            "scene {}: {} objects (classes {})",
            scene.image_id,
            scene.objects.len(),
            classes.join(", ")
        );
    }

    // Render the first scene at half resolution, one character per 2x2
    // pixel block. Class 0 paints brightest, class 2 dimmest.
    let scene = &scenes[0];
    let r = &scene.raster;
    println!("\nscene {} ({}x{} pixels):", scene.image_id, r.width, r.height);
    for by in 0..r.height / 2 {
        let mut line = String::new();
        for bx in 0..r.width / 2 {
            let mut total = 0u32;
            for dy in 0..2 {
                for dx in 0..2 {
                    total += r.pixels[(by * 2 + dy) * r.width + bx * 2 + dx] as u32;
                }
            }
            let shade = (total / 4) as usize * (SHADES.len() - 1) / 255;
            line.push(SHADES[shade] as char);
        }
        println!("  {line}");
    }
    println!("\nground truth (normalized [xmin ymin xmax ymax]):");
    for o in &scene.objects {
        let b = o.bbox;
        println!(
            "  class {}: [{:.3} {:.3} {:.3} {:.3}]",
            o.class_label, b.xmin, b.ymin, b.xmax, b.ymax
        );
    }

    // Crops are drawn until each coverage bucket has its quota or the
    // attempt budget runs out; sparse scenes often can't fill 50-100%.
    let (crops, report) = sample_crops_bucketed(scene, 3, 123);
    println!("\nbucketed crops (3 requested per bucket):");
    for r in &report {
        println!(
            "  {:>7}%: filled {}/{} in {} attempts{}",
            r.bucket.label(),
            r.filled,
            r.requested,
            r.attempts,
            if r.unfillable { "  (gave up)" } else { "" }
        );
    }
    println!("\nsampled windows:");
    for c in &crops {
        let w = c.window.window;
        let tag = match c.window.scale_tag {
            ScaleTag::Full => "full",
            ScaleTag::Sub => "sub",
        };
        let gt: Vec<_> = scene.objects.iter().map(|o| o.bbox).collect();
        // Stored ratio is exactly what union_coverage reports.
        assert_eq!(c.coverage_ratio, union_coverage(&gt, &w));
        println!(
            "  [{:.3} {:.3} {:.3} {:.3}] {:<4} coverage {:.4} -> bucket {}",
            w.xmin,
            w.ymin,
            w.xmax,
            w.ymax,
            tag,
            c.coverage_ratio,
            c.bucket.label()
        );
    }

    Ok(())
}
