//! Detection metrics on a small hand-built benchmark: greedy matching,
//! budget curves, average precision in both styles, and detection@k.

use multibox::datagen::SceneObject;
use multibox::evalkit::{
    average_precision, budget_curve, detection_at_k, match_detections,
    mean_average_precision, per_class_average_precision, write_budget_curve_csv,
    write_pr_csv, ApStyle, EvalImage, TopKImage,
};
use multibox::postprocess::Detection;
use multibox::NormBox;

fn obj(class: usize, x: f64, y: f64, s: f64) -> SceneObject {
    SceneObject { class_label: class, bbox: NormBox::new(x, y, x + s, y + s) }
}

fn det(class: usize, x: f64, y: f64, s: f64, conf: f64, score: f64) -> Detection {
    Detection::agnostic(NormBox::new(x, y, x + s, y + s), conf).with_class(class, score)
}

fn main() -> multibox::Result<()> {
    // Three images. Image 0: both objects found, plus one duplicate and one
    // stray. Image 1: one of two found. Image 2: clean single hit.
    let images = vec![
        EvalImage {
            detections: vec![
                det(0, 0.10, 0.10, 0.2, 0.95, 0.9),
                det(1, 0.60, 0.60, 0.2, 0.90, 0.8),
                det(0, 0.11, 0.11, 0.2, 0.70, 0.9), // duplicate of the first
                det(2, 0.40, 0.05, 0.1, 0.40, 0.5), // hits nothing
            ],
            gt: vec![obj(0, 0.10, 0.10, 0.2), obj(1, 0.60, 0.60, 0.2)],
        },
        EvalImage {
            detections: vec![det(2, 0.30, 0.30, 0.25, 0.85, 0.95)],
            gt: vec![obj(2, 0.30, 0.30, 0.25), obj(0, 0.70, 0.10, 0.15)],
        },
        EvalImage {
            detections: vec![det(1, 0.50, 0.20, 0.3, 0.80, 0.7)],
            gt: vec![obj(1, 0.52, 0.22, 0.3)],
        },
    ];

    println!("greedy matching on image 0 (IoU 0.5, class-aware):");
    for m in match_detections(&images[0].detections, &images[0].gt, 0.5, true) {
        println!(
            "  class {} score {:.3} -> {}",
            m.detection.class_label.unwrap(),
            m.detection.score(),
            if m.is_true_positive { "TP" } else { "FP" }
        );
    }

    // Detection rate as the per-image proposal budget grows. Duplicates
    // can't double-claim, so the curve counts distinct objects.
    let curve = budget_curve(&images, 0.5, 4);
    println!("\nbudget curve (5 objects total):");
    let mut csv = Vec::new();
    write_budget_curve_csv(&mut csv, &curve)?;
    print!("{}", String::from_utf8(csv).unwrap());

    // Class-agnostic AP from pooled (score, tp) pairs.
    let mut scored = Vec::new();
    for im in &images {
        for m in match_detections(&im.detections, &im.gt, 0.5, false) {
            scored.push((m.detection.score(), m.is_true_positive));
        }
    }
    let total_gt: usize = images.iter().map(|im| im.gt.len()).sum();
    let ap11 = average_precision(&scored, total_gt, ApStyle::Voc2007_11pt)?;
    let auc = average_precision(&scored, total_gt, ApStyle::Auc)?;
    println!("\nagnostic AP: 11-point = {:.4}, exact area = {:.4}", ap11.ap, auc.ap);

    println!("\nper-class AP (11-point):");
    let per_class = per_class_average_precision(&images, 0.5, ApStyle::Voc2007_11pt);
    for (class, curve) in &per_class {
        println!("  class {class}: AP = {:.4}", curve.ap);
        let mut csv = Vec::new();
        write_pr_csv(&mut csv, curve)?;
        for line in String::from_utf8(csv).unwrap().lines() {
            println!("    {line}");
        }
    }
    println!(
        "mAP = {:.4}",
        mean_average_precision(&per_class).expect("classes present")
    );

    // detection@k on the strongest pair per class per image.
    let topk: Vec<TopKImage> = images
        .iter()
        .enumerate()
        .map(|(id, im)| {
            let mut pairs: Vec<(usize, NormBox)> = Vec::new();
            let mut dets = im.detections.clone();
            dets.sort_by(|a, b| b.score().total_cmp(&a.score()));
            for d in &dets {
                let class = d.class_label.unwrap();
                if !pairs.iter().any(|&(c, _)| c == class) {
                    pairs.push((class, d.bbox));
                }
            }
            TopKImage { image_id: id as u64, pairs, gt: im.gt.clone() }
        })
        .collect();
    for k in 1..=3 {
        println!("detection@{k} = {:.4}", detection_at_k(&topk, k)?);
    }

    Ok(())
}
