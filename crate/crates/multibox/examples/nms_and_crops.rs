//! Shows the two inference crop layouts and the strict-inequality greedy
//! NMS, including the chain case where suppressing a middle box revives a
//! later one.

use multibox::geometry::{jaccard, NormBox};
use multibox::postprocess::{crop_windows, nms, CropStrategy, Detection};

fn show_windows(strategy: CropStrategy, name: &str) {
    let windows = crop_windows(strategy);
    println!("{name}: {} windows", windows.len());
    for (i, w) in windows.iter().enumerate() {
        let b = w.window;
        println!(
            "  {:>2}: [{:.1} {:.1} {:.1} {:.1}]  {:?}",
            i, b.xmin, b.ymin, b.xmax, b.ymax, w.scale_tag
        );
    }
}

fn main() {
    show_windows(CropStrategy::MaxCenter, "max_center");
    println!();
    show_windows(CropStrategy::TwoScale, "two_scale");

    // Chain: A and C are disjoint halves of B, so IoU(A,B) = IoU(B,C) = 0.5
    // and IoU(A,C) = 0. At threshold 0.5 the strict inequality kills B
    // against A, which frees C.
    let a = NormBox::new(0.0, 0.0, 0.5, 1.0);
    let b = NormBox::new(0.0, 0.0, 1.0, 1.0);
    let c = NormBox::new(0.5, 0.0, 1.0, 1.0);
    println!(
        "\nchain IoUs: A-B {:.2}, B-C {:.2}, A-C {:.2}",
        jaccard(&a, &b),
        jaccard(&b, &c),
        jaccard(&a, &c)
    );
    let chain = vec![
        Detection::agnostic(a, 0.9),
        Detection::agnostic(b, 0.8),
        Detection::agnostic(c, 0.7),
    ];
    let kept = nms(&chain, 0.5);
    println!("nms(chain, 0.5) keeps {} boxes:", kept.len());
    for d in &kept {
        let bb = d.bbox;
        println!(
            "  conf {:.1}  [{:.1} {:.1} {:.1} {:.1}]",
            d.localizer_conf, bb.xmin, bb.ymin, bb.xmax, bb.ymax
        );
    }

    // A cluster of near-duplicates collapses to its strongest member.
    let cluster: Vec<Detection> = (0..5)
        .map(|i| {
            let o = i as f64 * 0.01;
            Detection::agnostic(NormBox::new(0.2 + o, 0.2, 0.5 + o, 0.5), 0.5 + o)
        })
        .collect();
    let kept = nms(&cluster, 0.5);
    println!(
        "\nnms(5 near-duplicates, 0.5) keeps {}: strongest conf = {:.2}",
        kept.len(),
        kept[0].localizer_conf
    );

    // NMS output is a fixed point of NMS.
    let again = nms(&kept, 0.5);
    println!("idempotent: {}", again == kept);
}
