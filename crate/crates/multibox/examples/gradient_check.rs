//! Finite-difference verification of the analytic gradients, first on the
//! loss inputs directly, then end to end through the predictor network.

use multibox::gradcheck::{central_diff, central_diff_sparse, max_rel_error};
use multibox::loss::{multibox_loss, GroundTruthSet, MatchMode, PredictionSet};
use multibox::predictor::{backward, forward, LocalizerTopology, ModelParams};
use multibox::priors::fit_priors;
use multibox::NormBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> NormBox {
    let x0: f64 = rng.random_range(0.0..0.7);
    let y0: f64 = rng.random_range(0.0..0.7);
    let w: f64 = rng.random_range(0.05..0.3);
    let h: f64 = rng.random_range(0.05..0.3);
    NormBox::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0))
}

/// Loss as a function of the flattened (locations, logits) vector, with the
/// assignment re-solved at every evaluation.
fn loss_at(x: &[f64], k: usize, gt: &GroundTruthSet, alpha: f64) -> f64 {
    let locations: Vec<[f64; 4]> =
        (0..k).map(|i| [x[4 * i], x[4 * i + 1], x[4 * i + 2], x[4 * i + 3]]).collect();
    let logits = x[4 * k..].to_vec();
    let preds = PredictionSet::from_logits(locations, logits).unwrap();
    multibox_loss(&preds, gt, alpha, MatchMode::Direct, None).unwrap().f_total
}

fn main() -> multibox::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // --- Loss-level check over random instances. -------------------------
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=6);
        let m = rng.random_range(1..=k.min(3));
        let locations: Vec<[f64; 4]> = (0..k).map(|_| random_box(&mut rng).to_array()).collect();
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gt = GroundTruthSet::new((0..m).map(|_| random_box(&mut rng)).collect());
        let alpha = 0.3;

        let preds = PredictionSet::from_logits(locations.clone(), logits.clone())?;
        let report = multibox_loss(&preds, &gt, alpha, MatchMode::Direct, None)?;
        let mut analytic: Vec<f64> = Vec::with_capacity(5 * k);
        for g in &report.grad_locations {
            analytic.extend_from_slice(g);
        }
        analytic.extend_from_slice(&report.grad_logits);

        let mut x: Vec<f64> = Vec::with_capacity(5 * k);
        for l in &locations {
            x.extend_from_slice(l);
        }
        x.extend_from_slice(&logits);
        let numeric = central_diff(|x| loss_at(x, k, &gt, alpha), &x, 1e-6);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    println!("loss-level: max relative error over 20 instances = {worst:.3e}");

    // --- End-to-end check through the network. ---------------------------
    let priors = fit_priors(
        &(0..12).map(|_| random_box(&mut rng)).collect::<Vec<_>>(),
        4,
        7,
    )?;
    let topo = LocalizerTopology { input: 64, hidden1: 16, hidden2: 8, k: 4 };
    let params = ModelParams::init(topo, 5);
    let pixels: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let gt = GroundTruthSet::new(vec![random_box(&mut rng), random_box(&mut rng)]);
    let alpha = 0.3;

    // Freeze the assignment found at the base point so the objective is
    // differentiable along every probed coordinate.
    let base = multibox_loss(
        &forward(&params, &pixels, &priors)?,
        &gt,
        alpha,
        MatchMode::PriorMatching,
        Some(&priors),
    )?;
    let analytic = backward(&params, &pixels, &base)?;

    let n = params.theta().len();
    let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..n)).collect();
    let assignment = base.assignment.clone();
    let f = |theta: &[f64]| {
        let mut p = ModelParams::zeros(topo);
        p.theta_mut().copy_from_slice(theta);
        let preds = forward(&p, &pixels, &priors).unwrap();
        multibox::loss::loss_and_grad(&preds, &gt, alpha, &assignment).unwrap().f_total
    };
    let numeric = central_diff_sparse(f, params.theta(), 1e-5, &coords);
    let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    let err = max_rel_error(&picked, &numeric);
    println!("end-to-end: {n} parameters, 40 probed coordinates, max relative error = {err:.3e}");

    Ok(())
}
