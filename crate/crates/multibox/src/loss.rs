//! Bipartite-matching multibox loss with exact gradients.
//!
//! Predictions are K location 4-vectors plus K confidence logits. Training
//! assigns each ground-truth box to exactly one prediction slot (minimizing
//! the combined localization + confidence objective), then scores
//!
//! ```text
//! F = alpha * f_match + f_conf
//! f_match = sum over matched (i,j) of 1/2 * ||l_i - g_j||^2
//! f_conf  = -sum matched log(c_i) - sum unmatched log(1 - c_i)
//! ```
//!
//! Gradients are taken with the assignment held fixed: the location gradient
//! is `alpha * (l_i - g_j)` on matched slots and zero elsewhere, and the
//! logit gradient is `c_i - x_i` where `x_i` is 1 for matched slots.

use crate::error::{MultiboxError, Result};
use crate::geometry::{clip, NormBox};
use crate::priors::PriorSet;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^t)`; never overflows and never returns NaN
/// for finite input. Satisfies `softplus(-z) == softplus(z) - z` exactly in
/// real arithmetic, which is what keeps the confidence loss finite at
/// saturated logits.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sqdist4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for k in 0..4 {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

/// The boxes an example is labeled with. Boxes are clipped to the unit
/// square on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    boxes: Vec<NormBox>,
}

impl GroundTruthSet {
    pub fn new(boxes: Vec<NormBox>) -> Self {
        GroundTruthSet { boxes: boxes.iter().map(clip).collect() }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[NormBox] {
        self.boxes.as_slice()
    }
}

/// One model output: K location 4-vectors `[xmin, ymin, xmax, ymax]` (raw —
/// they may lie outside the unit square and are only clipped at inference)
/// and K confidence logits. Confidences are derived, never stored
/// independently, so `confidences[i] == sigmoid(logits[i])` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    locations: Vec<[f64; 4]>,
    logits: Vec<f64>,
    confidences: Vec<f64>,
}

impl PredictionSet {
    pub fn from_logits(locations: Vec<[f64; 4]>, logits: Vec<f64>) -> Result<Self> {
        if locations.len() != logits.len() {
            return Err(MultiboxError::ShapeMismatch {
                what: "prediction logits",
                expected: locations.len(),
                actual: logits.len(),
            });
        }
        let confidences = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(PredictionSet { locations, logits, confidences })
    }

    pub fn k(&self) -> usize {
        self.locations.len()
    }

    pub fn locations(&self) -> &[[f64; 4]] {
        &self.locations
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }
}

/// A feasible matching: every ground-truth index claimed by exactly one
/// prediction slot, every slot claiming at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    slot_to_gt: Vec<Option<usize>>,
    num_gt: usize,
}

impl Assignment {
    /// Validates the exactly-once constraint over `num_gt` ground-truth
    /// indices.
    pub fn from_slots(slot_to_gt: Vec<Option<usize>>, num_gt: usize) -> Result<Self> {
        if slot_to_gt.len() < num_gt {
            return Err(MultiboxError::InfeasibleMatch {
                predictions: slot_to_gt.len(),
                ground_truth: num_gt,
            });
        }
        let mut seen = vec![false; num_gt];
        for &s in &slot_to_gt {
            if let Some(j) = s {
                if j >= num_gt {
                    return Err(MultiboxError::InvalidAssignment(format!(
                        "slot claims ground truth {j} but only {num_gt} exist"
                    )));
                }
                if seen[j] {
                    return Err(MultiboxError::InvalidAssignment(format!(
                        "ground truth {j} claimed twice"
                    )));
                }
                seen[j] = true;
            }
        }
        if let Some(j) = seen.iter().position(|&s| !s) {
            return Err(MultiboxError::InvalidAssignment(format!(
                "ground truth {j} unclaimed"
            )));
        }
        Ok(Assignment { slot_to_gt, num_gt })
    }

    /// The all-unmatched assignment over `k` slots (zero ground truth).
    pub fn empty(k: usize) -> Self {
        Assignment { slot_to_gt: vec![None; k], num_gt: 0 }
    }

    pub fn slots(&self) -> &[Option<usize>] {
        &self.slot_to_gt
    }

    pub fn num_gt(&self) -> usize {
        self.num_gt
    }

    /// Matched `(slot, ground_truth)` pairs in slot order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slot_to_gt
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|j| (i, j)))
    }
}

/// Loss value, its two components, and exact gradients with respect to the
/// prediction locations and confidence logits.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub f_total: f64,
    pub f_match: f64,
    pub f_conf: f64,
    pub grad_locations: Vec<[f64; 4]>,
    pub grad_logits: Vec<f64>,
    pub assignment: Assignment,
}

/// How the assignment side of the loss is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Assignment solved on the current predictions.
    Direct,
    /// Assignment solved on fixed priors with a location-only cost; the
    /// loss is then taken on the predictions occupying the matched slots.
    PriorMatching,
}

/// Cost of matching prediction `(l, c)` to ground truth `g`, relative to
/// leaving the slot unmatched: `alpha/2 * ||l - g||^2 - ln c + ln(1 - c)`.
///
/// Requires `c` strictly inside (0,1). Internally the solver works on the
/// equivalent logit form `alpha/2 * d^2 - z`, which stays finite at
/// saturated confidences; this function is the reference formula.
pub fn match_cost(l: &[f64; 4], c: f64, g: &NormBox, alpha: f64) -> f64 {
    alpha * 0.5 * sqdist4(l, &g.to_array()) - c.ln() + (1.0 - c).ln()
}

/// Minimum-cost assignment of `rows` items to distinct columns
/// (`rows <= cols`), via augmenting paths with potentials. Returns the
/// column chosen for each row. Ties are resolved by the ascending scan
/// order, so the result is deterministic for identical cost values.
fn hungarian_min(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(rows <= cols);
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    // p[j] = 1-based row matched to column j; 0 means free. Column 0 is a
    // virtual staging slot for the row currently being placed.
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; rows];
    for (j, &pj) in p.iter().enumerate().skip(1) {
        if pj != 0 {
            row_to_col[pj - 1] = j - 1;
        }
    }
    row_to_col
}

fn assignment_from_rows(row_to_col: &[usize], k: usize, num_gt: usize) -> Assignment {
    let mut slot_to_gt = vec![None; k];
    for (j, &i) in row_to_col.iter().enumerate() {
        slot_to_gt[i] = Some(j);
    }
    Assignment { slot_to_gt, num_gt }
}

/// Optimal assignment of ground-truth boxes to prediction slots under the
/// combined cost. Errors with `InfeasibleMatch` when there are more boxes
/// than slots.
pub fn solve_assignment(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    alpha: f64,
) -> Result<Assignment> {
    let k = preds.k();
    let m = gt.len();
    if m > k {
        return Err(MultiboxError::InfeasibleMatch { predictions: k, ground_truth: m });
    }
    if m == 0 {
        return Ok(Assignment::empty(k));
    }
    let gt_arrays: Vec<[f64; 4]> = gt.boxes().iter().map(|b| b.to_array()).collect();
    // Logit form of match_cost: alpha/2 * ||l - g||^2 - z. Exactly equal to
    // the reference formula and finite for any logit.
    let row_to_col = hungarian_min(m, k, |j, i| {
        alpha * 0.5 * sqdist4(&preds.locations[i], &gt_arrays[j]) - preds.logits[i]
    });
    Ok(assignment_from_rows(&row_to_col, k, m))
}

/// Location-only assignment of ground truth to prior slots, minimizing
/// `sum 1/2 * ||p_i - g_j||^2`.
pub fn solve_prior_assignment(priors: &PriorSet, gt: &GroundTruthSet) -> Result<Assignment> {
    let k = priors.k();
    let m = gt.len();
    if m > k {
        return Err(MultiboxError::InfeasibleMatch { predictions: k, ground_truth: m });
    }
    if m == 0 {
        return Ok(Assignment::empty(k));
    }
    let prior_arrays: Vec<[f64; 4]> = priors.priors().iter().map(|b| b.to_array()).collect();
    let gt_arrays: Vec<[f64; 4]> = gt.boxes().iter().map(|b| b.to_array()).collect();
    let row_to_col =
        hungarian_min(m, k, |j, i| 0.5 * sqdist4(&prior_arrays[i], &gt_arrays[j]));
    Ok(assignment_from_rows(&row_to_col, k, m))
}

/// Loss and gradients for a fixed assignment.
///
/// `f_conf` is accumulated through the stable softplus identities
/// `-ln c = softplus(-z)` and `-ln(1-c) = softplus(z)`, so it stays finite
/// at saturated logits.
pub fn loss_and_grad(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    alpha: f64,
    assignment: &Assignment,
) -> Result<LossReport> {
    let k = preds.k();
    if assignment.slots().len() != k {
        return Err(MultiboxError::ShapeMismatch {
            what: "assignment slots",
            expected: k,
            actual: assignment.slots().len(),
        });
    }
    if assignment.num_gt() != gt.len() {
        return Err(MultiboxError::ShapeMismatch {
            what: "assignment ground-truth count",
            expected: gt.len(),
            actual: assignment.num_gt(),
        });
    }
    let mut f_match = 0.0;
    let mut f_conf = 0.0;
    let mut grad_locations = vec![[0.0f64; 4]; k];
    let mut grad_logits = vec![0.0f64; k];
    for i in 0..k {
        let z = preds.logits[i];
        let c = preds.confidences[i];
        match assignment.slots()[i] {
            Some(j) => {
                let g = gt.boxes()[j].to_array();
                let l = &preds.locations[i];
                f_match += 0.5 * sqdist4(l, &g);
                for d in 0..4 {
                    grad_locations[i][d] = alpha * (l[d] - g[d]);
                }
                f_conf += softplus(-z);
                grad_logits[i] = c - 1.0;
            }
            None => {
                f_conf += softplus(z);
                grad_logits[i] = c;
            }
        }
    }
    Ok(LossReport {
        f_total: alpha * f_match + f_conf,
        f_match,
        f_conf,
        grad_locations,
        grad_logits,
        assignment: assignment.clone(),
    })
}

/// Full loss: solve the assignment per `mode`, then score and differentiate.
pub fn multibox_loss(
    preds: &PredictionSet,
    gt: &GroundTruthSet,
    alpha: f64,
    mode: MatchMode,
    priors: Option<&PriorSet>,
) -> Result<LossReport> {
    let assignment = match mode {
        MatchMode::Direct => solve_assignment(preds, gt, alpha)?,
        MatchMode::PriorMatching => {
            let priors = priors.ok_or(MultiboxError::MissingPriors)?;
            if priors.k() != preds.k() {
                return Err(MultiboxError::ShapeMismatch {
                    what: "prior set",
                    expected: preds.k(),
                    actual: priors.k(),
                });
            }
            solve_prior_assignment(priors, gt)?
        }
    };
    loss_and_grad(preds, gt, alpha, &assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, k: usize, m: usize) -> (PredictionSet, GroundTruthSet) {
        let locations: Vec<[f64; 4]> = (0..k)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.2..1.2)))
            .collect();
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let boxes: Vec<NormBox> = (0..m)
            .map(|_| {
                NormBox::from_corners(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        (
            PredictionSet::from_logits(locations, logits).unwrap(),
            GroundTruthSet::new(boxes),
        )
    }

    /// Exhaustive minimum over all injective maps from ground truth to slots.
    fn brute_force_cost(preds: &PredictionSet, gt: &GroundTruthSet, alpha: f64) -> f64 {
        fn recurse(
            j: usize,
            preds: &PredictionSet,
            gt: &GroundTruthSet,
            alpha: f64,
            used: &mut Vec<bool>,
            acc: f64,
            best: &mut f64,
        ) {
            if j == gt.len() {
                *best = best.min(acc);
                return;
            }
            for i in 0..preds.k() {
                if !used[i] {
                    used[i] = true;
                    let c = match_cost(
                        &preds.locations()[i],
                        preds.confidences()[i],
                        &gt.boxes()[j],
                        alpha,
                    );
                    recurse(j + 1, preds, gt, alpha, used, acc + c, best);
                    used[i] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; preds.k()];
        recurse(0, preds, gt, alpha, &mut used, 0.0, &mut best);
        best
    }

    fn assignment_cost(
        preds: &PredictionSet,
        gt: &GroundTruthSet,
        alpha: f64,
        a: &Assignment,
    ) -> f64 {
        a.pairs()
            .map(|(i, j)| {
                match_cost(&preds.locations()[i], preds.confidences()[i], &gt.boxes()[j], alpha)
            })
            .sum()
    }

    #[test]
    fn match_cost_examples() {
        let g = NormBox::new(0.2, 0.3, 0.6, 0.7);
        assert!(match_cost(&g.to_array(), 0.5, &g, 1.0).abs() < 1e-15);

        let l = [0.0; 4];
        let unit = NormBox::new(1.0, 1.0, 1.0, 1.0);
        assert!((match_cost(&l, 0.5, &unit, 1.0) - 2.0).abs() < 1e-15);

        let expected = (0.1f64).ln() - (0.9f64).ln();
        assert!((match_cost(&g.to_array(), 0.9, &g, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn logit_form_equals_reference_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (preds, gt) = random_instance(&mut rng, 3, 2);
            let alpha = rng.random_range(0.05..2.0);
            for i in 0..3 {
                for j in 0..2 {
                    let reference = match_cost(
                        &preds.locations()[i],
                        preds.confidences()[i],
                        &gt.boxes()[j],
                        alpha,
                    );
                    let logit_form = alpha * 0.5
                        * super::sqdist4(&preds.locations()[i], &gt.boxes()[j].to_array())
                        - preds.logits()[i];
                    assert!((reference - logit_form).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_and_forced_assignments() {
        let preds = PredictionSet::from_logits(vec![[0.1; 4], [0.5; 4]], vec![0.0, 0.0]).unwrap();
        let none = GroundTruthSet::new(vec![]);
        let a = solve_assignment(&preds, &none, 0.3).unwrap();
        assert_eq!(a.slots(), &[None, None]);

        let one_pred = PredictionSet::from_logits(vec![[0.2; 4]], vec![1.0]).unwrap();
        let one_gt = GroundTruthSet::new(vec![NormBox::new(0.1, 0.1, 0.6, 0.6)]);
        let a = solve_assignment(&one_pred, &one_gt, 0.3).unwrap();
        assert_eq!(a.slots(), &[Some(0)]);
    }

    #[test]
    fn infeasible_when_more_gt_than_slots() {
        let preds = PredictionSet::from_logits(vec![[0.0; 4]], vec![0.0]).unwrap();
        let gt = GroundTruthSet::new(vec![
            NormBox::new(0.0, 0.0, 0.5, 0.5),
            NormBox::new(0.5, 0.5, 1.0, 1.0),
        ]);
        assert!(matches!(
            solve_assignment(&preds, &gt, 0.3),
            Err(MultiboxError::InfeasibleMatch { predictions: 1, ground_truth: 2 })
        ));
    }

    #[test]
    fn assignment_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let m = rng.random_range(0..=4usize);
            let k = rng.random_range(m.max(1)..=8usize);
            let (preds, gt) = random_instance(&mut rng, k, m);
            let alpha = rng.random_range(0.05..2.0);
            let a = solve_assignment(&preds, &gt, alpha).unwrap();
            let solver = assignment_cost(&preds, &gt, alpha, &a);
            let oracle = if m == 0 { 0.0 } else { brute_force_cost(&preds, &gt, alpha) };
            assert!(
                (solver - oracle).abs() < 1e-9,
                "trial {trial}: solver {solver} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn loss_examples() {
        // Two slots, one box; matched slot sits exactly on the box and both
        // confidences are 1/2: f_match = 0, f_conf = 2 ln 2.
        let g = NormBox::new(0.2, 0.2, 0.7, 0.7);
        let preds =
            PredictionSet::from_logits(vec![g.to_array(), [0.9; 4]], vec![0.0, 0.0]).unwrap();
        let gt = GroundTruthSet::new(vec![g]);
        let report = multibox_loss(&preds, &gt, 0.3, MatchMode::Direct, None).unwrap();
        assert_eq!(report.assignment.slots(), &[Some(0), None]);
        assert!(report.f_match.abs() < 1e-15);
        assert!((report.f_conf - 2.0 * f64::ln(2.0)).abs() < 1e-12);
        assert!((report.grad_logits[0] - (-0.5)).abs() < 1e-15);
        assert!((report.grad_logits[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_limit() {
        let g0 = NormBox::new(0.1, 0.1, 0.4, 0.4);
        let g1 = NormBox::new(0.6, 0.6, 0.9, 0.9);
        let preds = PredictionSet::from_logits(
            vec![g0.to_array(), g1.to_array(), [0.5; 4]],
            vec![40.0, 40.0, -40.0],
        )
        .unwrap();
        let gt = GroundTruthSet::new(vec![g0, g1]);
        let report = multibox_loss(&preds, &gt, 0.3, MatchMode::Direct, None).unwrap();
        assert!(report.f_total < 1e-12);
        assert!(report.f_total >= 0.0);
    }

    #[test]
    fn decomposition_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let m = rng.random_range(0..=4usize);
            let k = rng.random_range(m.max(1)..=8usize);
            let (preds, gt) = random_instance(&mut rng, k, m);
            let alpha = rng.random_range(0.05..2.0);
            let r = multibox_loss(&preds, &gt, alpha, MatchMode::Direct, None).unwrap();
            assert!((r.f_total - (alpha * r.f_match + r.f_conf)).abs() < 1e-12);
            assert!(r.f_match >= 0.0);
            assert!(r.f_conf >= 0.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let m = rng.random_range(1..=5usize);
            let k = rng.random_range(m..=10usize);
            let (preds, gt) = random_instance(&mut rng, k, m);
            let alpha = rng.random_range(0.05..2.0);
            let assignment = solve_assignment(&preds, &gt, alpha).unwrap();
            let report = loss_and_grad(&preds, &gt, alpha, &assignment).unwrap();

            // Flatten (locations, logits) into one parameter vector and
            // evaluate the loss with the assignment held fixed.
            let mut x = Vec::with_capacity(5 * k);
            for l in preds.locations() {
                x.extend_from_slice(l);
            }
            x.extend_from_slice(preds.logits());
            let f = |x: &[f64]| {
                let locations: Vec<[f64; 4]> =
                    x[..4 * k].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
                let logits = x[4 * k..].to_vec();
                let p = PredictionSet::from_logits(locations, logits).unwrap();
                loss_and_grad(&p, &gt, alpha, &assignment).unwrap().f_total
            };
            let numeric = central_diff(f, &x, 1e-6);
            let mut analytic = Vec::with_capacity(5 * k);
            for gl in &report.grad_locations {
                analytic.extend_from_slice(gl);
            }
            analytic.extend_from_slice(&report.grad_logits);
            assert!(max_rel_error(&analytic, &numeric) < 1e-5);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (preds, gt) = random_instance(&mut rng, 6, 3);
        let alpha = 0.7;
        let base = multibox_loss(&preds, &gt, alpha, MatchMode::Direct, None).unwrap();

        // Reverse the slot order.
        let perm: Vec<usize> = (0..6).rev().collect();
        let locations: Vec<[f64; 4]> = perm.iter().map(|&i| preds.locations()[i]).collect();
        let logits: Vec<f64> = perm.iter().map(|&i| preds.logits()[i]).collect();
        let permuted = PredictionSet::from_logits(locations, logits).unwrap();
        let shuffled = multibox_loss(&permuted, &gt, alpha, MatchMode::Direct, None).unwrap();

        assert!((base.f_total - shuffled.f_total).abs() < 1e-12);
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert_eq!(shuffled.assignment.slots()[new_i], base.assignment.slots()[old_i]);
            assert_eq!(shuffled.grad_logits[new_i], base.grad_logits[old_i]);
            assert_eq!(shuffled.grad_locations[new_i], base.grad_locations[old_i]);
        }
    }

    #[test]
    fn alpha_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (preds, gt) = random_instance(&mut rng, 5, 2);
        let alpha = 0.4;
        let assignment = solve_assignment(&preds, &gt, alpha).unwrap();
        let r1 = loss_and_grad(&preds, &gt, alpha, &assignment).unwrap();
        let r2 = loss_and_grad(&preds, &gt, 2.0 * alpha, &assignment).unwrap();
        assert!((r2.f_total - r2.f_conf - 2.0 * (r1.f_total - r1.f_conf)).abs() < 1e-12);
        assert_eq!(r1.grad_logits, r2.grad_logits);
        for i in 0..5 {
            for d in 0..4 {
                assert!((r2.grad_locations[i][d] - 2.0 * r1.grad_locations[i][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_matching_diagonal_and_oracle() {
        // Priors identical to the ground truth: the zero-cost diagonal wins.
        let boxes = vec![
            NormBox::new(0.0, 0.0, 0.3, 0.3),
            NormBox::new(0.4, 0.4, 0.6, 0.6),
            NormBox::new(0.7, 0.7, 1.0, 1.0),
        ];
        let priors = PriorSet::from_boxes_unsorted(boxes.clone(), 0);
        let gt = GroundTruthSet::new(boxes);
        let preds = PredictionSet::from_logits(
            vec![[0.1; 4], [0.2; 4], [0.3; 4]],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        let r = multibox_loss(&preds, &gt, 0.3, MatchMode::PriorMatching, Some(&priors)).unwrap();
        assert_eq!(r.assignment.slots(), &[Some(0), Some(1), Some(2)]);

        // Prior-side assignment equals the brute-force location-only
        // minimum on random instances.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..100 {
            let m = rng.random_range(1..=4usize);
            let k = rng.random_range(m..=8usize);
            let prior_boxes: Vec<NormBox> = (0..k)
                .map(|_| {
                    NormBox::from_corners(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let priors = PriorSet::from_boxes_unsorted(prior_boxes.clone(), 0);
            let (_, gt) = random_instance(&mut rng, k, m);
            let a = solve_prior_assignment(&priors, &gt).unwrap();
            let cost: f64 = a
                .pairs()
                .map(|(i, j)| {
                    0.5 * super::sqdist4(
                        &prior_boxes[i].to_array(),
                        &gt.boxes()[j].to_array(),
                    )
                })
                .sum();

            // Location-only brute force.
            fn recurse(
                j: usize,
                priors: &[NormBox],
                gt: &[NormBox],
                used: &mut Vec<bool>,
                acc: f64,
                best: &mut f64,
            ) {
                if j == gt.len() {
                    *best = best.min(acc);
                    return;
                }
                for i in 0..priors.len() {
                    if !used[i] {
                        used[i] = true;
                        let c = 0.5
                            * super::sqdist4(&priors[i].to_array(), &gt[j].to_array());
                        recurse(j + 1, priors, gt, used, acc + c, best);
                        used[i] = false;
                    }
                }
            }
            let mut best = f64::INFINITY;
            let mut used = vec![false; k];
            recurse(0, &prior_boxes, gt.boxes(), &mut used, 0.0, &mut best);
            assert!((cost - best).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_matching_requires_priors() {
        let preds = PredictionSet::from_logits(vec![[0.0; 4]], vec![0.0]).unwrap();
        let gt = GroundTruthSet::new(vec![NormBox::new(0.1, 0.1, 0.5, 0.5)]);
        assert!(matches!(
            multibox_loss(&preds, &gt, 0.3, MatchMode::PriorMatching, None),
            Err(MultiboxError::MissingPriors)
        ));
    }

    #[test]
    fn assignment_validation() {
        assert!(Assignment::from_slots(vec![Some(0), None], 1).is_ok());
        assert!(Assignment::from_slots(vec![Some(0), Some(0)], 1).is_err());
        assert!(Assignment::from_slots(vec![None, None], 1).is_err());
        assert!(Assignment::from_slots(vec![Some(2)], 1).is_err());
        assert!(Assignment::from_slots(vec![Some(0)], 2).is_err());
    }

    #[test]
    fn softplus_identity_and_saturation() {
        for &z in &[-800.0, -40.0, -3.0, 0.0, 0.7, 40.0, 800.0] {
            let lhs = softplus(-z);
            let rhs = softplus(z) - z;
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
            assert!(softplus(z).is_finite());
        }
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
