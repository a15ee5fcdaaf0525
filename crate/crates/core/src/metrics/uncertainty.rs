use ndarray::ArrayView4;
use serde::{Deserialize, Serialize};

use crate::error::{BeaError, Result};
use crate::geometry::channel;
use crate::tandem::TandemOutput;

use super::matching::EvaluatedDetection;

pub const ENTROPY_CLAMP: f64 = 1e-7;

/// Per-detection uncertainty: the complement of the confidence.
pub fn u_pred(confidence: f64) -> f64 {
    1.0 - confidence
}

/// Entropy (nats) of a Bernoulli variable, with `p` clamped to
/// `[clamp, 1 - clamp]`.
pub fn binary_entropy(p: f64, clamp: f64) -> f64 {
    let q = p.max(clamp).min(1.0 - clamp);
    -q * q.ln() - (1.0 - q) * (1.0 - q).ln()
}

/// Image-level OOD score from a tandem pair: per anchor, the Euclidean gap of
/// the box/confidence channels times the Euclidean gap of the per-class
/// binary entropies, averaged over anchors.
pub fn u_ood_image(out: &TandemOutput) -> f64 {
    let (a, b) = out.flat();
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let box_gap: f64 = channel::TANDEM
            .iter()
            .map(|&c| (a[[i, c]] - b[[i, c]]).powi(2))
            .sum::<f64>()
            .sqrt();
        let entropy_gap: f64 = (channel::CLASS0..a.ncols())
            .map(|c| {
                (binary_entropy(a[[i, c]], ENTROPY_CLAMP)
                    - binary_entropy(b[[i, c]], ENTROPY_CLAMP))
                .powi(2)
            })
            .sum::<f64>()
            .sqrt();
        total += box_gap * entropy_gap;
    }
    total / n as f64
}

/// OOD score for a single-head model: one minus its highest anchor confidence.
pub fn u_ood_single(grid: ArrayView4<f64>) -> f64 {
    let max_conf = grid
        .slice(ndarray::s![.., .., .., channel::CONF])
        .iter()
        .fold(0.0f64, |m, &v| m.max(v));
    1.0 - max_conf
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyError {
    pub ue: f64,
    pub delta_opt: f64,
    /// Fraction of correct detections rejected (`u > δ`).
    pub tprj: f64,
    /// Fraction of incorrect detections retained (`u <= δ`).
    pub fprt: f64,
}

/// Minimizes `(TPRj + FPRt) / 2` over candidate thresholds: one below the
/// smallest uncertainty, the midpoints between consecutive distinct values,
/// and one above the largest. Ties resolve to the smallest threshold.
pub fn uncertainty_error(evaluated: &[EvaluatedDetection]) -> Result<UncertaintyError> {
    let mut correct: Vec<f64> = Vec::new();
    let mut incorrect: Vec<f64> = Vec::new();
    for e in evaluated {
        if e.matched {
            correct.push(e.u_pred);
        } else {
            incorrect.push(e.u_pred);
        }
    }
    if correct.is_empty() || incorrect.is_empty() {
        return Err(BeaError::Undefined(format!(
            "uncertainty error needs correct and incorrect detections ({} / {})",
            correct.len(),
            incorrect.len()
        )));
    }
    correct.sort_by(f64::total_cmp);
    incorrect.sort_by(f64::total_cmp);

    let mut values: Vec<f64> = correct.iter().chain(&incorrect).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();

    let mut candidates = Vec::with_capacity(values.len() + 1);
    candidates.push(values[0] - 1.0);
    candidates.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(values[values.len() - 1] + 1.0);

    let (nc, ni) = (correct.len(), incorrect.len());
    let mut best: Option<UncertaintyError> = None;
    for delta in candidates {
        let rejected = nc - correct.partition_point(|&u| u <= delta);
        let retained = incorrect.partition_point(|&u| u <= delta);
        let tprj = rejected as f64 / nc as f64;
        let fprt = retained as f64 / ni as f64;
        let ue = (tprj + fprt) / 2.0;
        if best.is_none_or(|b| ue < b.ue) {
            best = Some(UncertaintyError {
                ue,
                delta_opt: delta,
                tprj,
                fprt,
            });
        }
    }
    Ok(best.expect("at least two candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Detection};
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;

    fn ev(u: f64, matched: bool) -> EvaluatedDetection {
        EvaluatedDetection {
            detection: Detection::new(BBox::new(0.5, 0.5, 0.1, 0.1), 1.0 - u, vec![1.0]),
            matched,
            u_pred: u,
            image_id: "x".into(),
        }
    }

    #[test]
    fn u_pred_examples() {
        assert_abs_diff_eq!(u_pred(0.94), 0.06, epsilon = 1e-15);
        assert_eq!(u_pred(1.0), 0.0);
        assert_eq!(u_pred(0.0), 1.0);
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(
            binary_entropy(0.5, ENTROPY_CLAMP),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let c = ENTROPY_CLAMP;
        let at_clamp = -c * c.ln() - (1.0 - c) * (1.0 - c).ln();
        assert_abs_diff_eq!(binary_entropy(0.0, c), at_clamp, epsilon = 1e-18);
        assert_abs_diff_eq!(binary_entropy(0.0, c), 1.71e-6, epsilon = 1e-8);
        assert_abs_diff_eq!(binary_entropy(1.0, c), at_clamp, epsilon = 1e-15);
        assert_abs_diff_eq!(binary_entropy(0.25, c), 0.562335, epsilon = 1e-6);
    }

    #[test]
    fn ue_examples() {
        let e = [ev(0.1, true), ev(0.2, true), ev(0.8, false), ev(0.9, false)];
        let r = uncertainty_error(&e).unwrap();
        assert_eq!(r.ue, 0.0);
        assert!(r.delta_opt > 0.2 && r.delta_opt < 0.8);

        // accepting only u=0.1 rejects one correct and no incorrect detection
        let e = [ev(0.1, true), ev(0.6, true), ev(0.4, false), ev(0.9, false)];
        let r = uncertainty_error(&e).unwrap();
        assert_eq!(r.ue, 0.25);
        assert!(r.delta_opt > 0.1 && r.delta_opt < 0.4);
        assert_eq!(r, brute_force_ue(&e));

        let e = [ev(0.2, true), ev(0.1, false)];
        let r = uncertainty_error(&e).unwrap();
        assert_eq!(r.ue, 0.5);
        // smallest candidate wins the tie: reject everything
        assert!(r.delta_opt < 0.1);
        assert_eq!((r.tprj, r.fprt), (1.0, 0.0));
    }

    /// Evaluates every candidate threshold by direct counting.
    fn brute_force_ue(e: &[EvaluatedDetection]) -> UncertaintyError {
        let mut us: Vec<f64> = e.iter().map(|x| x.u_pred).collect();
        us.sort_by(f64::total_cmp);
        us.dedup();
        let mut cands = vec![us[0] - 1.0];
        for i in 1..us.len() {
            cands.push((us[i - 1] + us[i]) / 2.0);
        }
        cands.push(us[us.len() - 1] + 1.0);
        let nc = e.iter().filter(|x| x.matched).count();
        let ni = e.len() - nc;
        let mut best: Option<UncertaintyError> = None;
        for d in cands {
            let rej = e.iter().filter(|x| x.matched && x.u_pred > d).count();
            let ret = e.iter().filter(|x| !x.matched && x.u_pred <= d).count();
            let (tprj, fprt) = (rej as f64 / nc as f64, ret as f64 / ni as f64);
            let ue = (tprj + fprt) / 2.0;
            if best.is_none_or(|b| ue < b.ue) {
                best = Some(UncertaintyError {
                    ue,
                    delta_opt: d,
                    tprj,
                    fprt,
                });
            }
        }
        best.unwrap()
    }

    #[test]
    fn ue_matches_brute_force_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(2..60);
            let mut e: Vec<EvaluatedDetection> = (0..n)
                .map(|_| ev((rng.gen_range(0..20) as f64) / 20.0, rng.gen_bool(0.5)))
                .collect();
            e[0].matched = true;
            e[1].matched = false;
            assert_eq!(uncertainty_error(&e).unwrap(), brute_force_ue(&e));
        }
    }

    #[test]
    fn ue_requires_both_sets() {
        assert!(uncertainty_error(&[ev(0.1, true)]).is_err());
        assert!(uncertainty_error(&[ev(0.1, false)]).is_err());
        assert!(uncertainty_error(&[]).is_err());
    }

    #[test]
    fn u_ood_single_anchor_fixture() {
        // channels: cx cy w h conf class0
        let mut a = Array4::zeros((1, 1, 1, 6));
        let mut b = Array4::zeros((1, 1, 1, 6));
        for (c, (x, y)) in [
            (0.5, 0.2),
            (0.4, 0.4),
            (0.1, 0.1),
            (0.2, 0.2),
            (0.9, 0.5),
            (0.5, 0.25),
        ]
        .into_iter()
        .enumerate()
        {
            a[[0, 0, 0, c]] = x;
            b[[0, 0, 0, c]] = y;
        }
        let out = TandemOutput::new(a, b).unwrap();
        let gap = (0.5f64.ln() * -1.0) - binary_entropy(0.25, ENTROPY_CLAMP);
        assert_abs_diff_eq!(gap, 0.130812, epsilon = 1e-6);
        assert_abs_diff_eq!(u_ood_image(&out), 0.5 * gap, epsilon = 1e-12);
        assert_abs_diff_eq!(u_ood_image(&out), 0.065406, epsilon = 1e-6);
    }

    #[test]
    fn u_ood_zero_when_heads_agree_and_mean_invariant() {
        let a = Array4::from_shape_fn((2, 2, 2, 7), |(i, j, k, c)| {
            0.1 + 0.02 * (i + 2 * j + 3 * k + c) as f64
        });
        let out = TandemOutput::new(a.clone(), a.clone()).unwrap();
        assert_eq!(u_ood_image(&out), 0.0);

        let b = a.mapv(|v| 1.0 - v);
        let one = TandemOutput::new(a.clone(), b.clone()).unwrap();
        let cat = |x: &Array4<f64>| {
            ndarray::concatenate(ndarray::Axis(2), &[x.view(), x.view()]).unwrap()
        };
        let two = TandemOutput::new(cat(&a), cat(&b)).unwrap();
        assert_abs_diff_eq!(u_ood_image(&one), u_ood_image(&two), epsilon = 1e-15);

        // reversing anchor order leaves the score unchanged
        let rev = |x: &Array4<f64>| x.slice(ndarray::s![..;-1, ..;-1, ..;-1, ..]).to_owned();
        let r = TandemOutput::new(rev(&a), rev(&b)).unwrap();
        assert_abs_diff_eq!(u_ood_image(&one), u_ood_image(&r), epsilon = 1e-12);
    }

    #[test]
    fn u_ood_single_head() {
        let mut g = Array4::zeros((2, 2, 1, 6));
        g[[1, 0, 0, channel::CONF]] = 0.7;
        assert_abs_diff_eq!(u_ood_single(g.view()), 0.3, epsilon = 1e-15);
    }
}
