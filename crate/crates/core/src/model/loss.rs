use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use super::{f, r, GtoLossMode, Real};
use crate::error::{Error, Result};
use crate::game::{Action, LegalMask, NUM_ACTIONS};
use crate::strategy::{sample_with_uniform, ActionDist};

/// Softmax over legal actions; illegal entries are exactly zero.
pub fn masked_softmax<T: Real>(logits: ArrayView1<T>, legal: LegalMask) -> ActionDist {
    let mut out = [0.0; NUM_ACTIONS];
    let max = (0..NUM_ACTIONS)
        .filter(|&a| legal.is_legal(a))
        .map(|a| f(logits[a]))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for a in (0..NUM_ACTIONS).filter(|&a| legal.is_legal(a)) {
        out[a] = (f(logits[a]) - max).exp();
        z += out[a];
    }
    for p in out.iter_mut() {
        *p /= z;
    }
    out
}

fn log_softmax(logits: ArrayView1<impl Real>, legal: LegalMask) -> [f64; NUM_ACTIONS] {
    let max = (0..NUM_ACTIONS)
        .filter(|&a| legal.is_legal(a))
        .map(|a| f(logits[a]))
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + (0..NUM_ACTIONS)
            .filter(|&a| legal.is_legal(a))
            .map(|a| (f(logits[a]) - max).exp())
            .sum::<f64>()
            .ln();
    let mut out = [f64::NEG_INFINITY; NUM_ACTIONS];
    for a in (0..NUM_ACTIONS).filter(|&a| legal.is_legal(a)) {
        out[a] = f(logits[a]) - lse;
    }
    out
}

fn smooth(target: &ActionDist, legal: LegalMask, eps: f64) -> ActionDist {
    let n = legal.count() as f64;
    let mut out = [0.0; NUM_ACTIONS];
    for a in (0..NUM_ACTIONS).filter(|&a| legal.is_legal(a)) {
        out[a] = (1.0 - eps) * target[a] + eps / n;
    }
    out
}

/// Per-agent-token targets for the policy loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyTargets {
    pub gto: ActionDist,
    /// One-hot on the best-response action, or a full distribution where
    /// the best response is itself mixed (the equilibrium against itself).
    pub br: ActionDist,
    pub lambda: f64,
}

/// Mixed GTO/best-response loss averaged over agent tokens. Both targets are
/// label-smoothed over legal actions. Returns the loss and its gradient with
/// respect to the logits (zero in illegal slots).
pub fn policy_loss<T: Real>(
    logits: ArrayView2<T>,
    targets: &[PolicyTargets],
    legal: &[LegalMask],
    mode: GtoLossMode,
    smoothing: f64,
) -> (f64, Array2<T>) {
    let n = targets.len();
    let mut grad = Array2::zeros((n, NUM_ACTIONS));
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in 0..n {
        let m = legal[i];
        let t = &targets[i];
        let lp = log_softmax(logits.row(i), m);
        let p: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
        let gto = smooth(&t.gto, m, smoothing);
        let br = smooth(&t.br, m, smoothing);
        let legal_ids: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| m.is_legal(a)).collect();
        let ce = |q: &ActionDist| -legal_ids.iter().map(|&a| q[a] * lp[a]).sum::<f64>();
        let br_term = ce(&br);
        let gto_term = match mode {
            GtoLossMode::CrossEntropy => ce(&gto),
            GtoLossMode::Kl => legal_ids
                .iter()
                .map(|&a| p[a] * (lp[a] - gto[a].ln()))
                .sum(),
        };
        total += t.lambda * gto_term + (1.0 - t.lambda) * br_term;
        let kl = gto_term;
        for &a in &legal_ids {
            let g_gto = match mode {
                GtoLossMode::CrossEntropy => p[a] - gto[a],
                GtoLossMode::Kl => p[a] * (lp[a] - gto[a].ln() - kl),
            };
            let g_br = p[a] - br[a];
            grad[[i, a]] = r((t.lambda * g_gto + (1.0 - t.lambda) * g_br) / n as f64);
        }
    }
    (total / n as f64, grad)
}

/// Cross-entropy of observed opponent actions averaged over opponent tokens.
/// With `masked`, the softmax only ranges over each token's legal actions.
pub fn opp_loss<T: Real>(
    logits: ArrayView2<T>,
    actions: &[Action],
    legal: &[LegalMask],
    masked: bool,
) -> (f64, Array2<T>) {
    let n = actions.len();
    let mut grad = Array2::zeros((n, NUM_ACTIONS));
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in 0..n {
        let m = if masked { legal[i] } else { LegalMask::ALL };
        let lp = log_softmax(logits.row(i), m);
        let y = actions[i].index();
        total -= lp[y];
        for a in (0..NUM_ACTIONS).filter(|&a| m.is_legal(a)) {
            let target = if a == y { 1.0 } else { 0.0 };
            grad[[i, a]] = r((lp[a].exp() - target) / n as f64);
        }
    }
    (total / n as f64, grad)
}

/// `L = L_policy + alpha · L_opp`.
pub fn total_loss(policy: f64, opp: f64, alpha: f64) -> f64 {
    policy + alpha * opp
}

/// Samples from the masked softmax of one position's logits.
pub fn sample_action<T: Real>(
    logits: ArrayView1<T>,
    legal: LegalMask,
    rng: &mut impl Rng,
) -> Result<Action> {
    if legal.is_empty() {
        return Err(Error::EmptyMask);
    }
    let p = masked_softmax(logits, legal);
    Ok(sample_with_uniform(&p, legal, rng.gen::<f64>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(a: usize) -> ActionDist {
        let mut d = [0.0; 3];
        d[a] = 1.0;
        d
    }

    #[test]
    fn uniform_opponent_loss_is_log_three() {
        let z = Array2::<f64>::zeros((4, 3));
        let acts = [Action::Fold, Action::Call, Action::Raise, Action::Call];
        let (l, _) = opp_loss(z.view(), &acts, &[LegalMask::ALL; 4], false);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let two = LegalMask::from_actions(&[Action::Call, Action::Raise]);
        let (l2, g2) = opp_loss(z.view(), &acts[1..3], &[two; 2], true);
        assert!((l2 - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g2[[0, 0]], 0.0);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let z = arr2(&[[-30.0, 30.0, -30.0]]);
        let (l, _) = opp_loss(z.view(), &[Action::Call], &[LegalMask::ALL], false);
        assert!(l < 1e-20);
    }

    #[test]
    fn lambda_one_is_pure_gto_term() {
        let z = arr2(&[[0.3, -0.2, 0.9]]);
        let gto = [0.2, 0.5, 0.3];
        let t = PolicyTargets {
            gto,
            br: one_hot(0),
            lambda: 1.0,
        };
        let (l, _) = policy_loss(
            z.view(),
            &[t],
            &[LegalMask::ALL],
            GtoLossMode::CrossEntropy,
            0.0,
        );
        let lp = log_softmax(z.row(0), LegalMask::ALL);
        let expected: f64 = -(0..3).map(|a| gto[a] * lp[a]).sum::<f64>();
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn perfect_best_response_imitation() {
        let legal = LegalMask::from_actions(&[Action::Call, Action::Raise]);
        let mut z = arr2(&[[0.0, 0.0, 800.0]]);
        z[[0, 0]] = f64::NEG_INFINITY;
        let t = PolicyTargets {
            gto: [0.0, 0.5, 0.5],
            br: one_hot(2),
            lambda: 0.0,
        };
        let (l, g) = policy_loss(z.view(), &[t], &[legal], GtoLossMode::CrossEntropy, 0.0);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_loss_matches_hand_computation() {
        let z = arr2(&[[0.1, 0.7, -0.4], [1.2, -0.3, 0.2], [-0.5, 0.0, 0.5]]);
        let gtos = [[0.1, 0.6, 0.3], [0.3, 0.3, 0.4], [0.0, 0.2, 0.8]];
        let brs = [1usize, 0, 2];
        let targets: Vec<_> = (0..3)
            .map(|i| PolicyTargets {
                gto: gtos[i],
                br: one_hot(brs[i]),
                lambda: 0.5,
            })
            .collect();
        let (l, _) = policy_loss(
            z.view(),
            &targets,
            &[LegalMask::ALL; 3],
            GtoLossMode::CrossEntropy,
            0.0,
        );
        let mut expected = 0.0;
        for i in 0..3 {
            let row: Vec<f64> = z.row(i).to_vec();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            let ce_gto: f64 = -(0..3).map(|a| gtos[i][a] * (row[a] - lse)).sum::<f64>();
            let ce_br = -(row[brs[i]] - lse);
            expected += 0.5 * ce_gto + 0.5 * ce_br;
        }
        assert!((l - expected / 3.0).abs() < 1e-14);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let z = arr2(&[[0.1, 0.7, -0.4], [1.2, -0.3, 0.2]]);
        let legal = [
            LegalMask::ALL,
            LegalMask::from_actions(&[Action::Fold, Action::Call]),
        ];
        let targets = [
            PolicyTargets {
                gto: [0.1, 0.6, 0.3],
                br: one_hot(2),
                lambda: 0.3,
            },
            PolicyTargets {
                gto: [0.4, 0.6, 0.0],
                br: one_hot(0),
                lambda: 0.8,
            },
        ];
        for mode in [GtoLossMode::CrossEntropy, GtoLossMode::Kl] {
            let (_, g) = policy_loss(z.view(), &targets, &legal, mode, 0.01);
            for i in 0..2 {
                for a in (0..3).filter(|&a| legal[i].is_legal(a)) {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[[i, a]] += 1e-6;
                    zm[[i, a]] -= 1e-6;
                    let fd = (policy_loss(zp.view(), &targets, &legal, mode, 0.01).0
                        - policy_loss(zm.view(), &targets, &legal, mode, 0.01).0)
                        / 2e-6;
                    assert!(
                        (fd - g[[i, a]]).abs() < 1e-8,
                        "{mode:?} {i} {a}: {fd} vs {}",
                        g[[i, a]]
                    );
                }
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.3, 0.5, 0.0), 0.3);
        assert!((total_loss(0.3, 0.5, 2.0) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn sampling_respects_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = arr1(&[0.0f64, 0.0, 0.0]);
        let only = LegalMask::from_actions(&[Action::Call]);
        assert_eq!(
            sample_action(z.view(), only, &mut rng).unwrap(),
            Action::Call
        );
        assert!(matches!(
            sample_action(z.view(), LegalMask::from_bits(0), &mut rng),
            Err(Error::EmptyMask)
        ));
        let legal = LegalMask::from_actions(&[Action::Call, Action::Raise]);
        for _ in 0..10_000 {
            assert_ne!(
                sample_action(z.view(), legal, &mut rng).unwrap(),
                Action::Fold
            );
        }
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[sample_action(z.view(), LegalMask::ALL, &mut rng)
                .unwrap()
                .index()] += 1;
        }
        let sd = (10_000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0 / 3.0).abs() < 3.0 * sd, "{counts:?}");
        }
    }
}
