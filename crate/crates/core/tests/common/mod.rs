//! Random sequences and a finite-difference gradient check shared by the
//! model tests and the acceptance suite.
#![allow(dead_code)]

use leduc_lab::features::{TurnType, TOKEN_DIM};
use leduc_lab::game::{Action, LegalMask};
use leduc_lab::model::*;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        ff_dim: 24,
        max_seq_len: 64,
        ..ModelConfig::desk()
    }
}

pub const MASKS: [u8; 3] = [0b111, 0b110, 0b011];

pub fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Sequence<f64> {
    let inputs = Array2::from_shape_fn((len, dim), |_| rng.gen_range(-0.5..1.0));
    let turns = (0..len)
        .map(|_| {
            if rng.gen_bool(0.5) {
                TurnType::Agent
            } else {
                TurnType::Opponent
            }
        })
        .collect();
    let legal = (0..len)
        .map(|_| LegalMask::from_bits(MASKS[rng.gen_range(0..3)]))
        .collect();
    Sequence {
        inputs,
        turns,
        legal,
    }
}

pub fn random_targets(rng: &mut ChaCha8Rng, legal: &[LegalMask]) -> Vec<PolicyTargets> {
    legal
        .iter()
        .map(|m| {
            let mut gto = [0.0; 3];
            let mut z = 0.0;
            for a in m.iter() {
                gto[a.index()] = rng.gen_range(0.05..1.0);
                z += gto[a.index()];
            }
            gto.iter_mut().for_each(|v| *v /= z);
            let acts: Vec<_> = m.iter().collect();
            let mut br = [0.0; 3];
            br[acts[rng.gen_range(0..acts.len())].index()] = 1.0;
            PolicyTargets {
                gto,
                br,
                lambda: rng.gen_range(0.0..1.0),
            }
        })
        .collect()
}

pub fn random_actions(rng: &mut ChaCha8Rng, legal: &[LegalMask]) -> Vec<Action> {
    legal
        .iter()
        .map(|m| {
            let acts: Vec<_> = m.iter().collect();
            acts[rng.gen_range(0..acts.len())]
        })
        .collect()
}

pub struct Problem {
    pub seq: Sequence<f64>,
    pub targets: Vec<PolicyTargets>,
    pub opp_actions: Vec<Action>,
    pub alpha: f64,
    pub mode: GtoLossMode,
}

pub fn loss_and_grad(
    p: &ModelParameters<f64>,
    pr: &Problem,
    dropout: Option<u64>,
) -> (f64, Gradients<f64>) {
    let (out, trace) = forward(p, &pr.seq, dropout).unwrap();
    let (lp, gp) = policy_loss(
        out.policy_logits.view(),
        &pr.targets,
        &out.policy_legal,
        pr.mode,
        0.01,
    );
    let (lo, go) = opp_loss(
        out.opp_logits.view(),
        &pr.opp_actions,
        &out.opp_legal,
        false,
    );
    let heads = HeadGrads {
        policy: gp,
        opp: go * pr.alpha,
    };
    let g = backward(p, &trace, &heads).unwrap();
    (total_loss(lp, lo, pr.alpha), g)
}

pub fn problem(rng: &mut ChaCha8Rng, len: usize, mode: GtoLossMode) -> Problem {
    let seq = random_seq(rng, len, TOKEN_DIM);
    let agent_legal: Vec<_> = (0..len)
        .filter(|&i| seq.turns[i] == TurnType::Agent)
        .map(|i| seq.legal[i])
        .collect();
    let opp_legal: Vec<_> = (0..len)
        .filter(|&i| seq.turns[i] == TurnType::Opponent)
        .map(|i| seq.legal[i])
        .collect();
    Problem {
        targets: random_targets(rng, &agent_legal),
        opp_actions: random_actions(rng, &opp_legal),
        seq,
        alpha: 0.7,
        mode,
    }
}

/// Central differences on every parameter; relative error with a small floor.
pub fn check_gradients(p: &ModelParameters<f64>, pr: &Problem, dropout: Option<u64>) -> f64 {
    let (_, g) = loss_and_grad(p, pr, dropout);
    let mut q = p.clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..p.data().len() {
        let orig = q.data()[i];
        q.data_mut()[i] = orig + h;
        let (lp, _) = loss_and_grad(&q, pr, dropout);
        q.data_mut()[i] = orig - h;
        let (lm, _) = loss_and_grad(&q, pr, dropout);
        q.data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = g.data[i];
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
