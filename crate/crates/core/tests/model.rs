mod common;

use common::*;
use leduc_lab::features::{TurnType, TOKEN_DIM};
use leduc_lab::game::LegalMask;
use leduc_lab::model::*;
use leduc_lab::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = ModelParameters::<f64>::init(small(), 11).unwrap();
    for b in 0..2 {
        let mode = if b == 1 {
            GtoLossMode::Kl
        } else {
            GtoLossMode::CrossEntropy
        };
        let pr = problem(&mut rng, 7, mode);
        let worst = check_gradients(&p, &pr, Some(b));
        assert!(worst < 1e-4, "batch {b}: worst relative error {worst}");
    }
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ModelParameters::<f64>::init(small(), 1).unwrap();
    let seq = random_seq(&mut rng, 9, TOKEN_DIM);
    let (out, trace) = forward(&p, &seq, None).unwrap();
    let g = backward(&p, &trace, &HeadGrads::zeros(&out)).unwrap();
    assert!(g.data.iter().all(|&v| v == 0.0));
}

#[test]
fn stale_trace_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ModelParameters::<f64>::init(small(), 1).unwrap();
    let seq = random_seq(&mut rng, 4, TOKEN_DIM);
    let (out, trace) = forward(&p, &seq, None).unwrap();
    p.data_mut()[0] += 1.0;
    assert!(matches!(
        backward(&p, &trace, &HeadGrads::zeros(&out)),
        Err(Error::StaleTrace)
    ));
}

#[test]
fn future_tokens_do_not_affect_past_outputs_or_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = ModelParameters::<f64>::init(small(), 2).unwrap();
    for _ in 0..20 {
        let len = rng.gen_range(2..40);
        let seq = random_seq(&mut rng, len, TOKEN_DIM);
        let t = rng.gen_range(0..len - 1);
        let mut other = seq.clone();
        for j in 0..TOKEN_DIM {
            other.inputs[[t + 1, j]] += rng.gen_range(-1.0..1.0);
        }
        let (a, _) = forward(&p, &seq, None).unwrap();
        let (b, _) = forward(&p, &other, None).unwrap();
        for (k, &pos) in a.policy_positions.iter().enumerate() {
            if pos <= t {
                assert_eq!(a.policy_logits.row(k), b.policy_logits.row(k));
            }
        }
        for (k, &pos) in a.opp_positions.iter().enumerate() {
            if pos <= t {
                assert_eq!(a.opp_logits.row(k), b.opp_logits.row(k));
            }
        }
    }
    // Loss on positions <= t gives zero gradient to inputs after t, visible
    // as identical parameter gradients when later tokens change.
    let seq = random_seq(&mut rng, 12, TOKEN_DIM);
    let mut other = seq.clone();
    other.inputs.row_mut(11).fill(0.3);
    let grad_prefix = |s: &Sequence<f64>| {
        let (out, trace) = forward(&p, s, None).unwrap();
        let mut hg = HeadGrads::zeros(&out);
        for (k, &pos) in out.opp_positions.iter().enumerate() {
            if pos < 11 {
                hg.opp.row_mut(k).fill(1.0);
            }
        }
        backward(&p, &trace, &hg).unwrap()
    };
    assert_eq!(grad_prefix(&seq), grad_prefix(&other));
}

#[test]
fn illegal_actions_get_zero_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = ModelParameters::<f64>::init(small(), 2).unwrap();
    let seq = random_seq(&mut rng, 30, TOKEN_DIM);
    let (out, _) = forward(&p, &seq, None).unwrap();
    for (row, m) in out.policy_logits.rows().into_iter().zip(&out.policy_legal) {
        let d = masked_softmax(row, *m);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for a in 0..3 {
            if !m.is_legal(a) {
                assert_eq!(d[a], 0.0);
                assert_eq!(row[a], f64::NEG_INFINITY);
            }
        }
    }
}

#[test]
fn overlong_sequence_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = ModelParameters::<f64>::init(small(), 2).unwrap();
    let seq = random_seq(&mut rng, 65, TOKEN_DIM);
    assert!(matches!(
        forward(&p, &seq, None),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn initial_policy_is_near_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = ModelParameters::<f32>::init(ModelConfig::desk(), 4).unwrap();
    let seq: Sequence<f64> = random_seq(&mut rng, 100, TOKEN_DIM);
    let seq32 = Sequence {
        inputs: seq.inputs.mapv(|v| v as f32),
        turns: vec![TurnType::Agent; 100],
        legal: vec![LegalMask::ALL; 100],
    };
    let (out, _) = forward(&p, &seq32, None).unwrap();
    for row in out.policy_logits.rows() {
        let d = masked_softmax(row, LegalMask::ALL);
        assert!(d.iter().all(|&x| x < 0.6), "{d:?}");
    }
}

#[test]
fn dropout_is_reproducible_and_only_active_with_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = ModelParameters::<f64>::init(small(), 2).unwrap();
    let pr = problem(&mut rng, 20, GtoLossMode::CrossEntropy);
    let (a, _) = loss_and_grad(&p, &pr, Some(4));
    let (b, _) = loss_and_grad(&p, &pr, Some(4));
    let (c, _) = loss_and_grad(&p, &pr, Some(5));
    let (e1, _) = loss_and_grad(&p, &pr, None);
    let (e2, _) = loss_and_grad(&p, &pr, None);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(e1, e2);
}

#[test]
fn expansion_preserves_outputs_on_zero_padded_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p9 = ModelParameters::<f64>::init(small().with_input_dim(9), 6).unwrap();
    let p25 = p9.expand_input_projection().unwrap();
    let s9 = random_seq(&mut rng, 15, 9);
    let mut s25 = Sequence {
        inputs: Array2::zeros((15, TOKEN_DIM)),
        ..s9.clone()
    };
    s25.inputs
        .slice_mut(ndarray::s![.., ..9])
        .assign(&s9.inputs);
    let (a, _) = forward(&p9, &s9, None).unwrap();
    let (b, _) = forward(&p25, &s25, None).unwrap();
    assert_eq!(a, b);
    // Nonzero rate slots also contribute nothing at expansion time.
    s25.inputs.slice_mut(ndarray::s![.., 10..]).fill(0.4);
    let (c, _) = forward(&p25, &s25, None).unwrap();
    assert_eq!(a, c);
}

#[test]
fn incremental_session_matches_full_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = ModelParameters::<f64>::init(small(), 3).unwrap();
    let seq = random_seq(&mut rng, 40, TOKEN_DIM);
    let (out, _) = forward(&p, &seq, None).unwrap();
    let mut sess = InferenceSession::new(&p);
    let (mut ai, mut oi) = (0, 0);
    for i in 0..40 {
        sess.push(seq.inputs.row(i).as_slice().unwrap()).unwrap();
        match seq.turns[i] {
            TurnType::Agent => {
                let z = sess.policy_logits().unwrap();
                for a in 0..3 {
                    let full = out.policy_logits[[ai, a]];
                    if full.is_finite() {
                        assert!((z[a] - full).abs() < 1e-10);
                    }
                }
                ai += 1;
            }
            TurnType::Opponent => {
                let z = sess.opp_logits().unwrap();
                for a in 0..3 {
                    assert!((z[a] - out.opp_logits[[oi, a]]).abs() < 1e-10);
                }
                oi += 1;
            }
        }
    }
}

#[test]
fn session_window_rolls_over() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = ModelParameters::<f64>::init(small(), 3).unwrap();
    let seq = random_seq(&mut rng, 64, TOKEN_DIM);
    let mut sess = InferenceSession::new(&p);
    for i in 0..64 {
        sess.push(seq.inputs.row(i).as_slice().unwrap()).unwrap();
    }
    assert_eq!(sess.len(), 64);
    sess.push(seq.inputs.row(0).as_slice().unwrap()).unwrap();
    assert_eq!(sess.len(), 33);
}
