//! Randomized checks of the structural invariants of each module.

use std::sync::OnceLock;

use ndarray::Array1;
use proptest::prelude::*;

use leduc_lab::archetypes::{perturb, ArchetypeSpec, Modifier, SUPPORT_EPS};
use leduc_lab::curriculum::{lambda_schedule, Phase2Config};
use leduc_lab::evaluation::{paired_match, play_hands, TabularAgent};
use leduc_lab::features::{
    build_hand_tokens, make_token, Context, HandTranscript, OpponentTracker, ShowdownPolicy,
    TurnType, RATES_START, SENTINEL, SLOT_OPP_CARD, TOKEN_DIM,
};
use leduc_lab::game::{Action, Deal, GameState, LegalMask, NUM_ACTIONS};
use leduc_lab::model::masked_softmax;
use leduc_lab::strategy::StrategyTable;
use leduc_lab::tabular::{best_response, cfr_solve, expected_value};
use leduc_lab::tree::info_index;

fn gto() -> &'static StrategyTable {
    static GTO: OnceLock<StrategyTable> = OnceLock::new();
    GTO.get_or_init(|| cfr_solve(300, None).1)
}

/// Plays a hand choosing the `choices[k] % legal`-th legal action at step k.
fn scripted_hand(seed: u64, choices: &[u8]) -> HandTranscript {
    let deal = Deal::from_seed(seed);
    let mut state = GameState::new(deal);
    let mut actions = Vec::new();
    let mut k = 0;
    while !state.is_terminal() {
        let legal: Vec<Action> = state.legal_actions().unwrap().iter().collect();
        let a = legal[choices.get(k).copied().unwrap_or(1) as usize % legal.len()];
        state = state.apply(a).unwrap();
        actions.push(a);
        k += 1;
    }
    HandTranscript { deal, actions }
}

fn random_table(seed: u64) -> StrategyTable {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    StrategyTable::from_fn(&[0, 1], |_, legal| {
        let mut d = [0.0; NUM_ACTIONS];
        for a in legal.iter() {
            d[a.index()] = rng.gen::<f64>() + 1e-3;
        }
        let z: f64 = d.iter().sum();
        d.map(|v| v / z)
    })
}

fn hands() -> impl Strategy<Value = Vec<(u64, Vec<u8>)>> {
    prop::collection::vec(
        (any::<u64>(), prop::collection::vec(any::<u8>(), 0..10)),
        1..12,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn engine_states_stay_consistent(seed in any::<u64>(), choices in prop::collection::vec(any::<u8>(), 0..12)) {
        let tr = scripted_hand(seed, &choices);
        let (states, last) = tr.replay().unwrap();
        let idx = info_index();
        for s in states.iter().chain(std::iter::once(&last)) {
            let c = s.contributions();
            prop_assert_eq!(s.pot(), c[0] + c[1]);
            prop_assert!(c[0] >= 1 && c[1] >= 1);
            prop_assert!(s.raises_this_round() <= 2);
            if let Some(p) = s.current_player() {
                let legal = s.legal_actions().unwrap();
                prop_assert!(!legal.is_empty());
                let id = idx.id(&s.info_state_key(p)).unwrap();
                prop_assert_eq!(idx.legal(id), legal);
                prop_assert_eq!(idx.player(id), p);
            }
        }
        let out = last.terminal_payoff().unwrap();
        prop_assert_eq!(out.payoff_p0 + out.payoff_p1, 0);
    }

    #[test]
    fn seeded_deals_repeat(seed in any::<u64>()) {
        prop_assert_eq!(Deal::from_seed(seed), Deal::from_seed(seed));
    }

    #[test]
    fn tokens_are_causal_and_well_formed(hs in hands(), agent in 0usize..2) {
        let mut tracker = OpponentTracker::new();
        let mut shadow = OpponentTracker::new();
        for (h, (seed, choices)) in hs.iter().enumerate() {
            let tr = scripted_hand(*seed, choices);
            let tokens = build_hand_tokens(&tr, agent, h as u32, &mut tracker, ShowdownPolicy::Training, None, false).unwrap();
            prop_assert_eq!(tokens.len(), tr.actions.len());
            // Rebuild each token from the prefix of the transcript before it.
            let mut state = GameState::new(tr.deal);
            for (tok, &a) in tokens.iter().zip(&tr.actions) {
                let turn = if state.current_player() == Some(agent) { TurnType::Agent } else { TurnType::Opponent };
                let expected = make_token(&state, agent, &shadow, turn, None);
                prop_assert_eq!(tok.features, expected);
                prop_assert_eq!(tok.turn, turn);
                prop_assert_eq!(tok.features.0[SLOT_OPP_CARD], SENTINEL);
                for triple in tok.features.0[RATES_START..TOKEN_DIM].chunks(3) {
                    prop_assert!((triple.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                if turn == TurnType::Opponent {
                    shadow.update(state.round(), state.facing_bet(), a);
                }
                state = state.apply(a).unwrap();
            }
            shadow.finish_hand();
        }
        let raw = |c| tracker.counts(c);
        for a in 0..NUM_ACTIONS {
            prop_assert_eq!(raw(Context::Global)[a], raw(Context::Round1)[a] + raw(Context::Round2)[a]);
            prop_assert_eq!(raw(Context::Global)[a], raw(Context::FacingRaise)[a] + raw(Context::NotFacingRaise)[a]);
        }
        prop_assert_eq!(tracker.hands_observed(), hs.len() as u32);
    }

    #[test]
    fn masked_softmax_is_a_distribution(z in prop::array::uniform3(-30.0f64..30.0), bits in 1u8..8) {
        let legal = LegalMask::from_bits(bits);
        let p = masked_softmax(Array1::from(z.to_vec()).view(), legal);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for a in 0..NUM_ACTIONS {
            if !legal.is_legal(a) {
                prop_assert_eq!(p[a], 0.0);
            }
        }
    }

    #[test]
    fn lambda_stays_in_range(eps in 0.0f64..5.0) {
        let cfg = Phase2Config::default();
        let l = lambda_schedule(eps, &cfg);
        prop_assert!((0.0..=cfg.lambda_max).contains(&l));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbation_preserves_support(mi in 0usize..6, w in 0.0f64..=1.0, sigma in 0.0f64..0.3, seed in any::<u64>()) {
        let spec = ArchetypeSpec::new(Modifier::ALL[mi], w, sigma, seed);
        let out = perturb(gto(), &spec).unwrap();
        out.validate().unwrap();
        prop_assert_eq!(&perturb(gto(), &spec).unwrap(), &out);
        for ((key, g), (_, p)) in gto().iter().zip(out.iter()) {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{}", key);
            let support = g.iter().filter(|&&x| x > SUPPORT_EPS).count();
            for a in 0..NUM_ACTIONS {
                prop_assert!(p[a] >= 0.0);
                if support < 2 || g[a] <= SUPPORT_EPS {
                    prop_assert_eq!(p[a], g[a]);
                } else {
                    prop_assert!(p[a] > 0.0);
                }
            }
        }
    }

    #[test]
    fn best_response_dominates_random_strategies(opp_seed in any::<u64>(), tau_seed in any::<u64>(), responder in 0usize..2) {
        let sigma = random_table(opp_seed);
        let br = best_response(&sigma, responder).unwrap();
        let tau = random_table(tau_seed);
        let profile = sigma.merged(&tau.restrict(responder));
        let ev = expected_value(&profile, &profile).unwrap()[responder];
        prop_assert!(br.value >= ev);
    }

    #[test]
    fn strategy_text_round_trips(seed in any::<u64>()) {
        let t = random_table(seed);
        prop_assert_eq!(StrategyTable::from_text(&t.to_text(), "mem").unwrap(), t);
    }

    #[test]
    fn identical_agents_pair_exactly(seed in any::<u64>(), opp_seed in any::<u64>()) {
        let opponent = random_table(opp_seed);
        let mut a = TabularAgent::new(gto().clone());
        let mut b = TabularAgent::new(gto().clone());
        let (pa, pb) = paired_match(&mut a, &mut b, &opponent, 200, seed).unwrap();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn matches_alternate_seats(seed in any::<u64>()) {
        let mut a = TabularAgent::new(gto().clone());
        let hands = play_hands(&mut a, gto(), 20, seed).unwrap();
        for (h, hand) in hands.iter().enumerate() {
            prop_assert_eq!(hand.seat, h % 2);
        }
    }
}
