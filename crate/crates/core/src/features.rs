//! Opponent statistics tracking and 25-wide dual-turn token construction.
//!
//! Token layout:
//!
//! | slots  | content                                                    |
//! |--------|------------------------------------------------------------|
//! | 0      | agent card rank, J/Q/K as 0, 0.5, 1                        |
//! | 1      | public card rank, -0.5 until revealed                      |
//! | 2, 3   | agent investment / 13, pot / 26                            |
//! | 4      | agent's last action this round                             |
//! | 5      | agent's final action in the previous round                 |
//! | 6      | agent seat (0 or 1)                                        |
//! | 7      | round flag (0 or 1)                                        |
//! | 8      | opponent card revealed at the previous showdown, or -0.5   |
//! | 9      | turn type (0 agent, 1 opponent)                            |
//! | 10..25 | fold/call/raise rates for the five tracker contexts        |
//!
//! Action slots use none/fold/call/raise = -0.5/0/0.5/1.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::game::{
    Action, Card, Deal, GameState, LegalMask, Rank, MAX_INVESTMENT, MAX_POT, NUM_ACTIONS,
};
use crate::io::{read_artifact_bytes, write_atomic};

pub const TOKEN_DIM: usize = 25;
pub const BASE_DIM: usize = 9;
pub const NUM_CONTEXTS: usize = 5;
pub const SENTINEL: f64 = -0.5;

pub const SLOT_TURN: usize = 9;
pub const SLOT_OPP_CARD: usize = 8;
pub const RATES_START: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    Global,
    Round1,
    Round2,
    FacingRaise,
    NotFacingRaise,
}

impl Context {
    pub const ALL: [Context; NUM_CONTEXTS] = [
        Context::Global,
        Context::Round1,
        Context::Round2,
        Context::FacingRaise,
        Context::NotFacingRaise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TurnType {
    Agent,
    Opponent,
}

impl TurnType {
    pub fn flag(self) -> f64 {
        match self {
            TurnType::Agent => 0.0,
            TurnType::Opponent => 1.0,
        }
    }
}

/// Whether opponent cards revealed at showdown may enter later tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShowdownPolicy {
    /// Card slot stays at the sentinel for every token.
    Training,
    /// Tokens carry the card revealed at the previous hand's showdown.
    Inference,
}

/// Running per-context action counts for one opponent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpponentTracker {
    counts: [[u32; NUM_ACTIONS]; NUM_CONTEXTS],
    hands_observed: u32,
}

impl OpponentTracker {
    pub fn new() -> OpponentTracker {
        OpponentTracker::default()
    }

    pub fn update(&mut self, round: u8, facing_raise: bool, action: Action) {
        let a = action.index();
        let round_ctx = if round == 1 {
            Context::Round1
        } else {
            Context::Round2
        };
        let facing_ctx = if facing_raise {
            Context::FacingRaise
        } else {
            Context::NotFacingRaise
        };
        for ctx in [Context::Global, round_ctx, facing_ctx] {
            self.counts[ctx.index()][a] += 1;
        }
    }

    pub fn finish_hand(&mut self) {
        self.hands_observed += 1;
    }

    pub fn hands_observed(&self) -> u32 {
        self.hands_observed
    }

    pub fn counts(&self, ctx: Context) -> [u32; NUM_ACTIONS] {
        self.counts[ctx.index()]
    }

    /// Laplace-smoothed rates, three per context in [`Context::ALL`] order.
    pub fn bucket_rates(&self) -> [f64; 3 * NUM_CONTEXTS] {
        let mut out = [0.0; 3 * NUM_CONTEXTS];
        for (c, row) in self.counts.iter().enumerate() {
            let total: u32 = row.iter().sum();
            for a in 0..NUM_ACTIONS {
                out[3 * c + a] = (row[a] + 1) as f64 / (total + 3) as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenVector(pub [f64; TOKEN_DIM]);

impl TokenVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn turn_type(&self) -> TurnType {
        if self.0[SLOT_TURN] == 0.0 {
            TurnType::Agent
        } else {
            TurnType::Opponent
        }
    }
}

fn rank_norm(rank: Rank) -> f64 {
    rank.index() as f64 * 0.5
}

fn action_norm(a: Option<Action>) -> f64 {
    match a {
        None => SENTINEL,
        Some(Action::Fold) => 0.0,
        Some(Action::Call) => 0.5,
        Some(Action::Raise) => 1.0,
    }
}

/// The agent's actions in `round`, in order.
fn agent_actions(state: &GameState, agent: usize, round: u8) -> impl Iterator<Item = Action> + '_ {
    state
        .round_history(round)
        .iter()
        .enumerate()
        .filter(move |(i, _)| i % 2 == agent)
        .map(|(_, &a)| a)
}

/// Builds the token for the decision about to be taken at `state`, from the
/// agent's point of view.
pub fn make_token(
    state: &GameState,
    agent: usize,
    tracker: &OpponentTracker,
    turn: TurnType,
    observed_opp_card: Option<Card>,
) -> TokenVector {
    let mut t = [0.0; TOKEN_DIM];
    let round = state.round();
    t[0] = rank_norm(state.private_card(agent).rank());
    t[1] = state
        .public_card()
        .map_or(SENTINEL, |c| rank_norm(c.rank()));
    t[2] = state.contributions()[agent] as f64 / MAX_INVESTMENT as f64;
    t[3] = state.pot() as f64 / MAX_POT as f64;
    t[4] = action_norm(agent_actions(state, agent, round).last());
    t[5] = if round == 2 {
        action_norm(agent_actions(state, agent, 1).last())
    } else {
        SENTINEL
    };
    t[6] = agent as f64;
    t[7] = if round == 2 { 1.0 } else { 0.0 };
    t[SLOT_OPP_CARD] = observed_opp_card.map_or(SENTINEL, |c| rank_norm(c.rank()));
    t[SLOT_TURN] = turn.flag();
    t[RATES_START..].copy_from_slice(&tracker.bucket_rates());
    TokenVector(t)
}

/// One decision point of a recorded hand.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingToken {
    pub features: TokenVector,
    pub turn: TurnType,
    /// Action taken at this decision.
    pub label: Action,
    pub legal: LegalMask,
    pub hand_index: u32,
}

/// Deal plus the complete action sequence of one hand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandTranscript {
    pub deal: Deal,
    pub actions: Vec<Action>,
}

impl HandTranscript {
    /// Replays the hand, returning the state before every action and the final state.
    pub fn replay(&self) -> Result<(Vec<GameState>, GameState)> {
        let mut state = GameState::new(self.deal);
        let mut before = Vec::with_capacity(self.actions.len());
        for &a in &self.actions {
            before.push(state.clone());
            state = state.apply(a)?;
        }
        if !state.is_terminal() {
            return Err(Error::NotTerminal);
        }
        Ok((before, state))
    }

    /// Opponent card visible to the agent after the hand, if it reached showdown.
    pub fn revealed_card(&self, agent: usize) -> Result<Option<Card>> {
        let (_, last) = self.replay()?;
        Ok(last
            .folded_by()
            .is_none()
            .then(|| last.private_card(1 - agent)))
    }
}

/// Emits one token per decision, updating `tracker` after every opponent
/// action so each token only sees statistics from before its own action.
/// `previous_reveal` is the opponent card shown at the previous hand's
/// showdown; it is only used under [`ShowdownPolicy::Inference`].
pub fn build_hand_tokens(
    transcript: &HandTranscript,
    agent: usize,
    hand_index: u32,
    tracker: &mut OpponentTracker,
    policy: ShowdownPolicy,
    previous_reveal: Option<Card>,
    agent_turns_only: bool,
) -> Result<Vec<TrainingToken>> {
    let (states, _) = transcript.replay()?;
    let observed = match policy {
        ShowdownPolicy::Training => None,
        ShowdownPolicy::Inference => previous_reveal,
    };
    let mut out = Vec::with_capacity(states.len());
    for (state, &action) in states.iter().zip(&transcript.actions) {
        let actor = state.current_player().expect("non-terminal");
        let turn = if actor == agent {
            TurnType::Agent
        } else {
            TurnType::Opponent
        };
        if turn == TurnType::Agent || !agent_turns_only {
            out.push(TrainingToken {
                features: make_token(state, agent, tracker, turn, observed),
                turn,
                label: action,
                legal: state.legal_actions()?,
                hand_index,
            });
        }
        if turn == TurnType::Opponent {
            tracker.update(state.round(), state.facing_bet(), action);
        }
    }
    tracker.finish_hand();
    Ok(out)
}

pub const BUFFER_FORMAT: &str = "leduc-buffer v1";

/// Writes tokens as a text header line followed by fixed-width little-endian
/// records: 25 × f64 features, then turn, label, legal bits (u8 each) and
/// hand index (u32).
pub fn save_buffer(
    path: &Path,
    opponent_id: &str,
    hands: u32,
    tokens: &[TrainingToken],
) -> Result<()> {
    let mut header = String::new();
    writeln!(
        header,
        "{BUFFER_FORMAT} opponent={opponent_id} hands={hands} width={TOKEN_DIM} tokens={}",
        tokens.len()
    )
    .unwrap();
    let mut bytes = header.into_bytes();
    for t in tokens {
        for v in t.features.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(match t.turn {
            TurnType::Agent => 0,
            TurnType::Opponent => 1,
        });
        bytes.push(t.label.index() as u8);
        bytes.push(t.legal.bits());
        bytes.extend_from_slice(&t.hand_index.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedBuffer {
    pub opponent_id: String,
    pub hands: u32,
    pub tokens: Vec<TrainingToken>,
}

const RECORD_BYTES: usize = TOKEN_DIM * 8 + 3 + 4;

pub fn load_buffer(path: &Path) -> Result<LoadedBuffer> {
    let origin = path.display().to_string();
    let bytes = read_artifact_bytes(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(&origin, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format(&origin, "header is not UTF-8"))?;
    crate::io::check_header(header, BUFFER_FORMAT, &origin)?;
    let field = |k: &str| {
        crate::io::kv_fields(header)
            .find(|(key, _)| *key == k)
            .map(|(_, v)| v.to_string())
            .ok_or_else(|| Error::format(&origin, format!("header missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::format(&origin, format!("bad `{k}`")))
    };
    if num("width")? != TOKEN_DIM {
        return Err(Error::format(&origin, "unsupported feature width"));
    }
    let count = num("tokens")?;
    let body = &bytes[nl + 1..];
    if body.len() != count * RECORD_BYTES {
        return Err(Error::format(&origin, "truncated token records"));
    }
    let mut tokens = Vec::with_capacity(count);
    for rec in body.chunks_exact(RECORD_BYTES) {
        let mut f = [0.0; TOKEN_DIM];
        for (i, v) in f.iter_mut().enumerate() {
            *v = f64::from_le_bytes(rec[i * 8..i * 8 + 8].try_into().unwrap());
        }
        let o = TOKEN_DIM * 8;
        let turn = match rec[o] {
            0 => TurnType::Agent,
            1 => TurnType::Opponent,
            _ => return Err(Error::format(&origin, "bad turn type")),
        };
        let label = Action::from_index(rec[o + 1] as usize)
            .ok_or_else(|| Error::format(&origin, "bad label"))?;
        tokens.push(TrainingToken {
            features: TokenVector(f),
            turn,
            label,
            legal: LegalMask::from_bits(rec[o + 2]),
            hand_index: u32::from_le_bytes(rec[o + 3..o + 7].try_into().unwrap()),
        });
    }
    Ok(LoadedBuffer {
        opponent_id: field("opponent")?,
        hands: num("hands")? as u32,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card(s: &str) -> Card {
        s.parse().unwrap()
    }

    #[test]
    fn update_touches_three_contexts() {
        let mut t = OpponentTracker::new();
        t.update(1, false, Action::Raise);
        assert_eq!(t.counts(Context::Global), [0, 0, 1]);
        assert_eq!(t.counts(Context::Round1), [0, 0, 1]);
        assert_eq!(t.counts(Context::NotFacingRaise), [0, 0, 1]);
        assert_eq!(t.counts(Context::Round2), [0, 0, 0]);
        assert_eq!(t.counts(Context::FacingRaise), [0, 0, 0]);
    }

    #[test]
    fn laplace_rates() {
        let mut t = OpponentTracker::new();
        assert!(t.bucket_rates().iter().all(|&r| r == 1.0 / 3.0));
        for _ in 0..10 {
            t.update(2, true, Action::Fold);
        }
        let r = t.bucket_rates();
        let facing = 3 * Context::FacingRaise.index();
        assert!((r[facing] - 11.0 / 13.0).abs() < 1e-15);
        let mut u = OpponentTracker::new();
        u.update(1, false, Action::Fold);
        u.update(1, false, Action::Fold);
        u.update(1, false, Action::Call);
        u.update(1, false, Action::Raise);
        let r = u.bucket_rates();
        assert_eq!(&r[0..3], &[3.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0]);
    }

    #[test]
    fn first_decision_token() {
        let deal = Deal::new(card("Qs"), card("Kh"), card("Js")).unwrap();
        let s = GameState::new(deal);
        let t = make_token(&s, 0, &OpponentTracker::new(), TurnType::Agent, None).0;
        assert_eq!(t[0], 0.5);
        assert_eq!(t[1], SENTINEL);
        assert_eq!(t[7], 0.0);
        assert_eq!(t[8], SENTINEL);
        assert_eq!(t[4], SENTINEL);
        assert_eq!(t[5], SENTINEL);
    }

    #[test]
    fn pot_after_bet_and_call() {
        let deal = Deal::new(card("Qs"), card("Kh"), card("Js")).unwrap();
        let s = GameState::new(deal)
            .apply(Action::Raise)
            .unwrap()
            .apply(Action::Call)
            .unwrap();
        let t = make_token(&s, 1, &OpponentTracker::new(), TurnType::Opponent, None).0;
        assert_eq!(t[3], 6.0 / 26.0);
        assert_eq!(t[1], 0.0);
        assert_eq!(t[5], 0.5);
        assert_eq!(t[4], SENTINEL);
        assert_eq!(t[SLOT_TURN], 1.0);
    }

    #[test]
    fn tokens_exclude_own_action() {
        let deal = Deal::new(card("Qs"), card("Kh"), card("Js")).unwrap();
        let tr = HandTranscript {
            deal,
            actions: vec![
                Action::Call,
                Action::Raise,
                Action::Call,
                Action::Call,
                Action::Raise,
                Action::Fold,
            ],
        };
        let mut tracker = OpponentTracker::new();
        let toks = build_hand_tokens(
            &tr,
            0,
            0,
            &mut tracker,
            ShowdownPolicy::Training,
            Some(card("Ks")),
            false,
        )
        .unwrap();
        assert_eq!(toks.len(), 6);
        let turns: Vec<_> = toks.iter().map(|t| t.turn).collect();
        use TurnType::*;
        assert_eq!(turns, vec![Agent, Opponent, Agent, Agent, Opponent, Agent]);
        // Opponent raise at index 1 is not yet counted in its own token.
        assert!(toks[1].features.0[RATES_START..]
            .iter()
            .all(|&r| r == 1.0 / 3.0));
        assert_eq!(toks[2].features.0[RATES_START + 2], 2.0 / 4.0);
        assert!(toks.iter().all(|t| t.features.0[SLOT_OPP_CARD] == SENTINEL));
        assert_eq!(tracker.counts(Context::Global), [0, 0, 2]);
        let agent_only = build_hand_tokens(
            &tr,
            0,
            0,
            &mut OpponentTracker::new(),
            ShowdownPolicy::Training,
            None,
            true,
        )
        .unwrap();
        assert_eq!(agent_only.len(), 4);
    }

    #[test]
    fn inference_mode_carries_previous_reveal() {
        let deal = Deal::new(card("Qs"), card("Kh"), card("Js")).unwrap();
        let tr = HandTranscript {
            deal,
            actions: vec![Action::Call, Action::Call, Action::Call, Action::Call],
        };
        assert_eq!(tr.revealed_card(0).unwrap(), Some(card("Kh")));
        let toks = build_hand_tokens(
            &tr,
            0,
            1,
            &mut OpponentTracker::new(),
            ShowdownPolicy::Inference,
            Some(card("Ks")),
            false,
        )
        .unwrap();
        assert!(toks.iter().all(|t| t.features.0[SLOT_OPP_CARD] == 1.0));
    }

    #[test]
    fn buffer_round_trip() {
        let deal = Deal::new(card("Qs"), card("Kh"), card("Js")).unwrap();
        let tr = HandTranscript {
            deal,
            actions: vec![
                Action::Raise,
                Action::Raise,
                Action::Call,
                Action::Call,
                Action::Call,
            ],
        };
        let toks = build_hand_tokens(
            &tr,
            1,
            3,
            &mut OpponentTracker::new(),
            ShowdownPolicy::Training,
            None,
            false,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        save_buffer(&p, "nit_mid", 1, &toks).unwrap();
        let back = load_buffer(&p).unwrap();
        assert_eq!(back.tokens, toks);
        assert_eq!(back.opponent_id, "nit_mid");
        assert_eq!(back.hands, 1);
    }
}
