//! Leduc Hold'em rules engine.
//!
//! Six-card deck (two copies each of J, Q, K), 1-chip antes, two betting
//! rounds with fixed bet sizes of 2 and 4 chips and at most one bet plus one
//! raise per round. Player 0 acts first in both rounds.
//!
//! Transitions are pure: [`GameState::apply`] returns a new state.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 3;
pub const DECK_SIZE: usize = 6;
pub const ANTE: u32 = 1;
pub const MAX_RAISES: u8 = 2;
/// Largest total pot: both players put in ante + 2 bets in each round.
pub const MAX_POT: u32 = 2 * (1 + 2 + 2 + 4 + 4);
/// Largest single-player contribution.
pub const MAX_INVESTMENT: u32 = MAX_POT / 2;

/// Fixed bet increment for a betting round (1-based).
pub fn bet_size(round: u8) -> u32 {
    if round == 1 {
        2
    } else {
        4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rank {
    J = 0,
    Q = 1,
    K = 2,
}

impl Rank {
    pub const ALL: [Rank; 3] = [Rank::J, Rank::Q, Rank::K];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Rank> {
        Rank::ALL.get(i).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            Rank::J => 'J',
            Rank::Q => 'Q',
            Rank::K => 'K',
        }
    }

    fn from_symbol(c: char) -> Option<Rank> {
        match c {
            'J' => Some(Rank::J),
            'Q' => Some(Rank::Q),
            'K' => Some(Rank::K),
            _ => None,
        }
    }
}

/// A physical card: rank plus which of the two copies it is.
///
/// Copies are written with suit letters `s` (copy 0) and `h` (copy 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Card {
    rank: Rank,
    copy: u8,
}

impl Card {
    pub fn new(rank: Rank, copy: u8) -> Result<Card> {
        if copy > 1 {
            return Err(Error::InvalidDeal(format!("card copy {copy} out of range")));
        }
        Ok(Card { rank, copy })
    }

    pub fn rank(self) -> Rank {
        self.rank
    }

    pub fn copy(self) -> u8 {
        self.copy
    }

    /// Deck slot in `0..6`, ordered J♠ J♥ Q♠ Q♥ K♠ K♥.
    pub fn slot(self) -> usize {
        self.rank.index() * 2 + self.copy as usize
    }

    pub fn from_slot(slot: usize) -> Card {
        assert!(slot < DECK_SIZE, "deck slot {slot} out of range");
        Card {
            rank: Rank::ALL[slot / 2],
            copy: (slot % 2) as u8,
        }
    }

    pub fn deck() -> impl Iterator<Item = Card> {
        (0..DECK_SIZE).map(Card::from_slot)
    }
}

impl fmt::Display for Card {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let suit = if self.copy == 0 { 's' } else { 'h' };
        write!(f, "{}{}", self.rank.symbol(), suit)
    }
}

impl FromStr for Card {
    type Err = Error;

    fn from_str(s: &str) -> Result<Card> {
        let mut chars = s.chars();
        let (Some(r), Some(c), None) = (chars.next(), chars.next(), chars.next()) else {
            return Err(Error::InvalidDeal(format!("bad card `{s}`")));
        };
        let rank =
            Rank::from_symbol(r).ok_or_else(|| Error::InvalidDeal(format!("bad rank in `{s}`")))?;
        let copy = match c {
            's' => 0,
            'h' => 1,
            _ => return Err(Error::InvalidDeal(format!("bad suit in `{s}`"))),
        };
        Card::new(rank, copy)
    }
}

/// Action indices are shared with the 3-way neural head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Fold = 0,
    /// Check when there is nothing to call.
    Call = 1,
    /// Bet when there is nothing to call.
    Raise = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Fold, Action::Call, Action::Raise];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            Action::Fold => 'f',
            Action::Call => 'c',
            Action::Raise => 'r',
        }
    }

    pub fn from_symbol(c: char) -> Option<Action> {
        match c {
            'f' => Some(Action::Fold),
            'c' => Some(Action::Call),
            'r' => Some(Action::Raise),
            _ => None,
        }
    }
}

/// Set of legal actions as a 3-bit mask (bit i = action index i).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LegalMask(u8);

impl LegalMask {
    pub const ALL: LegalMask = LegalMask(0b111);

    pub fn from_bits(bits: u8) -> LegalMask {
        LegalMask(bits & 0b111)
    }

    pub fn from_actions(actions: &[Action]) -> LegalMask {
        LegalMask(actions.iter().fold(0, |m, a| m | 1 << a.index()))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, a: Action) -> bool {
        self.0 & (1 << a.index()) != 0
    }

    pub fn is_legal(self, index: usize) -> bool {
        index < NUM_ACTIONS && self.0 & (1 << index) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Legal actions in index order.
    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL.into_iter().filter(move |&a| self.contains(a))
    }

    /// Uniform distribution over the legal actions.
    pub fn uniform(self) -> [f64; NUM_ACTIONS] {
        let n = self.count() as f64;
        let mut p = [0.0; NUM_ACTIONS];
        for a in self.iter() {
            p[a.index()] = 1.0 / n;
        }
        p
    }
}

/// Private cards for both players plus the (initially hidden) public card.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Deal {
    pub private: [Card; 2],
    pub public: Card,
}

impl Deal {
    pub fn new(p0: Card, p1: Card, public: Card) -> Result<Deal> {
        if p0 == p1 || p0 == public || p1 == public {
            return Err(Error::InvalidDeal(format!(
                "deck slot reused in ({p0}, {p1}, {public})"
            )));
        }
        Ok(Deal {
            private: [p0, p1],
            public,
        })
    }

    /// Deterministic deal without replacement from a 64-bit seed.
    pub fn from_seed(seed: u64) -> Deal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = sample(&mut rng, DECK_SIZE, 3);
        Deal {
            private: [
                Card::from_slot(slots.index(0)),
                Card::from_slot(slots.index(1)),
            ],
            public: Card::from_slot(slots.index(2)),
        }
    }

    /// All 6·5·4 = 120 ordered assignments; each has probability 1/120.
    pub fn enumerate() -> Vec<Deal> {
        let mut out = Vec::with_capacity(120);
        for a in Card::deck() {
            for b in Card::deck() {
                for c in Card::deck() {
                    if let Ok(d) = Deal::new(a, b, c) {
                        out.push(d);
                    }
                }
            }
        }
        out
    }
}

/// Who moves next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Actor {
    Player(usize),
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TerminalOutcome {
    pub payoff_p0: i32,
    pub payoff_p1: i32,
}

impl TerminalOutcome {
    pub fn for_player(&self, player: usize) -> i32 {
        if player == 0 {
            self.payoff_p0
        } else {
            self.payoff_p1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GameState {
    deal: Deal,
    round: u8,
    contributions: [u32; 2],
    history: [Vec<Action>; 2],
    actor: Actor,
    raises_this_round: u8,
    folded_by: Option<usize>,
}

/// Round-1 start state for an explicit deal.
pub fn deal_hand(deal: Deal) -> GameState {
    GameState::new(deal)
}

impl GameState {
    pub fn new(deal: Deal) -> GameState {
        GameState {
            deal,
            round: 1,
            contributions: [ANTE, ANTE],
            history: [Vec::new(), Vec::new()],
            actor: Actor::Player(0),
            raises_this_round: 0,
            folded_by: None,
        }
    }

    pub fn from_seed(seed: u64) -> GameState {
        GameState::new(Deal::from_seed(seed))
    }

    pub fn deal(&self) -> &Deal {
        &self.deal
    }

    pub fn round(&self) -> u8 {
        self.round
    }

    pub fn private_card(&self, player: usize) -> Card {
        self.deal.private[player]
    }

    /// Revealed only once round 2 has started.
    pub fn public_card(&self) -> Option<Card> {
        (self.round == 2).then_some(self.deal.public)
    }

    pub fn contributions(&self) -> [u32; 2] {
        self.contributions
    }

    pub fn pot(&self) -> u32 {
        self.contributions[0] + self.contributions[1]
    }

    pub fn actor(&self) -> Actor {
        self.actor
    }

    pub fn current_player(&self) -> Option<usize> {
        match self.actor {
            Actor::Player(p) => Some(p),
            Actor::Terminal => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.actor == Actor::Terminal
    }

    pub fn raises_this_round(&self) -> u8 {
        self.raises_this_round
    }

    pub fn folded_by(&self) -> Option<usize> {
        self.folded_by
    }

    /// Actions taken in a betting round (1-based). Player 0 made the first.
    pub fn round_history(&self, round: u8) -> &[Action] {
        &self.history[(round - 1) as usize]
    }

    /// Every action so far as (round, player, action).
    pub fn actions(&self) -> impl Iterator<Item = (u8, usize, Action)> + '_ {
        (1..=2u8).flat_map(move |r| {
            self.round_history(r)
                .iter()
                .enumerate()
                .map(move |(i, &a)| (r, i % 2, a))
        })
    }

    /// True when the player to act has unequal contributions to match.
    pub fn facing_bet(&self) -> bool {
        self.contributions[0] != self.contributions[1]
    }

    /// Canonical history string: round actions as `f`/`c`/`r`, rounds joined by `/`.
    pub fn history_string(&self) -> String {
        let mut s: String = self.history[0].iter().map(|a| a.symbol()).collect();
        if self.round == 2 {
            s.push('/');
            s.extend(self.history[1].iter().map(|a| a.symbol()));
        }
        s
    }

    pub fn legal_actions(&self) -> Result<LegalMask> {
        if self.is_terminal() {
            return Err(Error::TerminalState);
        }
        let mut bits = 1 << Action::Call.index();
        if self.facing_bet() {
            bits |= 1 << Action::Fold.index();
        }
        if self.raises_this_round < MAX_RAISES {
            bits |= 1 << Action::Raise.index();
        }
        Ok(LegalMask(bits))
    }

    pub fn apply(&self, action: Action) -> Result<GameState> {
        let player = self.current_player().ok_or(Error::TerminalState)?;
        if !self.legal_actions()?.contains(action) {
            return Err(Error::IllegalAction(action));
        }
        let mut next = self.clone();
        let r = (self.round - 1) as usize;
        next.history[r].push(action);
        let other = 1 - player;
        match action {
            Action::Fold => {
                next.folded_by = Some(player);
                next.actor = Actor::Terminal;
            }
            Action::Raise => {
                next.contributions[player] = self.contributions[other] + bet_size(self.round);
                next.raises_this_round += 1;
                next.actor = Actor::Player(other);
            }
            Action::Call => {
                next.contributions[player] = self.contributions[other];
                // Only an opening check leaves the round open.
                let closes = !self.history[r].is_empty();
                if !closes {
                    next.actor = Actor::Player(other);
                } else if self.round == 1 {
                    next.round = 2;
                    next.raises_this_round = 0;
                    next.actor = Actor::Player(0);
                } else {
                    next.actor = Actor::Terminal;
                }
            }
        }
        Ok(next)
    }

    /// Net chip result for both players.
    pub fn terminal_payoff(&self) -> Result<TerminalOutcome> {
        if !self.is_terminal() {
            return Err(Error::NotTerminal);
        }
        let (p0, p1) = if let Some(folder) = self.folded_by {
            let lost = self.contributions[folder] as i32;
            if folder == 0 {
                (-lost, lost)
            } else {
                (lost, -lost)
            }
        } else {
            let stake = self.contributions[0] as i32;
            match showdown_winner(
                self.deal.private[0].rank,
                self.deal.private[1].rank,
                self.deal.public.rank,
            ) {
                Some(0) => (stake, -stake),
                Some(_) => (-stake, stake),
                None => (0, 0),
            }
        };
        Ok(TerminalOutcome {
            payoff_p0: p0,
            payoff_p1: p1,
        })
    }

    pub fn info_state_key(&self, player: usize) -> InfoStateKey {
        InfoStateKey {
            player: player as u8,
            history: self.history_string(),
            private: self.deal.private[player],
            public: self.public_card(),
        }
    }
}

/// Index of the winning player, `None` for a split pot.
pub fn showdown_winner(r0: Rank, r1: Rank, public: Rank) -> Option<usize> {
    match (r0 == public, r1 == public) {
        (true, false) => Some(0),
        (false, true) => Some(1),
        _ => match r0.cmp(&r1) {
            std::cmp::Ordering::Greater => Some(0),
            std::cmp::Ordering::Less => Some(1),
            std::cmp::Ordering::Equal => None,
        },
    }
}

/// Everything a player can observe at a decision point.
///
/// Serialized as `<player>:<private>:<public or ->:<history>`, for example
/// `1:Qh:Ks:crc/r`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InfoStateKey {
    pub player: u8,
    pub history: String,
    pub private: Card,
    pub public: Option<Card>,
}

impl InfoStateKey {
    pub fn round(&self) -> u8 {
        if self.public.is_some() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for InfoStateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:", self.player, self.private)?;
        match self.public {
            Some(c) => write!(f, "{c}")?,
            None => f.write_str("-")?,
        }
        write!(f, ":{}", self.history)
    }
}

impl FromStr for InfoStateKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<InfoStateKey> {
        let bad = || Error::InvalidDeal(format!("bad information state key `{s}`"));
        let mut parts = s.splitn(4, ':');
        let player = match parts.next() {
            Some("0") => 0,
            Some("1") => 1,
            _ => return Err(bad()),
        };
        let private = parts.next().ok_or_else(bad)?.parse()?;
        let public = match parts.next().ok_or_else(bad)? {
            "-" => None,
            c => Some(c.parse()?),
        };
        let history = parts.next().ok_or_else(bad)?.to_string();
        if !history
            .chars()
            .all(|c| c == '/' || Action::from_symbol(c).is_some())
        {
            return Err(bad());
        }
        Ok(InfoStateKey {
            player,
            history,
            private,
            public,
        })
    }
}

/// Every information state of both players, sorted, by full tree traversal.
pub fn enumerate_info_states() -> Vec<InfoStateKey> {
    fn walk(state: &GameState, out: &mut BTreeSet<InfoStateKey>) {
        let Some(p) = state.current_player() else {
            return;
        };
        out.insert(state.info_state_key(p));
        for a in state.legal_actions().expect("non-terminal").iter() {
            walk(&state.apply(a).expect("legal"), out);
        }
    }
    let mut keys = BTreeSet::new();
    for deal in Deal::enumerate() {
        walk(&GameState::new(deal), &mut keys);
    }
    keys.into_iter().collect()
}
