//! CFR, exact expected values, exact best responses and
//! exploitability for tabular Leduc strategies.
//!
//! CFR and best response run on the public betting tree with per-card reach
//! vectors. Expected values walk the rules engine deal by deal, so the two
//! routes check each other.

use std::path::Path;

use crate::error::{Error, Result};
use crate::game::{Action, Deal, GameState, InfoStateKey, DECK_SIZE, NUM_ACTIONS};
use crate::io::{kv_fields, read_artifact, read_versioned, write_atomic};
use crate::strategy::{ActionDist, StrategyTable};
use crate::tree::{info_index, node_actions, terminal_values, InfoSetIndex, NodeKind, NO_PUBLIC};

type CardVec = [f64; DECK_SIZE];

/// Regret-update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CfrVariant {
    /// Plain regret matching; negative cumulative regrets are kept and the
    /// average strategy weights every iteration equally.
    Vanilla,
    /// Regret matching+: cumulative regrets floored at zero after every
    /// update and iteration `t` weighted by `t` in the average.
    #[default]
    Plus,
}

/// Regret and average-strategy accumulators for CFR with alternating updates.
#[derive(Debug, Clone)]
pub struct CfrSolverState {
    variant: CfrVariant,
    cumulative_regrets: Vec<ActionDist>,
    cumulative_strategy: Vec<ActionDist>,
    current: Vec<ActionDist>,
    iterations_done: u64,
}

impl Default for CfrSolverState {
    fn default() -> Self {
        Self::new(CfrVariant::default())
    }
}

impl CfrSolverState {
    pub fn new(variant: CfrVariant) -> CfrSolverState {
        let idx = info_index();
        let n = idx.len();
        let current = (0..n).map(|id| idx.legal(id).uniform()).collect();
        CfrSolverState {
            variant,
            cumulative_regrets: vec![[0.0; NUM_ACTIONS]; n],
            cumulative_strategy: vec![[0.0; NUM_ACTIONS]; n],
            current,
            iterations_done: 0,
        }
    }

    pub fn variant(&self) -> CfrVariant {
        self.variant
    }

    pub fn iterations_done(&self) -> u64 {
        self.iterations_done
    }

    pub fn cumulative_regrets(&self) -> &[ActionDist] {
        &self.cumulative_regrets
    }

    /// One CFR iteration with alternating updates (player 0, then player 1).
    pub fn iterate(&mut self) {
        let idx = info_index();
        let weight = match self.variant {
            CfrVariant::Vanilla => 1.0,
            CfrVariant::Plus => (self.iterations_done + 1) as f64,
        };
        for player in 0..2 {
            self.traverse(
                idx,
                idx.tree.root(),
                player,
                [1.0; DECK_SIZE],
                [1.0; DECK_SIZE],
                NO_PUBLIC,
                weight,
            );
            if self.variant == CfrVariant::Plus {
                for id in (0..idx.len()).filter(|&id| idx.player(id) == player) {
                    for r in self.cumulative_regrets[id].iter_mut() {
                        *r = r.max(0.0);
                    }
                }
            }
            self.regret_match(idx, player);
        }
        self.iterations_done += 1;
    }

    fn regret_match(&mut self, idx: &InfoSetIndex, player: usize) {
        for id in 0..idx.len() {
            if idx.player(id) != player {
                continue;
            }
            let legal = idx.legal(id);
            let r = &self.cumulative_regrets[id];
            let pos: f64 = legal.iter().map(|a| r[a.index()].max(0.0)).sum();
            self.current[id] = if pos > 0.0 {
                let mut s = [0.0; NUM_ACTIONS];
                for a in legal.iter() {
                    s[a.index()] = r[a.index()].max(0.0) / pos;
                }
                s
            } else {
                legal.uniform()
            };
        }
    }

    /// Returns the traverser's counterfactual values per private card.
    #[allow(clippy::too_many_arguments)]
    fn traverse(
        &mut self,
        idx: &InfoSetIndex,
        node_id: usize,
        traverser: usize,
        own: CardVec,
        opp: CardVec,
        public: usize,
        weight: f64,
    ) -> CardVec {
        let node = &idx.tree.nodes[node_id];
        let NodeKind::Decision { player } = node.kind else {
            return terminal_values(node, traverser, &opp, public);
        };
        let mut child_values = [[0.0; DECK_SIZE]; NUM_ACTIONS];
        for (a, child) in node_actions(node) {
            let acting = if player == traverser { &own } else { &opp };
            let mut reach = *acting;
            for (c, r) in reach.iter_mut().enumerate() {
                if let Some(id) = idx.at(node_id, c, public) {
                    *r *= self.current[id][a];
                } else {
                    *r = 0.0;
                }
            }
            let (own2, opp2) = if player == traverser {
                (reach, opp)
            } else {
                (own, reach)
            };
            child_values[a] =
                self.child(idx, node_id, child, traverser, own2, opp2, public, weight);
        }
        let mut values = [0.0; DECK_SIZE];
        if player == traverser {
            for c in 0..DECK_SIZE {
                let Some(id) = idx.at(node_id, c, public) else {
                    continue;
                };
                let sigma = self.current[id];
                let v: f64 = node_actions(node)
                    .map(|(a, _)| sigma[a] * child_values[a][c])
                    .sum();
                values[c] = v;
                for (a, _) in node_actions(node) {
                    self.cumulative_regrets[id][a] += child_values[a][c] - v;
                    self.cumulative_strategy[id][a] += weight * own[c] * sigma[a];
                }
            }
        } else {
            for (a, _) in node_actions(node) {
                for c in 0..DECK_SIZE {
                    values[c] += child_values[a][c];
                }
            }
        }
        values
    }

    #[allow(clippy::too_many_arguments)]
    fn child(
        &mut self,
        idx: &InfoSetIndex,
        parent: usize,
        child: usize,
        traverser: usize,
        own: CardVec,
        opp: CardVec,
        public: usize,
        weight: f64,
    ) -> CardVec {
        if idx.tree.nodes[parent].round == 1 && idx.tree.nodes[child].round == 2 {
            let mut total = [0.0; DECK_SIZE];
            for p in 0..DECK_SIZE {
                let (mut o, mut q) = (own, opp);
                o[p] = 0.0;
                q[p] = 0.0;
                let v = self.traverse(idx, child, traverser, o, q, p, weight);
                for c in 0..DECK_SIZE {
                    total[c] += v[c];
                }
            }
            total
        } else {
            self.traverse(idx, child, traverser, own, opp, public, weight)
        }
    }

    /// Normalized average strategy for both players.
    pub fn average_strategy(&self) -> StrategyTable {
        let idx = info_index();
        let entries = (0..idx.len())
            .map(|id| {
                let legal = idx.legal(id);
                let s = &self.cumulative_strategy[id];
                let total: f64 = s.iter().sum();
                Some(if total > 0.0 {
                    let mut d = [0.0; NUM_ACTIONS];
                    for a in legal.iter() {
                        d[a.index()] = s[a.index()] / total;
                    }
                    d
                } else {
                    legal.uniform()
                })
            })
            .collect();
        StrategyTable::from_dense(entries)
    }
}

/// Runs the default CFR variant for up to `iterations`, stopping early once per-player
/// exploitability of the average strategy drops below `target`.
pub fn cfr_solve(iterations: u64, target: Option<f64>) -> (CfrSolverState, StrategyTable) {
    cfr_solve_with(CfrVariant::default(), iterations, target, |_, _| {})
}

/// Like [`cfr_solve`], reporting `(iterations, exploitability)` at each check.
pub fn cfr_solve_with(
    variant: CfrVariant,
    iterations: u64,
    target: Option<f64>,
    mut progress: impl FnMut(u64, f64),
) -> (CfrSolverState, StrategyTable) {
    let mut state = CfrSolverState::new(variant);
    let check_every = 1000u64;
    for t in 1..=iterations.max(1) {
        state.iterate();
        if t % check_every == 0 || t == iterations {
            let avg = state.average_strategy();
            let e = exploitability(&avg).expect("complete profile");
            progress(t, e);
            if target.is_some_and(|tgt| e < tgt) {
                return (state, avg);
            }
        }
    }
    let avg = state.average_strategy();
    (state, avg)
}

/// Exact expected chips for both seats when seat 0 plays `p0` and seat 1
/// plays `p1`, enumerating every deal.
pub fn expected_value(p0: &StrategyTable, p1: &StrategyTable) -> Result<[f64; 2]> {
    fn walk(
        state: &GameState,
        tables: [&StrategyTable; 2],
        prob: f64,
        acc: &mut f64,
    ) -> Result<()> {
        let Some(player) = state.current_player() else {
            *acc += prob * state.terminal_payoff()?.payoff_p0 as f64;
            return Ok(());
        };
        let dist = tables[player].dist(&state.info_state_key(player))?;
        for a in state.legal_actions()?.iter() {
            let p = dist[a.index()];
            if p > 0.0 {
                walk(&state.apply(a)?, tables, prob * p, acc)?;
            }
        }
        Ok(())
    }
    let deals = Deal::enumerate();
    let w = 1.0 / deals.len() as f64;
    let mut v0 = 0.0;
    for deal in deals {
        walk(&GameState::new(deal), [p0, p1], w, &mut v0)?;
    }
    Ok([v0, -v0])
}

/// Exact best response of `responder` against the other seat's strategy.
#[derive(Debug, Clone)]
pub struct BrResult {
    pub responder: usize,
    /// Expected chips for the responder.
    pub value: f64,
    /// Pure strategy over the responder's keys.
    pub strategy: StrategyTable,
}

pub fn best_response(opponent: &StrategyTable, responder: usize) -> Result<BrResult> {
    let idx = info_index();
    let mut choice: Vec<Option<ActionDist>> = vec![None; idx.len()];
    let values = br_walk(
        idx,
        opponent,
        responder,
        idx.tree.root(),
        [1.0; DECK_SIZE],
        NO_PUBLIC,
        &mut choice,
    )?;
    Ok(BrResult {
        responder,
        value: values.iter().sum(),
        strategy: StrategyTable::from_dense(choice),
    })
}

fn br_walk(
    idx: &InfoSetIndex,
    opponent: &StrategyTable,
    responder: usize,
    node_id: usize,
    opp: CardVec,
    public: usize,
    choice: &mut Vec<Option<ActionDist>>,
) -> Result<CardVec> {
    let node = &idx.tree.nodes[node_id];
    let NodeKind::Decision { player } = node.kind else {
        return Ok(terminal_values(node, responder, &opp, public));
    };
    let mut child_values = [[0.0; DECK_SIZE]; NUM_ACTIONS];
    for (a, child) in node_actions(node) {
        let mut reach = opp;
        if player != responder {
            for (c, r) in reach.iter_mut().enumerate() {
                match idx.at(node_id, c, public) {
                    Some(id) => *r *= opponent.dist_id(id)?[a],
                    None => *r = 0.0,
                }
            }
        }
        child_values[a] = if node.round == 1 && idx.tree.nodes[child].round == 2 {
            let mut total = [0.0; DECK_SIZE];
            for p in 0..DECK_SIZE {
                let mut q = reach;
                q[p] = 0.0;
                let v = br_walk(idx, opponent, responder, child, q, p, choice)?;
                for c in 0..DECK_SIZE {
                    total[c] += v[c];
                }
            }
            total
        } else {
            br_walk(idx, opponent, responder, child, reach, public, choice)?
        };
    }
    let mut values = [0.0; DECK_SIZE];
    if player == responder {
        for c in 0..DECK_SIZE {
            let Some(id) = idx.at(node_id, c, public) else {
                continue;
            };
            // Ascending scan with strict improvement: ties go to the lowest index.
            let mut best: Option<(usize, f64)> = None;
            for (a, _) in node_actions(node) {
                let v = child_values[a][c];
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((a, v));
                }
            }
            let (a, v) = best.expect("decision node has actions");
            values[c] = v;
            let mut d = [0.0; NUM_ACTIONS];
            d[a] = 1.0;
            choice[id] = Some(d);
        }
    } else {
        for (a, _) in node_actions(node) {
            for c in 0..DECK_SIZE {
                values[c] += child_values[a][c];
            }
        }
    }
    Ok(values)
}

/// Deterministic best-response action at one of the responder's keys.
pub fn br_action(br: &BrResult, key: &InfoStateKey) -> Result<Action> {
    let d = br.strategy.dist(key)?;
    let i = (0..NUM_ACTIONS)
        .find(|&i| d[i] == 1.0)
        .ok_or_else(|| Error::IncompleteStrategy(key.to_string()))?;
    Ok(Action::ALL[i])
}

/// Sum over seats of best-response gain against the profile where seat 0
/// plays `p0` and seat 1 plays `p1`.
pub fn nashconv(p0: &StrategyTable, p1: &StrategyTable) -> Result<f64> {
    let v = expected_value(p0, p1)?;
    let br0 = best_response(p1, 0)?.value;
    let br1 = best_response(p0, 1)?.value;
    Ok((br0 - v[0]) + (br1 - v[1]))
}

/// Per-player exploitability of a strategy used in both seats (NashConv / 2).
///
/// Uses the identity NashConv = BR₀(σ) + BR₁(σ), which only needs the two
/// best responses.
pub fn exploitability(sigma: &StrategyTable) -> Result<f64> {
    let br0 = best_response(sigma, 0)?.value;
    let br1 = best_response(sigma, 1)?.value;
    Ok((br0 + br1) / 2.0)
}

/// Equilibrium value of each seat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameValue {
    pub v_star_p0: f64,
    pub v_star_p1: f64,
}

pub const GAME_VALUE_FORMAT: &str = "leduc-game-value v1";

impl GameValue {
    /// Value of an (approximate) equilibrium profile.
    pub fn from_profile(gto: &StrategyTable) -> Result<GameValue> {
        let v = expected_value(gto, gto)?;
        Ok(GameValue {
            v_star_p0: v[0],
            v_star_p1: -v[0],
        })
    }

    pub fn for_player(&self, player: usize) -> f64 {
        if player == 0 {
            self.v_star_p0
        } else {
            self.v_star_p1
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "{GAME_VALUE_FORMAT}\nv_star_p0={:.16e}\nv_star_p1={:.16e}\n",
            self.v_star_p0, self.v_star_p1
        )
    }

    pub fn from_text(text: &str, origin: &str) -> Result<GameValue> {
        let body = read_versioned(text, GAME_VALUE_FORMAT, origin)?;
        let (mut v0, mut v1) = (None, None);
        for (k, v) in body.lines().flat_map(kv_fields) {
            let x: f64 = v
                .parse()
                .map_err(|_| Error::format(origin, format!("bad value `{v}`")))?;
            match k {
                "v_star_p0" => v0 = Some(x),
                "v_star_p1" => v1 = Some(x),
                _ => {}
            }
        }
        match (v0, v1) {
            (Some(v_star_p0), Some(v_star_p1)) => Ok(GameValue {
                v_star_p0,
                v_star_p1,
            }),
            _ => Err(Error::format(origin, "missing v_star_p0 / v_star_p1")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<GameValue> {
        Self::from_text(&read_artifact(path)?, &path.display().to_string())
    }
}

/// Extra payoff the other seat gains by best-responding to `sigma` played
/// in seat `owner`, relative to the equilibrium value.
pub fn opponent_exploitability(
    sigma: &StrategyTable,
    owner: usize,
    value: Option<&GameValue>,
) -> Result<f64> {
    let value = value.ok_or(Error::MissingGameValue)?;
    let other = 1 - owner;
    let br = best_response(sigma, other)?;
    Ok(br.value - value.for_player(other))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::LegalMask;

    #[test]
    fn one_iteration_average_is_uniform() {
        let (state, avg) = cfr_solve(1, None);
        assert_eq!(state.iterations_done(), 1);
        let idx = info_index();
        for (id, d) in avg.iter_ids() {
            let u = idx.legal(id).uniform();
            for i in 0..NUM_ACTIONS {
                assert!((d[i] - u[i]).abs() < 1e-15, "{} {:?}", idx.key(id), d);
            }
        }
    }

    #[test]
    fn ev_is_zero_sum() {
        let u = StrategyTable::uniform(&[0, 1]);
        let v = expected_value(&u, &u).unwrap();
        assert_eq!(v[0] + v[1], 0.0);
    }

    #[test]
    fn missing_key_is_reported() {
        let only0 = StrategyTable::uniform(&[0]);
        assert!(matches!(
            expected_value(&only0, &only0),
            Err(Error::IncompleteStrategy(_))
        ));
        assert!(matches!(
            best_response(&only0, 0),
            Err(Error::IncompleteStrategy(_))
        ));
        assert!(best_response(&only0, 1).is_ok());
    }

    #[test]
    fn br_value_matches_engine_ev() {
        let u = StrategyTable::uniform(&[0, 1]);
        for responder in 0..2 {
            let br = best_response(&u, responder).unwrap();
            let ev = if responder == 0 {
                expected_value(&br.strategy, &u).unwrap()
            } else {
                expected_value(&u, &br.strategy).unwrap()
            };
            assert!((ev[responder] - br.value).abs() < 1e-9);
        }
    }

    #[test]
    fn br_against_folder_is_positive() {
        // Folds whenever fold is legal, otherwise checks.
        let folder = StrategyTable::from_fn(&[0, 1], |_, legal: LegalMask| {
            let mut d = [0.0; 3];
            if legal.contains(Action::Fold) {
                d[0] = 1.0;
            } else {
                d[1] = 1.0;
            }
            d
        });
        for r in 0..2 {
            assert!(best_response(&folder, r).unwrap().value > 0.0);
        }
    }

    #[test]
    fn nashconv_is_nonnegative() {
        let u = StrategyTable::uniform(&[0, 1]);
        assert!(nashconv(&u, &u).unwrap() > 0.0);
    }

    #[test]
    fn game_value_text_round_trip() {
        let gv = GameValue {
            v_star_p0: -0.0856,
            v_star_p1: 0.0856,
        };
        assert_eq!(GameValue::from_text(&gv.to_text(), "m").unwrap(), gv);
        let u = StrategyTable::uniform(&[0, 1]);
        assert!(matches!(
            opponent_exploitability(&u, 0, None),
            Err(Error::MissingGameValue)
        ));
    }
}
