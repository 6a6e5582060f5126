//! Tabular strategies and their text file format.
//!
//! ```text
//! leduc-strategy v1 players=0,1
//! 0:Js:-: 0 6.1234567890123456e-1 3.8765432109876544e-1
//! ...
//! ```
//!
//! One line per information state, sorted by key, with fold/call/raise
//! probabilities printed to 17 significant digits. Illegal slots are written
//! as a bare `0`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::game::{Action, InfoStateKey, LegalMask, NUM_ACTIONS};
use crate::io::{read_versioned, write_atomic};
use crate::tree::info_index;

pub type ActionDist = [f64; NUM_ACTIONS];

pub const STRATEGY_FORMAT: &str = "leduc-strategy v1";

const SUM_TOLERANCE: f64 = 1e-9;

/// Per-information-state action distributions, aligned with the canonical
/// information-state ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyTable {
    entries: Vec<Option<ActionDist>>,
}

impl Default for StrategyTable {
    fn default() -> Self {
        Self::empty()
    }
}

impl StrategyTable {
    pub fn empty() -> StrategyTable {
        StrategyTable {
            entries: vec![None; info_index().len()],
        }
    }

    /// Uniform over legal actions at every key owned by `players`.
    pub fn uniform(players: &[usize]) -> StrategyTable {
        Self::from_fn(players, |_, legal| legal.uniform())
    }

    pub fn from_fn(
        players: &[usize],
        mut f: impl FnMut(&InfoStateKey, LegalMask) -> ActionDist,
    ) -> StrategyTable {
        let idx = info_index();
        let entries = (0..idx.len())
            .map(|id| {
                players
                    .contains(&idx.player(id))
                    .then(|| f(idx.key(id), idx.legal(id)))
            })
            .collect();
        StrategyTable { entries }
    }

    pub(crate) fn from_dense(entries: Vec<Option<ActionDist>>) -> StrategyTable {
        debug_assert_eq!(entries.len(), info_index().len());
        StrategyTable { entries }
    }

    pub fn get(&self, key: &InfoStateKey) -> Option<&ActionDist> {
        info_index()
            .id(key)
            .and_then(|id| self.entries[id].as_ref())
    }

    pub fn get_id(&self, id: usize) -> Option<&ActionDist> {
        self.entries[id].as_ref()
    }

    /// Looks up `key`, failing with an incomplete-strategy error.
    pub fn dist(&self, key: &InfoStateKey) -> Result<&ActionDist> {
        self.get(key)
            .ok_or_else(|| Error::IncompleteStrategy(key.to_string()))
    }

    pub(crate) fn dist_id(&self, id: usize) -> Result<&ActionDist> {
        self.entries[id]
            .as_ref()
            .ok_or_else(|| Error::IncompleteStrategy(info_index().key(id).to_string()))
    }

    pub fn set(&mut self, key: &InfoStateKey, dist: ActionDist) -> Result<()> {
        let idx = info_index();
        let id = idx.id(key).ok_or_else(|| Error::InvalidDistribution {
            key: key.to_string(),
            reason: "not a reachable information state".into(),
        })?;
        check_dist(key, idx.legal(id), &dist)?;
        self.entries[id] = Some(dist);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&InfoStateKey, &ActionDist)> {
        let idx = info_index();
        self.entries
            .iter()
            .enumerate()
            .filter_map(move |(id, e)| e.as_ref().map(|d| (idx.key(id), d)))
    }

    pub(crate) fn iter_ids(&self) -> impl Iterator<Item = (usize, &ActionDist)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(id, e)| e.as_ref().map(|d| (id, d)))
    }

    /// True when every key of `player` has an entry.
    pub fn covers(&self, player: usize) -> bool {
        let idx = info_index();
        (0..idx.len()).all(|id| idx.player(id) != player || self.entries[id].is_some())
    }

    /// Players whose keys are fully covered.
    pub fn players(&self) -> Vec<usize> {
        (0..2).filter(|&p| self.covers(p)).collect()
    }

    /// Copy containing only `player`'s keys.
    pub fn restrict(&self, player: usize) -> StrategyTable {
        let idx = info_index();
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(id, e)| if idx.player(id) == player { *e } else { None })
            .collect();
        StrategyTable { entries }
    }

    /// Overlay `other`'s entries onto a copy of `self`.
    pub fn merged(&self, other: &StrategyTable) -> StrategyTable {
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| b.or(*a))
            .collect();
        StrategyTable { entries }
    }

    /// Checks every entry is a distribution over its legal actions.
    pub fn validate(&self) -> Result<()> {
        let idx = info_index();
        for (id, d) in self.iter_ids() {
            check_dist(idx.key(id), idx.legal(id), d)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let idx = info_index();
        let players: Vec<String> = self.players().iter().map(|p| p.to_string()).collect();
        let mut out = format!("{STRATEGY_FORMAT} players={}\n", players.join(","));
        for (id, d) in self.iter_ids() {
            let legal = idx.legal(id);
            write!(out, "{}", idx.key(id)).unwrap();
            for (i, p) in d.iter().enumerate() {
                if legal.is_legal(i) {
                    write!(out, " {p:.16e}").unwrap();
                } else {
                    out.push_str(" 0");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<StrategyTable> {
        let body = read_versioned(text, STRATEGY_FORMAT, origin)?;
        let mut table = StrategyTable::empty();
        let idx = info_index();
        for (n, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: &str| Error::format(origin, format!("line {}: {reason}", n + 2));
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 1 + NUM_ACTIONS {
                return Err(err("expected a key and three probabilities"));
            }
            let key: InfoStateKey = fields[0].parse().map_err(|_| err("bad key"))?;
            let id = idx.id(&key).ok_or_else(|| err("unknown key"))?;
            let legal = idx.legal(id);
            let mut dist = [0.0; NUM_ACTIONS];
            for (i, f) in fields[1..].iter().enumerate() {
                if !legal.is_legal(i) {
                    if *f != "0" {
                        return Err(err("illegal action slot must be written as 0"));
                    }
                    continue;
                }
                dist[i] = f.parse().map_err(|_| err("bad probability"))?;
            }
            check_dist(&key, legal, &dist)?;
            table.entries[id] = Some(dist);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<StrategyTable> {
        let text = crate::io::read_artifact(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}

fn check_dist(key: &InfoStateKey, legal: LegalMask, dist: &ActionDist) -> Result<()> {
    let bad = |reason: String| Error::InvalidDistribution {
        key: key.to_string(),
        reason,
    };
    for a in Action::ALL {
        let p = dist[a.index()];
        if !p.is_finite() || p < 0.0 {
            return Err(bad(format!("probability {p} for {a:?}")));
        }
        if !legal.contains(a) && p != 0.0 {
            return Err(bad(format!("mass {p} on illegal {a:?}")));
        }
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(bad(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// Samples an action index from a distribution with a uniform draw `u` in
/// `[0, 1)` by inverse CDF over legal actions.
pub fn sample_with_uniform(dist: &ActionDist, legal: LegalMask, u: f64) -> Action {
    let mut acc = 0.0;
    let mut last = None;
    for a in legal.iter() {
        let p = dist[a.index()];
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(a);
        if u < acc {
            return a;
        }
    }
    last.or_else(|| legal.iter().next())
        .expect("nonempty legal set")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_table_is_valid() {
        let t = StrategyTable::uniform(&[0, 1]);
        assert_eq!(t.len(), 936);
        t.validate().unwrap();
        assert_eq!(t.players(), vec![0, 1]);
        let only0 = t.restrict(0);
        assert_eq!(only0.players(), vec![0]);
        assert_eq!(only0.len() + t.restrict(1).len(), 936);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut t = StrategyTable::uniform(&[0, 1]);
        let key = info_index().key(7).clone();
        let legal = info_index().legal(7);
        let mut d = [0.0; 3];
        let acts: Vec<_> = legal.iter().collect();
        d[acts[0].index()] = 1.0 / 3.0 + 1e-13;
        d[acts[1].index()] = 1.0 - d[acts[0].index()];
        t.set(&key, d).unwrap();
        let text = t.to_text();
        assert!(text.starts_with("leduc-strategy v1 players=0,1\n"));
        let back = StrategyTable::from_text(&text, "mem").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn illegal_slots_are_literal_zero() {
        let t = StrategyTable::uniform(&[0]);
        let text = t.to_text();
        let root = text.lines().find(|l| l.starts_with("0:Js:-: ")).unwrap();
        assert!(
            root.starts_with("0:Js:-: 0 5.0000000000000000e-1"),
            "{root}"
        );
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(
            StrategyTable::from_text("leduc-strategy v9 players=0\n", "x"),
            Err(Error::Version { .. })
        ));
        let bad = "leduc-strategy v1 players=0\n0:Js:-: 0.5 0.5 0\n";
        assert!(StrategyTable::from_text(bad, "x").is_err());
        let bad_sum = "leduc-strategy v1 players=0\n0:Js:-: 0 0.5 0.6\n";
        assert!(StrategyTable::from_text(bad_sum, "x").is_err());
    }

    #[test]
    fn inverse_cdf_sampling() {
        let legal = LegalMask::from_actions(&[Action::Call, Action::Raise]);
        let d = [0.0, 0.25, 0.75];
        assert_eq!(sample_with_uniform(&d, legal, 0.0), Action::Call);
        assert_eq!(sample_with_uniform(&d, legal, 0.2499), Action::Call);
        assert_eq!(sample_with_uniform(&d, legal, 0.25), Action::Raise);
        assert_eq!(sample_with_uniform(&d, legal, 0.999_999_999), Action::Raise);
    }
}
