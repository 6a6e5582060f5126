//! Card-independent betting tree and dense information-state indexing.
//!
//! The public tree has 6 round-1 decision nodes and 5 × 6 round-2 decision
//! nodes. An information state is a decision node plus the acting player's
//! private card and, in round 2, the public card. Tabular algorithms walk
//! the tree once per iteration carrying per-card vectors instead of
//! enumerating deals.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::game::{Action, Card, Deal, GameState, InfoStateKey, LegalMask, DECK_SIZE, NUM_ACTIONS};

/// Public-card slot used for round-1 states.
pub(crate) const NO_PUBLIC: usize = DECK_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NodeKind {
    Decision { player: usize },
    Fold { folder: usize },
    Showdown,
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub round: u8,
    pub kind: NodeKind,
    pub contributions: [u32; 2],
    pub legal: LegalMask,
    pub children: [Option<usize>; NUM_ACTIONS],
    pub history: String,
}

#[derive(Debug)]
pub(crate) struct BettingTree {
    pub nodes: Vec<Node>,
}

impl BettingTree {
    fn build() -> BettingTree {
        let deal = Deal::new(Card::from_slot(0), Card::from_slot(2), Card::from_slot(4))
            .expect("distinct");
        let mut nodes = Vec::new();
        Self::expand(&GameState::new(deal), &mut nodes);
        BettingTree { nodes }
    }

    fn expand(state: &GameState, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        let kind = match (state.current_player(), state.folded_by()) {
            (Some(player), _) => NodeKind::Decision { player },
            (None, Some(folder)) => NodeKind::Fold { folder },
            (None, None) => NodeKind::Showdown,
        };
        let legal = state.legal_actions().unwrap_or_default();
        nodes.push(Node {
            round: state.round(),
            kind,
            contributions: state.contributions(),
            legal,
            children: [None; NUM_ACTIONS],
            history: state.history_string(),
        });
        for a in legal.iter() {
            let child = Self::expand(&state.apply(a).expect("legal"), nodes);
            nodes[id].children[a.index()] = Some(child);
        }
        id
    }

    pub fn root(&self) -> usize {
        0
    }
}

/// Canonical ordering of all information states plus dense lookup tables.
#[derive(Debug)]
pub struct InfoSetIndex {
    keys: Vec<InfoStateKey>,
    legal: Vec<LegalMask>,
    by_key: HashMap<InfoStateKey, usize>,
    /// `[node][private slot][public slot or NO_PUBLIC]` → dense id.
    by_node: Vec<[[Option<usize>; DECK_SIZE + 1]; DECK_SIZE]>,
    pub(crate) tree: BettingTree,
}

impl InfoSetIndex {
    fn build() -> InfoSetIndex {
        let tree = BettingTree::build();
        let mut entries = Vec::new();
        for (node_id, node) in tree.nodes.iter().enumerate() {
            let NodeKind::Decision { player } = node.kind else {
                continue;
            };
            for private in Card::deck() {
                let publics: Vec<Option<Card>> = if node.round == 1 {
                    vec![None]
                } else {
                    Card::deck().filter(|&c| c != private).map(Some).collect()
                };
                for public in publics {
                    let key = InfoStateKey {
                        player: player as u8,
                        history: node.history.clone(),
                        private,
                        public,
                    };
                    entries.push((key, node_id, node.legal));
                }
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut by_node = vec![[[None; DECK_SIZE + 1]; DECK_SIZE]; tree.nodes.len()];
        let mut by_key = HashMap::with_capacity(entries.len());
        let mut keys = Vec::with_capacity(entries.len());
        let mut legal = Vec::with_capacity(entries.len());
        for (id, (key, node_id, mask)) in entries.into_iter().enumerate() {
            let pub_slot = key.public.map_or(NO_PUBLIC, |c| c.slot());
            by_node[node_id][key.private.slot()][pub_slot] = Some(id);
            by_key.insert(key.clone(), id);
            keys.push(key);
            legal.push(mask);
        }
        InfoSetIndex {
            keys,
            legal,
            by_key,
            by_node,
            tree,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[InfoStateKey] {
        &self.keys
    }

    pub fn key(&self, id: usize) -> &InfoStateKey {
        &self.keys[id]
    }

    pub fn id(&self, key: &InfoStateKey) -> Option<usize> {
        self.by_key.get(key).copied()
    }

    pub fn legal(&self, id: usize) -> LegalMask {
        self.legal[id]
    }

    pub fn player(&self, id: usize) -> usize {
        self.keys[id].player as usize
    }

    pub(crate) fn at(&self, node: usize, private: usize, public: usize) -> Option<usize> {
        self.by_node[node][private][public]
    }
}

/// Process-wide index, built on first use.
pub fn info_index() -> &'static InfoSetIndex {
    static INDEX: OnceLock<InfoSetIndex> = OnceLock::new();
    INDEX.get_or_init(InfoSetIndex::build)
}

/// Chance weight of a terminal: 1/30 for a private pair, 1/120 once the
/// public card is fixed.
pub(crate) fn chance_weight(public: usize) -> f64 {
    if public == NO_PUBLIC {
        1.0 / 30.0
    } else {
        1.0 / 120.0
    }
}

/// Terminal counterfactual values for `player`, per own private card,
/// given the opponent's reach per private card.
pub(crate) fn terminal_values(
    node: &Node,
    player: usize,
    opp_reach: &[f64; DECK_SIZE],
    public: usize,
) -> [f64; DECK_SIZE] {
    let w = chance_weight(public);
    let mut out = [0.0; DECK_SIZE];
    match node.kind {
        NodeKind::Fold { folder } => {
            let u = if folder == player {
                -(node.contributions[player] as f64)
            } else {
                node.contributions[1 - player] as f64
            };
            let total: f64 = opp_reach
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != public)
                .map(|(_, r)| r)
                .sum();
            for (a, v) in out.iter_mut().enumerate() {
                if a == public {
                    continue;
                }
                *v = w * u * (total - opp_reach[a]);
            }
        }
        NodeKind::Showdown => {
            let stake = node.contributions[0] as f64;
            let public_rank = Card::from_slot(public).rank();
            for (a, v) in out.iter_mut().enumerate() {
                if a == public {
                    continue;
                }
                let ra = Card::from_slot(a).rank();
                let mut acc = 0.0;
                for (b, &r) in opp_reach.iter().enumerate() {
                    if b == a || b == public || r == 0.0 {
                        continue;
                    }
                    let rb = Card::from_slot(b).rank();
                    let (r0, r1) = if player == 0 { (ra, rb) } else { (rb, ra) };
                    match crate::game::showdown_winner(r0, r1, public_rank) {
                        Some(p) if p == player => acc += r,
                        Some(_) => acc -= r,
                        None => {}
                    }
                }
                *v = w * stake * acc;
            }
        }
        NodeKind::Decision { .. } => unreachable!("terminal_values on a decision node"),
    }
    out
}

/// Legal action indices of a node.
pub(crate) fn node_actions(node: &Node) -> impl Iterator<Item = (usize, usize)> + '_ {
    Action::ALL
        .iter()
        .filter_map(move |a| node.children[a.index()].map(|c| (a.index(), c)))
}
