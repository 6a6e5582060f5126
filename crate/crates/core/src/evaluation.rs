//! Paired-seed head-to-head evaluation.
//!
//! Within a trial, hand `h` uses a deal derived from `(trial_seed, h)`, the
//! agent sits in seat `h % 2`, and decision `k` of the hand draws its uniform
//! from `(trial_seed, h, k)`. Two agents played against the same opponent
//! therefore see identical deals, seats and opponent randomness wherever
//! their histories coincide.

use std::fmt::Write as _;
use std::path::Path;

use crate::archetypes::OpponentRecord;
use crate::error::{Error, Result};
use crate::features::{make_token, OpponentTracker, TurnType};
use crate::game::{Action, Card, Deal, GameState, LegalMask};
use crate::io::write_atomic;
use crate::model::{InferenceSession, ModelParameters, Real};
use crate::seed::{unit_f64, SeedNamespace};
use crate::strategy::{sample_with_uniform, ActionDist, StrategyTable};

/// A player that can be seated against an opponent for a sequence of hands.
pub trait Agent {
    /// Starts a new match: clears any context and opponent statistics.
    fn reset(&mut self);
    /// Chooses an action at one of the agent's decisions from a uniform draw.
    fn act(&mut self, state: &GameState, seat: usize, u: f64) -> Result<Action>;
    /// Sees the opponent act at `state` (the state before the action).
    fn observe_opponent(&mut self, state: &GameState, seat: usize, action: Action) -> Result<()>;
    fn end_hand(&mut self, terminal: &GameState, seat: usize) -> Result<()>;
}

/// Exploration split of a single uniform: `u < epsilon` picks a legal action
/// uniformly, otherwise the rescaled draw samples `dist`. Returns the action
/// and whether it was exploratory.
pub fn epsilon_greedy(dist: &ActionDist, legal: LegalMask, epsilon: f64, u: f64) -> (Action, bool) {
    if epsilon > 0.0 && u < epsilon {
        let acts: Vec<Action> = legal.iter().collect();
        let i = ((u / epsilon) * acts.len() as f64) as usize;
        (acts[i.min(acts.len() - 1)], true)
    } else {
        let v = if epsilon > 0.0 {
            (u - epsilon) / (1.0 - epsilon)
        } else {
            u
        };
        (sample_with_uniform(dist, legal, v), false)
    }
}

/// Plays a fixed table, optionally with uniform exploration.
#[derive(Debug, Clone)]
pub struct TabularAgent {
    pub table: StrategyTable,
    pub epsilon: f64,
    pub explored: u64,
    pub decisions: u64,
}

impl TabularAgent {
    pub fn new(table: StrategyTable) -> TabularAgent {
        TabularAgent::with_epsilon(table, 0.0)
    }

    pub fn with_epsilon(table: StrategyTable, epsilon: f64) -> TabularAgent {
        TabularAgent {
            table,
            epsilon,
            explored: 0,
            decisions: 0,
        }
    }
}

impl Agent for TabularAgent {
    fn reset(&mut self) {}

    fn act(&mut self, state: &GameState, seat: usize, u: f64) -> Result<Action> {
        let dist = self.table.dist(&state.info_state_key(seat))?;
        let (a, explored) = epsilon_greedy(dist, state.legal_actions()?, self.epsilon, u);
        self.decisions += 1;
        self.explored += explored as u64;
        Ok(a)
    }

    fn observe_opponent(&mut self, _: &GameState, _: usize, _: Action) -> Result<()> {
        Ok(())
    }

    fn end_hand(&mut self, _: &GameState, _: usize) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Argmax,
}

impl ActionMode {
    pub fn name(self) -> &'static str {
        match self {
            ActionMode::Sample => "sample",
            ActionMode::Argmax => "argmax",
        }
    }

    pub fn parse(s: &str) -> Result<ActionMode> {
        match s {
            "sample" => Ok(ActionMode::Sample),
            "argmax" => Ok(ActionMode::Argmax),
            _ => Err(Error::Config(format!("unknown action mode `{s}`"))),
        }
    }
}

/// Transformer policy with its own tracker and showdown memory. Tokens are
/// built in inference mode: the opponent card revealed at the previous
/// showdown is visible in the following hand.
#[derive(Debug, Clone)]
pub struct ModelAgent<'a, T: Real> {
    session: InferenceSession<'a, T>,
    tracker: OpponentTracker,
    previous_reveal: Option<Card>,
    agent_turns_only: bool,
    mode: ActionMode,
}

impl<'a, T: Real> ModelAgent<'a, T> {
    pub fn new(
        params: &'a ModelParameters<T>,
        agent_turns_only: bool,
        mode: ActionMode,
    ) -> ModelAgent<'a, T> {
        ModelAgent {
            session: InferenceSession::new(params),
            tracker: OpponentTracker::new(),
            previous_reveal: None,
            agent_turns_only,
            mode,
        }
    }

    /// Policy at the agent's decision, after feeding its token.
    pub fn policy(&mut self, state: &GameState, seat: usize) -> Result<ActionDist> {
        let tok = make_token(
            state,
            seat,
            &self.tracker,
            TurnType::Agent,
            self.previous_reveal,
        );
        self.session.push(tok.as_slice())?;
        self.session.policy_dist(state.legal_actions()?)
    }
}

impl<T: Real> Agent for ModelAgent<'_, T> {
    fn reset(&mut self) {
        self.session.reset();
        self.tracker = OpponentTracker::new();
        self.previous_reveal = None;
    }

    fn act(&mut self, state: &GameState, seat: usize, u: f64) -> Result<Action> {
        let dist = self.policy(state, seat)?;
        let legal = state.legal_actions()?;
        Ok(match self.mode {
            ActionMode::Sample => sample_with_uniform(&dist, legal, u),
            ActionMode::Argmax => argmax(&dist, legal),
        })
    }

    fn observe_opponent(&mut self, state: &GameState, seat: usize, action: Action) -> Result<()> {
        if !self.agent_turns_only {
            let tok = make_token(
                state,
                seat,
                &self.tracker,
                TurnType::Opponent,
                self.previous_reveal,
            );
            self.session.push(tok.as_slice())?;
        }
        self.tracker
            .update(state.round(), state.facing_bet(), action);
        Ok(())
    }

    fn end_hand(&mut self, terminal: &GameState, seat: usize) -> Result<()> {
        self.previous_reveal = terminal
            .folded_by()
            .is_none()
            .then(|| terminal.private_card(1 - seat));
        self.tracker.finish_hand();
        Ok(())
    }
}

/// Lowest-index action with the highest probability.
pub fn argmax(dist: &ActionDist, legal: LegalMask) -> Action {
    let mut best: Option<Action> = None;
    for a in legal.iter() {
        if best.is_none_or(|b| dist[a.index()] > dist[b.index()]) {
            best = Some(a);
        }
    }
    best.expect("nonempty legal set")
}

/// Result of one hand from the agent's perspective.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayedHand {
    pub deal: Deal,
    pub seat: usize,
    pub actions: Vec<Action>,
    pub payoff: f64,
}

/// Plays one hand; decision `k` of the hand uses `uniform(k)`.
pub fn play_hand(
    agent: &mut dyn Agent,
    opponent: &StrategyTable,
    deal: Deal,
    seat: usize,
    mut uniform: impl FnMut(u64) -> f64,
) -> Result<PlayedHand> {
    let mut state = GameState::new(deal);
    let mut actions = Vec::new();
    let mut k = 0u64;
    while let Some(actor) = state.current_player() {
        let u = uniform(k);
        let a = if actor == seat {
            agent.act(&state, seat, u)?
        } else {
            let legal = state.legal_actions()?;
            let a = sample_with_uniform(opponent.dist(&state.info_state_key(actor))?, legal, u);
            agent.observe_opponent(&state, seat, a)?;
            a
        };
        actions.push(a);
        state = state.apply(a)?;
        k += 1;
    }
    agent.end_hand(&state, seat)?;
    Ok(PlayedHand {
        deal,
        seat,
        actions,
        payoff: state.terminal_payoff()?.for_player(seat) as f64,
    })
}

/// Plays `hands` sequential hands from a fresh agent context. Hand `h` gets
/// its deal from `(seed, h)`, seats the agent at `h % 2`, and decision `k`
/// draws from `(seed, h, k)`.
pub fn play_hands(
    agent: &mut dyn Agent,
    opponent: &StrategyTable,
    hands: u32,
    seed: u64,
) -> Result<Vec<PlayedHand>> {
    let ns = SeedNamespace::new(seed);
    agent.reset();
    (0..hands as u64)
        .map(|h| {
            let deal = Deal::from_seed(ns.derive("hand", &[h]));
            play_hand(agent, opponent, deal, (h % 2) as usize, |k| {
                unit_f64(ns.derive("decision", &[h, k]))
            })
        })
        .collect()
}

/// Plays one trial and returns the agent's per-hand payoffs.
pub fn play_match(
    agent: &mut dyn Agent,
    opponent: &StrategyTable,
    hands: u32,
    trial_seed: u64,
) -> Result<Vec<f64>> {
    Ok(play_hands(agent, opponent, hands, trial_seed)?
        .into_iter()
        .map(|p| p.payoff)
        .collect())
}

/// Per-hand payoff streams for two agents on identical randomness.
pub fn paired_match(
    a: &mut dyn Agent,
    b: &mut dyn Agent,
    opponent: &StrategyTable,
    hands: u32,
    trial_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        play_match(a, opponent, hands, trial_seed)?,
        play_match(b, opponent, hands, trial_seed)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub hands_per_trial: u32,
    pub trials: u32,
    pub seed: u64,
    pub action_mode: ActionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hands_per_trial: 3000,
            trials: 3,
            seed: 0,
            action_mode: ActionMode::Sample,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hands_per_trial == 0 || self.trials == 0 {
            return Err(Error::Config("hands and trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn trial_seed(&self, opponent_index: u64, trial: u32) -> u64 {
        SeedNamespace::new(self.seed).derive("trial", &[opponent_index, trial as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedResult {
    pub opponent_id: String,
    pub opponent_epsilon: f64,
    pub model_ev: f64,
    pub baseline_ev: f64,
    pub gain: f64,
    pub ci95: f64,
    pub trial_gains: Vec<f64>,
    pub trial_seeds: Vec<u64>,
}

impl PairedResult {
    pub fn significant(&self) -> bool {
        self.gain.abs() > self.ci95
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `1.96 · sd / √n` over trial means (sample standard deviation).
pub fn ci95_over_trials(trial_means: &[f64]) -> f64 {
    let n = trial_means.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let m = mean(trial_means);
    let var = trial_means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Model and baseline against one opponent over all trials.
pub fn evaluate_opponent(
    model: &mut dyn Agent,
    baseline: &mut dyn Agent,
    opponent_id: &str,
    opponent_epsilon: f64,
    opponent: &StrategyTable,
    opponent_index: u64,
    cfg: &EvalConfig,
) -> Result<PairedResult> {
    cfg.validate()?;
    let mut model_means = Vec::new();
    let mut base_means = Vec::new();
    let mut seeds = Vec::new();
    for t in 0..cfg.trials {
        let seed = cfg.trial_seed(opponent_index, t);
        let (a, b) = paired_match(model, baseline, opponent, cfg.hands_per_trial, seed)?;
        model_means.push(mean(&a));
        base_means.push(mean(&b));
        seeds.push(seed);
    }
    let gains: Vec<f64> = model_means
        .iter()
        .zip(&base_means)
        .map(|(a, b)| a - b)
        .collect();
    let model_ev = mean(&model_means);
    let baseline_ev = mean(&base_means);
    Ok(PairedResult {
        opponent_id: opponent_id.to_string(),
        opponent_epsilon,
        model_ev,
        baseline_ev,
        gain: model_ev - baseline_ev,
        ci95: ci95_over_trials(&gains),
        trial_gains: gains,
        trial_seeds: seeds,
    })
}

/// One row per suite opponent followed by a GTO row.
pub fn evaluate_suite(
    model: &mut dyn Agent,
    gto: &StrategyTable,
    suite: &[OpponentRecord],
    cfg: &EvalConfig,
) -> Result<Vec<PairedResult>> {
    let mut baseline = TabularAgent::new(gto.clone());
    let mut out = Vec::with_capacity(suite.len() + 1);
    for (i, rec) in suite.iter().enumerate() {
        out.push(evaluate_opponent(
            model,
            &mut baseline,
            &rec.id,
            rec.exploitability,
            &rec.strategy,
            i as u64,
            cfg,
        )?);
    }
    out.push(evaluate_opponent(
        model,
        &mut baseline,
        "gto",
        0.0,
        gto,
        suite.len() as u64,
        cfg,
    )?);
    Ok(out)
}

/// Mean gain over every row except the GTO row.
pub fn average_gain(results: &[PairedResult]) -> f64 {
    let rows: Vec<f64> = results
        .iter()
        .filter(|r| r.opponent_id != "gto")
        .map(|r| r.gain)
        .collect();
    mean(&rows)
}

pub const REPORT_HEADER: &str = "opponent,epsilon,model_ev,gto_ev,gain,ci95,significant";

/// Report CSV; `significant` marks rows whose interval excludes zero.
pub fn summarize(results: &[PairedResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::Config("no results to summarize".into()));
    }
    let mut out = format!("{REPORT_HEADER}\n");
    for r in results {
        writeln!(
            out,
            "{},{:.4},{:.6},{:.6},{:.6},{:.6},{}",
            r.opponent_id,
            r.opponent_epsilon,
            r.model_ev,
            r.baseline_ev,
            r.gain,
            r.ci95,
            r.significant()
        )
        .unwrap();
    }
    Ok(out)
}

/// Parses a report CSV back into rows (trial detail is not stored there).
pub fn parse_report(text: &str) -> Result<Vec<PairedResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::format("report", "unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 7 {
                return Err(Error::format("report", format!("bad row `{l}`")));
            }
            let n = |i: usize| {
                c[i].parse::<f64>()
                    .map_err(|_| Error::format("report", format!("bad number `{}`", c[i])))
            };
            Ok(PairedResult {
                opponent_id: c[0].to_string(),
                opponent_epsilon: n(1)?,
                model_ev: n(2)?,
                baseline_ev: n(3)?,
                gain: n(4)?,
                ci95: n(5)?,
                trial_gains: Vec::new(),
                trial_seeds: Vec::new(),
            })
        })
        .collect()
}

pub const RESULTS_FORMAT: &str = "leduc-results v1";

/// Text manifest linking the inputs of an evaluation to its per-trial seeds.
pub fn write_results_manifest(
    path: &Path,
    cfg: &EvalConfig,
    links: &[(&str, String)],
    results: &[PairedResult],
) -> Result<()> {
    let mut out = format!(
        "{RESULTS_FORMAT} hands={} trials={} seed={} action_mode={}\n",
        cfg.hands_per_trial,
        cfg.trials,
        cfg.seed,
        cfg.action_mode.name()
    );
    for (k, v) in links {
        writeln!(out, "{k}={v}").unwrap();
    }
    for r in results {
        let seeds: Vec<String> = r.trial_seeds.iter().map(|s| s.to_string()).collect();
        let gains: Vec<String> = r.trial_gains.iter().map(|g| format!("{g:.17e}")).collect();
        writeln!(
            out,
            "row opponent={} seeds={} trial_gains={}",
            r.opponent_id,
            seeds.join(","),
            gains.join(",")
        )
        .unwrap();
    }
    write_atomic(path, out.as_bytes())
}
