//! Imitation pretraining and the two-phase training curriculum.
//!
//! Pretraining fits a 9-input model to the equilibrium on self-play tokens.
//! Phase 1 widens it to 25 inputs and trains only the opponent head (through
//! the shared encoder) on buffers played by an exploring equilibrium agent.
//! Phase 2 plays the current model against sampled opponents and trains the
//! policy head on a mixture of equilibrium and best-response targets, with
//! the mixing weight set per buffer from the opponent's exploitability.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::archetypes::OpponentRecord;
use crate::error::{Error, Result};
use crate::evaluation::{
    argmax, play_hands, ActionMode, Agent, ModelAgent, PlayedHand, TabularAgent,
};
use crate::features::{
    build_hand_tokens, HandTranscript, OpponentTracker, ShowdownPolicy, TrainingToken, TurnType,
    BASE_DIM,
};
use crate::game::{Action, GameState};
use crate::io::{kv_fields, read_artifact_bytes, write_atomic};
use crate::model::{
    backward, forward, masked_softmax, opp_loss, policy_loss, Gradients, GtoLossMode, HeadGrads,
    ModelConfig, ModelParameters, PolicyTargets, Real, Sequence,
};
use crate::seed::SeedNamespace;
use crate::strategy::StrategyTable;
use crate::tabular::best_response;
use crate::tree::info_index;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase1Config {
    pub alpha: f64,
    pub epsilon_greedy: f64,
    pub opp_ce_threshold: f64,
    pub consecutive_checks: u32,
    pub max_epochs: u64,
    pub gto_opponent_fraction: f64,
    pub check_interval_epochs: u64,
    pub validation_hands: u32,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            alpha: 2.0,
            epsilon_greedy: 0.15,
            opp_ce_threshold: 0.65,
            consecutive_checks: 3,
            max_epochs: 3000,
            gto_opponent_fraction: 0.10,
            check_interval_epochs: 25,
            validation_hands: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase2Config {
    pub lambda_max: f64,
    pub epsilon_max: f64,
    pub alpha: f64,
    /// Probability that a buffer is played against the equilibrium instead
    /// of the sampled opponent.
    pub gto_opponent_fraction: f64,
    /// Replaces the exploitability-based schedule when set.
    pub fixed_lambda: Option<f64>,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            lambda_max: 0.35,
            epsilon_max: 0.40,
            alpha: 0.5,
            gto_opponent_fraction: 0.10,
            fixed_lambda: None,
        }
    }
}

impl Phase2Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_max) || self.epsilon_max <= 0.0 {
            return Err(Error::Config(
                "need lambda_max in [0, 1] and epsilon_max > 0".into(),
            ));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config("fixed lambda must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// `λ(ε) = λ_max · max(0, 1 − ε/ε_max)`.
pub fn lambda_schedule(epsilon: f64, cfg: &Phase2Config) -> f64 {
    cfg.lambda_max * (1.0 - epsilon / cfg.epsilon_max).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub accumulation_phase1: u32,
    pub accumulation_phase2: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accumulation_phase1: 8,
            accumulation_phase2: 16,
        }
    }
}

/// Number of optimizer updates for a run split at `phase1_epochs`.
pub fn planned_updates(total_epochs: u64, phase1_epochs: u64, acc1: u32, acc2: u32) -> u64 {
    let p1 = phase1_epochs.min(total_epochs);
    p1.div_ceil(acc1 as u64) + (total_epochs - p1).div_ceil(acc2 as u64)
}

/// Cosine decay without warmup; update `k` counts from 1 and reaches zero at
/// `planned`.
pub fn cosine_lr(base: f64, k: u64, planned: u64) -> f64 {
    let t = (k.min(planned)) as f64 / planned.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adaptive-moment optimizer with decoupled weight decay on matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub steps: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n: usize) -> AdamW<T> {
        AdamW {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            steps: 0,
        }
    }

    /// One update. Tensors listed in `frozen` are left bit-unchanged.
    pub fn step(
        &mut self,
        params: &mut ModelParameters<T>,
        grads: &Gradients<T>,
        lr: f64,
        cfg: &OptimizerConfig,
        frozen: &[usize],
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let layout = params.layout().clone();
        let data = params.data_mut();
        let (b1, b2): (T, T) = (conv(cfg.beta1), conv(cfg.beta2));
        for (id, spec) in layout.tensors.iter().enumerate() {
            if frozen.contains(&id) {
                continue;
            }
            let decay = if layout.decays(id) {
                lr * cfg.weight_decay
            } else {
                0.0
            };
            for i in spec.range() {
                let g = grads.data[i];
                self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                let mhat = to64(self.m[i]) / bc1;
                let vhat = to64(self.v[i]) / bc2;
                let p = to64(data[i]);
                data[i] = conv(p - lr * (mhat / (vhat.sqrt() + cfg.eps)) - decay * p);
            }
        }
    }
}

fn conv<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

fn to64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("finite")
}

/// Tokens of consecutive hands against one opponent plus per-agent-token
/// policy targets, in token order.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub opponent_id: String,
    pub hands: Vec<PlayedHand>,
    pub tokens: Vec<TrainingToken>,
    pub targets: Vec<PolicyTargets>,
    /// Information-state id of each agent token, aligned with `targets`.
    pub agent_keys: Vec<usize>,
    pub lambda: f64,
}

impl Buffer {
    pub fn opponent_actions(&self) -> Vec<Action> {
        self.tokens
            .iter()
            .filter(|t| t.turn == TurnType::Opponent)
            .map(|t| t.label)
            .collect()
    }
}

/// Best-response tables for both seats against one opponent.
pub type BrPair = [StrategyTable; 2];

/// Plays `hands` hands and builds training tokens with a buffer-local
/// tracker. Each agent token's targets are the equilibrium at its key and
/// the best response for the agent's seat (`br[seat]`).
#[allow(clippy::too_many_arguments)]
pub fn generate_buffer(
    agent: &mut dyn Agent,
    opponent: &StrategyTable,
    opponent_id: &str,
    hands: u32,
    seed: u64,
    gto: &StrategyTable,
    br: &BrPair,
    lambda: f64,
    agent_turns_only: bool,
) -> Result<Buffer> {
    if hands == 0 {
        return Err(Error::Config("a buffer needs at least one hand".into()));
    }
    let played = play_hands(agent, opponent, hands, seed)?;
    let mut tracker = OpponentTracker::new();
    let idx = info_index();
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    let mut agent_keys = Vec::new();
    for (h, hand) in played.iter().enumerate() {
        let tr = HandTranscript {
            deal: hand.deal,
            actions: hand.actions.clone(),
        };
        let toks = build_hand_tokens(
            &tr,
            hand.seat,
            h as u32,
            &mut tracker,
            ShowdownPolicy::Training,
            None,
            agent_turns_only,
        )?;
        let mut state = GameState::new(hand.deal);
        let mut agent_states = Vec::new();
        for &a in &hand.actions {
            if state.current_player() == Some(hand.seat) {
                agent_states.push(state.clone());
            }
            state = state.apply(a)?;
        }
        for s in agent_states {
            let key = s.info_state_key(hand.seat);
            let id = idx
                .id(&key)
                .ok_or_else(|| Error::IncompleteStrategy(key.to_string()))?;
            targets.push(PolicyTargets {
                gto: *gto.dist(&key)?,
                br: *br[hand.seat].dist(&key)?,
                lambda,
            });
            agent_keys.push(id);
        }
        tokens.extend(toks);
    }
    Ok(Buffer {
        opponent_id: opponent_id.to_string(),
        hands: played,
        tokens,
        targets,
        agent_keys,
        lambda,
    })
}

/// Losses measured on one buffer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BufferLosses {
    /// Unsmoothed cross-entropy of the policy against the equilibrium.
    pub gto_ce: f64,
    /// Unsmoothed cross-entropy of the policy against best-response labels.
    pub br_ce: f64,
    pub opp_ce: f64,
    pub policy_loss: f64,
}

/// Which loss terms contribute gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub policy: bool,
    pub alpha: f64,
}

/// Forward/backward over a buffer, split into windows of at most
/// `max_seq_len` tokens. Per-window losses are re-weighted so the result
/// equals averaging over every agent (resp. opponent) token of the buffer.
pub fn buffer_gradients<T: Real>(
    params: &ModelParameters<T>,
    buffer: &Buffer,
    weights: Option<LossWeights>,
    dropout_seed: Option<u64>,
) -> Result<(BufferLosses, Option<Gradients<T>>)> {
    let cfg = *params.config();
    let total_agent = buffer.targets.len().max(1) as f64;
    let opp_actions = buffer.opponent_actions();
    let total_opp = opp_actions.len().max(1) as f64;
    let mut grads = weights.map(|_| Gradients::zeros(params.layout()));
    let mut losses = BufferLosses::default();
    let (mut ai, mut oi) = (0usize, 0usize);
    for (w, chunk) in buffer.tokens.chunks(cfg.max_seq_len).enumerate() {
        let seq = Sequence::<T>::from_tokens(chunk, cfg.input_dim);
        let (out, trace) = forward(
            params,
            &seq,
            dropout_seed.map(|s| s ^ (w as u64).wrapping_mul(0x9e37_79b9)),
        )?;
        let na = out.policy_positions.len();
        let no = out.opp_positions.len();
        let targets = &buffer.targets[ai..ai + na];
        let acts = &opp_actions[oi..oi + no];
        ai += na;
        oi += no;
        let (lp, mut gp) = policy_loss(
            out.policy_logits.view(),
            targets,
            &out.policy_legal,
            cfg.loss_mode,
            cfg.label_smoothing,
        );
        let pure = |lambda: f64| -> Vec<PolicyTargets> {
            targets
                .iter()
                .map(|t| PolicyTargets { lambda, ..*t })
                .collect()
        };
        let (gce, _) = policy_loss(
            out.policy_logits.view(),
            &pure(1.0),
            &out.policy_legal,
            GtoLossMode::CrossEntropy,
            0.0,
        );
        let (bce, _) = policy_loss(
            out.policy_logits.view(),
            &pure(0.0),
            &out.policy_legal,
            GtoLossMode::CrossEntropy,
            0.0,
        );
        let (lo, mut go) = opp_loss(
            out.opp_logits.view(),
            acts,
            &out.opp_legal,
            cfg.opp_loss_masked,
        );
        let fa = na as f64 / total_agent;
        let fo = no as f64 / total_opp;
        losses.policy_loss += lp * fa;
        losses.gto_ce += gce * fa;
        losses.br_ce += bce * fa;
        losses.opp_ce += lo * fo;
        if let (Some(wt), Some(g)) = (weights, grads.as_mut()) {
            if wt.policy {
                gp.mapv_inplace(|v| v * conv::<T>(fa));
            } else {
                gp.fill(T::zero());
            }
            go.mapv_inplace(|v| v * conv::<T>(fo * wt.alpha));
            let part = backward(
                params,
                &trace,
                &HeadGrads {
                    policy: gp,
                    opp: go,
                },
            )?;
            g.add_scaled(&part, T::one());
        }
    }
    Ok((losses, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub hands_per_buffer: u32,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub eval_hands: u32,
}

impl PretrainConfig {
    pub fn desk() -> PretrainConfig {
        PretrainConfig {
            epochs: 1000,
            hands_per_buffer: 250,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            eval_hands: 2000,
        }
    }

    pub fn full() -> PretrainConfig {
        PretrainConfig {
            epochs: 15_000,
            hands_per_buffer: 250,
            learning_rate: 3e-5,
            weight_decay: 0.05,
            eval_hands: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    /// Share of held-out agent decisions where the model's most likely
    /// action equals the equilibrium's.
    pub agreement: f64,
}

fn self_play_buffer(gto: &StrategyTable, hands: u32, seed: u64) -> Result<Buffer> {
    let mut agent = TabularAgent::new(gto.clone());
    let br = [gto.clone(), gto.clone()];
    generate_buffer(&mut agent, gto, "gto", hands, seed, gto, &br, 1.0, true)
}

/// Agreement between model argmax and equilibrium argmax over the agent
/// decisions of some buffers. Sampled self-play weights info sets by reach.
pub fn action_agreement<T: Real>(params: &ModelParameters<T>, buffers: &[Buffer]) -> Result<f64> {
    let cfg = params.config();
    let mut hits = 0usize;
    let mut total = 0usize;
    for buffer in buffers {
        let mut ai = 0usize;
        for chunk in buffer.tokens.chunks(cfg.max_seq_len) {
            let seq = Sequence::<T>::from_tokens(chunk, cfg.input_dim);
            let (out, _) = forward(params, &seq, None)?;
            for (row, legal) in out.policy_logits.rows().into_iter().zip(&out.policy_legal) {
                let model = argmax(&masked_softmax(row, *legal), *legal);
                let gto = argmax(&buffer.targets[ai].gto, *legal);
                hits += (model == gto) as usize;
                total += 1;
                ai += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Supervised imitation of the equilibrium on agent-only self-play tokens.
pub fn pretrain_imitation(
    gto: &StrategyTable,
    model: ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
    mut progress: impl FnMut(u64, f64),
) -> Result<(ModelParameters<f32>, PretrainReport)> {
    if model.input_dim != BASE_DIM {
        return Err(Error::WrongInputWidth {
            expected: BASE_DIM,
            found: model.input_dim,
        });
    }
    let ns = SeedNamespace::new(seed).child("pretrain", &[]);
    let mut params = ModelParameters::<f32>::init(model, ns.derive("init", &[]))?;
    let mut opt = AdamW::new(params.layout().total);
    let ocfg = OptimizerConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..OptimizerConfig::default()
    };
    let mut last = f64::NAN;
    for e in 0..cfg.epochs {
        let buf = self_play_buffer(gto, cfg.hands_per_buffer, ns.derive("buffer", &[e]))?;
        let w = LossWeights {
            policy: true,
            alpha: 0.0,
        };
        let (losses, grads) =
            buffer_gradients(&params, &buf, Some(w), Some(ns.derive("dropout", &[e])))?;
        let lr = cosine_lr(cfg.learning_rate, e + 1, cfg.epochs);
        opt.step(&mut params, &grads.expect("weights given"), lr, &ocfg, &[]);
        last = losses.policy_loss;
        progress(e, last);
    }
    if !params.all_finite() {
        return Err(Error::Numerical(
            "non-finite parameters after pretraining".into(),
        ));
    }
    // Held-out buffers match the training length so positions stay in range.
    let mut held_out = Vec::new();
    let mut left = cfg.eval_hands;
    while left > 0 {
        let n = left.min(cfg.hands_per_buffer);
        held_out.push(self_play_buffer(
            gto,
            n,
            ns.derive("held-out", &[held_out.len() as u64]),
        )?);
        left -= n;
    }
    let agreement = action_agreement(&params, &held_out)?;
    Ok((
        params,
        PretrainReport {
            final_loss: last,
            agreement,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumConfig {
    pub model: ModelConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub optimizer: OptimizerConfig,
    pub total_epochs: u64,
    pub hands_per_buffer: u32,
    /// Emit agent-turn tokens only.
    pub single_turn: bool,
    pub phase1_only: bool,
    pub seed: u64,
}

impl CurriculumConfig {
    pub fn full() -> CurriculumConfig {
        CurriculumConfig {
            model: ModelConfig::full(),
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            optimizer: OptimizerConfig::default(),
            total_epochs: 20_000,
            hands_per_buffer: 250,
            single_turn: false,
            phase1_only: false,
            seed: 0,
        }
    }

    /// Small model and short schedule for a single CPU core. Learning rate
    /// and accumulation are scaled up so the shorter run still moves.
    pub fn desk() -> CurriculumConfig {
        CurriculumConfig {
            model: ModelConfig::desk(),
            phase1: Phase1Config {
                max_epochs: 600,
                ..Phase1Config::default()
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                accumulation_phase1: 1,
                accumulation_phase2: 2,
                ..OptimizerConfig::default()
            },
            total_epochs: 2000,
            ..CurriculumConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.phase2.validate()?;
        if self.optimizer.accumulation_phase1 == 0 || self.optimizer.accumulation_phase2 == 0 {
            return Err(Error::Config(
                "gradient accumulation must be at least 1".into(),
            ));
        }
        if self.hands_per_buffer == 0 || self.total_epochs == 0 {
            return Err(Error::Config(
                "hands per buffer and epochs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.phase1.gto_opponent_fraction)
            || !(0.0..=1.0).contains(&self.phase2.gto_opponent_fraction)
        {
            return Err(Error::Config("opponent fractions must be in [0, 1]".into()));
        }
        if self.phase1.opp_ce_threshold <= 0.0 {
            return Err(Error::Config("Opp CE threshold must be positive".into()));
        }
        Ok(())
    }

    /// `key=value` lines describing every setting, for run manifests.
    pub fn describe(&self) -> String {
        let m = &self.model;
        let p1 = &self.phase1;
        let p2 = &self.phase2;
        let o = &self.optimizer;
        let fixed = p2
            .fixed_lambda
            .map_or("none".to_string(), |l| format!("{l}"));
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("layers", m.layers.to_string());
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("ff_dim", m.ff_dim.to_string());
        kv("dropout", m.dropout.to_string());
        kv("max_seq_len", m.max_seq_len.to_string());
        kv("loss_mode", m.loss_mode.name().to_string());
        kv("label_smoothing", m.label_smoothing.to_string());
        kv("opp_loss_masked", m.opp_loss_masked.to_string());
        kv("single_turn", self.single_turn.to_string());
        kv("phase1_alpha", p1.alpha.to_string());
        kv("phase1_epsilon_greedy", p1.epsilon_greedy.to_string());
        kv("phase1_opp_ce_threshold", p1.opp_ce_threshold.to_string());
        kv(
            "phase1_consecutive_checks",
            p1.consecutive_checks.to_string(),
        );
        kv("phase1_max_epochs", p1.max_epochs.to_string());
        kv("phase1_gto_fraction", p1.gto_opponent_fraction.to_string());
        kv(
            "phase1_check_interval",
            p1.check_interval_epochs.to_string(),
        );
        kv("phase1_validation_hands", p1.validation_hands.to_string());
        kv("phase2_alpha", p2.alpha.to_string());
        kv("lambda_max", p2.lambda_max.to_string());
        kv("epsilon_max", p2.epsilon_max.to_string());
        kv("fixed_lambda", fixed);
        kv("phase2_gto_fraction", p2.gto_opponent_fraction.to_string());
        kv("learning_rate", o.learning_rate.to_string());
        kv("weight_decay", o.weight_decay.to_string());
        kv("accumulation_phase1", o.accumulation_phase1.to_string());
        kv("accumulation_phase2", o.accumulation_phase2.to_string());
        kv("total_epochs", self.total_epochs.to_string());
        kv("hands_per_buffer", self.hands_per_buffer.to_string());
        kv("phase1_only", self.phase1_only.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Modeling,
    Exploitation,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Modeling => 1,
            Phase::Exploitation => 2,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub phase: u8,
    pub gto_ce: f64,
    pub br_ce: f64,
    pub opp_ce: f64,
    pub lambda: f64,
    pub opponent: String,
    /// Opp CE on a fresh validation buffer, on check epochs.
    pub val_opp_ce: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,phase,gto_ce,br_ce,opp_ce,lambda,opponent,val_opp_ce";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{},{}",
            self.epoch,
            self.phase,
            self.gto_ce,
            self.br_ce,
            self.opp_ce,
            self.lambda,
            self.opponent,
            self.val_opp_ce.map_or(String::new(), |v| format!("{v:?}"))
        )
    }

    pub fn from_csv(line: &str) -> Result<MetricRow> {
        let c: Vec<&str> = line.split(',').collect();
        let bad = || Error::format("metrics", format!("bad row `{line}`"));
        if c.len() != 8 {
            return Err(bad());
        }
        let n = |i: usize| c[i].parse::<f64>().map_err(|_| bad());
        Ok(MetricRow {
            epoch: c[0].parse().map_err(|_| bad())?,
            phase: c[1].parse().map_err(|_| bad())?,
            gto_ce: n(2)?,
            br_ce: n(3)?,
            opp_ce: n(4)?,
            lambda: n(5)?,
            opponent: c[6].to_string(),
            val_opp_ce: if c[7].is_empty() { None } else { Some(n(7)?) },
        })
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters<f32>,
    pub opt: AdamW<f32>,
    pub accum: Gradients<f32>,
    pub accum_count: u32,
    /// Epochs completed.
    pub epoch: u64,
    pub phase: Phase,
    /// Epochs spent in Phase 1, set at the transition.
    pub phase1_epochs: Option<u64>,
    pub consecutive_below: u32,
    pub updates: u64,
    pub planned_updates: u64,
    pub metrics: Vec<MetricRow>,
}

pub const TRAIN_STATE_FORMAT: &str = "leduc-train-state v1";

impl TrainState {
    /// Starts Phase 1 from pretrained parameters (widened to 25 inputs if
    /// needed).
    pub fn new(pretrained: ModelParameters<f32>, cfg: &CurriculumConfig) -> Result<TrainState> {
        cfg.validate()?;
        let mut params = if pretrained.config().input_dim == BASE_DIM {
            pretrained.expand_input_projection()?
        } else {
            pretrained
        };
        let m = &cfg.model;
        params.set_training_options(
            m.dropout,
            m.loss_mode,
            m.label_smoothing,
            m.opp_loss_masked,
        )?;
        let n = params.layout().total;
        let o = &cfg.optimizer;
        Ok(TrainState {
            accum: Gradients::zeros(params.layout()),
            params,
            opt: AdamW::new(n),
            accum_count: 0,
            epoch: 0,
            phase: Phase::Modeling,
            phase1_epochs: None,
            consecutive_below: 0,
            updates: 0,
            planned_updates: planned_updates(
                cfg.total_epochs,
                cfg.phase1.max_epochs,
                o.accumulation_phase1,
                o.accumulation_phase2,
            ),
            metrics: Vec::new(),
        })
    }

    pub fn last_validation_opp_ce(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.val_opp_ce)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for m in &self.metrics {
            s.push_str(&m.to_csv());
            s.push('\n');
        }
        s
    }

    /// Writes `checkpoint.bin`, `train_state.bin` and `metrics.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params
            .save_checkpoint(&dir.join("checkpoint.bin"), self.updates)?;
        let mut header = format!(
            "{TRAIN_STATE_FORMAT} epoch={} phase={} phase1_epochs={} consecutive={} updates={} planned={} adam_steps={} accum_count={} params={} metrics={}\n",
            self.epoch,
            self.phase.number(),
            self.phase1_epochs.map_or("none".to_string(), |e| e.to_string()),
            self.consecutive_below,
            self.updates,
            self.planned_updates,
            self.opt.steps,
            self.accum_count,
            self.accum.data.len(),
            self.metrics.len()
        );
        for m in &self.metrics {
            header.push_str(&m.to_csv());
            header.push('\n');
        }
        let mut bytes = header.into_bytes();
        for v in self.opt.m.iter().chain(&self.opt.v).chain(&self.accum.data) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&dir.join("train_state.bin"), &bytes)?;
        write_atomic(&dir.join("metrics.csv"), self.metrics_csv().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<TrainState> {
        let (params, _) = ModelParameters::<f32>::load_checkpoint(&dir.join("checkpoint.bin"))?;
        let path = dir.join("train_state.bin");
        let origin = path.display().to_string();
        let bytes = read_artifact_bytes(&path)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(&origin, "missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::format(&origin, "header is not UTF-8"))?;
        crate::io::check_header(header, TRAIN_STATE_FORMAT, &origin)?;
        let get = |k: &str| -> Result<&str> {
            kv_fields(header)
                .find(|(key, _)| *key == k)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::format(&origin, format!("header missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(&origin, format!("bad `{k}`")))
        };
        let n = num("params")? as usize;
        if n != params.layout().total {
            return Err(Error::format(
                &origin,
                "optimizer state does not match checkpoint",
            ));
        }
        let mut rest = &bytes[nl + 1..];
        let mut metrics = Vec::new();
        for _ in 0..num("metrics")? {
            let e = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(&origin, "truncated metrics"))?;
            let line = std::str::from_utf8(&rest[..e])
                .map_err(|_| Error::format(&origin, "metrics are not UTF-8"))?;
            metrics.push(MetricRow::from_csv(line)?);
            rest = &rest[e + 1..];
        }
        if rest.len() != 3 * n * 4 {
            return Err(Error::format(&origin, "optimizer state length mismatch"));
        }
        let floats: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let phase = match num("phase")? {
            1 => Phase::Modeling,
            2 => Phase::Exploitation,
            _ => return Err(Error::format(&origin, "bad phase")),
        };
        let p1 = get("phase1_epochs")?;
        Ok(TrainState {
            params,
            opt: AdamW {
                m: floats[..n].to_vec(),
                v: floats[n..2 * n].to_vec(),
                steps: num("adam_steps")?,
            },
            accum: Gradients {
                data: floats[2 * n..].to_vec(),
            },
            accum_count: num("accum_count")? as u32,
            epoch: num("epoch")?,
            phase,
            phase1_epochs: if p1 == "none" {
                None
            } else {
                Some(
                    p1.parse()
                        .map_err(|_| Error::format(&origin, "bad phase1_epochs"))?,
                )
            },
            consecutive_below: num("consecutive")? as u32,
            updates: num("updates")?,
            planned_updates: num("planned")?,
            metrics,
        })
    }
}

/// Runs the curriculum over a fixed opponent population.
pub struct Trainer<'a> {
    pub cfg: CurriculumConfig,
    pub gto: &'a StrategyTable,
    pub population: &'a [OpponentRecord],
    br_cache: HashMap<String, BrPair>,
    /// Number of best-response computations performed (cache misses).
    pub br_computations: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: CurriculumConfig,
        gto: &'a StrategyTable,
        population: &'a [OpponentRecord],
    ) -> Result<Trainer<'a>> {
        cfg.validate()?;
        if population.is_empty() {
            return Err(Error::Config("training population is empty".into()));
        }
        Ok(Trainer {
            cfg,
            gto,
            population,
            br_cache: HashMap::new(),
            br_computations: 0,
        })
    }

    fn ns(&self) -> SeedNamespace {
        SeedNamespace::new(self.cfg.seed).child("train", &[])
    }

    /// Best responses for both seats against a population member, computed
    /// once per opponent id.
    pub fn best_responses(&mut self, rec: &OpponentRecord) -> Result<&BrPair> {
        if !self.br_cache.contains_key(&rec.id) {
            let pair = [
                best_response(&rec.strategy, 0)?.strategy,
                best_response(&rec.strategy, 1)?.strategy,
            ];
            self.br_computations += 1;
            self.br_cache.insert(rec.id.clone(), pair);
        }
        Ok(&self.br_cache[&rec.id])
    }

    fn flush(&self, state: &mut TrainState, frozen: &[usize]) {
        if state.accum_count == 0 {
            return;
        }
        let mut g = std::mem::replace(&mut state.accum, Gradients::zeros(state.params.layout()));
        g.scale(1.0 / state.accum_count as f32);
        state.updates += 1;
        let lr = cosine_lr(
            self.cfg.optimizer.learning_rate,
            state.updates,
            state.planned_updates,
        );
        state
            .opt
            .step(&mut state.params, &g, lr, &self.cfg.optimizer, frozen);
        state.accum_count = 0;
    }

    fn accumulate(
        &self,
        state: &mut TrainState,
        grads: &Gradients<f32>,
        every: u32,
        frozen: &[usize],
    ) {
        state.accum.add_scaled(grads, 1.0);
        state.accum_count += 1;
        if state.accum_count >= every {
            self.flush(state, frozen);
        }
    }

    /// Opp CE of the current model on a fresh buffer played by the exploring
    /// equilibrium agent against a random population member.
    pub fn validation_opp_ce(&self, state: &TrainState, epoch: u64) -> Result<f64> {
        let ns = self.ns().child("validation", &[epoch]);
        let mut rng = ns.rng("opponent", &[]);
        let rec = &self.population[rng.gen_range(0..self.population.len())];
        let mut agent =
            TabularAgent::with_epsilon(self.gto.clone(), self.cfg.phase1.epsilon_greedy);
        let br = [self.gto.clone(), self.gto.clone()];
        let buf = generate_buffer(
            &mut agent,
            &rec.strategy,
            &rec.id,
            self.cfg.phase1.validation_hands,
            ns.derive("hands", &[]),
            self.gto,
            &br,
            1.0,
            self.cfg.single_turn,
        )?;
        Ok(buffer_gradients(&state.params, &buf, None, None)?.0.opp_ce)
    }

    fn phase1_epoch(&mut self, state: &mut TrainState) -> Result<()> {
        let e = state.epoch;
        let p1 = self.cfg.phase1;
        let ns = self.ns().child("epoch", &[e]);
        let mut rng = ns.rng("opponent", &[]);
        let use_gto = rng.gen_bool(p1.gto_opponent_fraction);
        let rec = &self.population[rng.gen_range(0..self.population.len())];
        let (opp_table, opp_id, br) = if use_gto {
            (
                self.gto,
                "gto".to_string(),
                [self.gto.clone(), self.gto.clone()],
            )
        } else {
            (
                &rec.strategy,
                rec.id.clone(),
                self.best_responses(rec)?.clone(),
            )
        };
        let mut agent = TabularAgent::with_epsilon(self.gto.clone(), p1.epsilon_greedy);
        let buf = generate_buffer(
            &mut agent,
            opp_table,
            &opp_id,
            self.cfg.hands_per_buffer,
            ns.derive("hands", &[]),
            self.gto,
            &br,
            1.0,
            self.cfg.single_turn,
        )?;
        let w = LossWeights {
            policy: false,
            alpha: p1.alpha,
        };
        let (losses, grads) = buffer_gradients(
            &state.params,
            &buf,
            Some(w),
            Some(ns.derive("dropout", &[])),
        )?;
        let frozen = state.params.layout().policy_head();
        self.accumulate(
            state,
            &grads.expect("weights given"),
            self.cfg.optimizer.accumulation_phase1,
            &frozen,
        );
        state.epoch += 1;

        let mut val = None;
        if state.epoch.is_multiple_of(p1.check_interval_epochs.max(1)) {
            let ce = self.validation_opp_ce(state, state.epoch)?;
            val = Some(ce);
            if ce < p1.opp_ce_threshold {
                state.consecutive_below += 1;
            } else {
                state.consecutive_below = 0;
            }
        }
        state.metrics.push(MetricRow {
            epoch: e,
            phase: 1,
            gto_ce: losses.gto_ce,
            br_ce: losses.br_ce,
            opp_ce: losses.opp_ce,
            lambda: 1.0,
            opponent: opp_id,
            val_opp_ce: val,
        });
        if state.consecutive_below >= p1.consecutive_checks || state.epoch >= p1.max_epochs {
            self.transition(state);
        }
        Ok(())
    }

    fn transition(&self, state: &mut TrainState) {
        let frozen = state.params.layout().policy_head();
        self.flush(state, &frozen);
        state.phase = Phase::Exploitation;
        state.phase1_epochs = Some(state.epoch);
        let remaining = self.cfg.total_epochs.saturating_sub(state.epoch);
        state.planned_updates =
            state.updates + remaining.div_ceil(self.cfg.optimizer.accumulation_phase2 as u64);
    }

    /// λ used for a buffer against an opponent of the given exploitability.
    pub fn lambda_for(&self, epsilon: f64) -> f64 {
        self.cfg
            .phase2
            .fixed_lambda
            .unwrap_or_else(|| lambda_schedule(epsilon, &self.cfg.phase2))
    }

    /// Samples the opponent for a Phase 2 epoch and returns its buffer.
    pub fn phase2_buffer(&mut self, params: &ModelParameters<f32>, epoch: u64) -> Result<Buffer> {
        let ns = self.ns().child("epoch", &[epoch]);
        let mut rng = ns.rng("opponent", &[]);
        let rec = &self.population[rng.gen_range(0..self.population.len())];
        let use_gto = rng.gen_bool(self.cfg.phase2.gto_opponent_fraction);
        let (opp_table, opp_id, br, lambda) = if use_gto {
            (
                self.gto,
                "gto".to_string(),
                [self.gto.clone(), self.gto.clone()],
                self.lambda_for(0.0),
            )
        } else {
            let lambda = self.lambda_for(rec.exploitability);
            (
                &rec.strategy,
                rec.id.clone(),
                self.best_responses(rec)?.clone(),
                lambda,
            )
        };
        let mut agent = ModelAgent::new(params, self.cfg.single_turn, ActionMode::Sample);
        generate_buffer(
            &mut agent,
            opp_table,
            &opp_id,
            self.cfg.hands_per_buffer,
            ns.derive("hands", &[]),
            self.gto,
            &br,
            lambda,
            self.cfg.single_turn,
        )
    }

    fn phase2_epoch(&mut self, state: &mut TrainState) -> Result<()> {
        let e = state.epoch;
        let buf = self.phase2_buffer(&state.params, e)?;
        let w = LossWeights {
            policy: true,
            alpha: self.cfg.phase2.alpha,
        };
        let dropout = self.ns().child("epoch", &[e]).derive("dropout", &[]);
        let (losses, grads) = buffer_gradients(&state.params, &buf, Some(w), Some(dropout))?;
        self.accumulate(
            state,
            &grads.expect("weights given"),
            self.cfg.optimizer.accumulation_phase2,
            &[],
        );
        state.epoch += 1;
        state.metrics.push(MetricRow {
            epoch: e,
            phase: 2,
            gto_ce: losses.gto_ce,
            br_ce: losses.br_ce,
            opp_ce: losses.opp_ce,
            lambda: buf.lambda,
            opponent: buf.opponent_id,
            val_opp_ce: None,
        });
        if state.epoch >= self.cfg.total_epochs {
            self.flush(state, &[]);
        }
        Ok(())
    }

    /// True once the run has nothing left to do.
    pub fn finished(&self, state: &TrainState) -> bool {
        match state.phase {
            Phase::Modeling => false,
            Phase::Exploitation => self.cfg.phase1_only || state.epoch >= self.cfg.total_epochs,
        }
    }

    /// Runs one epoch of whichever phase is active.
    pub fn step_epoch(&mut self, state: &mut TrainState) -> Result<()> {
        match state.phase {
            Phase::Modeling => self.phase1_epoch(state)?,
            Phase::Exploitation => self.phase2_epoch(state)?,
        }
        if !state.params.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters at epoch {}",
                state.epoch
            )));
        }
        Ok(())
    }

    /// Phase 1 until its exit rule fires.
    pub fn phase1_run(
        &mut self,
        state: &mut TrainState,
        mut on_epoch: impl FnMut(&TrainState),
    ) -> Result<()> {
        while state.phase == Phase::Modeling {
            self.step_epoch(state)?;
            on_epoch(state);
        }
        Ok(())
    }

    /// Phase 2 for up to `epochs` epochs (bounded by the total budget).
    pub fn phase2_run(
        &mut self,
        state: &mut TrainState,
        epochs: u64,
        mut on_epoch: impl FnMut(&TrainState),
    ) -> Result<()> {
        if state.phase != Phase::Exploitation {
            return Err(Error::Config("Phase 2 requires a completed Phase 1".into()));
        }
        let stop = (state.epoch + epochs).min(self.cfg.total_epochs);
        while state.epoch < stop {
            self.step_epoch(state)?;
            on_epoch(state);
        }
        Ok(())
    }

    /// Runs until finished, calling `on_epoch` after each epoch.
    pub fn run(
        &mut self,
        state: &mut TrainState,
        mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while !self.finished(state) {
            self.step_epoch(state)?;
            on_epoch(state)?;
        }
        Ok(())
    }
}

pub const RUN_MANIFEST_FORMAT: &str = "leduc-run v1";

/// Records the effective configuration and the inputs of a training run.
pub fn write_run_manifest(
    path: &Path,
    cfg: &CurriculumConfig,
    links: &[(&str, String)],
) -> Result<()> {
    let mut s = format!("{RUN_MANIFEST_FORMAT}\n");
    s.push_str(&cfg.describe());
    writeln!(s, "seed_namespace_train=train").unwrap();
    for (k, v) in links {
        writeln!(s, "{k}={v}").unwrap();
    }
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_values() {
        let c = Phase2Config::default();
        assert_eq!(lambda_schedule(0.0, &c), 0.35);
        assert_eq!(lambda_schedule(0.46, &c), 0.0);
        assert_eq!(lambda_schedule(0.40, &c), 0.0);
        assert!((lambda_schedule(0.20, &c) - 0.175).abs() < 1e-15);
    }

    #[test]
    fn update_budget() {
        assert_eq!(planned_updates(20_000, 3499, 8, 16), 1470);
        assert_eq!(cosine_lr(1.0, 1470, 1470), 0.0);
        assert!((cosine_lr(1.0, 735, 1470) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metric_row_round_trip() {
        let m = MetricRow {
            epoch: 3,
            phase: 2,
            gto_ce: 0.4,
            br_ce: 0.7,
            opp_ce: 1.0986,
            lambda: 0.175,
            opponent: "pop-0003".into(),
            val_opp_ce: None,
        };
        assert_eq!(MetricRow::from_csv(&m.to_csv()).unwrap(), m);
        let v = MetricRow {
            val_opp_ce: Some(0.61),
            ..m
        };
        assert_eq!(MetricRow::from_csv(&v.to_csv()).unwrap(), v);
    }
}
