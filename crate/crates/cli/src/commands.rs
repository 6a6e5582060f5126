use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use leduc_lab::archetypes::{
    build_eval_suite, calibrate_scale, generate_population, read_manifest, write_manifest,
    ArchetypeConfig,
};
use leduc_lab::curriculum::{
    pretrain_imitation, write_run_manifest, CurriculumConfig, MetricRow, Phase, PretrainConfig,
    TrainState, Trainer, METRICS_HEADER,
};
use leduc_lab::evaluation::{
    average_gain, evaluate_suite, parse_report, summarize, write_results_manifest, ActionMode,
    Agent, EvalConfig, ModelAgent, PairedResult, TabularAgent,
};
use leduc_lab::features::BASE_DIM;
use leduc_lab::io::{read_artifact, write_atomic};
use leduc_lab::model::{GtoLossMode, ModelConfig, ModelParameters};
use leduc_lab::strategy::StrategyTable;
use leduc_lab::tabular::{cfr_solve_with, exploitability, CfrVariant, GameValue};
use leduc_lab::{Error, Result};

use crate::{
    CalibrateArgs, EvalArgs, GenOpponentsArgs, LossMode, Mode, ModelArgs, OpponentMode, Preset,
    PretrainArgs, ReportArgs, SolveArgs, TrainArgs, Variant,
};

pub const GTO_FILE: &str = "gto.strategy.txt";
pub const VALUE_FILE: &str = "game_value.txt";
pub const PRETRAINED_FILE: &str = "pretrained.bin";
pub const RUN_FILE: &str = "run.txt";
pub const RESULTS_CSV: &str = "results.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const CURVES_FILE: &str = "learning_curves.dat";

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

pub fn solve(a: &SolveArgs) -> Result<()> {
    let variant = match a.variant {
        Variant::Plus => CfrVariant::Plus,
        Variant::Vanilla => CfrVariant::Vanilla,
    };
    let (state, gto) = cfr_solve_with(variant, a.iterations, a.target, |it, e| {
        eprintln!("iteration {it}: exploitability {e:.3e}")
    });
    let eps = exploitability(&gto)?;
    if !eps.is_finite() {
        return Err(Error::Numerical(format!(
            "exploitability is {eps} after {} iterations",
            state.iterations_done()
        )));
    }
    let value = GameValue::from_profile(&gto)?;
    gto.save(&a.out.join(GTO_FILE))?;
    value.save(&a.out.join(VALUE_FILE))?;
    let manifest = format!(
        "leduc-solve v1\nvariant={:?}\niterations={}\ntarget={}\nexploitability={eps:.6e}\nstrategy={GTO_FILE}\ngame_value={VALUE_FILE}\n",
        variant,
        state.iterations_done(),
        a.target.map_or("none".to_string(), |t| t.to_string()),
    );
    write_atomic(&a.out.join("solve.txt"), manifest.as_bytes())?;
    println!(
        "iterations {} exploitability {eps:.3e} v0 {:.6}",
        state.iterations_done(),
        value.v_star_p0
    );
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let gto = StrategyTable::load(&a.gto)?;
    for &scale in &a.scales {
        let c = calibrate_scale(&gto, &[scale])?;
        println!(
            "scale {scale}: {}/12 within 30%, mean relative error {:.3}",
            c.within_30pct, c.mean_abs_rel_error
        );
        for (id, eps, reference) in &c.rows {
            println!("  {id:<24} {eps:.3} (reference {reference:.2})");
        }
    }
    Ok(())
}

pub fn gen_opponents(a: &GenOpponentsArgs) -> Result<()> {
    let gto = StrategyTable::load(&a.gto)?;
    let cfg = ArchetypeConfig {
        scale: a.scale,
        sigma: a.sigma,
    };
    let (records, header) = match a.mode {
        OpponentMode::Suite => (
            build_eval_suite(&gto, a.seed, cfg)?,
            format!(
                "mode=suite seed={} scale={} sigma={}",
                a.seed, a.scale, a.sigma
            ),
        ),
        OpponentMode::Population => (
            generate_population(&gto, a.candidates, a.keep, a.seed, cfg)?,
            format!(
                "mode=population seed={} candidates={} keep={} scale={} sigma={}",
                a.seed, a.candidates, a.keep, a.scale, a.sigma
            ),
        ),
    };
    let path = a.out.join("manifest.txt");
    write_manifest(&path, &records, &header)?;
    for r in &records {
        println!("{:<24} eps {:.4}", r.id, r.exploitability);
    }
    println!("wrote {} records to {}", records.len(), show(&path));
    Ok(())
}

fn model_config(m: &ModelArgs, input_dim: usize) -> ModelConfig {
    let mut c = match m.preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Full => ModelConfig::full(),
    };
    c.layers = m.layers.unwrap_or(c.layers);
    c.d_model = m.d_model.unwrap_or(c.d_model);
    c.heads = m.heads.unwrap_or(c.heads);
    c.ff_dim = m.ff_dim.unwrap_or(c.ff_dim);
    c.dropout = m.dropout.unwrap_or(c.dropout);
    c.max_seq_len = m.max_seq_len.unwrap_or(c.max_seq_len);
    c.label_smoothing = m.label_smoothing.unwrap_or(c.label_smoothing);
    c.opp_loss_masked |= m.opp_loss_masked;
    if let Some(l) = m.loss_mode {
        c.loss_mode = match l {
            LossMode::Ce => GtoLossMode::CrossEntropy,
            LossMode::Kl => GtoLossMode::Kl,
        };
    }
    c.with_input_dim(input_dim)
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    require(&a.gto)?;
    let gto = StrategyTable::load(&a.gto)?;
    let model = model_config(&a.model, BASE_DIM);
    model.validate()?;
    let base = match a.model.preset {
        Preset::Desk => PretrainConfig::desk(),
        Preset::Full => PretrainConfig::full(),
    };
    let cfg = PretrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
        weight_decay: a.weight_decay.unwrap_or(base.weight_decay),
        hands_per_buffer: a.hands_per_buffer.unwrap_or(base.hands_per_buffer),
        eval_hands: a.eval_hands.unwrap_or(base.eval_hands),
    };
    let every = (cfg.epochs / 20).max(1);
    let (params, report) = pretrain_imitation(&gto, model, &cfg, a.seed, |e, loss| {
        if (e + 1) % every == 0 {
            eprintln!("epoch {}: loss {loss:.4}", e + 1);
        }
    })?;
    params.save_checkpoint(&a.out.join(PRETRAINED_FILE), cfg.epochs)?;
    let mut m = String::from("leduc-pretrain v1\n");
    for line in model.to_header().split_whitespace() {
        writeln!(m, "{line}").unwrap();
    }
    writeln!(
        m,
        "epochs={}\nlearning_rate={}\nweight_decay={}",
        cfg.epochs, cfg.learning_rate, cfg.weight_decay
    )
    .unwrap();
    writeln!(
        m,
        "hands_per_buffer={}\neval_hands={}\nseed={}",
        cfg.hands_per_buffer, cfg.eval_hands, a.seed
    )
    .unwrap();
    writeln!(
        m,
        "gto={}\nfinal_loss={:.6}\nagreement={:.4}\ncheckpoint={PRETRAINED_FILE}",
        show(&a.gto),
        report.final_loss,
        report.agreement
    )
    .unwrap();
    write_atomic(&a.out.join("pretrain.txt"), m.as_bytes())?;
    println!(
        "agreement {:.3} final loss {:.4}",
        report.agreement, report.final_loss
    );
    Ok(())
}

fn curriculum_config(a: &TrainArgs) -> CurriculumConfig {
    let mut c = match a.model.preset {
        Preset::Desk => CurriculumConfig::desk(),
        Preset::Full => CurriculumConfig::full(),
    };
    c.model = model_config(&a.model, leduc_lab::features::TOKEN_DIM);
    c.seed = a.seed;
    c.single_turn = a.single_turn;
    c.phase1_only = a.phase1_only;
    c.total_epochs = a.total_epochs.unwrap_or(c.total_epochs);
    c.hands_per_buffer = a.hands_per_buffer.unwrap_or(c.hands_per_buffer);
    let p1 = &mut c.phase1;
    p1.alpha = a.phase1_alpha.unwrap_or(p1.alpha);
    p1.epsilon_greedy = a.phase1_epsilon_greedy.unwrap_or(p1.epsilon_greedy);
    p1.opp_ce_threshold = a.opp_ce_threshold.unwrap_or(p1.opp_ce_threshold);
    p1.consecutive_checks = a.consecutive_checks.unwrap_or(p1.consecutive_checks);
    p1.max_epochs = a.phase1_max_epochs.unwrap_or(p1.max_epochs);
    p1.check_interval_epochs = a.check_interval.unwrap_or(p1.check_interval_epochs);
    p1.validation_hands = a.validation_hands.unwrap_or(p1.validation_hands);
    p1.gto_opponent_fraction = a.phase1_gto_fraction.unwrap_or(p1.gto_opponent_fraction);
    let p2 = &mut c.phase2;
    p2.alpha = a.phase2_alpha.unwrap_or(p2.alpha);
    p2.lambda_max = a.lambda_max.unwrap_or(p2.lambda_max);
    p2.epsilon_max = a.epsilon_max.unwrap_or(p2.epsilon_max);
    p2.fixed_lambda = a.fixed_lambda.or(p2.fixed_lambda);
    p2.gto_opponent_fraction = a.phase2_gto_fraction.unwrap_or(p2.gto_opponent_fraction);
    let o = &mut c.optimizer;
    o.learning_rate = a.learning_rate.unwrap_or(o.learning_rate);
    o.weight_decay = a.weight_decay.unwrap_or(o.weight_decay);
    o.accumulation_phase1 = a.accumulation_phase1.unwrap_or(o.accumulation_phase1);
    o.accumulation_phase2 = a.accumulation_phase2.unwrap_or(o.accumulation_phase2);
    c
}

pub fn train(a: &TrainArgs) -> Result<()> {
    for p in [&a.gto, &a.population, &a.pretrained] {
        require(p)?;
    }
    if a.checkpoint_every == 0 {
        return Err(Error::Config(
            "--checkpoint-every must be at least 1".into(),
        ));
    }
    let cfg = curriculum_config(a);
    cfg.validate()?;
    let gto = StrategyTable::load(&a.gto)?;
    let population = read_manifest(&a.population)?;
    let run_path = a.out.join(RUN_FILE);
    let links = [
        ("gto", show(&a.gto)),
        ("population", show(&a.population)),
        ("pretrained", show(&a.pretrained)),
        ("checkpoint_every", a.checkpoint_every.to_string()),
    ];
    let mut state = if a.resume {
        require(&a.out.join("train_state.bin"))?;
        let tmp = a.out.join(".run.expected");
        write_run_manifest(&tmp, &cfg, &links)?;
        let expected = read_artifact(&tmp)?;
        let _ = std::fs::remove_file(&tmp);
        if read_artifact(&run_path)? != expected {
            return Err(Error::Config(format!(
                "settings differ from the run recorded in {}",
                show(&run_path)
            )));
        }
        TrainState::load(&a.out)?
    } else {
        if a.out.join("train_state.bin").exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume to continue it",
                show(&a.out)
            )));
        }
        let (pretrained, _) = ModelParameters::<f32>::load_checkpoint(&a.pretrained)?;
        write_run_manifest(&run_path, &cfg, &links)?;
        TrainState::new(pretrained, &cfg)?
    };
    let mut trainer = Trainer::new(cfg, &gto, &population)?;
    let stop = a.stop_after_epoch.unwrap_or(u64::MAX);
    while !trainer.finished(&state) && state.epoch < stop {
        let before = state.metrics.len();
        trainer.step_epoch(&mut state)?;
        if let Some(v) = state.metrics[before..].iter().find_map(|m| m.val_opp_ce) {
            eprintln!("epoch {}: validation Opp CE {v:.4}", state.epoch);
        }
        if state.epoch % a.checkpoint_every == 0 {
            let m = state.metrics.last().expect("one row per epoch");
            eprintln!(
                "epoch {} phase {}: GTO CE {:.4} BR CE {:.4} Opp CE {:.4}",
                state.epoch, m.phase, m.gto_ce, m.br_ce, m.opp_ce
            );
            state.save(&a.out)?;
        }
    }
    state.save(&a.out)?;
    let phase1 = state
        .phase1_epochs
        .map_or("unfinished".to_string(), |e| e.to_string());
    println!(
        "epochs {} phase1 epochs {phase1} updates {} phase {} last validation Opp CE {}",
        state.epoch,
        state.updates,
        if state.phase == Phase::Modeling { 1 } else { 2 },
        state
            .last_validation_opp_ce()
            .map_or("none".to_string(), |v| format!("{v:.4}"))
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    require(&a.gto)?;
    require(&a.suite)?;
    let gto = StrategyTable::load(&a.gto)?;
    let suite = read_manifest(&a.suite)?;
    let mode = match a.action_mode {
        Mode::Sample => ActionMode::Sample,
        Mode::Argmax => ActionMode::Argmax,
    };
    let cfg = EvalConfig {
        hands_per_trial: a.hands,
        trials: a.trials,
        seed: a.seed,
        action_mode: mode,
    };
    cfg.validate()?;
    let (results, agent_link): (Vec<PairedResult>, (&str, String)) =
        match (&a.checkpoint, &a.agent_strategy) {
            (Some(ckpt), _) => {
                let (params, _) = ModelParameters::<f32>::load_checkpoint(ckpt)?;
                let mut agent = ModelAgent::new(&params, a.single_turn, mode);
                (
                    evaluate_suite(&mut agent as &mut dyn Agent, &gto, &suite, &cfg)?,
                    ("checkpoint", show(ckpt)),
                )
            }
            (None, Some(table)) => {
                let mut agent = TabularAgent::new(StrategyTable::load(table)?);
                (
                    evaluate_suite(&mut agent, &gto, &suite, &cfg)?,
                    ("agent_strategy", show(table)),
                )
            }
            (None, None) => {
                return Err(Error::Config(
                    "pass --checkpoint or --agent-strategy".into(),
                ))
            }
        };
    let csv = summarize(&results)?;
    write_atomic(&a.out.join(RESULTS_CSV), csv.as_bytes())?;
    let links = [
        agent_link,
        ("gto", show(&a.gto)),
        ("suite", show(&a.suite)),
        ("single_turn", a.single_turn.to_string()),
    ];
    write_results_manifest(&a.out.join("results.txt"), &cfg, &links, &results)?;
    print!("{csv}");
    println!(
        "average gain (excluding gto) {:+.4}",
        average_gain(&results)
    );
    Ok(())
}

pub const REPORT_TABLE_HEADER: &str = "opponent,epsilon,model_ev,gto_ev,gain,ci95,significant,bold";

/// Results ordered like the published table: GTO first, then by
/// exploitability, with an average row. `bold` marks significant gains
/// above zero.
pub fn report_table(results: &[PairedResult]) -> String {
    let mut rows: Vec<&PairedResult> = results.iter().collect();
    rows.sort_by(|x, y| {
        (x.opponent_id != "gto")
            .cmp(&(y.opponent_id != "gto"))
            .then(x.opponent_epsilon.total_cmp(&y.opponent_epsilon))
    });
    let mut out = format!("{REPORT_TABLE_HEADER}\n");
    for r in rows {
        let sig = r.significant();
        writeln!(
            out,
            "{},{:.2},{:+.3},{:+.3},{:+.3},{:.3},{},{}",
            r.opponent_id,
            r.opponent_epsilon,
            r.model_ev,
            r.baseline_ev,
            r.gain,
            r.ci95,
            sig,
            sig && r.gain > 0.0
        )
        .unwrap();
    }
    writeln!(out, "average_excl_gto,,,,{:+.3},,,", average_gain(results)).unwrap();
    out
}

/// Whitespace-separated learning curves; missing validation values are NaN.
pub fn learning_curves(metrics_csv: &str, origin: &str) -> Result<String> {
    let mut lines = metrics_csv.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Version {
            path: origin.to_string(),
            expected: METRICS_HEADER.to_string(),
            found: metrics_csv.lines().next().unwrap_or("").to_string(),
        });
    }
    let mut out = String::from("# epoch phase gto_ce br_ce opp_ce lambda val_opp_ce\n");
    for l in lines.filter(|l| !l.is_empty()) {
        let m = MetricRow::from_csv(l)?;
        let val = m
            .val_opp_ce
            .map_or("NaN".to_string(), |v| format!("{v:.6}"));
        writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.4} {val}",
            m.epoch, m.phase, m.gto_ce, m.br_ce, m.opp_ce, m.lambda
        )
        .unwrap();
    }
    Ok(out)
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let results = parse_report(&read_artifact(&a.results)?).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: show(&a.results),
            reason,
        },
        e => e,
    })?;
    let table = report_table(&results);
    write_atomic(&a.out.join(REPORT_CSV), table.as_bytes())?;
    print!("{table}");
    if let Some(metrics) = &a.metrics {
        let curves = learning_curves(&read_artifact(metrics)?, &show(metrics))?;
        let path: PathBuf = a.out.join(CURVES_FILE);
        write_atomic(&path, curves.as_bytes())?;
        println!("wrote {}", show(&path));
    }
    Ok(())
}
