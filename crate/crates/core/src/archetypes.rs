//! Exploitable opponents built by log-odds perturbation of an equilibrium.
//!
//! At every information state where the equilibrium mixes, support actions
//! get `ln p + scale·w·f(a) + η` with `η ~ N(0, σ²)` and are pushed back
//! through a softmax that preserves the support's total mass. Pure states
//! and off-support actions are copied unchanged.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::game::NUM_ACTIONS;
use crate::io::{kv_fields, read_artifact, read_versioned, write_atomic};
use crate::seed::{SeedNamespace, EVAL_SUITE, TRAIN_POPULATION};
use crate::strategy::{ActionDist, StrategyTable};
use crate::tabular::exploitability;
use crate::tree::info_index;

/// Actions below this probability count as outside the equilibrium support.
/// Solver residue on dominated actions sits well below it.
pub const SUPPORT_EPS: f64 = 1e-4;

pub const DEFAULT_SCALE: f64 = 1.5;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const MID_W: f64 = 0.35;
pub const HIGH_W: f64 = 0.70;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modifier {
    OverCaller,
    Nit,
    Maniac,
    Passive,
    LooseAggressive,
    TightPassive,
}

impl Modifier {
    pub const ALL: [Modifier; 6] = [
        Modifier::OverCaller,
        Modifier::Nit,
        Modifier::Maniac,
        Modifier::Passive,
        Modifier::LooseAggressive,
        Modifier::TightPassive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modifier::OverCaller => "over_caller",
            Modifier::Nit => "nit",
            Modifier::Maniac => "maniac",
            Modifier::Passive => "passive",
            Modifier::LooseAggressive => "loose_aggressive",
            Modifier::TightPassive => "tight_passive",
        }
    }

    /// Log-odds bias over (fold, call, raise).
    pub fn bias(self) -> [f64; NUM_ACTIONS] {
        match self {
            Modifier::OverCaller => [-1.0, 1.0, 0.0],
            Modifier::Nit => [1.0, -0.5, -0.5],
            Modifier::Maniac => [-1.0, -1.0, 2.0],
            Modifier::Passive => [0.0, 1.0, -2.0],
            Modifier::LooseAggressive => [-1.0, 0.5, 1.0],
            Modifier::TightPassive => [1.0, 0.5, -1.5],
        }
    }

    /// Exploitability at (mid, high) strength in the reference suite, kept
    /// as a calibration target.
    pub fn reference_exploitability(self) -> (f64, f64) {
        match self {
            Modifier::OverCaller => (0.23, 0.53),
            Modifier::Nit => (0.34, 0.48),
            Modifier::Maniac => (0.46, 1.26),
            Modifier::Passive => (0.15, 0.33),
            Modifier::LooseAggressive => (0.25, 0.60),
            Modifier::TightPassive => (0.33, 0.53),
        }
    }
}

impl FromStr for Modifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Modifier> {
        Modifier::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modifier `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchetypeSpec {
    pub modifier: Modifier,
    /// Deviation strength in `[0, 1]`.
    pub w: f64,
    pub sigma_noise: f64,
    pub seed: u64,
    /// Global multiplier on `w·f(a)`.
    pub scale: f64,
}

impl ArchetypeSpec {
    pub fn new(modifier: Modifier, w: f64, sigma_noise: f64, seed: u64) -> ArchetypeSpec {
        ArchetypeSpec {
            modifier,
            w,
            sigma_noise,
            seed,
            scale: DEFAULT_SCALE,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> ArchetypeSpec {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Config(format!("w = {} outside [0, 1]", self.w)));
        }
        if !(self.sigma_noise >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Config("sigma must be >= 0 and scale finite".into()));
        }
        Ok(())
    }
}

/// Perturbs every mixed information state of `gto` (both seats).
pub fn perturb(gto: &StrategyTable, spec: &ArchetypeSpec) -> Result<StrategyTable> {
    spec.validate()?;
    let idx = info_index();
    let bias = spec.modifier.bias();
    let noise_ns = SeedNamespace::new(spec.seed);
    let normal = Normal::new(0.0, spec.sigma_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = gto.clone();
    for (id, d) in gto.iter_ids() {
        let support: Vec<usize> = idx
            .legal(id)
            .iter()
            .map(|a| a.index())
            .filter(|&a| d[a] > SUPPORT_EPS)
            .collect();
        if support.len() < 2 {
            continue;
        }
        let mut rng = noise_ns.rng("noise", &[id as u64]);
        let delta: Vec<f64> = support
            .iter()
            .map(|&a| {
                let eta = if spec.sigma_noise > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                };
                spec.scale * spec.w * bias[a] + eta
            })
            .collect();
        if delta.iter().all(|&x| x == 0.0) {
            continue;
        }
        let logits: Vec<f64> = support
            .iter()
            .zip(&delta)
            .map(|(&a, dl)| d[a].ln() + dl)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mass: f64 = support.iter().map(|&a| d[a]).sum();
        let mut nd: ActionDist = *d;
        for (&a, e) in support.iter().zip(&exps) {
            nd[a] = mass * e / z;
        }
        out.set(idx.key(id), nd)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OpponentRecord {
    pub id: String,
    pub spec: ArchetypeSpec,
    pub strategy: StrategyTable,
    /// Per-player exploitability (NashConv / 2), chips per hand.
    pub exploitability: f64,
}

impl OpponentRecord {
    pub fn build(
        id: impl Into<String>,
        gto: &StrategyTable,
        spec: ArchetypeSpec,
    ) -> Result<OpponentRecord> {
        let strategy = perturb(gto, &spec)?;
        let exploitability = exploitability(&strategy)?;
        Ok(OpponentRecord {
            id: id.into(),
            spec,
            strategy,
            exploitability,
        })
    }

    /// Recomputes exploitability from the stored strategy.
    pub fn audit(&self) -> Result<f64> {
        exploitability(&self.strategy)
    }
}

/// Settings shared by suite and population generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchetypeConfig {
    pub scale: f64,
    pub sigma: f64,
}

impl Default for ArchetypeConfig {
    fn default() -> Self {
        ArchetypeConfig {
            scale: DEFAULT_SCALE,
            sigma: DEFAULT_SIGMA,
        }
    }
}

pub fn suite_id(modifier: Modifier, high: bool) -> String {
    format!("{}_{}", modifier.name(), if high { "high" } else { "mid" })
}

/// Six archetypes at mid (w = 0.35) and high (w = 0.70) strength, seeded
/// from the evaluation namespace.
pub fn build_eval_suite(
    gto: &StrategyTable,
    seed: u64,
    cfg: ArchetypeConfig,
) -> Result<Vec<OpponentRecord>> {
    let ns = SeedNamespace::new(seed).child(EVAL_SUITE, &[]);
    let mut out = Vec::with_capacity(12);
    for (mi, m) in Modifier::ALL.into_iter().enumerate() {
        for (li, w) in [MID_W, HIGH_W].into_iter().enumerate() {
            let spec = ArchetypeSpec::new(
                m,
                w,
                cfg.sigma,
                ns.derive("opponent", &[mi as u64, li as u64]),
            )
            .with_scale(cfg.scale);
            out.push(OpponentRecord::build(suite_id(m, li == 1), gto, spec)?);
        }
    }
    Ok(out)
}

/// Random archetypes (uniform modifier, `w ~ U[0, 1]`), sorted by
/// exploitability and thinned to `keep` evenly spaced representatives.
pub fn generate_population(
    gto: &StrategyTable,
    candidates: usize,
    keep: usize,
    seed: u64,
    cfg: ArchetypeConfig,
) -> Result<Vec<OpponentRecord>> {
    if candidates < keep || keep == 0 {
        return Err(Error::Config(format!(
            "need candidates ({candidates}) >= keep ({keep}) >= 1"
        )));
    }
    let ns = SeedNamespace::new(seed).child(TRAIN_POPULATION, &[]);
    let mut rng = ns.rng("sampling", &[]);
    let mut pool = Vec::with_capacity(candidates);
    for i in 0..candidates {
        let modifier = Modifier::ALL[rng.gen_range(0..Modifier::ALL.len())];
        let w: f64 = rng.gen_range(0.0..=1.0);
        let spec = ArchetypeSpec::new(modifier, w, cfg.sigma, ns.derive("opponent", &[i as u64]))
            .with_scale(cfg.scale);
        pool.push(OpponentRecord::build(format!("pop-{i:04}"), gto, spec)?);
    }
    pool.sort_by(|a, b| a.exploitability.total_cmp(&b.exploitability));
    let picks = evenly_spaced(candidates, keep);
    let mut taken: Vec<Option<OpponentRecord>> = pool.into_iter().map(Some).collect();
    Ok(picks
        .into_iter()
        .map(|i| taken[i].take().expect("distinct picks"))
        .collect())
}

/// `keep` distinct indices spread over `0..n` including both ends.
pub fn evenly_spaced(n: usize, keep: usize) -> Vec<usize> {
    if keep == 1 {
        return vec![0];
    }
    (0..keep)
        .map(|k| ((k as f64) * (n - 1) as f64 / (keep - 1) as f64).round() as usize)
        .collect()
}

/// Result of fitting the global bias scale to the reference suite values.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub scale: f64,
    /// (id, exploitability, reference) per suite member at σ = 0.
    pub rows: Vec<(String, f64, f64)>,
    pub within_30pct: usize,
    pub mean_abs_rel_error: f64,
}

/// Evaluates each candidate scale on the σ = 0 suite and keeps the one with
/// the most members within ±30% of the reference, breaking ties by mean
/// absolute relative error.
pub fn calibrate_scale(gto: &StrategyTable, candidates: &[f64]) -> Result<Calibration> {
    let mut best: Option<Calibration> = None;
    for &scale in candidates {
        let suite = build_eval_suite(gto, 0, ArchetypeConfig { scale, sigma: 0.0 })?;
        let rows: Vec<(String, f64, f64)> = suite
            .iter()
            .map(|r| {
                let (mid, high) = r.spec.modifier.reference_exploitability();
                let reference = if r.spec.w == HIGH_W { high } else { mid };
                (r.id.clone(), r.exploitability, reference)
            })
            .collect();
        let rel: Vec<f64> = rows.iter().map(|(_, e, r)| (e - r).abs() / r).collect();
        let cal = Calibration {
            scale,
            within_30pct: rel.iter().filter(|&&x| x <= 0.30).count(),
            mean_abs_rel_error: rel.iter().sum::<f64>() / rel.len() as f64,
            rows,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                (cal.within_30pct, -cal.mean_abs_rel_error)
                    > (b.within_30pct, -b.mean_abs_rel_error)
            }
        };
        if better {
            best = Some(cal);
        }
    }
    best.ok_or_else(|| Error::Config("no calibration candidates".into()))
}

pub const MANIFEST_FORMAT: &str = "leduc-opponents v1";

/// Writes each strategy next to the manifest and the manifest itself.
pub fn write_manifest(path: &Path, records: &[OpponentRecord], extra_header: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut text = format!("{MANIFEST_FORMAT} count={}", records.len());
    if !extra_header.is_empty() {
        text.push(' ');
        text.push_str(extra_header);
    }
    text.push('\n');
    for r in records {
        let file = format!("{}.strategy.txt", r.id);
        r.strategy.save(&dir.join(&file))?;
        writeln!(
            text,
            "id={} modifier={} w={:.17e} sigma={:.17e} seed={} scale={:.17e} epsilon={:.17e} strategy={}",
            r.id,
            r.spec.modifier.name(),
            r.spec.w,
            r.spec.sigma_noise,
            r.spec.seed,
            r.spec.scale,
            r.exploitability,
            file
        )
        .unwrap();
    }
    write_atomic(path, text.as_bytes())
}

/// Loads a manifest and the strategy files it names.
pub fn read_manifest(path: &Path) -> Result<Vec<OpponentRecord>> {
    let origin = path.display().to_string();
    let text = read_artifact(path)?;
    let body = read_versioned(&text, MANIFEST_FORMAT, &origin)?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut out = Vec::new();
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        let mut f = std::collections::HashMap::new();
        for (k, v) in kv_fields(line) {
            f.insert(k, v);
        }
        let get = |k: &str| {
            f.get(k)
                .copied()
                .ok_or_else(|| Error::format(&origin, format!("record missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(&origin, format!("bad `{k}`")))
        };
        let spec = ArchetypeSpec {
            modifier: get("modifier")?.parse()?,
            w: num("w")?,
            sigma_noise: num("sigma")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::format(&origin, "bad seed"))?,
            scale: num("scale")?,
        };
        let strategy = StrategyTable::load(&dir.join(get("strategy")?))?;
        out.push(OpponentRecord {
            id: get("id")?.to_string(),
            spec,
            strategy,
            exploitability: num("epsilon")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{Action, LegalMask};

    fn half_half() -> StrategyTable {
        // Every key mixes 50/50 over call and raise where both are legal.
        StrategyTable::from_fn(&[0, 1], |_, legal: LegalMask| {
            if legal.contains(Action::Raise) {
                [0.0, 0.5, 0.5]
            } else {
                [0.5, 0.5, 0.0]
            }
        })
    }

    #[test]
    fn over_caller_softmax_arithmetic() {
        let base = half_half();
        let spec = ArchetypeSpec::new(Modifier::OverCaller, 0.35, 0.0, 1).with_scale(1.0);
        let out = perturb(&base, &spec).unwrap();
        let (key, _) = base.iter().find(|(_, d)| d[2] == 0.5).unwrap();
        let d = out.get(key).unwrap();
        let expected = 0.35f64.exp() / (0.35f64.exp() + 1.0);
        assert!((d[1] - expected).abs() < 1e-15);
        assert!((d[1] - 0.5866).abs() < 1e-4);
    }

    #[test]
    fn identity_when_w_and_sigma_are_zero() {
        let base = half_half();
        let spec = ArchetypeSpec::new(Modifier::Maniac, 0.0, 0.0, 9);
        assert_eq!(perturb(&base, &spec).unwrap(), base);
    }

    #[test]
    fn pure_keys_are_copied() {
        let pure = StrategyTable::from_fn(&[0, 1], |_, legal: LegalMask| {
            let mut d = [0.0; 3];
            d[legal.iter().last().unwrap().index()] = 1.0;
            d
        });
        let spec = ArchetypeSpec::new(Modifier::Passive, 0.7, 0.5, 3);
        assert_eq!(perturb(&pure, &spec).unwrap(), pure);
    }

    #[test]
    fn noise_is_seeded() {
        let base = half_half();
        let spec = ArchetypeSpec::new(Modifier::Nit, 0.5, 0.3, 11);
        let a = perturb(&base, &spec).unwrap();
        assert_eq!(a, perturb(&base, &spec).unwrap());
        let other = ArchetypeSpec { seed: 12, ..spec };
        assert_ne!(a, perturb(&base, &other).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn invalid_w_rejected() {
        let spec = ArchetypeSpec::new(Modifier::Nit, 1.5, 0.0, 0);
        assert!(perturb(&half_half(), &spec).is_err());
    }

    #[test]
    fn evenly_spaced_indices() {
        assert_eq!(evenly_spaced(10, 4), vec![0, 3, 6, 9]);
        assert_eq!(evenly_spaced(5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(evenly_spaced(7, 1), vec![0]);
    }

    #[test]
    fn population_rejects_small_candidate_pool() {
        assert!(generate_population(&half_half(), 3, 5, 0, ArchetypeConfig::default()).is_err());
    }
}
