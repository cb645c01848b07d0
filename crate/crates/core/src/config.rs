//! Experiment configuration file.
//!
//! The file is JSON. The `BehaviorIDM` block and `step_time` use the key names
//! of the published parameter listing, so that listing can be loaded as is.
//! Unknown blocks (for example the learner's `BehaviorSACAgent`) are ignored.
//!
//! ```json
//! {
//!   "BehaviorIDM": { "MinimumSpacing": 2.0, "DesiredTimeHeadway": [1.0, 5.0] },
//!   "step_time": 0.2,
//!   "Cpe": { "PoolAccelerations": [-2.0, 0.0, 2.0], "Horizon": 1.0, "K": "all" },
//!   "Scenario": { "num_other_vehicles": 4 }
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cpe::{KSelection, PolicyPool};
use crate::drivers::{IdmParams, MobilParams};
use crate::error::{CpeError, Result};
use crate::put::{load_policy, PutPolicy};
use crate::runner::ScenarioConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "PascalCase")]
struct IdmBlock {
    max_velocity: Option<f64>,
    minimum_spacing: Option<f64>,
    desired_time_headway: Option<(f64, f64)>,
    max_acceleration: Option<f64>,
    desired_velocity: Option<f64>,
    comfortable_braking_acceleration: Option<f64>,
    min_velocity: Option<f64>,
    exponent: Option<i32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "PascalCase")]
struct MobilBlock {
    politeness: Option<f64>,
    acceleration_threshold: Option<f64>,
    safe_deceleration: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "PascalCase")]
struct CpeBlock {
    pool_accelerations: Option<Vec<f64>>,
    horizon: Option<f64>,
    rho_max: Option<RhoSpec>,
    #[serde(rename = "K")]
    k: Option<KSpec>,
    gate_period_steps: Option<usize>,
    gated: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RhoSpec {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum KSpec {
    Count(usize),
    Word(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
struct ConfigFile {
    #[serde(rename = "BehaviorIDM")]
    idm: Option<IdmBlock>,
    #[serde(rename = "BehaviorMobil")]
    mobil: Option<MobilBlock>,
    step_time: Option<f64>,
    #[serde(rename = "Scenario")]
    scenario: Option<ScenarioConfig>,
    #[serde(rename = "Cpe")]
    cpe: Option<CpeBlock>,
    #[serde(rename = "Policy")]
    policy: Option<String>,
    #[serde(rename = "Episodes")]
    episodes: Option<usize>,
    #[serde(rename = "Seed")]
    seed: Option<u64>,
}

/// Where the policy under test comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicySource {
    Scripted,
    Risky,
    File(PathBuf),
}

impl FromStr for PolicySource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "scripted" => PolicySource::Scripted,
            "risky" => PolicySource::Risky,
            path => PolicySource::File(PathBuf::from(path)),
        })
    }
}

impl fmt::Display for PolicySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySource::Scripted => f.write_str("scripted"),
            PolicySource::Risky => f.write_str("risky"),
            PolicySource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl PolicySource {
    pub fn load(&self) -> Result<PutPolicy> {
        match self {
            PolicySource::Scripted => Ok(PutPolicy::scripted()),
            PolicySource::Risky => Ok(PutPolicy::risky()),
            PolicySource::File(p) => load_policy(p),
        }
    }
}

/// Everything a run depends on. Worker count and output location are not
/// part of it, since they never change results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub pool_accelerations: Vec<f64>,
    pub horizon: f64,
    pub rho: Vec<f64>,
    pub k: KSelection,
    pub gate_period_steps: usize,
    /// When false the PUT always runs and the gate is skipped.
    pub gated: bool,
    pub policy: PolicySource,
    pub episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            pool_accelerations: vec![-2.0, 0.0, 2.0],
            horizon: 1.0,
            rho: vec![0.0],
            k: KSelection::All,
            gate_period_steps: 1,
            gated: true,
            policy: PolicySource::Scripted,
            episodes: 250,
        }
    }
}

fn apply_idm(idm: &mut IdmParams, headways: &mut (f64, f64), b: &IdmBlock) {
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut idm.v_max, b.max_velocity);
    set(&mut idm.s0_min_spacing, b.minimum_spacing);
    set(&mut idm.a_max, b.max_acceleration);
    set(&mut idm.v_desired, b.desired_velocity);
    set(&mut idm.b_comfort, b.comfortable_braking_acceleration);
    set(&mut idm.v_min, b.min_velocity);
    if let Some(e) = b.exponent {
        idm.exponent = e;
    }
    if let Some(h) = b.desired_time_headway {
        *headways = h;
        idm.time_headway = h.0;
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(text)?;
        let mut cfg = ExperimentConfig::default();
        if let Some(s) = file.scenario {
            cfg.scenario = s;
        }
        let sc = &mut cfg.scenario;
        if let Some(b) = &file.idm {
            apply_idm(&mut sc.idm, &mut sc.headway_range, b);
        }
        if let Some(b) = &file.mobil {
            sc.mobil = MobilParams {
                politeness: b.politeness.unwrap_or(sc.mobil.politeness),
                accel_gain_threshold: b.acceleration_threshold.unwrap_or(sc.mobil.accel_gain_threshold),
                b_safe: b.safe_deceleration.unwrap_or(sc.mobil.b_safe),
            };
        }
        if let Some(dt) = file.step_time {
            sc.step.dt = dt;
        }
        if let Some(seed) = file.seed {
            sc.seed = seed;
        }
        if let Some(c) = file.cpe {
            if let Some(p) = c.pool_accelerations {
                cfg.pool_accelerations = p;
            }
            if let Some(h) = c.horizon {
                cfg.horizon = h;
            }
            match c.rho_max {
                Some(RhoSpec::One(r)) => cfg.rho = vec![r],
                Some(RhoSpec::Many(r)) => cfg.rho = r,
                None => {}
            }
            if let Some(k) = c.k {
                cfg.k = match k {
                    KSpec::Count(n) => KSelection::Count(n),
                    KSpec::Word(w) => w.parse::<KArg>().map_err(CpeError::InvalidConfig)?.0,
                };
            }
            if let Some(g) = c.gate_period_steps {
                cfg.gate_period_steps = g;
            }
            if let Some(g) = c.gated {
                cfg.gated = g;
            }
        }
        if let Some(p) = file.policy {
            cfg.policy = p.parse().expect("infallible");
        }
        if let Some(e) = file.episodes {
            cfg.episodes = e;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pool()?;
        let dt = self.scenario.step.dt;
        let n = (self.horizon / dt).round();
        if !(self.horizon > 0.0) || n < 1.0 || (n * dt - self.horizon).abs() > 1e-9 {
            return Err(CpeError::InvalidHorizon {
                horizon: self.horizon,
                dt,
            });
        }
        if let Some(r) = self.rho.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(CpeError::InvalidConfig(format!("rho_max {r} outside [0, 1]")));
        }
        if self.gate_period_steps == 0 {
            return Err(CpeError::InvalidConfig("gate_period_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pool(&self) -> Result<PolicyPool> {
        PolicyPool::constant_accelerations(&self.pool_accelerations)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// `K` given as a count or the word `all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KArg(pub KSelection);

impl FromStr for KArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(KArg(KSelection::All));
        }
        s.parse::<usize>()
            .map(|n| KArg(KSelection::Count(n)))
            .map_err(|_| format!("expected a count or \"all\", got {s:?}"))
    }
}

fn decimals(tok: &str) -> usize {
    tok.split_once('.').map_or(0, |(_, frac)| frac.len())
}

/// Parses a comma-separated number list. An `...` entry expands an
/// arithmetic progression from the two entries before it up to the entry
/// after it, so `0,0.1,...,1.0` gives eleven values. Expanded values are
/// computed on a decimal grid, so `0.3` comes out as the literal `0.3`.
/// Blank text is the empty list.
pub fn parse_number_list(text: &str) -> std::result::Result<Vec<f64>, String> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let toks: Vec<&str> = text.split(',').map(str::trim).collect();
    let num = |t: &str| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}"));
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if toks[i] != "..." {
            out.push(num(toks[i])?);
            i += 1;
            continue;
        }
        if i < 2 || i + 1 >= toks.len() || toks[i - 1] == "..." || toks[i + 1] == "..." {
            return Err("\"...\" needs two values before it and one after".into());
        }
        let (a, b, c) = (toks[i - 2], toks[i - 1], toks[i + 1]);
        let digits = decimals(a).max(decimals(b)).max(decimals(c));
        let scale = 10f64.powi(digits as i32);
        let grid = |t: &str| num(t).map(|x| (x * scale).round() as i64);
        let (ga, gb, gc) = (grid(a)?, grid(b)?, grid(c)?);
        let step = gb - ga;
        if step == 0 || (gc - gb) % step != 0 || (gc - gb) / step < 1 {
            return Err(format!("cannot expand {a},{b},...,{c}"));
        }
        let mut g = gb + step;
        while g != gc {
            out.push(g as f64 / scale);
            g += step;
        }
        i += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING: &str = r#"{
        "BehaviorIDM": {
          "MaxVelocity": 30.0,
          "MinimumSpacing": 2.0,
          "DesiredTimeHeadway": [1.0, 5.0],
          "MaxAcceleration": 2.5,
          "DesiredVelocity": 15.0,
          "ComfortableBrakingAcceleration": 1.6,
          "MinVelocity": 0.0,
          "Exponent": 4
        },
        "BehaviorSACAgent": { "ActorFcLayerParams": [512,256,256], "Gamma": 0.995 },
        "step_time": 0.2
    }"#;

    #[test]
    fn parameter_listing_loads() {
        let cfg = ExperimentConfig::from_json(LISTING).unwrap();
        assert_eq!(cfg.scenario.headway_range, (1.0, 5.0));
        assert_eq!(cfg.scenario.idm.s0_min_spacing, 2.0);
        assert_eq!(cfg.scenario.idm.exponent, 4);
        assert_eq!(cfg.scenario.step.dt, 0.2);
        cfg.validate().unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn cpe_block() {
        let cfg = ExperimentConfig::from_json(
            r#"{"Cpe": {"PoolAccelerations": [-1, 1], "K": "all", "RhoMax": 0.25, "Horizon": 0.6}, "Policy": "risky"}"#,
        )
        .unwrap();
        assert_eq!(cfg.pool_accelerations, vec![-1.0, 1.0]);
        assert_eq!(cfg.rho, vec![0.25]);
        assert_eq!(cfg.k, KSelection::All);
        assert_eq!(cfg.policy, PolicySource::Risky);
        cfg.validate().unwrap();
        let k2 = ExperimentConfig::from_json(r#"{"Cpe": {"K": 2}}"#).unwrap();
        assert_eq!(k2.k, KSelection::Count(2));
    }

    #[test]
    fn horizon_must_be_step_multiple() {
        let cfg = ExperimentConfig {
            horizon: 0.3,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(CpeError::InvalidHorizon { .. })));
    }

    #[test]
    fn malformed_json_reports_position() {
        match ExperimentConfig::from_json("{\n  \"step_time\": ,\n}") {
            Err(CpeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = ExperimentConfig::default();
        assert_eq!(base.hash(), ExperimentConfig::default().hash());
        let mut variants = vec![base.clone(); 7];
        variants[6].gated = false;
        variants[0].scenario.seed = 1;
        variants[1].horizon = 0.4;
        variants[2].rho = vec![0.0, 0.5];
        variants[3].k = KSelection::Count(2);
        variants[4].scenario.idm.s0_min_spacing = 2.5;
        variants[5].policy = PolicySource::Risky;
        for v in &variants {
            assert_ne!(v.hash(), base.hash());
        }
    }

    #[test]
    fn number_lists() {
        let r = parse_number_list("0,0.1,...,1.0").unwrap();
        assert_eq!(r.len(), 11);
        assert_eq!(r[3], 0.3);
        assert_eq!(r[10], 1.0);
        assert_eq!(parse_number_list("-2,0,2").unwrap(), vec![-2.0, 0.0, 2.0]);
        assert_eq!(parse_number_list("0.5").unwrap(), vec![0.5]);
        assert!(parse_number_list("0,...,1").is_err());
        assert!(parse_number_list("0,0.3,...,1").is_err());
        assert!(parse_number_list("a").is_err());
        assert!(parse_number_list("").unwrap().is_empty());
    }
}
