//! Experiment configuration: one TOML file holding every module config, the
//! evaluation matrix, ablation settings and seeds.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mpcrrl_core::envsim::{EnvConfig, Perturbation, PERTURBATION_NAMES};
use mpcrrl_core::mpc::MpcConfig;
use mpcrrl_core::policy::PolicyKind;
use mpcrrl_core::training::{CollectConfig, FitConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA: &str = "mpcrrl-experiment/1";

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "MPCRRL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub sysid: SysidConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            out_dir: None,
            env: EnvConfig::default(),
            mpc: MpcConfig::default(),
            sysid: SysidConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SysidConfig {
    pub transitions: usize,
    pub seed: u64,
    /// Seed for the network initialization the fit starts from.
    pub init_seed: u64,
    pub collect: CollectConfig,
    pub fit: FitConfig,
}

impl Default for SysidConfig {
    fn default() -> Self {
        Self {
            transitions: 19000,
            seed: 0,
            init_seed: 0,
            collect: CollectConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episode `i` of every cell uses seed `seed + i`.
    pub seed: u64,
    pub cells: Vec<Cell>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let mut cells = vec![Cell::Unperturbed];
        cells.extend(testing_cells());
        Self {
            episodes: 100,
            seed: 10_000,
            cells,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<Vec<Ablation>>,
    /// Training seeds; every variant is trained once per seed.
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub cells: Vec<Cell>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: vec![vec![], vec![Ablation::Rnn], vec![Ablation::Si], vec![Ablation::Cr]],
            seeds: vec![0, 1, 2],
            episodes: 100,
            cells: testing_cells(),
        }
    }
}

/// The 18 testing-column cells of the perturbation table.
pub fn testing_cells() -> Vec<Cell> {
    PERTURBATION_NAMES
        .iter()
        .flat_map(|n| Perturbation::testing_values(n).expect("known name"))
        .map(Cell::One)
        .collect()
}

/// One evaluation cell: the training environment or a single override.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Cell {
    Unperturbed,
    One(Perturbation),
}

impl Cell {
    pub fn perturbations(&self) -> Vec<Perturbation> {
        match self {
            Self::Unperturbed => Vec::new(),
            Self::One(p) => vec![*p],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Unperturbed => "none",
            Self::One(p) => p.name(),
        }
    }

    pub fn value_label(&self) -> String {
        match self {
            Self::Unperturbed => String::new(),
            Self::One(p) => p.value_label(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unperturbed => f.write_str("none"),
            Self::One(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for Cell {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "none" {
            return Ok(Self::Unperturbed);
        }
        Ok(Self::One(s.parse()?))
    }
}

impl From<Cell> for String {
    fn from(c: Cell) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Cell {
    type Error = CliError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Feed-forward policy instead of the recurrent one.
    Rnn,
    /// Drop the system identification loss (`α = 0`).
    Si,
    /// Drop the reward surrogate; minimize `J2` only.
    Cr,
}

impl FromStr for Ablation {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rnn" => Ok(Self::Rnn),
            "si" => Ok(Self::Si),
            "cr" => Ok(Self::Cr),
            other => Err(CliError::Usage(format!("unknown ablation `{other}`; expected rnn, si or cr"))),
        }
    }
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Rnn => "rnn",
            Self::Si => "si",
            Self::Cr => "cr",
        }
    }
}

/// `full` without ablations, otherwise `no-` followed by the sorted flags.
pub fn variant_name(ablations: &[Ablation]) -> String {
    let mut a = ablations.to_vec();
    a.sort();
    a.dedup();
    if a.is_empty() {
        "full".to_string()
    } else {
        format!("no-{}", a.iter().map(Ablation::as_str).collect::<Vec<_>>().join("-"))
    }
}

/// Training config for an ablation variant, validated.
pub fn apply_ablations(train: &TrainConfig, ablations: &[Ablation]) -> Result<TrainConfig> {
    let mut cfg = train.clone();
    for a in ablations {
        match a {
            Ablation::Rnn => cfg.policy_kind = PolicyKind::FeedForward,
            Ablation::Si => cfg.alpha = 0.0,
            Ablation::Cr => cfg.sysid_only = true,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config schema error: {}", e.message())))?;
        if cfg.schema != SCHEMA {
            return Err(CliError::Usage(format!(
                "config schema error: schema is `{}`, expected `{SCHEMA}`",
                cfg.schema
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Usage(m) => CliError::Usage(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.mpc.validate()?;
        self.train.validate()?;
        if self.sysid.transitions == 0 {
            return Err(CliError::Usage("sysid.transitions must be ≥ 1".into()));
        }
        if self.eval.cells.is_empty() || self.ablation.cells.is_empty() {
            return Err(CliError::Usage("evaluation cell lists must not be empty".into()));
        }
        for v in &self.ablation.variants {
            apply_ablations(&self.train, v)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `--out` flag, then `MPCRRL_OUT`, then `out_dir`, then `runs`.
    pub fn out_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(v) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(v);
        }
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}
