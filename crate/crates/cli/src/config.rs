//! Experiment configuration, read from a single TOML file.

use std::path::Path;

use exclusion_core::exact::DEFAULT_MAX_LEN;
use exclusion_core::sim::CouplingTable;
use exclusion_core::{DistSpec, Environment};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Raw text of a config file with its SHA-256.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<LoadedConfig, CliError> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
    config.environment.validate()?;
    let digest = Sha256::digest(text.as_bytes());
    let hash = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(LoadedConfig { config, hash })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvConfig,
    pub scan: Option<ScanConfig>,
    pub monotone: Option<MonotoneConfig>,
    pub coupling: Option<CouplingConfig>,
    pub classify: Option<ClassifyConfig>,
    pub sigma: Option<SigmaConfig>,
}

impl ExperimentConfig {
    pub fn section<'a, T>(&'a self, value: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("missing [{name}] section")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvConfig {
    Homogeneous {
        p: f64,
    },
    Periodic {
        alpha: f64,
        beta: f64,
    },
    /// `law` in the text form of [`DistSpec`], e.g. `twopoint(a=0.3,b=0.7,r=0.5)`.
    Iid {
        law: String,
    },
    Explicit {
        lo: i64,
        probs: Vec<f64>,
    },
}

impl EnvConfig {
    fn validate(&self) -> Result<(), CliError> {
        match self {
            EnvConfig::Homogeneous { p } => Environment::homogeneous(*p, 0, 0).map(drop)?,
            EnvConfig::Periodic { alpha, beta } => {
                Environment::periodic(*alpha, *beta, 0, 1).map(drop)?
            }
            EnvConfig::Iid { law } => law.parse::<DistSpec>().map(drop)?,
            EnvConfig::Explicit { lo, probs } => {
                Environment::new(*lo, probs.clone(), exclusion_core::Source::Deterministic)
                    .map(drop)?
            }
        }
        Ok(())
    }

    pub fn is_random(&self) -> bool {
        matches!(self, EnvConfig::Iid { .. })
    }

    pub fn law(&self) -> Option<DistSpec> {
        match self {
            EnvConfig::Iid { law } => law.parse().ok(),
            _ => None,
        }
    }

    /// The environment on `[lo, hi]`; `seed` matters only for i.i.d. laws.
    pub fn build(&self, seed: u64, lo: i64, hi: i64) -> Result<Environment, CliError> {
        Ok(match self {
            EnvConfig::Homogeneous { p } => Environment::homogeneous(*p, lo, hi)?,
            EnvConfig::Periodic { alpha, beta } => Environment::periodic(*alpha, *beta, lo, hi)?,
            EnvConfig::Iid { law } => Environment::iid(law.parse()?, seed, lo, hi)?,
            EnvConfig::Explicit { lo: base, probs } => {
                Environment::new(*base, probs.clone(), exclusion_core::Source::Deterministic)?
                    .restrict(lo, hi)?
            }
        })
    }
}

/// Either an explicit list or a count `n` meaning `0..n`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::List(vec![0])
    }
}

impl Seeds {
    pub fn list(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }

    /// Deterministic environments ignore the seed, so only the first is used.
    pub fn for_env(&self, env: &EnvConfig) -> Result<Vec<u64>, CliError> {
        let list = self.list();
        if list.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        Ok(if env.is_random() { list } else { vec![list[0]] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Mc,
    Both,
}

impl Mode {
    pub fn exact(self) -> bool {
        matches!(self, Mode::Exact | Mode::Both)
    }

    pub fn mc(self) -> bool {
        matches!(self, Mode::Mc | Mode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    #[default]
    Driven,
    Closed,
}

fn default_horizon() -> f64 {
    1e4
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub sizes: Vec<usize>,
    pub mode: Mode,
    #[serde(default)]
    pub boundary: BoundaryKind,
    /// Particles of a closed chain; half the sites, rounded down, by default.
    pub particles: Option<usize>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl ScanConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<(), CliError> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(CliError::Config(
                "sizes must be a nonempty list of positive lengths".into(),
            ));
        }
        if self.mode.exact() {
            if let Some(&l) = self.sizes.iter().find(|&&l| l > self.max_len) {
                return Err(CliError::Config(format!(
                    "size {l} exceeds max_len {} for exact mode",
                    self.max_len
                )));
            }
        }
        if (env.is_random() || self.mode.mc()) && self.seeds.list().is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        Ok(())
    }
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotoneConfig {
    pub size: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Sites to perturb; all of `[m-1, n]` by default.
    pub sites: Option<Vec<i64>>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_shift() -> f64 {
    0.1
}

fn default_coupling_horizon() -> f64 {
    1e3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TableChoice {
    #[default]
    Basic,
    SwappedResidual,
}

impl From<TableChoice> for CouplingTable {
    fn from(t: TableChoice) -> Self {
        match t {
            TableChoice::Basic => CouplingTable::Basic,
            TableChoice::SwappedResidual => CouplingTable::SwappedResidual,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub size: usize,
    /// The upper environment is the lower one raised by `shift` at every site.
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_coupling_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub table: TableChoice,
}

fn default_threshold() -> f64 {
    exclusion_core::env::DEFAULT_TAIL_THRESHOLD
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub lo: i64,
    pub hi: i64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub seeds: Seeds,
}

fn default_sigma_base() -> f64 {
    1.0
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaConfig {
    pub lo: i64,
    pub hi: i64,
    /// Fixed flux; when absent a positive solution is searched for.
    pub phi: Option<f64>,
    #[serde(default = "default_sigma_base")]
    pub sigma_base: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seeds: Seeds,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scan_config() {
        let text = r#"
name = "drift"
[environment]
kind = "homogeneous"
p = 0.55
[scan]
sizes = [4, 6]
mode = "exact"
"#;
        let c = parse(text).unwrap();
        assert_eq!(c.hash.len(), 64);
        let scan = c.config.scan.as_ref().unwrap();
        assert_eq!(scan.boundary, BoundaryKind::Driven);
        assert_eq!(scan.max_len, 16);
        scan.validate(&c.config.environment).unwrap();
    }

    #[test]
    fn seeds_accept_count_or_list() {
        let text = r#"
name = "x"
[environment]
kind = "iid"
law = "twopoint(a=0.3,b=0.7,r=0.5)"
[classify]
lo = -20
hi = 20
seeds = 3
[sigma]
lo = -40
hi = 40
seeds = [4, 9]
"#;
        let c = parse(text).unwrap().config;
        let env = &c.environment;
        assert_eq!(
            c.classify.unwrap().seeds.for_env(env).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(c.sigma.unwrap().seeds.for_env(env).unwrap(), vec![4, 9]);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_p = "name = \"x\"\n[environment]\nkind = \"homogeneous\"\np = 1.5\n";
        assert!(matches!(parse(bad_p), Err(CliError::Env(_))));
        let unknown = "name = \"x\"\nwhat = 1\n[environment]\nkind = \"homogeneous\"\np = 0.5\n";
        assert!(matches!(parse(unknown), Err(CliError::Config(_))));
        let too_long = r#"
name = "x"
[environment]
kind = "homogeneous"
p = 0.5
[scan]
sizes = [20]
mode = "both"
"#;
        let c = parse(too_long).unwrap().config;
        assert!(c.scan.unwrap().validate(&c.environment).is_err());
    }

    #[test]
    fn hash_tracks_text() {
        let a = "name = \"x\"\n[environment]\nkind = \"homogeneous\"\np = 0.5\n";
        let b = "name = \"y\"\n[environment]\nkind = \"homogeneous\"\np = 0.5\n";
        assert_ne!(parse(a).unwrap().hash, parse(b).unwrap().hash);
        assert_eq!(parse(a).unwrap().hash, parse(a).unwrap().hash);
    }
}
