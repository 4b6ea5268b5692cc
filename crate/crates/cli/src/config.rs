use std::path::{Path, PathBuf};

use bundleflow::baselines::{PriceTrainConfig, RochetNetConfig};
use bundleflow::flow::{FieldArchitecture, FlowConfig};
use bundleflow::menu::MenuTrainConfig;
use bundleflow::stage1::{GaussianMixture, Stage1Config};
use bundleflow::valuations::{AuctionConfig, PriceDistribution, SyntheticSpec};
use bundleflow::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub auction: AuctionSection,
    pub data: DataSection,
    pub stage1: Stage1Section,
    pub flow: FlowConfig,
    pub menu: MenuTrainConfig,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
    pub checkpoints: CheckpointSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "desk".into(),
            auction: AuctionSection::default(),
            data: DataSection::default(),
            stage1: Stage1Section::default(),
            flow: FlowConfig::default(),
            menu: MenuTrainConfig::default(),
            baseline: BaselineSection::default(),
            eval: EvalSection::default(),
            checkpoints: CheckpointSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuctionSection {
    pub m: usize,
    pub v_max: f64,
    pub distribution: String,
    pub max_atoms: usize,
    pub inclusion_prob: f64,
}

impl Default for AuctionSection {
    fn default() -> Self {
        Self {
            m: 5,
            v_max: 1000.0,
            distribution: "uniform".into(),
            max_atoms: 5,
            inclusion_prob: SyntheticSpec::DEFAULT_INCLUSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub samples: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// CATS files to import instead of generating synthetic data.
    pub cats: Vec<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples: 6000,
            train_fraction: 0.95,
            seed: 1,
            cats: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub components: usize,
    pub sigma: f64,
    pub sigma_z: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub coverage_probes: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            components: Stage1Config::DEFAULT_COMPONENTS,
            sigma: Stage1Config::DEFAULT_SIGMA,
            sigma_z: Stage1Config::DEFAULT_SIGMA_Z,
            batch_size: 256,
            iterations: 10_000,
            lr: Stage1Config::DEFAULT_LR,
            seed: 0,
            coverage_probes: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Allocations in Big/Small menus, excluding the null element.
    pub k: usize,
    pub seed: u64,
    pub price: PriceTrainConfig,
    pub rochetnet: RochetNetConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            k: 63,
            seed: 0,
            price: PriceTrainConfig::default(),
            rochetnet: RochetNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub probes: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            probes: 10_000,
            seed: 0,
        }
    }
}

/// Iterations between checkpoint writes during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSection {
    pub flow_every: usize,
    pub menu_every: usize,
}

impl Default for CheckpointSection {
    fn default() -> Self {
        Self {
            flow_every: 1000,
            menu_every: 100,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if given), then applies `key.path=value` overrides whose
    /// values are parsed as TOML.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Parse {
                    line: toml_line(&text, e.span()),
                    message: format!("{}: {}", p.display(), e.message()),
                })?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(error_field(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.auction.m == 0 {
            return Err(Error::config("auction.m", "must be at least 1"));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config("run_id", "must be a non-empty plain name"));
        }
        self.distribution()?;
        AuctionConfig::new(self.auction.m, self.auction.v_max)
            .map_err(|e| Error::config("auction.v_max", e.to_string()))?;
        self.flow.validate()?;
        self.menu.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::config("data.train_fraction", "must lie in (0, 1)"));
        }
        if self.stage1.components == 0 || !(self.stage1.sigma > 0.0) {
            return Err(Error::config("stage1.components", "mixture needs a component and positive sigma"));
        }
        self.stage1_config().validate()?;
        if self.checkpoints.flow_every == 0 || self.checkpoints.menu_every == 0 {
            return Err(Error::config("checkpoints", "intervals must be at least 1"));
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<PriceDistribution, Error> {
        self.auction
            .distribution
            .parse()
            .map_err(|e: Error| match e {
                Error::Config { message, .. } => Error::config("auction.distribution", message),
                other => other,
            })
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, Error> {
        let mut spec = SyntheticSpec::new(
            AuctionConfig::new(self.auction.m, self.auction.v_max)?,
            self.distribution()?,
            self.auction.max_atoms,
        );
        spec.inclusion_prob = self.auction.inclusion_prob;
        Ok(spec)
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let s = &self.stage1;
        Stage1Config {
            mixture: GaussianMixture::spread(self.auction.m, s.components, s.sigma, s.seed),
            sigma_z: s.sigma_z,
            batch_size: s.batch_size,
            iterations: s.iterations,
            lr: s.lr,
            seed: s.seed,
        }
    }

    pub fn architecture(&self) -> FieldArchitecture {
        FieldArchitecture::standard(self.auction.m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn toml_line(text: &str, span: Option<std::ops::Range<usize>>) -> usize {
    span.map(|s| text[..s.start.min(text.len())].lines().count().max(1))
        .unwrap_or(0)
}

fn error_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "config".into()
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<(), Error> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(ov, "override must look like key.path=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
