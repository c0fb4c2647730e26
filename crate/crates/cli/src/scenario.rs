//! Scenario files: TOML or JSON, chosen by extension.

use std::path::Path;

use lowrank_tp::{ModelConfig, PlanOptions, RunShape, Strategy, Variant};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, Result};

pub const DEFAULT_EXEC_CAP: usize = 256;
pub const ELEMENT_BYTES: [usize; 4] = [1, 2, 4, 8];

/// Test hooks that break a run on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Adds an unplanned block-tagged all-gather to every block.
    CorruptPlan,
    /// Feeds the simulator a slightly different input than the oracle.
    PerturbInput,
}

fn variant_flag<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Variant, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

fn variant_flag_out<S: Serializer>(v: &Variant, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Variant::FullRank => s.serialize_str("none"),
        v => s.serialize_str(&v.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(
        default = "full_rank",
        alias = "lowrank_architecture_type",
        deserialize_with = "variant_flag",
        serialize_with = "variant_flag_out"
    )]
    pub lowrank_architecture_type: Variant,
    #[serde(default, alias = "enable_btp")]
    pub enable_btp: bool,
    #[serde(default, alias = "enable_online_rmsnorm")]
    pub enable_online_rmsnorm: bool,
    #[serde(default, alias = "enable_grouping")]
    pub enable_grouping: bool,
    #[serde(default, alias = "enable_lowrank_ckpt")]
    pub enable_lowrank_ckpt: bool,
    #[serde(default = "default_shape")]
    pub shape: RunShape,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bytes", alias = "element_bytes")]
    pub element_bytes: usize,
    #[serde(default, alias = "exec_cap")]
    pub exec_cap: Option<usize>,
    #[serde(default, alias = "inject_fault")]
    pub inject_fault: Option<Fault>,
}

fn full_rank() -> Variant {
    Variant::FullRank
}

fn default_shape() -> RunShape {
    RunShape::new(2, 8, 2)
}

fn default_bytes() -> usize {
    2
}

/// The five toggles as they appear in the report metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Flags {
    #[serde(serialize_with = "variant_flag_out", deserialize_with = "variant_flag")]
    pub lowrank_architecture_type: Variant,
    pub enable_btp: bool,
    pub enable_online_rmsnorm: bool,
    pub enable_grouping: bool,
    pub enable_lowrank_ckpt: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub element_bytes: Option<usize>,
    pub exec_cap: Option<usize>,
    pub lowrank_architecture_type: Option<Variant>,
    pub enable_btp: Option<bool>,
    pub enable_online_rmsnorm: Option<bool>,
    pub enable_grouping: Option<bool>,
    pub enable_lowrank_ckpt: Option<bool>,
}

/// A scenario with every choice made.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub name: String,
    pub preset: Option<String>,
    pub cfg: ModelConfig,
    pub shape: RunShape,
    pub variant: Variant,
    pub strategy: Strategy,
    pub options: PlanOptions,
    pub flags: Flags,
    pub seed: u64,
    pub element_bytes: usize,
    pub exec_cap: usize,
    pub fault: Option<Fault>,
    pub warnings: Vec<String>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of the first occurrence of `key` as a TOML key or JSON member.
fn key_line(text: &str, key: &str) -> usize {
    let snake = key.replace('-', "_");
    text.lines()
        .position(|l| {
            let l = l.trim_start().trim_start_matches('"');
            [key, snake.as_str()].iter().any(|k| {
                l.strip_prefix(k)
                    .is_some_and(|rest| rest.trim_start().starts_with(['=', '"', ':']))
            })
        })
        .map_or(1, |i| i + 1)
}

impl Scenario {
    pub fn parse(text: &str, origin: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| {
                CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
            })
        } else {
            toml::from_str(text).map_err(|e| {
                let (line, col) = e.span().map_or((1, 1), |s| line_col(text, s.start));
                CliError::Config(format!("{origin}:{line}:{col}: {}", e.message().trim_end()))
            })
        }
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Ok((Self::parse(&text, &path.display().to_string(), json)?, text))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.element_bytes {
            self.element_bytes = v;
        }
        if let Some(v) = o.exec_cap {
            self.exec_cap = Some(v);
        }
        if let Some(v) = o.lowrank_architecture_type {
            self.lowrank_architecture_type = v;
        }
        for (dst, src) in [
            (&mut self.enable_btp, o.enable_btp),
            (&mut self.enable_online_rmsnorm, o.enable_online_rmsnorm),
            (&mut self.enable_grouping, o.enable_grouping),
            (&mut self.enable_lowrank_ckpt, o.enable_lowrank_ckpt),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
    }

    pub fn flags(&self) -> Flags {
        Flags {
            lowrank_architecture_type: self.lowrank_architecture_type,
            enable_btp: self.enable_btp,
            enable_online_rmsnorm: self.enable_online_rmsnorm,
            enable_grouping: self.enable_grouping,
            enable_lowrank_ckpt: self.enable_lowrank_ckpt,
        }
    }

    /// Settle model, strategy and options. `text` is the source file, used
    /// to anchor messages about semantically invalid entries.
    pub fn resolve(&self, name: &str, origin: &str, text: &str) -> Result<Resolved> {
        let at = |key: &str, msg: String| CliError::Config(format!("{origin}:{}: {msg}", key_line(text, key)));
        let cfg = match (&self.preset, &self.model) {
            (Some(_), Some(_)) => return Err(at("model", "give either preset or model, not both".into())),
            (None, None) => return Err(at("name", "missing preset or model".into())),
            (Some(p), None) => ModelConfig::preset(p).map_err(|e| at("preset", e.to_string()))?,
            (None, Some(m)) => {
                m.validate().map_err(|e| at("model", e.to_string()))?;
                *m
            }
        };
        if !ELEMENT_BYTES.contains(&self.element_bytes) {
            return Err(at(
                "element-bytes",
                format!("element-bytes must be one of 1, 2, 4, 8, got {}", self.element_bytes),
            ));
        }
        let s = &self.shape;
        if s.b == 0 || s.s == 0 || s.tp == 0 || s.p == 0 {
            return Err(at("shape", "shape entries must be positive".into()));
        }
        let variant = self.lowrank_architecture_type;
        let mut warnings = Vec::new();
        let strategy = match self.strategy {
            Some(st) => {
                if self.enable_btp && st != Strategy::Btp {
                    warnings.push(format!("enable-btp ignored: strategy {st} was set explicitly"));
                }
                st
            }
            None if !variant.is_low_rank() => {
                if self.enable_btp {
                    warnings.push("enable-btp needs a low-rank architecture; falling back to full-rank TP".into());
                }
                Strategy::FullRankTp
            }
            None if self.enable_btp => Strategy::Btp,
            None => Strategy::VanillaTp,
        };
        Ok(Resolved {
            name: self.name.clone().unwrap_or_else(|| name.to_string()),
            preset: self.preset.clone(),
            cfg,
            shape: self.shape,
            variant,
            strategy,
            options: PlanOptions {
                grouping: self.enable_grouping,
                online_norm: self.enable_online_rmsnorm,
                lowrank_ckpt: self.enable_lowrank_ckpt,
            },
            flags: self.flags(),
            seed: self.seed,
            element_bytes: self.element_bytes,
            exec_cap: self.exec_cap.unwrap_or(DEFAULT_EXEC_CAP),
            fault: self.inject_fault,
            warnings,
        })
    }
}

/// Read, override and resolve one scenario file.
pub fn load_resolved(path: &Path, overrides: &Overrides) -> Result<Resolved> {
    let (mut sc, text) = Scenario::load(path)?;
    sc.apply(overrides);
    let stem = path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    sc.resolve(&stem, &path.display().to_string(), &text)
}
