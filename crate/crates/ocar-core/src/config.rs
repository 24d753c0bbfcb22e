//! Experiment configuration: a flat `key = value` format with `[sections]`
//! chosen for diff-friendliness, with JSON accepted as an alternative, plus
//! the shipped presets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::strategies::LambdaMode;
use crate::streams::LinearStreamSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("[{section}] {field}: {message}")]
    Field {
        section: String,
        field: String,
        message: String,
    },
    #[error("unknown preset '{0}' (known: convex_appd, split_mnist5, rotation10, grid_fig2)")]
    UnknownPreset(String),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

/// Dataset selection for classification streams.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        side: usize,
        noise_std: f64,
    },
    Mnist {
        data_dir: Option<PathBuf>,
    },
    /// MNIST when the IDX files are reachable, blobs otherwise.
    Auto {
        data_dir: Option<PathBuf>,
        blobs: Box<DatasetConfig>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamConfig {
    Convex(LinearStreamSpec),
    ClassIncremental {
        dataset: DatasetConfig,
        n_tasks: usize,
        classes_per_task: usize,
    },
    Rotation {
        dataset: DatasetConfig,
        n_tasks: usize,
        max_angle_deg: f64,
    },
}

impl StreamConfig {
    pub fn is_regression(&self) -> bool {
        matches!(self, StreamConfig::Convex(_))
    }
}

/// Per-strategy settings resolved from `[strategy.<name>]` sections.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyConfig {
    Er {
        alpha: f64,
        inner_steps: usize,
    },
    Ocar {
        alpha: f64,
        delta_tau: f64,
        ema_coeff: f64,
        inner_steps: usize,
        lambda_mode: LambdaMode,
        n_mc: usize,
    },
    Ewc {
        alpha: f64,
        penalty: f64,
        ema_coeff: f64,
        inner_steps: usize,
    },
    Ngd {
        alpha: f64,
        damping: f64,
        ema_coeff: f64,
        dense: bool,
        inner_steps: usize,
    },
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Er { .. } => "er",
            StrategyConfig::Ocar { .. } => "ocar",
            StrategyConfig::Ewc { .. } => "ewc",
            StrategyConfig::Ngd { .. } => "ngd",
        }
    }
}

/// Grid-search axes: learning rates and α/τ ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub ratios: Vec<f64>,
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub stream_seed: u64,
    pub buffer_capacity: usize,
    /// Evaluation cadence in batches; 0 disables continual evaluation.
    pub eval_every: usize,
    pub new_batch_size: usize,
    pub buffer_batch_size: usize,
    pub track_full_history: bool,
    pub trajectory: bool,
    pub snapshot_every: usize,
    pub probe: bool,
    pub hidden: Vec<usize>,
    pub stream: StreamConfig,
    pub strategies: Vec<StrategyConfig>,
    pub grid: Option<GridSpec>,
    /// The exact text the config was parsed from (copied into run dirs).
    pub source_text: String,
}

const PRESET_CONVEX: &str = include_str!("../../../presets/convex_appd.cfg");
const PRESET_SPLIT_MNIST5: &str = include_str!("../../../presets/split_mnist5.cfg");
const PRESET_ROTATION10: &str = include_str!("../../../presets/rotation10.cfg");
const PRESET_GRID_FIG2: &str = include_str!("../../../presets/grid_fig2.cfg");

/// Text of a shipped preset.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "convex_appd" => Some(PRESET_CONVEX),
        "split_mnist5" => Some(PRESET_SPLIT_MNIST5),
        "rotation10" => Some(PRESET_ROTATION10),
        "grid_fig2" => Some(PRESET_GRID_FIG2),
        _ => None,
    }
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

fn parse_sections(text: &str) -> Result<Sections, ConfigError> {
    let mut sections: Sections = BTreeMap::new();
    let mut current = String::from("");
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unterminated section header '{line}'"),
                });
            }
            current = line[1..line.len() - 1].trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(ConfigError::Parse {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            });
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        sections
            .entry(current.clone())
            .or_default()
            .insert(key, (line_no, value));
    }
    Ok(sections)
}

fn json_to_sections(text: &str) -> Result<Sections, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or(ConfigError::Parse {
        line: 1,
        message: "top-level JSON must be an object of sections".into(),
    })?;
    let mut sections: Sections = BTreeMap::new();
    for (section, body) in obj {
        let body = body.as_object().ok_or_else(|| ConfigError::Parse {
            line: 1,
            message: format!("section '{section}' must be an object"),
        })?;
        let entry = sections.entry(section.clone()).or_default();
        for (key, v) in body {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|x| match x {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            entry.insert(key.clone(), (0, s));
        }
    }
    Ok(sections)
}

struct Section<'a> {
    name: &'a str,
    body: Option<&'a BTreeMap<String, (usize, String)>>,
}

impl<'a> Section<'a> {
    fn field_err(&self, field: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Field {
            section: self.name.to_string(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.body.and_then(|b| b.get(key)).map(|(_, v)| v.as_str())
    }

    fn string(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.field_err(key, format!("cannot parse '{v}'"))),
        }
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Err(self.field_err(key, "missing required field")),
            Some(v) => v
                .parse()
                .map_err(|_| self.field_err(key, format!("cannot parse '{v}'"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse()
                        .map_err(|_| self.field_err(key, format!("cannot parse item '{item}'")))
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }
}

fn section<'a>(sections: &'a Sections, name: &'a str) -> Section<'a> {
    Section {
        name,
        body: sections.get(name),
    }
}

fn parse_dataset(s: &Section) -> Result<DatasetConfig, ConfigError> {
    let blobs = DatasetConfig::Blobs {
        classes: s.parse("blobs_classes", 10)?,
        per_class: s.parse("blobs_per_class", 600)?,
        side: s.parse("blobs_side", 8)?,
        noise_std: s.parse("blobs_noise", 0.8)?,
    };
    let data_dir = s.raw("data_dir").map(PathBuf::from);
    match s.string("dataset", "blobs").as_str() {
        "blobs" => Ok(blobs),
        "mnist" => Ok(DatasetConfig::Mnist { data_dir }),
        "auto" => Ok(DatasetConfig::Auto {
            data_dir,
            blobs: Box::new(blobs),
        }),
        other => Err(s.field_err("dataset", format!("unknown dataset '{other}'"))),
    }
}

fn parse_strategy(
    name: &str,
    s: &Section,
    stream: &StreamConfig,
) -> Result<StrategyConfig, ConfigError> {
    match name {
        "er" => Ok(StrategyConfig::Er {
            alpha: s.require("alpha")?,
            inner_steps: s.parse("inner_steps", 1)?,
        }),
        "ewc" => Ok(StrategyConfig::Ewc {
            alpha: s.require("alpha")?,
            penalty: s.parse("penalty", 1.0)?,
            ema_coeff: s.parse("ema_coeff", 0.05)?,
            inner_steps: s.parse("inner_steps", 1)?,
        }),
        "ngd" => Ok(StrategyConfig::Ngd {
            alpha: s.require("alpha")?,
            damping: s.parse("damping", 0.01)?,
            ema_coeff: s.parse("ema_coeff", 0.05)?,
            dense: match s.string("mode", if stream.is_regression() { "dense" } else { "kfac" }).as_str() {
                "dense" => true,
                "kfac" => false,
                other => return Err(s.field_err("mode", format!("unknown mode '{other}'"))),
            },
            inner_steps: s.parse("inner_steps", 1)?,
        }),
        "ocar" => {
            let delta_tau: f64 = s.parse("delta_tau", 0.0)?;
            let lambda_mode = match s.string("lambda_mode", "fixed").as_str() {
                "class_ratio" => LambdaMode::ClassRatio {
                    classes_per_task: match s.raw("classes_per_task") {
                        Some(_) => Some(s.require("classes_per_task")?),
                        None => match stream {
                            StreamConfig::ClassIncremental {
                                classes_per_task, ..
                            } => Some(*classes_per_task),
                            _ => None,
                        },
                    },
                },
                "time_growth" => LambdaMode::TimeGrowth {
                    // the growth rate defaults to Δτ
                    delta_lambda: s.parse("delta_lambda", delta_tau)?,
                },
                "fixed" => LambdaMode::Fixed(s.parse("lambda_fixed", 1.0)?),
                other => {
                    return Err(s.field_err("lambda_mode", format!("unknown mode '{other}'")))
                }
            };
            Ok(StrategyConfig::Ocar {
                alpha: s.require("alpha")?,
                delta_tau,
                ema_coeff: s.parse("ema_coeff", 0.05)?,
                inner_steps: s.parse("inner_steps", 1)?,
                lambda_mode,
                n_mc: s.parse("n_mc", 1)?,
            })
        }
        other => Err(ConfigError::Field {
            section: "experiment".into(),
            field: "strategies".into(),
            message: format!("unknown strategy '{other}'"),
        }),
    }
}

impl ExperimentConfig {
    /// Parse from text: the sectioned key=value format, or JSON when the
    /// first non-whitespace character is `{`.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let sections = if text.trim_start().starts_with('{') {
            json_to_sections(text)?
        } else {
            parse_sections(text)?
        };
        let exp = section(&sections, "experiment");
        let stream_sec = section(&sections, "stream");
        let model = section(&sections, "model");

        let stream = match stream_sec.string("kind", "convex").as_str() {
            "convex" => StreamConfig::Convex(LinearStreamSpec {
                tasks: stream_sec.parse("tasks", 10)?,
                samples_per_task: stream_sec.parse("samples_per_task", 1000)?,
                eval_per_task: stream_sec.parse("eval_per_task", 200)?,
                input_dim: stream_sec.parse("input_dim", 10)?,
                noise_std: stream_sec.parse("noise_std", 0.1)?,
            }),
            "class_incremental" => StreamConfig::ClassIncremental {
                dataset: parse_dataset(&stream_sec)?,
                n_tasks: stream_sec.require("n_tasks")?,
                classes_per_task: stream_sec.require("classes_per_task")?,
            },
            "rotation" => StreamConfig::Rotation {
                dataset: parse_dataset(&stream_sec)?,
                n_tasks: stream_sec.require("n_tasks")?,
                max_angle_deg: stream_sec.parse("max_angle", 180.0)?,
            },
            other => {
                return Err(stream_sec.field_err("kind", format!("unknown stream kind '{other}'")))
            }
        };

        let strategy_names: Vec<String> = exp
            .list("strategies")?
            .ok_or_else(|| exp.field_err("strategies", "missing required field"))?;
        if strategy_names.is_empty() {
            return Err(exp.field_err("strategies", "at least one strategy required"));
        }
        let strategies = strategy_names
            .iter()
            .map(|n| parse_strategy(n, &section(&sections, &format!("strategy.{n}")), &stream))
            .collect::<Result<Vec<_>, _>>()?;

        let seeds: Vec<u64> = exp
            .list("seeds")?
            .ok_or_else(|| exp.field_err("seeds", "missing required field"))?;
        if seeds.is_empty() {
            return Err(exp.field_err("seeds", "seeds list cannot be empty"));
        }

        let grid_sec = section(&sections, "grid");
        let grid = match (grid_sec.list::<f64>("alphas")?, grid_sec.list::<f64>("ratios")?) {
            (Some(alphas), Some(ratios)) => Some(GridSpec { alphas, ratios }),
            (None, None) => None,
            _ => {
                return Err(grid_sec.field_err(
                    "alphas",
                    "grid needs both alphas and ratios (or neither)",
                ))
            }
        };

        Ok(ExperimentConfig {
            name: exp.string("name", "experiment"),
            seeds,
            stream_seed: exp.parse("stream_seed", 1234)?,
            buffer_capacity: exp.parse("buffer_capacity", 100)?,
            eval_every: exp.parse("eval_every", 10)?,
            new_batch_size: exp.parse("new_batch_size", 10)?,
            buffer_batch_size: exp.parse("buffer_batch_size", 10)?,
            track_full_history: exp.parse("track_full_history", false)?,
            trajectory: exp.parse("trajectory", false)?,
            snapshot_every: exp.parse("snapshot_every", 10)?,
            probe: exp.parse("probe", false)?,
            hidden: model.list("hidden")?.unwrap_or_default(),
            stream,
            strategies,
            grid,
            source_text: text.to_string(),
        })
    }

    /// Load from a file path, or from a shipped preset when `path` names one
    /// and no such file exists.
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        let p = Path::new(path);
        if p.exists() {
            let text = std::fs::read_to_string(p)?;
            return Self::from_text(&text);
        }
        match preset(path) {
            Some(text) => Self::from_text(text),
            None => {
                if path.contains('.') || path.contains('/') {
                    Err(ConfigError::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("config file '{path}' not found"),
                    )))
                } else {
                    Err(ConfigError::UnknownPreset(path.to_string()))
                }
            }
        }
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategyConfig> {
        self.strategies.iter().find(|s| s.name() == name)
    }
}
