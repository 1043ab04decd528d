//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers, every key also reachable from a command-line flag.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ijack_core::{GlmKind, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// CSV file with header `x1..xP,y`.
    Csv { path: String, bias: bool },
    /// Seeded synthetic draw.
    Synthetic { n: usize, p: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyConfig {
    /// All (or `limit`-sampled) weight vectors with exactly `k` zeros.
    LeaveKOut { k: usize, limit: Option<usize> },
    Bootstrap { b: usize },
    Adversarial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: GlmKind,
    pub data: DataSource,
    pub family: FamilyConfig,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub dense_cutoff: usize,
    /// Certificate ball radius; 0 selects the automatic rule.
    pub domain_radius: f64,
    pub domain_samples: usize,
    pub seed: u64,
    pub reps: usize,
    /// Size of the fresh synthetic test split; 0 disables it.
    pub test_n: usize,
    /// Worker threads; 0 keeps the environment/default pool.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let solver = SolverOptions::default();
        ExperimentConfig {
            model: GlmKind::Logistic,
            data: DataSource::Synthetic { n: 500, p: 5 },
            family: FamilyConfig::LeaveKOut { k: 1, limit: None },
            grad_tol: solver.grad_tol,
            max_iter: solver.max_iter,
            dense_cutoff: solver.dense_cutoff,
            domain_radius: 0.0,
            domain_samples: 64,
            seed: 0,
            reps: 1,
            test_n: 0,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
            dense_cutoff: self.dense_cutoff,
            ..SolverOptions::default()
        }
    }

    /// Apply `section.key` pairs parsed from a config file. Variant-selecting
    /// keys (`data.source`, `family.kind`) go first so the remaining keys land
    /// on the right variant regardless of file order.
    pub fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        let selector = |k: &str| k == "data.source" || k == "family.kind";
        let passes = map
            .iter()
            .filter(|(k, _)| selector(k))
            .chain(map.iter().filter(|(k, _)| !selector(k)));
        for (key, value) in passes {
            self.apply_key(key, value)
                .with_context(|| format!("config key {key:?}"))?;
        }
        Ok(())
    }

    fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.kind" => self.model = GlmKind::parse(value)?,
            "data.source" => match value {
                "csv" => {
                    let bias = matches!(&self.data, DataSource::Csv { bias: true, .. });
                    if !matches!(self.data, DataSource::Csv { .. }) {
                        self.data = DataSource::Csv {
                            path: String::new(),
                            bias,
                        };
                    }
                }
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic { .. }) {
                        self.data = DataSource::Synthetic { n: 500, p: 5 };
                    }
                }
                other => bail!("unknown data source {other:?}"),
            },
            "data.path" => {
                self.data = DataSource::Csv {
                    path: value.to_string(),
                    bias: matches!(&self.data, DataSource::Csv { bias: true, .. }),
                }
            }
            "data.bias" => {
                if let DataSource::Csv { bias, .. } = &mut self.data {
                    *bias = parse_bool(value)?;
                }
            }
            "data.n" => {
                if let DataSource::Synthetic { n, .. } = &mut self.data {
                    *n = value.parse()?;
                }
            }
            "data.p" => {
                if let DataSource::Synthetic { p, .. } = &mut self.data {
                    *p = value.parse()?;
                }
            }
            "data.test_n" => self.test_n = value.parse()?,
            "family.kind" => match value {
                "leave_k_out" => {
                    if !matches!(self.family, FamilyConfig::LeaveKOut { .. }) {
                        self.family = FamilyConfig::LeaveKOut { k: 1, limit: None };
                    }
                }
                "bootstrap" => {
                    if !matches!(self.family, FamilyConfig::Bootstrap { .. }) {
                        self.family = FamilyConfig::Bootstrap { b: 100 };
                    }
                }
                "adversarial" => self.family = FamilyConfig::Adversarial,
                other => bail!("unknown family kind {other:?}"),
            },
            "family.k" => {
                if let FamilyConfig::LeaveKOut { k, .. } = &mut self.family {
                    *k = value.parse()?;
                }
            }
            "family.limit" => {
                if let FamilyConfig::LeaveKOut { limit, .. } = &mut self.family {
                    let v: usize = value.parse()?;
                    *limit = (v > 0).then_some(v);
                }
            }
            "family.b" => {
                if let FamilyConfig::Bootstrap { b } = &mut self.family {
                    *b = value.parse()?;
                }
            }
            "solver.grad_tol" => self.grad_tol = value.parse()?,
            "solver.max_iter" => self.max_iter = value.parse()?,
            "solver.dense_cutoff" => self.dense_cutoff = value.parse()?,
            "domain.radius" => self.domain_radius = value.parse()?,
            "domain.samples" => self.domain_samples = value.parse()?,
            "run.seed" => self.seed = value.parse()?,
            "run.reps" => self.reps = value.parse()?,
            "run.threads" => self.threads = value.parse()?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("expected a boolean, got {other:?}"),
    }
}

/// Parse the `[section]` / `key = value` format into `section.key` pairs.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected 'key = value'", lineno + 1))?;
        let key = key.trim();
        if key.is_empty() || section.is_empty() {
            bail!("line {}: key outside a [section]", lineno + 1);
        }
        out.insert(format!("{section}.{key}"), value.trim().to_string());
    }
    Ok(out)
}

pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    parse_config_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_overrides() {
        let text = "
# top comment
[model]
kind = poisson

[data]
source = synthetic
n = 42    # trailing comment
p = 3

[run]
seed = 9
";
        let map = parse_config_text(text).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.apply_map(&map).unwrap();
        assert_eq!(cfg.model, GlmKind::Poisson);
        assert_eq!(cfg.data, DataSource::Synthetic { n: 42, p: 3 });
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn csv_source_with_bias() {
        let map = parse_config_text(
            "[data]\nsource = csv\npath = d.csv\nbias = true\n",
        )
        .unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.apply_map(&map).unwrap();
        assert_eq!(
            cfg.data,
            DataSource::Csv {
                path: "d.csv".into(),
                bias: true
            }
        );
    }

    #[test]
    fn unknown_key_is_an_error() {
        let map = parse_config_text("[run]\nbogus = 1\n").unwrap();
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_map(&map).is_err());
    }

    #[test]
    fn keyless_line_is_an_error() {
        assert!(parse_config_text("[run]\nnot a pair\n").is_err());
        assert!(parse_config_text("seed = 1\n").is_err());
    }
}
