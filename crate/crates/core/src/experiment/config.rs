use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::RiskLevel;
use crate::error::{Error, Result};
use crate::information::TuningParams;
use crate::kernels::KernelKind;
use crate::synthetic::{BaseRegressor, Synth1DParams};

/// Where the sample pool comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The 1D heteroscedastic generator, drawn once per run with the run seed.
    Synthetic {
        #[serde(default)]
        params: Synth1DParams,
    },
    /// A labelled CSV pool. When it carries a `pred` column the base
    /// regressor is bypassed and those predictions are used as-is.
    Csv { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            params: Synth1DParams::default(),
        }
    }
}

/// One conformal method run by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Split,
    #[serde(rename = "madsplit")]
    MadSplit,
    Jkplus,
    JkplusTuned,
}

impl MethodChoice {
    pub const ALL: [MethodChoice; 4] = [
        MethodChoice::Split,
        MethodChoice::MadSplit,
        MethodChoice::Jkplus,
        MethodChoice::JkplusTuned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodChoice::Split => "split",
            MethodChoice::MadSplit => "madsplit",
            MethodChoice::Jkplus => "jkplus",
            MethodChoice::JkplusTuned => "jkplus_tuned",
        }
    }
}

impl fmt::Display for MethodChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodChoice::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(
                    "method",
                    format!("`{s}` is not one of split, madsplit, jkplus, jkplus_tuned"),
                )
            })
    }
}

/// Kernel used by `jkplus` and `madsplit`: a fixed kernel or `tuned`.
///
/// Serialized as the CLI string form: `knn:<k>`, `rbf:<scale>` or `tuned`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelChoice {
    Fixed(KernelKind),
    Tuned,
}

impl fmt::Display for KernelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelChoice::Fixed(k) => k.fmt(f),
            KernelChoice::Tuned => f.write_str("tuned"),
        }
    }
}

impl FromStr for KernelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "tuned" {
            Ok(KernelChoice::Tuned)
        } else {
            s.parse().map(KernelChoice::Fixed)
        }
    }
}

impl TryFrom<String> for KernelChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KernelChoice> for String {
    fn from(k: KernelChoice) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_cal: 2000,
            n_test: 10000,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.n_train + self.n_cal + self.n_test
    }
}

fn default_methods() -> Vec<MethodChoice> {
    vec![MethodChoice::Split, MethodChoice::MadSplit, MethodChoice::Jkplus]
}

fn default_kernel() -> KernelChoice {
    KernelChoice::Fixed(KernelKind::Knn { k: 10 })
}

fn default_alpha() -> f64 {
    0.05
}

fn default_reps() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("bench_out")
}

/// Full description of a benchmark run.
///
/// `out_dir` is not serialized so that the configuration echoed into the
/// report does not depend on where the report is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default)]
    pub base_regressor: BaseRegressor,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodChoice>,
    #[serde(default = "default_kernel")]
    pub kernel: KernelChoice,
    #[serde(default)]
    pub tuning: TuningParams,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub sizes: SplitSizes,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Extra calibration sizes evaluated for metric-vs-N_cal curves.
    #[serde(default)]
    pub n_cal_sweep: Vec<usize>,
    /// Also write each repetition's train/calibration/test rows with
    /// predictions as CSV.
    #[serde(default)]
    pub write_splits: bool,
    #[serde(default = "default_out", skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            base_regressor: BaseRegressor::default(),
            methods: default_methods(),
            kernel: default_kernel(),
            tuning: TuningParams::default(),
            alpha: default_alpha(),
            sizes: SplitSizes::default(),
            n_reps: default_reps(),
            seed: 0,
            n_cal_sweep: Vec::new(),
            write_splits: false,
            out_dir: default_out(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn risk_level(&self) -> Result<RiskLevel> {
        RiskLevel::new(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("methods", "at least one method is required"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::invalid("methods", "methods must not repeat"));
        }
        if self.n_reps == 0 {
            return Err(Error::invalid("n_reps", "must be at least 1"));
        }
        self.risk_level()?;
        match self.kernel {
            KernelChoice::Fixed(k) => k.validate()?,
            KernelChoice::Tuned if self.methods.contains(&MethodChoice::MadSplit) => {
                return Err(Error::invalid("kernel", "madsplit needs a fixed kernel, not `tuned`"));
            }
            KernelChoice::Tuned => {}
        }
        self.tuning.validate()?;
        if let DataSource::Synthetic { params } = &self.source {
            params.validate()?;
        }
        for &n_cal in std::iter::once(&self.sizes.n_cal).chain(&self.n_cal_sweep) {
            if n_cal == 0 {
                return Err(Error::invalid("n_cal", "must be at least 1"));
            }
        }
        if self.sizes.n_train == 0 {
            return Err(Error::invalid("n_train", "must be at least 1"));
        }
        if self.sizes.n_test == 0 {
            return Err(Error::invalid("n_test", "must be at least 1"));
        }
        Ok(())
    }

    /// Calibration sizes in evaluation order: the main size, then the sweep
    /// (sorted, without repeats of the main size).
    pub fn n_cal_values(&self) -> Vec<usize> {
        let mut sweep: Vec<usize> = self
            .n_cal_sweep
            .iter()
            .copied()
            .filter(|&n| n != self.sizes.n_cal)
            .collect();
        sweep.sort_unstable();
        sweep.dedup();
        std::iter::once(self.sizes.n_cal).chain(sweep).collect()
    }
}
