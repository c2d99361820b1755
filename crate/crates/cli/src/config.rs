use crate::error::{CliError, Result};
use crate::fsio;
use attnscope::heatmap::{default_mag_bins, MagBin};
use attnscope::models::AblationMode;
use attnscope::training::ClassWeights;
use attnscope::util::fnv1a;
use attnscope::{CohortFilter, HyperParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Attention,
    Expertise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSpec {
    /// Magnification levels to train, one model each.
    pub levels: Vec<String>,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        AttentionSpec {
            levels: ["2x", "4x", "10x", "20x"].map(String::from).to_vec(),
            layers: 12,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertiseSpec {
    /// Feature level the classifier reads.
    pub level: String,
    /// 3 for resident/general/specialist, 2 for non-specialist/specialist.
    pub n_classes: usize,
    pub channels: usize,
    pub modes: Vec<AblationMode>,
    pub class_weights: ClassWeights,
}

impl Default for ExpertiseSpec {
    fn default() -> Self {
        ExpertiseSpec {
            level: "20x".into(),
            n_classes: 3,
            channels: 16,
            modes: vec![
                AblationMode::TemporalOnly,
                AblationMode::MagnificationOnly,
                AblationMode::Both,
            ],
            class_weights: ClassWeights::Auto,
        }
    }
}

/// Experiment definition for `train`. Paths are relative to the config
/// file's directory. `hyper.seed` is replaced by `seed + fold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub sessions: PathBuf,
    pub features: PathBuf,
    /// ROI masks (`<wsi>.atnt`); attention folds are also scored against them.
    pub masks: Option<PathBuf>,
    /// Used when `--out` is not given.
    pub output: Option<PathBuf>,
    /// Magnification bins and their grids; defaults to 2x/4x/10x/20x.
    pub bins: Vec<MagBin>,
    /// Readers whose maps form the attention targets.
    pub filter: CohortFilter,
    pub k: usize,
    pub seed: u64,
    pub hyper: HyperParams,
    pub attention: AttentionSpec,
    pub expertise: ExpertiseSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Attention,
            sessions: "sessions".into(),
            features: "features".into(),
            masks: None,
            output: None,
            bins: default_mag_bins(),
            filter: CohortFilter::All,
            k: 5,
            seed: 0,
            hyper: HyperParams::default(),
            attention: AttentionSpec::default(),
            expertise: ExpertiseSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads the config, applies the seed override and resolves data paths.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let mut c: ExperimentConfig = fsio::read_json(path)?;
        if let Some(s) = seed {
            c.seed = s;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        c.sessions = base.join(&c.sessions);
        c.features = base.join(&c.features);
        c.masks = c.masks.map(|m| base.join(m));
        c.output = c.output.map(|o| base.join(o));
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [Some(&self.sessions), Some(&self.features), self.masks.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.is_dir() {
                return Err(CliError::data(format!("{}: directory not found", p.display())));
            }
        }
        if self.bins.is_empty() || self.bins.iter().any(|b| !(b.lo < b.hi) || b.grid.cells() == 0) {
            return Err(CliError::data(
                "bins must be non-empty with lo < hi and non-empty grids",
            ));
        }
        if self.k < 2 {
            return Err(CliError::data("k must be at least 2"));
        }
        if self.task == Task::Attention {
            if self.attention.levels.is_empty() {
                return Err(CliError::data("attention.levels must not be empty"));
            }
            if let Some(l) = self.attention.levels.iter().find(|l| self.bin(l).is_none()) {
                return Err(CliError::data(format!("attention level {l:?} has no bin")));
            }
        }
        if self.task == Task::Expertise {
            if !matches!(self.expertise.n_classes, 2 | 3) {
                return Err(CliError::data("expertise.n_classes must be 2 or 3"));
            }
            if self.expertise.modes.is_empty() {
                return Err(CliError::data("expertise.modes must not be empty"));
            }
        }
        self.hyper.validate().map_err(CliError::from)
    }

    pub fn bin(&self, label: &str) -> Option<&MagBin> {
        self.bins.iter().find(|b| b.label == label)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}
