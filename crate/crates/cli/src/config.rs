use echoatt::bench::BenchSettings;
use echoatt::data::{BatchPlan, TokenizerMode};
use echoatt::model::SharingPlan;
use echoatt::{AdamWConfig, DistillConfig, Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Whole-run configuration, one JSON document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub plan: PlanSource,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_bench")]
    pub bench: BenchSettings,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_val_fraction() -> f64 {
    0.05
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Text files or directories; relative paths resolve against the
    /// config file's directory.
    pub paths: Vec<PathBuf>,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub batch: BatchPlan,
}

fn default_teacher_epochs() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default = "default_teacher_epochs")]
    pub epochs: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: default_teacher_epochs(),
            optimizer: AdamWConfig::default(),
        }
    }
}

fn default_samples() -> usize {
    16
}
fn default_analysis_seq() -> usize {
    64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Validation windows scored, one sample each.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_analysis_seq")]
    pub seq_len: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            samples: default_samples(),
            seq_len: default_analysis_seq(),
        }
    }
}

/// Where the sharing plan comes from: the similarity analysis (with the
/// block size `k` and skip count `b` of the distill block), or an explicit
/// list of shared layer indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanSource {
    #[default]
    Auto,
    Explicit {
        indices: Vec<usize>,
    },
}

fn default_bench() -> BenchSettings {
    BenchSettings {
        seq_len: 64,
        batch: 1,
        repeats: 7,
    }
}

impl RunConfig {
    /// Reads and validates a config file, resolving relative paths against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(data) = &mut cfg.data {
            for p in &mut data.paths {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let TokenizerMode::Words { vocab_path } = &mut data.tokenizer {
                if vocab_path.is_relative() {
                    *vocab_path = base.join(&*vocab_path);
                }
            }
        }
        if let Some(out) = &mut cfg.out_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        if let Some(d) = &self.data {
            if d.paths.is_empty() {
                return Err(Error::Config("data.paths is empty".into()));
            }
            if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "data.val_fraction {} not in (0, 1)",
                    d.val_fraction
                )));
            }
            if d.batch.seq_len == 0 || d.batch.batch_size == 0 {
                return Err(Error::Config("data.batch sizes must be >= 1".into()));
            }
            if d.batch.seq_len > m.max_seq_len {
                return Err(Error::Config(format!(
                    "data.batch.seq_len {} exceeds model.max_seq_len {}",
                    d.batch.seq_len, m.max_seq_len
                )));
            }
            let vocab = d.tokenizer.build()?.vocab_size();
            if vocab != m.vocab_size {
                return Err(Error::Config(format!(
                    "tokenizer has {vocab} tokens but model.vocab_size is {}",
                    m.vocab_size
                )));
            }
        }
        if self.teacher.epochs.is_nan() || self.teacher.epochs <= 0.0 {
            return Err(Error::Config("teacher.epochs must be positive".into()));
        }
        self.teacher.optimizer.validate()?;
        if self.analysis.samples == 0 || self.analysis.seq_len == 0 || self.analysis.seq_len > m.max_seq_len {
            return Err(Error::Config(format!(
                "analysis needs samples >= 1 and 1 <= seq_len <= {}",
                m.max_seq_len
            )));
        }
        if let PlanSource::Explicit { indices } = &self.plan {
            SharingPlan::from_shared_indices(m.n_layers, indices)
                .map_err(|e| Error::Config(format!("plan.indices: {e}")))?;
        }
        self.distill.validate()?;
        self.optimizer.validate()?;
        let b = &self.bench;
        if b.repeats < 5 || b.batch == 0 || b.seq_len == 0 || b.seq_len > m.max_seq_len {
            return Err(Error::Config(format!(
                "bench needs repeats >= 5, batch >= 1 and 1 <= seq_len <= {}",
                m.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a `data` block".into()))
    }
}
