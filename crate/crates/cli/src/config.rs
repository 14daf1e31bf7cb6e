//! Run configuration: a TOML file plus `section.key=value` overrides.

use std::fs;
use std::path::Path;

use scorealign::{
    AlignConfig, ConvShape, Error, FeatureKind, LearningConfig, ModelKind, Result, SampleFormat, SegmentSpec,
    SynthConfig, SyntheticSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

impl From<WavFormat> for SampleFormat {
    fn from(f: WavFormat) -> SampleFormat {
        match f {
            WavFormat::Pcm16 => SampleFormat::Pcm16,
            WavFormat::Float32 => SampleFormat::Float32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Input features of the linear model.
    pub feature_kind: FeatureKind,
    pub window: usize,
    pub hidden: usize,
    pub conv: ConvShape,
    /// Scale the learning rate by the inverse energy of the readout's inputs.
    pub normalize_lr: bool,
    /// Training points used to choose the decision threshold.
    pub threshold_points: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let l = LearningConfig::default();
        ModelSection {
            kind: l.model,
            feature_kind: l.feature_kind,
            window: l.window,
            hidden: l.hidden,
            conv: l.conv,
            normalize_lr: l.normalize_lr,
            threshold_points: l.threshold_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub tone_s: f64,
    pub gain: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection { tone_s: 0.1, gain: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pr_grid_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { pr_grid_size: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Independent pieces per run; piece `i` uses seed `seed + i`.
    pub pieces: usize,
    pub spec: SyntheticSpec,
    pub learning: LearningConfig,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            pieces: 1,
            spec: SyntheticSpec::default(),
            learning: LearningConfig::default(),
        }
    }
}

/// Everything a command may need. `seed` is the single source of
/// randomness and is copied into every nested seed on resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    pub threads: usize,
    pub sample_rate: u32,
    pub wav_format: WavFormat,
    pub align: AlignConfig,
    pub synth: SynthConfig,
    pub segments: SegmentSpec,
    pub train: TrainConfig,
    pub model: ModelSection,
    pub validate: ValidateSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            sample_rate: 44_100,
            wav_format: WavFormat::Float32,
            align: AlignConfig::default(),
            synth: SynthConfig::default(),
            segments: SegmentSpec::default(),
            train: TrainConfig::default(),
            model: ModelSection::default(),
            validate: ValidateSection::default(),
            eval: EvalSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Error {
    Error::Format {
        format: "config",
        message: message.into(),
    }
}

/// Parses one override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `section.key=value` to a parsed TOML table, creating
/// intermediate tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {assignment:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(format!("override key {path:?} is malformed")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override {path:?}: {k} is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if given), applies overrides in order and resolves seeds.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| Error::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<toml::Table>().map_err(|e| config_error(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_seeds(&mut self) {
        self.train.seed = self.seed;
        self.experiment.spec.seed = self.seed;
        self.experiment.learning.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.experiment.spec.validate()?;
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
