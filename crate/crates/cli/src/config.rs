//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use attnreuse_core::distill::{DistillConfig, LossVariant, OptimizerConfig, PretrainConfig};
use attnreuse_core::encoder::EncoderConfig;
use attnreuse_core::masking::RatioSchedule;
use attnreuse_core::reuse::PatternSpec;
use attnreuse_core::synth::{FeatureSet, FrameSource, Regime, SynthSpec};
use attnreuse_core::{Result as CoreResult, Tensor};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            mask: MaskSection::default(),
            distill: DistillSection::default(),
            data: DataSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub key_width: Option<usize>,
    pub value_width: Option<usize>,
    pub include_biases: bool,
    pub pattern: PatternSpec,
    /// Load the teacher from this checkpoint instead of pretraining one.
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainSection,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            ffn_width: 128,
            key_width: None,
            value_width: None,
            include_biases: true,
            pattern: PatternSpec::default(),
            checkpoint: None,
            pretrain: PretrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub ratio: f64,
    pub span: usize,
    pub lr: f64,
    pub warmup_steps: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch: p.batch,
            ratio: p.ratio,
            span: p.span,
            lr: p.optimizer.lr,
            warmup_steps: p.optimizer.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub key_width: Option<usize>,
    pub value_width: Option<usize>,
    pub include_biases: bool,
    pub pattern: PatternSpec,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 32,
            heads: 4,
            ffn_width: 64,
            key_width: None,
            value_width: None,
            include_biases: true,
            pattern: PatternSpec::Name("2by2".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    /// Constant ratio, or the starting ratio of a linear schedule.
    pub ratio: f64,
    pub span: usize,
    pub schedule: ScheduleKind,
    /// Final ratio of a linear schedule.
    pub ratio_end: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            span: attnreuse_core::masking::DEFAULT_SPAN,
            schedule: ScheduleKind::Constant,
            ratio_end: 0.8,
        }
    }
}

impl MaskSection {
    pub fn schedule(&self) -> RatioSchedule {
        match self.schedule {
            ScheduleKind::Constant => RatioSchedule::Constant { ratio: self.ratio },
            ScheduleKind::Linear => RatioSchedule::Linear {
                start: self.ratio,
                end: self.ratio_end,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    /// Per-layer coefficients; 0.1 everywhere and 1.0 on the last layer if unset.
    pub alphas: Option<Vec<f64>>,
    pub variant: LossVariant,
}

impl Default for DistillSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            steps: 300,
            batch: 4,
            lr: 5e-3,
            beta1: o.beta1,
            beta2: o.beta2,
            warmup_steps: o.warmup_steps,
            alphas: None,
            variant: LossVariant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
    pub d_in: usize,
    pub regime: Regime,
    pub seed: u64,
    /// Frame feature file; replaces synthetic data when set.
    pub features_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n: 64,
            d_in: 16,
            regime: Regime::PiecewiseSegment,
            seed: 3,
            features_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub teacher_width: usize,
    pub input_width: usize,
    pub include_biases: bool,
    /// Sequence length for MAC counts.
    pub n: u64,
    pub patterns: Vec<String>,
    /// FFN width step used by `-up` variants.
    pub granularity: usize,
    /// Pattern whose parameter total `-up` variants grow towards.
    pub up_reference: String,
    /// Baseline totals to calibrate the frontend against.
    pub target_params: Option<u64>,
    pub target_macs: Option<u64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            layers: 12,
            width: 432,
            heads: 12,
            ffn_width: 816,
            teacher_width: 768,
            input_width: 512,
            include_biases: true,
            n: 3519,
            patterns: vec!["2by6".into(), "3by4".into(), "6by2".into()],
            granularity: 16,
            up_reference: "2by6".into(),
            target_params: None,
            target_macs: None,
        }
    }
}

impl AnalysisSection {
    pub fn encoder_config(&self) -> EncoderConfig {
        let mut cfg = EncoderConfig::speech_student(self.width, self.ffn_width);
        cfg.num_layers = self.layers;
        cfg.num_heads = self.heads;
        cfg.teacher_width = self.teacher_width;
        cfg.input_width = self.input_width;
        cfg.include_biases = self.include_biases;
        cfg
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn teacher_config(&self) -> EncoderConfig {
        let t = &self.teacher;
        EncoderConfig {
            num_layers: t.layers,
            model_width: t.width,
            num_heads: t.heads,
            key_width: t.key_width,
            value_width: t.value_width,
            ffn_width: t.ffn_width,
            teacher_width: t.width,
            input_width: self.data.d_in,
            max_positions: self.data.n,
            include_biases: t.include_biases,
            frontend_params: 0,
            frontend_macs_per_frame: 0,
        }
    }

    pub fn student_config(&self) -> EncoderConfig {
        let s = &self.student;
        EncoderConfig {
            num_layers: s.layers,
            model_width: s.width,
            num_heads: s.heads,
            key_width: s.key_width,
            value_width: s.value_width,
            ffn_width: s.ffn_width,
            teacher_width: self.teacher.width,
            input_width: self.data.d_in,
            max_positions: self.data.n,
            include_biases: s.include_biases,
            frontend_params: 0,
            frontend_macs_per_frame: 0,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.teacher.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch: p.batch,
            ratio: p.ratio,
            span: p.span,
            optimizer: OptimizerConfig {
                lr: p.lr,
                warmup_steps: p.warmup_steps,
                ..OptimizerConfig::default()
            },
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            alphas: d
                .alphas
                .clone()
                .unwrap_or_else(|| DistillConfig::default_alphas(self.student.layers)),
            variant: d.variant,
            schedule: self.mask.schedule(),
            span: self.mask.span,
            steps: d.steps,
            batch: d.batch,
            optimizer: OptimizerConfig {
                lr: d.lr,
                beta1: d.beta1,
                beta2: d.beta2,
                warmup_steps: d.warmup_steps,
                ..OptimizerConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn data_source(&self) -> Result<DataSource, CliError> {
        match &self.data.features_path {
            Some(path) => {
                let seqs = attnreuse_core::synth::read_features(path)?;
                let first = &seqs[0];
                if first.shape() != [self.data.n, self.data.d_in] {
                    return Err(CliError::Config(format!(
                        "features in {} are {:?}, config expects n = {}, d_in = {}",
                        path.display(),
                        first.shape(),
                        self.data.n,
                        self.data.d_in
                    )));
                }
                Ok(DataSource::Features(FeatureSet::new(seqs)?))
            }
            None => Ok(DataSource::Synth(SynthSpec {
                n: self.data.n,
                d_in: self.data.d_in,
                regime: self.data.regime,
                seed: self.data.seed,
            })),
        }
    }
}

/// Training frames: synthetic or loaded from a feature file.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synth(SynthSpec),
    Features(FeatureSet),
}

impl FrameSource for DataSource {
    fn batch(&mut self, index: u64, count: usize) -> CoreResult<Vec<Tensor>> {
        match self {
            DataSource::Synth(s) => s.batch(index, count),
            DataSource::Features(f) => f.batch(index, count),
        }
    }

    fn frame_width(&self) -> usize {
        match self {
            DataSource::Synth(s) => s.frame_width(),
            DataSource::Features(f) => f.frame_width(),
        }
    }
}
