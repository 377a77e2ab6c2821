//! One TOML file drives every stage. Unknown keys are rejected; every
//! section has a default so a config may list only what it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use iclip_core::backbone::{LdConfig, TeacherConfig};
use iclip_core::decoder::DecoderConfig;
use iclip_core::diffusion::CodecConfig;
use iclip_core::editor::{Arm, EditorConfig};
use iclip_core::encoders::IClipConfig;
use iclip_core::nn::Arch;

use crate::error::{PipelineError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    pub codec: CodecSection,
    pub teacher: TeacherSection,
    pub ld: TrainSection,
    pub iclip: TrainSection,
    pub decoder: DecoderSection,
    pub refine: RefineSection,
    pub editor: EditorSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub count: usize,
    pub holdout: usize,
    pub corruption_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub hidden: usize,
    /// Diffusion steps `T` of the noise schedule stored with the codec.
    pub timesteps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub width: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub prefix_noise: f64,
    pub width: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub phi: f64,
    pub sharpening: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorSection {
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub lambda: f64,
    pub hidden: usize,
    pub layers: usize,
    pub align_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub sampling_steps: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            seed: 0,
            count: 2000,
            holdout: 200,
            corruption_rate: 0.3,
        }
    }
}

impl Default for CodecSection {
    fn default() -> Self {
        let c = CodecConfig::default();
        CodecSection {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            hidden: c.hidden,
            timesteps: iclip_core::diffusion::DEFAULT_T,
        }
    }
}

impl Default for TeacherSection {
    fn default() -> Self {
        let c = TeacherConfig::default();
        TeacherSection {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            width: c.arch.width,
            layers: c.arch.layers,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = LdConfig::default();
        TrainSection {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
        }
    }
}

impl Default for DecoderSection {
    fn default() -> Self {
        let c = DecoderConfig::default();
        DecoderSection {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            prefix_noise: c.prefix_noise,
            width: c.arch.width,
            layers: c.arch.layers,
        }
    }
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            phi: iclip_core::refiner::DEFAULT_PHI,
            sharpening: iclip_core::refiner::DEFAULT_SHARPENING,
        }
    }
}

impl Default for EditorSection {
    fn default() -> Self {
        let c = EditorConfig::default();
        EditorSection {
            seeds: vec![0, 1, 2],
            arms: Arm::ALL.iter().map(|a| a.name().to_string()).collect(),
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            lambda: c.lambda,
            hidden: c.hidden,
            layers: c.layers,
            align_batch: c.align_batch,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seed: 0,
            sampling_steps: iclip_core::editor::SAMPLING_STEPS,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: CorpusSection::default(),
            codec: CodecSection::default(),
            teacher: TeacherSection::default(),
            ld: TrainSection::default(),
            iclip: {
                let c = IClipConfig::default();
                TrainSection {
                    seed: c.seed,
                    steps: c.steps,
                    batch: c.batch,
                    lr: c.lr,
                }
            },
            decoder: DecoderSection::default(),
            refine: RefineSection::default(),
            editor: EditorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        PipelineConfig::parse(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// The fully resolved config, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.corpus.holdout == 0 || self.corpus.holdout >= self.corpus.count {
            return bad(format!("corpus.holdout must be in [1, count), got {}", self.corpus.holdout));
        }
        if !(0.0..=1.0).contains(&self.corpus.corruption_rate) {
            return bad(format!("corpus.corruption_rate must be in [0, 1], got {}", self.corpus.corruption_rate));
        }
        if !(self.refine.phi >= 0.0) {
            return bad(format!("refine.phi must be non-negative, got {}", self.refine.phi));
        }
        if !(self.refine.sharpening > 0.0) {
            return bad(format!("refine.sharpening must be positive, got {}", self.refine.sharpening));
        }
        if !(self.editor.lambda >= 0.0) {
            return bad(format!("editor.lambda must be non-negative, got {}", self.editor.lambda));
        }
        if self.editor.seeds.is_empty() || self.editor.arms.is_empty() {
            return bad("editor.seeds and editor.arms must be non-empty".into());
        }
        self.arms()?;
        if self.eval.sampling_steps == 0 {
            return bad("eval.sampling_steps must be positive".into());
        }
        Ok(())
    }

    pub fn arms(&self) -> Result<Vec<Arm>> {
        let mut arms = self
            .editor
            .arms
            .iter()
            .map(|a| Arm::parse(a).map_err(|e| PipelineError::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        arms.sort();
        arms.dedup();
        Ok(arms)
    }

    /// Overrides the seed of one stage, or of every stage for `"all"`.
    pub fn set_seed(&mut self, stage: &str, seed: u64) -> Result<()> {
        let all = stage == "all";
        let mut hit = false;
        let mut set = |name: &str, slot: &mut u64| {
            if all || stage == name {
                *slot = seed;
                hit = true;
            }
        };
        set("corpus", &mut self.corpus.seed);
        set("codec", &mut self.codec.seed);
        set("teacher", &mut self.teacher.seed);
        set("ld", &mut self.ld.seed);
        set("iclip", &mut self.iclip.seed);
        set("decoder", &mut self.decoder.seed);
        set("eval", &mut self.eval.seed);
        if all || stage == "editor" {
            self.editor.seeds = vec![seed];
            hit = true;
        }
        if hit || stage == "refine" {
            Ok(())
        } else {
            Err(PipelineError::Config(format!("no stage `{stage}` takes a seed")))
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        let c = &self.codec;
        CodecConfig {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            hidden: c.hidden,
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let c = &self.teacher;
        TeacherConfig {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            arch: Arch {
                width: c.width,
                layers: c.layers,
            },
        }
    }

    pub fn ld_config(&self) -> LdConfig {
        let c = &self.ld;
        LdConfig {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
        }
    }

    pub fn iclip_config(&self) -> IClipConfig {
        let c = &self.iclip;
        IClipConfig {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let c = &self.decoder;
        DecoderConfig {
            seed: c.seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            prefix_noise: c.prefix_noise,
            arch: Arch {
                width: c.width,
                layers: c.layers,
            },
        }
    }

    pub fn editor_config(&self, seed: u64) -> EditorConfig {
        let c = &self.editor;
        EditorConfig {
            seed,
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            lambda: c.lambda,
            hidden: c.hidden,
            layers: c.layers,
            align_batch: c.align_batch,
        }
    }
}
