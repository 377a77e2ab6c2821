//! Artifact layout, checkpoint loaders and structural validation.

use std::fs;
use std::path::{Path, PathBuf};

use iclip_core::backbone::{BackboneSpec, FeatureBackbone, InputMode};
use iclip_core::corpus::{parse_manifest, Corpus, Split};
use iclip_core::decoder::{InstructionDecoder, SupportSet};
use iclip_core::diffusion::{Codec, NoiseSchedule, LATENT_C};
use iclip_core::editor::{Arm, Denoiser, DenoiserSpec};
use iclip_core::encoders::IClip;
use iclip_core::nn::Arch;
use iclip_core::CoreError;
use iclip_numerics::{decode_checkpoint, decode_tensor, load_checkpoint, ParamMap, CHECKPOINT_MAGIC, TENSOR_MAGIC};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::registry::{Registry, CONFIG_FILE, REPORT_FILE};

pub const MANIFEST: &str = "manifest.tsv";
pub const CODEC: &str = "codec.ick";
pub const SCHEDULE: &str = "schedule.ick";
pub const TEACHER: &str = "teacher.ick";
pub const LD: &str = "ld.ick";
pub const ICLIP: &str = "iclip.ick";
pub const DECODER: &str = "decoder.ick";
pub const SUPPORT: &str = "support.ick";
pub const DENOISER: &str = "denoiser.ick";

pub fn split(cfg: &PipelineConfig) -> Result<Split> {
    Ok(Split::new(cfg.corpus.count, cfg.corpus.holdout)?)
}

/// Directory of one editor run, relative to the editor stage directory.
pub fn arm_dir(arm: Arm, seed: u64) -> String {
    format!("{}_seed{seed}", arm.name())
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Core(CoreError::Invalid(format!("{}: {e}", path.display())))
}

pub fn load_params(path: &Path) -> Result<ParamMap> {
    load_checkpoint(path).map_err(|e| corrupt(path, e))
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    Ok(Corpus::read(&root.join("corpus"))?)
}

/// The refined corpus shares the original images.
pub fn load_refined(root: &Path) -> Result<Corpus> {
    Ok(Corpus::read_manifest(&root.join("refine").join(MANIFEST), &root.join("corpus"))?)
}

pub fn load_codec(root: &Path) -> Result<(Codec, NoiseSchedule)> {
    let dir = root.join("codec");
    let codec = Codec::from_params(load_params(&dir.join(CODEC))?)?;
    let schedule = NoiseSchedule::from_params(&load_params(&dir.join(SCHEDULE))?)?;
    Ok((codec, schedule))
}

/// Width from the position table, depth from the block count.
fn infer_arch(p: &ParamMap, prefix: &str) -> Result<Arch> {
    let pos = p
        .get(&format!("{prefix}.pos"))
        .ok_or_else(|| PipelineError::Core(CoreError::Invalid(format!("checkpoint lacks `{prefix}.pos`"))))?;
    let width = *pos.shape().last().unwrap_or(&0);
    let layers = (0..).take_while(|i| p.contains(&format!("{prefix}.block{i}.ln1.g"))).count();
    Ok(Arch { width, layers })
}

pub fn load_backbone(path: &Path, mode: InputMode, t_max: usize) -> Result<FeatureBackbone> {
    let p = load_params(path)?;
    let arch = infer_arch(&p, mode.prefix())?;
    Ok(FeatureBackbone::new(BackboneSpec { mode, arch, t_max }, p)?)
}

pub fn load_teacher(root: &Path) -> Result<FeatureBackbone> {
    load_backbone(&root.join("teacher").join(TEACHER), InputMode::Image, 0)
}

pub fn load_ld(root: &Path, schedule: &NoiseSchedule) -> Result<FeatureBackbone> {
    load_backbone(&root.join("ld").join(LD), InputMode::Latent, schedule.steps())
}

pub fn load_iclip(root: &Path, ld: FeatureBackbone) -> Result<IClip> {
    Ok(IClip::new(load_params(&root.join("iclip").join(ICLIP))?, ld)?)
}

pub fn load_decoder(root: &Path) -> Result<(InstructionDecoder, SupportSet)> {
    let dir = root.join("decoder");
    let dec = InstructionDecoder::new(load_params(&dir.join(DECODER))?)?;
    let support = SupportSet::from_params(&load_params(&dir.join(SUPPORT))?)?;
    Ok((dec, support))
}

pub fn load_denoiser(root: &Path, arm: Arm, seed: u64) -> Result<Denoiser> {
    let path = root.join("editor").join(arm_dir(arm, seed)).join(DENOISER);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            stage: "editor consumer".into(),
            path,
            producer: "editor".into(),
        });
    }
    let p = load_params(&path)?;
    let dim = |name: &str, axis: usize| -> Result<usize> {
        p.get(name)
            .map(|t| t.shape()[axis])
            .ok_or_else(|| corrupt(&path, format!("lacks `{name}`")))
    };
    let spec = DenoiserSpec {
        hidden: dim("den.conv_in.w", 1)?,
        layers: (0..).take_while(|i| p.contains(&format!("den.conv{i}.w"))).count(),
        cond_width: dim("den.cond.w", 0)?,
    };
    if dim("den.out.w", 1)? != LATENT_C {
        return Err(corrupt(&path, "output width is not the latent channel count"));
    }
    Ok(Denoiser::new(spec, p)?)
}

/// One line of a validation report.
#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    pub path: PathBuf,
    pub ok: bool,
    pub detail: String,
}

fn check_file(path: &Path, expected_names: Option<&[String]>) -> Finding {
    let finding = |ok: bool, detail: String| Finding {
        path: path.to_path_buf(),
        ok,
        detail,
    };
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => return finding(false, format!("unreadable: {e}")),
    };
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "ick" => {
            if !bytes.starts_with(CHECKPOINT_MAGIC) {
                return finding(false, "bad checkpoint magic".into());
            }
            match decode_checkpoint(&bytes) {
                Err(e) => finding(false, e.to_string()),
                Ok(p) => match expected_names {
                    Some(names) => {
                        let have: Vec<&str> = p.names().collect();
                        let missing: Vec<&String> = names.iter().filter(|n| !have.contains(&n.as_str())).collect();
                        if missing.is_empty() {
                            finding(true, format!("{} entries", p.len()))
                        } else {
                            finding(false, format!("missing entries {missing:?}"))
                        }
                    }
                    None => finding(true, format!("{} entries", p.len())),
                },
            }
        }
        "ict" => {
            if !bytes.starts_with(TENSOR_MAGIC) {
                return finding(false, "bad tensor magic".into());
            }
            match decode_tensor(&bytes) {
                Ok(t) => finding(true, format!("shape {:?}", t.shape())),
                Err(e) => finding(false, e.to_string()),
            }
        }
        "tsv" if path.file_name().and_then(|n| n.to_str()) == Some(MANIFEST) => {
            match std::str::from_utf8(&bytes) {
                Err(_) => finding(false, "manifest is not UTF-8".into()),
                Ok(text) => match parse_manifest(text, path) {
                    Ok(rows) => finding(true, format!("{} rows", rows.len())),
                    Err(e) => finding(false, e.to_string()),
                },
            }
        }
        _ => match std::str::from_utf8(&bytes) {
            Ok(text) if text.lines().next().is_some_and(|h| h.contains('\t')) || ext != "tsv" => {
                finding(true, format!("{} bytes", bytes.len()))
            }
            Ok(_) => finding(false, "missing tab-separated header".into()),
            Err(_) => finding(false, "not UTF-8".into()),
        },
    }
}

/// Parameter names each stage's checkpoint must carry.
fn expected_names(file: &str) -> Option<Vec<String>> {
    let names: &[&str] = match file {
        CODEC => &["codec.enc1.w", "codec.enc2.w", "codec.dec1.w", "codec.dec2.w", "codec.lat_mean", "codec.lat_std"],
        SCHEDULE => &["schedule.betas"],
        TEACHER => &["teacher.embed.w", "teacher.pos", "teacher.ln_f.g", "teacher.block0.ln1.g"],
        LD => &["ld.embed.w", "ld.pos", "ld.temb.w", "ld.ln_f.g", "ld.block0.ln1.g"],
        ICLIP => &["vis.in.w", "vis.pos", "vis.out.w", "txt.tok", "txt.pos", "txt.out.w", "head.log_tau"],
        DECODER => &["dec.prefix.w", "dec.tok", "dec.pos", "dec.head.w", "dec.block0.ln1.g"],
        SUPPORT => &["support.rows", "support.tokens"],
        DENOISER => &["den.conv_in.w", "den.temb.w", "den.cond.w", "den.out.w"],
        _ => return None,
    };
    Some(names.iter().map(|s| s.to_string()).collect())
}

/// Checks every stage directory present under `root`: declared artifacts
/// exist, binary files carry the right magic and decode completely,
/// manifests match the current schema, checkpoints hold the expected
/// entries. Problems are reported, not raised.
pub fn validate_artifacts(root: &Path, registry: &Registry, cfg: &PipelineConfig) -> Vec<Finding> {
    let mut out = Vec::new();
    for name in registry.names() {
        let dir = root.join(name);
        if !dir.exists() {
            continue;
        }
        let stage = registry.get(name).expect("registered");
        let mut declared = stage.artifacts(cfg);
        declared.push(REPORT_FILE.into());
        declared.push(CONFIG_FILE.into());
        for f in &declared {
            let path = dir.join(f);
            if !path.exists() {
                out.push(Finding {
                    path,
                    ok: false,
                    detail: format!("missing (declared by stage `{name}`)"),
                });
            }
        }
        let mut files = Vec::new();
        walk(&dir, &mut files);
        files.sort();
        for path in files {
            let file = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            out.push(check_file(&path, expected_names(&file).as_deref()));
        }
    }
    out
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
}
