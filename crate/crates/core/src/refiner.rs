//! Dataset refinement: score each stored instruction against its image
//! pair, propose a replacement by projecting the change embedding onto the
//! instruction support set and decoding it, and keep the proposal only if it
//! scores better by a margin.

use std::fmt::Write as _;

use iclip_numerics::Tensor;

use crate::corpus::{accepts, detokenize, instruction_space, Corpus, Tokens};
use crate::decoder::{project_visual, InstructionDecoder, SupportSet};
use crate::diffusion::Codec;
use crate::encoders::{ChangeInput, IClip};
use crate::error::{CoreError, Result};

pub const DEFAULT_PHI: f64 = 0.1;
/// Softmax temperature of the support projection. Small enough that the
/// projection lands near one instruction, large enough to blend near-ties.
pub const DEFAULT_SHARPENING: f64 = 0.03;
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementRecord {
    pub id: usize,
    pub original: Tokens,
    pub original_score: f64,
    pub refined: Tokens,
    pub refined_score: f64,
    pub replaced: bool,
    /// Evaluation only.
    pub corrupted: bool,
    /// Whether the pixel oracle accepts the instruction that was kept.
    pub oracle_accepts: bool,
}

impl RefinementRecord {
    pub fn final_instruction(&self) -> Tokens {
        if self.replaced {
            self.refined
        } else {
            self.original
        }
    }

    pub fn final_score(&self) -> f64 {
        if self.replaced {
            self.refined_score
        } else {
            self.original_score
        }
    }
}

/// The replacement rule.
pub fn should_replace(original_score: f64, refined_score: f64, phi: f64) -> bool {
    refined_score > original_score + phi
}

/// Frozen models used for refinement. Latents are always clean (`k = 0`).
pub struct Refiner<'a> {
    pub iclip: &'a IClip,
    pub decoder: &'a InstructionDecoder,
    pub support: &'a SupportSet,
    pub codec: &'a Codec,
    pub sharpening: f64,
}

impl Refiner<'_> {
    /// Clean change embeddings for image pairs.
    pub fn change_embeddings(&self, originals: &[&Tensor], edited: &[&Tensor]) -> Result<Vec<Tensor>> {
        let lo = self.codec.encode(originals)?;
        let le = self.codec.encode(edited)?;
        let o: Vec<ChangeInput> = lo.iter().map(|l| ChangeInput::Latent(l, 0)).collect();
        let e: Vec<ChangeInput> = le.iter().map(|l| ChangeInput::Latent(l, 0)).collect();
        self.iclip.encode_change(&o, &e)
    }

    /// `cos(z_vis, z_txt(p))` for each pair.
    pub fn score(&self, z_vis: &[Tensor], instructions: &[Tokens]) -> Result<Vec<f64>> {
        let zt = self.iclip.encode_text(instructions)?;
        Ok(z_vis
            .iter()
            .zip(&zt)
            .map(|(a, b)| iclip_numerics::cosine(a.data(), b.data()) as f64)
            .collect())
    }

    /// Decoded instruction for each change embedding, via projection.
    pub fn propose(&self, z_vis: &[Tensor]) -> Result<Vec<Tokens>> {
        let projected = z_vis
            .iter()
            .map(|z| project_visual(z, self.support, self.sharpening))
            .collect::<Result<Vec<_>>>()?;
        self.decoder.decode_greedy(&projected)
    }

    /// Decoded instruction straight from the raw change embedding.
    pub fn propose_direct(&self, z_vis: &[Tensor]) -> Result<Vec<Tokens>> {
        let unit: Vec<Tensor> = z_vis
            .iter()
            .map(|z| {
                let n = z.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() + iclip_numerics::COSINE_EPS;
                z.map(|v| (v as f64 / n) as f32)
            })
            .collect();
        self.decoder.decode_greedy(&unit)
    }

    /// Records for every sample and the corpus with replacements applied.
    pub fn refine(&self, corpus: &Corpus, phi: f64) -> Result<(Corpus, Vec<RefinementRecord>)> {
        if !(phi >= 0.0) {
            return Err(CoreError::Config(format!("margin must be non-negative, got {phi}")));
        }
        let mut records = Vec::with_capacity(corpus.len());
        for chunk in corpus.samples.chunks(CHUNK) {
            let o: Vec<&Tensor> = chunk.iter().map(|s| &s.original).collect();
            let e: Vec<&Tensor> = chunk.iter().map(|s| &s.edited).collect();
            let z = self.change_embeddings(&o, &e)?;
            let stored: Vec<Tokens> = chunk.iter().map(|s| s.instruction).collect();
            let before = self.score(&z, &stored)?;
            let proposed = self.propose(&z)?;
            let after = self.score(&z, &proposed)?;
            for (i, s) in chunk.iter().enumerate() {
                let replaced = should_replace(before[i], after[i], phi);
                let kept = if replaced { proposed[i] } else { stored[i] };
                records.push(RefinementRecord {
                    id: s.id,
                    original: stored[i],
                    original_score: before[i],
                    refined: proposed[i],
                    refined_score: after[i],
                    replaced,
                    corrupted: s.corrupted,
                    oracle_accepts: accepts(&s.original, &s.edited, &kept),
                });
            }
        }
        let refined = corpus.with_instructions(&records.iter().map(|r| r.final_instruction()).collect::<Vec<_>>());
        Ok((refined, records))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementGrade {
    pub samples: usize,
    pub replaced: usize,
    /// Corrupted samples whose final instruction is the hidden ground truth.
    pub recovery: Option<f64>,
    /// Clean samples left alone or given an oracle-accepted instruction.
    pub preservation: Option<f64>,
    pub mean_delta_replaced: Option<f64>,
    pub corrupted_score_before: Option<f64>,
    pub corrupted_score_after: Option<f64>,
    /// Recovery of a uniformly random guess over the instruction space.
    pub chance_recovery: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Grades records against the corpus's hidden ground truth.
pub fn grade(records: &[RefinementRecord], corpus: &Corpus) -> Result<RefinementGrade> {
    if records.len() != corpus.len() || records.iter().zip(&corpus.samples).any(|(r, s)| r.id != s.id) {
        return Err(CoreError::Invalid("refinement records do not match the corpus".into()));
    }
    let pairs = || records.iter().zip(&corpus.samples);
    let recovery = mean(
        pairs()
            .filter(|(_, s)| s.corrupted)
            .map(|(r, s)| f64::from(u8::from(r.final_instruction() == s.gt_instruction))),
    );
    let preservation = mean(
        pairs()
            .filter(|(_, s)| !s.corrupted)
            .map(|(r, _)| f64::from(u8::from(!r.replaced || r.oracle_accepts))),
    );
    Ok(RefinementGrade {
        samples: records.len(),
        replaced: records.iter().filter(|r| r.replaced).count(),
        recovery,
        preservation,
        mean_delta_replaced: mean(records.iter().filter(|r| r.replaced).map(|r| r.refined_score - r.original_score)),
        corrupted_score_before: mean(records.iter().filter(|r| r.corrupted).map(|r| r.original_score)),
        corrupted_score_after: mean(records.iter().filter(|r| r.corrupted).map(|r| r.final_score())),
        chance_recovery: 1.0 / instruction_space().len() as f64,
    })
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "id",
    "corrupted",
    "replaced",
    "original",
    "original_score",
    "refined",
    "refined_score",
    "final",
    "oracle_accepts",
];

/// One tab-separated line per sample: both instructions with their scores.
pub fn report_tsv(records: &[RefinementRecord]) -> String {
    let mut s = REPORT_COLUMNS.join("\t");
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{}\t{}",
            r.id,
            u8::from(r.corrupted),
            u8::from(r.replaced),
            detokenize(&r.original),
            r.original_score,
            detokenize(&r.refined),
            r.refined_score,
            detokenize(&r.final_instruction()),
            u8::from(r.oracle_accepts)
        );
    }
    s
}
