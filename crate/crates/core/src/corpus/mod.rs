//! Synthetic edit corpus: rendered scene pairs, templated instructions and
//! controlled instruction corruption with hidden ground truth.

mod oracle;
mod scene;
mod tokenizer;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use iclip_numerics::{load_tensor, save_tensor, RngStream, Tensor};

use crate::error::{CoreError, Result};

pub use oracle::{accepts, consistent_instructions, parse_scene};
pub use scene::{
    enumerate_edits, instruction_space, render, sample_edit, sample_edit_of_kind, EditKind, EditSpec, SceneSpec, Shape,
    ShapeKind, CELL, CHANNELS, COLOR_NAMES, GRID, IMG, MAX_SHAPES, N_COLORS, PALETTE,
};
pub use tokenizer::{detokenize, tokenize, vocab_word, word_id, Tokens, BOS, EOS, N_TOK, PAD, VOCAB_SIZE};

pub const MANIFEST_VERSION: &str = "v1";
pub const MANIFEST_MAGIC: &str = "#iclip-manifest";
pub const MANIFEST_COLUMNS: [&str; 6] = [
    "id",
    "original_path",
    "edited_path",
    "instruction_ids",
    "gt_instruction_ids",
    "corrupted",
];

/// Probability that a corrupted instruction comes from a different edit
/// kind rather than the same kind with other arguments.
pub const CROSS_KIND_PROB: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub original: Tensor,
    pub edited: Tensor,
    pub instruction: Tokens,
    /// Evaluation only; never read by training code.
    pub gt_instruction: Tokens,
    pub corrupted: bool,
}

impl Sample {
    pub fn original_path(&self) -> String {
        format!("images/{:05}_o.ict", self.id)
    }

    pub fn edited_path(&self) -> String {
        format!("images/{:05}_e.ict", self.id)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

/// Train/holdout split by id: the last `holdout` ids are held out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub count: usize,
    pub holdout: usize,
}

impl Split {
    pub fn new(count: usize, holdout: usize) -> Result<Split> {
        if holdout >= count {
            return Err(CoreError::Config(format!("holdout {holdout} must be below count {count}")));
        }
        Ok(Split { count, holdout })
    }

    pub fn is_holdout(&self, id: usize) -> bool {
        id >= self.count - self.holdout
    }

    pub fn train_ids(&self) -> Vec<usize> {
        (0..self.count - self.holdout).collect()
    }

    pub fn holdout_ids(&self) -> Vec<usize> {
        (self.count - self.holdout..self.count).collect()
    }
}

fn corrupt(scene: &SceneSpec, truth: &EditSpec, rng: &mut RngStream) -> EditSpec {
    let after = truth.apply(scene).expect("true edit applies");
    let consistent: Vec<Tokens> = enumerate_edits(scene)
        .into_iter()
        .filter(|e| e.apply(scene).as_ref() == Some(&after))
        .map(|e| e.instruction())
        .collect();
    let usable = |e: &EditSpec| !consistent.contains(&e.instruction());
    let cross = rng.uniform() < CROSS_KIND_PROB;
    let mut candidates: Vec<EditSpec> = enumerate_edits(scene)
        .into_iter()
        .filter(|e| (e.kind() != truth.kind()) == cross && usable(e))
        .collect();
    if candidates.is_empty() {
        // e.g. removing the only shape has no same-kind alternative.
        candidates = enumerate_edits(scene).into_iter().filter(usable).collect();
    }
    // Draw a kind first so kinds with many arguments (add) do not dominate.
    let mut kinds: Vec<EditKind> = candidates.iter().map(|e| e.kind()).collect();
    kinds.sort();
    kinds.dedup();
    let kind = kinds[rng.below(kinds.len())];
    let pool: Vec<&EditSpec> = candidates.iter().filter(|e| e.kind() == kind).collect();
    *pool[rng.below(pool.len())]
}

/// Exactly `floor(count * corruption_rate)` samples get an instruction that
/// describes a different edit of the same scene.
pub fn generate_corpus(seed: u64, count: usize, corruption_rate: f64) -> Result<Corpus> {
    if count == 0 {
        return Err(CoreError::Config("corpus count must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&corruption_rate) {
        return Err(CoreError::Config(format!("corruption rate {corruption_rate} outside [0, 1)")));
    }
    let n_corrupt = (count as f64 * corruption_rate).floor() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    RngStream::new(seed, "corpus-corruption-pick").shuffle(&mut order);
    let mut corrupted = vec![false; count];
    for &i in &order[..n_corrupt] {
        corrupted[i] = true;
    }
    let scenes = RngStream::new(seed, "corpus-scenes");
    let noise = RngStream::new(seed, "corpus-corruption");
    let samples = (0..count)
        .map(|id| {
            let mut rng = scenes.fork(id as u64);
            let scene = SceneSpec::sample(&mut rng);
            let edit = sample_edit(&scene, &mut rng);
            let gt = edit.instruction();
            let instruction = if corrupted[id] {
                corrupt(&scene, &edit, &mut noise.fork(id as u64)).instruction()
            } else {
                gt
            };
            Sample {
                id,
                original: render(&scene),
                edited: render(&edit.apply(&scene).expect("sampled edits apply")),
                instruction,
                gt_instruction: gt,
                corrupted: corrupted[id],
            }
        })
        .collect();
    Ok(Corpus { samples })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\n{}\n", MANIFEST_COLUMNS.join("\t"));
        for x in &self.samples {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                x.id,
                x.original_path(),
                x.edited_path(),
                x.instruction.to_csv(),
                x.gt_instruction.to_csv(),
                u8::from(x.corrupted)
            );
        }
        s
    }

    /// Writes `manifest.tsv` and the image tensors under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| CoreError::io(&images, e))?;
        for x in &self.samples {
            save_tensor(&dir.join(x.original_path()), &x.original)?;
            save_tensor(&dir.join(x.edited_path()), &x.edited)?;
        }
        self.write_manifest(&dir.join("manifest.tsv"))
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        iclip_numerics::write_atomic(path, self.manifest_text().as_bytes())?;
        Ok(())
    }

    /// Reads `dir/manifest.tsv` with images resolved under `dir`.
    pub fn read(dir: &Path) -> Result<Corpus> {
        Corpus::read_manifest(&dir.join("manifest.tsv"), dir)
    }

    /// Reads a manifest whose image paths are relative to `image_root`.
    pub fn read_manifest(path: &Path, image_root: &Path) -> Result<Corpus> {
        let rows = read_manifest_rows(path)?;
        let samples = rows
            .into_iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id,
                    original: load_tensor(&image_root.join(&r.original_path))?,
                    edited: load_tensor(&image_root.join(&r.edited_path))?,
                    instruction: r.instruction,
                    gt_instruction: r.gt_instruction,
                    corrupted: r.corrupted,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { samples })
    }

    /// Same samples and images, instructions replaced by id.
    pub fn with_instructions(&self, instructions: &[Tokens]) -> Corpus {
        let mut out = self.clone();
        for (s, t) in out.samples.iter_mut().zip(instructions) {
            s.instruction = *t;
        }
        out
    }

    /// Unique stored instructions, sorted.
    pub fn unique_instructions(&self) -> Vec<Tokens> {
        let mut v: Vec<Tokens> = self.samples.iter().map(|s| s.instruction).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: usize,
    pub original_path: String,
    pub edited_path: String,
    pub instruction: Tokens,
    pub gt_instruction: Tokens,
    pub corrupted: bool,
}

pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    let err = |line: usize, reason: String| CoreError::Manifest {
        path: PathBuf::from(path),
        line,
        reason,
    };
    let mut lines = text.lines();
    let magic = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
    match magic.split_once('\t') {
        Some((MANIFEST_MAGIC, MANIFEST_VERSION)) => {}
        Some((MANIFEST_MAGIC, v)) => {
            return Err(err(1, format!("schema version mismatch: found {v}, expected {MANIFEST_VERSION}")))
        }
        _ => return Err(err(1, format!("missing `{MANIFEST_MAGIC}` header"))),
    }
    let header = lines.next().ok_or_else(|| err(2, "missing column header".into()))?;
    if header != MANIFEST_COLUMNS.join("\t") {
        return Err(err(2, format!("unexpected columns `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 3;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != MANIFEST_COLUMNS.len() {
            return Err(err(ln, format!("expected {} fields, found {}", MANIFEST_COLUMNS.len(), f.len())));
        }
        let parse_tok = |s: &str| Tokens::from_csv(s).map_err(|e| err(ln, e.to_string()));
        rows.push(ManifestRow {
            id: f[0].parse().map_err(|_| err(ln, format!("bad id `{}`", f[0])))?,
            original_path: f[1].to_string(),
            edited_path: f[2].to_string(),
            instruction: parse_tok(f[3])?,
            gt_instruction: parse_tok(f[4])?,
            corrupted: match f[5] {
                "0" => false,
                "1" => true,
                other => return Err(err(ln, format!("bad corrupted flag `{other}`"))),
            },
        });
    }
    Ok(rows)
}
