//! The nine pipeline stages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use iclip_core::backbone::{train_ld_student, train_teacher};
use iclip_core::corpus::{generate_corpus, tokenize, Corpus, Tokens};
use iclip_core::decoder::train_decoder;
use iclip_core::diffusion::{train_codec, NoiseSchedule, LATENT_C, LATENT_SIDE};
use iclip_core::editor::{eval_metrics, evaluate_editor, recolor_hits, train_editor, unit_rows, Arm, Denoiser, EditScores, EvalReport};
use iclip_core::encoders::train_iclip;
use iclip_core::refiner::{grade, report_tsv, Refiner};
use iclip_numerics::{encode_checkpoint, ParamMap, RngStream, Tensor};

use crate::artifacts::*;
use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::registry::{write, Registry, Report, Stage, StageContext};

fn save(path: &Path, params: &ParamMap) -> Result<()> {
    write(path, &encode_checkpoint(params))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), f)
}

pub struct CorpusStage;

impl Stage for CorpusStage {
    fn name(&self) -> &'static str {
        "corpus"
    }
    fn deps(&self) -> &'static [&'static str] {
        &[]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec![MANIFEST.into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let c = &ctx.cfg.corpus;
        let corpus = generate_corpus(c.seed, c.count, c.corruption_rate)?;
        corpus.write(ctx.out)?;
        let mut r = Report::new();
        r.put("seed", c.seed)
            .put("samples", corpus.len())
            .put("corrupted", corpus.samples.iter().filter(|s| s.corrupted).count())
            .put("distinct_instructions", corpus.unique_instructions().len());
        Ok(r)
    }
}

pub struct CodecStage;

impl Stage for CodecStage {
    fn name(&self) -> &'static str {
        "codec"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus"]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec![CODEC.into(), SCHEDULE.into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let corpus = load_corpus(ctx.root)?;
        let cfg = ctx.cfg.codec_config();
        let (codec, rep) = train_codec(&corpus, split(ctx.cfg)?, &cfg)?;
        let schedule = NoiseSchedule::linear(ctx.cfg.codec.timesteps)?;
        save(&ctx.out.join(CODEC), codec.params())?;
        save(&ctx.out.join(SCHEDULE), &schedule.to_params())?;
        let mut r = Report::new();
        r.put("seed", cfg.seed)
            .put("steps", rep.steps)
            .put("final_train_loss", f(rep.final_train_loss))
            .put("holdout_mse", f(rep.holdout_mse))
            .put("timesteps", schedule.steps());
        Ok(r)
    }
}

pub struct TeacherStage;

impl Stage for TeacherStage {
    fn name(&self) -> &'static str {
        "teacher"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus"]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec![TEACHER.into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let corpus = load_corpus(ctx.root)?;
        let cfg = ctx.cfg.teacher_config();
        let (teacher, rep) = train_teacher(&corpus, split(ctx.cfg)?, &cfg)?;
        save(&ctx.out.join(TEACHER), teacher.params())?;
        let mut r = Report::new();
        r.put("seed", cfg.seed)
            .put("steps", rep.steps)
            .put("final_loss", f(rep.final_loss))
            .put("macro_accuracy", f(rep.macro_accuracy));
        for (i, a) in rep.head_accuracy.iter().enumerate() {
            r.put(format!("head{i}_accuracy"), f(*a));
        }
        Ok(r)
    }
}

pub struct LdStage;

impl Stage for LdStage {
    fn name(&self) -> &'static str {
        "ld"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus", "codec", "teacher"]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec![LD.into(), "trace.tsv".into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let corpus = load_corpus(ctx.root)?;
        let (codec, schedule) = load_codec(ctx.root)?;
        let teacher = load_teacher(ctx.root)?;
        let cfg = ctx.cfg.ld_config();
        let (ld, rep) = train_ld_student(&teacher, &codec, &schedule, &corpus, split(ctx.cfg)?, &cfg)?;
        save(&ctx.out.join(LD), ld.params())?;
        let mut trace = String::from("step\tupper_bound\tk\tloss\n");
        for (s, u, k, l) in &rep.trace {
            let _ = writeln!(trace, "{s}\t{u}\t{k}\t{l:.6}");
        }
        write(&ctx.out.join("trace.tsv"), trace.as_bytes())?;
        let mut r = Report::new();
        r.put("seed", cfg.seed)
            .put("steps", rep.steps)
            .put("final_loss", f(rep.final_loss))
            .put("init_loss_k0", f(rep.init_loss_k0))
            .put("holdout_loss_k0", f(rep.holdout_loss_k0))
            .put("holdout_loss_kmax", f(rep.holdout_loss_kmax))
            .put("holdout_cosine_k0", f(rep.holdout_cosine_k0));
        Ok(r)
    }
}

pub struct IClipStage;

impl Stage for IClipStage {
    fn name(&self) -> &'static str {
        "iclip"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus", "codec", "ld"]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec![ICLIP.into(), "losses.tsv".into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let corpus = load_corpus(ctx.root)?;
        let (codec, schedule) = load_codec(ctx.root)?;
        let ld = load_ld(ctx.root, &schedule)?;
        let cfg = ctx.cfg.iclip_config();
        let (iclip, rep) = train_iclip(&ld, &codec, &schedule, &corpus, split(ctx.cfg)?, &cfg)?;
        save(&ctx.out.join(ICLIP), iclip.params())?;
        let mut losses = String::from("step\tloss\n");
        for (i, l) in rep.losses.iter().enumerate() {
            let _ = writeln!(losses, "{i}\t{l:.6}");
        }
        write(&ctx.out.join("losses.tsv"), losses.as_bytes())?;
        let mut r = Report::new();
        r.put("seed", cfg.seed)
            .put("steps", rep.steps)
            .put("final_loss", f(rep.final_loss))
            .put("tau", f(rep.tau))
            .put("init_top1", f(rep.init_top1))
            .put("holdout_top1", f(rep.holdout_top1))
            .put("holdout_batch", rep.holdout_batch)
            .put("mean_score_clean", f(rep.mean_score_clean))
            .put("mean_score_corrupted", f(rep.mean_score_corrupted));
        Ok(r)
    }
}

pub struct DecoderStage;

impl Stage for DecoderStage {
    fn name(&self) -> &'static str {
        "decoder"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus", "codec", "ld", "iclip"]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec![DECODER.into(), SUPPORT.into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let corpus = load_corpus(ctx.root)?;
        let (_, schedule) = load_codec(ctx.root)?;
        let iclip = load_iclip(ctx.root, load_ld(ctx.root, &schedule)?)?;
        let cfg = ctx.cfg.decoder_config();
        let (dec, support, rep) = train_decoder(&iclip, &corpus.unique_instructions(), &cfg)?;
        save(&ctx.out.join(DECODER), dec.params())?;
        save(&ctx.out.join(SUPPORT), &support.to_params())?;
        let mut r = Report::new();
        r.put("seed", cfg.seed)
            .put("steps", rep.steps)
            .put("final_loss", f(rep.final_loss))
            .put("unique_instructions", rep.unique_instructions)
            .put("exact_match", f(rep.exact_match));
        Ok(r)
    }
}

pub struct RefineStage;

impl Stage for RefineStage {
    fn name(&self) -> &'static str {
        "refine"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus", "codec", "ld", "iclip", "decoder"]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec![MANIFEST.into(), "records.tsv".into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let corpus = load_corpus(ctx.root)?;
        let (codec, schedule) = load_codec(ctx.root)?;
        let iclip = load_iclip(ctx.root, load_ld(ctx.root, &schedule)?)?;
        let (decoder, support) = load_decoder(ctx.root)?;
        let phi = ctx.cfg.refine.phi;
        let refiner = Refiner {
            iclip: &iclip,
            decoder: &decoder,
            support: &support,
            codec: &codec,
            sharpening: ctx.cfg.refine.sharpening,
        };
        let (refined, records) = refiner.refine(&corpus, phi)?;
        refined.write_manifest(&ctx.out.join(MANIFEST))?;
        write(&ctx.out.join("records.tsv"), report_tsv(&records).as_bytes())?;
        let g = grade(&records, &corpus)?;

        // Projection against direct decoding, on clean holdout pairs.
        let ids: Vec<usize> = split(ctx.cfg)?
            .holdout_ids()
            .into_iter()
            .filter(|&i| !corpus.samples[i].corrupted)
            .collect();
        let o: Vec<&Tensor> = ids.iter().map(|&i| &corpus.samples[i].original).collect();
        let e: Vec<&Tensor> = ids.iter().map(|&i| &corpus.samples[i].edited).collect();
        let z = refiner.change_embeddings(&o, &e)?;
        let exact = |p: Vec<Tokens>| {
            p.iter().zip(&ids).filter(|(t, &i)| **t == corpus.samples[i].gt_instruction).count() as f64 / ids.len().max(1) as f64
        };
        let projected = exact(refiner.propose(&z)?);
        let direct = exact(refiner.propose_direct(&z)?);

        let (_, again) = refiner.refine(&refined, phi)?;
        let rerefined = again.iter().filter(|r| r.replaced).count() as f64 / again.len().max(1) as f64;

        let mut r = Report::new();
        r.put("phi", phi)
            .put("sharpening", ctx.cfg.refine.sharpening)
            .put("samples", g.samples)
            .put("replaced", g.replaced)
            .put("recovery", opt(g.recovery))
            .put("preservation", opt(g.preservation))
            .put("mean_delta_replaced", opt(g.mean_delta_replaced))
            .put("corrupted_score_before", opt(g.corrupted_score_before))
            .put("corrupted_score_after", opt(g.corrupted_score_after))
            .put("chance_recovery", f(g.chance_recovery))
            .put("clean_holdout", ids.len())
            .put("projection_exact", f(projected))
            .put("direct_exact", f(direct))
            .put("rerefine_replaced", f(rerefined));
        Ok(r)
    }
}

fn corpus_for(root: &Path, arm: Arm, original: &Corpus) -> Result<Corpus> {
    if arm.refined() {
        load_refined(root)
    } else {
        Ok(original.clone())
    }
}

pub struct EditorStage;

impl Stage for EditorStage {
    fn name(&self) -> &'static str {
        "editor"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus", "codec", "ld", "iclip", "refine"]
    }
    fn artifacts(&self, cfg: &PipelineConfig) -> Vec<String> {
        let mut v = Vec::new();
        for arm in cfg.arms().unwrap_or_default() {
            for &seed in &cfg.editor.seeds {
                v.push(format!("{}/{DENOISER}", arm_dir(arm, seed)));
                v.push(format!("{}/losses.tsv", arm_dir(arm, seed)));
            }
        }
        v
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let corpus = load_corpus(ctx.root)?;
        let (codec, schedule) = load_codec(ctx.root)?;
        let iclip = load_iclip(ctx.root, load_ld(ctx.root, &schedule)?)?;
        let sp = split(ctx.cfg)?;
        let mut r = Report::new();
        r.put("lambda", ctx.cfg.editor.lambda).put("steps", ctx.cfg.editor.steps);
        for arm in ctx.cfg.arms()? {
            let data = corpus_for(ctx.root, arm, &corpus)?;
            for &seed in &ctx.cfg.editor.seeds {
                let (den, rep) = train_editor(&data, sp, &codec, &schedule, &iclip, arm, &ctx.cfg.editor_config(seed))?;
                let dir = ctx.out.join(arm_dir(arm, seed));
                fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
                save(&dir.join(DENOISER), den.params())?;
                let mut losses = String::from("step\ttotal\tmse\talignment\n");
                for (i, (t, m, a)) in rep.losses.iter().enumerate() {
                    let _ = writeln!(losses, "{i}\t{t:.6}\t{m:.6}\t{a:.6}");
                }
                write(&dir.join("losses.tsv"), losses.as_bytes())?;
                let tail = rep.losses.len().min(50).max(1);
                let mse = rep.losses.iter().rev().take(tail).map(|l| l.1).sum::<f64>() / tail as f64;
                r.put(format!("{}.train_mse_tail", arm_dir(arm, seed)), f(mse));
            }
        }
        Ok(r)
    }
}

/// Ablation metrics of one trained arm on the clean holdout.
pub fn evaluate_arm(root: &Path, cfg: &PipelineConfig, arm: Arm, seed: u64) -> Result<EvalReport> {
    let ctx = EvalContext::load(root, cfg)?;
    ctx.evaluate(&load_denoiser(root, arm, seed)?)
}

/// Frozen models and holdout ids shared by every evaluation.
pub struct EvalContext {
    pub corpus: Corpus,
    pub codec: iclip_core::diffusion::Codec,
    pub schedule: NoiseSchedule,
    pub iclip: iclip_core::encoders::IClip,
    pub teacher: iclip_core::backbone::FeatureBackbone,
    pub ids: Vec<usize>,
    pub seed: u64,
    pub sampling_steps: usize,
}

impl EvalContext {
    pub fn load(root: &Path, cfg: &PipelineConfig) -> Result<EvalContext> {
        let corpus = load_corpus(root)?;
        let (codec, schedule) = load_codec(root)?;
        let iclip = load_iclip(root, load_ld(root, &schedule)?)?;
        Ok(EvalContext {
            teacher: load_teacher(root)?,
            ids: split(cfg)?.holdout_ids(),
            corpus,
            codec,
            schedule,
            iclip,
            seed: cfg.eval.seed,
            sampling_steps: cfg.eval.sampling_steps,
        })
    }

    pub fn evaluate(&self, den: &Denoiser) -> Result<EvalReport> {
        Ok(evaluate_editor(
            den,
            &self.corpus,
            &self.ids,
            &self.codec,
            &self.schedule,
            &self.iclip,
            &self.teacher,
            self.seed,
            self.sampling_steps,
        )?
        .0)
    }

    fn scores(&self, outputs: &[&Tensor]) -> Result<Vec<EditScores>> {
        let s: Vec<_> = self.ids.iter().map(|&i| &self.corpus.samples[i]).collect();
        Ok(eval_metrics(
            &s.iter().map(|s| &s.original).collect::<Vec<_>>(),
            outputs,
            &s.iter().map(|s| &s.edited).collect::<Vec<_>>(),
            &s.iter().map(|s| s.gt_instruction).collect::<Vec<_>>(),
            &self.ids,
            &self.teacher,
            &self.iclip,
            &self.codec,
        )?)
    }
}

pub const ABLATION_COLUMNS: &str = "arm\tseed\tedit_mse\tclip_t\tclip_i\tdino_i\trecolor_hit_rate";

pub fn ablation_row(arm: &str, seed: &str, r: &EvalReport) -> String {
    format!(
        "{arm}\t{seed}\t{}\t{}\t{}\t{}\t{}",
        f(r.edit_mse),
        f(r.clip_t),
        f(r.clip_i),
        f(r.dino_i),
        opt(r.recolor_hit_rate)
    )
}

fn mean_report(scores: Vec<EditScores>, recolor: Option<f64>) -> EvalReport {
    let n = scores.len().max(1) as f64;
    let mean = |g: fn(&EditScores) -> f64| scores.iter().map(g).sum::<f64>() / n;
    EvalReport {
        edit_mse: mean(|s| s.edit_mse),
        clip_t: mean(|s| s.clip_t),
        clip_i: mean(|s| s.clip_i),
        dino_i: mean(|s| s.dino_i),
        recolor_hit_rate: recolor,
        samples: scores,
    }
}

fn mean_of(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len().max(1) as f64;
    let m = |g: fn(&EvalReport) -> f64| reports.iter().map(g).sum::<f64>() / n;
    let recolor: Vec<f64> = reports.iter().filter_map(|r| r.recolor_hit_rate).collect();
    EvalReport {
        edit_mse: m(|r| r.edit_mse),
        clip_t: m(|r| r.clip_t),
        clip_i: m(|r| r.clip_i),
        dino_i: m(|r| r.dino_i),
        recolor_hit_rate: (!recolor.is_empty()).then(|| recolor.iter().sum::<f64>() / recolor.len() as f64),
        samples: Vec::new(),
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.numel() as f64
}

pub struct EvalStage;

impl Stage for EvalStage {
    fn name(&self) -> &'static str {
        "eval"
    }
    fn deps(&self) -> &'static [&'static str] {
        &["corpus", "codec", "teacher", "ld", "iclip", "editor"]
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        ["ablation.tsv", "summary.tsv", "samples.tsv", "null_edit.tsv"].map(String::from).to_vec()
    }
    fn run(&self, ctx: &StageContext<'_>) -> Result<Report> {
        let ev = EvalContext::load(ctx.root, ctx.cfg)?;
        let mut ablation = format!("{ABLATION_COLUMNS}\n");
        let mut summary = format!("{ABLATION_COLUMNS}\n");
        let mut samples = String::from("arm\tseed\tid\tedit_mse\tclip_t\tclip_i\tdino_i\n");
        let mut r = Report::new();

        // Reference rows: doing nothing, and the ground-truth edit.
        let originals: Vec<&Tensor> = ev.ids.iter().map(|&i| &ev.corpus.samples[i].original).collect();
        let targets: Vec<&Tensor> = ev.ids.iter().map(|&i| &ev.corpus.samples[i].edited).collect();
        for (name, outs) in [("identity", &originals), ("ground_truth", &targets)] {
            let hits: Vec<(usize, usize)> = ev
                .ids
                .iter()
                .zip(outs.iter())
                .filter_map(|(&i, o)| recolor_hits(&ev.corpus.samples[i], o))
                .collect();
            let total: usize = hits.iter().map(|h| h.1).sum();
            let rate = (total > 0).then(|| hits.iter().map(|h| h.0).sum::<usize>() as f64 / total as f64);
            let rep = mean_report(ev.scores(outs)?, rate);
            summary.push_str(&ablation_row(name, "ref", &rep));
            summary.push('\n');
        }

        let mut last = None;
        for arm in ctx.cfg.arms()? {
            let mut per_seed = Vec::new();
            for &seed in &ctx.cfg.editor.seeds {
                ctx.input("editor", &format!("{}/{DENOISER}", arm_dir(arm, seed)))?;
                let den = load_denoiser(ctx.root, arm, seed)?;
                let rep = ev.evaluate(&den)?;
                ablation.push_str(&ablation_row(arm.name(), &seed.to_string(), &rep));
                ablation.push('\n');
                for s in &rep.samples {
                    let _ = writeln!(
                        samples,
                        "{arm}\t{seed}\t{}\t{}\t{}\t{}\t{}",
                        s.id,
                        f(s.edit_mse),
                        f(s.clip_t),
                        f(s.clip_i),
                        f(s.dino_i)
                    );
                }
                per_seed.push(rep);
                last = Some(den);
            }
            let m = mean_of(&per_seed);
            summary.push_str(&ablation_row(arm.name(), "mean", &m));
            summary.push('\n');
            r.put(format!("{arm}.edit_mse"), f(m.edit_mse))
                .put(format!("{arm}.clip_t"), f(m.clip_t))
                .put(format!("{arm}.recolor_hit_rate"), opt(m.recolor_hit_rate));
        }

        // Null edit: an empty instruction on the last trained denoiser,
        // against a decoded random latent.
        let den = last.ok_or_else(|| PipelineError::Config("no editor arm to evaluate".into()))?;
        let null = tokenize("")?;
        let text = unit_rows(ev.iclip.encode_text(&vec![null; ev.ids.len()])?);
        let lo = ev.codec.encode(&originals)?;
        let ids: Vec<u64> = ev.ids.iter().map(|&i| i as u64).collect();
        let lat = den.sample(
            &ev.schedule,
            &lo.iter().collect::<Vec<_>>(),
            &text.iter().collect::<Vec<_>>(),
            &ids,
            ev.sampling_steps,
            ev.seed,
        )?;
        let outs = ev.codec.decode(&lat.iter().collect::<Vec<_>>())?;
        let rng = RngStream::new(ev.seed, "null-edit-random");
        let random: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                let mut g = rng.fork(id);
                Tensor::from_fn(&[LATENT_SIDE, LATENT_SIDE, LATENT_C], |_| g.normal() as f32)
            })
            .collect();
        let random = ev.codec.decode(&random.iter().collect::<Vec<_>>())?;
        let mut null_tsv = String::from("id\tnull_to_original\trandom_to_original\n");
        let (mut dn, mut dr) = (0.0, 0.0);
        for ((&id, o), (n, x)) in ev.ids.iter().zip(&originals).zip(outs.iter().zip(&random)) {
            let (a, b) = (mse(n, o), mse(x, o));
            dn += a;
            dr += b;
            let _ = writeln!(null_tsv, "{id}\t{}\t{}", f(a), f(b));
        }
        let n = ev.ids.len().max(1) as f64;
        r.put("null_edit_mse", f(dn / n)).put("random_output_mse", f(dr / n));

        write(&ctx.out.join("ablation.tsv"), ablation.as_bytes())?;
        write(&ctx.out.join("summary.tsv"), summary.as_bytes())?;
        write(&ctx.out.join("samples.tsv"), samples.as_bytes())?;
        write(&ctx.out.join("null_edit.tsv"), null_tsv.as_bytes())?;
        Ok(r)
    }
}

/// Every stage, in a valid registration order.
pub fn standard_registry() -> Registry {
    let mut r = Registry::new();
    let stages: Vec<Box<dyn Stage>> = vec![
        Box::new(CorpusStage),
        Box::new(CodecStage),
        Box::new(TeacherStage),
        Box::new(LdStage),
        Box::new(IClipStage),
        Box::new(DecoderStage),
        Box::new(RefineStage),
        Box::new(EditorStage),
        Box::new(EvalStage),
    ];
    for s in stages {
        r.register(s).expect("stage names are distinct");
    }
    r
}

/// Edits one image with a trained arm.
pub fn edit_image(root: &Path, cfg: &PipelineConfig, arm: Arm, seed: u64, image: &Tensor, instruction: &str) -> Result<Tensor> {
    let (codec, schedule) = load_codec(root)?;
    let iclip = load_iclip(root, load_ld(root, &schedule)?)?;
    let den = load_denoiser(root, arm, seed)?;
    let tokens = tokenize(instruction)?;
    let text = unit_rows(iclip.encode_text(&[tokens])?).remove(0);
    let lo = codec.encode(&[image])?;
    let lat = den.sample(&schedule, &[&lo[0]], &[&text], &[0], cfg.eval.sampling_steps, cfg.eval.seed)?;
    Ok(codec.decode(&[&lat[0]])?.remove(0))
}
