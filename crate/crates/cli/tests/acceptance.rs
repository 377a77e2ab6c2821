//! End-to-end acceptance: one PASS/FAIL line per criterion. Runs the
//! gradient suite, the analytic identities, and two full `run all`
//! invocations of the frozen config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use iclip_core::backbone::{lddino_loss, BackboneSpec, FeatureBackbone, FeatureStack, InputMode};
use iclip_core::corpus::instruction_space;
use iclip_core::decoder::{project_visual, SupportSet};
use iclip_core::diffusion::{fd, rd, NoiseSchedule};
use iclip_core::encoders::{contrastive_loss, init_iclip, ChangeInput, IClip};
use iclip_core::gradsuite::run_model_suite;
use iclip_core::nn::Arch;
use iclip_numerics::opsuite::{run_op_suite, OP_FD_STEP};
use iclip_numerics::{Graph, RngStream, Tensor};
use iclip_pipeline::registry::{Report, TIMING_FILE};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const RUN_BUDGET_SECONDS: f64 = 45.0 * 60.0;
const RSS_BUDGET_KB: u64 = 2 * 1024 * 1024;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Ledger {
    lines: Vec<(u8, bool, String)>,
}

impl Ledger {
    fn record(&mut self, id: u8, name: &str, pass: bool, detail: String) {
        println!("criterion {id} {name}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, pass, detail));
    }
}

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

fn unit_rows(rng: &mut RngStream, n: usize, w: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let r = randn(rng, &[w]);
            let s = r.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            r.map(|v| v / s)
        })
        .collect()
}

fn gradient_suite() -> (bool, String) {
    let start = Instant::now();
    let ops = run_op_suite(100, OP_FD_STEP).expect("op suite runs");
    let models = run_model_suite(100).expect("model suite runs");
    let elapsed = start.elapsed();
    let worst_op = ops.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let worst_model = models.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let editor = models.iter().find(|m| m.objective == "editor_total").unwrap();
    let pass = worst_op.max_rel_err <= GRAD_TOL && worst_model.max_rel_err <= GRAD_TOL && elapsed < GRAD_BUDGET;
    (
        pass,
        format!(
            "{} ops + {} objectives x 100 seeds; worst op {} {:.2e}, worst objective {} {:.2e}, full editor loss {:.2e}; {:.1}s",
            ops.len(),
            models.len(),
            worst_op.op,
            worst_op.max_rel_err,
            worst_model.objective,
            worst_model.max_rel_err,
            editor.max_rel_err,
            elapsed.as_secs_f64()
        ),
    )
}

fn analytic_losses() -> (bool, String) {
    let mut rng = RngStream::new(11, "acceptance-analytic");
    let a = randn(&mut rng, &[16]);
    let b = randn(&mut rng, &[16]);
    let mut err = contrastive_loss(&[a.clone()], &[b.clone()], 0.07).unwrap().abs();
    for n in [2usize, 5, 32] {
        let l = contrastive_loss(&vec![a.clone(); n], &vec![b.clone(); n], 0.07).unwrap();
        err = err.max((l - 2.0 * (n as f64).ln()).abs());
    }
    let contrastive = err;

    let mut ce = 0.0f64;
    for c in [2usize, 10, 48] {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::full(&[3, c], 0.7));
        let l = g.cross_entropy(logits, &[0, c / 2, c - 1], &[1.0; 3]).unwrap();
        ce = ce.max((g.value(l).item() - (c as f64).ln()).abs());
    }

    let e = |i: usize| Tensor::from_fn(&[8], |j| if i == j { 1.0 } else { 0.0 });
    let inter: Vec<Tensor> = (0..4).map(|_| randn(&mut rng, &[16, 8])).collect();
    let stack = |f: Tensor, i: Vec<Tensor>| FeatureStack {
        final_feature: f,
        intermediates: i,
    };
    let same = stack(randn(&mut rng, &[8]), inter.clone());
    let l0 = lddino_loss(&same, &same).unwrap();
    let l1 = lddino_loss(&stack(e(0), inter.clone()), &stack(e(1), inter)).unwrap();
    let half = |parity: usize| (0..4).map(|_| Tensor::from_fn(&[16, 8], |j| if j % 2 == parity { 1.0 } else { 0.0 })).collect();
    let l2 = lddino_loss(&stack(e(0), half(0)), &stack(e(1), half(1))).unwrap();
    let ld = l0.abs().max((l1 - 1.0).abs()).max((l2 - 2.0).abs());
    let pass = contrastive <= 1e-6 && ce <= 1e-6 && ld <= 1e-6;
    (
        pass,
        format!("contrastive err {contrastive:.1e}, cross-entropy err {ce:.1e}, distill 0/1/2 -> {l0:.2e}/{l1:.6}/{l2:.6}"),
    )
}

fn diffusion_identities() -> (bool, String) {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = RngStream::new(12, "acceptance-diffusion");
    let l = randn(&mut rng, &[8, 8, 4]);
    let n = randn(&mut rng, &[8, 8, 4]);
    let identity = fd(&s, &l, &n, 0).unwrap().latent == l;

    let mut tele = 0.0f64;
    for _ in 0..10 {
        let l: Tensor<f64> = randn(&mut rng, &[8, 8, 4]).cast();
        let n: Tensor<f64> = randn(&mut rng, &[8, 8, 4]).cast();
        for k in 1..=s.steps() {
            let mut st = fd(&s, &l, &n, k).unwrap();
            while st.k > 0 {
                st = rd(&s, &st, &n).unwrap();
            }
            tele = tele.max(st.latent.max_abs_diff(&l));
        }
    }

    let mut var_err = 0.0f64;
    for k in [1, 10, 25, 40, 50] {
        let (mut acc, mut count) = (0.0, 0usize);
        for _ in 0..500 {
            let x = fd(&s, &randn(&mut rng, &[8, 8, 4]), &randn(&mut rng, &[8, 8, 4]), k).unwrap().latent;
            acc += x.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
            count += x.numel();
        }
        var_err = var_err.max((acc / count as f64 - 1.0).abs());
    }
    let pass = identity && tele <= 1e-5 && var_err <= 0.05;
    (
        pass,
        format!("fd(k=0) identity {identity}, telescoping max-abs {tele:.2e}, variance deviation {:.2}%", var_err * 100.0),
    )
}

fn zero_difference_collapse() -> (bool, String) {
    let tiny = Arch { width: 16, layers: 2 };
    let spec = BackboneSpec {
        mode: InputMode::Latent,
        arch: tiny,
        t_max: 50,
    };
    let iclip = IClip::new(init_iclip(tiny, 13), FeatureBackbone::new(spec, spec.init(14)).unwrap()).unwrap();
    let mut rng = RngStream::new(13, "acceptance-collapse");
    let xs: Vec<Tensor> = (0..16).map(|_| randn(&mut rng, &[8, 8, 4])).collect();
    let inputs: Vec<ChangeInput> = xs.iter().enumerate().map(|(i, x)| ChangeInput::Latent(x, (i * 7) % 51)).collect();
    let z = iclip.encode_change(&inputs, &inputs).unwrap();
    let pass = z.windows(2).all(|w| w[0] == w[1]);
    (pass, format!("{} inputs (mixed timesteps) -> {} distinct embeddings", z.len(), 1 + z.windows(2).filter(|w| w[0] != w[1]).count()))
}

fn projection_identities(refine: &Report) -> (bool, String) {
    let mut rng = RngStream::new(15, "acceptance-projection");
    let rows = unit_rows(&mut rng, 24, 16);
    let space = instruction_space();
    let support = SupportSet {
        tokens: (0..rows.len()).map(|i| space[i]).collect(),
        rows: rows.clone(),
    };
    let (mut sum_err, mut argmax_ok) = (0.0f64, true);
    for _ in 0..100 {
        let z = randn(&mut rng, &[16]);
        let w = support.weights(&z, 0.5).unwrap();
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        let best = (0..rows.len())
            .max_by(|&a, &b| {
                iclip_numerics::cosine(rows[a].data(), z.data()).total_cmp(&iclip_numerics::cosine(rows[b].data(), z.data()))
            })
            .unwrap();
        argmax_ok &= project_visual(&z, &support, 1e-6).unwrap().max_abs_diff(&rows[best]) <= 1e-5;
    }
    let projected: f64 = refine.get("projection_exact").unwrap().parse().unwrap();
    let direct: f64 = refine.get("direct_exact").unwrap().parse().unwrap();
    let pass = sum_err <= 1e-6 && argmax_ok && projected > direct;
    (
        pass,
        format!(
            "weight-sum err {sum_err:.1e}, retrieval limit {argmax_ok}, clean-holdout exact match projection {projected:.3} vs direct {direct:.3}"
        ),
    )
}

fn thresholds() -> toml::Table {
    let text = fs::read_to_string(repo().join("configs/thresholds.toml")).expect("thresholds file");
    text.parse().expect("thresholds parse")
}

fn threshold(t: &toml::Table, section: &str, key: &str) -> f64 {
    t[section][key].as_float().unwrap_or_else(|| panic!("threshold {section}.{key}"))
}

fn num(r: &Report, key: &str) -> f64 {
    r.get(key).unwrap_or_else(|| panic!("report lacks {key}")).parse().unwrap()
}

fn refinement_recovery(refine: &Report, cfg: &toml::Table, t: &toml::Table) -> (bool, String) {
    let count = cfg["corpus"]["count"].as_integer().unwrap();
    let rate = cfg["corpus"]["corruption_rate"].as_float().unwrap();
    let phi = num(refine, "phi");
    let recovery = num(refine, "recovery");
    let preservation = num(refine, "preservation");
    let delta = num(refine, "mean_delta_replaced");
    let (before, after) = (num(refine, "corrupted_score_before"), num(refine, "corrupted_score_after"));
    let rerefine = num(refine, "rerefine_replaced");
    let (tr, tp, ti) = (threshold(t, "refine", "recovery"), threshold(t, "refine", "preservation"), threshold(t, "refine", "rerefine_max"));
    let pass = count == 2000
        && (rate - 0.3).abs() < 1e-12
        && recovery >= tr
        && preservation >= tp
        && delta >= phi - 1e-6
        && after > before
        && rerefine <= ti;
    (
        pass,
        format!(
            "{count} samples @ {rate}: recovery {recovery:.3} (>= {tr}, chance {}), preservation {preservation:.3} (>= {tp}), replaced mean delta {delta:.3} (>= {phi}), corrupted score {before:.3} -> {after:.3}, re-refine replaces {:.1}% (<= {:.0}%)",
            refine.get("chance_recovery").unwrap(),
            rerefine * 100.0,
            ti * 100.0
        ),
    )
}

/// `arm → seed → (edit_mse, clip_t)` from the ablation table.
fn ablation(run: &Path) -> BTreeMap<String, BTreeMap<String, (f64, f64)>> {
    let text = fs::read_to_string(run.join("eval/ablation.tsv")).unwrap();
    let mut out: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split('\t').collect();
        out.entry(c[0].to_string())
            .or_default()
            .insert(c[1].to_string(), (c[2].parse().unwrap(), c[3].parse().unwrap()));
    }
    out
}

fn ablation_ordering(run: &Path) -> (bool, String) {
    let table = ablation(run);
    let mean = |arm: &str| {
        let rows = &table[arm];
        let n = rows.len() as f64;
        (rows.values().map(|r| r.0).sum::<f64>() / n, rows.values().map(|r| r.1).sum::<f64>() / n)
    };
    let (full, refined, orig) = (mean("refined+loss"), mean("refined"), mean("orig"));
    let mse_order = full.0 <= refined.0 && refined.0 <= orig.0;
    let clip_order = full.1 >= refined.1 && refined.1 >= orig.1;
    let seeds: Vec<&String> = table["refined+loss"].keys().collect();
    let wins = seeds
        .iter()
        .filter(|s| {
            let f = table["refined+loss"][**s];
            let others: Vec<(f64, f64)> = table.iter().filter(|(a, _)| *a != "refined+loss").map(|(_, r)| r[**s]).collect();
            others.iter().all(|o| f.0 < o.0) || others.iter().all(|o| f.1 > o.1)
        })
        .count();
    let majority = 2 * wins > seeds.len();
    let pass = seeds.len() >= 3 && mse_order && clip_order && majority;
    (
        pass,
        format!(
            "{} seeds; edit-MSE full {:.4} / refined {:.4} / orig {:.4} (ordered {mse_order}); CLIP-T {:.4} / {:.4} / {:.4} (ordered {clip_order}); full arm strictly best on a metric in {wins}/{} seeds",
            seeds.len(),
            full.0,
            refined.0,
            orig.0,
            full.1,
            refined.1,
            orig.1,
            seeds.len()
        ),
    )
}

fn budget(run: &Path) -> (bool, String) {
    let text = fs::read_to_string(run.join(TIMING_FILE)).unwrap();
    let (mut wall, mut rss) = (0.0f64, 0u64);
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split('\t').collect();
        wall += c[1].parse::<f64>().unwrap();
        rss = rss.max(c[2].parse().unwrap_or(u64::MAX));
    }
    let pass = wall < RUN_BUDGET_SECONDS && rss < RSS_BUDGET_KB;
    (
        pass,
        format!(
            "run all {:.1} min (< 45, measured on {} core(s)), peak RSS {:.0} MB (< 2048)",
            wall / 60.0,
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            rss as f64 / 1024.0
        ),
    )
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out.remove(Path::new(TIMING_FILE));
    out
}

fn determinism(a: &Path, b: &Path) -> (bool, String) {
    let (fa, fb) = (files(a), files(b));
    let differing: Vec<&PathBuf> = fa.keys().chain(fb.keys()).filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let checkpoints = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "ick")).count();
    let reports = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "tsv")).count();
    (
        differing.is_empty() && !fa.is_empty(),
        format!(
            "{} files ({checkpoints} checkpoints, {reports} reports) compared byte-for-byte; {} differ{}",
            fa.len(),
            differing.len(),
            differing.first().map_or(String::new(), |p| format!(", first {}", p.display()))
        ),
    )
}

fn run_all(out: &Path) {
    if out.exists() {
        fs::remove_dir_all(out).unwrap();
    }
    let config = repo().join("configs/frozen.toml");
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_iclip"))
        .args(["run", "all", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(out)
        .status()
        .expect("spawn iclip");
    assert!(status.success(), "run all failed: {status}");
    println!("# run all into {} took {:.1} min", out.display(), start.elapsed().as_secs_f64() / 60.0);
}

fn main() {
    let mut ledger = Ledger { lines: Vec::new() };

    let (p, d) = gradient_suite();
    ledger.record(1, "gradient-suite", p, d);
    let (p, d) = analytic_losses();
    ledger.record(2, "analytic-losses", p, d);
    let (p, d) = diffusion_identities();
    ledger.record(3, "diffusion-identities", p, d);
    let (p, d) = zero_difference_collapse();
    ledger.record(4, "zero-difference-collapse", p, d);

    let base = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let (run1, run2) = (base.join("run1"), base.join("run2"));
    run_all(&run1);
    run_all(&run2);
    let refine = Report::read(&run1.join("refine/report.tsv")).unwrap();
    let cfg: toml::Table = fs::read_to_string(repo().join("configs/frozen.toml")).unwrap().parse().unwrap();
    let t = thresholds();

    let (p, d) = projection_identities(&refine);
    ledger.record(5, "projection-identities", p, d);
    let (p, d) = refinement_recovery(&refine, &cfg, &t);
    ledger.record(6, "refinement-recovery", p, d);
    let (p, d) = ablation_ordering(&run1);
    ledger.record(7, "ablation-ordering", p, d);
    let (p, d) = budget(&run1);
    ledger.record(8, "end-to-end-budget", p, d);
    let (p, d) = determinism(&run1, &run2);
    ledger.record(9, "determinism", p, d);

    let failed: Vec<u8> = ledger.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    println!("# {} of {} criteria pass", ledger.lines.len() - failed.len(), ledger.lines.len());
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
