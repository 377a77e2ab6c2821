use std::fs;
use std::path::Path;

use iclip_pipeline::artifacts::validate_artifacts;
use iclip_pipeline::registry::{hash_dir, TIMING_FILE};
use iclip_pipeline::{standard_registry, PipelineConfig, PipelineError, Registry, Report, Runner, Stage, StageContext};

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.corpus.count = 24;
    cfg.corpus.holdout = 6;
    cfg
}

#[test]
fn config_rejects_unknown_keys_and_round_trips() {
    let err = PipelineConfig::parse("[corpus]\ncount = 10\ncolour = 3\n").unwrap_err();
    assert!(err.to_string().contains("colour"), "{err}");
    assert!(PipelineConfig::parse("[nonsense]\nx = 1\n").is_err());

    let cfg = PipelineConfig::parse("[refine]\nphi = 0.25\n[editor]\narms = [\"refined\"]\nseeds = [4]\n").unwrap();
    assert_eq!(cfg.refine.phi, 0.25);
    assert_eq!(cfg.corpus, PipelineConfig::default().corpus);
    assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn config_validation_and_seed_overrides() {
    assert!(PipelineConfig::parse("[refine]\nphi = -1.0\n").is_err());
    assert!(PipelineConfig::parse("[editor]\narms = [\"sideways\"]\n").is_err());
    assert!(PipelineConfig::parse("[corpus]\ncount = 10\nholdout = 10\n").is_err());

    let mut cfg = PipelineConfig::default();
    cfg.set_seed("iclip", 9).unwrap();
    assert_eq!(cfg.iclip.seed, 9);
    assert_eq!(cfg.ld.seed, 0);
    cfg.set_seed("all", 3).unwrap();
    assert!([cfg.corpus.seed, cfg.codec.seed, cfg.teacher.seed, cfg.decoder.seed].iter().all(|&s| s == 3));
    assert_eq!(cfg.editor.seeds, vec![3]);
    assert!(cfg.set_seed("nope", 1).is_err());
}

struct Fake {
    name: &'static str,
    deps: &'static [&'static str],
    behaviour: Behaviour,
}

#[derive(Clone, Copy)]
enum Behaviour {
    Write,
    Fail,
    MutateInput,
}

impl Stage for Fake {
    fn name(&self) -> &'static str {
        self.name
    }
    fn deps(&self) -> &'static [&'static str] {
        self.deps
    }
    fn artifacts(&self, _: &PipelineConfig) -> Vec<String> {
        vec!["out.txt".into()]
    }
    fn run(&self, ctx: &StageContext<'_>) -> iclip_pipeline::Result<Report> {
        for d in self.deps {
            ctx.input(d, "out.txt")?;
        }
        fs::write(ctx.out.join("out.txt"), self.name).unwrap();
        match self.behaviour {
            Behaviour::Write => {}
            Behaviour::Fail => return Err(PipelineError::Config("boom".into())),
            Behaviour::MutateInput => fs::write(ctx.root.join(self.deps[0]).join("out.txt"), "changed").unwrap(),
        }
        let mut r = Report::new();
        r.put("name", self.name);
        Ok(r)
    }
}

fn fake(name: &'static str, deps: &'static [&'static str], behaviour: Behaviour) -> Box<dyn Stage> {
    Box::new(Fake { name, deps, behaviour })
}

#[test]
fn registry_orders_by_dependencies_and_rejects_duplicates_and_cycles() {
    let mut r = Registry::new();
    r.register(fake("c", &["b"], Behaviour::Write)).unwrap();
    r.register(fake("a", &[], Behaviour::Write)).unwrap();
    r.register(fake("b", &["a"], Behaviour::Write)).unwrap();
    r.register(fake("d", &[], Behaviour::Write)).unwrap();
    let order: Vec<_> = r.order().unwrap().iter().map(|s| s.name()).collect();
    assert_eq!(order, ["a", "b", "c", "d"]);
    assert!(r.register(fake("a", &[], Behaviour::Write)).is_err());
    assert!(matches!(r.get("zz"), Err(PipelineError::UnknownStage(_))));

    let mut cyc = Registry::new();
    cyc.register(fake("x", &["y"], Behaviour::Write)).unwrap();
    cyc.register(fake("y", &["x"], Behaviour::Write)).unwrap();
    assert!(cyc.order().is_err());
}

#[test]
fn standard_stages_run_in_pipeline_order() {
    let r = standard_registry();
    let order: Vec<_> = r.order().unwrap().iter().map(|s| s.name()).collect();
    assert_eq!(order, ["corpus", "codec", "teacher", "ld", "iclip", "decoder", "refine", "editor", "eval"]);
}

fn runner_fixture() -> Registry {
    let mut r = Registry::new();
    r.register(fake("a", &[], Behaviour::Write)).unwrap();
    r.register(fake("b", &["a"], Behaviour::Write)).unwrap();
    r.register(fake("fails", &["a"], Behaviour::Fail)).unwrap();
    r.register(fake("mutates", &["a"], Behaviour::MutateInput)).unwrap();
    r
}

fn leftovers(root: &Path) -> Vec<String> {
    fs::read_dir(root)
        .unwrap()
        .flatten()
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial"))
        .collect()
}

#[test]
fn missing_upstream_names_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let reg = runner_fixture();
    let cfg = PipelineConfig::default();
    let runner = Runner { registry: &reg, cfg: &cfg, root: dir.path().to_path_buf() };
    let err = runner.run_stage("b").unwrap_err();
    match &err {
        PipelineError::MissingArtifact { stage, producer, .. } => {
            assert_eq!(stage, "b");
            assert_eq!(producer, "a");
        }
        e => panic!("unexpected {e}"),
    }
    assert!(err.to_string().contains("run `a` first"), "{err}");
    assert!(!dir.path().join("b").exists());
}

#[test]
fn runner_writes_reports_and_never_leaves_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let reg = runner_fixture();
    let cfg = PipelineConfig::default();
    let runner = Runner { registry: &reg, cfg: &cfg, root: dir.path().to_path_buf() };
    runner.run_stage("a").unwrap();
    let out = runner.run_stage("b").unwrap();
    assert_eq!(out.report.get("stage"), Some("b"));
    assert_eq!(out.report.get("name"), Some("b"));
    let report = Report::read(&dir.path().join("b/report.tsv")).unwrap();
    assert_eq!(report, out.report);
    assert_eq!(PipelineConfig::load(&dir.path().join("b/config.toml")).unwrap(), cfg);
    let timing = fs::read_to_string(dir.path().join(TIMING_FILE)).unwrap();
    assert!(timing.starts_with("stage\twall_seconds\tpeak_rss_kb\n"));
    assert_eq!(timing.lines().count(), 3);

    assert!(runner.run_stage("fails").is_err());
    assert!(!dir.path().join("fails").exists());
    assert!(leftovers(dir.path()).is_empty());
}

#[test]
fn stages_that_touch_their_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let reg = runner_fixture();
    let cfg = PipelineConfig::default();
    let runner = Runner { registry: &reg, cfg: &cfg, root: dir.path().to_path_buf() };
    runner.run_stage("a").unwrap();
    let before = hash_dir(&dir.path().join("a")).unwrap();
    runner.run_stage("b").unwrap();
    assert_eq!(hash_dir(&dir.path().join("a")).unwrap(), before);
    let err = runner.run_stage("mutates").unwrap_err();
    assert!(matches!(err, PipelineError::InputMutated { ref input, .. } if input == "a"), "{err}");
    assert!(!dir.path().join("mutates").exists());
    assert!(leftovers(dir.path()).is_empty());
}

#[test]
fn validation_flags_truncation_and_stale_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let reg = standard_registry();
    let cfg = small_config();
    let runner = Runner { registry: &reg, cfg: &cfg, root: dir.path().to_path_buf() };
    runner.run_stage("corpus").unwrap();
    let findings = validate_artifacts(dir.path(), &reg, &cfg);
    assert!(findings.len() > 2 * cfg.corpus.count);
    assert!(findings.iter().all(|f| f.ok), "{:?}", findings.iter().find(|f| !f.ok));

    let image = dir.path().join("corpus/images/00003_o.ict");
    let bytes = fs::read(&image).unwrap();
    fs::write(&image, &bytes[..bytes.len() - 10]).unwrap();
    let manifest = dir.path().join("corpus/manifest.tsv");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\tv1\n", "\tv0\n", 1)).unwrap();

    let findings = validate_artifacts(dir.path(), &reg, &cfg);
    let bad: Vec<_> = findings.iter().filter(|f| !f.ok).collect();
    assert_eq!(bad.len(), 2, "{bad:?}");
    let trunc = bad.iter().find(|f| f.path == image).expect("truncated image flagged");
    assert!(trunc.detail.contains("offset"), "{}", trunc.detail);
    let stale = bad.iter().find(|f| f.path == manifest).expect("manifest flagged");
    assert!(stale.detail.contains("v0") && stale.detail.contains("v1"), "{}", stale.detail);
}

#[test]
fn validation_reports_missing_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let reg = standard_registry();
    let cfg = small_config();
    let runner = Runner { registry: &reg, cfg: &cfg, root: dir.path().to_path_buf() };
    runner.run_stage("corpus").unwrap();
    fs::remove_file(dir.path().join("corpus/report.tsv")).unwrap();
    let findings = validate_artifacts(dir.path(), &reg, &cfg);
    assert!(findings.iter().any(|f| !f.ok && f.detail.contains("missing")));
    let err = runner.run_stage("codec").unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { .. }), "{err}");
}
