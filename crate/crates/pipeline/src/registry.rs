//! Stages are trait objects registered by name. The runner checks upstream
//! artifacts, stages outputs in a scratch directory, verifies that inputs
//! were left untouched, and only then renames the stage directory into
//! place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};

pub const REPORT_FILE: &str = "report.tsv";
pub const CONFIG_FILE: &str = "config.toml";
pub const TIMING_FILE: &str = "timing.tsv";

/// Ordered `key → value` report, written as two tab-separated columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report(pub Vec<(String, String)>);

impl Report {
    pub fn new() -> Report {
        Report::default()
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("key\tvalue\n");
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k}\t{v}");
        }
        s
    }

    pub fn parse(text: &str) -> Report {
        Report(
            text.lines()
                .skip(1)
                .filter_map(|l| l.split_once('\t'))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Report> {
        Ok(Report::parse(&fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?))
    }
}

/// What a stage sees while it runs.
pub struct StageContext<'a> {
    pub cfg: &'a PipelineConfig,
    pub root: &'a Path,
    /// Scratch directory the stage writes into.
    pub out: &'a Path,
    stage: &'static str,
    registry: &'a Registry,
}

impl StageContext<'_> {
    /// Path to an upstream artifact; errors name the producing stage.
    pub fn input(&self, producer: &str, file: &str) -> Result<PathBuf> {
        let path = self.root.join(producer).join(file);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact {
                stage: self.stage.to_string(),
                path,
                producer: producer.to_string(),
            });
        }
        debug_assert!(self.registry.get(producer).is_ok());
        Ok(path)
    }

    pub fn stage_dir(&self, producer: &str) -> Result<PathBuf> {
        self.input(producer, REPORT_FILE)?;
        Ok(self.root.join(producer))
    }
}

pub trait Stage: Send + Sync {
    fn name(&self) -> &'static str;

    /// Stages whose outputs this one reads.
    fn deps(&self) -> &'static [&'static str];

    /// Files (relative to the stage directory) a finished run leaves behind,
    /// besides the report and resolved config.
    fn artifacts(&self, cfg: &PipelineConfig) -> Vec<String>;

    fn run(&self, ctx: &StageContext<'_>) -> Result<Report>;
}

#[derive(Default)]
pub struct Registry {
    stages: Vec<Box<dyn Stage>>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn register(&mut self, stage: Box<dyn Stage>) -> Result<()> {
        if self.get(stage.name()).is_ok() {
            return Err(PipelineError::Config(format!("stage `{}` registered twice", stage.name())));
        }
        self.stages.push(stage);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&dyn Stage> {
        self.stages
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| PipelineError::UnknownStage(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.name()).collect()
    }

    /// Dependency order; ties keep registration order.
    pub fn order(&self) -> Result<Vec<&dyn Stage>> {
        let mut done: Vec<&str> = Vec::new();
        let mut out = Vec::new();
        while out.len() < self.stages.len() {
            let next = self
                .stages
                .iter()
                .find(|s| !done.contains(&s.name()) && s.deps().iter().all(|d| done.contains(d)));
            match next {
                Some(s) => {
                    done.push(s.name());
                    out.push(s.as_ref());
                }
                None => {
                    let stuck: Vec<_> = self.names().into_iter().filter(|n| !done.contains(n)).collect();
                    return Err(PipelineError::Config(format!("unsatisfiable stage dependencies among {stuck:?}")));
                }
            }
        }
        Ok(out)
    }
}

/// Digest of every file under `dir`, keyed by relative path.
pub fn hash_dir(dir: &Path) -> Result<[u8; 32]> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel)).map_err(|e| PipelineError::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().into())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| PipelineError::io(dir, e))?;
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Peak resident set size of this process so far, where the OS reports it.
pub fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub wall: Duration,
    pub report: Report,
}

pub struct Runner<'a> {
    pub registry: &'a Registry,
    pub cfg: &'a PipelineConfig,
    pub root: PathBuf,
}

impl Runner<'_> {
    pub fn run_stage(&self, name: &str) -> Result<StageOutcome> {
        let stage = self.registry.get(name)?;
        fs::create_dir_all(&self.root).map_err(|e| PipelineError::io(&self.root, e))?;
        for dep in stage.deps() {
            let producer = self.registry.get(dep)?;
            let mut files = producer.artifacts(self.cfg);
            files.push(REPORT_FILE.into());
            for f in files {
                let path = self.root.join(dep).join(&f);
                if !path.exists() {
                    return Err(PipelineError::MissingArtifact {
                        stage: name.to_string(),
                        path,
                        producer: dep.to_string(),
                    });
                }
            }
        }
        let before = stage
            .deps()
            .iter()
            .map(|d| hash_dir(&self.root.join(d)))
            .collect::<Result<Vec<_>>>()?;

        let staging = self.root.join(format!(".{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| PipelineError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| PipelineError::io(&staging, e))?;
        let start = Instant::now();
        let result = self.execute(stage, &staging, &before);
        let wall = start.elapsed();
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
        };
        let dest = self.root.join(name);
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(|e| PipelineError::io(&dest, e))?;
        }
        fs::rename(&staging, &dest).map_err(|e| PipelineError::io(&dest, e))?;
        self.record_timing(name, wall)?;
        Ok(StageOutcome {
            stage: stage.name(),
            wall,
            report,
        })
    }

    fn execute(&self, stage: &dyn Stage, staging: &Path, before: &[[u8; 32]]) -> Result<Report> {
        let ctx = StageContext {
            cfg: self.cfg,
            root: &self.root,
            out: staging,
            stage: stage.name(),
            registry: self.registry,
        };
        let body = stage.run(&ctx)?;
        for (dep, h) in stage.deps().iter().zip(before) {
            if hash_dir(&self.root.join(dep))? != *h {
                return Err(PipelineError::InputMutated {
                    stage: stage.name().to_string(),
                    input: dep.to_string(),
                });
            }
        }
        let mut report = Report::new();
        report.put("stage", stage.name()).put("version", env!("CARGO_PKG_VERSION"));
        report.0.extend(body.0);
        write(&staging.join(REPORT_FILE), report.to_tsv().as_bytes())?;
        write(&staging.join(CONFIG_FILE), self.cfg.to_toml().as_bytes())?;
        Ok(report)
    }

    /// Wall time and peak memory live outside the stage directories so the
    /// artifacts themselves stay byte-reproducible.
    fn record_timing(&self, name: &str, wall: Duration) -> Result<()> {
        let path = self.root.join(TIMING_FILE);
        let mut rows: BTreeMap<String, String> = fs::read_to_string(&path)
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter_map(|l| l.split_once('\t'))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let rss = peak_rss_kb().map_or_else(|| "NA".to_string(), |v| v.to_string());
        rows.insert(name.to_string(), format!("{:.3}\t{rss}", wall.as_secs_f64()));
        let mut s = String::from("stage\twall_seconds\tpeak_rss_kb\n");
        for k in self.registry.names() {
            if let Some(v) = rows.get(k) {
                let _ = writeln!(s, "{k}\t{v}");
            }
        }
        write(&path, s.as_bytes())
    }

    pub fn run_all(&self, mut on_done: impl FnMut(&StageOutcome)) -> Result<Vec<StageOutcome>> {
        let mut out = Vec::new();
        for stage in self.registry.order()? {
            let o = self.run_stage(stage.name())?;
            on_done(&o);
            out.push(o);
        }
        Ok(out)
    }
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    iclip_numerics::write_atomic(path, bytes).map_err(|e| PipelineError::Core(e.into()))
}
