use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use scenegen::causal::{ttc_mask_states, BoolMatrix, CausalRank, DecisionCausalGraph};
use scenegen::closedloop::{run_closed_loop, scene_metrics, DiffusionSampler, SceneMetrics};
use scenegen::datagen::{generate_dataset, read_dataset, write_dataset, DatasetEntry, SceneSample, Split};
use scenegen::denoiser::{ActionScale, Checkpoint, SceneEncoder};
use scenegen::diffusion::{fit, guided_sample_with_report, training_items, ConflictTally, EpochReport};
use scenegen::metrics::{gd_igd, pareto_front, standardize_scores, RawScores};
use scenegen::scenario::{Scene, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{InputRef, RunManifest, MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// One closed-loop rollout written by `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedScene {
    /// Dataset file the scene came from, relative to the dataset directory.
    pub scene_file: String,
    pub seed: u64,
    pub trajectory: Option<Trajectory>,
    pub error: Option<String>,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    fs::write(path, bytes).map_err(CliError::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    serde_json::from_slice(&bytes).map_err(CliError::json(path))
}

fn stem(file: &str) -> String {
    Path::new(file)
        .file_stem()
        .map_or_else(|| file.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Seed of the rollout of one dataset scene within a run.
pub fn case_seed(run_seed: u64, scene_seed: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(scene_seed)
}

fn eval_split(cfg: &RunConfig, data: &Path) -> Result<Vec<(DatasetEntry, SceneSample)>, CliError> {
    let mut items = read_dataset(data, Some(cfg.eval.split))?;
    if cfg.eval.scenes > 0 {
        items.truncate(cfg.eval.scenes);
    }
    if items.is_empty() {
        return Err(CliError::Data(format!("{}: no scenes in split {:?}", data.display(), cfg.eval.split)));
    }
    Ok(items)
}

pub fn load_checkpoint(path: &Path) -> Result<SceneEncoder, CliError> {
    let c: Checkpoint = read_json(path)?;
    Ok(c.into_denoiser()?)
}

pub fn datagen(cfg: &RunConfig, out: &Path) -> Result<RunManifest, CliError> {
    create_dir(out)?;
    let items = generate_dataset(&cfg.data, cfg.seed)?;
    write_dataset(out, cfg.seed, &cfg.data, &items)?;
    let outputs = std::iter::once("manifest.json".to_string())
        .chain(items.iter().map(|(e, _)| e.file.clone()))
        .collect();
    let m = RunManifest::new("datagen", cfg, Vec::new(), outputs);
    m.write(out)?;
    Ok(m)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<RunManifest, CliError> {
    let train_set: Vec<SceneSample> = read_dataset(data, Some(Split::Train))?.into_iter().map(|(_, s)| s).collect();
    let val_set: Vec<SceneSample> = read_dataset(data, Some(Split::Val))?.into_iter().map(|(_, s)| s).collect();
    if train_set.is_empty() {
        return Err(CliError::Data(format!("{}: no training scenes", data.display())));
    }
    let arch = cfg.model.arch;
    let scale = ActionScale::fit(train_set.iter().flat_map(|s| s.reference.actions.iter().flatten()));
    let items = training_items(&train_set, arch.history_len, arch.horizon, &scale, &cfg.train);
    let val = training_items(&val_set, arch.history_len, arch.horizon, &scale, &cfg.train);
    let schedule = cfg.model.schedule();
    let mut log = String::from("epoch,step,train_loss,val_loss\n");
    let state = fit(&items, &val, arch, &cfg.train, &schedule, cfg.seed, |r: &EpochReport| {
        let val = r.val_loss.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(log, "{},{},{},{}", r.epoch, r.step, r.train_loss, val);
        eprintln!("epoch {} step {} train {:.4} val {}", r.epoch, r.step, r.train_loss, val);
    })?;
    create_dir(out)?;
    let enc = state.ema_encoder(scale)?;
    write_json(&out.join(CHECKPOINT_FILE), &enc.checkpoint())?;
    let log_path = out.join(TRAIN_LOG_FILE);
    fs::write(&log_path, log).map_err(CliError::io(&log_path))?;
    let m = RunManifest::new(
        "train",
        cfg,
        vec![InputRef::new("dataset", &data.join("manifest.json"))?],
        vec![CHECKPOINT_FILE.into(), TRAIN_LOG_FILE.into()],
    );
    m.write(out)?;
    Ok(m)
}

pub fn generate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<RunManifest, CliError> {
    let enc = load_checkpoint(checkpoint)?;
    let items = eval_split(cfg, data)?;
    let schedule = cfg.model.schedule();
    let sampler = DiffusionSampler {
        denoiser: &enc,
        schedule: &schedule,
        cfg: cfg.sampler.clone(),
    };
    let runs: Vec<GeneratedScene> = items
        .par_iter()
        .map(|(entry, sample)| {
            let seed = case_seed(cfg.seed, entry.seed);
            let res = run_closed_loop(&sample.scene, &sampler, &cfg.closed_loop, seed, None);
            GeneratedScene {
                scene_file: entry.file.clone(),
                seed,
                error: res.as_ref().err().map(ToString::to_string),
                trajectory: res.ok().map(|r| r.trajectory),
            }
        })
        .collect();
    create_dir(out)?;
    let mut outputs = Vec::with_capacity(runs.len());
    for g in &runs {
        let name = format!("{}.json", stem(&g.scene_file));
        write_json(&out.join(&name), g)?;
        outputs.push(name);
    }
    let m = RunManifest::new(
        "generate",
        cfg,
        vec![
            InputRef::new("checkpoint", checkpoint)?,
            InputRef::new("dataset", &data.join("manifest.json"))?,
        ],
        outputs,
    );
    m.write(out)?;
    Ok(m)
}

/// Generated rollouts of one method, sorted by file name.
pub fn read_generated(dir: &Path) -> Result<Vec<GeneratedScene>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    files.iter().map(|p| read_json(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub scenes: usize,
    pub failed: usize,
    pub scr: f64,
    pub orr: f64,
    pub fde: f64,
    pub cfd: f64,
    pub cs: Option<f64>,
    pub rs: Option<f64>,
    pub gd: Option<f64>,
    pub igd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub methods: Vec<MethodSummary>,
    /// Nondominated (CS, RS) points across the methods.
    pub front: Vec<[f64; 2]>,
    /// Why CS/RS are absent, when they are.
    pub note: Option<String>,
}

/// A labelled directory of generated rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodInput {
    pub label: String,
    pub dir: PathBuf,
}

impl std::str::FromStr for MethodInput {
    type Err = String;
    /// `label=dir`, or just `dir` with the directory name as label.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (label, dir) = match s.split_once('=') {
            Some((l, d)) => (l.to_string(), PathBuf::from(d)),
            None => {
                let d = PathBuf::from(s);
                let l = d.file_name().map_or_else(|| s.to_string(), |n| n.to_string_lossy().into_owned());
                (l, d)
            }
        };
        if label.is_empty() || dir.as_os_str().is_empty() {
            return Err(format!("bad method '{s}', expected label=dir"));
        }
        Ok(Self { label, dir })
    }
}

fn summarize(methods: &[(String, Vec<Option<SceneMetrics>>)], q: f64) -> EvalSummary {
    let mut out: Vec<MethodSummary> = methods
        .iter()
        .map(|(label, rows)| {
            let ok: Vec<&SceneMetrics> = rows.iter().flatten().collect();
            let mean = |f: fn(&SceneMetrics) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
                }
            };
            MethodSummary {
                method: label.clone(),
                scenes: rows.len(),
                failed: rows.len() - ok.len(),
                scr: mean(|m| m.collision),
                orr: mean(|m| m.orr),
                fde: mean(|m| m.fde),
                cfd: mean(|m| m.cfd),
                cs: None,
                rs: None,
                gd: None,
                igd: None,
            }
        })
        .collect();
    let raw: Vec<RawScores> = out
        .iter()
        .map(|m| RawScores {
            method: m.method.clone(),
            scr: m.scr,
            orr: m.orr,
            fde: m.fde,
            cfd: m.cfd,
        })
        .collect();
    let (front, note) = match standardize_scores(&raw) {
        Ok(std) => {
            let points: Vec<[f64; 2]> = std.iter().map(|s| [s.cs, s.rs]).collect();
            let front = pareto_front(&points);
            for (m, p) in out.iter_mut().zip(&points) {
                m.cs = Some(p[0]);
                m.rs = Some(p[1]);
                if let Ok((gd, igd)) = gd_igd(&[*p], &front, q) {
                    m.gd = Some(gd);
                    m.igd = Some(igd);
                }
            }
            (front, None)
        }
        Err(e) => (Vec::new(), Some(format!("standardized scores unavailable: {e}"))),
    };
    EvalSummary {
        methods: out,
        front,
        note,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

pub fn summary_table(s: &EvalSummary) -> String {
    let mut t = format!(
        "{:<16} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6}\n",
        "method", "scenes", "failed", "SCR", "ORR", "FDE", "CFD", "CS", "RS", "GD", "IGD"
    );
    for m in &s.methods {
        let _ = writeln!(
            t,
            "{:<16} {:>6} {:>6} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>6} {:>6} {:>6} {:>6}",
            m.method,
            m.scenes,
            m.failed,
            m.scr,
            m.orr,
            m.fde,
            m.cfd,
            fmt_opt(m.cs),
            fmt_opt(m.rs),
            fmt_opt(m.gd),
            fmt_opt(m.igd)
        );
    }
    if let Some(n) = &s.note {
        let _ = writeln!(t, "{n}");
    }
    t
}

/// Metrics of every method against the dataset references, plus the
/// cross-method summary. `with_reference` adds the references themselves as
/// a method named `reference`.
pub fn evaluate(
    cfg: &RunConfig,
    data: &Path,
    methods: &[MethodInput],
    with_reference: bool,
    out: &Path,
) -> Result<(RunManifest, EvalSummary), CliError> {
    if methods.is_empty() && !with_reference {
        return Err(CliError::Config("evaluate needs at least one --gen directory".into()));
    }
    let dataset: BTreeMap<String, SceneSample> = read_dataset(data, None)?.into_iter().map(|(e, s)| (e.file, s)).collect();
    let mut csv = String::from("method,scene,seed,collision,orr,fde,cfd,error\n");
    let mut per_method = Vec::new();
    let mut inputs = vec![InputRef::new("dataset", &data.join("manifest.json"))?];
    let record = |label: &str, gens: Vec<GeneratedScene>, csv: &mut String| -> Result<Vec<Option<SceneMetrics>>, CliError> {
        let mut rows = Vec::with_capacity(gens.len());
        for g in gens {
            let sample = dataset
                .get(&g.scene_file)
                .ok_or_else(|| CliError::Data(format!("{}: not in dataset {}", g.scene_file, data.display())))?;
            let res = match &g.trajectory {
                Some(t) => scene_metrics(t, &sample.reference, &sample.scene).map_err(|e| e.to_string()),
                None => Err(g.error.clone().unwrap_or_else(|| "missing trajectory".into())),
            };
            match &res {
                Ok(m) => {
                    let _ = writeln!(csv, "{label},{},{},{},{},{},{},", stem(&g.scene_file), g.seed, m.collision, m.orr, m.fde, m.cfd);
                }
                Err(e) => {
                    let _ = writeln!(csv, "{label},{},{},,,,,\"{}\"", stem(&g.scene_file), g.seed, e.replace('"', "'"));
                }
            }
            rows.push(res.ok());
        }
        Ok(rows)
    };
    if with_reference {
        let refs: Vec<GeneratedScene> = read_dataset(data, Some(cfg.eval.split))?
            .into_iter()
            .take(if cfg.eval.scenes > 0 { cfg.eval.scenes } else { usize::MAX })
            .map(|(e, s)| GeneratedScene {
                scene_file: e.file,
                seed: e.seed,
                trajectory: Some(s.reference),
                error: None,
            })
            .collect();
        per_method.push(("reference".to_string(), record("reference", refs, &mut csv)?));
    }
    for m in methods {
        let gens = read_generated(&m.dir)?;
        if gens.is_empty() {
            return Err(CliError::Data(format!("{}: no generated scenes", m.dir.display())));
        }
        let man = m.dir.join(MANIFEST_FILE);
        if man.exists() {
            inputs.push(InputRef::new(&format!("generated:{}", m.label), &man)?);
        }
        per_method.push((m.label.clone(), record(&m.label, gens, &mut csv)?));
    }
    let summary = summarize(&per_method, cfg.eval.gd_q);
    create_dir(out)?;
    let csv_path = out.join(METRICS_FILE);
    fs::write(&csv_path, csv).map_err(CliError::io(&csv_path))?;
    let spath = out.join(SUMMARY_FILE);
    fs::write(&spath, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").map_err(CliError::io(&spath))?;
    let m = RunManifest::new("evaluate", cfg, inputs, vec![METRICS_FILE.into(), SUMMARY_FILE.into()]);
    m.write(out)?;
    Ok((m, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub ttc_mask: BoolMatrix,
    /// Graph and rank used at the final denoising step.
    pub graph: Option<DecisionCausalGraph>,
    pub rank: Option<CausalRank>,
    pub controlled: Vec<bool>,
    pub conflicts: ConflictTally,
}

/// Sample once from `scene` and report the causal structure the sampler used.
pub fn inspect(cfg: &RunConfig, checkpoint: &Path, scene_path: &Path) -> Result<Inspection, CliError> {
    let enc = load_checkpoint(checkpoint)?;
    let scene = load_scene(scene_path)?;
    let schedule = cfg.model.schedule();
    let sampler = scenegen::diffusion::SamplerConfig {
        seed: cfg.seed,
        ..cfg.sampler.clone()
    };
    let (_, report) = guided_sample_with_report(&scene, &enc, &schedule, &sampler)?;
    Ok(Inspection {
        ttc_mask: ttc_mask_states(&scene.current_states(), cfg.sampler.c_ttc, cfg.sampler.d_max),
        graph: report.last_graph,
        rank: report.last_rank,
        controlled: report.controlled,
        conflicts: report.conflicts,
    })
}

/// A dataset scene file (scene plus reference) or a bare scene.
pub fn load_scene(path: &Path) -> Result<Scene, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    if let Ok(s) = serde_json::from_slice::<SceneSample>(&bytes) {
        return Ok(s.scene);
    }
    serde_json::from_slice(&bytes).map_err(CliError::json(path))
}
