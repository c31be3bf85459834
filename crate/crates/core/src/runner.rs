//! Experiment orchestration: data and zoo preparation, the meta-training
//! loop, checkpoints and resume, evaluation against baselines, ablations.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{self, Archive, Precision, STATE_VERSION};
use crate::config::{DataSource, ExperimentConfig};
use crate::curriculum::{eci_dataset_update, gradient_switch, FeedbackMetric, FeedbackMonitor, Omega};
use crate::data::{load_dataset, make_synthetic_blobs, LabeledDataset, SplitSpec};
use crate::episodic::{meta_update, sample_pseudo_episode, MetaState};
use crate::error::{Error, Result};
use crate::icfil::{evaluate, task_rng, EvalConfig, EvalReport};
use crate::inversion::{init_dynamic_dataset, DynamicDataset};
use crate::nets::{build_network, ArchId, ArchSpec, NetworkParams};
use crate::optim::{AdamState, Moments};
use crate::tensor::Tensor;
use crate::zoo::{average_models, build_zoo, random_init_baseline, ModelZoo, ZooConfig};

pub const METRICS_FILE: &str = "train_metrics.csv";
pub const METRICS_HEADER: &str =
    "iteration,inv_loss,batch_outer_loss,batch_train_acc,feedback,curriculum_active,switch,wall_ms";
pub const STATE_FILE: &str = "state.bin";
pub const FINAL_CHECKPOINT: &str = "meta_final.ckpt";

/// Datasets with their class splits.
pub struct Prepared {
    pub datasets: Vec<LabeledDataset>,
    pub splits: Vec<SplitSpec>,
}

impl Prepared {
    /// `(dataset, test classes)` pairs for evaluation.
    pub fn test_splits(&self) -> Vec<(LabeledDataset, Vec<usize>)> {
        self.datasets
            .iter()
            .cloned()
            .zip(self.splits.iter().map(|s| s.test.clone()))
            .collect()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.data;
    match &d.source {
        DataSource::Synthetic => {
            let ds = make_synthetic_blobs(d.synthetic_classes, d.synthetic_per_class, d.shape, cfg.seeds.dataset)?;
            Ok(Prepared {
                datasets: vec![ds],
                splits: vec![SplitSpec::contiguous(d.train_classes, d.val_classes, d.test_classes)],
            })
        }
        DataSource::Paths(paths) => {
            let mut datasets = Vec::new();
            let mut splits = Vec::new();
            for (i, p) in paths.iter().enumerate() {
                let ds = load_dataset(p, d.shape)?;
                let split = SplitSpec::random(
                    ds.num_classes(),
                    d.train_classes,
                    d.val_classes,
                    d.test_classes,
                    cfg.seeds.dataset.wrapping_add(i as u64),
                )?;
                datasets.push(ds);
                splits.push(split);
            }
            Ok(Prepared { datasets, splits })
        }
    }
}

pub fn zoo_config(cfg: &ExperimentConfig) -> ZooConfig {
    ZooConfig {
        num_models: cfg.zoo.num_models,
        way: cfg.hp.way,
        scenario: cfg.scenario,
        epochs: cfg.zoo.epochs,
        width: cfg.zoo.width,
        lr: cfg.zoo.lr,
        batch_size: cfg.zoo.batch,
        min_train_accuracy: cfg.zoo.min_accuracy,
    }
}

/// Loads the zoo from `zoo.path` when a manifest exists there, otherwise
/// pre-trains it (and saves it when a path is configured).
pub fn obtain_zoo(cfg: &ExperimentConfig, data: &Prepared) -> Result<ModelZoo> {
    if let Some(dir) = &cfg.zoo.path {
        if dir.join("manifest.txt").is_file() {
            info!("loading zoo from {}", dir.display());
            return ModelZoo::load(dir);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.zoo);
    let zoo = build_zoo(&data.datasets, &data.splits, &zoo_config(cfg), &mut rng)?;
    if let Some(dir) = &cfg.zoo.path {
        zoo.save(dir)?;
    }
    Ok(zoo)
}

pub fn meta_spec(cfg: &ExperimentConfig) -> ArchSpec {
    ArchSpec::new(ArchId::Conv4, cfg.data.shape, cfg.hp.way).with_width(cfg.train.meta_width)
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub meta: MetaState,
    pub dd: DynamicDataset,
    pub monitor: FeedbackMonitor,
}

impl TrainingState {
    pub fn fresh(cfg: &ExperimentConfig, zoo: &ModelZoo) -> Result<Self> {
        if zoo.entries.iter().any(|e| e.spec().num_classes != cfg.hp.way) {
            return Err(Error::Config(
                "zoo models and meta model must share the task way".into(),
            ));
        }
        let theta = build_network(&meta_spec(cfg), cfg.seeds.train)?;
        Ok(Self {
            meta: MetaState::new(theta, &cfg.hp)?,
            dd: init_dynamic_dataset(
                zoo,
                cfg.hp.shots,
                cfg.hp.queries,
                cfg.data.shape,
                cfg.seeds.train ^ 0x00dd_5eed,
            )?,
            monitor: FeedbackMonitor::new(cfg.hp.patience, cfg.train.feedback_metric),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let m = &self.monitor;
        let mut header = String::new();
        let mut kv = |k: &str, v: String| header.push_str(&format!("{k} = {v}\n"));
        kv("iteration", self.meta.iteration.to_string());
        kv("curriculum_active", self.meta.curriculum_active.to_string());
        kv("adam_step", self.meta.optimizer.step.to_string());
        kv("dd_step", self.dd.optimizer.step.to_string());
        kv("best_metric", m.best_metric.map_or("none".into(), |b| format!("{b:?}")));
        kv("stall_count", m.stall_count.to_string());
        kv("patience", m.patience.to_string());
        kv("last_omega", (m.last_omega == Omega::Positive).to_string());
        kv("feedback_metric", m.metric.to_string());
        kv("class_owner", join(&self.dd.class_owner));
        kv("assigned_labels", join(&self.dd.assigned_labels));
        for line in self.meta.theta.spec.to_kv().lines() {
            header.push_str(&format!("spec.{line}\n"));
        }
        let mut arrays = checkpoint::network_state_arrays(&self.meta.theta, "theta/");
        for (k, mo) in &self.meta.optimizer.moments {
            arrays.push((format!("adam/m/{k}"), mo.m.clone()));
            arrays.push((format!("adam/v/{k}"), mo.v.clone()));
        }
        arrays.push(("dd/images".into(), self.dd.images.clone()));
        arrays.push(("dd/m".into(), self.dd.optimizer.moments.m.clone()));
        arrays.push(("dd/v".into(), self.dd.optimizer.moments.v.clone()));
        checkpoint::encode_archive(
            &Archive {
                version: STATE_VERSION.into(),
                header,
                arrays,
            },
            Precision::F64,
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let a = checkpoint::decode_archive(bytes, Precision::F64)?;
        if a.version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported state version `{}`", a.version)));
        }
        let mut kv = BTreeMap::new();
        let mut spec = String::new();
        for line in a.header.lines() {
            if let Some(rest) = line.strip_prefix("spec.") {
                spec.push_str(rest);
                spec.push('\n');
            } else if let Some((k, v)) = line.split_once(" = ") {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("state is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}`"))) };
        let theta = checkpoint::network_from_state_arrays(&spec, &a.arrays, "theta/")?;
        let arrays: BTreeMap<String, Tensor> = a.arrays.into_iter().collect();
        let take = |k: &str| {
            arrays
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("state is missing array `{k}`")))
        };
        let mut moments = BTreeMap::new();
        for k in theta.params.keys() {
            moments.insert(
                k.clone(),
                Moments {
                    m: take(&format!("adam/m/{k}"))?,
                    v: take(&format!("adam/v/{k}"))?,
                },
            );
        }
        let best = get("best_metric")?;
        Ok(Self {
            meta: MetaState {
                theta,
                optimizer: crate::optim::ParamAdam {
                    moments,
                    step: num("adam_step")? as u64,
                },
                iteration: num("iteration")?,
                curriculum_active: get("curriculum_active")? == "true",
            },
            dd: DynamicDataset {
                images: take("dd/images")?,
                class_owner: split_usize(&get("class_owner")?)?,
                assigned_labels: split_usize(&get("assigned_labels")?)?,
                optimizer: AdamState {
                    moments: Moments {
                        m: take("dd/m")?,
                        v: take("dd/v")?,
                    },
                    step: num("dd_step")? as u64,
                },
            },
            monitor: FeedbackMonitor {
                best_metric: if best == "none" {
                    None
                } else {
                    Some(best.parse().map_err(|_| Error::Format("bad best_metric".into()))?)
                },
                stall_count: num("stall_count")?,
                patience: num("patience")?,
                last_omega: if get("last_omega")? == "true" {
                    Omega::Positive
                } else {
                    Omega::Negative
                },
                metric: get("feedback_metric")?
                    .parse::<FeedbackMetric>()
                    .map_err(|e| Error::Format(e.to_string()))?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&checkpoint::read_file(path)?)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split_usize(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Format(format!("bad index list `{s}`"))))
        .collect()
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub inv_loss: f64,
    pub batch_outer_loss: f64,
    pub batch_train_acc: f64,
    pub feedback: bool,
    pub curriculum_active: bool,
    pub switch: u8,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{},{},{},{}",
            self.iteration,
            self.inv_loss,
            self.batch_outer_loss,
            self.batch_train_acc,
            u8::from(self.feedback),
            u8::from(self.curriculum_active),
            self.switch,
            self.wall_ms
        )
    }
}

/// Parses a metrics file; errors name the offending line (1-based).
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing metrics header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad(&format!("`{s}` is not an integer")));
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(&format!("`{s}` is not 0/1"))),
        };
        rows.push(MetricsRow {
            iteration: int(f[0])? as usize,
            inv_loss: float(f[1])?,
            batch_outer_loss: float(f[2])?,
            batch_train_acc: float(f[3])?,
            feedback: flag(f[4])?,
            curriculum_active: flag(f[5])?,
            switch: u8::from(flag(f[6])?),
            wall_ms: int(f[7])?,
        });
    }
    Ok(rows)
}

pub struct TrainOutcome {
    pub state: TrainingState,
    pub metrics_path: PathBuf,
}

fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoints/iter{iteration:06}")
}

/// Runs iterations `state.meta.iteration .. total` of the alternating
/// bank-update / meta-update / feedback loop, appending to the metrics file
/// and checkpointing every `train.checkpoint_every` iterations.
pub fn continue_training(
    cfg: &ExperimentConfig,
    zoo: &ModelZoo,
    mut state: TrainingState,
    total: usize,
) -> Result<TrainOutcome> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let start = state.meta.iteration;
    // keep rows written before the resume point
    let mut kept = format!("{METRICS_HEADER}\n");
    if start > 0 {
        if let Ok(text) = fs::read_to_string(&metrics_path) {
            for row in read_metrics(&text)?.into_iter().filter(|r| r.iteration < start) {
                kept.push_str(&row.to_csv());
                kept.push('\n');
            }
        }
    }
    fs::write(&metrics_path, kept).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let clock = Instant::now();
    let hp = &cfg.hp;
    for it in start..total {
        let mut rng = task_rng(cfg.seeds.train, it);
        let switch = if cfg.ablation.curriculum {
            gradient_switch(state.monitor.last_omega, state.meta.curriculum_active)
        } else {
            0
        };
        let losses = eci_dataset_update(&mut state.dd, zoo, &state.meta, hp, &cfg.inv, switch, &mut rng)
            .map_err(|e| e.at_iteration(it))?;
        let episodes = (0..hp.episode_batch)
            .map(|_| sample_pseudo_episode(&state.dd, hp.way, hp.shots, hp.queries, hp.within_model_tasks, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, acc) = meta_update(&mut state.meta, &episodes, hp)?;
        let watched = match cfg.train.feedback_metric {
            FeedbackMetric::Accuracy => acc,
            FeedbackMetric::Loss => loss,
        };
        let omega = state.monitor.update(watched);
        let row = MetricsRow {
            iteration: it,
            inv_loss: losses.inv_loss,
            batch_outer_loss: loss,
            batch_train_acc: acc,
            feedback: omega == Omega::Positive,
            curriculum_active: state.meta.curriculum_active,
            switch,
            wall_ms: if cfg.train.record_wall_time {
                clock.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        writeln!(csv, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
        let done = it + 1;
        if done % cfg.train.checkpoint_every == 0 && done < total {
            let base = out.join(checkpoint_name(done));
            checkpoint::save_checkpoint(&base.with_extension("ckpt"), &state.meta.theta)?;
            state.save(&base.with_extension("state"))?;
            info!(
                "iteration {done}: outer {loss:.4} acc {acc:.3} inv {:.3}",
                losses.inv_loss
            );
        }
    }
    checkpoint::save_checkpoint(&out.join(FINAL_CHECKPOINT), &state.meta.theta)?;
    state.save(&out.join(STATE_FILE))?;
    Ok(TrainOutcome { state, metrics_path })
}

pub fn run_meta_training(cfg: &ExperimentConfig, zoo: &ModelZoo) -> Result<TrainOutcome> {
    cfg.validate()?;
    continue_training(cfg, zoo, TrainingState::fresh(cfg, zoo)?, cfg.train.iterations)
}

/// Continues from a saved state snapshot up to `train.iterations`.
pub fn resume_training(cfg: &ExperimentConfig, zoo: &ModelZoo, snapshot: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainingState::load(snapshot)?;
    continue_training(cfg, zoo, state, cfg.train.iterations)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaSource {
    Purer,
    Random,
    Average,
}

impl FromStr for ThetaSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "purer" => Ok(Self::Purer),
            "random" => Ok(Self::Random),
            "average" => Ok(Self::Average),
            _ => Err(Error::Config(format!("unknown initialization `{s}`"))),
        }
    }
}

impl fmt::Display for ThetaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Purer => "purer",
            Self::Random => "random",
            Self::Average => "average",
        })
    }
}

pub fn eval_config(cfg: &ExperimentConfig, use_icfil: bool) -> EvalConfig {
    EvalConfig {
        way: cfg.hp.way,
        shots: cfg.hp.shots,
        queries: cfg.eval.queries,
        num_tasks: cfg.eval.num_tasks,
        alpha_inner: cfg.hp.alpha_inner,
        icfil: use_icfil.then(|| icfil_config(cfg)),
        seed: cfg.seeds.eval,
        workers: cfg.eval.workers,
    }
}

/// ICFIL settings with the experiment's inversion weights.
pub fn icfil_config(cfg: &ExperimentConfig) -> crate::icfil::IcfilConfig {
    crate::icfil::IcfilConfig {
        weights: cfg.inv,
        ..cfg.icfil.clone()
    }
}

/// An evaluation result together with what produced it.
pub struct EvaluationOutput {
    pub report: EvalReport,
    pub use_icfil: bool,
    pub json: String,
}

/// Evaluates an initialization on the test classes. ICFIL is applied only to
/// the meta-learned initialization and only when enabled in the config.
pub fn run_evaluation(
    cfg: &ExperimentConfig,
    source: ThetaSource,
    purer_theta: Option<&NetworkParams>,
    zoo: Option<&ModelZoo>,
    data: &Prepared,
) -> Result<EvaluationOutput> {
    let theta = match source {
        ThetaSource::Purer => purer_theta
            .cloned()
            .ok_or_else(|| Error::Input("no meta-trained initialization given".into()))?,
        ThetaSource::Random => random_init_baseline(&meta_spec(cfg), cfg.seeds.eval ^ 0x0a4d_0b1e)?,
        ThetaSource::Average => {
            if cfg.scenario != crate::zoo::Scenario::SS {
                return Err(Error::Scenario(format!("averaging is undefined for {}", cfg.scenario)));
            }
            average_models(zoo.ok_or_else(|| Error::Input("averaging needs a zoo".into()))?)?
        }
    };
    let use_icfil = cfg.ablation.icfil && source == ThetaSource::Purer;
    let ecfg = eval_config(cfg, use_icfil);
    let report = evaluate(&theta, &data.test_splits(), &ecfg)?;
    let mut meta = serde_json::Map::new();
    meta.insert("theta_source".into(), json!(source.to_string()));
    meta.insert("way".into(), json!(ecfg.way));
    meta.insert("shots".into(), json!(ecfg.shots));
    meta.insert("queries".into(), json!(ecfg.queries));
    meta.insert("use_icfil".into(), json!(use_icfil));
    if use_icfil {
        let ic = icfil_config(cfg);
        meta.insert(
            "icfil".into(),
            json!({
                "pseudo_per_class": ic.pseudo_per_class,
                "inversion_steps": ic.inversion_steps,
                "inversion_lr": ic.inversion_lr,
                "tau": ic.tau,
                "normalize_embeddings": ic.normalize_embeddings,
                "calibrate": ic.calibrate,
            }),
        );
    }
    meta.insert("config_hash".into(), json!(cfg.hash()));
    meta.insert("config".into(), json!(cfg.to_text()));
    let json = report.to_json(&meta);
    Ok(EvaluationOutput {
        report,
        use_icfil,
        json,
    })
}

/// Mean accuracies of the four ablation rows for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub ei: EvalReport,
    pub ei_icfil: EvalReport,
    pub eci: EvalReport,
    pub eci_icfil: EvalReport,
    pub random: EvalReport,
}

/// Trains EI and ECI from the same seed and evaluates each with and without
/// ICFIL on identical tasks, plus the random-init baseline.
pub fn ablate_seed(base: &ExperimentConfig, data: &Prepared, zoo: &ModelZoo, seed: u64) -> Result<AblationRow> {
    let mut cfg = base.clone();
    cfg.seeds.train = seed;
    cfg.seeds.eval = seed;
    let root = base.output_dir.join(format!("seed{seed}"));
    let mut theta = BTreeMap::new();
    for curriculum in [false, true] {
        let mut c = cfg.clone();
        c.ablation.curriculum = curriculum;
        c.output_dir = root.join(if curriculum { "eci" } else { "ei" });
        let out = run_meta_training(&c, zoo)?;
        theta.insert(curriculum, out.state.meta.theta);
    }
    let eval = |curriculum: bool, icfil: bool| -> Result<EvalReport> {
        let mut c = cfg.clone();
        c.ablation.icfil = icfil;
        let out = run_evaluation(&c, ThetaSource::Purer, Some(&theta[&curriculum]), Some(zoo), data)?;
        let name = format!(
            "eval_{}_{}.json",
            if curriculum { "eci" } else { "ei" },
            if icfil { "icfil" } else { "plain" }
        );
        fs::write(root.join(&name), &out.json).map_err(|e| Error::io(root.join(&name), e))?;
        Ok(out.report)
    };
    Ok(AblationRow {
        seed,
        ei: eval(false, false)?,
        ei_icfil: eval(false, true)?,
        eci: eval(true, false)?,
        eci_icfil: eval(true, true)?,
        random: run_evaluation(&cfg, ThetaSource::Random, None, Some(zoo), data)?.report,
    })
}

/// Summary table of an ablation over several seeds.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("seed,ei,ei_icfil,eci,eci_icfil,random\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.seed, r.ei.mean, r.ei_icfil.mean, r.eci.mean, r.eci_icfil.mean, r.random.mean
        ));
    }
    out
}
