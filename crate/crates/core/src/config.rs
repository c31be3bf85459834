//! Experiment configuration as flat `key = value` text with dotted
//! namespaces. Every key has one typed field; unknown keys are rejected.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::curriculum::FeedbackMetric;
use crate::episodic::HyperParams;
use crate::error::{Error, Result};
use crate::icfil::IcfilConfig;
use crate::inversion::InversionWeights;
use crate::zoo::Scenario;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// One PNG tree per dataset.
    Paths(Vec<PathBuf>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub shape: [usize; 3],
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZooSection {
    pub num_models: usize,
    pub epochs: usize,
    pub width: f64,
    pub lr: f64,
    pub batch: usize,
    pub min_accuracy: f64,
    /// Directory to load the zoo from, or to save a freshly built one to.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub iterations: usize,
    pub checkpoint_every: usize,
    /// When false the wall-clock column is written as 0, making metrics
    /// files byte-comparable across runs.
    pub record_wall_time: bool,
    pub feedback_metric: FeedbackMetric,
    pub meta_width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub num_tasks: usize,
    pub queries: usize,
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub curriculum: bool,
    pub icfil: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub zoo: u64,
    pub dataset: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub data: DataConfig,
    pub zoo: ZooSection,
    pub hp: HyperParams,
    pub inv: InversionWeights,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub icfil: IcfilConfig,
    pub ablation: Ablation,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale setup: 12 synthetic classes, four 2-way conv4 models.
    fn default() -> Self {
        Self {
            scenario: Scenario::SS,
            data: DataConfig {
                source: DataSource::Synthetic,
                shape: [3, 16, 16],
                synthetic_classes: 12,
                synthetic_per_class: 30,
                train_classes: 8,
                val_classes: 0,
                test_classes: 4,
            },
            zoo: ZooSection {
                num_models: 4,
                epochs: 30,
                width: 0.25,
                lr: 1e-3,
                batch: 32,
                min_accuracy: 0.95,
                path: None,
            },
            hp: HyperParams {
                way: 2,
                shots: 1,
                queries: 5,
                curriculum_start_iter: 500,
                ..HyperParams::default()
            },
            inv: InversionWeights::default(),
            train: TrainSection {
                iterations: 1500,
                checkpoint_every: 500,
                record_wall_time: true,
                feedback_metric: FeedbackMetric::Accuracy,
                meta_width: 0.25,
            },
            eval: EvalSection {
                num_tasks: 100,
                queries: 15,
                workers: 1,
            },
            icfil: IcfilConfig::default(),
            ablation: Ablation {
                curriculum: true,
                icfil: true,
            },
            seeds: Seeds {
                zoo: 0,
                dataset: 0,
                train: 0,
                eval: 0,
            },
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Text form of one config value.
trait Value: Sized {
    fn render(&self) -> String;
    fn parse(s: &str) -> std::result::Result<Self, String>;
}

impl Value for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a number"))
    }
}

macro_rules! int_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
            }
        }
    )*};
}
int_value!(usize, u64);

impl Value for bool {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{s}` is not true/false")),
        }
    }
}

impl Value for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
}

impl Value for Option<PathBuf> {
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
}

impl Value for [usize; 3] {
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| format!("bad shape `{s}`")))
            .collect::<std::result::Result<_, _>>()?;
        v.try_into().map_err(|_| format!("shape `{s}` must have three entries"))
    }
}

impl Value for Scenario {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
}

impl Value for FeedbackMetric {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
}

impl Value for DataSource {
    fn render(&self) -> String {
        match self {
            DataSource::Synthetic => "synthetic".into(),
            DataSource::Paths(p) => p.iter().map(|x| x.display().to_string()).collect::<Vec<_>>().join(","),
        }
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "" => Err("data.source must be `synthetic` or a comma-separated path list".into()),
            _ => Ok(DataSource::Paths(
                s.split(',').map(|p| PathBuf::from(p.trim())).collect(),
            )),
        }
    }
}

/// Expands `$m!(key, place)` for every config key.
macro_rules! for_each_key {
    ($c:ident, $m:ident) => {
        $m!("scenario", $c.scenario);
        $m!("data.source", $c.data.source);
        $m!("data.shape", $c.data.shape);
        $m!("data.synthetic.classes", $c.data.synthetic_classes);
        $m!("data.synthetic.per_class", $c.data.synthetic_per_class);
        $m!("data.split.train", $c.data.train_classes);
        $m!("data.split.val", $c.data.val_classes);
        $m!("data.split.test", $c.data.test_classes);
        $m!("zoo.num_models", $c.zoo.num_models);
        $m!("zoo.epochs", $c.zoo.epochs);
        $m!("zoo.width", $c.zoo.width);
        $m!("zoo.lr", $c.zoo.lr);
        $m!("zoo.batch", $c.zoo.batch);
        $m!("zoo.min_accuracy", $c.zoo.min_accuracy);
        $m!("zoo.path", $c.zoo.path);
        $m!("task.way", $c.hp.way);
        $m!("task.shots", $c.hp.shots);
        $m!("task.queries", $c.hp.queries);
        $m!("hp.alpha_inner", $c.hp.alpha_inner);
        $m!("hp.alpha_outer", $c.hp.alpha_outer);
        $m!("hp.beta", $c.hp.beta);
        $m!("hp.lambda", $c.hp.lambda);
        $m!("hp.episode_batch", $c.hp.episode_batch);
        $m!("hp.curriculum_start_iter", $c.hp.curriculum_start_iter);
        $m!("hp.patience", $c.hp.patience);
        $m!("hp.second_order", $c.hp.second_order);
        $m!("hp.within_model_tasks", $c.hp.within_model_tasks);
        $m!("hp.feedback_metric", $c.train.feedback_metric);
        $m!("inv.alpha_tv", $c.inv.alpha_tv);
        $m!("inv.alpha_l2", $c.inv.alpha_l2);
        $m!("inv.feature_weight", $c.inv.feature_weight);
        $m!("meta.width", $c.train.meta_width);
        $m!("train.iterations", $c.train.iterations);
        $m!("train.checkpoint_every", $c.train.checkpoint_every);
        $m!("train.record_wall_time", $c.train.record_wall_time);
        $m!("eval.num_tasks", $c.eval.num_tasks);
        $m!("eval.queries", $c.eval.queries);
        $m!("eval.workers", $c.eval.workers);
        $m!("icfil.tau", $c.icfil.tau);
        $m!("icfil.calibration_lr", $c.icfil.calibration_lr);
        $m!("icfil.head_lr", $c.icfil.head_lr);
        $m!("icfil.head_iters", $c.icfil.head_iters);
        $m!("icfil.pseudo_per_class", $c.icfil.pseudo_per_class);
        $m!("icfil.inversion_steps", $c.icfil.inversion_steps);
        $m!("icfil.inversion_lr", $c.icfil.inversion_lr);
        $m!("icfil.normalize_embeddings", $c.icfil.normalize_embeddings);
        $m!("icfil.calibrate", $c.icfil.calibrate);
        $m!("ablation.curriculum", $c.ablation.curriculum);
        $m!("ablation.icfil", $c.ablation.icfil);
        $m!("seed.zoo", $c.seeds.zoo);
        $m!("seed.dataset", $c.seeds.dataset);
        $m!("seed.train", $c.seeds.train);
        $m!("seed.eval", $c.seeds.eval);
        $m!("output.dir", $c.output_dir);
    };
}

impl ExperimentConfig {
    pub fn keys() -> Vec<&'static str> {
        let mut out = Vec::new();
        let c = Self::default();
        macro_rules! push {
            ($k:expr, $f:expr) => {
                let _ = &$f;
                out.push($k);
            };
        }
        for_each_key!(c, push);
        out
    }

    pub fn to_text(&self) -> String {
        let c = self;
        let mut out = String::new();
        macro_rules! emit {
            ($k:expr, $f:expr) => {
                out.push_str(&format!("{} = {}\n", $k, Value::render(&$f)));
            };
        }
        for_each_key!(c, emit);
        out
    }

    /// Sets one key; the error message names the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let c = self;
        macro_rules! assign {
            ($k:expr, $f:expr) => {
                if key == $k {
                    $f = Value::parse(value).map_err(|e| format!("{key}: {e}"))?;
                    return Ok(());
                }
            };
        }
        for_each_key!(c, assign);
        Err(format!("unknown key `{key}`"))
    }

    /// Parses text on top of the defaults. Blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|message| Error::Parse { line: i + 1, message })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        // an unreadable config file is a configuration problem, not a data one
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the serialized form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.inv.validate()?;
        if let DataSource::Paths(paths) = &self.data.source {
            for p in paths {
                if !p.is_dir() {
                    return Err(Error::Config(format!(
                        "dataset directory {} does not exist",
                        p.display()
                    )));
                }
            }
            if self.scenario != Scenario::MH && paths.len() != 1 {
                return Err(Error::Config(format!(
                    "{} needs exactly one dataset path",
                    self.scenario
                )));
            }
        }
        if self.ablation.curriculum && self.train.iterations <= self.hp.curriculum_start_iter {
            return Err(Error::Config(format!(
                "train.iterations ({}) must exceed hp.curriculum_start_iter ({}) when the curriculum is on",
                self.train.iterations, self.hp.curriculum_start_iter
            )));
        }
        if self.data.train_classes < self.hp.way || self.data.test_classes < self.hp.way {
            return Err(Error::Config(
                "train and test splits need at least `task.way` classes".into(),
            ));
        }
        let d = &self.data;
        if d.source == DataSource::Synthetic && d.train_classes + d.val_classes + d.test_classes > d.synthetic_classes {
            return Err(Error::Config("split sizes exceed data.synthetic.classes".into()));
        }
        for (name, v) in [
            ("zoo.width", self.zoo.width),
            ("meta.width", self.train.meta_width),
            ("icfil.tau", self.icfil.tau),
            ("zoo.lr", self.zoo.lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.train.checkpoint_every == 0 || self.eval.num_tasks == 0 || self.zoo.num_models == 0 {
            return Err(Error::Config(
                "checkpoint_every, eval.num_tasks and zoo.num_models must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(ExperimentConfig::keys().len(), c.to_text().lines().count());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = ExperimentConfig::parse("# c\nhp.lambda = 2\nhp.lambda = x\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = ExperimentConfig::parse("nonsense.key = 1").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn curriculum_needs_iterations_past_warmup() {
        let mut c = ExperimentConfig::default();
        c.train.iterations = 500;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.ablation.curriculum = false;
        c.validate().unwrap();
    }

    #[test]
    fn missing_dataset_path_is_config_error() {
        let mut c = ExperimentConfig::default();
        c.data.source = DataSource::Paths(vec!["/definitely/not/here".into()]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn random_configs_round_trip(
            lambda in 0.0f64..100.0,
            beta in 1e-6f64..1.0,
            way in 2usize..10,
            iters in 0usize..100_000,
            seeds in proptest::array::uniform4(any::<u64>()),
            flags in proptest::array::uniform4(any::<bool>()),
            dir in "[a-z][a-z0-9_/]{0,12}",
            shape in proptest::array::uniform3(1usize..64),
            paths in proptest::collection::vec("[a-z][a-z0-9_]{0,8}", 0..3),
        ) {
            let mut c = ExperimentConfig::default();
            c.hp.lambda = lambda;
            c.hp.beta = beta;
            c.hp.way = way;
            c.train.iterations = iters;
            c.seeds = Seeds { zoo: seeds[0], dataset: seeds[1], train: seeds[2], eval: seeds[3] };
            c.ablation = Ablation { curriculum: flags[0], icfil: flags[1] };
            c.hp.second_order = flags[2];
            c.train.feedback_metric = if flags[3] { FeedbackMetric::Loss } else { FeedbackMetric::Accuracy };
            c.output_dir = dir.into();
            c.data.shape = shape;
            if !paths.is_empty() {
                c.data.source = DataSource::Paths(paths.iter().map(PathBuf::from).collect());
                c.zoo.path = Some(PathBuf::from(&paths[0]));
            }
            prop_assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
