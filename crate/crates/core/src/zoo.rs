//! The collection of frozen pre-trained classifiers, plus the Random and
//! Average initialization baselines.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{cross_entropy_mean, Tape};
use crate::checkpoint;
use crate::data::{LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::nets::{self, build_network, ArchId, ArchSpec, BnMode, NetworkParams};
use crate::optim::{AdamConfig, ParamAdam};
use crate::tensor::Tensor;

/// Same dataset & architecture / same dataset, heterogeneous
/// architectures / multiple datasets, heterogeneous architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    SS,
    SH,
    MH,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SS" => Ok(Scenario::SS),
            "SH" => Ok(Scenario::SH),
            "MH" => Ok(Scenario::MH),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::SS => "SS",
            Scenario::SH => "SH",
            Scenario::MH => "MH",
        })
    }
}

/// One frozen pre-trained classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelZooEntry {
    pub params: NetworkParams,
    /// Local logit index → global pseudo-class id.
    pub global_class_ids: Vec<usize>,
    pub source_dataset_id: String,
    /// Real class ids (in the source dataset) the model was trained on.
    pub source_classes: Vec<usize>,
}

impl ModelZooEntry {
    pub fn spec(&self) -> &ArchSpec {
        &self.params.spec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelZoo {
    pub entries: Vec<ModelZooEntry>,
    /// Global id → (entry index, local class).
    pub global_classes: Vec<(usize, usize)>,
}

impl ModelZoo {
    /// Assigns dense global ids `0..Σ num_classes` in entry order.
    pub fn from_entries(mut entries: Vec<ModelZooEntry>) -> Result<Self> {
        let mut global_classes = Vec::new();
        for (e, entry) in entries.iter_mut().enumerate() {
            let n = entry.params.spec.num_classes;
            entry.global_class_ids = (global_classes.len()..global_classes.len() + n).collect();
            global_classes.extend((0..n).map(|local| (e, local)));
        }
        let zoo = Self {
            entries,
            global_classes,
        };
        zoo.validate()?;
        Ok(zoo)
    }

    pub fn validate(&self) -> Result<()> {
        let mut owned = vec![false; self.global_classes.len()];
        for (e, entry) in self.entries.iter().enumerate() {
            if entry.global_class_ids.len() != entry.params.spec.num_classes {
                return Err(Error::Internal(format!("entry {e} class table has wrong length")));
            }
            for (local, &g) in entry.global_class_ids.iter().enumerate() {
                if g >= owned.len() || owned[g] || self.global_classes[g] != (e, local) {
                    return Err(Error::Internal(format!("global class {g} ownership is inconsistent")));
                }
                owned[g] = true;
            }
            for (bn, _) in entry.params.spec.bn_layers() {
                for key in [nets::running_mean_key(&bn), nets::running_var_key(&bn)] {
                    if !entry.params.buffers.contains_key(&key) {
                        return Err(Error::Internal(format!("entry {e} lacks buffer `{key}`")));
                    }
                }
            }
        }
        if owned.iter().any(|o| !o) {
            return Err(Error::Internal("a global class has no owner".into()));
        }
        Ok(())
    }

    pub fn num_global_classes(&self) -> usize {
        self.global_classes.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.entries[0].params.spec.input_shape
    }

    /// Checksums of every entry, for frozenness checks.
    pub fn checksums(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.params.checksum()).collect()
    }

    /// Writes `manifest.txt` and one checkpoint per entry into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest =
            String::from("# purer-zoo-v1\n# checkpoint\tarch_id\tdataset_id\tlocal:global\tsource_classes\n");
        for (i, entry) in self.entries.iter().enumerate() {
            let file = format!("entry{i:03}.ckpt");
            checkpoint::save_checkpoint(&dir.join(&file), &entry.params)?;
            let table = entry
                .global_class_ids
                .iter()
                .enumerate()
                .map(|(l, g)| format!("{l}:{g}"))
                .collect::<Vec<_>>()
                .join(",");
            let source = entry
                .source_classes
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            manifest.push_str(&format!(
                "{file}\t{}\t{}\t{table}\t{source}\n",
                entry.params.spec.arch, entry.source_dataset_id
            ));
        }
        checkpoint::write_file(&dir.join("manifest.txt"), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut global_classes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: lineno + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated columns, got {}", cols.len())));
            }
            let params = checkpoint::load_checkpoint(&dir.join(cols[0]))?;
            let arch: ArchId = cols[1].parse()?;
            if arch != params.spec.arch {
                return Err(bad(format!("manifest says {arch}, checkpoint is {}", params.spec.arch)));
            }
            let mut ids = Vec::new();
            for (expect_local, pair) in cols[3].split(',').enumerate() {
                let (l, g) = pair
                    .split_once(':')
                    .ok_or_else(|| bad(format!("bad class pair `{pair}`")))?;
                let l: usize = l.parse().map_err(|_| bad(format!("bad local id `{l}`")))?;
                let g: usize = g.parse().map_err(|_| bad(format!("bad global id `{g}`")))?;
                if l != expect_local {
                    return Err(bad("local ids must be listed in order".into()));
                }
                ids.push(g);
            }
            let source_classes = cols[4]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad(format!("bad source class `{s}`"))))
                .collect::<Result<Vec<usize>>>()?;
            let e = entries.len();
            for (local, &g) in ids.iter().enumerate() {
                if global_classes.len() <= g {
                    global_classes.resize(g + 1, (usize::MAX, usize::MAX));
                }
                global_classes[g] = (e, local);
            }
            entries.push(ModelZooEntry {
                params,
                global_class_ids: ids,
                source_dataset_id: cols[2].to_string(),
                source_classes,
            });
        }
        if entries.is_empty() {
            return Err(Error::Format(format!("{} lists no entries", path.display())));
        }
        let zoo = Self {
            entries,
            global_classes,
        };
        zoo.validate()?;
        Ok(zoo)
    }
}

/// Supervised pre-training recipe for zoo entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ZooConfig {
    pub num_models: usize,
    pub way: usize,
    pub scenario: Scenario,
    pub epochs: usize,
    pub width: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub min_train_accuracy: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            num_models: 4,
            way: 5,
            scenario: Scenario::SS,
            epochs: 30,
            width: 1.0,
            lr: 1e-3,
            batch_size: 32,
            min_train_accuracy: 0.95,
        }
    }
}

/// Trains `net` on `(images, labels)` with Adam and cross-entropy, updating
/// BN buffers from every mini-batch. Returns the final training accuracy
/// measured with running statistics.
pub fn train_supervised<R: Rng + ?Sized>(
    net: &mut NetworkParams,
    images: &Tensor,
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Input("need at least two training images".into()));
    }
    let cfg = AdamConfig::with_lr(lr);
    let mut adam = ParamAdam::for_params(&net.params);
    let mut order: Vec<usize> = (0..n).collect();
    let batch_size = batch_size.max(2);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut start = 0;
        while start < n {
            let mut end = (start + batch_size).min(n);
            // never leave a single-image tail batch
            if n - end == 1 {
                end = n;
            }
            let items = &order[start..end];
            start = end;
            let tape = Tape::new();
            let vars = net.leaves(&tape);
            let x = tape.constant(images.select_outer(items));
            let y: Vec<usize> = items.iter().map(|&i| labels[i]).collect();
            let trace = nets::forward_vars(&net.spec, &vars, &net.buffers, x, BnMode::BatchStats)?;
            let loss = cross_entropy_mean(trace.logits, &y);
            if !loss.item().is_finite() {
                return Err(Error::numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            let wrt = vars.vars();
            let grads = tape.grad(loss, &wrt, false);
            let grads = vars
                .names()
                .into_iter()
                .zip(grads)
                .map(|(k, g)| (k, (*g.value()).clone()))
                .collect();
            adam.update(&mut net.params, &grads, &cfg)?;
            let (means, variances, counts) = trace.batch_stats();
            net.update_running_stats(&means, &variances, &counts)?;
        }
    }
    let trace = nets::forward(net, images, BnMode::RunningStats)?;
    Ok(nets::accuracy(&nets::argmax_rows(&trace.logits), labels))
}

/// Pre-trains `cfg.num_models` N-way classifiers on train-split classes.
///
/// Classes are drawn without replacement within a model and with
/// replacement across models; every (entry, local class) pair becomes its
/// own global pseudo-class.
pub fn build_zoo<R: Rng + ?Sized>(
    datasets: &[LabeledDataset],
    splits: &[SplitSpec],
    cfg: &ZooConfig,
    rng: &mut R,
) -> Result<ModelZoo> {
    if datasets.is_empty() || datasets.len() != splits.len() {
        return Err(Error::Config("need one split per dataset".into()));
    }
    if cfg.scenario != Scenario::MH && datasets.len() != 1 {
        return Err(Error::Scenario(format!(
            "{} uses a single dataset, got {}",
            cfg.scenario,
            datasets.len()
        )));
    }
    let shape = datasets[0].image_shape();
    for (ds, split) in datasets.iter().zip(splits) {
        split.validate_for(ds)?;
        if ds.image_shape() != shape {
            return Err(Error::Input(format!(
                "dataset `{}` has image shape {:?}, expected {shape:?}",
                ds.dataset_id,
                ds.image_shape()
            )));
        }
        if split.train.len() < cfg.way {
            return Err(Error::Input(format!(
                "dataset `{}` has {} train classes, need {}",
                ds.dataset_id,
                split.train.len(),
                cfg.way
            )));
        }
    }
    let mut entries = Vec::with_capacity(cfg.num_models);
    for m in 0..cfg.num_models {
        let d = match cfg.scenario {
            Scenario::MH => rng.random_range(0..datasets.len()),
            _ => 0,
        };
        let arch = match cfg.scenario {
            Scenario::SS => ArchId::Conv4,
            _ => [ArchId::Conv4, ArchId::Resnet8][rng.random_range(0..2)],
        };
        let (ds, split) = (&datasets[d], &splits[d]);
        let classes: Vec<usize> = index::sample(rng, split.train.len(), cfg.way)
            .into_iter()
            .map(|i| split.train[i])
            .collect();
        let entry_seed = rng.next_u64();
        let spec = ArchSpec::new(arch, shape, cfg.way).with_width(cfg.width);
        let mut params = build_network(&spec, entry_seed)?;
        let (images, labels) = ds.subset(&classes);
        let mut train_rng = ChaCha8Rng::seed_from_u64(entry_seed ^ 0x5eed);
        let acc = train_supervised(
            &mut params,
            &images,
            &labels,
            cfg.epochs,
            cfg.lr,
            cfg.batch_size,
            &mut train_rng,
        )?;
        // freeze at storage precision so saved and in-memory zoos agree
        params.round_to_f32();
        let trace = nets::forward(&params, &images, BnMode::RunningStats)?;
        let acc_rounded = nets::accuracy(&nets::argmax_rows(&trace.logits), &labels);
        debug!("zoo entry {m}: {arch} on {classes:?}, train acc {acc:.3} ({acc_rounded:.3} after rounding)");
        if acc_rounded < cfg.min_train_accuracy {
            return Err(Error::TrainingFailure {
                achieved: acc_rounded,
                required: cfg.min_train_accuracy,
            });
        }
        entries.push(ModelZooEntry {
            params,
            global_class_ids: Vec::new(),
            source_dataset_id: ds.dataset_id.clone(),
            source_classes: classes,
        });
    }
    let zoo = ModelZoo::from_entries(entries)?;
    info!(
        "built {} zoo with {} models, {} pseudo-classes",
        cfg.scenario,
        zoo.entries.len(),
        zoo.num_global_classes()
    );
    Ok(zoo)
}

/// A randomly initialized model, the first baseline.
pub fn random_init_baseline(spec: &ArchSpec, seed: u64) -> Result<NetworkParams> {
    build_network(spec, seed)
}

/// Element-wise mean of all parameters and buffers; only defined when every
/// entry shares one architecture.
pub fn average_models(zoo: &ModelZoo) -> Result<NetworkParams> {
    let first = zoo
        .entries
        .first()
        .ok_or_else(|| Error::Scenario("cannot average an empty zoo".into()))?;
    if zoo.entries.iter().any(|e| e.params.spec != first.params.spec) {
        return Err(Error::Scenario(
            "averaging requires every pre-trained model to share one architecture".into(),
        ));
    }
    let n = zoo.entries.len() as f64;
    let mut out = first.params.clone();
    for (k, acc) in out.params.iter_mut() {
        for e in &zoo.entries[1..] {
            for (a, b) in acc.data_mut().iter_mut().zip(e.params.params[k].data()) {
                *a += b;
            }
        }
        for a in acc.data_mut() {
            *a /= n;
        }
    }
    for (k, acc) in out.buffers.iter_mut() {
        for e in &zoo.entries[1..] {
            for (a, b) in acc.data_mut().iter_mut().zip(e.params.buffers[k].data()) {
                *a += b;
            }
        }
        for a in acc.data_mut() {
            *a /= n;
        }
    }
    Ok(out)
}
