//! Labeled image datasets, class splits, synthetic data and task sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0,1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[num_items, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_index: BTreeMap<usize, Vec<usize>>,
    pub class_names: Vec<String>,
    pub dataset_id: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, dataset_id: &str) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            if y >= class_names.len() {
                return Err(Error::Input(format!("label {y} has no class name")));
            }
            class_index.entry(y).or_default().push(i);
        }
        Ok(Self {
            images,
            labels,
            class_index,
            class_names,
            dataset_id: dataset_id.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Items of the given classes with labels relabelled `0..classes.len()`.
    pub fn subset(&self, classes: &[usize]) -> (Tensor, Vec<usize>) {
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for (local, c) in classes.iter().enumerate() {
            if let Some(list) = self.class_index.get(c) {
                items.extend_from_slice(list);
                labels.extend(std::iter::repeat_n(local, list.len()));
            }
        }
        (self.images.select_outer(&items), labels)
    }
}

/// Disjoint meta-train / meta-val / meta-test class sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn new(train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let s = Self { train, val, test };
        s.check_disjoint()?;
        Ok(s)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*c) {
                return Err(Error::Input(format!("class {c} appears in more than one split")));
            }
        }
        Ok(())
    }

    /// Classes `0..train`, then `val`, then `test`, in order.
    pub fn contiguous(train: usize, val: usize, test: usize) -> Self {
        Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        }
    }

    /// Random disjoint split of `num_classes` classes.
    pub fn random(num_classes: usize, train: usize, val: usize, test: usize, seed: u64) -> Result<Self> {
        if train + val + test > num_classes {
            return Err(Error::Input(format!(
                "split {train}/{val}/{test} needs more than {num_classes} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = index::sample(&mut rng, num_classes, train + val + test).into_vec();
        let mut parts = [
            perm[..train].to_vec(),
            perm[train..train + val].to_vec(),
            perm[train + val..].to_vec(),
        ];
        for p in &mut parts {
            p.sort_unstable();
        }
        let [train, val, test] = parts;
        Self::new(train, val, test)
    }

    /// The usual 64/16/20 split over 100 classes.
    pub fn standard(num_classes: usize, seed: u64) -> Result<Self> {
        Self::random(num_classes, 64, 16, 20, seed)
    }

    pub fn validate_for(&self, ds: &LabeledDataset) -> Result<()> {
        self.check_disjoint()?;
        for c in self.train.iter().chain(&self.val).chain(&self.test) {
            if !ds.class_index.contains_key(c) {
                return Err(Error::Input(format!(
                    "split class {c} not present in dataset `{}`",
                    ds.dataset_id
                )));
            }
        }
        Ok(())
    }

    /// `train: a,b` / `val: ...` / `test: ...` using class names.
    pub fn to_text(&self, names: &[String]) -> String {
        let join = |ids: &[usize]| ids.iter().map(|&i| names[i].as_str()).collect::<Vec<_>>().join(",");
        format!(
            "train: {}\nval: {}\ntest: {}\n",
            join(&self.train),
            join(&self.val),
            join(&self.test)
        )
    }

    pub fn from_text(text: &str, names: &[String]) -> Result<Self> {
        let mut parts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected `<split>: names`, got `{line}`"),
            })?;
            let key = key.trim();
            if !matches!(key, "train" | "val" | "test") {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("unknown split `{key}`"),
                });
            }
            let mut ids = Vec::new();
            for name in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let id = names.iter().position(|n| n == name).ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    message: format!("unknown class `{name}`"),
                })?;
                ids.push(id);
            }
            parts.insert(key, ids);
        }
        let mut take = |k: &str| parts.remove(k).unwrap_or_default();
        Self::new(take("train"), take("val"), take("test"))
    }

    pub fn load(path: &Path, names: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, names)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Real,
    Pseudo,
}

/// An N-way K-shot task with disjoint support and query sets. Labels are
/// remapped to `0..N` in the order of `source_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub way: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub origin: Origin,
    pub source_classes: Vec<usize>,
    /// Underlying item ids: dataset indices for real tasks, flat pseudo-image
    /// indices for pseudo tasks.
    pub support_items: Vec<usize>,
    pub query_items: Vec<usize>,
}

/// Reads `<root>/<class_name>/<item>.png`, classes and items in name order.
pub fn load_dataset(root: &Path, expected_shape: [usize; 3]) -> Result<LabeledDataset> {
    let [c, h, w] = expected_shape;
    if c != 1 && c != 3 {
        return Err(Error::Input(format!("unsupported channel count {c}")));
    }
    let read_dir = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let class_dirs: Vec<_> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no class directories"),
        ));
    }
    let mut names = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for dir in class_dirs {
        let label = names.len();
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let files: Vec<_> = read_dir(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        for file in files {
            let img = image::open(&file).map_err(|e| {
                Error::io(
                    &file,
                    std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
                )
            })?;
            if img.width() as usize != w || img.height() as usize != h {
                return Err(Error::Input(format!(
                    "{} is {}x{}, expected {w}x{h}",
                    file.display(),
                    img.width(),
                    img.height()
                )));
            }
            let planes: Vec<Vec<u8>> = if c == 3 {
                let rgb = img.to_rgb8();
                (0..3).map(|ch| rgb.pixels().map(|p| p.0[ch]).collect()).collect()
            } else {
                vec![img.to_luma8().into_raw()]
            };
            for plane in planes {
                data.extend(plane.into_iter().map(|v| v as f64 / 255.0));
            }
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG images found"),
        ));
    }
    let n = labels.len();
    let id = root.file_name().unwrap_or_default().to_string_lossy().into_owned();
    LabeledDataset::new(Tensor::new(vec![n, c, h, w], data), labels, names, &id)
}

/// Writes a dataset as a class-per-directory PNG tree.
pub fn save_dataset(ds: &LabeledDataset, root: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    for (cls, items) in &ds.class_index {
        let dir = root.join(&ds.class_names[*cls]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (j, &item) in items.iter().enumerate() {
            let px = ds.images.slice_outer(item, 1);
            let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let path = dir.join(format!("{j:05}.png"));
            let res = if c == 3 {
                let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let at = |ch: usize| to_u8(px.data()[(ch * h + y as usize) * w + x as usize]);
                    image::Rgb([at(0), at(1), at(2)])
                });
                img.save(&path)
            } else {
                let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([to_u8(px.data()[y as usize * w + x as usize])])
                });
                img.save(&path)
            };
            res.map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        }
    }
    Ok(())
}

/// Procedural dataset: each class is a sinusoidal grating with its own
/// spatial frequency, orientation and colour, plus Gaussian noise (σ = 0.1).
pub fn make_synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<LabeledDataset> {
    if per_class < 2 {
        return Err(Error::Input(format!("per_class must be at least 2, got {per_class}")));
    }
    if num_classes < 4 {
        return Err(Error::Input(format!("need at least 4 classes, got {num_classes}")));
    }
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let two_pi = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(num_classes * per_class * c * h * w);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for cls in 0..num_classes {
        let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.25..0.75)).collect();
        let freq = 1.0 + (cls % 3) as f64 + rng.random_range(0.0..0.5);
        let angle = two_pi * ((cls / 3) as f64 / 4.0 + rng.random_range(0.0..0.1));
        let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
        let phase: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..two_pi)).collect();
        for _ in 0..per_class {
            let shift = rng.random_range(-0.3..0.3);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let arg = two_pi * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase[ch] + shift;
                        let v = color[ch] + 0.2 * arg.sin() + noise.sample(&mut rng);
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(cls);
        }
    }
    let names = (0..num_classes).map(|i| format!("blob{i:03}")).collect();
    LabeledDataset::new(
        Tensor::new(vec![num_classes * per_class, c, h, w], data),
        labels,
        names,
        &format!("blobs-{seed}"),
    )
}

/// Samples an N-way K-shot task with M queries per class from `classes`.
pub fn sample_episode_from_dataset<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    classes: &[usize],
    way: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shots == 0 {
        return Err(Error::Input("way and shots must be positive".into()));
    }
    if classes.len() < way {
        return Err(Error::Input(format!(
            "{way}-way task needs {way} classes, only {} available",
            classes.len()
        )));
    }
    for c in classes {
        let have = ds.class_index.get(c).map_or(0, Vec::len);
        if have < shots + queries {
            return Err(Error::Input(format!(
                "class {c} has {have} items, task needs {}",
                shots + queries
            )));
        }
    }
    let chosen: Vec<usize> = index::sample(rng, classes.len(), way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support_items = Vec::with_capacity(way * shots);
    let mut query_items = Vec::with_capacity(way * queries);
    for c in &chosen {
        let items = &ds.class_index[c];
        let picks = index::sample(rng, items.len(), shots + queries).into_vec();
        support_items.extend(picks[..shots].iter().map(|&i| items[i]));
        query_items.extend(picks[shots..].iter().map(|&i| items[i]));
    }
    let label_of = |per: usize, n: usize| (0..n).map(move |i| i / per);
    Ok(Episode {
        support: ds.images.select_outer(&support_items),
        support_labels: label_of(shots, way * shots).collect(),
        query: ds.images.select_outer(&query_items),
        query_labels: label_of(queries.max(1), way * queries).collect(),
        way,
        shots,
        queries_per_class: queries,
        origin: Origin::Real,
        source_classes: chosen,
        support_items,
        query_items,
    })
}
