//! Model inversion: the learnable pseudo-image bank, its regularized
//! classification loss against the frozen zoo, and the Adam step that
//! updates it.
//!
//! Zoo models are run with their running BN statistics (deployment mode);
//! the batch statistics of the pseudo images are still measured on every
//! layer and pulled toward the stored running statistics.

use std::path::Path;
use std::rc::Rc;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{cross_entropy_sum, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{self, BnMode, NetworkParams};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::zoo::ModelZoo;

/// Weights of the image priors and the BN feature regularizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionWeights {
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub feature_weight: f64,
}

impl Default for InversionWeights {
    fn default() -> Self {
        Self {
            alpha_tv: 1e-4,
            alpha_l2: 1e-5,
            feature_weight: 1.0,
        }
    }
}

impl InversionWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("feature_weight", self.feature_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// The learnable pseudo-image bank: `K+M` images per global pseudo-class.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicDataset {
    /// `[num_global_classes, K+M, C, H, W]`
    pub images: Tensor,
    /// Global class → owning zoo entry.
    pub class_owner: Vec<usize>,
    /// Global class → the owner's local logit index.
    pub assigned_labels: Vec<usize>,
    pub optimizer: AdamState,
}

impl DynamicDataset {
    pub fn num_classes(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn per_class(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[2], s[3], s[4]]
    }

    /// Index of `(class, instance)` in the flattened `[G·(K+M), C,H,W]` view.
    pub fn flat_index(&self, class: usize, instance: usize) -> usize {
        class * self.per_class() + instance
    }

    pub fn flat_shape(&self) -> [usize; 4] {
        let [c, h, w] = self.image_shape();
        [self.num_classes() * self.per_class(), c, h, w]
    }

    /// The bank as a differentiable leaf of shape `[G·(K+M), C,H,W]`.
    pub fn leaf<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.leaf(self.images.clone().reshaped(&self.flat_shape()))
    }

    pub fn flat_images(&self) -> Tensor {
        self.images.clone().reshaped(&self.flat_shape())
    }

    /// One Adam step of size `beta` on the bank. Non-finite gradients abort
    /// without modifying anything.
    pub fn step(&mut self, grad: &Tensor, beta: f64) -> Result<()> {
        if grad.len() != self.images.len() {
            return Err(Error::Input(format!(
                "gradient has {} entries, bank has {}",
                grad.len(),
                self.images.len()
            )));
        }
        let grad = grad.clone().reshaped(self.images.shape());
        self.optimizer
            .update(&mut self.images, &grad, &AdamConfig::with_lr(beta))
    }

    fn check_consistent(&self, zoo: &ModelZoo) -> Result<()> {
        if self.num_classes() != zoo.num_global_classes() {
            return Err(Error::Internal(format!(
                "bank has {} classes, zoo has {}",
                self.num_classes(),
                zoo.num_global_classes()
            )));
        }
        for (g, &(e, l)) in zoo.global_classes.iter().enumerate() {
            if self.class_owner[g] != e || self.assigned_labels[g] != l {
                return Err(Error::Internal(format!("class {g} owner table disagrees with zoo")));
            }
        }
        Ok(())
    }
}

/// A bank of N(0,1) noise with `K+M` images per zoo pseudo-class.
pub fn init_dynamic_dataset(
    zoo: &ModelZoo,
    shots: usize,
    queries: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<DynamicDataset> {
    if zoo.entries.is_empty() {
        return Err(Error::Input("empty zoo".into()));
    }
    if shape != zoo.input_shape() {
        return Err(Error::Input(format!(
            "bank shape {shape:?} does not match zoo input {:?}",
            zoo.input_shape()
        )));
    }
    let per_class = shots + queries;
    if per_class < 2 {
        return Err(Error::Input("need at least two images per class".into()));
    }
    let g = zoo.num_global_classes();
    let dims = vec![g, per_class, shape[0], shape[1], shape[2]];
    let images = gaussian(&dims, seed);
    Ok(DynamicDataset {
        optimizer: AdamState::new(&dims),
        images,
        class_owner: zoo.global_classes.iter().map(|&(e, _)| e).collect(),
        assigned_labels: zoo.global_classes.iter().map(|&(_, l)| l).collect(),
    })
}

fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
}

/// Squared anisotropic total variation, averaged over the batch.
pub fn tv_prior<'t>(images: Var<'t>) -> Result<Var<'t>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::Input(format!("total variation needs H,W >= 2, got {h}x{w}")));
    }
    let mut down = (Vec::new(), Vec::new());
    let mut right = (Vec::new(), Vec::new());
    for p in 0..b * c {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                if y + 1 < h {
                    down.0.push(i + w);
                    down.1.push(i);
                }
                if x + 1 < w {
                    right.0.push(i + 1);
                    right.1.push(i);
                }
            }
        }
    }
    let diff = |(a, b): (Vec<usize>, Vec<usize>)| {
        let n = a.len();
        images.gather(Rc::new(a), &[n]) - images.gather(Rc::new(b), &[n])
    };
    let dv = diff(down);
    let dh = diff(right);
    Ok(((dv * dv).sum() + (dh * dh).sum()) * (1.0 / b as f64))
}

/// Squared l2 norm per image, averaged over the batch.
pub fn l2_prior<'t>(images: Var<'t>) -> Var<'t> {
    let b = images.shape()[0];
    (images * images).sum() * (1.0 / b as f64)
}

/// Σ_l ‖μ_l − running_mean_l‖² + ‖σ²_l − running_var_l‖².
pub fn bn_feature_loss<'t>(
    owner: &NetworkParams,
    means: &[Var<'t>],
    vars: &[Var<'t>],
    tape: &'t Tape,
) -> Result<Var<'t>> {
    let layers = owner.spec.bn_layers();
    if layers.len() != means.len() || layers.len() != vars.len() {
        return Err(Error::Internal(format!(
            "model has {} BN layers, trace has {}",
            layers.len(),
            means.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for ((name, _), (m, v)) in layers.iter().zip(means.iter().zip(vars)) {
        let rm = tape.constant(owner.buffers[&nets::running_mean_key(name)].clone());
        let rv = tape.constant(owner.buffers[&nets::running_var_key(name)].clone());
        let dm = *m - rm;
        let dv = *v - rv;
        let term = (dm * dm).sum() + (dv * dv).sum();
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Value-level [`bn_feature_loss`] on a plain forward trace.
pub fn bn_feature_loss_value(owner: &NetworkParams, trace: &nets::ForwardTrace) -> Result<f64> {
    let tape = Tape::new();
    let means: Vec<_> = trace.bn_means.iter().map(|m| tape.constant(m.clone())).collect();
    let vars: Vec<_> = trace.bn_vars.iter().map(|v| tape.constant(v.clone())).collect();
    Ok(bn_feature_loss(owner, &means, &vars, &tape)?.item())
}

/// Terms of the inversion loss for one owning model's images.
pub struct OwnerTerms<'t> {
    pub cross_entropy: Var<'t>,
    pub total: Var<'t>,
}

/// Inversion loss for a batch of images that one model owns.
pub fn owner_loss<'t>(
    owner: &NetworkParams,
    images: Var<'t>,
    labels: &[usize],
    weights: &InversionWeights,
) -> Result<OwnerTerms<'t>> {
    let tape = images.tape();
    let params = owner.constants(tape);
    let trace = nets::forward_vars(&owner.spec, &params, &owner.buffers, images, BnMode::RunningStats)?;
    let ce = cross_entropy_sum(trace.logits, labels);
    let mut total = ce;
    if weights.alpha_tv != 0.0 {
        total = total + tv_prior(images)? * weights.alpha_tv;
    }
    if weights.alpha_l2 != 0.0 {
        total = total + l2_prior(images) * weights.alpha_l2;
    }
    if weights.feature_weight != 0.0 {
        if trace.bn_means.is_empty() {
            warn!("owner model has no BN layers; feature regularizer is zero");
        } else {
            total = total + bn_feature_loss(owner, &trace.bn_means, &trace.bn_vars, tape)? * weights.feature_weight;
        }
    }
    Ok(OwnerTerms {
        cross_entropy: ce,
        total,
    })
}

/// Recorded inversion loss over a selection of pseudo-classes.
pub struct InversionTerms<'t> {
    pub cross_entropy: Var<'t>,
    pub total: Var<'t>,
}

/// Summed cross-entropy under each owning model plus that model's weighted
/// priors, over the selected classes (all when `subset` is `None`).
/// `bank` is the flat `[G·(K+M), C,H,W]` view of `dd.images`.
pub fn inversion_loss_vars<'t>(
    zoo: &ModelZoo,
    dd: &DynamicDataset,
    bank: Var<'t>,
    weights: &InversionWeights,
    subset: Option<&[usize]>,
) -> Result<InversionTerms<'t>> {
    dd.check_consistent(zoo)?;
    let selected: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..dd.num_classes()).collect(),
    };
    if selected.is_empty() {
        return Err(Error::Input("empty class selection".into()));
    }
    if let Some(&bad) = selected.iter().find(|&&g| g >= dd.num_classes()) {
        return Err(Error::Input(format!("class {bad} is not a pseudo-class")));
    }
    let mut ce: Option<Var<'t>> = None;
    let mut total: Option<Var<'t>> = None;
    for (e, entry) in zoo.entries.iter().enumerate() {
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for &g in selected.iter().filter(|&&g| dd.class_owner[g] == e) {
            for i in 0..dd.per_class() {
                items.push(dd.flat_index(g, i));
                labels.push(dd.assigned_labels[g]);
            }
        }
        if items.is_empty() {
            continue;
        }
        let terms = owner_loss(&entry.params, bank.select_outer(&items), &labels, weights)?;
        ce = Some(ce.map_or(terms.cross_entropy, |c| c + terms.cross_entropy));
        total = Some(total.map_or(terms.total, |t| t + terms.total));
    }
    Ok(InversionTerms {
        cross_entropy: ce.expect("non-empty selection"),
        total: total.expect("non-empty selection"),
    })
}

/// Value of the inversion loss.
pub fn inversion_loss(
    zoo: &ModelZoo,
    dd: &DynamicDataset,
    weights: &InversionWeights,
    subset: Option<&[usize]>,
) -> Result<f64> {
    let tape = Tape::new();
    let bank = tape.constant(dd.flat_images());
    Ok(inversion_loss_vars(zoo, dd, bank, weights, subset)?.total.item())
}

/// Inversion loss and its gradient w.r.t. the whole bank.
pub fn inversion_loss_and_grad(
    zoo: &ModelZoo,
    dd: &DynamicDataset,
    weights: &InversionWeights,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let bank = dd.leaf(&tape);
    let loss = inversion_loss_vars(zoo, dd, bank, weights, None)?.total;
    let g = tape.grad(loss, &[bank], false)[0];
    Ok((loss.item(), (*g.value()).clone()))
}

/// Inverts a single model: fresh N(0,1) images, `count_per_label` per label,
/// optimized for `steps` Adam steps of size `lr` against the inversion loss.
pub fn synthesize_from_model(
    params: &NetworkParams,
    labels: &[usize],
    count_per_label: usize,
    steps: usize,
    lr: f64,
    weights: &InversionWeights,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if steps == 0 {
        return Err(Error::Input("synthesis needs at least one step".into()));
    }
    if labels.is_empty() || count_per_label == 0 {
        return Err(Error::Input("nothing to synthesize".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= params.spec.num_classes) {
        return Err(Error::Input(format!("label {bad} out of range")));
    }
    let [c, h, w] = params.spec.input_shape;
    let n = labels.len() * count_per_label;
    let targets: Vec<usize> = labels
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, count_per_label))
        .collect();
    let mut images = gaussian(&[n, c, h, w], seed);
    let mut adam = AdamState::new(images.shape());
    let cfg = AdamConfig::with_lr(lr);
    for _ in 0..steps {
        let tape = Tape::new();
        let x = tape.leaf(images.clone());
        let loss = owner_loss(params, x, &targets, weights)?.total;
        let g = tape.grad(loss, &[x], false)[0].value();
        adam.update(&mut images, &g, &cfg)?;
    }
    Ok((images, targets))
}

/// Writes one PNG grid per pseudo-class (images side by side), each image
/// clamped to `[0,1]` and min-max normalized.
pub fn dump_images(dd: &DynamicDataset, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [c, h, w] = dd.image_shape();
    let per = dd.per_class();
    let flat = dd.flat_images();
    let mut written = Vec::new();
    for g in 0..dd.num_classes() {
        let mut grid = image::RgbImage::new((w * per) as u32, h as u32);
        for i in 0..per {
            let img = flat.slice_outer(dd.flat_index(g, i), 1).map(|v| v.clamp(0.0, 1.0));
            let (lo, hi) = img
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| {
                        let ch = ch.min(c - 1);
                        let v = (img.data()[(ch * h + y) * w + x] - lo) / span;
                        (v * 255.0).round() as u8
                    };
                    grid.put_pixel((i * w + x) as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
        let path = dir.join(format!("class{g:03}.png"));
        grid.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_network, ArchId, ArchSpec};
    use crate::zoo::ModelZooEntry;

    fn value_of<F>(x: Tensor, f: F) -> f64
    where
        F: for<'t> Fn(Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        f(tape.constant(x)).item()
    }

    #[test]
    fn tv_of_constant_is_zero() {
        let x = Tensor::full(&[2, 3, 4, 4], 0.7);
        assert_eq!(value_of(x, |v| tv_prior(v).unwrap()), 0.0);
    }

    #[test]
    fn tv_of_small_ramp() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(value_of(x, |v| tv_prior(v).unwrap()), 10.0);
    }

    #[test]
    fn tv_scales_quadratically() {
        let x = Tensor::new(vec![1, 2, 3, 2], (0..12).map(|i| (i as f64).sin()).collect());
        let a = value_of(x.clone(), |v| tv_prior(v).unwrap());
        let b = value_of(x.map(|v| 3.0 * v), |v| tv_prior(v).unwrap());
        assert!((b - 9.0 * a).abs() < 1e-12);
    }

    #[test]
    fn tv_rejects_single_pixel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(matches!(tv_prior(x), Err(Error::Input(_))));
    }

    #[test]
    fn l2_examples() {
        assert_eq!(value_of(Tensor::zeros(&[1, 1, 2, 2]), l2_prior), 0.0);
        assert_eq!(value_of(Tensor::full(&[1, 1, 2, 2], 1.0), l2_prior), 4.0);
        assert_eq!(value_of(Tensor::full(&[2, 1, 2, 2], 1.0), l2_prior), 4.0);
    }

    fn one_bn_owner() -> NetworkParams {
        // conv4 has four BN layers; zero every layer's target except the first
        let spec = ArchSpec::new(ArchId::Conv4, [1, 4, 4], 2).with_width(2.0 / 32.0);
        build_network(&spec, 0).unwrap()
    }

    #[test]
    fn bn_loss_zero_when_statistics_match() {
        let owner = one_bn_owner();
        let tape = Tape::new();
        let means: Vec<_> = (0..4).map(|_| tape.constant(Tensor::zeros(&[2]))).collect();
        let vars: Vec<_> = (0..4).map(|_| tape.constant(Tensor::full(&[2], 1.0))).collect();
        assert!(bn_feature_loss(&owner, &means, &vars, &tape).unwrap().item().abs() < 1e-6);
    }

    #[test]
    fn bn_loss_hand_value() {
        let owner = one_bn_owner();
        let tape = Tape::new();
        let mut means: Vec<_> = (0..4).map(|_| tape.constant(Tensor::zeros(&[2]))).collect();
        means[0] = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]));
        let vars: Vec<_> = (0..4).map(|_| tape.constant(Tensor::full(&[2], 1.0))).collect();
        assert!((bn_feature_loss(&owner, &means, &vars, &tape).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bn_loss_layer_mismatch_is_internal_error() {
        let owner = one_bn_owner();
        let tape = Tape::new();
        let one = vec![tape.constant(Tensor::zeros(&[2]))];
        assert!(matches!(
            bn_feature_loss(&owner, &one, &one, &tape),
            Err(Error::Internal(_))
        ));
    }

    fn tiny_zoo(models: usize) -> ModelZoo {
        let spec = ArchSpec::new(ArchId::Conv4, [2, 4, 4], 3).with_width(2.0 / 32.0);
        let entries = (0..models)
            .map(|s| ModelZooEntry {
                params: build_network(&spec, s as u64).unwrap(),
                global_class_ids: Vec::new(),
                source_dataset_id: "t".into(),
                source_classes: vec![0, 1, 2],
            })
            .collect();
        ModelZoo::from_entries(entries).unwrap()
    }

    #[test]
    fn init_bank_shape_and_determinism() {
        let zoo = tiny_zoo(2);
        let a = init_dynamic_dataset(&zoo, 1, 3, [2, 4, 4], 9).unwrap();
        assert_eq!(a.images.shape(), &[6, 4, 2, 4, 4]);
        assert_eq!(a, init_dynamic_dataset(&zoo, 1, 3, [2, 4, 4], 9).unwrap());
        assert!(init_dynamic_dataset(&zoo, 1, 3, [3, 4, 4], 9).is_err());
    }

    #[test]
    fn uniform_logits_give_log_n_per_image() {
        let mut zoo = tiny_zoo(1);
        for (k, v) in zoo.entries[0].params.params.iter_mut() {
            if k.starts_with("head.") {
                *v = Tensor::zeros(v.shape());
            }
        }
        let dd = init_dynamic_dataset(&zoo, 1, 2, [2, 4, 4], 0).unwrap();
        let w = InversionWeights {
            alpha_tv: 0.0,
            alpha_l2: 0.0,
            feature_weight: 0.0,
        };
        let l = inversion_loss(&zoo, &dd, &w, None).unwrap();
        assert!((l - 9.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bank_gradient_matches_finite_differences() {
        let zoo = tiny_zoo(2);
        let mut dd = init_dynamic_dataset(&zoo, 1, 1, [2, 4, 4], 4).unwrap();
        dd.images = dd.images.map(|v| 0.5 * v);
        let w = InversionWeights {
            alpha_tv: 0.3,
            alpha_l2: 0.2,
            feature_weight: 1.0,
        };
        let (_, g) = inversion_loss_and_grad(&zoo, &dd, &w).unwrap();
        let h = 1e-5;
        for idx in [0, 7, 33, 64, 101, g.len() - 1] {
            let mut plus = dd.clone();
            plus.images.data_mut()[idx] += h;
            let mut minus = dd.clone();
            minus.images.data_mut()[idx] -= h;
            let fd = (inversion_loss(&zoo, &plus, &w, None).unwrap() - inversion_loss(&zoo, &minus, &w, None).unwrap())
                / (2.0 * h);
            let a = g.data()[idx];
            assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "idx {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn empty_selection_rejected() {
        let zoo = tiny_zoo(1);
        let dd = init_dynamic_dataset(&zoo, 1, 1, [2, 4, 4], 0).unwrap();
        let err = inversion_loss(&zoo, &dd, &InversionWeights::default(), Some(&[]));
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_is_additive_over_class_subsets() {
        let zoo = tiny_zoo(2);
        let dd = init_dynamic_dataset(&zoo, 1, 2, [2, 4, 4], 3).unwrap();
        let ce = |subset: &[usize]| {
            let tape = Tape::new();
            let bank = tape.constant(dd.flat_images());
            inversion_loss_vars(&zoo, &dd, bank, &InversionWeights::default(), Some(subset))
                .unwrap()
                .cross_entropy
                .item()
        };
        let whole = ce(&[0, 1, 2, 3, 4, 5]);
        let parts = ce(&[0, 4]) + ce(&[1, 2, 3, 5]);
        assert!((whole - parts).abs() < 1e-10 * whole.abs().max(1.0));
    }

    #[test]
    fn zero_gradient_step_keeps_images() {
        let zoo = tiny_zoo(1);
        let mut dd = init_dynamic_dataset(&zoo, 1, 1, [2, 4, 4], 0).unwrap();
        let before = dd.images.clone();
        dd.step(&Tensor::zeros(dd.images.shape()), 0.25).unwrap();
        assert_eq!(dd.images, before);
        assert_eq!(dd.optimizer.step, 1);
        assert!(dd.optimizer.moments.m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_with_constant_gradient_moves_by_beta() {
        let zoo = tiny_zoo(1);
        let mut dd = init_dynamic_dataset(&zoo, 1, 1, [2, 4, 4], 0).unwrap();
        let before = dd.images.clone();
        dd.step(&Tensor::full(dd.images.shape(), 0.3), 0.25).unwrap();
        for (a, b) in dd.images.data().iter().zip(before.data()) {
            assert!((b - a - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn sequential_steps_thread_state() {
        let zoo = tiny_zoo(1);
        let dd0 = init_dynamic_dataset(&zoo, 1, 1, [2, 4, 4], 0).unwrap();
        let g1 = Tensor::full(dd0.images.shape(), 0.3);
        let g2 = dd0.images.map(|v| v.sin());
        let mut a = dd0.clone();
        a.step(&g1, 0.25).unwrap();
        a.step(&g2, 0.25).unwrap();
        let mut b = dd0.clone();
        b.step(&g1, 0.25).unwrap();
        let mid = b.clone();
        b.step(&g2, 0.25).unwrap();
        assert_eq!(a, b);
        assert_ne!(mid.images, b.images);
        assert_eq!(b.optimizer.step, 2);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let zoo = tiny_zoo(1);
        let mut dd = init_dynamic_dataset(&zoo, 1, 1, [2, 4, 4], 0).unwrap();
        let before = dd.clone();
        let mut g = Tensor::zeros(dd.images.shape());
        g.data_mut()[3] = f64::INFINITY;
        assert!(matches!(dd.step(&g, 0.25), Err(Error::Numeric { .. })));
        assert_eq!(dd, before);
    }

    #[test]
    fn synthesis_contract() {
        let zoo = tiny_zoo(1);
        let p = &zoo.entries[0].params;
        let w = InversionWeights::default();
        assert!(synthesize_from_model(p, &[0, 1], 2, 0, 0.25, &w, 0).is_err());
        let (a, labels) = synthesize_from_model(p, &[0, 1], 2, 1, 0.25, &w, 5).unwrap();
        let (b, _) = synthesize_from_model(p, &[0, 1], 2, 1, 0.25, &w, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(labels, vec![0, 0, 1, 1]);
        // one step away from the seeded noise: every pixel moved by about lr
        let noise = gaussian(&[4, 2, 4, 4], 5);
        for (x, n) in a.data().iter().zip(noise.data()) {
            assert!((x - n).abs() <= 0.25 + 1e-9);
        }
    }
}
