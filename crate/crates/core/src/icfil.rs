//! Meta-testing: fast adaptation on a real support set, optional contrastive
//! calibration against images inverted from the adapted model, head
//! retraining, and the multi-task evaluation harness.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autograd::{cross_entropy_mean, Tape, Var};
use crate::data::{sample_episode_from_dataset, Episode, LabeledDataset};
use crate::episodic::inner_adapt;
use crate::error::{Error, Result};
use crate::inversion::{synthesize_from_model, InversionWeights};
use crate::nets::{self, ArchSpec, BnMode, NetworkParams, ParamVars, HEAD_BIAS, HEAD_WEIGHT};
use crate::optim::{AdamConfig, AdamState, ParamAdam};
use crate::tensor::Tensor;

/// An adapted network split into backbone and linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    pub spec: ArchSpec,
    pub backbone: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    /// `[F, N]`
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl AdaptedModel {
    pub fn split(net: &NetworkParams) -> Self {
        let backbone = net
            .params
            .iter()
            .filter(|(k, _)| !k.starts_with("head."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self {
            spec: net.spec.clone(),
            backbone,
            buffers: net.buffers.clone(),
            head_weight: net.params[HEAD_WEIGHT].clone(),
            head_bias: net.params[HEAD_BIAS].clone(),
        }
    }

    pub fn to_network(&self) -> NetworkParams {
        let mut params = self.backbone.clone();
        params.insert(HEAD_WEIGHT.into(), self.head_weight.clone());
        params.insert(HEAD_BIAS.into(), self.head_bias.clone());
        NetworkParams {
            spec: self.spec.clone(),
            params,
            buffers: self.buffers.clone(),
        }
    }

    /// Embeddings in batch-statistics mode.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.backbone_constants(&tape);
        let bb = nets::backbone_vars(
            &self.spec,
            &params,
            &self.buffers,
            tape.constant(images.clone()),
            BnMode::BatchStats,
        )?;
        Ok((*bb.embedding.value()).clone())
    }

    fn backbone_constants<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.backbone
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }
}

/// One inner step on the support set, then split.
pub fn fast_adapt_test(theta: &NetworkParams, support: &Tensor, labels: &[usize], alpha: f64) -> Result<AdaptedModel> {
    Ok(AdaptedModel::split(&inner_adapt(theta, support, labels, alpha)?))
}

fn l2_normalize_rows<'t>(e: Var<'t>) -> Var<'t> {
    let shape = e.shape();
    let inv_norm = (e * e).reduce_axis(0).add_scalar(1e-12).powf(-0.5);
    e * inv_norm.broadcast_axis(0, &shape)
}

/// Supervised contrastive loss between real and pseudo embeddings:
/// `−Σ_x Σ_{x̂⁺} log softmax_{x̂}(φ(x)·φ(x̂)/τ)[x̂⁺]`.
pub fn calibration_loss_vars<'t>(
    real: Var<'t>,
    real_labels: &[usize],
    pseudo: Var<'t>,
    pseudo_labels: &[usize],
    tau: f64,
    normalize: bool,
) -> Result<Var<'t>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    if pseudo_labels.is_empty() || real_labels.is_empty() {
        return Err(Error::Input("calibration needs real and pseudo images".into()));
    }
    let (r, p) = (real_labels.len(), pseudo_labels.len());
    let (real, pseudo) = if normalize {
        (l2_normalize_rows(real), l2_normalize_rows(pseudo))
    } else {
        (real, pseudo)
    };
    let sim = real.matmul_t(pseudo, false, true) * (1.0 / tau);
    let mut picks = Vec::new();
    let mut positives = Vec::with_capacity(r);
    for (i, &y) in real_labels.iter().enumerate() {
        let before = picks.len();
        picks.extend((0..p).filter(|&j| pseudo_labels[j] == y).map(|j| i * p + j));
        let n = picks.len() - before;
        if n == 0 {
            return Err(Error::Input(format!("class {y} has no pseudo positives")));
        }
        positives.push(n as f64);
    }
    let n_picks = picks.len();
    let picked = sim.gather(std::rc::Rc::new(picks), &[n_picks]).sum();
    let lse = sim
        .row_logsumexp()
        .mul_const(std::rc::Rc::new(Tensor::new(vec![r], positives)))
        .sum();
    Ok(lse - picked)
}

/// Calibration loss of a backbone, real and pseudo images forwarded as one
/// batch.
pub fn calibration_loss(
    model: &AdaptedModel,
    real: &Tensor,
    real_labels: &[usize],
    pseudo: &Tensor,
    pseudo_labels: &[usize],
    tau: f64,
    normalize: bool,
) -> Result<f64> {
    let tape = Tape::new();
    let params = model.backbone_constants(&tape);
    Ok(calibration_on_tape(model, &params, real, real_labels, pseudo, pseudo_labels, tau, normalize)?.item())
}

#[allow(clippy::too_many_arguments)]
fn calibration_on_tape<'t>(
    model: &AdaptedModel,
    params: &ParamVars<'t>,
    real: &Tensor,
    real_labels: &[usize],
    pseudo: &Tensor,
    pseudo_labels: &[usize],
    tau: f64,
    normalize: bool,
) -> Result<Var<'t>> {
    let tape = params.vars()[0].tape();
    let r = real_labels.len();
    let both = Tensor::cat_outer(&[real, pseudo]);
    let emb = nets::backbone_vars(
        &model.spec,
        params,
        &model.buffers,
        tape.constant(both),
        BnMode::BatchStats,
    )?
    .embedding;
    let real_e = emb.select_outer(&(0..r).collect::<Vec<_>>());
    let pseudo_e = emb.select_outer(&(r..r + pseudo_labels.len()).collect::<Vec<_>>());
    calibration_loss_vars(real_e, real_labels, pseudo_e, pseudo_labels, tau, normalize)
}

/// Calibration loss and its gradient w.r.t. every backbone parameter.
pub fn calibration_loss_and_grad(
    model: &AdaptedModel,
    real: &Tensor,
    real_labels: &[usize],
    pseudo: &Tensor,
    pseudo_labels: &[usize],
    tau: f64,
    normalize: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let params: ParamVars<'_> = model
        .backbone
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
        .collect();
    let loss = calibration_on_tape(model, &params, real, real_labels, pseudo, pseudo_labels, tau, normalize)?;
    let grads = tape.grad(loss, &params.vars(), false);
    Ok((
        loss.item(),
        params
            .names()
            .into_iter()
            .zip(grads.iter().map(|g| (*g.value()).clone()))
            .collect(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcfilConfig {
    pub tau: f64,
    pub calibration_lr: f64,
    pub head_lr: f64,
    pub head_iters: usize,
    pub pseudo_per_class: usize,
    pub inversion_steps: usize,
    pub inversion_lr: f64,
    pub normalize_embeddings: bool,
    /// When false the backbone is left as adapted and only the head is retrained.
    pub calibrate: bool,
    pub weights: InversionWeights,
}

impl Default for IcfilConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            calibration_lr: 1e-5,
            head_lr: 0.01,
            head_iters: 100,
            pseudo_per_class: 5,
            inversion_steps: 200,
            inversion_lr: 0.25,
            normalize_embeddings: true,
            calibrate: true,
            weights: InversionWeights::default(),
        }
    }
}

/// Trains a fresh linear head (N(0, 0.01²) weights, zero bias) on fixed
/// embeddings with Adam.
pub fn train_head(
    embeddings: &Tensor,
    labels: &[usize],
    way: usize,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let f = embeddings.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid sigma");
    let mut params = BTreeMap::from([
        (
            "w".to_string(),
            Tensor::new(vec![f, way], (0..f * way).map(|_| normal.sample(&mut rng)).collect()),
        ),
        ("b".to_string(), Tensor::zeros(&[way])),
    ]);
    let mut adam = ParamAdam::for_params(&params);
    let cfg = AdamConfig::with_lr(lr);
    for _ in 0..iters {
        let tape = Tape::new();
        let w = tape.leaf(params["w"].clone());
        let b = tape.leaf(params["b"].clone());
        let logits = nets::head_vars(tape.constant(embeddings.clone()), w, b);
        let loss = cross_entropy_mean(logits, labels);
        let g = tape.grad(loss, &[w, b], false);
        let grads = BTreeMap::from([
            ("w".to_string(), (*g[0].value()).clone()),
            ("b".to_string(), (*g[1].value()).clone()),
        ]);
        adam.update(&mut params, &grads, &cfg)?;
    }
    Ok((params.remove("w").expect("w"), params.remove("b").expect("b")))
}

/// Inverts pseudo support images from the adapted model, takes one Adam step
/// on the calibration loss w.r.t. the backbone, then retrains the head on
/// the support set with the backbone frozen.
pub fn icfil_calibrate(
    adapted: &AdaptedModel,
    support: &Tensor,
    support_labels: &[usize],
    cfg: &IcfilConfig,
    seed: u64,
) -> Result<AdaptedModel> {
    if support_labels.is_empty() {
        return Err(Error::Input("empty support set".into()));
    }
    let way = adapted.spec.num_classes;
    let mut out = adapted.clone();
    if cfg.calibrate {
        let labels: Vec<usize> = (0..way).collect();
        let (pseudo, pseudo_labels) = synthesize_from_model(
            &adapted.to_network(),
            &labels,
            cfg.pseudo_per_class,
            cfg.inversion_steps,
            cfg.inversion_lr,
            &cfg.weights,
            seed,
        )?;
        let (_, grads) = calibration_loss_and_grad(
            adapted,
            support,
            support_labels,
            &pseudo,
            &pseudo_labels,
            cfg.tau,
            cfg.normalize_embeddings,
        )?;
        let step = AdamConfig::with_lr(cfg.calibration_lr);
        for (k, g) in &grads {
            let p = out.backbone.get_mut(k).expect("backbone key");
            AdamState::new(p.shape()).update(p, g, &step)?;
        }
    }
    let emb = out.embed(support)?;
    let (w, b) = train_head(&emb, support_labels, way, cfg.head_iters, cfg.head_lr, seed ^ 0x5eed)?;
    out.head_weight = w;
    out.head_bias = b;
    Ok(out)
}

/// Argmax of the head logits, query statistics used for BN; ties go to the
/// lowest class index.
pub fn predict(model: &AdaptedModel, query: &Tensor) -> Result<Vec<usize>> {
    let trace = nets::forward(&model.to_network(), query, BnMode::BatchStats)?;
    Ok(nets::argmax_rows(&trace.logits))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_tasks: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
    pub per_task_acc: Vec<f64>,
}

impl EvalReport {
    /// Mean, sample standard deviation and the 1.96·std/√n half-width.
    pub fn from_accuracies(acc: Vec<f64>) -> Result<Self> {
        let n = acc.len();
        if n == 0 {
            return Err(Error::Input("report needs at least one task".into()));
        }
        let mean = acc.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            num_tasks: n,
            mean,
            std,
            ci95: 1.96 * std / (n as f64).sqrt(),
            per_task_acc: acc,
        })
    }

    /// JSON text with the report plus caller-supplied metadata.
    pub fn to_json(&self, meta: &serde_json::Map<String, serde_json::Value>) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        let obj = v.as_object_mut().expect("object");
        for (k, x) in meta {
            obj.insert(k.clone(), x.clone());
        }
        serde_json::to_string_pretty(&v).expect("serializable")
    }
}

/// Evaluation protocol settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub num_tasks: usize,
    pub alpha_inner: f64,
    pub icfil: Option<IcfilConfig>,
    pub seed: u64,
    pub workers: usize,
}

/// Independent random stream for task `task`.
pub fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    rng
}

/// Adapts (and optionally calibrates) on the support set only.
pub fn adapt_on_support(theta: &NetworkParams, ep: &Episode, cfg: &EvalConfig, seed: u64) -> Result<AdaptedModel> {
    let adapted = fast_adapt_test(theta, &ep.support, &ep.support_labels, cfg.alpha_inner)?;
    match &cfg.icfil {
        Some(ic) => icfil_calibrate(&adapted, &ep.support, &ep.support_labels, ic, seed),
        None => Ok(adapted),
    }
}

fn run_task(
    theta: &NetworkParams,
    splits: &[(LabeledDataset, Vec<usize>)],
    cfg: &EvalConfig,
    task: usize,
) -> Result<f64> {
    let (ds, classes) = &splits[task % splits.len()];
    let mut rng = task_rng(cfg.seed, task);
    let ep = sample_episode_from_dataset(ds, classes, cfg.way, cfg.shots, cfg.queries, &mut rng)?;
    let model = adapt_on_support(theta, &ep, cfg, rand::Rng::random(&mut rng))?;
    Ok(nets::accuracy(&predict(&model, &ep.query)?, &ep.query_labels))
}

/// Samples `num_tasks` tasks (round-robin over the splits) and reports query
/// accuracy. Tasks are spread over `cfg.workers` threads; results do not
/// depend on the worker count.
pub fn evaluate(
    theta: &NetworkParams,
    splits: &[(LabeledDataset, Vec<usize>)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.num_tasks == 0 {
        return Err(Error::Input("num_tasks must be positive".into()));
    }
    if splits.is_empty() {
        return Err(Error::Input("no evaluation splits".into()));
    }
    if theta.spec.num_classes != cfg.way {
        return Err(Error::Config(format!(
            "model has {} outputs but tasks are {}-way",
            theta.spec.num_classes, cfg.way
        )));
    }
    let workers = cfg.workers.clamp(1, cfg.num_tasks);
    let mut acc = vec![0.0; cfg.num_tasks];
    if workers == 1 {
        for (t, a) in acc.iter_mut().enumerate() {
            *a = run_task(theta, splits, cfg, t)?;
        }
    } else {
        let results: Vec<Result<Vec<(usize, f64)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || {
                        (w..cfg.num_tasks)
                            .step_by(workers)
                            .map(|t| run_task(theta, splits, cfg, t).map(|a| (t, a)))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        for r in results {
            for (t, a) in r? {
                acc[t] = a;
            }
        }
    }
    EvalReport::from_accuracies(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_blobs;
    use crate::nets::{build_network, ArchId};

    fn spec() -> ArchSpec {
        ArchSpec::new(ArchId::Conv4, [3, 8, 8], 2).with_width(0.125)
    }

    #[test]
    fn report_arithmetic() {
        let r = EvalReport::from_accuracies(vec![1.0, 0.0]).unwrap();
        assert_eq!(r.mean, 0.5);
        assert!((r.std - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((r.ci95 - 0.98).abs() < 1e-12);
        assert!(EvalReport::from_accuracies(vec![]).is_err());
    }

    fn emb(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect())
    }

    fn closs(real: &Tensor, rl: &[usize], pseudo: &Tensor, pl: &[usize], tau: f64, norm: bool) -> Result<f64> {
        let tape = Tape::new();
        calibration_loss_vars(
            tape.constant(real.clone()),
            rl,
            tape.constant(pseudo.clone()),
            pl,
            tau,
            norm,
        )
        .map(|v| v.item())
    }

    #[test]
    fn identical_embeddings_give_log_count() {
        let e = [[0.6, 0.8]; 4];
        let l = closs(&emb(&e[..2]), &[0, 1], &emb(&e), &[0, 0, 1, 1], 0.1, true).unwrap();
        assert!((l - 4.0 * 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn large_temperature_approaches_uniform() {
        let real = emb(&[[1.0, 0.2], [-0.3, 0.9]]);
        let pseudo = emb(&[[0.5, 0.5], [0.1, -1.0], [2.0, 0.3], [-0.7, -0.2], [0.0, 1.0]]);
        let l = closs(&real, &[0, 1], &pseudo, &[0, 1, 0, 1, 1], 1e6, true).unwrap();
        assert!((l - 5.0 * 5f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn pseudo_order_does_not_matter() {
        let real = emb(&[[1.0, 0.2], [-0.3, 0.9]]);
        let p1 = emb(&[[0.5, 0.5], [0.1, -1.0], [2.0, 0.3]]);
        let p2 = emb(&[[2.0, 0.3], [0.5, 0.5], [0.1, -1.0]]);
        let a = closs(&real, &[0, 1], &p1, &[0, 1, 1], 0.1, false).unwrap();
        let b = closs(&real, &[0, 1], &p2, &[1, 0, 1], 0.1, false).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn missing_positive_is_rejected() {
        let e = emb(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            closs(&e, &[0, 1], &e, &[0, 0], 0.1, true),
            Err(Error::Input(_))
        ));
        assert!(closs(&e, &[0, 1], &e, &[0, 1], 0.0, true).is_err());
    }

    #[test]
    fn predict_ties_and_order() {
        let logits = Tensor::new(vec![3, 2], vec![2.0, 1.0, 1.0, 1.0, 0.0, 3.0]);
        assert_eq!(nets::argmax_rows(&logits), vec![0, 0, 1]);
    }

    fn task_data() -> (Tensor, Vec<usize>) {
        let ds = make_synthetic_blobs(4, 3, [3, 8, 8], 2).unwrap();
        let ep = sample_episode_from_dataset(&ds, &[0, 1, 2, 3], 2, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (ep.support, ep.support_labels)
    }

    #[test]
    fn fast_adapt_is_inner_adapt_then_split() {
        let theta = build_network(&spec(), 1).unwrap();
        let (s, l) = task_data();
        let a = fast_adapt_test(&theta, &s, &l, 0.01).unwrap();
        assert_eq!(a.to_network(), inner_adapt(&theta, &s, &l, 0.01).unwrap());
        assert_eq!(a.head_weight.shape(), &[theta.spec.feature_dim(), 2]);
    }

    #[test]
    fn disabled_calibration_keeps_backbone() {
        let theta = build_network(&spec(), 1).unwrap();
        let (s, l) = task_data();
        let a = fast_adapt_test(&theta, &s, &l, 0.01).unwrap();
        let cfg = IcfilConfig {
            calibrate: false,
            ..IcfilConfig::default()
        };
        let c = icfil_calibrate(&a, &s, &l, &cfg, 3).unwrap();
        assert_eq!(c.backbone, a.backbone);
        assert_ne!(c.head_weight, a.head_weight);
    }

    #[test]
    fn calibration_is_deterministic_and_moves_backbone() {
        let theta = build_network(&spec(), 1).unwrap();
        let (s, l) = task_data();
        let a = fast_adapt_test(&theta, &s, &l, 0.01).unwrap();
        let cfg = IcfilConfig {
            inversion_steps: 5,
            ..IcfilConfig::default()
        };
        let c1 = icfil_calibrate(&a, &s, &l, &cfg, 3).unwrap();
        let c2 = icfil_calibrate(&a, &s, &l, &cfg, 3).unwrap();
        assert_eq!(c1, c2);
        assert_ne!(c1.backbone, a.backbone);
    }

    fn splits() -> Vec<(LabeledDataset, Vec<usize>)> {
        vec![(make_synthetic_blobs(4, 6, [3, 8, 8], 5).unwrap(), vec![0, 1, 2, 3])]
    }

    fn eval_cfg(workers: usize) -> EvalConfig {
        EvalConfig {
            way: 2,
            shots: 1,
            queries: 3,
            num_tasks: 6,
            alpha_inner: 0.01,
            icfil: None,
            seed: 4,
            workers,
        }
    }

    #[test]
    fn evaluate_matches_plain_protocol_and_is_worker_independent() {
        let theta = build_network(&spec(), 2).unwrap();
        let sp = splits();
        let r1 = evaluate(&theta, &sp, &eval_cfg(1)).unwrap();
        let r3 = evaluate(&theta, &sp, &eval_cfg(3)).unwrap();
        assert_eq!(r1, r3);
        for t in 0..6 {
            let mut rng = task_rng(4, t);
            let ep = sample_episode_from_dataset(&sp[0].0, &sp[0].1, 2, 1, 3, &mut rng).unwrap();
            let adapted = inner_adapt(&theta, &ep.support, &ep.support_labels, 0.01).unwrap();
            let logits = nets::forward(&adapted, &ep.query, BnMode::BatchStats).unwrap().logits;
            assert_eq!(
                r1.per_task_acc[t],
                nets::accuracy(&nets::argmax_rows(&logits), &ep.query_labels)
            );
        }
        let mut zero = eval_cfg(1);
        zero.num_tasks = 0;
        assert!(matches!(evaluate(&theta, &sp, &zero), Err(Error::Input(_))));
    }

    #[test]
    fn calibration_never_reads_the_query() {
        let theta = build_network(&spec(), 2).unwrap();
        let sp = splits();
        let mut ep = sample_episode_from_dataset(&sp[0].0, &sp[0].1, 2, 1, 3, &mut task_rng(0, 0)).unwrap();
        let cfg = EvalConfig {
            icfil: Some(IcfilConfig {
                inversion_steps: 3,
                ..IcfilConfig::default()
            }),
            ..eval_cfg(1)
        };
        let clean = adapt_on_support(&theta, &ep, &cfg, 9).unwrap();
        ep.query = ep.query.map(|_| f64::NAN);
        let poisoned = adapt_on_support(&theta, &ep, &cfg, 9).unwrap();
        assert_eq!(clean, poisoned);
    }
}
