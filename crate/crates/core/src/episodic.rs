//! MAML-style training on pseudo episodes: one differentiable inner step on
//! the support set, query cross-entropy as the outer loss, and an Adam step
//! on the meta initialization.

use rand::seq::index;
use rand::Rng;

use crate::autograd::{cross_entropy_mean, Tape, Var};
use crate::data::{Episode, Origin};
use crate::error::{Error, Result};
use crate::inversion::DynamicDataset;
use crate::nets::{self, BnMode, NetworkParams, ParamVars};
use crate::optim::{AdamConfig, ParamAdam};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub beta: f64,
    pub lambda: f64,
    pub episode_batch: usize,
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub curriculum_start_iter: usize,
    pub patience: usize,
    pub second_order: bool,
    /// Draw each pseudo task from a single zoo model's classes.
    pub within_model_tasks: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha_inner: 0.01,
            alpha_outer: 0.001,
            beta: 0.25,
            lambda: 10.0,
            episode_batch: 4,
            way: 5,
            shots: 1,
            queries: 15,
            curriculum_start_iter: 4000,
            patience: 6,
            second_order: true,
            within_model_tasks: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_inner", self.alpha_inner),
            ("alpha_outer", self.alpha_outer),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.episode_batch == 0 || self.way < 2 || self.shots == 0 || self.queries == 0 {
            return Err(Error::Config(
                "episode_batch, shots and queries must be positive and way at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub theta: NetworkParams,
    pub optimizer: ParamAdam,
    pub iteration: usize,
    pub curriculum_active: bool,
}

impl MetaState {
    pub fn new(theta: NetworkParams, hp: &HyperParams) -> Result<Self> {
        if theta.spec.num_classes != hp.way {
            return Err(Error::Config(format!(
                "meta model has {} outputs but tasks are {}-way",
                theta.spec.num_classes, hp.way
            )));
        }
        Ok(Self {
            optimizer: ParamAdam::for_params(&theta.params),
            theta,
            iteration: 0,
            curriculum_active: hp.curriculum_start_iter == 0,
        })
    }
}

/// Samples an N-way task from the pseudo-image bank. Within each class the
/// K+M instances are randomly split into K support and M query images.
pub fn sample_pseudo_episode<R: Rng + ?Sized>(
    dd: &DynamicDataset,
    way: usize,
    shots: usize,
    queries: usize,
    within_model: bool,
    rng: &mut R,
) -> Result<Episode> {
    if shots + queries != dd.per_class() {
        return Err(Error::Input(format!(
            "bank holds {} images per class, task needs {}",
            dd.per_class(),
            shots + queries
        )));
    }
    let g = dd.num_classes();
    if g < way {
        return Err(Error::Input(format!(
            "{way}-way task needs {way} classes, bank has {g}"
        )));
    }
    let chosen: Vec<usize> = if within_model {
        let owners: Vec<usize> = {
            let mut o: Vec<usize> = dd.class_owner.clone();
            o.sort_unstable();
            o.dedup();
            o.into_iter()
                .filter(|&e| dd.class_owner.iter().filter(|&&x| x == e).count() >= way)
                .collect()
        };
        if owners.is_empty() {
            return Err(Error::Input(format!("no zoo model owns {way} classes")));
        }
        let e = owners[rng.random_range(0..owners.len())];
        let own: Vec<usize> = (0..g).filter(|&c| dd.class_owner[c] == e).collect();
        index::sample(rng, own.len(), way).into_iter().map(|i| own[i]).collect()
    } else {
        index::sample(rng, g, way).into_vec()
    };
    let mut support_items = Vec::with_capacity(way * shots);
    let mut query_items = Vec::with_capacity(way * queries);
    for &c in &chosen {
        let perm = index::sample(rng, shots + queries, shots + queries).into_vec();
        support_items.extend(perm[..shots].iter().map(|&i| dd.flat_index(c, i)));
        query_items.extend(perm[shots..].iter().map(|&i| dd.flat_index(c, i)));
    }
    let flat = dd.flat_images();
    Ok(Episode {
        support: flat.select_outer(&support_items),
        support_labels: (0..way * shots).map(|i| i / shots).collect(),
        query: flat.select_outer(&query_items),
        query_labels: (0..way * queries).map(|i| i / queries).collect(),
        way,
        shots,
        queries_per_class: queries,
        origin: Origin::Pseudo,
        source_classes: chosen,
        support_items,
        query_items,
    })
}

/// Support and query images of an episode on a tape. Pseudo episodes are
/// gathered from `bank` when one is given, so gradients reach the pixels.
pub fn episode_vars<'t>(tape: &'t Tape, ep: &Episode, bank: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
    match (ep.origin, bank) {
        (Origin::Pseudo, Some(b)) => (b.select_outer(&ep.support_items), b.select_outer(&ep.query_items)),
        _ => (tape.constant(ep.support.clone()), tape.constant(ep.query.clone())),
    }
}

/// `θ − α ∇θ loss` for every variable in `params`. With `create_graph` the
/// step stays differentiable through the gradient itself.
pub fn gradient_step<'t>(
    params: &ParamVars<'t>,
    loss: Var<'t>,
    alpha: f64,
    create_graph: bool,
) -> Result<ParamVars<'t>> {
    if !loss.item().is_finite() {
        return Err(Error::numeric("non-finite inner loss"));
    }
    let vars = params.vars();
    let grads = loss.tape().grad(loss, &vars, create_graph);
    Ok(params
        .0
        .keys()
        .zip(vars.iter().zip(grads))
        .map(|(k, (&p, g))| (k.clone(), p - g * alpha))
        .collect())
}

/// One inner step on the support cross-entropy, BN in batch-statistics mode.
pub fn inner_adapt_vars<'t>(
    theta: &NetworkParams,
    params: &ParamVars<'t>,
    support: Var<'t>,
    labels: &[usize],
    alpha: f64,
    create_graph: bool,
) -> Result<ParamVars<'t>> {
    if labels.is_empty() {
        return Err(Error::Input("empty support set".into()));
    }
    let trace = nets::forward_vars(&theta.spec, params, &theta.buffers, support, BnMode::BatchStats)?;
    gradient_step(params, cross_entropy_mean(trace.logits, labels), alpha, create_graph)
}

/// Value-level inner adaptation.
pub fn inner_adapt(theta: &NetworkParams, support: &Tensor, labels: &[usize], alpha: f64) -> Result<NetworkParams> {
    let tape = Tape::new();
    let params = theta.leaves(&tape);
    let adapted = inner_adapt_vars(theta, &params, tape.constant(support.clone()), labels, alpha, false)?;
    Ok(theta.with_values(&adapted))
}

/// Recorded outer loss of one episode.
pub struct OuterTerms<'t> {
    pub loss: Var<'t>,
    pub query_logits: Var<'t>,
    /// Batch statistics of the un-adapted model on the support set.
    pub support_stats: (Vec<Tensor>, Vec<Tensor>, Vec<usize>),
}

/// Query cross-entropy of the adapted model. First-order mode detaches the
/// inner gradient, which also cuts the support pixels out of the graph.
#[allow(clippy::too_many_arguments)]
pub fn outer_loss_vars<'t>(
    theta: &NetworkParams,
    params: &ParamVars<'t>,
    support: Var<'t>,
    support_labels: &[usize],
    query: Var<'t>,
    query_labels: &[usize],
    alpha: f64,
    second_order: bool,
) -> Result<OuterTerms<'t>> {
    if support_labels.is_empty() || query_labels.is_empty() {
        return Err(Error::Input("episode needs support and query images".into()));
    }
    let inner = nets::forward_vars(&theta.spec, params, &theta.buffers, support, BnMode::BatchStats)?;
    let support_stats = inner.batch_stats();
    let adapted = gradient_step(
        params,
        cross_entropy_mean(inner.logits, support_labels),
        alpha,
        second_order,
    )?;
    let out = nets::forward_vars(&theta.spec, &adapted, &theta.buffers, query, BnMode::BatchStats)?;
    let loss = cross_entropy_mean(out.logits, query_labels);
    Ok(OuterTerms {
        loss,
        query_logits: out.logits,
        support_stats,
    })
}

/// Value of the outer loss on an episode.
pub fn outer_loss(theta: &NetworkParams, ep: &Episode, alpha: f64, second_order: bool) -> Result<f64> {
    let tape = Tape::new();
    // leaves, so the inner step can differentiate w.r.t. theta
    let params = theta.leaves(&tape);
    let (s, q) = episode_vars(&tape, ep, None);
    let t = outer_loss_vars(
        theta,
        &params,
        s,
        &ep.support_labels,
        q,
        &ep.query_labels,
        alpha,
        second_order,
    )?;
    Ok(t.loss.item())
}

/// One Adam step of size `alpha_outer` on the summed outer loss of the
/// batch. Returns the summed loss and the mean query accuracy.
pub fn meta_update(state: &mut MetaState, episodes: &[Episode], hp: &HyperParams) -> Result<(f64, f64)> {
    if episodes.len() != hp.episode_batch {
        return Err(Error::Input(format!(
            "expected {} episodes, got {}",
            hp.episode_batch,
            episodes.len()
        )));
    }
    let iteration = state.iteration;
    let tape = Tape::new();
    let params = state.theta.leaves(&tape);
    let mut total: Option<Var<'_>> = None;
    let mut acc = 0.0;
    let mut stats = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let (s, q) = episode_vars(&tape, ep, None);
        let t = outer_loss_vars(
            &state.theta,
            &params,
            s,
            &ep.support_labels,
            q,
            &ep.query_labels,
            hp.alpha_inner,
            hp.second_order,
        )
        .map_err(|e| e.at_iteration(iteration))?;
        acc += nets::accuracy(&nets::argmax_rows(&t.query_logits.value()), &ep.query_labels);
        stats.push(t.support_stats);
        total = Some(total.map_or(t.loss, |l| l + t.loss));
    }
    let total = total.expect("non-empty batch");
    let loss = total.item();
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite outer loss").at_iteration(iteration));
    }
    let vars = params.vars();
    let grads = tape.grad(total, &vars, false);
    let grads = params
        .0
        .keys()
        .cloned()
        .zip(grads.iter().map(|g| (*g.value()).clone()))
        .collect();
    state
        .optimizer
        .update(&mut state.theta.params, &grads, &AdamConfig::with_lr(hp.alpha_outer))
        .map_err(|e| e.at_iteration(iteration))?;
    for (m, v, c) in &stats {
        state.theta.update_running_stats(m, v, c)?;
    }
    state.iteration += 1;
    state.curriculum_active = state.iteration >= hp.curriculum_start_iter;
    Ok((loss, acc / episodes.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::init_dynamic_dataset;
    use crate::nets::{build_network, ArchId, ArchSpec};
    use crate::zoo::{ModelZoo, ModelZooEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn spec(way: usize) -> ArchSpec {
        ArchSpec::new(ArchId::Conv4, [2, 4, 4], way).with_width(2.0 / 32.0)
    }

    fn zoo(models: usize, way: usize) -> ModelZoo {
        let entries = (0..models)
            .map(|s| ModelZooEntry {
                params: build_network(&spec(way), 100 + s as u64).unwrap(),
                global_class_ids: Vec::new(),
                source_dataset_id: "t".into(),
                source_classes: (0..way).collect(),
            })
            .collect();
        ModelZoo::from_entries(entries).unwrap()
    }

    fn bank(shots: usize, queries: usize) -> DynamicDataset {
        init_dynamic_dataset(&zoo(3, 2), shots, queries, [2, 4, 4], 1).unwrap()
    }

    #[test]
    fn episode_partitions_each_class() {
        let dd = bank(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let ep = sample_pseudo_episode(&dd, 2, 1, 3, false, &mut rng).unwrap();
            for (k, &c) in ep.source_classes.iter().enumerate() {
                let mut all: Vec<usize> = ep.support_items[k..k + 1].to_vec();
                all.extend_from_slice(&ep.query_items[k * 3..k * 3 + 3]);
                all.sort_unstable();
                assert_eq!(all, (0..4).map(|i| dd.flat_index(c, i)).collect::<Vec<_>>());
            }
            assert_eq!(ep.support, dd.flat_images().select_outer(&ep.support_items));
        }
    }

    #[test]
    fn full_way_uses_every_class() {
        let dd = bank(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_pseudo_episode(&dd, 6, 1, 1, false, &mut rng).unwrap();
        let set: BTreeSet<_> = ep.source_classes.iter().copied().collect();
        assert_eq!(set, (0..6).collect());
        assert!(sample_pseudo_episode(&dd, 7, 1, 1, false, &mut rng).is_err());
    }

    #[test]
    fn within_model_tasks_stay_inside_one_owner() {
        let dd = bank(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let ep = sample_pseudo_episode(&dd, 2, 1, 1, true, &mut rng).unwrap();
            let o = dd.class_owner[ep.source_classes[0]];
            assert_eq!(dd.class_owner[ep.source_classes[1]], o);
        }
        assert!(sample_pseudo_episode(&dd, 3, 1, 1, true, &mut rng).is_err());
    }

    #[test]
    fn episode_sampling_is_deterministic() {
        let dd = bank(1, 2);
        let a = sample_pseudo_episode(&dd, 2, 1, 2, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_pseudo_episode(&dd, 2, 1, 2, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadratic_stub_step() {
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(1.0));
        let params: ParamVars<'_> = [("w".to_string(), theta)].into_iter().collect();
        let loss = theta * theta * 0.5;
        let out = gradient_step(&params, loss, 0.1, true).unwrap();
        assert!((out.get("w").unwrap().item() - 0.9).abs() < 1e-15);
        // doubled step size doubles the displacement
        let out2 = gradient_step(&params, loss, 0.2, true).unwrap();
        assert!((1.0 - out2.get("w").unwrap().item() - 0.2).abs() < 1e-15);
    }

    fn saturated_net() -> NetworkParams {
        // zero weights and a head bias that always predicts class 0 by a wide margin
        let mut net = build_network(&spec(2), 0).unwrap();
        net.params.get_mut(nets::HEAD_WEIGHT).unwrap().data_mut().fill(0.0);
        *net.params.get_mut(nets::HEAD_BIAS).unwrap() = Tensor::new(vec![2], vec![60.0, -60.0]);
        net
    }

    #[test]
    fn saturated_support_is_a_fixed_point() {
        let net = saturated_net();
        let support = Tensor::new(vec![2, 2, 4, 4], (0..64).map(|i| (i as f64 * 0.37).sin()).collect());
        let out = inner_adapt(&net, &support, &[0, 0], 0.01).unwrap();
        for (k, v) in &out.params {
            for (a, b) in v.data().iter().zip(net.params[k].data()) {
                assert!((a - b).abs() < 1e-6, "{k}");
            }
        }
    }

    #[test]
    fn untrained_outer_loss_is_near_log_two() {
        let dd = bank(1, 5);
        let mut total = 0.0;
        for s in 0..20 {
            let theta = build_network(&spec(2), 1000 + s).unwrap();
            let ep = sample_pseudo_episode(&dd, 2, 1, 5, false, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            total += outer_loss(&theta, &ep, 0.01, true).unwrap();
        }
        assert!((total / 20.0 - 2f64.ln()).abs() < 0.2);
    }

    fn outer_with_bank(
        theta: &NetworkParams,
        dd: &DynamicDataset,
        ep: &Episode,
        second_order: bool,
    ) -> (f64, Tensor, Vec<Tensor>) {
        let tape = Tape::new();
        let params = theta.leaves(&tape);
        let b = dd.leaf(&tape);
        let (s, q) = episode_vars(&tape, ep, Some(b));
        let t = outer_loss_vars(
            theta,
            &params,
            s,
            &ep.support_labels,
            q,
            &ep.query_labels,
            0.3,
            second_order,
        )
        .unwrap();
        let mut wrt = params.vars();
        wrt.push(b);
        let mut g: Vec<Tensor> = tape
            .grad(t.loss, &wrt, false)
            .iter()
            .map(|v| (*v.value()).clone())
            .collect();
        let gb = g.pop().unwrap();
        (t.loss.item(), gb, g)
    }

    fn loss_at(theta: &NetworkParams, dd: &DynamicDataset, ep: &Episode) -> f64 {
        let mut ep = ep.clone();
        let flat = dd.flat_images();
        ep.support = flat.select_outer(&ep.support_items);
        ep.query = flat.select_outer(&ep.query_items);
        outer_loss(theta, &ep, 0.3, true).unwrap()
    }

    #[test]
    fn outer_gradients_match_finite_differences() {
        let dd = bank(2, 2);
        let theta = build_network(&spec(2), 7).unwrap();
        let ep = sample_pseudo_episode(&dd, 2, 2, 2, false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (_, gb, gt) = outer_with_bank(&theta, &dd, &ep, true);
        let h = 1e-4;
        let names: Vec<String> = theta.params.keys().cloned().collect();
        for (k, name) in names.iter().enumerate() {
            let i = theta.params[name].len() / 2;
            let mut p = theta.clone();
            p.params.get_mut(name).unwrap().data_mut()[i] += h;
            let mut m = theta.clone();
            m.params.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (loss_at(&p, &dd, &ep) - loss_at(&m, &dd, &ep)) / (2.0 * h);
            let a = gt[k].data()[i];
            assert!((a - fd).abs() <= 1e-3 * fd.abs().max(1e-4), "{name}: {a} vs {fd}");
        }
        for &item in &[ep.support_items[0], ep.support_items[3], ep.query_items[1]] {
            let idx = item * 32 + 13;
            let bump = |d: f64| {
                let mut x = dd.clone();
                x.images.data_mut()[idx] += d;
                x
            };
            let fd = (loss_at(&theta, &bump(h), &ep) - loss_at(&theta, &bump(-h), &ep)) / (2.0 * h);
            let a = gb.data()[idx];
            assert!((a - fd).abs() <= 1e-3 * fd.abs().max(1e-4), "pixel {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn first_order_cuts_support_pixels() {
        let dd = bank(1, 2);
        let theta = build_network(&spec(2), 8).unwrap();
        let ep = sample_pseudo_episode(&dd, 2, 1, 2, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let per = 32;
        let support_grad = |g: &Tensor| -> f64 {
            ep.support_items
                .iter()
                .flat_map(|&i| g.data()[i * per..(i + 1) * per].iter())
                .map(|v| v.abs())
                .sum()
        };
        let (_, g2, _) = outer_with_bank(&theta, &dd, &ep, true);
        let (_, g1, _) = outer_with_bank(&theta, &dd, &ep, false);
        assert!(support_grad(&g2) > 0.0);
        assert_eq!(support_grad(&g1), 0.0);
    }

    #[test]
    fn second_order_correction_scales_with_alpha() {
        // eight channels on 8x8 inputs keep BN curvature moderate
        let wide = ArchSpec::new(ArchId::Conv4, [2, 8, 8], 2).with_width(0.25);
        let theta = build_network(&wide, 11).unwrap();
        let z = ModelZoo::from_entries(vec![ModelZooEntry {
            params: build_network(&wide, 12).unwrap(),
            global_class_ids: Vec::new(),
            source_dataset_id: "t".into(),
            source_classes: vec![0, 1],
        }])
        .unwrap();
        let dd = init_dynamic_dataset(&z, 5, 5, [2, 8, 8], 0).unwrap();
        let ep = sample_pseudo_episode(&dd, 2, 5, 5, false, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let gap = |alpha: f64| {
            let grads = |so: bool| {
                let tape = Tape::new();
                let params = theta.leaves(&tape);
                let (s, q) = episode_vars(&tape, &ep, None);
                let t =
                    outer_loss_vars(&theta, &params, s, &ep.support_labels, q, &ep.query_labels, alpha, so).unwrap();
                tape.grad(t.loss, &params.vars(), false)
                    .iter()
                    .flat_map(|v| v.value().data().to_vec())
                    .collect::<Vec<_>>()
            };
            grads(true)
                .iter()
                .zip(grads(false))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let d: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&a| gap(a)).collect();
        assert!(d[0] > 0.0);
        for (gap, alpha) in d.iter().zip([1e-2, 1e-3, 1e-4]) {
            assert!(*gap <= 3.0 * alpha, "gap {gap} at alpha {alpha}");
        }
        for w in d.windows(2) {
            let ratio = w[0] / w[1];
            assert!((7.0..13.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn meta_update_overfits_one_task() {
        let dd = bank(1, 3);
        let hp = HyperParams {
            way: 2,
            shots: 1,
            queries: 3,
            episode_batch: 1,
            alpha_outer: 0.01,
            curriculum_start_iter: 10,
            ..HyperParams::default()
        };
        let mut st = MetaState::new(build_network(&spec(2), 3).unwrap(), &hp).unwrap();
        let ep = sample_pseudo_episode(&dd, 2, 1, 3, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (first, _) = meta_update(&mut st, std::slice::from_ref(&ep), &hp).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = meta_update(&mut st, std::slice::from_ref(&ep), &hp).unwrap().0;
        }
        assert!(last < first, "{last} !< {first}");
        assert_eq!(st.iteration, 50);
        assert!(st.curriculum_active);
    }

    #[test]
    fn meta_update_is_deterministic_and_checks_batch() {
        let dd = bank(1, 3);
        let hp = HyperParams {
            way: 2,
            shots: 1,
            queries: 3,
            episode_batch: 2,
            ..HyperParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps: Vec<_> = (0..2)
            .map(|_| sample_pseudo_episode(&dd, 2, 1, 3, false, &mut rng).unwrap())
            .collect();
        let st0 = MetaState::new(build_network(&spec(2), 3).unwrap(), &hp).unwrap();
        let (mut a, mut b) = (st0.clone(), st0.clone());
        assert_eq!(
            meta_update(&mut a, &eps, &hp).unwrap(),
            meta_update(&mut b, &eps, &hp).unwrap()
        );
        assert_eq!(a, b);
        assert!(!a.curriculum_active);
        assert!(matches!(meta_update(&mut a, &eps[..1], &hp), Err(Error::Input(_))));
    }

    #[test]
    fn perfect_queries_give_unit_accuracy() {
        let dd = bank(1, 3);
        let hp = HyperParams {
            way: 2,
            shots: 1,
            queries: 3,
            episode_batch: 1,
            ..HyperParams::default()
        };
        let mut st = MetaState::new(saturated_net(), &hp).unwrap();
        let mut ep = sample_pseudo_episode(&dd, 2, 1, 3, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ep.query_labels = vec![0; 6];
        ep.support_labels = vec![0; 2];
        let (_, acc) = meta_update(&mut st, &[ep], &hp).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn head_dimension_must_match_way() {
        let hp = HyperParams {
            way: 3,
            ..HyperParams::default()
        };
        assert!(matches!(
            MetaState::new(build_network(&spec(2), 0).unwrap(), &hp),
            Err(Error::Config(_))
        ));
    }
}
