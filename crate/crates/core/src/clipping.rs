//! Per-example gradient clipping and the strategies that compute the mean
//! clipped batch gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradMap, NodeId, Wrt};
use crate::error::{Error, Result};
use crate::layers::{Forward, ParamId};
use crate::model::Model;
use crate::tensor::{sq_norm_rows, Tensor};

/// Rescales `g` so its L2 norm is at most `c`.
pub fn clip(g: &Tensor, c: f64) -> Tensor {
    g.scale(clip_factor(g.norm(), c))
}

fn clip_factor(norm: f64, c: f64) -> f64 {
    if norm > c {
        c / norm
    } else {
        1.0
    }
}

/// Per-example loss weights `ν_i = min(1, c / norm_i)`, with `ν = 1` for a
/// zero norm.
pub fn weights(norms: &Tensor, c: f64) -> Tensor {
    norms.map(|n| clip_factor(n, c))
}

/// Squared per-example gradient norms accumulated layer by layer.
#[derive(Clone, Debug)]
pub struct PerExampleNorms {
    sq: Tensor,
    finalized: bool,
}

impl PerExampleNorms {
    pub fn new(batch: usize) -> Self {
        Self { sq: Tensor::zeros(&[batch]), finalized: false }
    }

    pub fn accumulate(&mut self, sq_norms: &Tensor) -> Result<()> {
        if self.finalized {
            return Err(Error::Contract("norms already finalized".into()));
        }
        self.sq.axpy(1.0, sq_norms)
    }

    pub fn sq_norms(&self) -> &Tensor {
        &self.sq
    }

    /// Takes the square root once all layers have been accumulated.
    pub fn finalize(&mut self) -> Tensor {
        self.finalized = true;
        self.sq.map(f64::sqrt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    NonPrivate,
    Nxbp,
    MultiLoss,
    Reweight,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::NonPrivate, Strategy::Nxbp, Strategy::MultiLoss, Strategy::Reweight];

    pub fn is_private(self) -> bool {
        self != Strategy::NonPrivate
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::NonPrivate => "nonprivate",
            Strategy::Nxbp => "nxbp",
            Strategy::MultiLoss => "multiloss",
            Strategy::Reweight => "reweight",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::Usage(format!("unknown method `{s}` (expected nonprivate, nxbp, multiloss or reweight)"))
        })
    }
}

/// One norm over all parameters, or one per layer with threshold `c/√m`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    #[default]
    Global,
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub c: f64,
    pub strategy: Strategy,
    #[serde(default)]
    pub mode: ClipMode,
}

impl ClipConfig {
    pub fn new(c: f64, strategy: Strategy) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!("clipping threshold must be positive, got {c}")));
        }
        Ok(Self { c, strategy, mode: ClipMode::Global })
    }

    pub fn per_layer(mut self) -> Self {
        self.mode = ClipMode::PerLayer;
        self
    }
}

/// Mean clipped gradient of one batch, aligned with `model.params`.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub grads: Vec<Tensor>,
    /// Mean unweighted loss over the batch.
    pub loss: f64,
    /// Records whose logits rank the target first.
    pub correct: usize,
    /// Per-example gradient norms, when the strategy computes them.
    pub norms: Option<Tensor>,
}

pub(crate) fn count_correct(logits: &Tensor, targets: &[usize]) -> usize {
    let classes = logits.dim(1);
    logits
        .data()
        .chunks_exact(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == t
        })
        .count()
}

fn param_grads(f: &Forward, grads: &GradMap) -> Vec<Tensor> {
    f.param_nodes()
        .iter()
        .map(|&id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(f.tape.shape(id))))
        .collect()
}

/// Clips one example's gradient in place, globally or per layer group.
fn clip_example(grads: &mut [Tensor], model: &Model, cfg: &ClipConfig) {
    match cfg.mode {
        ClipMode::Global => {
            let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            let f = clip_factor(norm, cfg.c);
            grads.iter_mut().for_each(|g| *g = g.scale(f));
        }
        ClipMode::PerLayer => {
            let c = cfg.c / (model.group_count() as f64).sqrt();
            let mut sq = std::collections::BTreeMap::new();
            for (p, g) in model.params.iter().zip(grads.iter()) {
                *sq.entry(p.group).or_insert(0.0) += g.sq_norm();
            }
            for (p, g) in model.params.iter().zip(grads.iter_mut()) {
                *g = g.scale(clip_factor(sq[&p.group].sqrt(), c));
            }
        }
    }
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) -> Result<()> {
    match acc {
        Some(a) => {
            for (x, g) in a.iter_mut().zip(&grads) {
                x.axpy(1.0, g)?;
            }
        }
        None => *acc = Some(grads),
    }
    Ok(())
}

fn check_batch(x: &Tensor, targets: &[usize]) -> Result<usize> {
    if targets.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if x.dim(0) != targets.len() {
        return Err(Error::Dimension(format!("batch of {} records has {} targets", x.dim(0), targets.len())));
    }
    Ok(targets.len())
}

/// `(1/τ) Σ clip_c(∇ℓ_i)` for private strategies; the plain mean gradient
/// for [`Strategy::NonPrivate`].
pub fn clipped_batch_gradient(model: &Model, x: &Tensor, targets: &[usize], cfg: &ClipConfig) -> Result<BatchGradient> {
    check_batch(x, targets)?;
    match cfg.strategy {
        Strategy::NonPrivate => nonprivate_strategy(model, x, targets),
        Strategy::Nxbp => nxbp_strategy(model, x, targets, cfg),
        Strategy::MultiLoss => multiloss_strategy(model, x, targets, cfg),
        Strategy::Reweight => reweight_strategy(model, x, targets, cfg),
    }
}

struct LossGraph {
    f: Forward,
    losses: NodeId,
    loss: f64,
    correct: usize,
}

fn loss_graph(model: &Model, x: &Tensor, targets: &[usize], retain: bool) -> Result<LossGraph> {
    let (mut f, logits) = model.forward(x, retain)?;
    let correct = count_correct(f.tape.value(logits), targets);
    let losses = f.tape.cross_entropy(logits, targets)?;
    let loss = f.tape.value(losses).sum() / targets.len() as f64;
    Ok(LossGraph { f, losses, loss, correct })
}

pub fn nonprivate_strategy(model: &Model, x: &Tensor, targets: &[usize]) -> Result<BatchGradient> {
    let tau = check_batch(x, targets)?;
    let LossGraph { mut f, losses, loss, correct } = loss_graph(model, x, targets, false)?;
    let total = f.tape.sum(losses);
    let mean = f.tape.scale(total, 1.0 / tau as f64);
    let grads = f.tape.backward_wrt(mean, Wrt::Params)?;
    Ok(BatchGradient { grads: param_grads(&f, &grads), loss, correct, norms: None })
}

/// One forward and one backward pass per record.
pub fn nxbp_strategy(model: &Model, x: &Tensor, targets: &[usize], cfg: &ClipConfig) -> Result<BatchGradient> {
    let tau = check_batch(x, targets)?;
    let mut acc = None;
    let (mut loss, mut correct) = (0.0, 0);
    let mut norms = Vec::with_capacity(tau);
    for (i, &t) in targets.iter().enumerate() {
        let xi = x.rows(i, 1)?;
        let mut g = loss_graph(model, &xi, &[t], false)?;
        loss += g.loss;
        correct += g.correct;
        let li = g.f.tape.sum(g.losses);
        let gm = g.f.tape.backward_wrt(li, Wrt::Params)?;
        let mut grads = param_grads(&g.f, &gm);
        norms.push(grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt());
        clip_example(&mut grads, model, cfg);
        accumulate(&mut acc, grads)?;
    }
    let grads = acc.unwrap().into_iter().map(|g| g.scale(1.0 / tau as f64)).collect();
    Ok(BatchGradient { grads, loss: loss / tau as f64, correct, norms: Some(Tensor::from_parts(vec![tau], norms)) })
}

/// One batched forward, then a separate backward pass for each entry of
/// the per-example loss vector.
pub fn multiloss_strategy(model: &Model, x: &Tensor, targets: &[usize], cfg: &ClipConfig) -> Result<BatchGradient> {
    const CHUNK: usize = 16;
    let tau = check_batch(x, targets)?;
    let LossGraph { mut f, losses, loss, correct } = loss_graph(model, x, targets, false)?;
    let selected = (0..tau).map(|i| f.tape.select(losses, i)).collect::<Result<Vec<_>>>()?;
    let mut acc = None;
    let mut norms = Vec::with_capacity(tau);
    for chunk in selected.chunks(CHUNK) {
        for gm in f.tape.backward_per_example(chunk)? {
            let mut grads = param_grads(&f, &gm);
            norms.push(grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt());
            clip_example(&mut grads, model, cfg);
            accumulate(&mut acc, grads)?;
        }
    }
    let grads = acc.unwrap().into_iter().map(|g| g.scale(1.0 / tau as f64)).collect();
    Ok(BatchGradient { grads, loss, correct, norms: Some(Tensor::from_parts(vec![tau], norms)) })
}

/// Fails with a capability error if some parameter is not covered by a
/// layer cache with closed-form per-example gradients.
fn check_coverage(model: &Model, f: &Forward) -> Result<()> {
    let mut covered = vec![false; model.params.len()];
    for cache in &f.caches {
        if let crate::layers::LayerCache::Unsupported { name, .. } = cache {
            return Err(Error::Capability(name.to_string()));
        }
        for ParamId(p) in cache.params() {
            covered[p] = true;
        }
    }
    match covered.iter().position(|c| !c) {
        Some(p) => Err(Error::Capability(model.params[p].name.clone())),
        None => Ok(()),
    }
}

/// Per-example squared norms of each layer cache: `[layers][τ]`.
pub fn layer_sq_norms(f: &Forward, grads: &GradMap) -> Result<Vec<Tensor>> {
    f.caches.iter().map(|c| c.per_example_sq_norms(&f.tape, grads)).collect()
}

/// Per-example gradient norms over all parameters from a retaining
/// forward pass and the gradients of its retained nodes.
pub fn per_example_norms(f: &Forward, grads: &GradMap, tau: usize) -> Result<Tensor> {
    let mut acc = PerExampleNorms::new(tau);
    for sq in layer_sq_norms(f, grads)? {
        acc.accumulate(&sq)?;
    }
    Ok(acc.finalize())
}

/// Per-example gradient norms over all parameters from one forward and one
/// backward pass.
pub fn fast_per_example_norms(model: &Model, x: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let tau = check_batch(x, targets)?;
    let LossGraph { mut f, losses, .. } = loss_graph(model, x, targets, true)?;
    check_coverage(model, &f)?;
    let total = f.tape.sum(losses);
    let grads = f.tape.backward_wrt(total, Wrt::Retained)?;
    per_example_norms(&f, &grads, tau)
}

/// Two backward passes: the first yields gradients of the retained
/// pre-activations, from which per-example norms and weights follow; the
/// second differentiates `(1/τ) Σ ν_i ℓ_i` with `ν` held constant.
pub fn reweight_strategy(model: &Model, x: &Tensor, targets: &[usize], cfg: &ClipConfig) -> Result<BatchGradient> {
    let tau = check_batch(x, targets)?;
    let LossGraph { mut f, losses, loss, correct } = loss_graph(model, x, targets, true)?;
    check_coverage(model, &f)?;
    let total = f.tape.sum(losses);
    let pass1 = f.tape.backward_wrt(total, Wrt::Retained)?;
    if cfg.mode == ClipMode::PerLayer {
        return per_layer_reweight(model, &f, &pass1, cfg, loss, correct);
    }
    let norms = per_example_norms(&f, &pass1, tau)?;
    drop(pass1);
    let nu = f.tape.input(weights(&norms, cfg.c));
    let weighted = f.tape.mul(losses, nu)?;
    let weighted = f.tape.sum(weighted);
    let objective = f.tape.scale(weighted, 1.0 / tau as f64);
    let grads = f.tape.backward_wrt(objective, Wrt::Params)?;
    Ok(BatchGradient { grads: param_grads(&f, &grads), loss, correct, norms: Some(norms) })
}

/// Per-layer clipping needs a different weight for every layer, which a
/// single reweighted loss cannot express, so the materialized per-example
/// gradients are combined directly.
fn per_layer_reweight(
    model: &Model,
    f: &Forward,
    pass1: &GradMap,
    cfg: &ClipConfig,
    loss: f64,
    correct: usize,
) -> Result<BatchGradient> {
    let c = cfg.c / (model.group_count() as f64).sqrt();
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
    let mut total_sq: Option<Tensor> = None;
    for cache in &f.caches {
        let pe = cache.per_example_grads(&f.tape, pass1)?;
        let mut sq = sq_norm_rows(&pe[0].1);
        for (_, g) in &pe[1..] {
            sq.axpy(1.0, &sq_norm_rows(g))?;
        }
        let nu = weights(&sq.map(f64::sqrt), c);
        let tau = nu.len();
        for (ParamId(p), g) in pe {
            let row = g.row_len();
            let mut out = vec![0.0; row];
            for (i, block) in g.data().chunks_exact(row).enumerate() {
                let w = nu.data()[i] / tau as f64;
                out.iter_mut().zip(block).for_each(|(o, v)| *o += w * v);
            }
            let shape = model.params[p].value.shape().to_vec();
            let t = Tensor::from_parts(shape, out);
            match &mut grads[p] {
                Some(acc) => acc.axpy(1.0, &t)?,
                slot => *slot = Some(t),
            }
        }
        match &mut total_sq {
            Some(t) => t.axpy(1.0, &sq)?,
            None => total_sq = Some(sq),
        }
    }
    let grads = grads
        .into_iter()
        .zip(&model.params)
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok(BatchGradient { grads, loss, correct, norms: total_sq.map(|t| t.map(f64::sqrt)) })
}

/// Per-example gradients of every parameter from one retaining forward
/// pass, aligned with `model.params`; each entry has a leading `τ` axis.
pub fn per_example_gradients(model: &Model, x: &Tensor, targets: &[usize]) -> Result<Vec<Tensor>> {
    check_batch(x, targets)?;
    let LossGraph { mut f, losses, .. } = loss_graph(model, x, targets, true)?;
    check_coverage(model, &f)?;
    let total = f.tape.sum(losses);
    let pass1 = f.tape.backward_wrt(total, Wrt::Retained)?;
    let mut out: Vec<Option<Tensor>> = vec![None; model.params.len()];
    for cache in &f.caches {
        for (ParamId(p), g) in cache.per_example_grads(&f.tape, &pass1)? {
            match &mut out[p] {
                Some(acc) => acc.axpy(1.0, &g)?,
                slot => *slot = Some(g),
            }
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Reference per-example gradients from `τ` separate backward passes over
/// one batched forward; `[example][param]`.
pub fn naive_per_example_gradients(model: &Model, x: &Tensor, targets: &[usize]) -> Result<Vec<Vec<Tensor>>> {
    let tau = check_batch(x, targets)?;
    let LossGraph { mut f, losses, .. } = loss_graph(model, x, targets, false)?;
    let selected = (0..tau).map(|i| f.tape.select(losses, i)).collect::<Result<Vec<_>>>()?;
    Ok(f.tape.backward_per_example(&selected)?.iter().map(|gm| param_grads(&f, gm)).collect())
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::layers::Activation;
    use crate::model::ModelBuilder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_examples() {
        let g = Tensor::from_vec(vec![3.0, 4.0]).unwrap();
        let out = clip(&g, 1.0);
        assert!((out.data()[0] - 0.6).abs() < 1e-15 && (out.data()[1] - 0.8).abs() < 1e-15);
        let small = Tensor::from_vec(vec![0.3, 0.4]).unwrap();
        assert_eq!(clip(&small, 1.0), small);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(clip(&zero, 1.0), zero);
    }

    #[test]
    fn weight_examples() {
        let n = Tensor::from_vec(vec![5.0, 0.5, 0.0]).unwrap();
        assert_eq!(weights(&n, 1.0).data(), &[0.2, 1.0, 1.0]);
        assert_eq!(weights(&Tensor::from_vec(vec![0.0]).unwrap(), 1e-9).data(), &[1.0]);
    }

    #[test]
    fn parse_methods() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("sgd".parse::<Strategy>(), Err(Error::Usage(_))));
        assert!(ClipConfig::new(0.0, Strategy::Reweight).is_err());
    }

    #[test]
    fn norms_cannot_grow_after_finalize() {
        let mut n = PerExampleNorms::new(2);
        n.accumulate(&Tensor::from_vec(vec![9.0, 16.0]).unwrap()).unwrap();
        assert_eq!(n.finalize().data(), &[3.0, 4.0]);
        assert!(n.accumulate(&Tensor::zeros(&[2])).is_err());
    }

    fn toy() -> (Model, Tensor, Vec<usize>) {
        let model = ModelBuilder::new(&[3], 11).linear(3, 5).activation(Activation::Tanh).linear(5, 2).build(2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::new(vec![8, 3], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y = (0..8).map(|i| i % 2).collect();
        (model, x, y)
    }

    fn max_rel(a: &[Tensor], b: &[Tensor]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| x.sub(y).unwrap().sq_norm()).sum();
        let den: f64 = b.iter().map(Tensor::sq_norm).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (model, _, _) = toy();
        let cfg = ClipConfig::new(1.0, Strategy::Reweight).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(clipped_batch_gradient(&model, &x, &[], &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn strategies_agree() {
        let (model, x, y) = toy();
        let c = 0.05;
        let run = |s| clipped_batch_gradient(&model, &x, &y, &ClipConfig::new(c, s).unwrap()).unwrap();
        let reference = run(Strategy::Nxbp);
        for s in [Strategy::MultiLoss, Strategy::Reweight] {
            let out = run(s);
            assert!(max_rel(&out.grads, &reference.grads) < 1e-10, "{s}");
            assert!(out.norms.unwrap().sub(reference.norms.as_ref().unwrap()).unwrap().max_abs() < 1e-10);
            assert!((out.loss - reference.loss).abs() < 1e-12);
        }
        assert!(reference.norms.unwrap().data().iter().all(|&n| n > c));
    }

    #[test]
    fn large_threshold_matches_nonprivate() {
        let (model, x, y) = toy();
        let free = nonprivate_strategy(&model, &x, &y).unwrap();
        let out = reweight_strategy(&model, &x, &y, &ClipConfig::new(1e6, Strategy::Reweight).unwrap()).unwrap();
        assert!(max_rel(&out.grads, &free.grads) < 1e-12);
    }

    #[test]
    fn single_example_at_twice_threshold_is_halved() {
        let (model, x, y) = toy();
        let x1 = x.rows(0, 1).unwrap();
        let raw = nonprivate_strategy(&model, &x1, &y[..1]).unwrap();
        let norm = raw.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let cfg = ClipConfig::new(norm / 2.0, Strategy::Reweight).unwrap();
        let out = reweight_strategy(&model, &x1, &y[..1], &cfg).unwrap();
        let half: Vec<Tensor> = raw.grads.iter().map(|g| g.scale(0.5)).collect();
        assert!(max_rel(&out.grads, &half) < 1e-12);
    }

    #[test]
    fn duplicate_records_get_equal_weights() {
        let (model, x, y) = toy();
        let xd = x.gather_rows(&[2, 2, 5]).unwrap();
        let yd = [y[2], y[2], y[5]];
        let out = reweight_strategy(&model, &xd, &yd, &ClipConfig::new(0.01, Strategy::Reweight).unwrap()).unwrap();
        let n = out.norms.unwrap();
        assert_eq!(n.data()[0], n.data()[1]);
    }

    #[test]
    fn per_layer_mode_agrees_across_strategies() {
        let (model, x, y) = toy();
        let cfg = |s| ClipConfig::new(0.05, s).unwrap().per_layer();
        let reference = nxbp_strategy(&model, &x, &y, &cfg(Strategy::Nxbp)).unwrap();
        let fast = reweight_strategy(&model, &x, &y, &cfg(Strategy::Reweight)).unwrap();
        let multi = multiloss_strategy(&model, &x, &y, &cfg(Strategy::MultiLoss)).unwrap();
        assert!(max_rel(&fast.grads, &reference.grads) < 1e-10);
        assert!(max_rel(&multi.grads, &reference.grads) < 1e-10);
        let global = nxbp_strategy(&model, &x, &y, &cfg(Strategy::Nxbp).clone_global()).unwrap();
        assert!(max_rel(&global.grads, &reference.grads) > 1e-6);
    }

    impl ClipConfig {
        fn clone_global(mut self) -> Self {
            self.mode = ClipMode::Global;
            self
        }
    }

    #[test]
    fn unsupported_layer_is_named() {
        let model = ModelBuilder::new(&[3], 0).embedding(10, 4, false, true).mean_over_sequence().linear(4, 2).build(2);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let err = reweight_strategy(&model, &x, &[0, 1], &ClipConfig::new(1.0, Strategy::Reweight).unwrap());
        assert!(matches!(err, Err(Error::Capability(ref n)) if n == "embedding"));
        assert!(nxbp_strategy(&model, &x, &[0, 1], &ClipConfig::new(1.0, Strategy::Nxbp).unwrap()).is_ok());
    }

    fn vector() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..12)
    }

    proptest! {
        #[test]
        fn clip_bounds_and_idempotence(v in vector(), c in 0.01f64..5.0) {
            let g = Tensor::from_vec(v).unwrap();
            let once = clip(&g, c);
            prop_assert!(once.norm() <= c * (1.0 + 1e-12));
            let twice = clip(&once, c);
            prop_assert!(twice.sub(&once).unwrap().max_abs() <= 1e-12 * (1.0 + once.max_abs()));
            // parallel: |<g, out>| = |g| |out|
            let dot: f64 = g.data().iter().zip(once.data()).map(|(a, b)| a * b).sum();
            prop_assert!((dot - g.norm() * once.norm()).abs() <= 1e-9 * (1.0 + g.norm() * once.norm()));
        }

        #[test]
        fn clip_is_homogeneous_in_threshold(v in vector(), c in 0.01f64..1.0, a in 0.1f64..3.0) {
            let g = Tensor::from_vec(v).unwrap();
            prop_assume!(g.norm() >= a * c && g.norm() > 0.0);
            let lhs = clip(&g, a * c);
            let rhs = clip(&g, c).scale(a);
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * (1.0 + lhs.max_abs()));
        }

        #[test]
        fn weights_bound_clipped_norm(ns in prop::collection::vec(0.0f64..100.0, 1..10), c in 0.01f64..5.0) {
            let norms = Tensor::from_vec(ns).unwrap();
            let nu = weights(&norms, c);
            for (w, n) in nu.data().iter().zip(norms.data()) {
                prop_assert!(*w > 0.0 && *w <= 1.0);
                prop_assert!(w * n <= c * (1.0 + 1e-12));
            }
        }
    }
}
