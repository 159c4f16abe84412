//! Alternate training: per-epoch pseudo-label refresh, an α schedule that toggles between
//! learned and one-hot intra-domain weights, SGD with momentum under cosine decay, and the
//! evaluation tables built from per-sample ensemble weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aten::{full_forward, AlphaMode, BiAtenParams, EnsembleMode, ForwardOptions, DEFAULT_HEADS};
use crate::bank::FeatureBank;
use crate::error::{Error, Result};
use crate::grad::{backward, trainable_tensors_mut};
use crate::heads::{BottleneckFeatures, SourceHeadParams};
use crate::numerics::{stable_softmax_rows, Matrix};
use crate::objectives::{evaluate_losses, LossWeights, DEFAULT_LABEL_SMOOTHING};
use crate::pseudo::{label_agreement, CentroidState};
use crate::scalar::Scalar;

/// Rows per forward pass when scoring the full target set.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_alter: usize,
    pub smoothing: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mode: EnsembleMode,
    pub d_emb: usize,
    pub n_heads: usize,
    /// Full-bank accuracy is logged every `eval_every` iterations; 0 logs it only at refreshes.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(EnsembleMode::BiAten)
    }
}

impl TrainConfig {
    pub fn for_mode(mode: EnsembleMode) -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.1,
            lr0: 0.02,
            epochs: 30,
            batch_size: 64,
            d_alter: 2,
            smoothing: DEFAULT_LABEL_SMOOTHING,
            momentum: 0.9,
            seed: 0,
            mode,
            d_emb: mode.default_embed_dim(),
            n_heads: DEFAULT_HEADS,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::contract("TrainConfig", msg));
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return bad("lambda and gamma must be non-negative");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("initial learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad("label smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.d_alter < 1 {
            return bad("d_alter must be at least 1");
        }
        if self.epochs == 0 || self.d_emb == 0 || self.n_heads == 0 {
            return bad("epochs, d_emb and head count must be positive");
        }
        Ok(())
    }

    fn loss_weights<T: Scalar>(&self) -> LossWeights<T> {
        LossWeights {
            lambda: T::lit(self.lambda),
            gamma: T::lit(self.gamma),
            smoothing: T::lit(self.smoothing),
        }
    }
}

/// `0.5 · lr0 · (1 + cos(π · iter / max_iter))`.
pub fn cosine_lr(lr0: f64, iter: usize, max_iter: usize) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::contract("cosine_lr", "max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::contract("cosine_lr", format!("iter {iter} beyond max_iter {max_iter}")));
    }
    let t = iter as f64 / max_iter as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Heavy-ball SGD: `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: T) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("sgd_step", format!("{} tensors, {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || self.velocity[k].len() != g.len() {
                return Err(Error::contract("sgd_step", format!("tensor {k}: length mismatch")));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// α mode for a training epoch (epochs count from 1).
pub fn alpha_mode_for_epoch(mode: EnsembleMode, epoch: usize, d_alter: usize) -> AlphaMode {
    match mode {
        EnsembleMode::Aten => AlphaMode::OneHot,
        EnsembleMode::BiAten if epoch % d_alter != 0 => AlphaMode::Learned,
        EnsembleMode::BiAten => AlphaMode::OneHot,
    }
}

/// Batches per epoch: `ceil(N / batch)`, minus a trailing batch of a single sample.
pub fn epoch_iterations(n_samples: usize, batch_size: usize) -> usize {
    let full = n_samples / batch_size;
    if n_samples % batch_size >= 2 {
        full + 1
    } else {
        full
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    pub alpha_mode: AlphaMode,
    pub lr: f64,
    pub l_total: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_ce: f64,
    pub l_ent: f64,
    pub l_div: f64,
    /// Set on the first iteration after a refresh that had a predecessor.
    pub pseudo_label_agreement: Option<f64>,
    pub accuracy: Option<f64>,
    /// Batch mean of β per domain.
    pub mean_beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefreshRecord {
    /// The epoch this refresh starts.
    pub epoch: usize,
    pub iter: usize,
    pub alpha_mode: AlphaMode,
    /// Accuracy of the ensemble that produced the labels, when ground truth exists.
    pub accuracy: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    pub agreement: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub heads: Vec<SourceHeadParams<T>>,
    pub params: BiAtenParams<T>,
    pub metrics: Vec<MetricsRow>,
    pub refreshes: Vec<RefreshRecord>,
    pub labels: Vec<usize>,
    pub epoch_iter: usize,
    pub max_iter: usize,
}

impl<T> TrainOutput<T> {
    /// α mode of every epoch, in order.
    pub fn alpha_schedule(&self) -> Vec<AlphaMode> {
        self.refreshes.iter().map(|r| r.alpha_mode).collect()
    }
}

/// Fresh attention parameters for a bank/heads pair, seeded by `config.seed`.
pub fn init_params<T: Scalar>(
    bank: &FeatureBank<T>,
    heads: &[SourceHeadParams<T>],
    config: &TrainConfig,
) -> Result<BiAtenParams<T>> {
    bank.check_heads(heads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    BiAtenParams::init(
        config.mode,
        bank.n_domains(),
        bank.n_classes,
        heads[0].d_k(),
        config.d_emb,
        config.n_heads,
        &mut rng,
    )
}

/// Full target set through the model in evaluation mode.
#[derive(Clone, Debug)]
pub struct EvalPass<T> {
    pub features: BottleneckFeatures<T>,
    pub y_final: Matrix<T>,
    pub beta: Matrix<T>,
    /// `[i]`: `N × n` intra-domain weights applied to bottleneck `i`.
    pub alpha: Vec<Matrix<T>>,
    /// `[i]`: `N × C` domain-specific outputs `G_i φ^i + c_i`.
    pub own_outputs: Vec<Matrix<T>>,
}

impl<T: Scalar> EvalPass<T> {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.y_final)
    }
}

pub fn argmax_rows<T: Scalar>(m: &Matrix<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    label_agreement(pred, truth)
}

pub fn eval_pass<T: Scalar>(
    bank: &FeatureBank<T>,
    heads: &[SourceHeadParams<T>],
    params: &BiAtenParams<T>,
    alpha_mode: AlphaMode,
) -> Result<EvalPass<T>> {
    bank.check_heads(heads)?;
    let n = bank.n_domains();
    let total = bank.n_samples();
    let mut feats: Vec<Vec<Matrix<T>>> = vec![Vec::new(); n];
    let mut alpha: Vec<Vec<Matrix<T>>> = vec![Vec::new(); n];
    let mut own: Vec<Vec<Matrix<T>>> = vec![Vec::new(); n];
    let mut y_final = Vec::new();
    let mut beta = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + EVAL_CHUNK).min(total);
        let idx: Vec<usize> = (start..end).collect();
        let trace = full_forward(&bank.gather(&idx), heads, params, ForwardOptions::eval(alpha_mode))?;
        for i in 0..n {
            feats[i].push(trace.features.per_domain[i].clone());
            alpha[i].push(trace.alpha_used[i].clone());
            own[i].push(trace.cross[i][i].clone());
        }
        y_final.push(trace.y_final);
        beta.push(trace.inter.beta);
        start = end;
    }
    let stack = |parts: Vec<Vec<Matrix<T>>>| parts.iter().map(|p| Matrix::vcat(p)).collect::<Result<Vec<_>>>();
    Ok(EvalPass {
        features: BottleneckFeatures::new(stack(feats)?)?,
        y_final: Matrix::vcat(&y_final)?,
        beta: Matrix::vcat(&beta)?,
        alpha: stack(alpha)?,
        own_outputs: stack(own)?,
    })
}

/// Trains `heads` (bottlenecks and BN) and `params` on the unlabeled bank. Bank labels, when
/// present, are used only for logging accuracy.
pub fn train<T: Scalar>(
    bank: &FeatureBank<T>,
    heads: &[SourceHeadParams<T>],
    params: BiAtenParams<T>,
    config: &TrainConfig,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    bank.check_heads(heads)?;
    params.validate()?;
    if params.mode != config.mode {
        return Err(Error::contract("train", "parameter mode differs from the configured mode"));
    }
    let n_samples = bank.n_samples();
    let epoch_iter = epoch_iterations(n_samples, config.batch_size);
    if epoch_iter == 0 {
        return Err(Error::contract("train", "need at least two target samples"));
    }
    let max_iter = epoch_iter * config.epochs;
    let weights = config.loss_weights::<T>();

    let mut heads = heads.to_vec();
    let mut params = params;
    let mut sgd = Sgd::new(T::lit(config.momentum));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_samples).collect();

    let mut state: Option<CentroidState<T>> = None;
    let mut metrics = Vec::with_capacity(max_iter);
    let mut refreshes = Vec::with_capacity(config.epochs);
    let mut epoch = 0usize;
    let mut pending_agreement = None;

    for iter in 0..max_iter {
        let step = |e: Error| Error::Training {
            iter,
            source: Box::new(e),
        };
        let slot = iter % epoch_iter;
        if slot == 0 {
            epoch += 1;
            let alpha_mode = alpha_mode_for_epoch(config.mode, epoch, config.d_alter);
            let pass = eval_pass(bank, &heads, &params, alpha_mode).map_err(step)?;
            let next =
                CentroidState::refresh(state.as_ref(), &pass.features, &pass.y_final, &pass.beta).map_err(step)?;
            let agreement = state.as_ref().map(|prev| next.agreement(prev));
            let (acc, pl_acc) = match &bank.labels {
                Some(truth) => (
                    Some(accuracy(&pass.predictions(), truth)),
                    Some(accuracy(&next.labels, truth)),
                ),
                None => (None, None),
            };
            refreshes.push(RefreshRecord {
                epoch,
                iter,
                alpha_mode,
                accuracy: acc,
                pseudo_label_accuracy: pl_acc,
                agreement,
            });
            pending_agreement = agreement;
            state = Some(next);
            order.shuffle(&mut shuffle_rng);
        }
        let alpha_mode = alpha_mode_for_epoch(config.mode, epoch, config.d_alter);
        let labels_all = &state.as_ref().expect("refreshed at epoch start").labels;
        let start = slot * config.batch_size;
        let idx = &order[start..(start + config.batch_size).min(n_samples)];
        let batch_labels: Vec<usize> = idx.iter().map(|&m| labels_all[m]).collect();

        let trace = full_forward(&bank.gather(idx), &heads, &params, ForwardOptions::train(alpha_mode)).map_err(step)?;
        let (report, upstream) = evaluate_losses(&trace, &batch_labels, &weights).map_err(step)?;
        let grads = backward(&trace, &heads, &params, &upstream).map_err(step)?;
        for (h, cache) in heads.iter_mut().zip(&trace.bn_caches) {
            if let Some(cache) = cache {
                h.bn_running.update(cache);
            }
        }
        let lr = cosine_lr(config.lr0, iter, max_iter).map_err(step)?;
        {
            let grad_views = grads.tensors();
            let grad_slices: Vec<&[T]> = grad_views.iter().map(|(_, g)| *g).collect();
            let mut targets = trainable_tensors_mut(&mut heads, &mut params);
            let mut param_slices: Vec<&mut [T]> = targets.iter_mut().map(|(_, p)| &mut **p).collect();
            sgd.step(&mut param_slices, &grad_slices, T::lit(lr)).map_err(step)?;
        }

        let accuracy_now = match (&bank.labels, config.eval_every) {
            (Some(truth), k) if k > 0 && (iter + 1) % k == 0 => {
                let pass = eval_pass(bank, &heads, &params, eval_alpha_mode(config.mode)).map_err(step)?;
                Some(accuracy(&pass.predictions(), truth))
            }
            _ => None,
        };
        let beta = trace.beta();
        let mean_beta = beta.column_sums().iter().map(|v| v.to_f64_lossy() / beta.rows() as f64).collect();
        metrics.push(MetricsRow {
            epoch,
            iter,
            alpha_mode,
            lr,
            l_total: report.l_total.to_f64_lossy(),
            l_inter: report.l_inter.to_f64_lossy(),
            l_intra: report.l_intra.to_f64_lossy(),
            l_ce: report.l_ce.to_f64_lossy(),
            l_ent: report.l_ent.to_f64_lossy(),
            l_div: report.l_div.to_f64_lossy(),
            pseudo_label_agreement: if slot == 0 { pending_agreement.take() } else { None },
            accuracy: accuracy_now,
            mean_beta,
        });
    }
    let labels = state.map(|s| s.labels).unwrap_or_default();
    Ok(TrainOutput {
        heads,
        params,
        metrics,
        refreshes,
        labels,
        epoch_iter,
        max_iter,
    })
}

/// α used when scoring a trained model: learned for BI-ATEN, one-hot for ATEN.
pub fn eval_alpha_mode(mode: EnsembleMode) -> AlphaMode {
    match mode {
        EnsembleMode::BiAten => AlphaMode::Learned,
        EnsembleMode::Aten => AlphaMode::OneHot,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: Option<f64>,
    pub predictions: Vec<usize>,
    /// Per-sample β, `N` rows of `n` weights.
    pub beta: Vec<Vec<f64>>,
    /// `[i][m]`: α of bottleneck `i` for sample `m`.
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub mean_beta: Vec<f64>,
    /// `[c][i]`: mean β of class `c` minus the overall mean β of domain `i`; zero for empty classes.
    pub beta_deviation: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
    /// Classes are ground-truth labels when available, otherwise predictions.
    pub grouped_by_truth: bool,
    /// `[i][j]`: mean α that bottleneck `i` puts on classifier `j`.
    pub mean_alpha: Vec<Vec<f64>>,
}

pub fn evaluate<T: Scalar>(
    bank: &FeatureBank<T>,
    heads: &[SourceHeadParams<T>],
    params: &BiAtenParams<T>,
    alpha_mode: AlphaMode,
) -> Result<Evaluation> {
    let pass = eval_pass(bank, heads, params, alpha_mode)?;
    let predictions = pass.predictions();
    let to_rows = |m: &Matrix<T>| -> Vec<Vec<f64>> {
        (0..m.rows()).map(|r| m.row(r).iter().map(|v| v.to_f64_lossy()).collect()).collect()
    };
    let beta = to_rows(&pass.beta);
    let alpha: Vec<_> = pass.alpha.iter().map(to_rows).collect();
    let (groups, grouped_by_truth) = match &bank.labels {
        Some(truth) => (truth.clone(), true),
        None => (predictions.clone(), false),
    };
    let table = beta_table(&beta, &groups, bank.n_classes);
    let mean_alpha = alpha.iter().map(|rows| column_means(rows, bank.n_domains())).collect();
    Ok(Evaluation {
        accuracy: bank.labels.as_ref().map(|t| accuracy(&predictions, t)),
        predictions,
        mean_beta: table.mean,
        beta_deviation: table.deviation,
        class_counts: table.counts,
        grouped_by_truth,
        beta,
        alpha,
        mean_alpha,
    })
}

pub(crate) fn column_means(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Domain-level mean β and per-class deviations from it.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaTable {
    pub mean: Vec<f64>,
    pub deviation: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

pub fn beta_table(beta: &[Vec<f64>], classes: &[usize], n_classes: usize) -> BetaTable {
    let n = beta.first().map_or(0, Vec::len);
    let mean = column_means(beta, n);
    let mut sums = vec![vec![0.0; n]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &c) in beta.iter().zip(classes) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
    }
    let deviation = sums
        .iter()
        .zip(&counts)
        .map(|(s, &k)| {
            if k == 0 {
                vec![0.0; n]
            } else {
                s.iter().zip(&mean).map(|(v, m)| v / k as f64 - m).collect()
            }
        })
        .collect();
    BetaTable { mean, deviation, counts }
}

/// Baselines from the frozen source models on the target set.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBaselines {
    /// Accuracy of each source model on its own.
    pub single: Vec<f64>,
    /// Accuracy of the uniformly averaged source probabilities.
    pub average_ensemble: f64,
}

pub fn source_baselines<T: Scalar>(bank: &FeatureBank<T>, heads: &[SourceHeadParams<T>]) -> Result<SourceBaselines> {
    bank.check_heads(heads)?;
    let truth = bank
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("source_baselines", "bank has no labels"))?;
    let n = bank.n_domains();
    let mut single = Vec::with_capacity(n);
    let mut avg: Matrix<T> = Matrix::zeros(bank.n_samples(), bank.n_classes);
    let inv = T::one() / T::from_usize_lossy(n);
    for (d, h) in bank.domains.iter().zip(heads) {
        let phi = crate::heads::bottleneck_pass(h, &d.features, crate::numerics::BnMode::Eval)?.features;
        let logits = h.classify(&phi)?;
        single.push(accuracy(&argmax_rows(&logits), truth));
        avg.add_assign(&stable_softmax_rows(&logits)?.scale(inv))?;
    }
    Ok(SourceBaselines {
        single,
        average_ensemble: accuracy(&argmax_rows(&avg), truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::DomainBlock;
    use rand::Rng;

    #[test]
    fn cosine_lr_cases() {
        assert_eq!(cosine_lr(0.02, 0, 100).unwrap(), 0.02);
        assert!(cosine_lr(0.02, 100, 100).unwrap().abs() < 1e-18);
        assert!((cosine_lr(0.02, 50, 100).unwrap() - 0.01).abs() < 1e-17);
        assert!(cosine_lr(0.02, 0, 0).is_err());
        assert!(cosine_lr(0.02, 5, 4).is_err());
        let lrs: Vec<f64> = (0..=10).map(|i| cosine_lr(1.0, i, 10).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_plain_and_zero_gradient() {
        let mut p = vec![1.0, -2.0];
        let mut sgd = Sgd::new(0.0);
        sgd.step(&mut [&mut p[..]], &[&[0.5, 0.25]], 0.1).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.025]);

        let mut q = vec![3.0, 4.0];
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut [&mut q[..]], &[&[0.0, 0.0]], 0.5).unwrap();
        assert_eq!(q, vec![3.0, 4.0]);
    }

    #[test]
    fn sgd_two_momentum_steps_match_unrolled_oracle() {
        // θ0 = [[1,2],[3,4]], g1 = [[.1,-.2],[.3,0]], g2 = [[-.4,.5],[0,.2]], μ = .9
        // v1 = g1, θ1 = θ0 - .1 v1; v2 = .9 v1 + g2, θ2 = θ1 - .05 v2
        let mut theta: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0];
        let g1 = [0.1, -0.2, 0.3, 0.0];
        let g2 = [-0.4, 0.5, 0.0, 0.2];
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut [&mut theta[..]], &[&g1], 0.1).unwrap();
        sgd.step(&mut [&mut theta[..]], &[&g2], 0.05).unwrap();
        let want = [
            1.0 - 0.01 - 0.05 * (0.09 - 0.4),
            2.0 + 0.02 - 0.05 * (-0.18 + 0.5),
            3.0 - 0.03 - 0.05 * 0.27,
            4.0 - 0.05 * 0.2,
        ];
        for (a, b) in theta.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(sgd.step(&mut [&mut theta[..]], &[&g1[..3]], 0.1).is_err());
    }

    #[test]
    fn schedule_follows_alternation() {
        let modes: Vec<_> = (1..=6).map(|e| alpha_mode_for_epoch(EnsembleMode::BiAten, e, 2)).collect();
        use AlphaMode::*;
        assert_eq!(modes, vec![Learned, OneHot, Learned, OneHot, Learned, OneHot]);
        assert!((1..=4).all(|e| alpha_mode_for_epoch(EnsembleMode::Aten, e, 2) == OneHot));
        assert!((1..=4).all(|e| alpha_mode_for_epoch(EnsembleMode::BiAten, e, 1) == OneHot));
        assert_eq!(alpha_mode_for_epoch(EnsembleMode::BiAten, 3, 3), OneHot);
    }

    #[test]
    fn epoch_iterations_drop_single_sample_tail() {
        assert_eq!(epoch_iterations(64, 32), 2);
        assert_eq!(epoch_iterations(65, 32), 2);
        assert_eq!(epoch_iterations(66, 32), 3);
        assert_eq!(epoch_iterations(1, 32), 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::for_mode(EnsembleMode::Aten).d_emb, 2048);
        let mut c = TrainConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.smoothing = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.d_alter = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda = -0.1;
        assert!(c.validate().is_err());
    }

    fn toy(seed: u64, n: usize, samples: usize) -> (FeatureBank<f64>, Vec<SourceHeadParams<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = 3;
        let labels: Vec<usize> = (0..samples).map(|m| m % classes).collect();
        let domains = (0..n)
            .map(|i| DomainBlock {
                name: format!("d{i}"),
                features: Matrix::from_fn(samples, 5, |m, k| {
                    let centre = if k == labels[m] { 2.0 } else { 0.0 };
                    centre + rng.random_range(-1.0..1.0)
                }),
            })
            .collect();
        let bank = FeatureBank::new(classes, domains, Some(labels)).unwrap();
        let heads = (0..n)
            .map(|i| {
                let w = Matrix::from_fn(5, 4, |_, _| rng.random_range(-0.5..0.5));
                let g = Matrix::from_fn(classes, 4, |_, _| rng.random_range(-1.0..1.0));
                SourceHeadParams::new(format!("d{i}"), w, g).unwrap()
            })
            .collect();
        (bank, heads)
    }

    fn small_config(mode: EnsembleMode) -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 8,
            d_emb: 6,
            n_heads: 2,
            seed: 5,
            eval_every: 7,
            ..TrainConfig::for_mode(mode)
        }
    }

    #[test]
    fn bookkeeping_matches_the_algorithm() {
        let (bank, heads) = toy(1, 3, 30);
        let config = small_config(EnsembleMode::BiAten);
        let params = init_params(&bank, &heads, &config).unwrap();
        let out = train(&bank, &heads, params, &config).unwrap();
        assert_eq!(out.epoch_iter, 4);
        assert_eq!(out.max_iter, 24);
        assert_eq!(out.metrics.len(), 24);
        assert_eq!(out.refreshes.len(), out.max_iter.div_ceil(out.epoch_iter));
        use AlphaMode::*;
        assert_eq!(out.alpha_schedule(), vec![Learned, OneHot, Learned, OneHot, Learned, OneHot]);
        for row in &out.metrics {
            assert_eq!(row.epoch, row.iter / out.epoch_iter + 1);
            assert_eq!(row.alpha_mode, out.refreshes[row.epoch - 1].alpha_mode);
            assert_eq!(row.accuracy.is_some(), (row.iter + 1) % 7 == 0);
            assert!((row.mean_beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(out.refreshes[0].agreement.is_none());
        assert!(out.refreshes[1..].iter().all(|r| r.agreement.is_some()));
        for (a, b) in out.heads.iter().zip(&heads) {
            assert_eq!(a.classifier_weight, b.classifier_weight);
            assert_eq!(a.classifier_bias, b.classifier_bias);
            assert_ne!(a.bottleneck_weight, b.bottleneck_weight);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (bank, heads) = toy(2, 2, 20);
        let config = small_config(EnsembleMode::BiAten);
        let run = || {
            let params = init_params(&bank, &heads, &config).unwrap();
            train(&bank, &heads, params, &config).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.params, b.params);
        assert_eq!(a.heads, b.heads);
    }

    #[test]
    fn aten_training_has_no_intra_term() {
        let (bank, heads) = toy(3, 2, 20);
        let config = small_config(EnsembleMode::Aten);
        let params = init_params(&bank, &heads, &config).unwrap();
        assert!(params.heads.iter().all(|h| h.w_o.is_none()));
        let out = train(&bank, &heads, params, &config).unwrap();
        assert!(out.metrics.iter().all(|r| r.l_intra == 0.0 && r.alpha_mode == AlphaMode::OneHot));
    }

    #[test]
    fn train_rejects_mismatched_inputs() {
        let (bank, heads) = toy(4, 2, 20);
        let config = small_config(EnsembleMode::BiAten);
        let params = init_params(&bank, &heads, &config).unwrap();
        assert!(train(&bank, &heads[..1], params.clone(), &config).is_err());
        let aten = small_config(EnsembleMode::Aten);
        assert!(train(&bank, &heads, params, &aten).is_err());
    }

    #[test]
    fn training_errors_carry_the_iteration() {
        let (bank, mut heads) = toy(6, 2, 20);
        let config = small_config(EnsembleMode::BiAten);
        let params = init_params(&bank, &heads, &config).unwrap();
        heads[1].bn_scale = vec![1e300; 4];
        let err = train(&bank, &heads, params, &config).unwrap_err();
        assert!(matches!(err, Error::Training { iter: 0, .. }));
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn one_domain_perfect_classifier_scores_one() {
        let labels = vec![0, 1, 1, 0, 1, 0];
        let x = Matrix::from_fn(6, 2, |m, c| if labels[m] == c { 3.0 } else { -3.0 });
        let bank = FeatureBank::new(2, vec![DomainBlock { name: "only".into(), features: x }], Some(labels)).unwrap();
        let head = SourceHeadParams::new("only", Matrix::identity(2), Matrix::identity(2)).unwrap();
        let config = TrainConfig { d_emb: 4, n_heads: 1, ..TrainConfig::default() };
        let params = init_params(&bank, std::slice::from_ref(&head), &config).unwrap();
        let ev = evaluate(&bank, &[head.clone()], &params, AlphaMode::Learned).unwrap();
        assert_eq!(ev.accuracy, Some(1.0));
        assert!(ev.beta.iter().all(|b| b == &vec![1.0]));
        let base = source_baselines(&bank, &[head]).unwrap();
        assert_eq!(base.single, vec![1.0]);
        assert_eq!(base.average_ensemble, 1.0);
    }

    #[test]
    fn beta_table_matches_group_by_oracle() {
        let beta = vec![
            vec![0.2, 0.8],
            vec![0.6, 0.4],
            vec![0.5, 0.5],
            vec![0.9, 0.1],
            vec![0.3, 0.7],
            vec![0.1, 0.9],
        ];
        let classes = [0, 1, 0, 1, 2, 2];
        let t = beta_table(&beta, &classes, 4);
        let mean0 = (0.2 + 0.6 + 0.5 + 0.9 + 0.3 + 0.1) / 6.0;
        assert!((t.mean[0] - mean0).abs() < 1e-15);
        assert!((t.deviation[0][0] - (0.35 - mean0)).abs() < 1e-15);
        assert!((t.deviation[1][0] - (0.75 - mean0)).abs() < 1e-15);
        assert!((t.deviation[2][1] - (0.8 - (1.0 - mean0))).abs() < 1e-15);
        assert_eq!(t.deviation[3], vec![0.0, 0.0]);
        assert_eq!(t.counts, vec![2, 2, 2, 0]);
        // balanced classes: deviations centre on zero
        for i in 0..2 {
            let s: f64 = t.deviation[..3].iter().map(|d| d[i]).sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn chunked_eval_matches_single_pass() {
        let (bank, heads) = toy(8, 2, EVAL_CHUNK + 37);
        let config = small_config(EnsembleMode::BiAten);
        let params = init_params(&bank, &heads, &config).unwrap();
        let pass = eval_pass(&bank, &heads, &params, AlphaMode::Learned).unwrap();
        let whole = full_forward(&bank.backbone(), &heads, &params, ForwardOptions::eval(AlphaMode::Learned)).unwrap();
        assert_eq!(pass.y_final, whole.y_final);
        assert_eq!(pass.beta, whole.inter.beta);
    }
}
