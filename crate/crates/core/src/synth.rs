//! Seeded synthetic multi-source benchmark and supervised source-head pretraining.
//!
//! Every domain shares class-conditional Gaussian latents. Domain `i` moves them with its own
//! rotation and translation (magnitude `shift`) and then maps them through its own frozen random
//! linear backbone. Target samples use a rotation/translation interpolated between the sources,
//! and the target bank holds those samples as seen by every source backbone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bank::{DomainBlock, FeatureBank};
use crate::error::{Error, Result};
use crate::heads::{bottleneck_pass, SourceHeadParams, DEFAULT_BOTTLENECK_DIM};
use crate::numerics::{batchnorm_backward, matmul, matmul_tn, BnMode, Matrix};
use crate::objectives::{ce_label_smoothing_with_grad, DEFAULT_LABEL_SMOOTHING};
use crate::scalar::Scalar;
use crate::train::{accuracy, argmax_rows, cosine_lr, epoch_iterations, Sgd};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub n_classes: usize,
    /// Source samples per class and domain.
    pub n_per_class: usize,
    /// Target samples per class.
    pub n_target_per_class: usize,
    pub d_latent: usize,
    pub d_backbone: usize,
    pub shift: f64,
    /// Distance of each class mean from the origin, in units of the within-class noise.
    pub class_sep: f64,
    /// Domains whose source labels are replaced by uniformly random ones.
    pub shuffled_domains: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_domains: 3,
            n_classes: 4,
            n_per_class: 150,
            n_target_per_class: 100,
            d_latent: 8,
            d_backbone: 32,
            shift: 1.5,
            class_sep: 3.0,
            shuffled_domains: Vec::new(),
        }
    }
}

impl SynthConfig {
    /// Default sizes with the last source's labels shuffled, which makes that source useless.
    pub fn with_useless_source(seed: u64) -> Self {
        let base = Self::default();
        Self { seed, shuffled_domains: vec![base.n_domains - 1], ..base }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0
            || self.n_classes == 0
            || self.n_per_class == 0
            || self.n_target_per_class == 0
            || self.d_latent == 0
            || self.d_backbone == 0
        {
            return Err(Error::contract("synth", "all counts must be at least 1"));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite() && self.class_sep.is_finite()) {
            return Err(Error::contract("synth", "shift must be finite and non-negative"));
        }
        if let Some(&d) = self.shuffled_domains.iter().find(|&&d| d >= self.n_domains) {
            return Err(Error::contract("synth", format!("shuffled domain {d} does not exist")));
        }
        Ok(())
    }
}

/// Latent-space domain transform `z ↦ R z + t`.
#[derive(Clone, Debug)]
struct DomainShift {
    /// `(p, q, angle)` Givens rotations applied in order.
    rotations: Vec<(usize, usize, f64)>,
    translation: Vec<f64>,
}

impl DomainShift {
    fn random(rng: &mut ChaCha8Rng, d: usize, shift: f64) -> Self {
        let rotations = if d < 2 {
            Vec::new()
        } else {
            (0..d)
                .map(|_| {
                    let p = rng.random_range(0..d);
                    let mut q = rng.random_range(0..d - 1);
                    if q >= p {
                        q += 1;
                    }
                    (p, q, shift * rng.random_range(-1.0..1.0))
                })
                .collect()
        };
        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Self {
            rotations,
            translation: dir.iter().map(|v| shift * v / len).collect(),
        }
    }

    /// Same planes as the sources, angles and translation averaged with weights `w`.
    fn blend(parts: &[DomainShift], w: &[f64]) -> Self {
        let mut rotations = Vec::new();
        for (s, &wi) in parts.iter().zip(w) {
            rotations.extend(s.rotations.iter().map(|&(p, q, a)| (p, q, a * wi)));
        }
        let d = parts[0].translation.len();
        let translation = (0..d).map(|k| parts.iter().zip(w).map(|(s, wi)| wi * s.translation[k]).sum()).collect();
        Self { rotations, translation }
    }

    fn apply(&self, z: &mut [f64]) {
        for &(p, q, a) in &self.rotations {
            let (s, c) = a.sin_cos();
            let (zp, zq) = (z[p], z[q]);
            z[p] = c * zp - s * zq;
            z[q] = s * zp + c * zq;
        }
        for (v, t) in z.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData<T> {
    /// One single-domain labelled bank per source.
    pub sources: Vec<FeatureBank<T>>,
    /// Target samples through every source backbone, with ground-truth labels.
    pub target: FeatureBank<T>,
    /// Post-shift latents of each source set (row-aligned with `sources`).
    pub source_latents: Vec<Matrix<f64>>,
    pub target_latents: Matrix<f64>,
    pub class_means: Matrix<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

/// Class means at distance `sep` from the origin along orthonormal random directions, so every
/// pair of classes is equally far apart. With more classes than latent dimensions the
/// directions are plain Gaussian draws.
fn class_means(rng: &mut ChaCha8Rng, classes: usize, d: usize, sep: f64) -> Matrix<f64> {
    let mut m = gaussian_matrix(rng, classes, d, 1.0);
    if classes > d {
        return m.scale(sep / (d as f64).sqrt());
    }
    for c in 0..classes {
        for prev in 0..c {
            let proj: f64 = (0..d).map(|k| m[(c, k)] * m[(prev, k)]).sum();
            for k in 0..d {
                let v = m[(prev, k)];
                m[(c, k)] -= proj * v;
            }
        }
        let len = m.row(c).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        m.row_mut(c).iter_mut().for_each(|v| *v /= len);
    }
    m.scale(sep)
}

fn draw_latents(
    rng: &mut ChaCha8Rng,
    means: &Matrix<f64>,
    per_class: usize,
    shift: &DomainShift,
) -> (Matrix<f64>, Vec<usize>) {
    let (classes, d) = means.shape();
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    labels.shuffle(rng);
    let mut z = Matrix::zeros(labels.len(), d);
    for (m, &c) in labels.iter().enumerate() {
        let row = z.row_mut(m);
        for (k, v) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(rng);
            *v = means[(c, k)] + noise;
        }
        shift.apply(row);
    }
    (z, labels)
}

/// Backbone features rounded to `f32` so that in-memory banks equal their on-disk form.
fn through_backbone<T: Scalar>(z: &Matrix<f64>, backbone: &Matrix<f64>) -> Result<Matrix<T>> {
    let x = matmul(z, backbone)?;
    Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| T::lit(x[(r, c)] as f32 as f64)))
}

pub fn synth_generate<T: Scalar>(config: &SynthConfig) -> Result<SynthData<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, classes, d) = (config.n_domains, config.n_classes, config.d_latent);
    let means = class_means(&mut rng, classes, d, config.class_sep);
    let shifts: Vec<DomainShift> = (0..n).map(|_| DomainShift::random(&mut rng, d, config.shift)).collect();
    let backbones: Vec<Matrix<f64>> = (0..n)
        .map(|_| gaussian_matrix(&mut rng, d, config.d_backbone, 1.0 / (d as f64).sqrt()))
        .collect();

    let mut sources = Vec::with_capacity(n);
    let mut source_latents = Vec::with_capacity(n);
    for i in 0..n {
        let (z, mut labels) = draw_latents(&mut rng, &means, config.n_per_class, &shifts[i]);
        if config.shuffled_domains.contains(&i) {
            for y in labels.iter_mut() {
                *y = rng.random_range(0..classes);
            }
        }
        let block = DomainBlock {
            name: format!("source{i}"),
            features: through_backbone(&z, &backbones[i])?,
        };
        sources.push(FeatureBank::new(classes, vec![block], Some(labels))?);
        source_latents.push(z);
    }

    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let target_shift = DomainShift::blend(&shifts, &w);
    let (z_t, labels_t) = draw_latents(&mut rng, &means, config.n_target_per_class, &target_shift);
    let blocks = (0..n)
        .map(|i| {
            Ok(DomainBlock {
                name: format!("source{i}"),
                features: through_backbone(&z_t, &backbones[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthData {
        sources,
        target: FeatureBank::new(classes, blocks, Some(labels_t))?,
        source_latents,
        target_latents: z_t,
        class_means: means,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub d_k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub smoothing: f64,
    pub seed: u64,
}

impl PretrainConfig {
    /// Narrow, short pretraining sized for the synthetic benchmark.
    pub fn compact(seed: u64) -> Self {
        Self { d_k: 32, epochs: 20, batch_size: 32, seed, ..Self::default() }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            d_k: DEFAULT_BOTTLENECK_DIM,
            epochs: 30,
            batch_size: 64,
            lr0: 0.05,
            momentum: 0.9,
            smoothing: DEFAULT_LABEL_SMOOTHING,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Eval-mode accuracy on the source training set after the last step.
    pub accuracy: f64,
    pub final_loss: f64,
}

/// Supervised training of bottleneck, batch norm and classifier with label-smoothed cross
/// entropy on one labelled source domain.
pub fn pretrain_source_head<T: Scalar>(
    source: &FeatureBank<T>,
    config: &PretrainConfig,
) -> Result<(SourceHeadParams<T>, PretrainReport)> {
    if source.n_domains() != 1 {
        return Err(Error::contract("pretrain", "source set must hold exactly one domain"));
    }
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("pretrain", "source set has no labels"))?;
    if config.d_k == 0 || config.epochs == 0 || config.batch_size < 2 {
        return Err(Error::contract("pretrain", "d_k and epochs must be positive, batch size at least 2"));
    }
    let x_all = &source.domains[0].features;
    let (n_samples, d_bb) = x_all.shape();
    let epoch_iter = epoch_iterations(n_samples, config.batch_size);
    if epoch_iter == 0 {
        return Err(Error::contract("pretrain", "need at least two samples"));
    }
    let classes = source.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize| {
        let a = 1.0 / (fan_in as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-a..=a)))
    };
    let w_b = uniform(&mut rng, d_bb, config.d_k, d_bb);
    let g = uniform(&mut rng, classes, config.d_k, config.d_k);
    let mut head = SourceHeadParams::new(source.domains[0].name.clone(), w_b, g)?;

    let smoothing = T::lit(config.smoothing);
    let max_iter = epoch_iter * config.epochs;
    let mut sgd = Sgd::new(T::lit(config.momentum));
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut final_loss = 0.0;
    for iter in 0..max_iter {
        let slot = iter % epoch_iter;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[slot * config.batch_size..((slot + 1) * config.batch_size).min(n_samples)];
        let x = source.gather(idx).remove(0);
        let y: Vec<usize> = idx.iter().map(|&m| labels[m]).collect();

        let pass = bottleneck_pass(&head, &x, BnMode::Train)?;
        let cache = pass.bn_cache.expect("train mode keeps the cache");
        let logits = head.classify(&pass.features)?;
        let (loss, d_logits) = ce_label_smoothing_with_grad(&logits, &y, smoothing)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                iter,
                source: Box::new(Error::NonFinite { node: "pretrain loss".into() }),
            });
        }
        final_loss = loss.to_f64_lossy();
        let d_g = matmul_tn(&d_logits, &pass.features)?;
        let d_c = d_logits.column_sums();
        let d_phi = matmul(&d_logits, &head.classifier_weight)?;
        let (d_z, d_scale, d_shift) = batchnorm_backward(&d_phi, &head.bn_scale, &cache);
        let d_w = matmul_tn(&x, &d_z)?;
        let d_b = d_z.column_sums();
        head.bn_running.update(&cache);

        let lr = T::lit(cosine_lr(config.lr0, iter, max_iter)?);
        sgd.step(
            &mut [
                head.bottleneck_weight.data_mut(),
                &mut head.bottleneck_bias,
                &mut head.bn_scale,
                &mut head.bn_shift,
                head.classifier_weight.data_mut(),
                &mut head.classifier_bias,
            ],
            &[d_w.data(), &d_b, &d_scale, &d_shift, d_g.data(), &d_c],
            lr,
        )?;
    }
    let phi = bottleneck_pass(&head, x_all, BnMode::Eval)?.features;
    let acc = accuracy(&argmax_rows(&head.classify(&phi)?), labels);
    Ok((head, PretrainReport { accuracy: acc, final_loss }))
}
