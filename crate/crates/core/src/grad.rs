//! Reverse-mode gradients of the total objective, derived by hand per operation, and a
//! central-difference checker for them.
//!
//! Pseudo labels are constants here: gradients reach the logits through the cross entropy but
//! never flow into how the labels were chosen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aten::{full_forward, AlphaMode, BiAtenParams, EnsembleMode, ForwardOptions, ForwardTrace};
use crate::error::{Error, Result};
use crate::heads::SourceHeadParams;
use crate::numerics::{batchnorm_backward, cosine_backward, dot, matmul, matmul_nt, matmul_tn, softmax_backward, Matrix};
use crate::objectives::{evaluate_losses, LossGrads, LossWeights};
use crate::scalar::Scalar;

/// Gradients for the trainable parts of one source head. The classifier never appears here.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T> {
    pub bottleneck_weight: Matrix<T>,
    pub bn_scale: Vec<T>,
    pub bn_shift: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads<T> {
    pub w_o: Option<Matrix<T>>,
    pub w_f: Matrix<T>,
    pub w_qf: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub heads: Vec<HeadGrads<T>>,
    pub attention: Vec<AttentionGrads<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Flattened view in the same order as [`trainable_tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.bottleneck_weight"), h.bottleneck_weight.data()));
            out.push((format!("head{i}.bn_scale"), h.bn_scale.as_slice()));
            out.push((format!("head{i}.bn_shift"), h.bn_shift.as_slice()));
        }
        for (k, a) in self.attention.iter().enumerate() {
            if let Some(w_o) = &a.w_o {
                out.push((format!("attn{k}.w_o"), w_o.data()));
            }
            out.push((format!("attn{k}.w_f"), a.w_f.data()));
            out.push((format!("attn{k}.w_qf"), a.w_qf.data()));
        }
        out
    }
}

/// Every trainable tensor, named, in a fixed order. The bottleneck bias is left out: behind
/// train-mode batch normalization its gradient is identically zero.
pub fn trainable_tensors_mut<'a, T: Scalar>(
    heads: &'a mut [SourceHeadParams<T>],
    params: &'a mut BiAtenParams<T>,
) -> Vec<(String, &'a mut [T])> {
    let mut out = Vec::new();
    for (i, h) in heads.iter_mut().enumerate() {
        out.push((format!("head{i}.bottleneck_weight"), h.bottleneck_weight.data_mut()));
        out.push((format!("head{i}.bn_scale"), h.bn_scale.as_mut_slice()));
        out.push((format!("head{i}.bn_shift"), h.bn_shift.as_mut_slice()));
    }
    for (k, a) in params.heads.iter_mut().enumerate() {
        if let Some(w_o) = a.w_o.as_mut() {
            out.push((format!("attn{k}.w_o"), w_o.data_mut()));
        }
        out.push((format!("attn{k}.w_f"), a.w_f.data_mut()));
        out.push((format!("attn{k}.w_qf"), a.w_qf.data_mut()));
    }
    out
}

fn ensure_finite<T: Scalar>(node: &str, m: &Matrix<T>) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { node: node.to_string() })
    }
}

#[inline]
fn add_scaled<T: Scalar>(target: &mut [T], src: &[T], scale: T) {
    for (t, &s) in target.iter_mut().zip(src) {
        *t += scale * s;
    }
}

/// Gradient of the total loss with respect to every trainable tensor.
///
/// `trace` must come from a train-mode [`full_forward`] so batch-norm caches are present;
/// `upstream` is what [`evaluate_losses`] returned for the same trace.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    heads: &[SourceHeadParams<T>],
    params: &BiAtenParams<T>,
    upstream: &LossGrads<T>,
) -> Result<Gradients<T>> {
    let n = params.n_domains;
    let n_heads = params.num_heads();
    let batch = trace.batch();
    let classes = params.n_classes;
    let d_k = params.d_k;
    let d_emb = params.d_emb;
    let inv_heads = T::one() / T::from_usize_lossy(n_heads);
    if heads.len() != n || trace.bn_caches.len() != n {
        return Err(Error::contract("backward", "trace, heads and parameters disagree on domain count"));
    }
    if upstream.y_final.shape() != (batch, classes) {
        return Err(Error::ShapeMismatch {
            op: "backward upstream",
            left: upstream.y_final.shape(),
            right: (batch, classes),
        });
    }
    ensure_finite("dL/d(final ensemble)", &upstream.y_final)?;

    let mut d_phi: Vec<Matrix<T>> = (0..n).map(|_| Matrix::zeros(batch, d_k)).collect();
    let mut d_cross: Vec<Vec<Matrix<T>>> = (0..n)
        .map(|_| (0..n).map(|_| Matrix::zeros(batch, classes)).collect())
        .collect();
    let mut d_keys: Vec<Vec<Matrix<T>>> = (0..n_heads)
        .map(|_| (0..n).map(|_| Matrix::zeros(batch, d_emb)).collect())
        .collect();
    let mut attention: Vec<AttentionGrads<T>> = params
        .heads
        .iter()
        .map(|h| AttentionGrads {
            w_o: h.w_o.as_ref().map(|w| Matrix::zeros(w.rows(), w.cols())),
            w_f: Matrix::zeros(d_k, d_emb),
            w_qf: Matrix::zeros(n * d_k, d_emb),
        })
        .collect();

    // Final ensemble: ÿ = Σ_i β_i ỹ_used^i
    let beta = &trace.inter.beta;
    let mut d_beta = Matrix::zeros(batch, n);
    let mut d_y_used: Vec<Matrix<T>> = (0..n).map(|_| Matrix::zeros(batch, classes)).collect();
    for m in 0..batch {
        let g = upstream.y_final.row(m);
        for i in 0..n {
            d_beta[(m, i)] = dot(g, trace.y_used[i].row(m));
            add_scaled(d_y_used[i].row_mut(m), g, beta[(m, i)]);
        }
    }

    // Route ỹ_used into either the learned branch or the own-domain outputs.
    let mut d_y_learned: Option<Vec<Matrix<T>>> = upstream.y_tilde_learned.clone();
    match trace.options.alpha_mode {
        AlphaMode::Learned => {
            let acc = d_y_learned.get_or_insert_with(|| (0..n).map(|_| Matrix::zeros(batch, classes)).collect());
            for (a, d) in acc.iter_mut().zip(&d_y_used) {
                a.add_assign(d)?;
            }
        }
        AlphaMode::OneHot => {
            for (i, d) in d_y_used.iter().enumerate() {
                d_cross[i][i].add_assign(d)?;
            }
        }
    }

    if let Some(d_learned) = &d_y_learned {
        let branch = trace
            .learned
            .as_ref()
            .ok_or_else(|| Error::contract("backward", "intra gradient supplied but trace has no learned branch"))?;
        for d in d_learned {
            ensure_finite("dL/d(intra ensemble)", d)?;
        }
        for i in 0..n {
            // ỹ^i = Σ_j α^i_j O^i_j, α^i = softmax(mean_h cos(key_h, outemb_h_j))
            let mut d_out_emb: Vec<Vec<Matrix<T>>> = (0..n_heads)
                .map(|_| (0..n).map(|_| Matrix::zeros(batch, d_emb)).collect())
                .collect();
            for m in 0..batch {
                let g = d_learned[i].row(m);
                let alpha = branch.alpha[i].row(m);
                let d_alpha: Vec<T> = (0..n).map(|j| dot(g, trace.cross[i][j].row(m))).collect();
                for j in 0..n {
                    add_scaled(d_cross[i][j].row_mut(m), g, alpha[j]);
                }
                let d_sim = softmax_backward(alpha, &d_alpha);
                for h in 0..n_heads {
                    for j in 0..n {
                        let mut dk = vec![T::zero(); d_emb];
                        let mut de = vec![T::zero(); d_emb];
                        cosine_backward(
                            trace.keys[h][i].row(m),
                            branch.out_emb[h][i][j].row(m),
                            d_sim[j] * inv_heads,
                            &mut dk,
                            &mut de,
                        );
                        add_scaled(d_keys[h][i].row_mut(m), &dk, T::one());
                        d_out_emb[h][j].row_mut(m).copy_from_slice(&de);
                    }
                }
            }
            for h in 0..n_heads {
                let w_o = params.heads[h]
                    .w_o
                    .as_ref()
                    .ok_or_else(|| Error::contract("backward", "learned branch without W_O"))?;
                let dw_o = attention[h].w_o.as_mut().expect("W_O gradient allocated with W_O");
                for j in 0..n {
                    dw_o.add_assign(&matmul_tn(&trace.cross[i][j], &d_out_emb[h][j])?)?;
                    d_cross[i][j].add_assign(&matmul_nt(&d_out_emb[h][j], w_o)?)?;
                }
            }
        }
    }

    // Inter-domain weights: β = softmax(mean_h cos(query_h, key_h_i))
    let mut d_query: Vec<Matrix<T>> = (0..n_heads).map(|_| Matrix::zeros(batch, d_emb)).collect();
    for m in 0..batch {
        let d_sim = softmax_backward(beta.row(m), d_beta.row(m));
        for h in 0..n_heads {
            for i in 0..n {
                let mut dq = vec![T::zero(); d_emb];
                let mut dk = vec![T::zero(); d_emb];
                cosine_backward(
                    trace.inter.query[h].row(m),
                    trace.keys[h][i].row(m),
                    d_sim[i] * inv_heads,
                    &mut dq,
                    &mut dk,
                );
                add_scaled(d_query[h].row_mut(m), &dq, T::one());
                add_scaled(d_keys[h][i].row_mut(m), &dk, T::one());
            }
        }
    }
    for h in 0..n_heads {
        ensure_finite("dL/d(query)", &d_query[h])?;
        attention[h].w_qf = matmul_tn(&trace.inter.concat, &d_query[h])?;
        let d_concat = matmul_nt(&d_query[h], &params.heads[h].w_qf)?;
        for (i, dp) in d_phi.iter_mut().enumerate() {
            dp.add_assign(&d_concat.columns(i * d_k, d_k))?;
        }
    }

    // Keys / feature embeddings share W_F.
    for h in 0..n_heads {
        for i in 0..n {
            ensure_finite("dL/d(key embedding)", &d_keys[h][i])?;
            attention[h].w_f.add_assign(&matmul_tn(&trace.features.per_domain[i], &d_keys[h][i])?)?;
            d_phi[i].add_assign(&matmul_nt(&d_keys[h][i], &params.heads[h].w_f)?)?;
        }
    }

    // Frozen classifiers: O^i_j = φ^i G_jᵀ + c_j
    for i in 0..n {
        for j in 0..n {
            ensure_finite("dL/d(cross-domain outputs)", &d_cross[i][j])?;
            d_phi[i].add_assign(&matmul(&d_cross[i][j], &heads[j].classifier_weight)?)?;
        }
    }

    // Bottlenecks: φ = BN(x W + b)
    let mut head_grads = Vec::with_capacity(n);
    for i in 0..n {
        ensure_finite("dL/d(bottleneck features)", &d_phi[i])?;
        let cache = trace.bn_caches[i]
            .as_ref()
            .ok_or_else(|| Error::contract("backward", "trace lacks batch-norm caches (eval-mode forward)"))?;
        let (dz, d_scale, d_shift) = batchnorm_backward(&d_phi[i], &heads[i].bn_scale, cache);
        let d_weight = matmul_tn(&trace.backbone[i], &dz)?;
        ensure_finite("dL/d(bottleneck weight)", &d_weight)?;
        head_grads.push(HeadGrads {
            bottleneck_weight: d_weight,
            bn_scale: d_scale,
            bn_shift: d_shift,
        });
    }
    for (h, a) in attention.iter().enumerate() {
        ensure_finite(&format!("dL/d(attn{h}.w_f)"), &a.w_f)?;
        ensure_finite(&format!("dL/d(attn{h}.w_qf)"), &a.w_qf)?;
        if let Some(w_o) = &a.w_o {
            ensure_finite(&format!("dL/d(attn{h}.w_o)"), w_o)?;
        }
    }
    Ok(Gradients {
        heads: head_grads,
        attention,
    })
}

/// One training-style evaluation of the total loss: train-mode forward, losses, and
/// (optionally) gradients.
pub fn loss_and_gradients<T: Scalar>(
    backbone: &[Matrix<T>],
    heads: &[SourceHeadParams<T>],
    params: &BiAtenParams<T>,
    labels: &[usize],
    weights: &LossWeights<T>,
    alpha_mode: AlphaMode,
) -> Result<(T, Gradients<T>)> {
    let trace = full_forward(backbone, heads, params, ForwardOptions::train(alpha_mode))?;
    let (report, upstream) = evaluate_losses(&trace, labels, weights)?;
    let grads = backward(&trace, heads, params, &upstream)?;
    Ok((report.l_total, grads))
}

fn loss_only<T: Scalar>(
    backbone: &[Matrix<T>],
    heads: &[SourceHeadParams<T>],
    params: &BiAtenParams<T>,
    labels: &[usize],
    weights: &LossWeights<T>,
    alpha_mode: AlphaMode,
) -> Result<T> {
    let trace = full_forward(backbone, heads, params, ForwardOptions::train(alpha_mode))?;
    Ok(evaluate_losses(&trace, labels, weights)?.0.l_total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < tolerance)
    }
}

/// Compares the analytic gradient of the total loss with central differences of step `step`
/// for every entry of every trainable tensor. Relative error uses `max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<T: Scalar>(
    backbone: &[Matrix<T>],
    heads: &[SourceHeadParams<T>],
    params: &BiAtenParams<T>,
    labels: &[usize],
    weights: &LossWeights<T>,
    alpha_mode: AlphaMode,
    step: T,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(backbone, heads, params, labels, weights, alpha_mode)?;
    let analytic: Vec<(String, Vec<T>)> = grads.tensors().into_iter().map(|(n, g)| (n, g.to_vec())).collect();

    let mut work_heads = heads.to_vec();
    let mut work_params = params.clone();
    let count = trainable_tensors_mut(&mut work_heads, &mut work_params).len();
    if count != analytic.len() {
        return Err(Error::contract("finite_diff_check", "gradient/parameter tensor lists disagree"));
    }
    let two_h = step + step;
    let mut tensors = Vec::with_capacity(count);
    for (t, (name, analytic_vals)) in analytic.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (e, &a) in analytic_vals.iter().enumerate() {
            let original = trainable_tensors_mut(&mut work_heads, &mut work_params)[t].1[e];
            trainable_tensors_mut(&mut work_heads, &mut work_params)[t].1[e] = original + step;
            let plus = loss_only(backbone, &work_heads, &work_params, labels, weights, alpha_mode)?;
            trainable_tensors_mut(&mut work_heads, &mut work_params)[t].1[e] = original - step;
            let minus = loss_only(backbone, &work_heads, &work_params, labels, weights, alpha_mode)?;
            trainable_tensors_mut(&mut work_heads, &mut work_params)[t].1[e] = original;
            let numeric = ((plus - minus) / two_h).to_f64_lossy();
            let a = a.to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            max_abs = max_abs.max(a.abs());
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            entries: analytic_vals.len(),
            max_rel_error: max_rel,
            max_abs_gradient: max_abs,
        });
    }
    Ok(GradCheckReport {
        step: step.to_f64_lossy(),
        tensors,
    })
}

/// Seeded tiny configuration for gradient checks: 3 domains, 5 classes, `d_k = 8`,
/// `d_emb = 16`, 2 heads, batch 4.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub backbone: Vec<Matrix<f64>>,
    pub heads: Vec<SourceHeadParams<f64>>,
    pub params: BiAtenParams<f64>,
    pub labels: Vec<usize>,
    pub weights: LossWeights<f64>,
}

impl GradCheckCase {
    pub fn tiny(seed: u64, mode: EnsembleMode) -> Self {
        let (n, c, d_k, d_emb, h, batch, d_bb) = (3, 5, 8, 16, 2, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rnd = |rows: usize, cols: usize, s: f64| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s));
        let backbone: Vec<_> = (0..n).map(|_| rnd(batch, d_bb, 1.0)).collect();
        let heads: Vec<_> = (0..n)
            .map(|i| {
                let mut head = SourceHeadParams::new(format!("d{i}"), rnd(d_bb, d_k, 0.5), rnd(c, d_k, 0.6))
                    .expect("consistent tiny shapes");
                head.bn_scale = rnd(1, d_k, 1.0).data().iter().map(|v| 1.0 + 0.3 * v).collect();
                head.bn_shift = rnd(1, d_k, 0.2).into_data();
                head.classifier_bias = rnd(1, c, 0.3).into_data();
                head.bottleneck_bias = rnd(1, d_k, 0.1).into_data();
                head
            })
            .collect();
        let params = BiAtenParams::init(mode, n, c, d_k, d_emb, h, &mut ChaCha8Rng::seed_from_u64(seed + 1))
            .expect("consistent tiny shapes");
        Self {
            backbone,
            heads,
            params,
            labels: vec![0, 3, 1, 4],
            weights: LossWeights { lambda: 0.7, gamma: 0.3, smoothing: 0.1 },
        }
    }

    pub fn run(&self, alpha_mode: AlphaMode, step: f64) -> Result<GradCheckReport> {
        finite_diff_check(&self.backbone, &self.heads, &self.params, &self.labels, &self.weights, alpha_mode, step)
    }
}
