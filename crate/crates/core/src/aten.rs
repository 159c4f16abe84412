//! Bi-level attention ensemble.
//!
//! For every sample and source domain `i` the bottleneck feature `φ^i` is pushed through all
//! `n` frozen classifiers, giving `n` cross-domain logit rows. Intra-domain weights `α^i`
//! come from cosine similarity between an embedding of `φ^i` and embeddings of those rows;
//! inter-domain weights `β` come from cosine similarity between a query built from all
//! features concatenated and per-domain keys. Heads share the full input and their
//! similarity scores are averaged before the softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::heads::{bottleneck_pass, check_heads_compatible, BottleneckFeatures, SourceHeadParams};
use crate::numerics::{cosine, matmul, softmax_slice, BnCache, BnMode, Matrix};
use crate::scalar::Scalar;

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_EMBED_BI_ATEN: usize = 512;
pub const DEFAULT_EMBED_ATEN: usize = 2048;

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnsembleMode {
    /// Learned intra- and inter-domain weights.
    BiAten,
    /// Intra-domain weights fixed to one-hot; only `β` is learned and no output transform exists.
    Aten,
}

impl EnsembleMode {
    pub fn default_embed_dim(self) -> usize {
        match self {
            EnsembleMode::BiAten => DEFAULT_EMBED_BI_ATEN,
            EnsembleMode::Aten => DEFAULT_EMBED_ATEN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlphaMode {
    Learned,
    OneHot,
}

/// Transforms of one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<T> {
    /// `C × d_emb`; absent in ATEN mode.
    pub w_o: Option<Matrix<T>>,
    /// `d_k × d_emb`, shared by the intra-domain feature embedding and the inter-domain keys.
    pub w_f: Matrix<T>,
    /// `(n·d_k) × d_emb`
    pub w_qf: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiAtenParams<T> {
    pub mode: EnsembleMode,
    pub n_domains: usize,
    pub n_classes: usize,
    pub d_k: usize,
    pub d_emb: usize,
    pub heads: Vec<AttentionHead<T>>,
}

fn uniform_matrix<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix<T> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-a..=a)))
}

impl<T: Scalar> BiAtenParams<T> {
    /// Draws every entry uniformly from `[-1/√fan_in, 1/√fan_in]`, head by head in the
    /// order `W_O`, `W_F`, `W_QF`.
    pub fn init<R: Rng>(
        mode: EnsembleMode,
        n_domains: usize,
        n_classes: usize,
        d_k: usize,
        d_emb: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_domains == 0 || n_classes == 0 || d_k == 0 || d_emb == 0 || n_heads == 0 {
            return Err(Error::contract("BiAtenParams::init", "all dimensions must be positive"));
        }
        let heads = (0..n_heads)
            .map(|_| {
                let w_o = match mode {
                    EnsembleMode::BiAten => Some(uniform_matrix(rng, n_classes, d_emb, n_classes)),
                    EnsembleMode::Aten => None,
                };
                AttentionHead {
                    w_o,
                    w_f: uniform_matrix(rng, d_k, d_emb, d_k),
                    w_qf: uniform_matrix(rng, n_domains * d_k, d_emb, n_domains * d_k),
                }
            })
            .collect();
        Ok(Self {
            mode,
            n_domains,
            n_classes,
            d_k,
            d_emb,
            heads,
        })
    }

    /// The same parameters with the output transform dropped.
    pub fn to_aten(&self) -> Self {
        let mut p = self.clone();
        p.mode = EnsembleMode::Aten;
        for h in &mut p.heads {
            h.w_o = None;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::contract("BiAtenParams", "no attention heads"));
        }
        for (idx, h) in self.heads.iter().enumerate() {
            let expect = |name: &str, m: &Matrix<T>, shape: (usize, usize)| -> Result<()> {
                if m.shape() != shape {
                    return Err(Error::contract(
                        "BiAtenParams",
                        format!("head {idx}: {name} is {:?}, expected {shape:?}", m.shape()),
                    ));
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite {
                        node: format!("head {idx} {name}"),
                    });
                }
                Ok(())
            };
            expect("W_F", &h.w_f, (self.d_k, self.d_emb))?;
            expect("W_QF", &h.w_qf, (self.n_domains * self.d_k, self.d_emb))?;
            match (self.mode, &h.w_o) {
                (EnsembleMode::BiAten, Some(w_o)) => expect("W_O", w_o, (self.n_classes, self.d_emb))?,
                (EnsembleMode::BiAten, None) => {
                    return Err(Error::contract("BiAtenParams", format!("head {idx}: W_O missing")))
                }
                (EnsembleMode::Aten, Some(_)) => {
                    return Err(Error::contract("BiAtenParams", format!("head {idx}: W_O in ATEN mode")))
                }
                (EnsembleMode::Aten, None) => {}
            }
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.w_o.as_ref().map_or(0, |m| m.data().len()) + h.w_f.data().len() + h.w_qf.data().len())
            .sum()
    }

    fn check_against(&self, features: &BottleneckFeatures<T>) -> Result<()> {
        self.validate()?;
        if features.num_domains() != self.n_domains {
            return Err(Error::contract(
                "bi-aten",
                format!("{} feature domains, parameters built for {}", features.num_domains(), self.n_domains),
            ));
        }
        for phi in &features.per_domain {
            if phi.cols() != self.d_k {
                return Err(Error::ShapeMismatch {
                    op: "bi-aten features",
                    left: phi.shape(),
                    right: (phi.rows(), self.d_k),
                });
            }
        }
        Ok(())
    }
}

/// Key embeddings `φ^i W_F[h]`, indexed `[h][i]`.
pub(crate) fn key_embeddings<T: Scalar>(
    features: &BottleneckFeatures<T>,
    params: &BiAtenParams<T>,
) -> Result<Vec<Vec<Matrix<T>>>> {
    params
        .heads
        .iter()
        .map(|h| features.per_domain.iter().map(|phi| matmul(phi, &h.w_f)).collect())
        .collect()
}

/// Intermediates of the learned intra-domain branch.
#[derive(Clone, Debug)]
pub struct IntraBranch<T> {
    /// `[h][i][j]`: `O^i_j W_O[h]`, `batch × d_emb`.
    pub out_emb: Vec<Vec<Vec<Matrix<T>>>>,
    /// `[i]`: head-averaged similarities, `batch × n`.
    pub sim: Vec<Matrix<T>>,
    /// `[i]`: `α^i` per sample, `batch × n`.
    pub alpha: Vec<Matrix<T>>,
    /// `[i]`: `ỹ^i`, `batch × C`.
    pub y_tilde: Vec<Matrix<T>>,
}

/// Intermediates of the inter-domain branch.
#[derive(Clone, Debug)]
pub struct InterBranch<T> {
    /// All features side by side, `batch × (n·d_k)`.
    pub concat: Matrix<T>,
    /// `[h]`: query embeddings, `batch × d_emb`.
    pub query: Vec<Matrix<T>>,
    /// Head-averaged similarities, `batch × n`.
    pub sim: Matrix<T>,
    /// `β` per sample, `batch × n`.
    pub beta: Matrix<T>,
}

fn check_cross<T: Scalar>(cross: &[Vec<Matrix<T>>], params: &BiAtenParams<T>, batch: usize) -> Result<()> {
    let n = params.n_domains;
    if cross.len() != n || cross.iter().any(|row| row.len() != n) {
        return Err(Error::contract("bi-aten", "cross-domain outputs must be n × n"));
    }
    for o in cross.iter().flatten() {
        if o.shape() != (batch, params.n_classes) {
            return Err(Error::ShapeMismatch {
                op: "cross-domain outputs",
                left: o.shape(),
                right: (batch, params.n_classes),
            });
        }
    }
    Ok(())
}

pub(crate) fn intra_branch<T: Scalar>(
    keys: &[Vec<Matrix<T>>],
    cross: &[Vec<Matrix<T>>],
    params: &BiAtenParams<T>,
    batch: usize,
) -> Result<IntraBranch<T>> {
    let n = params.n_domains;
    let inv_heads = T::one() / T::from_usize_lossy(params.num_heads());
    let mut out_emb = Vec::with_capacity(params.num_heads());
    for h in &params.heads {
        let w_o = h
            .w_o
            .as_ref()
            .ok_or_else(|| Error::contract("intra_weights", "ATEN mode has no learned intra-domain weights"))?;
        let per_i = cross
            .iter()
            .map(|row| row.iter().map(|o| matmul(o, w_o)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        out_emb.push(per_i);
    }
    let mut sim = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = Matrix::zeros(batch, n);
        for m in 0..batch {
            for j in 0..n {
                let mut acc = T::zero();
                for h in 0..params.num_heads() {
                    acc += cosine(keys[h][i].row(m), out_emb[h][i][j].row(m));
                }
                s[(m, j)] = acc * inv_heads;
            }
        }
        let mut a = Matrix::zeros(batch, n);
        for m in 0..batch {
            a.row_mut(m).copy_from_slice(&softmax_slice(s.row(m)));
        }
        sim.push(s);
        alpha.push(a);
    }
    let y_tilde = intra_ensemble(&alpha, cross)?;
    Ok(IntraBranch {
        out_emb,
        sim,
        alpha,
        y_tilde,
    })
}

pub(crate) fn inter_branch<T: Scalar>(
    features: &BottleneckFeatures<T>,
    keys: &[Vec<Matrix<T>>],
    params: &BiAtenParams<T>,
) -> Result<InterBranch<T>> {
    let n = params.n_domains;
    let batch = features.batch();
    let inv_heads = T::one() / T::from_usize_lossy(params.num_heads());
    let parts: Vec<&Matrix<T>> = features.per_domain.iter().collect();
    let concat = Matrix::hcat(&parts)?;
    let query = params
        .heads
        .iter()
        .map(|h| matmul(&concat, &h.w_qf))
        .collect::<Result<Vec<_>>>()?;
    let mut sim = Matrix::zeros(batch, n);
    let mut beta = Matrix::zeros(batch, n);
    for m in 0..batch {
        for i in 0..n {
            let mut acc = T::zero();
            for h in 0..params.num_heads() {
                acc += cosine(query[h].row(m), keys[h][i].row(m));
            }
            sim[(m, i)] = acc * inv_heads;
        }
        beta.row_mut(m).copy_from_slice(&softmax_slice(sim.row(m)));
    }
    Ok(InterBranch {
        concat,
        query,
        sim,
        beta,
    })
}

/// Learned intra-domain weights: `[i]` is a `batch × n` matrix whose row `m` is `α^i` for sample `m`.
pub fn intra_weights<T: Scalar>(
    features: &BottleneckFeatures<T>,
    cross: &[Vec<Matrix<T>>],
    params: &BiAtenParams<T>,
) -> Result<Vec<Matrix<T>>> {
    if params.mode == EnsembleMode::Aten {
        return Err(Error::contract("intra_weights", "ATEN mode uses one-hot intra-domain weights"));
    }
    params.check_against(features)?;
    check_cross(cross, params, features.batch())?;
    let keys = key_embeddings(features, params)?;
    Ok(intra_branch(&keys, cross, params, features.batch())?.alpha)
}

/// `α^i = e_i` for every domain: the `n × n` identity.
pub fn one_hot_alpha<T: Scalar>(n: usize) -> Matrix<T> {
    Matrix::identity(n)
}

/// One-hot weights laid out like [`intra_weights`] output for a batch.
pub fn one_hot_alpha_batch<T: Scalar>(n: usize, batch: usize) -> Vec<Matrix<T>> {
    (0..n)
        .map(|i| Matrix::from_fn(batch, n, |_, j| if i == j { T::one() } else { T::zero() }))
        .collect()
}

fn check_simplex<T: Scalar>(op: &'static str, row: &[T]) -> Result<()> {
    let tol = T::lit(SIMPLEX_TOL);
    let mut total = T::zero();
    for &v in row {
        if !v.is_finite() {
            return Err(Error::NonFinite { node: format!("{op} weights") });
        }
        if v < -tol {
            return Err(Error::contract(op, format!("negative weight {v}")));
        }
        total += v;
    }
    if (total - T::one()).abs() > tol {
        return Err(Error::contract(op, format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// `ỹ^i = Σ_j α^i_j O^i_j` per sample. `alpha[i]` is `batch × n`, `cross[i][j]` is `batch × C`.
pub fn intra_ensemble<T: Scalar>(alpha: &[Matrix<T>], cross: &[Vec<Matrix<T>>]) -> Result<Vec<Matrix<T>>> {
    let n = alpha.len();
    if cross.len() != n {
        return Err(Error::contract("intra_ensemble", "alpha and outputs disagree on domain count"));
    }
    let mut out = Vec::with_capacity(n);
    for (a, row) in alpha.iter().zip(cross) {
        let (batch, width) = a.shape();
        if width != row.len() || row.is_empty() {
            return Err(Error::contract("intra_ensemble", "alpha width must equal classifier count"));
        }
        let classes = row[0].cols();
        let mut y = Matrix::zeros(batch, classes);
        for m in 0..batch {
            check_simplex("intra_ensemble", a.row(m))?;
            let target = y.row_mut(m);
            for (j, o) in row.iter().enumerate() {
                let w = a[(m, j)];
                for (t, &v) in target.iter_mut().zip(o.row(m)) {
                    *t += w * v;
                }
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Inter-domain weights: row `m` is `β` for sample `m`.
pub fn inter_weights<T: Scalar>(features: &BottleneckFeatures<T>, params: &BiAtenParams<T>) -> Result<Matrix<T>> {
    params.check_against(features)?;
    let keys = key_embeddings(features, params)?;
    Ok(inter_branch(features, &keys, params)?.beta)
}

/// `ÿ = Σ_i β_i ỹ^i` per sample.
pub fn inter_ensemble<T: Scalar>(beta: &Matrix<T>, y_tilde: &[Matrix<T>]) -> Result<Matrix<T>> {
    let (batch, n) = beta.shape();
    if y_tilde.len() != n || n == 0 {
        return Err(Error::contract("inter_ensemble", "beta width must equal domain count"));
    }
    let classes = y_tilde[0].cols();
    let mut out = Matrix::zeros(batch, classes);
    for m in 0..batch {
        check_simplex("inter_ensemble", beta.row(m))?;
        let target = out.row_mut(m);
        for (i, y) in y_tilde.iter().enumerate() {
            let w = beta[(m, i)];
            for (t, &v) in target.iter_mut().zip(y.row(m)) {
                *t += w * v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub alpha_mode: AlphaMode,
    pub bn_mode: BnMode,
    /// In one-hot epochs of BI-ATEN, still evaluate the learned intra branch so its loss can train `W_O`.
    pub keep_learned_branch: bool,
}

impl ForwardOptions {
    pub fn train(alpha_mode: AlphaMode) -> Self {
        Self {
            alpha_mode,
            bn_mode: BnMode::Train,
            keep_learned_branch: true,
        }
    }

    pub fn eval(alpha_mode: AlphaMode) -> Self {
        Self {
            alpha_mode,
            bn_mode: BnMode::Eval,
            keep_learned_branch: false,
        }
    }
}

/// Every intermediate of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub options: ForwardOptions,
    pub mode: EnsembleMode,
    /// Backbone inputs per domain, `batch × d_backbone`.
    pub backbone: Vec<Matrix<T>>,
    /// Train-mode batch-norm caches per domain.
    pub bn_caches: Vec<Option<BnCache<T>>>,
    pub features: BottleneckFeatures<T>,
    /// `[i][j]`: classifier `j` on `φ^i`, `batch × C`.
    pub cross: Vec<Vec<Matrix<T>>>,
    /// `[h][i]`: `φ^i W_F[h]`, used both as the intra feature embedding and as inter keys.
    pub keys: Vec<Vec<Matrix<T>>>,
    pub learned: Option<IntraBranch<T>>,
    /// `[i]`: the `α^i` rows fed into the final ensemble.
    pub alpha_used: Vec<Matrix<T>>,
    /// `[i]`: the `ỹ^i` fed into the final ensemble.
    pub y_used: Vec<Matrix<T>>,
    pub inter: InterBranch<T>,
    /// `ÿ`, `batch × C`.
    pub y_final: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch(&self) -> usize {
        self.y_final.rows()
    }

    pub fn beta(&self) -> &Matrix<T> {
        &self.inter.beta
    }

    /// `ỹ` of the learned branch, when it was evaluated.
    pub fn learned_y_tilde(&self) -> Option<&[Matrix<T>]> {
        self.learned.as_ref().map(|b| b.y_tilde.as_slice())
    }
}

/// Runs bottlenecks, cross-domain outputs, both attention levels and the final ensemble.
///
/// `backbone[i]` holds the frozen backbone features of domain `i` for the batch. ATEN-mode
/// parameters always use one-hot `α` regardless of `options.alpha_mode`.
pub fn full_forward<T: Scalar>(
    backbone: &[Matrix<T>],
    heads: &[SourceHeadParams<T>],
    params: &BiAtenParams<T>,
    options: ForwardOptions,
) -> Result<ForwardTrace<T>> {
    check_heads_compatible(heads)?;
    if backbone.len() != heads.len() {
        return Err(Error::contract(
            "full_forward",
            format!("{} backbone blocks for {} heads", backbone.len(), heads.len()),
        ));
    }
    let mut per_domain = Vec::with_capacity(heads.len());
    let mut bn_caches = Vec::with_capacity(heads.len());
    for (head, x) in heads.iter().zip(backbone) {
        let pass = bottleneck_pass(head, x, options.bn_mode)?;
        per_domain.push(pass.features);
        bn_caches.push(pass.bn_cache);
    }
    let features = BottleneckFeatures::new(per_domain)?;
    params.check_against(&features)?;
    let batch = features.batch();
    let n = params.n_domains;

    let cross = features
        .per_domain
        .iter()
        .map(|phi| heads.iter().map(|h| h.classify(phi)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    if heads[0].num_classes() != params.n_classes {
        return Err(Error::contract("full_forward", "class count differs between heads and attention parameters"));
    }
    let keys = key_embeddings(&features, params)?;

    let alpha_mode = match params.mode {
        EnsembleMode::Aten => AlphaMode::OneHot,
        EnsembleMode::BiAten => options.alpha_mode,
    };
    let want_learned = params.mode == EnsembleMode::BiAten
        && (alpha_mode == AlphaMode::Learned || options.keep_learned_branch);
    let learned = if want_learned {
        Some(intra_branch(&keys, &cross, params, batch)?)
    } else {
        None
    };

    let (alpha_used, y_used) = match (alpha_mode, &learned) {
        (AlphaMode::Learned, Some(branch)) => (branch.alpha.clone(), branch.y_tilde.clone()),
        _ => (
            one_hot_alpha_batch(n, batch),
            (0..n).map(|i| cross[i][i].clone()).collect(),
        ),
    };

    let inter = inter_branch(&features, &keys, params)?;
    let y_final = inter_ensemble(&inter.beta, &y_used)?;
    if !y_final.is_finite() {
        return Err(Error::NonFinite {
            node: "final ensemble".into(),
        });
    }
    Ok(ForwardTrace {
        options: ForwardOptions { alpha_mode, ..options },
        mode: params.mode,
        backbone: backbone.to_vec(),
        bn_caches,
        features,
        cross,
        keys,
        learned,
        alpha_used,
        y_used,
        inter,
        y_final,
    })
}
