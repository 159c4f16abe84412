//! Random attention instances and the invariant checks run over them.

#![allow(dead_code)]

use biaten::aten::{inter_ensemble, inter_weights, intra_ensemble, intra_weights, BiAtenParams, EnsembleMode};
use biaten::heads::{cross_domain_outputs, BottleneckFeatures, SourceHeadParams};
use biaten::numerics::{matmul, Matrix, COSINE_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bottleneck features, classifiers and attention parameters of random shape.
#[derive(Clone, Debug)]
pub struct Instance {
    pub features: BottleneckFeatures<f64>,
    pub heads: Vec<SourceHeadParams<f64>>,
    pub params: BiAtenParams<f64>,
}

/// `zero_bias` drops the classifier biases, which makes the outputs homogeneous in φ.
pub fn random_instance(seed: u64, zero_bias: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let c = rng.random_range(2..=5);
    let d_k = rng.random_range(2..=6);
    let d_emb = rng.random_range(2..=8);
    let h = rng.random_range(1..=3);
    let batch = rng.random_range(1..=5);
    let mut rnd = |rows: usize, cols: usize, s: f64| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s));
    let features = BottleneckFeatures::new((0..n).map(|_| rnd(batch, d_k, 2.0)).collect()).unwrap();
    let heads = (0..n)
        .map(|i| {
            let mut head = SourceHeadParams::new(format!("d{i}"), Matrix::identity(d_k), rnd(c, d_k, 1.0)).unwrap();
            if !zero_bias {
                head.classifier_bias = rnd(1, c, 0.5).into_data();
            }
            head
        })
        .collect();
    let params = BiAtenParams::init(EnsembleMode::BiAten, n, c, d_k, d_emb, h, &mut rng).unwrap();
    Instance { features, heads, params }
}

/// α, β and ÿ computed from bottleneck features.
#[derive(Clone, Debug)]
pub struct Weights {
    /// `[i]`: batch × n
    pub alpha: Vec<Matrix<f64>>,
    pub beta: Matrix<f64>,
    pub y: Matrix<f64>,
}

pub fn weights(inst: &Instance) -> Weights {
    let n = inst.features.num_domains();
    let cross: Vec<_> = (0..n)
        .map(|i| cross_domain_outputs(&inst.features, &inst.heads, i).unwrap())
        .collect();
    let alpha = intra_weights(&inst.features, &cross, &inst.params).unwrap();
    let y_tilde = intra_ensemble(&alpha, &cross).unwrap();
    let beta = inter_weights(&inst.features, &inst.params).unwrap();
    let y = inter_ensemble(&beta, &y_tilde).unwrap();
    Weights { alpha, beta, y }
}

fn row_simplex_error(row: &[f64]) -> f64 {
    let sum_err = (row.iter().sum::<f64>() - 1.0).abs();
    let neg = row.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
    sum_err.max(neg)
}

/// Largest deviation of any α or β row from the simplex (sum error or negativity).
pub fn simplex_error(w: &Weights) -> f64 {
    let mut worst = 0.0f64;
    for m in w.alpha.iter().chain(std::iter::once(&w.beta)) {
        for r in 0..m.rows() {
            worst = worst.max(row_simplex_error(m.row(r)));
        }
    }
    worst
}

fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scales every sample's features (all domains) by its own factor in `[0.1, 10]`. Far below that
/// range the additive cosine epsilon stops being negligible next to the norm product.
/// Returns the largest change of α or β, the largest relative deviation of ÿ from `c·ÿ`, and a
/// bound on how far the cosine epsilon alone can move any cosine across the two evaluations.
pub fn scale_errors(inst: &Instance, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = inst.features.batch();
    let factors: Vec<f64> = (0..batch).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
    let mut scaled = inst.clone();
    for phi in &mut scaled.features.per_domain {
        for (m, &f) in factors.iter().enumerate() {
            phi.row_mut(m).iter_mut().for_each(|v| *v *= f);
        }
    }
    let (w0, w1) = (weights(inst), weights(&scaled));
    let mut weight_err = max_abs_diff(&w0.beta, &w1.beta);
    for (a, b) in w0.alpha.iter().zip(&w1.alpha) {
        weight_err = weight_err.max(max_abs_diff(a, b));
    }
    let mut y_err = 0.0f64;
    for (m, &f) in factors.iter().enumerate() {
        for (a, b) in w0.y.row(m).iter().zip(w1.y.row(m)) {
            y_err = y_err.max((f * a - b).abs() / (1.0 + (f * a).abs()));
        }
    }
    let c_min = factors.iter().copied().fold(1.0, f64::min);
    let eps_bound = COSINE_EPS / (min_cosine_norm_product(inst) * c_min * c_min);
    (weight_err, y_err, eps_bound)
}

/// Random domain permutation applied to features, classifiers and `W_QF` row blocks.
/// Returns the largest mismatch of β, α (rows and columns permuted) and ÿ (unchanged).
pub fn permutation_errors(inst: &Instance, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inst.features.num_domains();
    let d_k = inst.params.d_k;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut p = inst.clone();
    p.features.per_domain = perm.iter().map(|&k| inst.features.per_domain[k].clone()).collect();
    p.heads = perm.iter().map(|&k| inst.heads[k].clone()).collect();
    for (new, old) in p.params.heads.iter_mut().zip(&inst.params.heads) {
        new.w_qf = Matrix::from_fn(n * d_k, old.w_qf.cols(), |r, e| old.w_qf[(perm[r / d_k] * d_k + r % d_k, e)]);
    }
    let (w0, w1) = (weights(inst), weights(&p));
    let batch = inst.features.batch();
    let mut weight_err = 0.0f64;
    for m in 0..batch {
        for k in 0..n {
            weight_err = weight_err.max((w1.beta[(m, k)] - w0.beta[(m, perm[k])]).abs());
            for l in 0..n {
                weight_err = weight_err.max((w1.alpha[k][(m, l)] - w0.alpha[perm[k]][(m, perm[l])]).abs());
            }
        }
    }
    (weight_err, max_abs_diff(&w0.y, &w1.y))
}

/// Smallest norm product entering any cosine of either branch, over heads, samples and domains.
pub fn min_cosine_norm_product(inst: &Instance) -> f64 {
    let n = inst.features.num_domains();
    let batch = inst.features.batch();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst = f64::INFINITY;
    for head in &inst.params.heads {
        let keys: Vec<Matrix<f64>> = inst.features.per_domain.iter().map(|phi| matmul(phi, &head.w_f).unwrap()).collect();
        let concat: Vec<&Matrix<f64>> = inst.features.per_domain.iter().collect();
        let query = matmul(&Matrix::hcat(&concat).unwrap(), &head.w_qf).unwrap();
        let w_o = head.w_o.as_ref().unwrap();
        for i in 0..n {
            let outs: Vec<Matrix<f64>> = inst.heads.iter().map(|h| h.classify(&inst.features.per_domain[i]).unwrap()).collect();
            for m in 0..batch {
                let k = norm(keys[i].row(m));
                worst = worst.min(norm(query.row(m)) * k);
                for o in &outs {
                    let e = matmul(&Matrix::row_vector(o.row(m)), w_o).unwrap();
                    worst = worst.min(k * norm(e.data()));
                }
            }
        }
    }
    worst
}
