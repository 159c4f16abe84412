//! Dynamic-cluster pseudo labels: per-domain soft class centroids, recombined per sample with
//! that sample's domain weights, then cosine-nearest assignment.

use crate::error::{Error, Result};
use crate::heads::BottleneckFeatures;
use crate::numerics::{cosine, stable_softmax_rows, Matrix};
use crate::scalar::Scalar;

/// Soft class centroids for every domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids<T> {
    /// One `C × d_k` matrix per domain.
    pub per_domain: Vec<Matrix<T>>,
    /// `true` for classes that received zero soft mass; their rows are zero and never assigned.
    pub empty: Vec<bool>,
}

impl<T> Centroids<T> {
    pub fn num_classes(&self) -> usize {
        self.empty.len()
    }

    pub fn has_assignable_class(&self) -> bool {
        self.empty.iter().any(|e| !e)
    }
}

/// Labels over the full target set plus the centroids that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidState<T> {
    pub centroids: Centroids<T>,
    /// Number of refreshes performed so far.
    pub refresh_epoch: usize,
    pub labels: Vec<usize>,
}

impl<T: Scalar> CentroidState<T> {
    /// Recompute centroids and labels from a full pass over the target set.
    ///
    /// `y_final` are ensemble logits and `beta` the per-sample domain weights of that pass. When
    /// no class has mass the previous labels are kept.
    pub fn refresh(
        previous: Option<&Self>,
        features: &BottleneckFeatures<T>,
        y_final: &Matrix<T>,
        beta: &Matrix<T>,
    ) -> Result<Self> {
        let probs = stable_softmax_rows(y_final)?;
        let centroids = compute_centroids(features, &probs)?;
        let refresh_epoch = previous.map_or(1, |p| p.refresh_epoch + 1);
        let labels = if centroids.has_assignable_class() {
            assign_labels(features, beta, &centroids)?
        } else if let Some(p) = previous {
            p.labels.clone()
        } else {
            return Err(Error::contract("refresh", "no class received any soft mass"));
        };
        Ok(Self {
            centroids,
            refresh_epoch,
            labels,
        })
    }

    /// Fraction of labels unchanged relative to `previous`.
    pub fn agreement(&self, previous: &Self) -> f64 {
        label_agreement(&previous.labels, &self.labels)
    }
}

pub fn label_agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

/// `μ_c^i = Σ_m p_{m,c} φ^{mi} / Σ_m p_{m,c}` over every sample of the target set.
pub fn compute_centroids<T: Scalar>(features: &BottleneckFeatures<T>, probs: &Matrix<T>) -> Result<Centroids<T>> {
    let n_samples = features.batch();
    if probs.rows() != n_samples {
        return Err(Error::ShapeMismatch {
            op: "compute_centroids",
            left: probs.shape(),
            right: (n_samples, 0),
        });
    }
    let classes = probs.cols();
    let mass: Vec<T> = probs.column_sums();
    let empty: Vec<bool> = mass.iter().map(|&w| !(w > T::zero())).collect();
    let mut per_domain = Vec::with_capacity(features.num_domains());
    for phi in &features.per_domain {
        let d_k = phi.cols();
        let mut mu = Matrix::zeros(classes, d_k);
        for m in 0..n_samples {
            let row = phi.row(m);
            for c in 0..classes {
                let p = probs[(m, c)];
                for (acc, &v) in mu.row_mut(c).iter_mut().zip(row) {
                    *acc += p * v;
                }
            }
        }
        for c in 0..classes {
            if empty[c] {
                mu.row_mut(c).iter_mut().for_each(|v| *v = T::zero());
            } else {
                let inv = T::one() / mass[c];
                mu.row_mut(c).iter_mut().for_each(|v| *v *= inv);
            }
        }
        if !mu.is_finite() {
            return Err(Error::NonFinite {
                node: "centroids".into(),
            });
        }
        per_domain.push(mu);
    }
    Ok(Centroids { per_domain, empty })
}

fn check_weights<T: Scalar>(op: &'static str, beta: &[T], n: usize) -> Result<()> {
    if beta.len() != n {
        return Err(Error::contract(op, format!("{} domain weights for {n} domains", beta.len())));
    }
    let sum: T = beta.iter().copied().sum();
    if beta.iter().any(|&b| b < T::zero()) || (sum - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::contract(op, "domain weights are not on the simplex"));
    }
    Ok(())
}

/// `μ̃_c = Σ_i β_i μ_c^i` for one sample; `C × d_k`.
pub fn dynamic_centroid<T: Scalar>(centroids: &Centroids<T>, beta: &[T]) -> Result<Matrix<T>> {
    check_weights("dynamic_centroid", beta, centroids.per_domain.len())?;
    let first = &centroids.per_domain[0];
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (mu, &b) in centroids.per_domain.iter().zip(beta) {
        for (o, &v) in out.data_mut().iter_mut().zip(mu.data()) {
            *o += b * v;
        }
    }
    Ok(out)
}

/// `φ̃ = Σ_i β_i φ^i` for one sample, given that sample's bottleneck feature per domain.
pub fn dynamic_feature<T: Scalar>(phi: &[&[T]], beta: &[T]) -> Result<Vec<T>> {
    check_weights("dynamic_feature", beta, phi.len())?;
    let d_k = phi[0].len();
    let mut out = vec![T::zero(); d_k];
    for (f, &b) in phi.iter().zip(beta) {
        if f.len() != d_k {
            return Err(Error::contract("dynamic_feature", "feature widths differ across domains"));
        }
        for (o, &v) in out.iter_mut().zip(*f) {
            *o += b * v;
        }
    }
    Ok(out)
}

/// Index of the highest cosine against the non-empty rows of `mu`; the lowest index wins ties.
pub fn nearest_class<T: Scalar>(feature: &[T], mu: &Matrix<T>, empty: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for c in 0..mu.rows() {
        if empty[c] {
            continue;
        }
        let s = cosine(feature, mu.row(c));
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
}

/// `y_m = argmax_c cos(φ̃_m, μ̃_c^m)` for every sample.
pub fn assign_labels<T: Scalar>(
    features: &BottleneckFeatures<T>,
    beta: &Matrix<T>,
    centroids: &Centroids<T>,
) -> Result<Vec<usize>> {
    let n = features.num_domains();
    if beta.shape() != (features.batch(), n) || centroids.per_domain.len() != n {
        return Err(Error::ShapeMismatch {
            op: "assign_labels",
            left: beta.shape(),
            right: (features.batch(), n),
        });
    }
    if !centroids.has_assignable_class() {
        return Err(Error::contract("assign_labels", "every class is empty"));
    }
    (0..features.batch())
        .map(|m| {
            let b = beta.row(m);
            let rows: Vec<&[T]> = features.per_domain.iter().map(|p| p.row(m)).collect();
            let phi = dynamic_feature(&rows, b)?;
            let mu = dynamic_centroid(centroids, b)?;
            Ok(nearest_class(&phi, &mu, &centroids.empty).expect("non-empty class exists"))
        })
        .collect()
}
