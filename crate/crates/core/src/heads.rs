//! Source-model heads: trainable bottleneck (affine + batch norm) in front of a frozen classifier.

use crate::error::{Error, Result};
use crate::numerics::{
    batchnorm_eval, batchnorm_train, matmul, matmul_nt, BnCache, BnMode, BnRunning, Matrix,
};
use crate::scalar::Scalar;

/// Default bottleneck width.
pub const DEFAULT_BOTTLENECK_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SourceHeadParams<T> {
    pub domain_name: String,
    /// `d_backbone × d_k`
    pub bottleneck_weight: Matrix<T>,
    pub bottleneck_bias: Vec<T>,
    pub bn_scale: Vec<T>,
    pub bn_shift: Vec<T>,
    pub bn_running: BnRunning<T>,
    /// `C × d_k`, frozen.
    pub classifier_weight: Matrix<T>,
    /// Frozen.
    pub classifier_bias: Vec<T>,
}

impl<T: Scalar> SourceHeadParams<T> {
    /// Identity-like head: zero biases, unit BN scale, standard running statistics.
    pub fn new(
        domain_name: impl Into<String>,
        bottleneck_weight: Matrix<T>,
        classifier_weight: Matrix<T>,
    ) -> Result<Self> {
        let d_k = bottleneck_weight.cols();
        let classes = classifier_weight.rows();
        let head = Self {
            domain_name: domain_name.into(),
            bottleneck_weight,
            bottleneck_bias: vec![T::zero(); d_k],
            bn_scale: vec![T::one(); d_k],
            bn_shift: vec![T::zero(); d_k],
            bn_running: BnRunning::new(d_k),
            classifier_weight,
            classifier_bias: vec![T::zero(); classes],
        };
        head.validate()?;
        Ok(head)
    }

    pub fn d_backbone(&self) -> usize {
        self.bottleneck_weight.rows()
    }

    pub fn d_k(&self) -> usize {
        self.bottleneck_weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d_k = self.d_k();
        let vectors = [
            ("bottleneck_bias", self.bottleneck_bias.len()),
            ("bn_scale", self.bn_scale.len()),
            ("bn_shift", self.bn_shift.len()),
            ("bn_running_mean", self.bn_running.mean.len()),
            ("bn_running_var", self.bn_running.var.len()),
        ];
        for (name, len) in vectors {
            if len != d_k {
                return Err(Error::contract(
                    "SourceHeadParams",
                    format!("{}: {name} has length {len}, expected d_k = {d_k}", self.domain_name),
                ));
            }
        }
        if self.classifier_weight.cols() != d_k {
            return Err(Error::ShapeMismatch {
                op: "SourceHeadParams classifier",
                left: self.bottleneck_weight.shape(),
                right: self.classifier_weight.shape(),
            });
        }
        if self.classifier_bias.len() != self.num_classes() {
            return Err(Error::contract(
                "SourceHeadParams",
                format!("{}: classifier bias length mismatch", self.domain_name),
            ));
        }
        if self.bn_running.var.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::contract(
                "SourceHeadParams",
                format!("{}: running variance must be positive", self.domain_name),
            ));
        }
        Ok(())
    }

    /// Frozen classifier applied to bottleneck features: `φ Gᵀ + c`.
    pub fn classify(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        let mut logits = matmul_nt(features, &self.classifier_weight)?;
        logits.add_row_broadcast(&self.classifier_bias)?;
        Ok(logits)
    }

    pub(crate) fn affine(&self, backbone_feats: &Matrix<T>) -> Result<Matrix<T>> {
        let mut z = matmul(backbone_feats, &self.bottleneck_weight)?;
        z.add_row_broadcast(&self.bottleneck_bias)?;
        Ok(z)
    }
}

/// Bottleneck output plus whatever the backward pass needs from it.
#[derive(Clone, Debug)]
pub struct BottleneckPass<T> {
    pub features: Matrix<T>,
    /// Present only for train-mode passes.
    pub bn_cache: Option<BnCache<T>>,
}

/// Affine map followed by batch normalization. Train mode uses batch statistics and
/// returns them in the cache; running statistics are updated separately by the caller.
pub fn bottleneck_pass<T: Scalar>(
    head: &SourceHeadParams<T>,
    backbone_feats: &Matrix<T>,
    mode: BnMode,
) -> Result<BottleneckPass<T>> {
    let z = head.affine(backbone_feats)?;
    match mode {
        BnMode::Train => {
            let (features, cache) =
                batchnorm_train(&z, &head.bn_scale, &head.bn_shift, head.bn_running.eps)?;
            Ok(BottleneckPass {
                features,
                bn_cache: Some(cache),
            })
        }
        BnMode::Eval => Ok(BottleneckPass {
            features: batchnorm_eval(&z, &head.bn_scale, &head.bn_shift, &head.bn_running)?,
            bn_cache: None,
        }),
    }
}

/// `φ = BN(x W + b)`; in train mode the head's running statistics absorb this batch.
pub fn bottleneck_forward<T: Scalar>(
    head: &mut SourceHeadParams<T>,
    backbone_feats: &Matrix<T>,
    mode: BnMode,
) -> Result<Matrix<T>> {
    let pass = bottleneck_pass(head, backbone_feats, mode)?;
    if let Some(cache) = &pass.bn_cache {
        head.bn_running.update(cache);
    }
    Ok(pass.features)
}

/// Bottleneck features of every source domain, aligned by sample.
#[derive(Clone, Debug)]
pub struct BottleneckFeatures<T> {
    pub per_domain: Vec<Matrix<T>>,
}

impl<T: Scalar> BottleneckFeatures<T> {
    pub fn new(per_domain: Vec<Matrix<T>>) -> Result<Self> {
        let batch = per_domain.first().map_or(0, Matrix::rows);
        if per_domain.iter().any(|m| m.rows() != batch) {
            return Err(Error::contract("BottleneckFeatures", "domains disagree on batch size"));
        }
        Ok(Self { per_domain })
    }

    pub fn num_domains(&self) -> usize {
        self.per_domain.len()
    }

    pub fn batch(&self) -> usize {
        self.per_domain.first().map_or(0, Matrix::rows)
    }
}

/// Checks that all heads can be mixed: equal `d_k` and class count.
pub fn check_heads_compatible<T: Scalar>(heads: &[SourceHeadParams<T>]) -> Result<()> {
    let first = heads
        .first()
        .ok_or_else(|| Error::contract("heads", "at least one source head required"))?;
    for h in heads {
        h.validate()?;
        if h.d_k() != first.d_k() || h.num_classes() != first.num_classes() {
            return Err(Error::contract(
                "heads",
                format!(
                    "{} has d_k={} C={}, but {} has d_k={} C={}",
                    h.domain_name,
                    h.d_k(),
                    h.num_classes(),
                    first.domain_name,
                    first.d_k(),
                    first.num_classes()
                ),
            ));
        }
    }
    Ok(())
}

/// Cross-domain outputs for source feature `i`: entry `j` is classifier `j` applied to `φ^i`
/// (a `batch × C` matrix per classifier).
pub fn cross_domain_outputs<T: Scalar>(
    features: &BottleneckFeatures<T>,
    heads: &[SourceHeadParams<T>],
    i: usize,
) -> Result<Vec<Matrix<T>>> {
    check_heads_compatible(heads)?;
    let phi = features
        .per_domain
        .get(i)
        .ok_or_else(|| Error::contract("cross_domain_outputs", format!("domain index {i} out of range")))?;
    heads.iter().map(|h| h.classify(phi)).collect()
}
