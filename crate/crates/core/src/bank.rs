//! Feature banks and the three little-endian file formats:
//!
//! * `FBNK`: sample-aligned frozen backbone features per domain, optional labels.
//! * `SHED`: source heads (bottleneck, batch norm, classifier) in `f32`.
//! * `ATNP`: trained attention parameters in `f64`.
//!
//! Writers go through a temporary file in the destination directory and a rename, so readers
//! never observe a partial file.

use std::io::Write;
use std::path::Path;

use crate::aten::{AttentionHead, BiAtenParams, EnsembleMode};
use crate::error::{Error, FormatError, Result};
use crate::heads::SourceHeadParams;
use crate::numerics::{BnRunning, Matrix};
use crate::scalar::Scalar;

pub const BANK_MAGIC: [u8; 4] = *b"FBNK";
pub const HEADS_MAGIC: [u8; 4] = *b"SHED";
pub const ATTENTION_MAGIC: [u8; 4] = *b"ATNP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainBlock<T> {
    pub name: String,
    /// `n_samples × d_backbone`; row `m` is target sample `m` in every block.
    pub features: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank<T> {
    pub n_classes: usize,
    pub domains: Vec<DomainBlock<T>>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Scalar> FeatureBank<T> {
    pub fn new(n_classes: usize, domains: Vec<DomainBlock<T>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let bank = Self {
            n_classes,
            domains,
            labels,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn n_samples(&self) -> usize {
        self.domains.first().map_or(0, |d| d.features.rows())
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::contract("FeatureBank", "no domains"));
        }
        if self.n_classes == 0 {
            return Err(Error::contract("FeatureBank", "zero classes"));
        }
        let n = self.n_samples();
        for d in &self.domains {
            if d.features.rows() != n {
                return Err(Error::contract(
                    "FeatureBank",
                    format!("domain {:?} has {} samples, expected {n}", d.name, d.features.rows()),
                ));
            }
            if !d.features.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("bank domain {:?}", d.name),
                });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::contract("FeatureBank", format!("{} labels for {n} samples", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= self.n_classes) {
                return Err(Error::contract("FeatureBank", format!("label {bad} outside [0, {})", self.n_classes)));
            }
        }
        Ok(())
    }

    /// Bank/heads consistency: one head per domain, matching backbone widths and class count.
    pub fn check_heads(&self, heads: &[SourceHeadParams<T>]) -> Result<()> {
        crate::heads::check_heads_compatible(heads)?;
        if heads.len() != self.n_domains() {
            return Err(Error::contract(
                "bank/heads",
                format!("{} heads for {} bank domains", heads.len(), self.n_domains()),
            ));
        }
        for (d, h) in self.domains.iter().zip(heads) {
            if d.features.cols() != h.d_backbone() {
                return Err(Error::contract(
                    "bank/heads",
                    format!("domain {:?}: bank width {} vs head input {}", d.name, d.features.cols(), h.d_backbone()),
                ));
            }
        }
        if heads[0].num_classes() != self.n_classes {
            return Err(Error::contract("bank/heads", "class count differs between bank and heads"));
        }
        Ok(())
    }

    /// Backbone blocks for the given sample indices, one matrix per domain.
    pub fn gather(&self, indices: &[usize]) -> Vec<Matrix<T>> {
        self.domains
            .iter()
            .map(|d| {
                let cols = d.features.cols();
                let mut out = Matrix::zeros(indices.len(), cols);
                for (r, &m) in indices.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(d.features.row(m));
                }
                out
            })
            .collect()
    }

    pub fn backbone(&self) -> Vec<Matrix<T>> {
        self.domains.iter().map(|d| d.features.clone()).collect()
    }
}

struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn new(magic: [u8; 4]) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::contract("encode", format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn name(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::contract("encode", "name longer than 65535 bytes"))?;
        self.buf.extend_from_slice(&len.to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn f32s<T: Scalar>(&mut self, vals: &[T]) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }

    fn f64s<T: Scalar>(&mut self, vals: &[T]) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self, FormatError> {
        let mut d = Self { bytes, pos: 0 };
        let found: [u8; 4] = d.take(4)?.try_into().expect("four bytes");
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(d)
    }

    fn take(&mut self, needed: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if needed > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + needed];
        self.pos += needed;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn count32(&mut self) -> Result<usize, FormatError> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn name(&mut self) -> Result<String, FormatError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Inconsistent("name is not valid UTF-8".into()))
    }

    fn byte_len(count: usize, width: usize) -> Result<usize, FormatError> {
        count
            .checked_mul(width)
            .ok_or_else(|| FormatError::Inconsistent(format!("element count {count} overflows")))
    }

    fn f32s<T: Scalar>(&mut self, count: usize) -> Result<Vec<T>, FormatError> {
        let raw = self.take(Self::byte_len(count, 4)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64))
            .collect())
    }

    fn f64s<T: Scalar>(&mut self, count: usize) -> Result<Vec<T>, FormatError> {
        let raw = self.take(Self::byte_len(count, 8)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("eight bytes"))))
            .collect())
    }

    fn matrix32<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<T>, FormatError> {
        let data = self.f32s(Self::byte_len(rows, cols)?)?;
        Ok(Matrix::new(rows, cols, data).expect("length checked"))
    }

    fn matrix64<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<T>, FormatError> {
        let data = self.f64s(Self::byte_len(rows, cols)?)?;
        Ok(Matrix::new(rows, cols, data).expect("length checked"))
    }

    fn finish(self) -> Result<(), FormatError> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::Inconsistent(format!("{rest} trailing bytes")));
        }
        Ok(())
    }
}

pub fn encode_bank<T: Scalar>(bank: &FeatureBank<T>) -> Result<Vec<u8>> {
    bank.validate()?;
    let mut e = Encoder::new(BANK_MAGIC);
    e.u32(bank.n_domains())?;
    e.u64(bank.n_samples());
    e.u32(bank.n_classes)?;
    e.u8(u8::from(bank.labels.is_some()));
    for d in &bank.domains {
        e.name(&d.name)?;
        e.u32(d.features.cols())?;
        e.f32s(d.features.data());
    }
    if let Some(labels) = &bank.labels {
        for &y in labels {
            e.u32(y)?;
        }
    }
    Ok(e.buf)
}

pub fn decode_bank<T: Scalar>(bytes: &[u8]) -> Result<FeatureBank<T>> {
    let mut d = Decoder::open(bytes, BANK_MAGIC)?;
    let n_domains = d.count32()?;
    let n_samples = usize::try_from(d.u64()?).map_err(|_| FormatError::Inconsistent("sample count overflows".into()))?;
    let n_classes = d.count32()?;
    let has_labels = match d.u8()? {
        0 => false,
        1 => true,
        other => return Err(FormatError::Inconsistent(format!("label flag {other}")).into()),
    };
    if n_domains == 0 {
        return Err(FormatError::Inconsistent("zero domains".into()).into());
    }
    let mut domains = Vec::with_capacity(n_domains.min(1024));
    for _ in 0..n_domains {
        let name = d.name()?;
        let width = d.count32()?;
        let features = d.matrix32(n_samples, width)?;
        domains.push(DomainBlock { name, features });
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n_samples.min(1 << 20));
        for _ in 0..n_samples {
            let y = d.count32()?;
            if y >= n_classes {
                return Err(FormatError::Inconsistent(format!("label {y} outside [0, {n_classes})")).into());
            }
            labels.push(y);
        }
        Some(labels)
    } else {
        None
    };
    d.finish()?;
    FeatureBank::new(n_classes, domains, labels)
}

pub fn encode_heads<T: Scalar>(heads: &[SourceHeadParams<T>]) -> Result<Vec<u8>> {
    crate::heads::check_heads_compatible(heads)?;
    let mut e = Encoder::new(HEADS_MAGIC);
    e.u32(heads.len())?;
    e.u32(heads[0].num_classes())?;
    e.u32(heads[0].d_k())?;
    for h in heads {
        e.name(&h.domain_name)?;
        e.u32(h.d_backbone())?;
        e.f32s(&[h.bn_running.eps]);
        e.f32s(h.bottleneck_weight.data());
        e.f32s(&h.bottleneck_bias);
        e.f32s(&h.bn_scale);
        e.f32s(&h.bn_shift);
        e.f32s(&h.bn_running.mean);
        e.f32s(&h.bn_running.var);
        e.f32s(h.classifier_weight.data());
        e.f32s(&h.classifier_bias);
    }
    Ok(e.buf)
}

pub fn decode_heads<T: Scalar>(bytes: &[u8]) -> Result<Vec<SourceHeadParams<T>>> {
    let mut d = Decoder::open(bytes, HEADS_MAGIC)?;
    let n_heads = d.count32()?;
    let classes = d.count32()?;
    let d_k = d.count32()?;
    if n_heads == 0 {
        return Err(FormatError::Inconsistent("zero heads".into()).into());
    }
    let mut heads = Vec::with_capacity(n_heads.min(1024));
    for _ in 0..n_heads {
        let domain_name = d.name()?;
        let d_bb = d.count32()?;
        let eps = d.f32s::<T>(1)?[0];
        let bottleneck_weight = d.matrix32(d_bb, d_k)?;
        let bottleneck_bias = d.f32s(d_k)?;
        let bn_scale = d.f32s(d_k)?;
        let bn_shift = d.f32s(d_k)?;
        let mut bn_running = BnRunning::new(d_k);
        bn_running.eps = eps;
        bn_running.mean = d.f32s(d_k)?;
        bn_running.var = d.f32s(d_k)?;
        let classifier_weight = d.matrix32(classes, d_k)?;
        let classifier_bias = d.f32s(classes)?;
        let head = SourceHeadParams {
            domain_name,
            bottleneck_weight,
            bottleneck_bias,
            bn_scale,
            bn_shift,
            bn_running,
            classifier_weight,
            classifier_bias,
        };
        head.validate()?;
        heads.push(head);
    }
    d.finish()?;
    Ok(heads)
}

pub fn encode_attention<T: Scalar>(params: &BiAtenParams<T>) -> Result<Vec<u8>> {
    params.validate()?;
    let mut e = Encoder::new(ATTENTION_MAGIC);
    e.u8(match params.mode {
        EnsembleMode::BiAten => 0,
        EnsembleMode::Aten => 1,
    });
    for v in [params.n_domains, params.n_classes, params.d_k, params.d_emb, params.num_heads()] {
        e.u32(v)?;
    }
    for h in &params.heads {
        if let Some(w_o) = &h.w_o {
            e.f64s(w_o.data());
        }
        e.f64s(h.w_f.data());
        e.f64s(h.w_qf.data());
    }
    Ok(e.buf)
}

pub fn decode_attention<T: Scalar>(bytes: &[u8]) -> Result<BiAtenParams<T>> {
    let mut d = Decoder::open(bytes, ATTENTION_MAGIC)?;
    let mode = match d.u8()? {
        0 => EnsembleMode::BiAten,
        1 => EnsembleMode::Aten,
        other => return Err(FormatError::Inconsistent(format!("ensemble mode tag {other}")).into()),
    };
    let n = d.count32()?;
    let classes = d.count32()?;
    let d_k = d.count32()?;
    let d_emb = d.count32()?;
    let n_heads = d.count32()?;
    let mut heads = Vec::with_capacity(n_heads.min(1024));
    for _ in 0..n_heads {
        let w_o = match mode {
            EnsembleMode::BiAten => Some(d.matrix64(classes, d_emb)?),
            EnsembleMode::Aten => None,
        };
        let w_f = d.matrix64(d_k, d_emb)?;
        let w_qf = d.matrix64(Decoder::byte_len(n, d_k)?, d_emb)?;
        heads.push(AttentionHead { w_o, w_f, w_qf });
    }
    d.finish()?;
    let params = BiAtenParams {
        mode,
        n_domains: n,
        n_classes: classes,
        d_k,
        d_emb,
        heads,
    };
    params.validate()?;
    Ok(params)
}

/// Writes `bytes` to `path` via a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_bank<T: Scalar>(path: &Path, bank: &FeatureBank<T>) -> Result<()> {
    write_atomic(path, &encode_bank(bank)?)
}

pub fn read_bank<T: Scalar>(path: &Path) -> Result<FeatureBank<T>> {
    decode_bank(&std::fs::read(path)?)
}

pub fn write_heads<T: Scalar>(path: &Path, heads: &[SourceHeadParams<T>]) -> Result<()> {
    write_atomic(path, &encode_heads(heads)?)
}

pub fn read_heads<T: Scalar>(path: &Path) -> Result<Vec<SourceHeadParams<T>>> {
    decode_heads(&std::fs::read(path)?)
}

pub fn write_attention<T: Scalar>(path: &Path, params: &BiAtenParams<T>) -> Result<()> {
    write_atomic(path, &encode_attention(params)?)
}

pub fn read_attention<T: Scalar>(path: &Path) -> Result<BiAtenParams<T>> {
    decode_attention(&std::fs::read(path)?)
}
