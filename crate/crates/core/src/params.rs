//! Named parameter tensors, their arithmetic, and the `FFPS` payload format.
//!
//! Payload layout (all integers little-endian):
//!
//! ```text
//! "FFPS" | version u16 | entry count u32
//! per entry: name len u16 | name (UTF-8) | kind u8 | rank u8 | dims u32 * rank | values f32 * prod(dims)
//! CRC32 (IEEE) of every preceding byte, u32
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAYLOAD_MAGIC: [u8; 4] = *b"FFPS";
pub const PAYLOAD_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("non-finite value in tensor `{0}`")]
    NonFiniteResult(String),
    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("malformed payload at byte {offset}: {reason}")]
    MalformedPayload { offset: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ParamsError>;

/// Whether a tensor is updated by the optimizer or carried as model state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorKind {
    Trainable,
    PersistentBuffer,
}

impl TensorKind {
    fn code(self) -> u8 {
        match self {
            TensorKind::Trainable => 0,
            TensorKind::PersistentBuffer => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TensorKind::Trainable),
            1 => Some(TensorKind::PersistentBuffer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    kind: TensorKind,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>, kind: TensorKind) -> Result<Self> {
        if shape.contains(&0) {
            return Err(ParamsError::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} has a zero dimension"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(ParamsError::InvalidTensor {
                name: String::new(),
                reason: format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            });
        }
        Ok(Self { shape, values, kind })
    }

    pub fn trainable(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, values, TensorKind::Trainable)
    }

    pub fn buffer(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, values, TensorKind::PersistentBuffer)
    }

    pub fn zeros(shape: Vec<usize>, kind: TensorKind) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n], kind }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn kind(&self) -> TensorKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn same_layout(&self, other: &Tensor) -> bool {
        self.kind == other.kind && self.shape == other.shape
    }
}

/// An ordered set of named tensors. Iteration is lexicographic by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(ParamsError::InvalidTensor { name, reason: "name must be 1..=65535 bytes".into() });
        }
        if tensor.shape.len() > u8::MAX as usize {
            return Err(ParamsError::InvalidTensor { name, reason: "rank exceeds 255".into() });
        }
        if self.entries.contains_key(&name) {
            return Err(ParamsError::InvalidTensor { name, reason: "duplicate tensor name".into() });
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Builder-style insert for tests and fixtures; panics on invalid input.
    pub fn with(mut self, name: &str, shape: Vec<usize>, values: Vec<f32>, kind: TensorKind) -> Self {
        let tensor = Tensor::new(shape, values, kind).expect("valid tensor");
        self.insert(name, tensor).expect("unique name");
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    fn filtered(&self, kind: TensorKind) -> ParameterSet {
        ParameterSet {
            entries: self.entries.iter().filter(|(_, t)| t.kind == kind).map(|(n, t)| (n.clone(), t.clone())).collect(),
        }
    }

    pub fn trainable(&self) -> ParameterSet {
        self.filtered(TensorKind::Trainable)
    }

    pub fn buffers(&self) -> ParameterSet {
        self.filtered(TensorKind::PersistentBuffer)
    }

    pub fn has_buffers(&self) -> bool {
        self.entries.values().any(|t| t.kind == TensorKind::PersistentBuffer)
    }

    /// Union of two sets with disjoint names.
    pub fn merged(&self, other: &ParameterSet) -> Result<ParameterSet> {
        let mut out = self.clone();
        for (name, tensor) in &other.entries {
            out.insert(name.clone(), tensor.clone())?;
        }
        Ok(out)
    }

    /// Replaces every entry of `self` that also appears in `other`.
    pub fn overwrite_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, tensor) in &other.entries {
            let slot = self
                .entries
                .get_mut(name)
                .ok_or_else(|| ParamsError::StructureMismatch(format!("unknown tensor `{name}`")))?;
            if !slot.same_layout(tensor) {
                return Err(ParamsError::StructureMismatch(format!("layout of `{name}` differs")));
            }
            slot.values.clone_from(&tensor.values);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone(), t.kind))).collect(),
        }
    }

    /// Checks that names, shapes and kinds agree entry by entry.
    pub fn check_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(ParamsError::StructureMismatch(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(ParamsError::StructureMismatch(format!("`{na}` vs `{nb}`")));
            }
            if !ta.same_layout(tb) {
                return Err(ParamsError::StructureMismatch(format!(
                    "`{na}`: {:?}/{:?} vs {:?}/{:?}",
                    ta.shape, ta.kind, tb.shape, tb.kind
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    fn ensure_finite(self) -> Result<Self> {
        for (name, t) in &self.entries {
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(ParamsError::NonFiniteResult(name.clone()));
            }
        }
        Ok(self)
    }

    /// Elementwise `a * x + y`.
    pub fn axpy(a: f64, x: &ParameterSet, y: &ParameterSet) -> Result<ParameterSet> {
        x.check_structure(y)?;
        let entries = x
            .entries
            .iter()
            .zip(y.entries.values())
            .map(|((name, tx), ty)| {
                let values =
                    tx.values.iter().zip(&ty.values).map(|(&xv, &yv)| (a * xv as f64 + yv as f64) as f32).collect();
                (name.clone(), Tensor { shape: tx.shape.clone(), values, kind: tx.kind })
            })
            .collect();
        ParameterSet { entries }.ensure_finite()
    }

    /// `x - y`, elementwise.
    pub fn sub(x: &ParameterSet, y: &ParameterSet) -> Result<ParameterSet> {
        Self::axpy(-1.0, y, x)
    }

    pub fn scaled(&self, a: f64) -> Result<ParameterSet> {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let values = t.values.iter().map(|&v| (a * v as f64) as f32).collect();
                (n.clone(), Tensor { shape: t.shape.clone(), values, kind: t.kind })
            })
            .collect();
        ParameterSet { entries }.ensure_finite()
    }

    /// `Σ_k coeff_k * set_k` accumulated in f64, rounded once to f32.
    pub fn linear_combination(terms: &[(f64, &ParameterSet)]) -> Result<ParameterSet> {
        let (_, first) =
            terms.first().ok_or_else(|| ParamsError::StructureMismatch("empty linear combination".into()))?;
        for (_, set) in &terms[1..] {
            first.check_structure(set)?;
        }
        let mut out = ParameterSet::new();
        for (name, tensor) in &first.entries {
            let mut acc = vec![0.0f64; tensor.len()];
            for (coeff, set) in terms {
                for (slot, &v) in acc.iter_mut().zip(&set.entries[name].values) {
                    *slot += coeff * v as f64;
                }
            }
            let values = acc.into_iter().map(|v| v as f32).collect();
            out.entries.insert(name.clone(), Tensor { shape: tensor.shape.clone(), values, kind: tensor.kind });
        }
        out.ensure_finite()
    }

    /// Flattens every entry, in name order, to f64.
    pub fn to_flat_f64(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.values.iter().map(|&v| v as f64)).collect()
    }

    /// Inverse of [`to_flat_f64`](Self::to_flat_f64) using `self` as the layout template.
    pub fn with_flat_f64(&self, flat: &[f64]) -> Result<ParameterSet> {
        if flat.len() != self.num_values() {
            return Err(ParamsError::StructureMismatch(format!(
                "flat vector has {} values, layout needs {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        let mut out = self.clone();
        for tensor in out.entries.values_mut() {
            for v in tensor.values.iter_mut() {
                *v = flat[offset] as f32;
                offset += 1;
            }
        }
        out.ensure_finite()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.num_values() * 4 + self.entries.len() * 24);
        out.extend_from_slice(&PAYLOAD_MAGIC);
        out.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.kind.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<ParameterSet> {
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(malformed(bytes.len(), "payload shorter than header and checksum"));
        }
        let body_len = bytes.len() - 4;
        let stored_crc = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let mut r = Reader { buf: &bytes[..body_len], pos: 0 };
        if r.take(4)? != PAYLOAD_MAGIC {
            return Err(malformed(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != PAYLOAD_VERSION {
            return Err(malformed(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let entry_start = r.pos;
            let name_len = r.u16()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| malformed(entry_start + 2, "tensor name is not UTF-8"))?
                .to_owned();
            let kind_pos = r.pos;
            let kind = TensorKind::from_code(r.u8()?).ok_or_else(|| malformed(kind_pos, "unknown tensor kind"))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| malformed(r.pos, "tensor length exceeds payload"))?;
            let raw = r.take(n * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let tensor = Tensor::new(shape, values, kind).map_err(|e| malformed(entry_start, &e.to_string()))?;
            set.insert(name, tensor).map_err(|e| malformed(entry_start, &e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(malformed(r.pos, "trailing bytes before checksum"));
        }
        if crc32fast::hash(&bytes[..body_len]) != stored_crc {
            return Err(malformed(body_len, "checksum mismatch"));
        }
        Ok(set)
    }
}

fn malformed(offset: usize, reason: &str) -> ParamsError {
    ParamsError::MalformedPayload { offset, reason: reason.to_owned() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(malformed(self.pos, "truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// `‖x − reference‖²` over trainable entries, accumulated in f64.
pub fn l2_norm_sq(x: &ParameterSet, reference: &ParameterSet) -> Result<f64> {
    let xt = x.trainable();
    let rt = reference.trainable();
    xt.check_structure(&rt)?;
    Ok(xt
        .entries
        .values()
        .zip(rt.entries.values())
        .flat_map(|(a, b)| a.values.iter().zip(&b.values))
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

/// A client's update expressed as a difference from the round's global model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDelta {
    pub delta: ParameterSet,
    pub source_client: String,
    pub num_samples: u64,
    pub round: u32,
}

impl ModelDelta {
    /// `local − global` over the trainable subset of `global`.
    pub fn between(
        local: &ParameterSet,
        global: &ParameterSet,
        source_client: impl Into<String>,
        num_samples: u64,
        round: u32,
    ) -> Result<Self> {
        let delta = ParameterSet::sub(&local.trainable(), &global.trainable())?;
        Ok(Self { delta, source_client: source_client.into(), num_samples, round })
    }
}

/// Per-client and global Scaffold correction vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariates {
    client_variates: BTreeMap<String, ParameterSet>,
    global_variate: ParameterSet,
}

impl ControlVariates {
    /// Zero variates for every registered client, shaped like `template`'s trainable subset.
    pub fn zeros<I, S>(clients: I, template: &ParameterSet) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let zero = template.trainable().zeros_like();
        Self { client_variates: clients.into_iter().map(|c| (c.into(), zero.clone())).collect(), global_variate: zero }
    }

    pub fn from_parts(client_variates: BTreeMap<String, ParameterSet>, global_variate: ParameterSet) -> Result<Self> {
        for (client, v) in &client_variates {
            v.check_structure(&global_variate)
                .map_err(|e| ParamsError::StructureMismatch(format!("variate of {client}: {e}")))?;
        }
        Ok(Self { client_variates, global_variate })
    }

    pub fn client(&self, id: &str) -> Option<&ParameterSet> {
        self.client_variates.get(id)
    }

    pub fn clients(&self) -> &BTreeMap<String, ParameterSet> {
        &self.client_variates
    }

    pub fn global(&self) -> &ParameterSet {
        &self.global_variate
    }

    pub fn set_client(&mut self, id: &str, variate: ParameterSet) -> Result<()> {
        variate.check_structure(&self.global_variate)?;
        match self.client_variates.get_mut(id) {
            Some(slot) => {
                *slot = variate;
                Ok(())
            }
            None => Err(ParamsError::StructureMismatch(format!("client `{id}` has no variate"))),
        }
    }

    /// Recomputes the global variate as the plain mean over all registered clients.
    pub fn refresh_global(&mut self) -> Result<()> {
        if self.client_variates.is_empty() {
            return Ok(());
        }
        let weight = 1.0 / self.client_variates.len() as f64;
        let terms: Vec<(f64, &ParameterSet)> = self.client_variates.values().map(|v| (weight, v)).collect();
        self.global_variate = ParameterSet::linear_combination(&terms)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(name: &str, values: Vec<f32>) -> ParameterSet {
        let n = values.len();
        ParameterSet::new().with(name, vec![n], values, TensorKind::Trainable)
    }

    #[test]
    fn axpy_zero_scale_is_identity() {
        let p = single("t", vec![1.0, -2.5]);
        let x = single("t", vec![100.0, 7.0]);
        assert_eq!(ParameterSet::axpy(0.0, &x, &p).unwrap(), p);
    }

    #[test]
    fn axpy_elementwise_sum() {
        let out = ParameterSet::axpy(1.0, &single("t", vec![1.0, 2.0]), &single("t", vec![3.0, 4.0])).unwrap();
        assert_eq!(out.get("t").unwrap().values(), &[4.0, 6.0]);
    }

    #[test]
    fn axpy_self_cancellation() {
        let p = single("t", vec![1.25, -3.0, 9.5]);
        let out = ParameterSet::axpy(-1.0, &p, &p).unwrap();
        assert_eq!(out, p.zeros_like());
    }

    #[test]
    fn axpy_rejects_mismatched_structure() {
        let a = single("t", vec![1.0]);
        let b = single("u", vec![1.0]);
        assert!(matches!(ParameterSet::axpy(1.0, &a, &b), Err(ParamsError::StructureMismatch(_))));
        let c = ParameterSet::new().with("t", vec![1], vec![1.0], TensorKind::PersistentBuffer);
        assert!(matches!(ParameterSet::axpy(1.0, &a, &c), Err(ParamsError::StructureMismatch(_))));
        let d = single("t", vec![1.0, 2.0]);
        assert!(matches!(ParameterSet::axpy(1.0, &a, &d), Err(ParamsError::StructureMismatch(_))));
    }

    #[test]
    fn axpy_reports_overflow() {
        let a = single("t", vec![f32::MAX]);
        assert!(matches!(
            ParameterSet::axpy(4.0, &a, &a),
            Err(ParamsError::NonFiniteResult(name)) if name == "t"
        ));
    }

    #[test]
    fn norm_examples() {
        let p = single("t", vec![1.0, 2.0]);
        assert_eq!(l2_norm_sq(&p, &p).unwrap(), 0.0);
        assert_eq!(l2_norm_sq(&single("t", vec![3.0]), &single("t", vec![1.0])).unwrap(), 4.0);

        let x = ParameterSet::new().with("t", vec![2], vec![1.0, 2.0], TensorKind::Trainable).with(
            "u",
            vec![1],
            vec![0.0],
            TensorKind::PersistentBuffer,
        );
        let r = ParameterSet::new().with("t", vec![2], vec![0.0, 0.0], TensorKind::Trainable).with(
            "u",
            vec![1],
            vec![5.0],
            TensorKind::PersistentBuffer,
        );
        assert_eq!(l2_norm_sq(&x, &r).unwrap(), 5.0);
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(Tensor::trainable(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::trainable(vec![0], vec![]).is_err());
        let mut p = single("t", vec![1.0]);
        assert!(p.insert("t", Tensor::trainable(vec![1], vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn empty_set_round_trips_header_only() {
        let bytes = ParameterSet::new().serialize();
        assert_eq!(bytes.len(), 4 + 2 + 4 + 4);
        assert_eq!(&bytes[..4], b"FFPS");
        assert_eq!(ParameterSet::deserialize(&bytes).unwrap(), ParameterSet::new());
    }

    #[test]
    fn single_tensor_bit_exact_layout() {
        let p = single("w", vec![1.5, -2.0]);
        let bytes = p.serialize();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"FFPS");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(0);
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        let crc = crc32fast::hash(&expected);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(ParameterSet::deserialize(&bytes).unwrap(), p);
    }

    #[test]
    fn deserialize_reports_offsets() {
        let bytes = single("w", vec![1.0, 2.0]).serialize();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(ParameterSet::deserialize(&bad_magic), Err(ParamsError::MalformedPayload { offset: 0, .. })));
        let mut bad_crc = bytes.clone();
        let last = bad_crc.len() - 5;
        bad_crc[last] ^= 0xff;
        assert!(matches!(ParameterSet::deserialize(&bad_crc), Err(ParamsError::MalformedPayload { .. })));
        for cut in 0..bytes.len() {
            assert!(matches!(ParameterSet::deserialize(&bytes[..cut]), Err(ParamsError::MalformedPayload { .. })));
        }
    }

    #[test]
    fn variates_refresh_to_mean() {
        let template = single("t", vec![0.0]);
        let mut cv = ControlVariates::zeros(["a", "b"], &template);
        cv.set_client("a", single("t", vec![1.0])).unwrap();
        cv.set_client("b", single("t", vec![3.0])).unwrap();
        cv.refresh_global().unwrap();
        assert_eq!(cv.global().get("t").unwrap().values(), &[2.0]);
        assert!(cv.set_client("zzz", single("t", vec![1.0])).is_err());
    }

    fn arb_set() -> impl Strategy<Value = ParameterSet> {
        proptest::collection::btree_map("[a-z]{1,6}", (proptest::collection::vec(1usize..4, 1..3), any::<bool>()), 0..5)
            .prop_flat_map(|layout| {
                let parts: Vec<_> = layout
                    .into_iter()
                    .map(|(name, (shape, buffer))| {
                        let n: usize = shape.iter().product();
                        proptest::collection::vec(-1e3f32..1e3, n)
                            .prop_map(move |v| (name.clone(), shape.clone(), buffer, v))
                    })
                    .collect();
                parts
            })
            .prop_map(|parts| {
                let mut set = ParameterSet::new();
                for (name, shape, buffer, values) in parts {
                    let kind = if buffer { TensorKind::PersistentBuffer } else { TensorKind::Trainable };
                    set.insert(name, Tensor::new(shape, values, kind).unwrap()).unwrap();
                }
                set
            })
    }

    proptest! {
        #[test]
        fn serialize_round_trip(p in arb_set()) {
            prop_assert_eq!(ParameterSet::deserialize(&p.serialize()).unwrap(), p);
        }

        #[test]
        fn axpy_is_linear(p in arb_set(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let y = p.scaled(0.5).unwrap();
            let lhs = ParameterSet::axpy(a, &p, &ParameterSet::axpy(b, &p, &y).unwrap()).unwrap();
            let rhs = ParameterSet::axpy(a + b, &p, &y).unwrap();
            // Intermediates are stored as f32, so the tolerance is relative to
            // the magnitude of the operands rather than of the (possibly
            // cancelled) result.
            let xs = p.to_flat_f64();
            for ((l, r), x) in lhs.to_flat_f64().iter().zip(rhs.to_flat_f64()).zip(xs) {
                let scale = (a.abs() + b.abs() + 0.5) * x.abs();
                prop_assert!((l - r).abs() <= 1e-6 * scale.max(1.0));
            }
        }

        #[test]
        fn norm_zero_iff_equal(p in arb_set(), bump in 0.5f32..2.0) {
            prop_assert_eq!(l2_norm_sq(&p, &p).unwrap(), 0.0);
            let mut q = p.clone();
            let target = q.iter().find(|(_, t)| t.kind() == TensorKind::Trainable).map(|(n, _)| n.clone());
            if let Some(name) = target {
                q.get_mut(&name).unwrap().values_mut()[0] += bump;
                prop_assert!(l2_norm_sq(&q, &p).unwrap() > 0.0);
            }
        }
    }
}
