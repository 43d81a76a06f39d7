//! Flat parameter vectors and the numeric primitives shared by every aggregator.
//!
//! A [`ParamVector`] is a flat run of `f64` values plus an ordered manifest of
//! named tensors. Aggregators only ever see the flat values; the manifest is
//! carried along so that two vectors can be checked for compatibility and so
//! that a model can reinterpret the values as its own tensors.
//!
//! The on-disk encoding is little-endian throughout:
//!
//! ```text
//! "FPV1" | version u16 | entry count u32
//!   | per entry: name len u16, UTF-8 name, rank u8, dims u32 * rank
//!   | value count u64 | values f64 * count
//! ```

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FPV1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("incompatible shapes: parameter manifests differ")]
    IncompatibleShapes,
    #[error("empty input: at least one term is required")]
    EmptyInput,
    #[error("numeric overflow at element {index}")]
    NumericOverflow { index: usize },
    #[error("non-finite coefficient at term {index}")]
    NonFiniteCoefficient { index: usize },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("manifest describes {expected} elements but {actual} values were supplied")]
    ManifestLength { expected: usize, actual: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("decoded non-finite value at element {index}")]
    DecodedNonFinite { index: usize },
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("manifest entry `{0}` cannot be encoded")]
    Unencodable(String),
}

pub type Result<T, E = ParamError> = std::result::Result<T, E>;

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<u32>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dims: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            dims,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Flat `f64` parameters with a shape manifest. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    manifest: Vec<TensorSpec>,
}

impl ParamVector {
    /// Builds a vector, checking the manifest length and finiteness invariants.
    pub fn new(manifest: Vec<TensorSpec>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = manifest.iter().map(TensorSpec::numel).sum();
        if expected != values.len() {
            return Err(ParamError::ManifestLength {
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite { index });
        }
        Ok(Self { values, manifest })
    }

    /// Single unnamed 1-D tensor; handy for tests and toy aggregations.
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        let manifest = vec![TensorSpec::new("flat", vec![values.len() as u32])];
        Self::new(manifest, values)
    }

    pub fn zeros(manifest: Vec<TensorSpec>) -> Self {
        let n = manifest.iter().map(TensorSpec::numel).sum();
        Self {
            values: vec![0.0; n],
            manifest,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn manifest(&self) -> &[TensorSpec] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same manifest, new values. Fails if lengths differ or values are not finite.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.manifest.clone(), values)
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.manifest == other.manifest
    }

    /// Hex SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        digest_bytes(&serialize(self))
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Element-wise `sum_i c_i * pv_i`.
///
/// Each output element is accumulated in ascending term order, starting from
/// `0.0`, so results are reproducible bit-for-bit for a given term order.
pub fn linear_combine(terms: &[(f64, &ParamVector)]) -> Result<ParamVector> {
    let (_, first) = terms.first().ok_or(ParamError::EmptyInput)?;
    for (index, (c, pv)) in terms.iter().enumerate() {
        if !c.is_finite() {
            return Err(ParamError::NonFiniteCoefficient { index });
        }
        if !pv.same_shape(first) {
            return Err(ParamError::IncompatibleShapes);
        }
    }
    let mut out = vec![0.0f64; first.len()];
    for (index, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (c, pv) in terms {
            acc += c * pv.values[index];
        }
        if !acc.is_finite() {
            return Err(ParamError::NumericOverflow { index });
        }
        *slot = acc;
    }
    Ok(ParamVector {
        values: out,
        manifest: first.manifest.clone(),
    })
}

/// Squared Euclidean distance `sum (a_i - b_i)^2`.
pub fn sq_l2_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(ParamError::IncompatibleShapes);
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

pub fn serialize(pv: &ParamVector) -> Vec<u8> {
    try_serialize(pv).expect("manifest entries fit the wire format")
}

/// Serialization that reports manifests the wire format cannot carry
/// (names over 65535 bytes, rank over 255, more than 2^32 entries).
pub fn try_serialize(pv: &ParamVector) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + pv.values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count =
        u32::try_from(pv.manifest.len()).map_err(|_| ParamError::Unencodable("<count>".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for spec in &pv.manifest {
        let name = spec.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| ParamError::Unencodable(spec.name.clone()))?;
        let rank = u8::try_from(spec.dims.len())
            .map_err(|_| ParamError::Unencodable(spec.name.clone()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for d in &spec.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    out.extend_from_slice(&(pv.values.len() as u64).to_le_bytes());
    for v in &pv.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| ParamError::LengthMismatch(format!("truncated while reading {what}")))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice has length N"))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<ParamVector> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ParamError::BadMagic);
    }
    r.pos = MAGIC.len();
    let version = u16::from_le_bytes(r.array("version")?);
    if version != FORMAT_VERSION {
        return Err(ParamError::VersionMismatch { found: version });
    }
    let entries = u32::from_le_bytes(r.array("entry count")?) as usize;
    let mut manifest = Vec::with_capacity(entries.min(1024));
    for _ in 0..entries {
        let name_len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| ParamError::InvalidName)?
            .to_owned();
        let rank = r.array::<1>("rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(r.array("dimension")?));
        }
        manifest.push(TensorSpec { name, dims });
    }
    let count = u64::from_le_bytes(r.array("value count")?);
    let expected: u128 = manifest
        .iter()
        .map(|s| s.dims.iter().map(|&d| d as u128).product::<u128>())
        .sum();
    if expected != count as u128 {
        return Err(ParamError::LengthMismatch(format!(
            "manifest describes {expected} values, header says {count}"
        )));
    }
    let remaining = bytes.len() - r.pos;
    if (remaining as u128) != (count as u128) * 8 {
        return Err(ParamError::LengthMismatch(format!(
            "expected {} value bytes, found {remaining}",
            count as u128 * 8
        )));
    }
    let mut values = Vec::with_capacity(count as usize);
    for index in 0..count as usize {
        let v = f64::from_le_bytes(r.array("value")?);
        if !v.is_finite() {
            return Err(ParamError::DecodedNonFinite { index });
        }
        values.push(v);
    }
    Ok(ParamVector { values, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_flat(v.to_vec()).unwrap()
    }

    #[test]
    fn combine_examples() {
        let a = pv(&[1.0, 2.0]);
        assert_eq!(linear_combine(&[(1.0, &a)]).unwrap(), a);

        let (x, y) = (pv(&[1.0, 3.0]), pv(&[3.0, 5.0]));
        let m = linear_combine(&[(0.5, &x), (0.5, &y)]).unwrap();
        assert_eq!(m.values(), &[2.0, 4.0]);

        let (x, y) = (pv(&[4.0, 0.0]), pv(&[0.0, 4.0]));
        let m = linear_combine(&[(0.25, &x), (0.75, &y)]).unwrap();
        assert_eq!(m.values(), &[1.0, 3.0]);
    }

    #[test]
    fn combine_errors() {
        assert_eq!(linear_combine(&[]), Err(ParamError::EmptyInput));
        let a = pv(&[1.0, 2.0]);
        let b = pv(&[1.0, 2.0, 3.0]);
        assert_eq!(
            linear_combine(&[(1.0, &a), (1.0, &b)]),
            Err(ParamError::IncompatibleShapes)
        );
        let big = pv(&[f64::MAX]);
        assert_eq!(
            linear_combine(&[(1.0, &big), (1.0, &big)]),
            Err(ParamError::NumericOverflow { index: 0 })
        );
        assert_eq!(
            linear_combine(&[(f64::NAN, &a)]),
            Err(ParamError::NonFiniteCoefficient { index: 0 })
        );
    }

    #[test]
    fn same_length_different_names_do_not_combine() {
        let a = ParamVector::new(vec![TensorSpec::new("a", vec![2])], vec![0.0; 2]).unwrap();
        let b = ParamVector::new(vec![TensorSpec::new("b", vec![2])], vec![0.0; 2]).unwrap();
        assert_eq!(sq_l2_distance(&a, &b), Err(ParamError::IncompatibleShapes));
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(
            ParamVector::new(vec![TensorSpec::new("w", vec![2, 3])], vec![0.0; 5]),
            Err(ParamError::ManifestLength {
                expected: 6,
                actual: 5
            })
        ));
        assert_eq!(
            ParamVector::from_flat(vec![0.0, f64::INFINITY]),
            Err(ParamError::NonFinite { index: 1 })
        );
    }

    #[test]
    fn distance_examples() {
        assert_eq!(
            sq_l2_distance(&pv(&[1.0, 2.0]), &pv(&[1.0, 2.0])).unwrap(),
            0.0
        );
        assert_eq!(
            sq_l2_distance(&pv(&[0.0, 0.0]), &pv(&[3.0, 4.0])).unwrap(),
            25.0
        );
    }

    #[test]
    fn distance_matches_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut naive = 0.0;
        for i in 0..100 {
            let d = a[i] - b[i];
            naive += d * d;
        }
        let got = sq_l2_distance(&pv(&a), &pv(&b)).unwrap();
        assert!((got - naive).abs() <= 1e-12 * naive.abs());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let bytes = serialize(&pv(&[1.0, 2.0, 3.0]));
        assert!(matches!(
            deserialize(&bytes[..bytes.len() - 3]),
            Err(ParamError::LengthMismatch(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(deserialize(&bad), Err(ParamError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            deserialize(&bad),
            Err(ParamError::VersionMismatch { found: 9 })
        );
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(
            deserialize(&bad),
            Err(ParamError::DecodedNonFinite { index: 2 })
        );
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(
            deserialize(&bad),
            Err(ParamError::LengthMismatch(_))
        ));
    }

    #[test]
    fn wire_layout_is_exact() {
        let p = ParamVector::new(vec![TensorSpec::new("ab", vec![1, 2])], vec![1.5, -2.0]).unwrap();
        let mut expected = b"FPV1".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(serialize(&p), expected);
    }

    #[test]
    fn empty_vector_round_trips() {
        let empty = ParamVector::new(vec![], vec![]).unwrap();
        let back = deserialize(&serialize(&empty)).unwrap();
        assert!(back.is_empty());
        assert!(back.manifest().is_empty());
    }

    fn arb_param_vector() -> impl Strategy<Value = ParamVector> {
        prop::collection::vec(
            ("[a-zA-Z_0-9.]{0,12}", prop::collection::vec(0u32..5, 0..4)),
            0..5,
        )
        .prop_flat_map(|entries| {
            let manifest: Vec<TensorSpec> = entries
                .into_iter()
                .map(|(n, d)| TensorSpec::new(n, d))
                .collect();
            let n: usize = manifest.iter().map(TensorSpec::numel).sum();
            (Just(manifest), prop::collection::vec(-1e300f64..1e300, n))
        })
        .prop_map(|(m, v)| ParamVector::new(m, v).unwrap())
    }

    proptest! {
        #[test]
        fn serialization_round_trip(p in arb_param_vector()) {
            let bytes = serialize(&p);
            let back = deserialize(&bytes).unwrap();
            prop_assert_eq!(back.manifest(), p.manifest());
            let same_bits = back.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }

        #[test]
        fn combine_is_linear(a in prop::collection::vec(-1e3f64..1e3, 1..20), s in -10.0f64..10.0, c in -10.0f64..10.0) {
            let b: Vec<f64> = a.iter().map(|x| x * 0.5 - 1.0).collect();
            let (pa, pb) = (pv(&a), pv(&b));
            let combined = linear_combine(&[(c, &pa), (1.0 - c, &pb)]).unwrap();
            let scaled_after: Vec<f64> = combined.values().iter().map(|v| v * s).collect();
            let sa = pv(&a.iter().map(|x| x * s).collect::<Vec<_>>());
            let sb = pv(&b.iter().map(|x| x * s).collect::<Vec<_>>());
            let scaled_first = linear_combine(&[(c, &sa), (1.0 - c, &sb)]).unwrap();
            for (x, y) in scaled_after.iter().zip(scaled_first.values()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn distance_symmetric(a in prop::collection::vec(-1e3f64..1e3, 1..30)) {
            let b: Vec<f64> = a.iter().rev().cloned().collect();
            let (pa, pb) = (pv(&a), pv(&b));
            prop_assert_eq!(sq_l2_distance(&pa, &pb).unwrap(), sq_l2_distance(&pb, &pa).unwrap());
            prop_assert_eq!(sq_l2_distance(&pa, &pa).unwrap(), 0.0);
        }
    }
}
