//! Safetensors-compatible checkpoint container with provenance metadata.
//!
//! File layout: an 8-byte little-endian header length `N`, then `N` bytes of
//! JSON mapping each tensor name to `{"dtype": "F32", "shape": [...],
//! "data_offsets": [start, end]}` plus a `__metadata__` string map, then the
//! raw little-endian f32 payloads, contiguous and in header order. Names are
//! ordered lexicographically everywhere (header, payload, digests), so the
//! serialized form is canonical: write → read → write is bit-identical.
//!
//! Only F32 tensors are accepted. Everything else is a read error, and
//! non-finite values are refused at write time.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a parameter set represents in the distill/merge lifecycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Teacher,
    Student,
    TaskVector,
    Merged,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Teacher => "teacher",
            Kind::Student => "student",
            Kind::TaskVector => "task_vector",
            Kind::Merged => "merged",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Kind::Teacher),
            "student" => Ok(Kind::Student),
            "task_vector" => Ok(Kind::TaskVector),
            "merged" => Ok(Kind::Merged),
            other => Err(Error::InvalidMetadata(format!("unknown kind {other:?}"))),
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Provenance metadata carried in the container's `__metadata__` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Meta {
    /// Hash of the model configuration the tensors belong to.
    pub arch_id: String,
    /// Digest of the initialization this model started from, when it has one.
    pub init_digest: Option<String>,
    /// Optimizer steps applied so far.
    pub steps: u64,
    pub kind: Kind,
    /// Everything else (merge weights, source labels, config snapshot...).
    pub extra: BTreeMap<String, String>,
}

impl Meta {
    pub fn new(kind: Kind) -> Self {
        Meta {
            arch_id: String::new(),
            init_digest: None,
            steps: 0,
            kind,
            extra: BTreeMap::new(),
        }
    }
}

/// An ordered name → tensor map plus metadata; the unit all training,
/// merging, and serialization code works with.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub entries: BTreeMap<String, Tensor>,
    pub meta: Meta,
}

impl ParameterSet {
    pub fn new(kind: Kind) -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
            meta: Meta::new(kind),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Names in canonical (lexicographic) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// A copy without the entries whose name starts with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParameterSet {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| !k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParameterSet {
            entries,
            meta: self.meta.clone(),
        }
    }
}

/// A θ_ft − θ_0 delta with the provenance needed to merge it safely.
#[derive(Clone, Debug)]
pub struct TaskVector {
    pub params: ParameterSet,
}

impl TaskVector {
    pub fn source_teacher(&self) -> &str {
        self.params
            .meta
            .extra
            .get("source_teacher")
            .map(|s| s.as_str())
            .unwrap_or("unknown")
    }

    pub fn init_digest(&self) -> Option<&str> {
        self.params.meta.init_digest.as_deref()
    }

    pub fn from_params(params: ParameterSet) -> Result<Self> {
        if params.meta.kind != Kind::TaskVector {
            return Err(Error::InvalidMetadata(format!(
                "expected kind task_vector, got {}",
                params.meta.kind
            )));
        }
        Ok(TaskVector { params })
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name == "__metadata__" {
        return Err(Error::InvalidName {
            name: name.to_string(),
            reason: "empty or reserved".into(),
        });
    }
    let ok = name
        .split('.')
        .all(|part| !part.is_empty() && part.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-'));
    if !ok {
        return Err(Error::InvalidName {
            name: name.to_string(),
            reason: "names are ASCII dot-separated paths".into(),
        });
    }
    Ok(())
}

// ── serialization ────────────────────────────────────────────────────

fn header_json(ps: &ParameterSet, with_meta: bool) -> Vec<u8> {
    let mut header = Map::new();
    if with_meta {
        let mut md = Map::new();
        md.insert("arch_id".into(), Value::String(ps.meta.arch_id.clone()));
        if let Some(d) = &ps.meta.init_digest {
            md.insert("init_digest".into(), Value::String(d.clone()));
        }
        md.insert("steps".into(), Value::String(ps.meta.steps.to_string()));
        md.insert("kind".into(), Value::String(ps.meta.kind.to_string()));
        for (k, v) in &ps.meta.extra {
            md.insert(k.clone(), Value::String(v.clone()));
        }
        header.insert("__metadata__".into(), Value::Object(md));
    }
    let mut offset = 0u64;
    for (name, tensor) in &ps.entries {
        let bytes = tensor.numel() as u64 * 4;
        header.insert(
            name.clone(),
            json!({
                "dtype": "F32",
                "shape": tensor.shape(),
                "data_offsets": [offset, offset + bytes],
            }),
        );
        offset += bytes;
    }
    serde_json::to_vec(&Value::Object(header)).expect("header serialization")
}

/// Canonical bytes of a parameter set (8-byte length + header + payload).
/// `with_meta = false` is the digest form: metadata excluded so step counters
/// and labels do not change identity.
fn serialize_bytes(ps: &ParameterSet, with_meta: bool) -> Result<Vec<u8>> {
    for (name, tensor) in &ps.entries {
        validate_name(name)?;
        if !tensor.all_finite() {
            return Err(Error::NonFinite { name: name.clone() });
        }
    }
    let header = header_json(ps, with_meta);
    let payload_len: usize = ps.entries.values().map(|t| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(8 + header.len() + payload_len);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for tensor in ps.entries.values() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// SHA-256 over the canonical serialization with metadata excluded.
/// This is the identity used to enforce shared initialization.
pub fn init_digest(ps: &ParameterSet) -> Result<String> {
    let bytes = serialize_bytes(ps, false)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn write_checkpoint(ps: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_bytes(ps, true)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParameterSet> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedHeader {
            declared: 0,
            available: bytes.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(Error::TruncatedHeader {
            declared: header_len,
            available,
        });
    }
    let header_end = 8 + header_len as usize;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut meta = Meta::new(Kind::Teacher);
    let mut described: Vec<(String, Vec<usize>, u64, u64)> = Vec::new();
    for (name, value) in &header {
        if name == "__metadata__" {
            meta = parse_meta(value)?;
            continue;
        }
        let obj = value
            .as_object()
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {name:?} is not an object")))?;
        let dtype = obj
            .get("dtype")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {name:?} missing dtype")))?;
        if dtype != "F32" {
            return Err(Error::UnsupportedDtype {
                name: name.clone(),
                dtype: dtype.to_string(),
            });
        }
        let shape: Vec<usize> = obj
            .get("shape")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {name:?} missing shape")))?
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|d| d as usize)
                    .ok_or_else(|| Error::MalformedHeader(format!("tensor {name:?} bad shape")))
            })
            .collect::<Result<_>>()?;
        let offsets = obj
            .get("data_offsets")
            .and_then(|v| v.as_array())
            .filter(|a| a.len() == 2)
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {name:?} missing offsets")))?;
        let start = offsets[0].as_u64().ok_or_else(|| {
            Error::MalformedHeader(format!("tensor {name:?} bad offset"))
        })?;
        let end = offsets[1].as_u64().ok_or_else(|| {
            Error::MalformedHeader(format!("tensor {name:?} bad offset"))
        })?;
        described.push((name.clone(), shape, start, end));
    }

    // offsets must tile the payload exactly, in canonical name order
    described.sort_by(|a, b| a.0.cmp(&b.0));
    let mut cursor = 0u64;
    for (name, shape, start, end) in &described {
        let expected = shape.iter().product::<usize>() as u64 * 4;
        if *start != cursor || *end != start + expected || end < start {
            return Err(Error::OffsetOverlap {
                name: name.clone(),
                start: *start,
                end: *end,
            });
        }
        cursor = *end;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::PayloadSizeMismatch {
            declared: cursor,
            actual: payload.len() as u64,
        });
    }

    let mut ps = ParameterSet {
        entries: BTreeMap::new(),
        meta,
    };
    for (name, shape, start, end) in described {
        let raw = &payload[start as usize..end as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::MalformedHeader(format!("tensor {name:?}: {e}")))?;
        validate_name(&name)?;
        ps.entries.insert(name, tensor);
    }
    Ok(ps)
}

fn parse_meta(value: &Value) -> Result<Meta> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::MalformedHeader("__metadata__ is not an object".into()))?;
    let mut meta = Meta::new(Kind::Teacher);
    for (k, v) in obj {
        let s = v
            .as_str()
            .ok_or_else(|| Error::MalformedHeader(format!("metadata {k:?} is not a string")))?;
        match k.as_str() {
            "arch_id" => meta.arch_id = s.to_string(),
            "init_digest" => meta.init_digest = Some(s.to_string()),
            "steps" => {
                meta.steps = s
                    .parse()
                    .map_err(|_| Error::InvalidMetadata(format!("bad steps {s:?}")))?
            }
            "kind" => meta.kind = Kind::parse(s)?,
            _ => {
                meta.extra.insert(k.clone(), s.to_string());
            }
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn sample_ps() -> ParameterSet {
        let mut ps = ParameterSet::new(Kind::Teacher);
        ps.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn payload_bytes_are_ieee754_le() {
        let bytes = serialize_bytes(&sample_ps(), false).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(payload, &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40]);
    }

    #[test]
    fn empty_set_header_has_only_metadata() {
        let ps = ParameterSet::new(Kind::Teacher);
        let bytes = serialize_bytes(&ps, true).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + n, "zero payload bytes");
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..]).unwrap();
        assert_eq!(header.len(), 1);
        assert!(header.contains_key("__metadata__"));
    }

    #[test]
    fn empty_set_digest_is_fixed_constant() {
        // sha256 of the canonical 10-byte serialization (8-byte length + "{}"),
        // frozen from an independent sha256 implementation
        let ps = ParameterSet::new(Kind::Teacher);
        assert_eq!(
            init_digest(&ps).unwrap(),
            "411a485216e432ece6b9af94fa32154cf79a2a56d4f81266baa50063f45092bd"
        );
    }

    #[test]
    fn digest_stable_and_sensitive() {
        let ps = sample_ps();
        assert_eq!(init_digest(&ps).unwrap(), init_digest(&ps).unwrap());

        let mut flipped = ps.clone();
        let t = flipped.entries.get_mut("w").unwrap();
        let mut bits = t.data()[0].to_bits();
        bits ^= 1;
        t.data_mut()[0] = f32::from_bits(bits);
        assert_ne!(init_digest(&ps).unwrap(), init_digest(&flipped).unwrap());
    }

    #[test]
    fn digest_ignores_metadata() {
        let mut a = sample_ps();
        let mut b = sample_ps();
        a.meta.steps = 0;
        b.meta.steps = 999;
        b.meta.extra.insert("note".into(), "x".into());
        assert_eq!(init_digest(&a).unwrap(), init_digest(&b).unwrap());
    }

    #[test]
    fn roundtrip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ps.ckpt");
        let mut ps = sample_ps();
        ps.meta.kind = Kind::Student;
        ps.meta.init_digest = Some("abc123".into());
        ps.meta.steps = 42;
        ps.meta.extra.insert("lambda".into(), "0.9".into());
        write_checkpoint(&ps, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(ps, back);
        // and bit-identical on rewrite
        let again = dir.path().join("ps2.ckpt");
        write_checkpoint(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn truncated_header_is_rejected() {
        let bytes = serialize_bytes(&sample_ps(), true).unwrap();
        let truncated = &bytes[..10];
        let mut mangled = truncated.to_vec();
        // declared header length exceeds the file
        mangled[0] = 0xFF;
        let err = parse_checkpoint(&mangled).unwrap_err();
        assert!(matches!(err, Error::TruncatedHeader { .. }), "{err}");
    }

    #[test]
    fn unsupported_dtype_is_rejected() {
        let header = br#"{"w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        let err = parse_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDtype { .. }), "{err}");
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let header =
            br#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 6]);
        let err = parse_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::OffsetOverlap { .. }), "{err}");
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let ps = sample_ps();
        let mut bytes = serialize_bytes(&ps, true).unwrap();
        bytes.extend_from_slice(&[0u8; 4]); // trailing garbage
        let err = parse_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::PayloadSizeMismatch { .. }), "{err}");
    }

    #[test]
    fn non_finite_values_are_refused_at_write() {
        let mut ps = ParameterSet::new(Kind::Teacher);
        ps.insert("w", Tensor::from_vec(vec![f32::NAN])).unwrap();
        let err = serialize_bytes(&ps, true).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn bad_names_are_refused() {
        let mut ps = ParameterSet::new(Kind::Teacher);
        assert!(ps.insert("ok.name_1", Tensor::from_vec(vec![0.0])).is_ok());
        assert!(ps.insert("", Tensor::from_vec(vec![0.0])).is_err());
        assert!(ps.insert("sp ace", Tensor::from_vec(vec![0.0])).is_err());
        assert!(ps.insert("a..b", Tensor::from_vec(vec![0.0])).is_err());
        assert!(ps.insert("__metadata__", Tensor::from_vec(vec![0.0])).is_err());
    }

    #[test]
    fn random_roundtrips_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..20u64 {
            let mut s = Stream::derive(seed, "ckpt-test");
            let mut ps = ParameterSet::new(Kind::Student);
            ps.meta.init_digest = Some(format!("{seed:x}"));
            let n_tensors = 1 + s.below(5);
            for t in 0..n_tensors {
                let rank = 1 + s.below(3);
                let shape: Vec<usize> = (0..rank).map(|_| 1 + s.below(6)).collect();
                let numel: usize = shape.iter().product();
                let data: Vec<f32> = (0..numel).map(|_| s.uniform(-4.0, 4.0)).collect();
                ps.insert(format!("layer.{t}.w"), Tensor::new(shape, data).unwrap())
                    .unwrap();
            }
            let path = dir.path().join(format!("r{seed}.ckpt"));
            write_checkpoint(&ps, &path).unwrap();
            let back = read_checkpoint(&path).unwrap();
            assert_eq!(ps, back);
        }
    }
}
