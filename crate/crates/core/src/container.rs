//! The `.atd` attention-dump container and dump-set directories.
//!
//! Layout of one file:
//!
//! ```text
//! bytes 0..4     magic "ATD1"
//! bytes 4..8     header length L (u32, little-endian)
//! bytes 8..8+L   UTF-8 JSON header
//! then           arrays in header order, f64 little-endian, row-major, no padding
//! ```
//!
//! A dump set is a directory of `.atd` files plus `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"ATD1";
pub const EXTENSION: &str = "atd";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Identity of a dump inside a set; sorts by (model, sample, layer, head).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DumpKey {
    pub model_id: String,
    pub sample_id: String,
    pub layer: u32,
    pub head: u32,
}

impl std::fmt::Display for DumpKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "model={} sample={} layer={} head={}",
            self.model_id, self.sample_id, self.layer, self.head
        )
    }
}

/// One attention head's activations for one input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump<T = f64> {
    pub model_id: String,
    pub sample_id: String,
    pub layer: u32,
    pub head: u32,
    /// Queries, `N x d_q`.
    pub q: Array2<T>,
    /// Keys, `N x d_q`.
    pub k: Array2<T>,
    /// Values, `N x d_v`.
    pub v: Array2<T>,
    /// Attention output, `N x d_v`. Recomputed from Q, K, V when absent.
    pub h: Option<Array2<T>>,
}

impl<T: Scalar> AttentionDump<T> {
    pub fn n_tokens(&self) -> usize {
        self.q.nrows()
    }

    pub fn d_q(&self) -> usize {
        self.q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.v.ncols()
    }

    pub fn key(&self) -> DumpKey {
        DumpKey {
            model_id: self.model_id.clone(),
            sample_id: self.sample_id.clone(),
            layer: self.layer,
            head: self.head,
        }
    }

    /// Checks the container invariants: shapes agree, entries finite,
    /// `N >= 2`, `d_q, d_v >= 1` and `d_v <= N`.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens();
        if n < 2 {
            return Err(Error::Validation(format!("n_tokens must be >= 2, got {n}")));
        }
        if self.d_q() == 0 {
            return Err(Error::Validation("d_q must be >= 1".into()));
        }
        if self.d_v() == 0 {
            return Err(Error::Validation("d_v must be >= 1".into()));
        }
        if self.k.dim() != (n, self.d_q()) {
            return Err(Error::Validation(format!(
                "K shape {:?} does not match Q shape {:?}",
                self.k.dim(),
                self.q.dim()
            )));
        }
        if self.v.nrows() != n {
            return Err(Error::Validation(format!(
                "V has {} rows, expected n_tokens = {n}",
                self.v.nrows()
            )));
        }
        if let Some(h) = &self.h {
            if h.dim() != self.v.dim() {
                return Err(Error::Validation(format!(
                    "H shape {:?} does not match V shape {:?}",
                    h.dim(),
                    self.v.dim()
                )));
            }
        }
        if self.d_v() > n {
            return Err(Error::Validation(format!(
                "d_v exceeds n_tokens ({} > {n})",
                self.d_v()
            )));
        }
        for (name, m) in self.arrays() {
            if !m.iter().all(|x| x.is_finite()) {
                return Err(Error::Validation(format!("{name} not finite")));
            }
        }
        Ok(())
    }

    /// Arrays in container order: Q, K, V and H when present.
    pub fn arrays(&self) -> Vec<(&'static str, &Array2<T>)> {
        let mut out = vec![("Q", &self.q), ("K", &self.k), ("V", &self.v)];
        if let Some(h) = &self.h {
            out.push(("H", h));
        }
        out
    }

    /// The stored attention output, or a fresh forward pass over Q, K, V.
    pub fn output(&self) -> Array2<T> {
        match &self.h {
            Some(h) => h.clone(),
            None => attention::attend(&self.q, &self.k, &self.v),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AttentionDump<U> {
        let conv = |m: &Array2<T>| m.mapv(|x| U::lit(x.to_f64_()));
        AttentionDump {
            model_id: self.model_id.clone(),
            sample_id: self.sample_id.clone(),
            layer: self.layer,
            head: self.head,
            q: conv(&self.q),
            k: conv(&self.k),
            v: conv(&self.v),
            h: self.h.as_ref().map(conv),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_id: String,
    sample_id: String,
    layer: u32,
    head: u32,
    n_tokens: usize,
    d_q: usize,
    d_v: usize,
    arrays: Vec<String>,
}

/// Serializes a validated dump into container bytes.
pub fn encode_dump(dump: &AttentionDump<f64>) -> Result<Vec<u8>> {
    dump.validate()?;
    let arrays = dump.arrays();
    let header = Header {
        model_id: dump.model_id.clone(),
        sample_id: dump.sample_id.clone(),
        layer: dump.layer,
        head: dump.head,
        n_tokens: dump.n_tokens(),
        d_q: dump.d_q(),
        d_v: dump.d_v(),
        arrays: arrays.iter().map(|(name, _)| name.to_string()).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("header longer than u32::MAX bytes".into()))?;
    let payload: usize = arrays.iter().map(|(_, m)| m.len() * 8).sum();

    let mut out = Vec::with_capacity(8 + header.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in arrays {
        // iter() walks logical row-major order regardless of memory layout
        for x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates container bytes.
pub fn decode_dump(bytes: &[u8]) -> Result<AttentionDump<f64>> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "truncated container: {} bytes is shorter than the 8-byte preamble",
            bytes.len()
        )));
    }
    if bytes[..3] != MAGIC[..3] {
        return Err(Error::Format("not an ATD container (bad magic)".into()));
    }
    if bytes[3] != MAGIC[3] {
        return Err(Error::Format(format!(
            "unsupported ATD container version {:?}",
            bytes[3] as char
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::Format(format!(
            "truncated header: declared {header_len} bytes, found {}",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let payload = &body[header_len..];

    let mut seen = BTreeSet::new();
    let mut expected = 0usize;
    let mut layout = Vec::with_capacity(header.arrays.len());
    for name in &header.arrays {
        let cols = match name.as_str() {
            "Q" | "K" => header.d_q,
            "V" | "H" => header.d_v,
            other => return Err(Error::Format(format!("unknown array {other:?} in header"))),
        };
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("array {name} declared twice")));
        }
        let bytes = header
            .n_tokens
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("declared array size overflows".into()))?;
        expected = expected
            .checked_add(bytes)
            .ok_or_else(|| Error::Format("declared payload size overflows".into()))?;
        layout.push((name.as_str(), cols));
    }
    for required in ["Q", "K", "V"] {
        if !seen.contains(required) {
            return Err(Error::Format(format!("header lacks required array {required}")));
        }
    }
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: header declares {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "payload has {} trailing bytes beyond the declared arrays",
            payload.len() - expected
        )));
    }

    let mut arrays: BTreeMap<&str, Array2<f64>> = BTreeMap::new();
    let mut offset = 0;
    for (name, cols) in layout {
        let len = header.n_tokens * cols;
        let data: Vec<f64> = payload[offset..offset + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += len * 8;
        let m = Array2::from_shape_vec((header.n_tokens, cols), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        arrays.insert(name, m);
    }

    let dump = AttentionDump {
        model_id: header.model_id,
        sample_id: header.sample_id,
        layer: header.layer,
        head: header.head,
        q: arrays.remove("Q").unwrap(),
        k: arrays.remove("K").unwrap(),
        v: arrays.remove("V").unwrap(),
        h: arrays.remove("H"),
    };
    dump.validate()?;
    Ok(dump)
}

pub fn write_dump(dump: &AttentionDump<f64>, path: &Path) -> Result<()> {
    let bytes = encode_dump(dump)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<AttentionDump<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes).map_err(|e| e.context(path.display().to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: u32,
    pub num_heads: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    models: BTreeMap<String, ModelShape>,
}

/// Dumps that decoded, plus `(path, error)` for each file that did not.
pub type LenientLoad = (Vec<AttentionDump<f64>>, Vec<(String, Error)>);

/// Ordered collection of dumps with a per-model layer/head manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DumpSet {
    pub dumps: Vec<AttentionDump<f64>>,
    pub manifest: BTreeMap<String, ModelShape>,
}

impl DumpSet {
    /// Builds a set, sorting dumps by key and inferring the manifest from
    /// the largest layer and head indices seen per model.
    pub fn from_dumps(mut dumps: Vec<AttentionDump<f64>>) -> Result<Self> {
        dumps.sort_by_key(|d| d.key());
        let mut manifest: BTreeMap<String, ModelShape> = BTreeMap::new();
        for d in &dumps {
            let entry = manifest
                .entry(d.model_id.clone())
                .or_insert(ModelShape { num_layers: 0, num_heads: 0 });
            entry.num_layers = entry.num_layers.max(d.layer + 1);
            entry.num_heads = entry.num_heads.max(d.head + 1);
        }
        let set = DumpSet { dumps, manifest };
        set.validate()?;
        Ok(set)
    }

    /// Keys must be unique and every dump must fit its model's manifest entry.
    pub fn validate(&self) -> Result<()> {
        let mut keys = BTreeSet::new();
        for d in &self.dumps {
            let key = d.key();
            let shape = self.manifest.get(&d.model_id).ok_or_else(|| {
                Error::Validation(format!("model {:?} missing from manifest", d.model_id))
            })?;
            if d.layer >= shape.num_layers || d.head >= shape.num_heads {
                return Err(Error::Validation(format!(
                    "{key} outside manifest shape {} layers x {} heads",
                    shape.num_layers, shape.num_heads
                )));
            }
            if !keys.insert(key.clone()) {
                return Err(Error::Validation(format!("duplicate dump key {key}")));
            }
        }
        Ok(())
    }

    /// Dumps grouped by model id, in key order.
    pub fn by_model(&self) -> BTreeMap<&str, Vec<&AttentionDump<f64>>> {
        let mut out: BTreeMap<&str, Vec<&AttentionDump<f64>>> = BTreeMap::new();
        for d in &self.dumps {
            out.entry(d.model_id.as_str()).or_default().push(d);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = BTreeSet::new();
        for d in &self.dumps {
            let name = file_name(&d.key());
            if !names.insert(name.clone()) {
                return Err(Error::Validation(format!(
                    "file name collision for {} ({name})",
                    d.key()
                )));
            }
            write_dump(d, &dir.join(name))?;
        }
        let manifest = Manifest { models: self.manifest.clone() };
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads every `.atd` file in `dir`. Without a `manifest.json` the
    /// manifest is inferred from the dumps.
    pub fn load(dir: &Path) -> Result<Self> {
        let (dumps, failures) = Self::load_lenient(dir)?;
        if let Some((_, err)) = failures.into_iter().next() {
            return Err(err);
        }
        Self::with_manifest(dir, dumps)
    }

    /// Like [`DumpSet::load`], but unreadable files are returned alongside
    /// the dumps that did load instead of failing the whole set.
    pub fn load_lenient(
        dir: &Path,
    ) -> Result<LenientLoad> {
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == EXTENSION) {
                paths.push(path);
            }
        }
        paths.sort();
        let mut dumps = Vec::with_capacity(paths.len());
        let mut failures = Vec::new();
        for path in paths {
            match read_dump(&path) {
                Ok(d) => dumps.push(d),
                Err(e) => failures.push((path.display().to_string(), e)),
            }
        }
        Ok((dumps, failures))
    }

    pub(crate) fn with_manifest(dir: &Path, dumps: Vec<AttentionDump<f64>>) -> Result<Self> {
        let mut set = Self::from_dumps(dumps)?;
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let manifest: Manifest = serde_json::from_str(&text)?;
            set.manifest = manifest.models;
            set.validate()?;
        }
        Ok(set)
    }
}

/// `<model>__<sample>__L<layer>_H<head>.atd`, with unsafe characters replaced.
pub fn file_name(key: &DumpKey) -> String {
    fn clean(s: &str) -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-.".contains(c) { c } else { '_' })
            .collect()
    }
    format!(
        "{}__{}__L{:03}_H{:03}.{EXTENSION}",
        clean(&key.model_id),
        clean(&key.sample_id),
        key.layer,
        key.head
    )
}
