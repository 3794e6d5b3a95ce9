//! Organ-independent imaging descriptions and the frozen text-embedding providers that turn
//! them into the supervisory vectors of the log-ratio loss.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 256;

/// Organ and body-region words that must never appear in a description.
pub const ORGAN_DENYLIST: &[&str] = &[
    "abdomen", "abdominal", "ankle", "brain", "breast", "cardiac", "cervical", "chest", "colon", "elbow", "head",
    "heart", "hip", "kidney", "knee", "liver", "lumbar", "lung", "neck", "pancreas", "pelvis", "prostate",
    "rectum", "shoulder", "spine", "thoracic", "uterus", "wrist",
];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("embedding table error: {0}")]
    Table(String),
}

pub type Result<T, E = TextError> = std::result::Result<T, E>;

/// Acquisition metadata; deliberately carries no organ field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagingMeta {
    pub modality: String,
    pub field_strength: Option<f64>,
    pub tr_ms: Option<f64>,
    pub te_ms: Option<f64>,
    pub manufacturer: Option<String>,
    pub sequence_name: Option<String>,
}

impl ImagingMeta {
    pub fn new(modality: impl Into<String>) -> Self {
        ImagingMeta { modality: modality.into(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality.trim().is_empty() {
            return Err(TextError::Metadata("empty modality".into()));
        }
        for (name, v) in [("field_strength", self.field_strength), ("tr_ms", self.tr_ms), ("te_ms", self.te_ms)] {
            if let Some(x) = v {
                if !(x > 0.0 && x.is_finite()) {
                    return Err(TextError::Metadata(format!("{name} must be positive, got {x}")));
                }
            }
        }
        for (name, s) in [("modality", Some(&self.modality)), ("manufacturer", self.manufacturer.as_ref())] {
            let Some(s) = s else { continue };
            if s.contains(';') || s.contains('\n') {
                return Err(TextError::Metadata(format!("{name} `{s}` contains a separator")));
            }
            if let Some(tok) = organ_token(s) {
                return Err(TextError::Metadata(format!("{name} `{s}` names an organ (`{tok}`)")));
            }
        }
        if let Some(m) = &self.manufacturer {
            // would render like one of the numeric fields
            let tesla_like = m.strip_suffix('T').is_some_and(|n| n.parse::<f64>().is_ok());
            if m.is_empty() || m.starts_with("TR=") || m.starts_with("TE=") || tesla_like {
                return Err(TextError::Metadata(format!("manufacturer `{m}` is ambiguous in a description")));
            }
        }
        Ok(())
    }
}

/// First denylisted organ word found in `text`, matched case-insensitively on word boundaries.
pub fn organ_token(text: &str) -> Option<&'static str> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .find_map(|w| ORGAN_DENYLIST.iter().copied().find(|o| o.eq_ignore_ascii_case(w)))
}

/// Shortest decimal rendering that keeps at least one fractional digit (`3.0`, `1.5`).
fn tesla(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// `"MR <modality>; <B>T; TR=<tr>ms; TE=<te>ms; <manufacturer>"`, absent fields omitted.
pub fn build_description(meta: &ImagingMeta) -> Result<String> {
    meta.validate()?;
    let mut s = format!("MR {}", meta.modality);
    if let Some(b) = meta.field_strength {
        write!(s, "; {}T", tesla(b)).unwrap();
    }
    if let Some(tr) = meta.tr_ms {
        write!(s, "; TR={tr}ms").unwrap();
    }
    if let Some(te) = meta.te_ms {
        write!(s, "; TE={te}ms").unwrap();
    }
    if let Some(m) = &meta.manufacturer {
        write!(s, "; {m}").unwrap();
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Character-trigram signed feature hashing into `dim` buckets, L2-normalized.
pub fn embed_hashing(text: &str, dim: usize) -> Result<TextEmbedding> {
    if text.is_empty() {
        return Err(TextError::EmptyText);
    }
    if dim == 0 {
        return Err(TextError::Shape("embedding dimension must be positive".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0f64; dim];
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let h = fnv1a(s.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    };
    if chars.len() < 3 {
        add(&chars);
    } else {
        chars.windows(3).for_each(add);
    }
    let vector = normalize(v).unwrap_or_else(|| {
        // every trigram cancelled out: fall back to a single whole-text bucket
        let mut v = vec![0.0; dim];
        v[(fnv1a(text.as_bytes()) % dim as u64) as usize] = 1.0;
        v
    });
    Ok(TextEmbedding { vector, source_text: text.to_owned() })
}

/// The bundled provider at the default dimension.
pub fn embed(text: &str) -> Result<TextEmbedding> {
    embed_hashing(text, DEFAULT_DIM)
}

/// Symmetric Euclidean distance matrix with a zero diagonal.
pub fn pairwise_dist(e: &[TextEmbedding]) -> Result<Array2<f64>> {
    if e.len() < 2 {
        return Err(TextError::Shape(format!("need at least 2 embeddings, got {}", e.len())));
    }
    let d = e[0].dim();
    if let Some(bad) = e.iter().find(|x| x.dim() != d) {
        return Err(TextError::Shape(format!("dimension {} differs from {d}", bad.dim())));
    }
    let n = e.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = e[i].vector.iter().zip(&e[j].vector).map(|(a, b)| (a - b) * (a - b)).sum();
            m[[i, j]] = s.sqrt();
            m[[j, i]] = m[[i, j]];
        }
    }
    Ok(m)
}

/// Precomputed embeddings produced by an external encoder.
///
/// Stored as a description list (one string per line) plus a binary table: a `"D N\n"`
/// header followed by `N * D` little-endian `f32` values, row-major, rows in list order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
    order: Vec<String>,
}

/// Unit-norm tolerance accepted from external providers before renormalizing.
const EXTERNAL_NORM_TOL: f64 = 1e-4;

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut rows = HashMap::new();
        let mut order = Vec::new();
        for (text, v) in entries {
            if v.len() != dim {
                return Err(TextError::Shape(format!("row for `{text}` has {} values, expected {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(TextError::Table(format!("row for `{text}` is not finite")));
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > EXTERNAL_NORM_TOL {
                return Err(TextError::Table(format!("row for `{text}` has norm {n}, expected 1")));
            }
            if rows.insert(text.clone(), normalize(v).unwrap()).is_some() {
                return Err(TextError::Table(format!("duplicate description `{text}`")));
            }
            order.push(text);
        }
        Ok(EmbeddingTable { dim, rows, order })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<TextEmbedding> {
        self.rows.get(text).map(|v| TextEmbedding { vector: v.clone(), source_text: text.to_owned() })
    }

    pub fn load(descriptions: &Path, table: &Path) -> Result<Self> {
        let list = fs::read_to_string(descriptions).map_err(io(descriptions))?;
        let texts: Vec<String> = list.lines().map(str::to_owned).collect();
        let bytes = fs::read(table).map_err(io(table))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| TextError::Table("missing `D N` header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| TextError::Table("header is not UTF-8".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(usize::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| TextError::Table(format!("bad header `{header}`: {e}")))?;
        let [dim, n] = nums[..] else {
            return Err(TextError::Table(format!("header `{header}` must be `D N`")));
        };
        if n != texts.len() {
            return Err(TextError::Table(format!("table has {n} rows but {} descriptions", texts.len())));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != n * dim * 4 {
            return Err(TextError::Table(format!("payload is {} bytes, expected {}", payload.len(), n * dim * 4)));
        }
        let values: Vec<f64> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let entries = texts.into_iter().zip(values.chunks(dim.max(1)).map(<[f64]>::to_vec)).collect();
        EmbeddingTable::new(dim, entries)
    }

    pub fn save(&self, descriptions: &Path, table: &Path) -> Result<()> {
        write_description_list(&self.order, descriptions)?;
        let mut f = fs::File::create(table).map_err(io(table))?;
        let mut buf = format!("{} {}\n", self.dim, self.order.len()).into_bytes();
        for t in &self.order {
            for &x in &self.rows[t] {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        f.write_all(&buf).map_err(io(table))
    }
}

/// Writes the unique descriptions, in first-seen order, for an external encoder to consume.
pub fn write_description_list<S: AsRef<str>>(texts: &[S], path: &Path) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    let mut out = String::new();
    for t in texts {
        let t = t.as_ref();
        if t.contains('\n') {
            return Err(TextError::Table(format!("description `{t}` spans lines")));
        }
        if seen.insert(t) {
            out.push_str(t);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|source| TextError::Io { path: path.to_path_buf(), source })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TextError + '_ {
    move |source| TextError::Io { path: path.to_path_buf(), source }
}

/// Config key `text_provider`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Hashing,
    External,
}

#[derive(Clone, Debug)]
pub enum TextProvider {
    Hashing { dim: usize },
    External(EmbeddingTable),
}

impl TextProvider {
    pub fn dim(&self) -> usize {
        match self {
            TextProvider::Hashing { dim } => *dim,
            TextProvider::External(t) => t.dim(),
        }
    }

    pub fn embed(&self, text: &str) -> Result<TextEmbedding> {
        match self {
            TextProvider::Hashing { dim } => embed_hashing(text, *dim),
            TextProvider::External(t) => {
                if text.is_empty() {
                    return Err(TextError::EmptyText);
                }
                t.get(text).ok_or_else(|| TextError::Table(format!("no embedding for `{text}`")))
            }
        }
    }
}

#[cfg(test)]
mod tests;
