//! Embedding data model and its on-disk formats.
//!
//! Embedding matrices are stored in the LDEB container (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LDEB"
//! 4       4     u32 version (= 1)
//! 8       4     u32 dtype   (= 1, float32 LE)
//! 12      4     u32 dim
//! 16      8     u64 count
//! 24      4*n   float32 payload, row-major, n = count * dim
//! ```
//!
//! Per-instance annotations live in a CSV side file with the header
//! `index,label,group`, where `-1` marks a missing value. Prompt embeddings
//! are described by a manifest CSV `file,role,group_id,row,name` that points
//! into one or more LDEB files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub const LDEB_MAGIC: &[u8; 4] = b"LDEB";
pub const LDEB_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 1;
pub const LDEB_HEADER_LEN: usize = 24;

/// Row norms within this distance of 1 count as unit length.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Dense `count x dim` matrix of finite `f32` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    count: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data, rejecting non-finite values.
    ///
    /// The `normalized` flag is set by measuring every row's L2 norm.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Validation(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        let count = data.len() / dim;
        let normalized = measure_unit_rows(&data, dim);
        Ok(Self {
            dim,
            count,
            data,
            normalized,
        })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn from_array(array: &Array2<f32>) -> Result<Self> {
        let dim = array.ncols();
        Self::new(dim, array.iter().copied().collect())
    }

    /// Builds a matrix from `f64` rows, rounding to `f32`.
    pub fn from_rows_f64(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has width {}, expected {dim}",
                    row.len()
                )));
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.count, self.dim), &self.data)
            .expect("length invariant holds")
    }

    pub fn row_view(&self, i: usize) -> ArrayView1<'_, f32> {
        ArrayView1::from(self.row(i))
    }

    pub fn to_array(&self) -> Array2<f32> {
        self.view().to_owned()
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Index(format!(
                    "row {i} out of range for {} rows",
                    self.count
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(self.dim, data)
    }

    /// Returns a copy with every non-zero row scaled to unit L2 norm.
    pub fn l2_normalized(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        let normalized = measure_unit_rows(&data, self.dim);
        Self {
            dim: self.dim,
            count: self.count,
            data,
            normalized,
        }
    }
}

fn measure_unit_rows(data: &[f32], dim: usize) -> bool {
    data.chunks_exact(dim).all(|row| {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        (norm - 1.0).abs() <= UNIT_NORM_TOL
    })
}

/// Serializes `m` into LDEB bytes.
pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("refusing to encode non-finite values".into()));
    }
    let dim = u32::try_from(m.dim)
        .map_err(|_| Error::Validation(format!("dim {} exceeds u32", m.dim)))?;
    let mut out = Vec::with_capacity(LDEB_HEADER_LEN + m.data.len() * 4);
    out.extend_from_slice(LDEB_MAGIC);
    out.extend_from_slice(&LDEB_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(m.count as u64).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses LDEB bytes produced by [`encode_embeddings`].
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < LDEB_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != LDEB_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        return Err(Error::Length(format!(
            "file has {} bytes, header needs {LDEB_HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != LDEB_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != LDEB_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = u32_at(8);
    if dtype != DTYPE_F32_LE {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let dim = u32_at(12) as usize;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = (count as u128) * (dim as u128) * 4;
    let payload = &bytes[LDEB_HEADER_LEN..];
    if (payload.len() as u128) < expected {
        return Err(Error::Length(format!(
            "declared {count}x{dim} payload needs {expected} bytes, found {}",
            payload.len()
        )));
    }
    if (payload.len() as u128) > expected {
        return Err(Error::Length(format!(
            "{} trailing bytes after payload",
            payload.len() as u128 - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingMatrix::new(dim, data)
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Per-instance annotations read from a metadata CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    pub labels: Option<Vec<usize>>,
    pub groups: Option<Vec<usize>>,
}

/// Reads an `index,label,group` file describing exactly `n` instances.
///
/// A column whose entries are all `-1` is reported as absent. Mixing known and
/// unknown entries within one column is rejected.
pub fn read_metadata(path: impl AsRef<Path>, n: usize) -> Result<Metadata> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(&text, n)
}

pub fn parse_metadata(text: &str, n: usize) -> Result<Metadata> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "label", "group"] {
        return Err(Error::Parse(format!(
            "expected header index,label,group, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut labels: Vec<Option<i64>> = vec![None; n];
    let mut groups: Vec<Option<i64>> = vec![None; n];
    let mut seen = vec![false; n];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |k: usize| -> Result<i64> {
            let raw = record.get(k).unwrap_or("");
            raw.parse::<i64>().map_err(|_| {
                Error::Parse(format!("row {}: field {k} {raw:?} is not an integer", line + 2))
            })
        };
        let index = field(0)?;
        let idx = usize::try_from(index)
            .ok()
            .filter(|&i| i < n)
            .ok_or_else(|| Error::Consistency(format!("index {index} outside 0..{n}")))?;
        if seen[idx] {
            return Err(Error::Consistency(format!("duplicate index {idx}")));
        }
        seen[idx] = true;
        labels[idx] = Some(field(1)?);
        groups[idx] = Some(field(2)?);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Consistency(format!("missing index {missing}")));
    }

    Ok(Metadata {
        labels: dense_column("label", &labels)?,
        groups: dense_column("group", &groups)?,
    })
}

fn dense_column(name: &str, values: &[Option<i64>]) -> Result<Option<Vec<usize>>> {
    let values: Vec<i64> = values.iter().map(|v| v.expect("all indices seen")).collect();
    if values.iter().all(|&v| v == -1) {
        return Ok(None);
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            usize::try_from(v).map_err(|_| {
                Error::Consistency(format!("{name} {v} at index {i} in a partially labeled column"))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn format_metadata(n: usize, labels: Option<&[usize]>, groups: Option<&[usize]>) -> String {
    let cell = |col: Option<&[usize]>, i: usize| col.map_or(-1, |c| c[i] as i64);
    let mut out = String::from("index,label,group\n");
    for i in 0..n {
        out.push_str(&format!("{i},{},{}\n", cell(labels, i), cell(groups, i)));
    }
    out
}

pub fn write_metadata(
    path: impl AsRef<Path>,
    n: usize,
    labels: Option<&[usize]>,
    groups: Option<&[usize]>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_metadata(n, labels, groups)).map_err(|e| Error::io(path, e))
}

/// Image embeddings joined with optional class labels and evaluation cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    embeddings: EmbeddingMatrix,
    labels: Option<Vec<usize>>,
    groups: Option<Vec<usize>>,
    class_count: usize,
    group_count: usize,
}

impl GroupedDataset {
    pub fn new(
        embeddings: EmbeddingMatrix,
        labels: Option<Vec<usize>>,
        groups: Option<Vec<usize>>,
        class_count: usize,
        group_count: usize,
    ) -> Result<Self> {
        let n = embeddings.count();
        for (name, col, bound) in [
            ("label", &labels, class_count),
            ("group", &groups, group_count),
        ] {
            if let Some(col) = col {
                if col.len() != n {
                    return Err(Error::Consistency(format!(
                        "{name} column has {} entries for {n} embeddings",
                        col.len()
                    )));
                }
                if let Some((i, v)) = col.iter().enumerate().find(|(_, &v)| v >= bound) {
                    return Err(Error::Index(format!(
                        "{name} {v} at index {i} outside 0..{bound}"
                    )));
                }
            }
        }
        Ok(Self {
            embeddings,
            labels,
            groups,
            class_count,
            group_count,
        })
    }

    /// Loads an LDEB embedding file together with its metadata CSV.
    pub fn load(
        embeddings: impl AsRef<Path>,
        metadata: impl AsRef<Path>,
        class_count: usize,
        group_count: usize,
    ) -> Result<Self> {
        let emb = read_embeddings(embeddings)?;
        let meta = read_metadata(metadata, emb.count())?;
        Self::new(emb, meta.labels, meta.groups, class_count, group_count)
    }

    pub fn save(&self, embeddings: impl AsRef<Path>, metadata: impl AsRef<Path>) -> Result<()> {
        write_embeddings(&self.embeddings, embeddings)?;
        write_metadata(
            metadata,
            self.len(),
            self.labels.as_deref(),
            self.groups.as_deref(),
        )
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn groups(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::Contract("labels required".into()))
    }

    pub fn require_groups(&self) -> Result<&[usize]> {
        self.groups()
            .ok_or_else(|| Error::Contract("groups required".into()))
    }

    /// Same dataset with new embeddings of equal row count (e.g. pre-mapped
    /// through a frozen adapter).
    pub fn with_embeddings(&self, embeddings: EmbeddingMatrix) -> Result<Self> {
        if embeddings.count() != self.len() {
            return Err(Error::Shape(format!(
                "replacement has {} rows, dataset has {}",
                embeddings.count(),
                self.len()
            )));
        }
        Ok(Self {
            embeddings,
            ..self.clone()
        })
    }

    pub fn without_annotations(&self) -> Self {
        Self {
            labels: None,
            groups: None,
            ..self.clone()
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pick = |col: &Option<Vec<usize>>| col.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect());
        let embeddings = self.embeddings.select_rows(indices)?;
        Ok(Self {
            labels: pick(&self.labels),
            groups: pick(&self.groups),
            embeddings,
            ..*self
        })
    }
}

/// One set of prompt embeddings with the text each row was encoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub embeddings: EmbeddingMatrix,
    pub names: Vec<String>,
}

/// Classification prompts plus one or more debiasing prompt groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    classification: PromptGroup,
    debias_groups: Vec<PromptGroup>,
}

impl PromptSet {
    pub fn new(classification: PromptGroup, debias_groups: Vec<PromptGroup>) -> Result<Self> {
        let dim = classification.embeddings.dim();
        let check_names = |g: &PromptGroup, what: &str| -> Result<()> {
            if g.names.len() != g.embeddings.count() {
                return Err(Error::Consistency(format!(
                    "{what} has {} names for {} rows",
                    g.names.len(),
                    g.embeddings.count()
                )));
            }
            if g.embeddings.dim() != dim {
                return Err(Error::Shape(format!(
                    "{what} has dim {}, classification prompts have {dim}",
                    g.embeddings.dim()
                )));
            }
            Ok(())
        };
        check_names(&classification, "classification prompts")?;
        if classification.embeddings.count() < 2 {
            return Err(Error::Validation("need at least two classification prompts".into()));
        }
        for (j, g) in debias_groups.iter().enumerate() {
            check_names(g, &format!("debias group {j}"))?;
            if g.embeddings.count() < 2 {
                return Err(Error::Validation(format!(
                    "debias group {j} has {} rows, needs at least 2",
                    g.embeddings.count()
                )));
            }
        }
        Ok(Self {
            classification,
            debias_groups,
        })
    }

    pub fn dim(&self) -> usize {
        self.classification.embeddings.dim()
    }

    pub fn class_count(&self) -> usize {
        self.classification.embeddings.count()
    }

    pub fn classification(&self) -> &PromptGroup {
        &self.classification
    }

    pub fn debias_groups(&self) -> &[PromptGroup] {
        &self.debias_groups
    }

    /// Keeps only the listed debias groups, in the listed order.
    pub fn select_debias(&self, ids: &[usize]) -> Result<Self> {
        let groups = ids
            .iter()
            .map(|&j| {
                self.debias_groups.get(j).cloned().ok_or_else(|| {
                    Error::Index(format!(
                        "debias group {j} not in 0..{}",
                        self.debias_groups.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.classification.clone(), groups)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PromptRole {
    Classification,
    Debias,
}

/// Writes each prompt group to its own LDEB file inside `dir` and a manifest
/// `prompts.csv` describing them. Returns the manifest path.
pub fn write_prompt_set(prompts: &PromptSet, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    writer
        .write_record(["file", "role", "group_id", "row", "name"])
        .map_err(csv_err)?;

    let mut emit = |group: &PromptGroup, file: String, role: &str, gid: usize| -> Result<()> {
        write_embeddings(&group.embeddings, dir.join(&file))?;
        for (row, name) in group.names.iter().enumerate() {
            writer
                .write_record([
                    file.as_str(),
                    role,
                    &gid.to_string(),
                    &row.to_string(),
                    name.as_str(),
                ])
                .map_err(csv_err)?;
        }
        Ok(())
    };
    emit(&prompts.classification, "classification.ldeb".into(), "classification", 0)?;
    for (j, g) in prompts.debias_groups.iter().enumerate() {
        emit(g, format!("debias_{j}.ldeb"), "debias", j)?;
    }

    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(e.to_string()))?;
    let manifest = dir.join("prompts.csv");
    fs::write(&manifest, bytes).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads a prompt manifest. Files are resolved relative to the manifest's
/// directory; rows within a group keep manifest order.
pub fn read_prompt_manifest(path: impl AsRef<Path>) -> Result<PromptSet> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["file", "role", "group_id", "row", "name"] {
        return Err(Error::Parse(
            "expected prompt manifest header file,role,group_id,row,name".into(),
        ));
    }

    let mut files: BTreeMap<String, EmbeddingMatrix> = BTreeMap::new();
    let mut groups: BTreeMap<(PromptRole, usize), (Vec<f32>, Vec<String>, usize)> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let get = |k: usize| record.get(k).unwrap_or("").to_string();
        let role = match get(1).as_str() {
            "classification" => PromptRole::Classification,
            "debias" => PromptRole::Debias,
            other => return Err(Error::Parse(format!("unknown prompt role {other:?}"))),
        };
        let gid: usize = get(2)
            .parse()
            .map_err(|_| Error::Parse(format!("bad group_id {:?}", get(2))))?;
        let row: usize = get(3)
            .parse()
            .map_err(|_| Error::Parse(format!("bad row {:?}", get(3))))?;
        let file = get(0);
        if !files.contains_key(&file) {
            files.insert(file.clone(), read_embeddings(base.join(&file))?);
        }
        let m = &files[&file];
        if row >= m.count() {
            return Err(Error::Index(format!(
                "{file} has {} rows, manifest references row {row}",
                m.count()
            )));
        }
        let entry = groups
            .entry((role, gid))
            .or_insert_with(|| (Vec::new(), Vec::new(), m.dim()));
        if entry.2 != m.dim() {
            return Err(Error::Shape(format!("{file} has dim {}, group expects {}", m.dim(), entry.2)));
        }
        entry.0.extend_from_slice(m.row(row));
        entry.1.push(get(4));
    }

    let mut classification = None;
    let mut debias = Vec::new();
    for ((role, gid), (data, names, dim)) in groups {
        let group = PromptGroup {
            embeddings: EmbeddingMatrix::new(dim, data)?,
            names,
        };
        match role {
            PromptRole::Classification => {
                if classification.replace(group).is_some() {
                    return Err(Error::Consistency(
                        "more than one classification group".into(),
                    ));
                }
            }
            PromptRole::Debias => {
                if gid != debias.len() {
                    return Err(Error::Consistency(format!(
                        "debias group ids must be contiguous from 0, found {gid}"
                    )));
                }
                debias.push(group);
            }
        }
    }
    let classification = classification
        .ok_or_else(|| Error::Consistency("manifest has no classification prompts".into()))?;
    PromptSet::new(classification, debias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(dim: usize, data: &[f32]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(dim, data.to_vec()).unwrap()
    }

    #[test]
    fn single_row_payload_bytes() {
        let bytes = encode_embeddings(&matrix(2, &[1.0, 0.0])).unwrap();
        assert_eq!(bytes.len(), 24 + 8);
        assert_eq!(&bytes[..4], b"LDEB");
        assert_eq!(&bytes[24..], &[0x00, 0x00, 0x80, 0x3F, 0, 0, 0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let bytes = encode_embeddings(&EmbeddingMatrix::empty(4).unwrap()).unwrap();
        assert_eq!(bytes.len(), LDEB_HEADER_LEN);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 0);
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            EmbeddingMatrix::new(2, vec![1.0, f32::NAN]),
            Err(Error::Validation(_))
        ));
        assert!(EmbeddingMatrix::new(2, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn corrupt_headers() {
        let good = encode_embeddings(&matrix(2, &[1.0, 2.0, 3.0, 4.0])).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embeddings(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_embeddings(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[8] = 7;
        assert!(matches!(decode_embeddings(&bad), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_embeddings(truncated), Err(Error::Length(_))));
        assert!(matches!(decode_embeddings(&good[..10]), Err(Error::Length(_))));
    }

    #[test]
    fn normalized_flag_is_measured() {
        assert!(matrix(2, &[1.0, 0.0, 0.6, 0.8]).is_normalized());
        assert!(!matrix(2, &[1.0, 0.0, 0.6, 0.9]).is_normalized());
        assert!(matrix(2, &[3.0, 4.0]).l2_normalized().is_normalized());
    }

    #[test]
    fn metadata_direct_parse() {
        let meta = parse_metadata("index,label,group\n0,1,3\n1,0,0", 2).unwrap();
        assert_eq!(meta.labels, Some(vec![1, 0]));
        assert_eq!(meta.groups, Some(vec![3, 0]));
    }

    #[test]
    fn metadata_absent_groups() {
        let meta = parse_metadata("index,label,group\n0,1,-1\n1,0,-1\n", 2).unwrap();
        assert_eq!(meta.labels, Some(vec![1, 0]));
        assert_eq!(meta.groups, None);
    }

    #[test]
    fn metadata_shuffled_matches_sorted() {
        let sorted = "index,label,group\n0,1,2\n1,0,3\n2,1,0\n3,0,1\n";
        let shuffled = "index,label,group\n2,1,0\n0,1,2\n3,0,1\n1,0,3\n";
        assert_eq!(parse_metadata(sorted, 4).unwrap(), parse_metadata(shuffled, 4).unwrap());
    }

    #[test]
    fn metadata_errors() {
        let dup = "index,label,group\n0,1,0\n0,1,0\n";
        assert!(matches!(parse_metadata(dup, 2), Err(Error::Consistency(_))));
        let missing = "index,label,group\n0,1,0\n";
        assert!(matches!(parse_metadata(missing, 2), Err(Error::Consistency(_))));
        let junk = "index,label,group\n0,a,0\n";
        assert!(matches!(parse_metadata(junk, 1), Err(Error::Parse(_))));
        let header = "idx,label,group\n0,1,0\n";
        assert!(matches!(parse_metadata(header, 1), Err(Error::Parse(_))));
    }

    #[test]
    fn dataset_validates_ranges() {
        let emb = matrix(2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(GroupedDataset::new(emb.clone(), Some(vec![0, 2]), None, 2, 4).is_err());
        assert!(GroupedDataset::new(emb.clone(), Some(vec![0]), None, 2, 4).is_err());
        let ds = GroupedDataset::new(emb, Some(vec![0, 1]), Some(vec![3, 0]), 2, 4).unwrap();
        assert!(matches!(
            ds.without_annotations().require_groups(),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prompt_set_requires_two_rows_per_group() {
        let cls = PromptGroup {
            embeddings: matrix(2, &[1.0, 0.0, 0.0, 1.0]),
            names: vec!["a".into(), "b".into()],
        };
        let single = PromptGroup {
            embeddings: matrix(2, &[1.0, 0.0]),
            names: vec!["only".into()],
        };
        assert!(PromptSet::new(cls.clone(), vec![single]).is_err());
        assert!(PromptSet::new(cls.clone(), vec![cls.clone()]).is_ok());
    }

    #[test]
    fn prompt_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cls = PromptGroup {
            embeddings: matrix(2, &[1.0, 0.0, 0.0, 1.0]),
            names: vec!["a photo of a not blond hair people".into(), "a, quoted \"name\"".into()],
        };
        let debias = PromptGroup {
            embeddings: matrix(2, &[0.6, 0.8, -0.6, -0.8]),
            names: vec!["female".into(), "male".into()],
        };
        let set = PromptSet::new(cls, vec![debias.clone(), debias]).unwrap();
        let manifest = write_prompt_set(&set, dir.path()).unwrap();
        assert_eq!(read_prompt_manifest(manifest).unwrap(), set);
    }
}
