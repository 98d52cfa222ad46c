//! Tensor files, the JSON-lines manifest, and memory-budget arithmetic.
//!
//! Tensor file layout (all multi-byte fields little-endian):
//!
//! | offset      | size      | field                          |
//! |-------------|-----------|--------------------------------|
//! | 0           | 4         | magic `BVWT`                   |
//! | 4           | 2         | version, currently 1           |
//! | 6           | 1         | dtype: 0 = f32, 1 = u32        |
//! | 7           | 1         | ndim, 1 or 2                   |
//! | 8           | 8 × ndim  | dims as u64                    |
//! | 8 + 8×ndim  | …         | row-major payload              |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::RowSource;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"BVWT";
pub const VERSION: u16 = 1;

/// File extension used for every tensor the pipeline writes.
pub const TENSOR_EXT: &str = "bvwt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U32 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        4
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An in-memory tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if !(1..=2).contains(&shape.len()) {
            return Err(Error::Dimension(format!(
                "tensors have 1 or 2 dimensions, got {}",
                shape.len()
            )));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dimension(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F32(m.as_slice().to_vec()),
        }
    }

    pub fn vector_f32(v: Vec<f32>) -> Self {
        Self {
            shape: vec![v.len()],
            data: TensorData::F32(v),
        }
    }

    pub fn vector_u32(v: Vec<u32>) -> Self {
        Self {
            shape: vec![v.len()],
            data: TensorData::U32(v),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Interpret as an f32 matrix; rank-1 tensors become a single row.
    pub fn into_matrix(self) -> Result<Matrix> {
        let (rows, cols) = match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => unreachable!("rank checked on construction"),
        };
        match self.data {
            TensorData::F32(v) => Matrix::from_vec(rows, cols, v),
            TensorData::U32(_) => Err(Error::Format {
                offset: 6,
                reason: "expected f32 tensor, found u32".into(),
            }),
        }
    }

    pub fn into_f32_vec(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(Error::Format {
                offset: 6,
                reason: "expected f32 tensor, found u32".into(),
            }),
        }
    }

    pub fn into_u32_vec(self) -> Result<Vec<u32>> {
        match self.data {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format {
                offset: 6,
                reason: "expected u32 tensor, found f32".into(),
            }),
        }
    }
}

fn encode_header(shape: &[usize], dtype: DType) -> Vec<u8> {
    let mut h = Vec::with_capacity(8 + 8 * shape.len());
    h.extend_from_slice(&MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.push(dtype as u8);
    h.push(shape.len() as u8);
    for &d in shape {
        h.extend_from_slice(&(d as u64).to_le_bytes());
    }
    h
}

/// Write `contents` to `path` through a temporary file in the same directory
/// that is renamed into place only after everything was written.
pub(crate) fn write_atomic(
    path: &Path,
    contents: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        contents(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let header = encode_header(&tensor.shape, tensor.dtype());
    write_atomic(path, |w| {
        w.write_all(&header)?;
        match &tensor.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::U32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    })
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

/// Stack the f32 matrices in `inputs` row-wise into one tensor at `path`,
/// holding one input in memory at a time. Returns the output shape.
pub fn concat_matrices(path: impl AsRef<Path>, inputs: &[PathBuf]) -> Result<(usize, usize)> {
    let mut rows = 0;
    let mut cols = None;
    for p in inputs {
        let h = read_tensor_header(p)?;
        let (r, c) = h.matrix_shape();
        if h.dtype != DType::F32 {
            return Err(Error::Format {
                offset: 6,
                reason: format!("{}: expected f32 tensor", p.display()),
            });
        }
        match cols {
            Some(prev) if prev != c => {
                return Err(Error::Dimension(format!(
                    "{}: {c} columns, expected {prev}",
                    p.display()
                )))
            }
            _ => cols = Some(c),
        }
        rows += r;
    }
    let cols = cols.unwrap_or(0);
    let header = encode_header(&[rows, cols], DType::F32);
    let mut pending = None;
    write_atomic(path.as_ref(), |w| {
        w.write_all(&header)?;
        for p in inputs {
            let m = match read_matrix(p) {
                Ok(m) => m,
                Err(e) => {
                    pending = Some(e);
                    return Err(std::io::Error::other("input unreadable"));
                }
            };
            for x in m.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    })
    .map_err(|e| pending.take().unwrap_or(e))?;
    Ok((rows, cols))
}

/// Parsed tensor header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    pub fn header_len(&self) -> u64 {
        8 + 8 * self.shape.len() as u64
    }

    pub fn elements(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn payload_len(&self) -> u64 {
        self.elements() * self.dtype.size() as u64
    }

    /// `(rows, cols)` view: rank-1 tensors are a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => unreachable!("rank checked on parse"),
        }
    }
}

fn read_header(r: &mut impl Read) -> Result<TensorHeader, (u64, String)> {
    let mut fixed = [0u8; 8];
    read_full(r, &mut fixed).map_err(|n| (n as u64, "truncated header".to_string()))?;
    if fixed[0..4] != MAGIC {
        return Err((0, format!("bad magic {:?}", String::from_utf8_lossy(&fixed[0..4]))));
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != VERSION {
        return Err((4, format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(fixed[6]).ok_or((6, format!("unknown dtype {}", fixed[6])))?;
    let ndim = fixed[7];
    if !(1..=2).contains(&ndim) {
        return Err((7, format!("unsupported ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for i in 0..ndim as usize {
        let mut d = [0u8; 8];
        read_full(r, &mut d)
            .map_err(|n| ((8 + 8 * i + n) as u64, "truncated header".to_string()))?;
        let d = u64::from_le_bytes(d);
        let d = usize::try_from(d).map_err(|_| ((8 + 8 * i) as u64, format!("dimension {d} too large")))?;
        shape.push(d);
    }
    let header = TensorHeader { dtype, shape };
    if header
        .shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .and_then(|n| n.checked_mul(4))
        .is_none()
    {
        return Err((8, "dimensions overflow".into()));
    }
    Ok(header)
}

/// Fill `buf`, returning the number of bytes read on a short read.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::result::Result<(), usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(filled),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => return Err(filled),
        }
    }
    Ok(())
}

fn open_checked(path: &Path) -> Result<(BufReader<File>, TensorHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let header = read_header(&mut r).map_err(|(offset, reason)| Error::Format {
        offset,
        reason: format!("{}: {reason}", path.display()),
    })?;
    let expected = header.header_len() + header.payload_len();
    if len != expected {
        return Err(Error::Corruption(format!(
            "{}: header {:?} implies {expected} bytes, file has {len}",
            path.display(),
            header.shape
        )));
    }
    Ok((r, header))
}

pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    open_checked(path.as_ref()).map(|(_, h)| h)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (mut r, header) = open_checked(path)?;
    let mut bytes = vec![0u8; header.payload_len() as usize];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let data = match header.dtype {
        DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
        DType::U32 => TensorData::U32(words.map(u32::from_le_bytes).collect()),
    };
    Tensor::new(header.shape, data)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    read_tensor(path)?.into_matrix()
}

/// Sequential and random row access to an on-disk f32 matrix without loading
/// it whole.
#[derive(Debug)]
pub struct TensorRows {
    path: PathBuf,
    reader: BufReader<File>,
    rows: usize,
    cols: usize,
    data_offset: u64,
    buf: Vec<u8>,
}

impl TensorRows {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (reader, header) = open_checked(path)?;
        if header.dtype != DType::F32 {
            return Err(Error::Format {
                offset: 6,
                reason: format!("{}: expected f32 tensor", path.display()),
            });
        }
        let (rows, cols) = header.matrix_shape();
        Ok(Self {
            path: path.to_path_buf(),
            reader,
            rows,
            cols,
            data_offset: header.header_len(),
            buf: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Read rows `start..start + count` into `out` (cleared first).
    pub fn read_rows(&mut self, start: usize, count: usize, out: &mut Vec<f32>) -> Result<()> {
        if start + count > self.rows {
            return Err(Error::Dimension(format!(
                "rows {start}..{} out of range for {} rows",
                start + count,
                self.rows
            )));
        }
        let offset = self.data_offset + (start * self.cols * 4) as u64;
        self.reader
            .seek(SeekFrom::Start(offset))
            .map_err(|e| Error::io(&self.path, e))?;
        self.buf.resize(count * self.cols * 4, 0);
        self.reader
            .read_exact(&mut self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        out.clear();
        out.extend(
            self.buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        Ok(())
    }
}

impl RowSource for TensorRows {
    fn n_rows(&self) -> usize {
        self.rows
    }

    fn dim(&self) -> usize {
        self.cols
    }

    fn read_row(&mut self, i: usize, out: &mut [f32]) -> Result<()> {
        let mut tmp = std::mem::take(&mut self.buf);
        let offset = self.data_offset + (i * self.cols * 4) as u64;
        let res = (|| {
            if i >= self.rows {
                return Err(Error::Dimension(format!("row {i} out of range")));
            }
            self.reader
                .seek(SeekFrom::Start(offset))
                .map_err(|e| Error::io(&self.path, e))?;
            tmp.resize(self.cols * 4, 0);
            self.reader
                .read_exact(&mut tmp)
                .map_err(|e| Error::io(&self.path, e))?;
            for (o, c) in out.iter_mut().zip(tmp.chunks_exact(4)) {
                *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            Ok(())
        })();
        self.buf = tmp;
        res
    }
}

/// One category of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub category_id: u32,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub descriptor_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bow_path: Option<PathBuf>,
    #[serde(default)]
    pub n_descriptors: u64,
}

/// Ground-truth category of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image_id: String,
    pub category_id: u32,
}

fn check_unique(records: &[ManifestRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[0].category_id == w[1].category_id {
            return Err(Error::DuplicateCategory(w[0].category_id));
        }
    }
    Ok(())
}

/// Read a JSON-lines manifest; records come back sorted by category id.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    records.sort_by_key(|r| r.category_id);
    check_unique(&records)?;
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.category_id);
    check_unique(&sorted)?;
    write_jsonl(path.as_ref(), &sorted)
}

/// Write one JSON object per line, atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Read one JSON object per line; blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

/// Resolve a manifest-relative path against the manifest's directory.
pub fn resolve(manifest_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join(p)
    }
}

/// Rows of `row_elems × elem_bytes` bytes that fit in `budget_bytes`.
pub fn chunk_rows(budget_bytes: u64, row_elems: u64, elem_bytes: u64) -> Result<usize> {
    if row_elems == 0 || elem_bytes == 0 {
        return Err(Error::Parameter(
            "row size and element size must be at least 1".into(),
        ));
    }
    let row_bytes = row_elems
        .checked_mul(elem_bytes)
        .ok_or_else(|| Error::Parameter("row byte size overflows".into()))?;
    let rows = budget_bytes / row_bytes;
    if rows == 0 {
        return Err(Error::Budget {
            budget: budget_bytes,
            row_bytes,
        });
    }
    Ok(usize::try_from(rows).unwrap_or(usize::MAX))
}

/// List tensor files directly inside `dir`, sorted by file name.
pub fn list_tensors(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|e| e == TENSOR_EXT) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// File stem used as the image id of a per-image tensor.
pub fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
