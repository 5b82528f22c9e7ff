//! Binary containers: `.nta` tensor archives, `.tok` token corpora and
//! activation dumps (an `.nta` archive with a fixed entry layout).
//!
//! `.nta` layout:
//!
//! ```text
//! "NTA1" | u64 LE header length | JSON header (UTF-8) | payload
//! ```
//!
//! The header is `{"metadata": {str: str}, "entries": [{"name", "dtype",
//! "shape", "byte_offset"}]}`. Offsets are relative to the start of the
//! payload and every entry is raw little-endian `f32`.
//!
//! `.tok` layout:
//!
//! ```text
//! "TOK1" | u32 vocab_size | u32 seq_len | u64 count | count × u32 LE ids
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NTA1";
pub const CORPUS_MAGIC: &[u8; 4] = b"TOK1";

/// Entry name holding the activation payload in an activation dump.
pub const ACTIVATIONS_ENTRY: &str = "activations";
/// Recorded activation site. Only the post-GELU tap is produced today.
pub const TAP_POST_GELU: &str = "mlp_post_gelu";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n = element_count(&shape);
        if n != data.len() as u64 {
            return Err(Error::Shape(format!(
                "tensor {name:?}: shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_array2(name: impl Into<String>, a: ArrayView2<f32>) -> Self {
        let (r, c) = a.dim();
        Self {
            name: name.into(),
            shape: vec![r as u64, c as u64],
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f32>> {
        match self.shape.as_slice() {
            [r, c] => Array2::from_shape_vec((*r as usize, *c as usize), self.data.clone())
                .map_err(|e| Error::Shape(e.to_string())),
            other => Err(Error::Shape(format!(
                "tensor {:?} has rank {}, expected 2",
                self.name,
                other.len()
            ))),
        }
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn element_count(shape: &[u64]) -> u64 {
    shape.iter().product()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<u64>,
    pub byte_offset: u64,
}

impl EntryHeader {
    pub fn byte_len(&self) -> u64 {
        element_count(&self.shape) * 4
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
struct ArchiveHeader {
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    entries: Vec<EntryHeader>,
}

/// In-memory tensor archive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl TensorArchive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }
}

fn check_unique<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::DuplicateName(n.to_string()));
        }
    }
    Ok(())
}

fn encode_header(metadata: &BTreeMap<String, String>, specs: &[(String, Vec<u64>)]) -> Vec<u8> {
    let mut offset = 0u64;
    let entries = specs
        .iter()
        .map(|(name, shape)| {
            let e = EntryHeader {
                name: name.clone(),
                dtype: "f32".into(),
                shape: shape.clone(),
                byte_offset: offset,
            };
            offset += e.byte_len();
            e
        })
        .collect();
    let header = ArchiveHeader {
        metadata: metadata.clone(),
        entries,
    };
    serde_json::to_vec(&header).expect("archive header serializes")
}

/// Writes `archive` to `path`. Entries are laid out contiguously in order.
pub fn write_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let specs: Vec<_> = archive
        .tensors
        .iter()
        .map(|t| {
            if element_count(&t.shape) != t.data.len() as u64 {
                return Err(Error::Shape(format!(
                    "tensor {:?}: shape {:?} does not match {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            Ok((t.name.clone(), t.shape.clone()))
        })
        .collect::<Result<_>>()?;
    let mut w = ArchiveWriter::create(path, archive.metadata.clone(), specs)?;
    for t in &archive.tensors {
        w.write_values(&t.data)?;
    }
    w.finish()
}

/// Eagerly loads every entry of an archive.
pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let reader = ArchiveReader::open(path)?;
    let mut tensors = Vec::with_capacity(reader.entries().len());
    for e in reader.entries() {
        tensors.push(Tensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: reader.read_entry(&e.name)?,
        });
    }
    Ok(TensorArchive {
        metadata: reader.metadata().clone(),
        tensors,
    })
}

/// Sequential archive writer for payloads that do not fit in memory.
///
/// The full entry list is fixed up front; values are then appended in
/// entry order with [`ArchiveWriter::write_values`].
pub struct ArchiveWriter {
    path: PathBuf,
    out: BufWriter<File>,
    expected_bytes: u64,
    written_bytes: u64,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        metadata: BTreeMap<String, String>,
        entries: Vec<(String, Vec<u64>)>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        check_unique(entries.iter().map(|(n, _)| n.as_str()))?;
        let expected_bytes = entries.iter().map(|(_, s)| element_count(s) * 4).sum();
        let header = encode_header(&metadata, &entries);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        out.write_all(ARCHIVE_MAGIC).map_err(io)?;
        out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&header).map_err(io)?;
        Ok(Self {
            path,
            out,
            expected_bytes,
            written_bytes: 0,
        })
    }

    pub fn write_values(&mut self, values: &[f32]) -> Result<()> {
        let bytes = values.len() as u64 * 4;
        if self.written_bytes + bytes > self.expected_bytes {
            return Err(Error::Shape(format!(
                "{}: payload overflow ({} + {} > {} bytes)",
                self.path.display(),
                self.written_bytes,
                bytes,
                self.expected_bytes
            )));
        }
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out
            .write_all(&buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.written_bytes += bytes;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written_bytes != self.expected_bytes {
            return Err(Error::Shape(format!(
                "{}: wrote {} payload bytes, header declares {}",
                self.path.display(),
                self.written_bytes,
                self.expected_bytes
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Lazy archive reader. Holds only the parsed header; each read opens its
/// own file handle, so a reader can be shared across threads.
#[derive(Debug, Clone)]
pub struct ArchiveReader {
    path: PathBuf,
    payload_start: u64,
    metadata: BTreeMap<String, String>,
    entries: Vec<EntryHeader>,
}

impl ArchiveReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.clone(),
            reason,
        };
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = f.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut magic = [0u8; 4];
        if file_len < 12 {
            return Err(malformed(format!("file is only {file_len} bytes")));
        }
        f.read_exact(&mut magic).map_err(|e| Error::io(&path, e))?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::BadMagic {
                path,
                expected: "NTA1",
            });
        }
        let mut len_buf = [0u8; 8];
        f.read_exact(&mut len_buf).map_err(|e| Error::io(&path, e))?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len > file_len - 12 {
            return Err(malformed(format!(
                "header length {header_len} exceeds file size {file_len}"
            )));
        }
        let mut header_bytes = vec![0u8; header_len as usize];
        f.read_exact(&mut header_bytes)
            .map_err(|e| Error::io(&path, e))?;
        let header: ArchiveHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| malformed(e.to_string()))?;

        check_unique(header.entries.iter().map(|e| e.name.as_str()))
            .map_err(|e| malformed(e.to_string()))?;
        let payload_start = 12 + header_len;
        let mut needed = 0u64;
        for e in &header.entries {
            if e.dtype != "f32" {
                return Err(malformed(format!(
                    "entry {:?} has unsupported dtype {:?}",
                    e.name, e.dtype
                )));
            }
            let end = e
                .byte_offset
                .checked_add(e.byte_len())
                .ok_or_else(|| malformed(format!("entry {:?} overflows", e.name)))?;
            needed = needed.max(end);
        }
        if payload_start + needed > file_len {
            return Err(Error::TruncatedPayload {
                path,
                needed: payload_start + needed,
                actual: file_len,
            });
        }
        Ok(Self {
            path,
            payload_start,
            metadata: header.metadata,
            entries: header.entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn entries(&self) -> &[EntryHeader] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&EntryHeader> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn read_entry(&self, name: &str) -> Result<Vec<f32>> {
        let e = self.entry(name)?;
        self.read_range(name, 0, element_count(&e.shape))
    }

    /// Reads `count` consecutive values of entry `name` starting at element
    /// `start` (row-major order).
    pub fn read_range(&self, name: &str, start: u64, count: u64) -> Result<Vec<f32>> {
        let e = self.entry(name)?;
        if start + count > element_count(&e.shape) {
            return Err(Error::Shape(format!(
                "range {start}..{} outside entry {name:?} of {} values",
                start + count,
                element_count(&e.shape)
            )));
        }
        let mut f = File::open(&self.path).map_err(|err| Error::io(&self.path, err))?;
        f.seek(SeekFrom::Start(self.payload_start + e.byte_offset + start * 4))
            .map_err(|err| Error::io(&self.path, err))?;
        let mut bytes = vec![0u8; (count * 4) as usize];
        f.read_exact(&mut bytes)
            .map_err(|err| Error::io(&self.path, err))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Pre-tokenized corpus split into fixed-length sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    vocab_size: u32,
    seq_len: u32,
    tokens: Vec<u32>,
}

impl TokenCorpus {
    /// Builds a corpus from a raw id stream, dropping the trailing partial
    /// sequence. Returns the corpus and the number of dropped tokens.
    pub fn from_tokens(vocab_size: u32, seq_len: u32, mut tokens: Vec<u32>) -> Result<(Self, u64)> {
        if seq_len == 0 {
            return Err(Error::InvalidArgument("seq_len must be >= 1".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
        let keep = tokens.len() - tokens.len() % seq_len as usize;
        let dropped = (tokens.len() - keep) as u64;
        tokens.truncate(keep);
        Ok((
            Self {
                vocab_size,
                seq_len,
                tokens,
            },
            dropped,
        ))
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn seq_len(&self) -> u32 {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn n_tokens(&self) -> u64 {
        self.tokens.len() as u64
    }

    pub fn n_sequences(&self) -> usize {
        self.tokens.len() / self.seq_len as usize
    }

    pub fn sequences(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.tokens.chunks_exact(self.seq_len as usize)
    }

    /// Keeps only the first `n` sequences.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_sequences());
        Self {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            tokens: self.tokens[..n * self.seq_len as usize].to_vec(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(CORPUS_MAGIC).map_err(io)?;
        out.write_all(&self.vocab_size.to_le_bytes()).map_err(io)?;
        out.write_all(&self.seq_len.to_le_bytes()).map_err(io)?;
        out.write_all(&(self.tokens.len() as u64).to_le_bytes())
            .map_err(io)?;
        for t in &self.tokens {
            out.write_all(&t.to_le_bytes()).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut f = BufReader::new(File::open(path).map_err(io)?);
        let file_len = f.get_ref().metadata().map_err(io)?.len();
        if file_len < 20 {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: format!("file is only {file_len} bytes"),
            });
        }
        let mut head = [0u8; 20];
        f.read_exact(&mut head).map_err(io)?;
        if &head[..4] != CORPUS_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "TOK1",
            });
        }
        let vocab_size = u32::from_le_bytes(head[4..8].try_into().unwrap());
        let seq_len = u32::from_le_bytes(head[8..12].try_into().unwrap());
        let count = u64::from_le_bytes(head[12..20].try_into().unwrap());
        let needed = 20 + count * 4;
        if needed > file_len {
            return Err(Error::TruncatedPayload {
                path: path.into(),
                needed,
                actual: file_len,
            });
        }
        if seq_len == 0 || count % seq_len as u64 != 0 {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: format!("count {count} is not a multiple of seq_len {seq_len}"),
            });
        }
        let mut bytes = vec![0u8; (count * 4) as usize];
        f.read_exact(&mut bytes).map_err(io)?;
        let tokens: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
        Ok(Self {
            vocab_size,
            seq_len,
            tokens,
        })
    }
}

/// MLP hidden activations of one layer, neurons × tokens. Row `k` is the
/// activation vector of neuron `k` over the token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub model_id: String,
    pub checkpoint: u64,
    pub layer: u16,
    /// Position of the first column within the full token stream.
    pub token_offset: u64,
    pub values: Array2<f32>,
}

impl ActivationMatrix {
    pub fn n_neurons(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_tokens(&self) -> usize {
        self.values.ncols()
    }
}

/// Identity of an activation dump, stored in the archive metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMeta {
    pub model_id: String,
    pub checkpoint: u64,
    pub layer: u16,
    pub n_neurons: u32,
    pub n_tokens: u64,
    pub seq_len: u32,
}

impl ActivationMeta {
    fn to_metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "activations".to_string()),
            ("model_id".to_string(), self.model_id.clone()),
            ("checkpoint".to_string(), self.checkpoint.to_string()),
            ("layer".to_string(), self.layer.to_string()),
            ("seq_len".to_string(), self.seq_len.to_string()),
            ("tap".to_string(), TAP_POST_GELU.to_string()),
            ("layout".to_string(), "token_major".to_string()),
        ])
    }

    fn from_reader(reader: &ArchiveReader) -> Result<Self> {
        let md = reader.metadata();
        let bad = |reason: String| Error::MalformedHeader {
            path: reader.path().into(),
            reason,
        };
        let field = |k: &str| {
            md.get(k)
                .ok_or_else(|| bad(format!("activation metadata lacks {k:?}")))
        };
        if field("kind")? != "activations" || field("layout")? != "token_major" {
            return Err(bad("not a token-major activation dump".into()));
        }
        let parse = |k: &str| -> Result<u64> {
            field(k)?
                .parse::<u64>()
                .map_err(|e| bad(format!("metadata {k:?}: {e}")))
        };
        let e = reader.entry(ACTIVATIONS_ENTRY)?;
        let [n_tokens, n_neurons] = e.shape[..] else {
            return Err(Error::Shape(format!(
                "{}: activation entry must be rank 2, got {:?}",
                reader.path().display(),
                e.shape
            )));
        };
        Ok(Self {
            model_id: field("model_id")?.clone(),
            checkpoint: parse("checkpoint")?,
            layer: parse("layer")? as u16,
            n_neurons: n_neurons as u32,
            n_tokens,
            seq_len: parse("seq_len")? as u32,
        })
    }
}

/// Streams activations to disk as they are produced, one token (row of the
/// on-disk token-major layout) at a time.
pub struct ActivationWriter {
    inner: ArchiveWriter,
    n_neurons: usize,
}

impl ActivationWriter {
    pub fn create(path: impl AsRef<Path>, meta: &ActivationMeta) -> Result<Self> {
        let inner = ArchiveWriter::create(
            path,
            meta.to_metadata(),
            vec![(
                ACTIVATIONS_ENTRY.to_string(),
                vec![meta.n_tokens, meta.n_neurons as u64],
            )],
        )?;
        Ok(Self {
            inner,
            n_neurons: meta.n_neurons as usize,
        })
    }

    /// Appends a positions × neurons block.
    pub fn append(&mut self, block: ArrayView2<f32>) -> Result<()> {
        if block.ncols() != self.n_neurons {
            return Err(Error::Shape(format!(
                "activation block has {} neurons, dump expects {}",
                block.ncols(),
                self.n_neurons
            )));
        }
        match block.as_slice() {
            Some(s) => self.inner.write_values(s),
            None => self
                .inner
                .write_values(&block.iter().copied().collect::<Vec<_>>()),
        }
    }

    pub fn finish(self) -> Result<()> {
        self.inner.finish()
    }
}

pub fn read_activation_meta(path: impl AsRef<Path>) -> Result<ActivationMeta> {
    ActivationMeta::from_reader(&ArchiveReader::open(path)?)
}

/// Writes a whole neurons × tokens matrix as an activation dump.
pub fn write_activations(path: impl AsRef<Path>, m: &ActivationMatrix, seq_len: u32) -> Result<()> {
    let meta = ActivationMeta {
        model_id: m.model_id.clone(),
        checkpoint: m.checkpoint,
        layer: m.layer,
        n_neurons: m.n_neurons() as u32,
        n_tokens: m.n_tokens() as u64,
        seq_len,
    };
    let mut w = ActivationWriter::create(path, &meta)?;
    w.append(m.values.t())?;
    w.finish()
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationMatrix> {
    let path = path.as_ref();
    let meta = read_activation_meta(path)?;
    let mut stream = stream_activations(path, meta.n_tokens.max(1))?;
    match stream.next() {
        Some(m) => m,
        None => Ok(ActivationMatrix {
            model_id: meta.model_id,
            checkpoint: meta.checkpoint,
            layer: meta.layer,
            token_offset: 0,
            values: Array2::zeros((meta.n_neurons as usize, 0)),
        }),
    }
}

/// Iterator over token-axis slices of an activation dump.
pub struct ActivationStream {
    reader: ArchiveReader,
    meta: ActivationMeta,
    chunk_tokens: u64,
    next_token: u64,
}

impl ActivationStream {
    pub fn meta(&self) -> &ActivationMeta {
        &self.meta
    }
}

/// Opens an activation dump for chunked reading. Every slice except possibly
/// the last has exactly `chunk_tokens` columns.
pub fn stream_activations(path: impl AsRef<Path>, chunk_tokens: u64) -> Result<ActivationStream> {
    if chunk_tokens == 0 {
        return Err(Error::InvalidArgument("chunk_tokens must be >= 1".into()));
    }
    let reader = ArchiveReader::open(path)?;
    let meta = ActivationMeta::from_reader(&reader)?;
    Ok(ActivationStream {
        reader,
        meta,
        chunk_tokens,
        next_token: 0,
    })
}

impl Iterator for ActivationStream {
    type Item = Result<ActivationMatrix>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_token >= self.meta.n_tokens {
            return None;
        }
        let start = self.next_token;
        let width = self.chunk_tokens.min(self.meta.n_tokens - start);
        self.next_token += width;
        let k = self.meta.n_neurons as u64;
        let result = self
            .reader
            .read_range(ACTIVATIONS_ENTRY, start * k, width * k)
            .and_then(|raw| {
                let token_major = ArrayView2::from_shape((width as usize, k as usize), &raw)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Ok(ActivationMatrix {
                    model_id: self.meta.model_id.clone(),
                    checkpoint: self.meta.checkpoint,
                    layer: self.meta.layer,
                    token_offset: start,
                    values: token_major.t().as_standard_layout().into_owned(),
                })
            });
        Some(result)
    }
}

/// Concatenates slices along the token axis.
pub fn concat_tokens(slices: &[ActivationMatrix]) -> Result<Array2<f32>> {
    let views: Vec<_> = slices.iter().map(|m| m.values.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn single_entry_round_trip() {
        let d = tmp();
        let p = d.path().join("a.nta");
        let a = TensorArchive {
            metadata: BTreeMap::new(),
            tensors: vec![Tensor::new("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()],
        };
        write_archive(&a, &p).unwrap();
        let b = read_archive(&p).unwrap();
        assert_eq!(b.require("w").unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_archive_round_trip() {
        let d = tmp();
        let p = d.path().join("empty.nta");
        write_archive(&TensorArchive::default(), &p).unwrap();
        assert!(read_archive(&p).unwrap().tensors.is_empty());
    }

    #[test]
    fn seeded_hundred_tensors_bitwise() {
        let d = tmp();
        let p = d.path().join("many.nta");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tensors: Vec<_> = (0..100)
            .map(|i| {
                let shape: Vec<u64> = (0..rng.random_range(0..4))
                    .map(|_| rng.random_range(1..6))
                    .collect();
                let n = shape.iter().product::<u64>() as usize;
                // arbitrary bit patterns, including NaNs and infinities
                let data = (0..n).map(|_| f32::from_bits(rng.random())).collect();
                Tensor::new(format!("t{i}"), shape, data).unwrap()
            })
            .collect();
        let a = TensorArchive {
            metadata: BTreeMap::from([("k".into(), "v".into())]),
            tensors,
        };
        write_archive(&a, &p).unwrap();
        let b = read_archive(&p).unwrap();
        assert_eq!(a.metadata, b.metadata);
        assert_eq!(a.tensors.len(), b.tensors.len());
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert!(x.bitwise_eq(y), "{} differs", x.name);
        }
    }

    #[test]
    fn duplicate_name_rejected() {
        let d = tmp();
        let t = Tensor::new("w", vec![1], vec![0.0]).unwrap();
        let a = TensorArchive {
            metadata: BTreeMap::new(),
            tensors: vec![t.clone(), t],
        };
        assert!(matches!(
            write_archive(&a, d.path().join("dup.nta")),
            Err(Error::DuplicateName(n)) if n == "w"
        ));
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new("w", vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn truncated_and_malformed_are_distinct() {
        let d = tmp();
        let p = d.path().join("t.nta");
        let a = TensorArchive {
            metadata: BTreeMap::new(),
            tensors: vec![Tensor::new("w", vec![4], vec![1.0; 4]).unwrap()],
        };
        write_archive(&a, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            ArchiveReader::open(&p),
            Err(Error::TruncatedPayload { .. })
        ));

        let mut garbled = bytes.clone();
        garbled[12] = b'!';
        std::fs::write(&p, &garbled).unwrap();
        assert!(matches!(
            ArchiveReader::open(&p),
            Err(Error::MalformedHeader { .. })
        ));

        let mut wrong_magic = bytes;
        wrong_magic[0] = b'X';
        std::fs::write(&p, &wrong_magic).unwrap();
        assert!(matches!(
            ArchiveReader::open(&p),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn corpus_drops_trailing_partial_sequence() {
        let (c, dropped) = TokenCorpus::from_tokens(10, 4, (0..10).collect()).unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(c.n_tokens(), 8);
        assert_eq!(c.sequences().count(), 2);
        assert!(TokenCorpus::from_tokens(10, 4, vec![10]).is_err());
    }

    #[test]
    fn corpus_round_trip_and_layout() {
        let d = tmp();
        let p = d.path().join("c.tok");
        let (c, _) = TokenCorpus::from_tokens(300, 3, vec![1, 2, 299, 4, 5, 6]).unwrap();
        c.write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"TOK1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 300);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 6);
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(TokenCorpus::read(&p).unwrap(), c);

        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            TokenCorpus::read(&p),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    fn sample_matrix(n_neurons: usize, n_tokens: usize, seed: u64) -> ActivationMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActivationMatrix {
            model_id: "a".into(),
            checkpoint: 100,
            layer: 3,
            token_offset: 0,
            values: Array2::from_shape_fn((n_neurons, n_tokens), |_| rng.random::<f32>()),
        }
    }

    #[test]
    fn stream_widths() {
        let d = tmp();
        let p = d.path().join("act.nta");
        let m = sample_matrix(3, 10, 1);
        write_activations(&p, &m, 5).unwrap();
        let widths: Vec<_> = stream_activations(&p, 4)
            .unwrap()
            .map(|c| c.unwrap().n_tokens())
            .collect();
        assert_eq!(widths, vec![4, 4, 2]);

        let whole: Vec<_> = stream_activations(&p, 10)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0], m);
        let more: Vec<_> = stream_activations(&p, 1000)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(more[0].values, m.values);
    }

    #[test]
    fn stream_reconcatenates() {
        let d = tmp();
        let p = d.path().join("act.nta");
        let m = sample_matrix(5, 53, 2);
        write_activations(&p, &m, 1).unwrap();
        let chunks: Vec<_> = stream_activations(&p, 7)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(chunks[3].token_offset, 21);
        assert_eq!(concat_tokens(&chunks).unwrap(), m.values);
        assert_eq!(read_activations(&p).unwrap(), m);
    }

    #[test]
    fn stream_errors() {
        let d = tmp();
        assert!(matches!(
            stream_activations(d.path().join("missing.nta"), 4),
            Err(Error::Io { .. })
        ));
        let p = d.path().join("plain.nta");
        write_archive(&TensorArchive::default(), &p).unwrap();
        assert!(stream_activations(&p, 4).is_err());
        let q = d.path().join("act.nta");
        write_activations(&q, &sample_matrix(2, 3, 0), 3).unwrap();
        assert!(matches!(
            stream_activations(&q, 0),
            Err(Error::InvalidArgument(_))
        ));
    }
}
