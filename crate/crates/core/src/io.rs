// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary formats.
//!
//! Weight container (`.jsae`):
//!
//! ```text
//! "JSAE" | version: u32 | header_len: u64 | header: UTF-8 JSON | pad
//! tensor payloads, each f32 little-endian row-major at a 64-byte offset
//! ```
//!
//! Activation dump (`.jact`):
//!
//! ```text
//! "JACT" | version: u32 | width: u32 | count: u64 | count × width f32 LE
//! ```
//!
//! All integers are little-endian. Parameters are computed in 64 bits and
//! stored in 32, so a save rounds every value to the nearest `f32`; saving
//! a loaded container reproduces it byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{JsaeError, Result};
use crate::mlp::{MlpKind, MlpParams};
use crate::sae::{SaePair, SaeParams};
use crate::synthetic::ActivationSource;

pub const WEIGHT_MAGIC: [u8; 4] = *b"JSAE";
pub const WEIGHT_VERSION: u32 = 1;
pub const DUMP_MAGIC: [u8; 4] = *b"JACT";
pub const DUMP_VERSION: u32 = 1;
pub const DUMP_HEADER_BYTES: u64 = 20;
const ALIGN: usize = 64;

/// Free-form provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightMeta {
    pub seed: u64,
    /// Arbitrary JSON, e.g. the training configuration.
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Absolute byte offset of the payload.
    offset: u64,
    /// Payload length in bytes.
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    k_input: usize,
    k_output: usize,
    mlp_kind: MlpKind,
    activation: ActivationKind,
    meta: WeightMeta,
    tensors: Vec<TensorEntry>,
}

fn mlp_tensors(mlp: &MlpParams) -> Vec<(String, ArrayViewD<'_, f64>)> {
    let mut out = vec![
        ("mlp.w1".to_string(), mlp.w1.view().into_dyn()),
        ("mlp.b1".to_string(), mlp.b1.view().into_dyn()),
        ("mlp.w2".to_string(), mlp.w2.view().into_dyn()),
        ("mlp.b2".to_string(), mlp.b2.view().into_dyn()),
    ];
    if let Some(wg) = &mlp.wg {
        out.push(("mlp.wg".to_string(), wg.view().into_dyn()));
    }
    if let Some(bg) = &mlp.bg {
        out.push(("mlp.bg".to_string(), bg.view().into_dyn()));
    }
    out
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

/// Serializes a pair and its MLP into the container layout.
pub fn encode_pair(pair: &SaePair, mlp: &MlpParams, meta: &WeightMeta) -> Result<Vec<u8>> {
    pair.validate()?;
    mlp.validate()?;
    let mut tensors: Vec<(String, ArrayViewD<'_, f64>)> = pair.named_tensors();
    tensors.extend(mlp_tensors(mlp));

    // Offsets depend on the header length, which depends on the offsets'
    // digits; iterate until the layout is stable.
    let mut data_start = 0usize;
    let (header_bytes, entries) = loop {
        let mut offset = data_start;
        let entries: Vec<TensorEntry> = tensors
            .iter()
            .map(|(name, t)| {
                let bytes = 4 * t.len();
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                    bytes: bytes as u64,
                };
                offset = align_up(offset + bytes);
                e
            })
            .collect();
        let header = Header {
            k_input: pair.input.k,
            k_output: pair.output.k,
            mlp_kind: mlp.kind,
            activation: mlp.activation,
            meta: meta.clone(),
            tensors: entries.clone(),
        };
        let bytes = serde_json::to_vec(&header)?;
        let start = align_up(16 + bytes.len());
        if start == data_start {
            break (bytes, entries);
        }
        data_start = start;
    };

    let end = entries
        .last()
        .map(|e| (e.offset + e.bytes) as usize)
        .unwrap_or(data_start);
    let mut out = Vec::with_capacity(end);
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for ((_, t), e) in tensors.iter().zip(&entries) {
        out.resize(e.offset as usize, 0);
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize, field: &str) -> Result<&'a [u8]> {
    at.checked_add(len)
        .and_then(|end| bytes.get(at..end))
        .ok_or_else(|| JsaeError::format(field, format!("file ends before byte {}", at.saturating_add(len))))
}

fn read_tensor(bytes: &[u8], e: &TensorEntry) -> Result<ArrayD<f64>> {
    let field = format!("tensors.{}", e.name);
    let count = e
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| JsaeError::format(&field, "shape product overflows"))?;
    if count.checked_mul(4) != Some(e.bytes as usize) {
        return Err(JsaeError::format(
            &field,
            format!("shape {:?} needs {} bytes, header lists {}", e.shape, count * 4, e.bytes),
        ));
    }
    if !(e.offset as usize).is_multiple_of(ALIGN) {
        return Err(JsaeError::format(&field, format!("offset {} is not 64-byte aligned", e.offset)));
    }
    let raw = take(bytes, e.offset as usize, e.bytes as usize, &field)?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| JsaeError::format(&field, err.to_string()))
}

struct Tensors {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl Tensors {
    fn take(&mut self, name: &str) -> Option<ArrayD<f64>> {
        let pos = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(pos).1)
    }

    fn matrix(&mut self, name: &str) -> Result<Array2<f64>> {
        let t = self
            .take(name)
            .ok_or_else(|| JsaeError::format(format!("tensors.{name}"), "missing"))?;
        t.into_dimensionality()
            .map_err(|_| JsaeError::format(format!("tensors.{name}"), "expected a matrix"))
    }

    fn vector(&mut self, name: &str) -> Result<Array1<f64>> {
        let t = self
            .take(name)
            .ok_or_else(|| JsaeError::format(format!("tensors.{name}"), "missing"))?;
        t.into_dimensionality()
            .map_err(|_| JsaeError::format(format!("tensors.{name}"), "expected a vector"))
    }

    fn sae(&mut self, side: &str, k: usize) -> Result<SaeParams> {
        Ok(SaeParams {
            w_enc: self.matrix(&format!("{side}.w_enc"))?,
            b_enc: self.vector(&format!("{side}.b_enc"))?,
            w_dec: self.matrix(&format!("{side}.w_dec"))?,
            b_dec: self.vector(&format!("{side}.b_dec"))?,
            k,
        })
    }
}

/// Parses a container produced by [`encode_pair`].
pub fn decode_pair(bytes: &[u8]) -> Result<(SaePair, MlpParams, WeightMeta)> {
    if take(bytes, 0, 4, "magic")? != WEIGHT_MAGIC {
        return Err(JsaeError::format("magic", "not a JSAE weight container"));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().expect("4 bytes"));
    if version != WEIGHT_VERSION {
        return Err(JsaeError::format("version", format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8, "header_len")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| JsaeError::format("header_len", "too large"))?;
    let header: Header = serde_json::from_slice(take(bytes, 16, header_len, "header")?)
        .map_err(|e| JsaeError::format("header", e.to_string()))?;

    let mut end = align_up(16 + header_len);
    let mut entries = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if (e.offset as usize) < end {
            return Err(JsaeError::format(
                format!("tensors.{}", e.name),
                format!("offset {} overlaps earlier data ending at {end}", e.offset),
            ));
        }
        entries.push((e.name.clone(), read_tensor(bytes, e)?));
        end = (e.offset + e.bytes) as usize;
    }
    if bytes.len() != end {
        return Err(JsaeError::format(
            "payload",
            format!("file has {} bytes, tensors end at {end}", bytes.len()),
        ));
    }

    let mut tensors = Tensors { entries };
    let pair = SaePair {
        input: tensors.sae("input", header.k_input)?,
        output: tensors.sae("output", header.k_output)?,
    };
    let (wg, bg) = match header.mlp_kind {
        MlpKind::Standard => (None, None),
        MlpKind::Glu => (Some(tensors.matrix("mlp.wg")?), Some(tensors.vector("mlp.bg")?)),
    };
    let mlp = MlpParams {
        kind: header.mlp_kind,
        w1: tensors.matrix("mlp.w1")?,
        b1: tensors.vector("mlp.b1")?,
        w2: tensors.matrix("mlp.w2")?,
        b2: tensors.vector("mlp.b2")?,
        wg,
        bg,
        activation: header.activation,
    };
    if let Some((name, _)) = tensors.entries.first() {
        return Err(JsaeError::format(format!("tensors.{name}"), "unexpected tensor"));
    }
    pair.validate()
        .and_then(|_| mlp.validate())
        .map_err(|e| JsaeError::format("tensors", e.to_string()))?;
    Ok((pair, mlp, header.meta))
}

pub fn save_pair(path: impl AsRef<Path>, pair: &SaePair, mlp: &MlpParams, meta: &WeightMeta) -> Result<()> {
    let bytes = encode_pair(pair, mlp, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_pair(path: impl AsRef<Path>) -> Result<(SaePair, MlpParams, WeightMeta)> {
    decode_pair(&std::fs::read(path)?)
}

/// Rounds every parameter to the nearest `f32`, the precision of the
/// container.
pub fn round_to_storage(pair: &mut SaePair) {
    for mut t in pair.tensors_mut() {
        t.mapv_inplace(|v| v as f32 as f64);
    }
}

/// Writes `xs` (one activation per row) as an activation dump.
pub fn write_dump(path: impl AsRef<Path>, xs: ndarray::ArrayView2<f64>) -> Result<()> {
    let width = u32::try_from(xs.ncols()).map_err(|_| JsaeError::invalid("width exceeds u32"))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    out.write_all(&width.to_le_bytes())?;
    out.write_all(&(xs.nrows() as u64).to_le_bytes())?;
    for &v in xs.iter() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Streaming reader over an activation dump.
#[derive(Debug)]
pub struct FileSource {
    reader: BufReader<File>,
    width: usize,
    count: u64,
    read: u64,
}

impl FileSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let size = file.metadata()?.len();
        let mut reader = BufReader::new(file);
        let mut header = [0u8; DUMP_HEADER_BYTES as usize];
        reader
            .read_exact(&mut header)
            .map_err(|_| JsaeError::format("header", format!("file has only {size} bytes")))?;
        if header[0..4] != DUMP_MAGIC {
            return Err(JsaeError::format("magic", "not a JACT activation dump"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != DUMP_VERSION {
            return Err(JsaeError::format("version", format!("unsupported version {version}")));
        }
        let width = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes"));
        if width == 0 {
            return Err(JsaeError::format("width", "must be positive"));
        }
        let expected = (width as u64)
            .checked_mul(count)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(DUMP_HEADER_BYTES));
        if expected != Some(size) {
            return Err(JsaeError::format(
                "count",
                format!("{count} rows of width {width} do not match file size {size}"),
            ));
        }
        Ok(Self {
            reader,
            width,
            count,
            read: 0,
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

impl ActivationSource for FileSource {
    fn width(&self) -> usize {
        self.width
    }

    fn next_batch(&mut self, count: usize) -> Result<Array2<f64>> {
        let rows = (count as u64).min(self.count - self.read) as usize;
        let mut raw = vec![0u8; rows * self.width * 4];
        self.reader.read_exact(&mut raw)?;
        self.read += rows as u64;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Array2::from_shape_vec((rows, self.width), values).expect("row-major payload"))
    }
}

/// Reads a whole activation dump into memory.
pub fn read_dump(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let mut source = FileSource::open(path)?;
    let count = usize::try_from(source.count).map_err(|_| JsaeError::format("count", "too large"))?;
    source.next_batch(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{make_random_mlp, MlpDims};

    fn fixture(kind: MlpKind) -> (SaePair, MlpParams, WeightMeta) {
        let mlp = make_random_mlp(MlpDims { m_x: 5, d_mlp: 7, m_y: 3 }, kind, ActivationKind::GeluErf, 1).unwrap();
        let pair = SaePair::init(5, 3, 12, 2, 2).unwrap();
        let meta = WeightMeta {
            seed: 9,
            provenance: serde_json::json!({"note": "fixture"}),
        };
        (pair, mlp, meta)
    }

    fn bits(pair: &SaePair) -> Vec<u64> {
        pair.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_after_rounding() {
        for kind in [MlpKind::Standard, MlpKind::Glu] {
            let (mut pair, mlp, meta) = fixture(kind);
            let bytes = encode_pair(&pair, &mlp, &meta).unwrap();
            let (loaded, loaded_mlp, loaded_meta) = decode_pair(&bytes).unwrap();
            round_to_storage(&mut pair);
            assert_eq!(bits(&loaded), bits(&pair));
            assert_eq!(loaded_meta, meta);
            assert_eq!(loaded_mlp.kind, kind);
            assert_eq!(loaded_mlp.w1, mlp.w1.mapv(|v| v as f32 as f64));
            assert_eq!(encode_pair(&loaded, &loaded_mlp, &loaded_meta).unwrap(), bytes);
        }
    }

    #[test]
    fn payloads_are_aligned() {
        let (pair, mlp, meta) = fixture(MlpKind::Glu);
        let bytes = encode_pair(&pair, &mlp, &meta).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(header.tensors.len(), 14);
        assert!(header.tensors.iter().all(|t| t.offset % 64 == 0));
    }

    fn field_of(err: JsaeError) -> String {
        match err {
            JsaeError::Format { field, .. } => field,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_containers_name_the_field() {
        let (pair, mlp, meta) = fixture(MlpKind::Standard);
        let bytes = encode_pair(&pair, &mlp, &meta).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field_of(decode_pair(&bad).unwrap_err()), "magic");

        let mut bad = bytes.clone();
        bad[4] = 7;
        assert_eq!(field_of(decode_pair(&bad).unwrap_err()), "version");

        for cut in [2, 10, 40, bytes.len() - 1] {
            assert!(matches!(decode_pair(&bytes[..cut]), Err(JsaeError::Format { .. })));
        }

        // Corrupt the first shape so that it disagrees with the byte count.
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        header.tensors[0].shape[0] += 1;
        let text = serde_json::to_vec(&header).unwrap();
        assert_eq!(text.len(), len);
        let mut bad = bytes.clone();
        bad[16..16 + len].copy_from_slice(&text);
        assert_eq!(field_of(decode_pair(&bad).unwrap_err()), "tensors.input.w_enc");
    }

    #[test]
    fn shape_product_mismatch_is_rejected() {
        let e = TensorEntry {
            name: "input.b_enc".into(),
            shape: vec![3],
            offset: 0,
            bytes: 16,
        };
        assert_eq!(field_of(read_tensor(&[0u8; 64], &e).unwrap_err()), "tensors.input.b_enc");
    }

    #[test]
    fn dump_round_trip_and_streaming() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.jact");
        let xs = Array2::from_shape_fn((7, 3), |(r, c)| (r * 3 + c) as f64 * 0.25 - 1.0);
        write_dump(&path, xs.view()).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), DUMP_HEADER_BYTES + 4 * 21);
        assert_eq!(read_dump(&path).unwrap(), xs);

        let mut src = FileSource::open(&path).unwrap();
        assert_eq!(src.width(), 3);
        let a = src.next_batch(4).unwrap();
        let b = src.next_batch(4).unwrap();
        assert_eq!((a.nrows(), b.nrows()), (4, 3));
        assert_eq!(src.next_batch(4).unwrap().nrows(), 0);
    }

    #[test]
    fn malformed_dumps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jact");
        let xs = Array2::<f64>::ones((4, 2));
        write_dump(&path, xs.view()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert_eq!(field_of(FileSource::open(&path).unwrap_err()), "count");
        let mut wrong = bytes.clone();
        wrong[1] = b'Z';
        std::fs::write(&path, &wrong).unwrap();
        assert_eq!(field_of(FileSource::open(&path).unwrap_err()), "magic");
        std::fs::write(&path, &bytes[..5]).unwrap();
        assert_eq!(field_of(FileSource::open(&path).unwrap_err()), "header");
    }
}
