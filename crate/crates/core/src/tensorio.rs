//! On-disk containers: dense tensors, bit-packed code streams, and benchmark reports.
//!
//! # Tensor container layout
//!
//! All integers little-endian.
//!
//! | offset | size      | field                                 |
//! |--------|-----------|---------------------------------------|
//! | 0      | 4         | magic `CQTC`                          |
//! | 4      | 4         | format version (`u32`, currently 1)   |
//! | 8      | 1         | dtype tag: 1 = f32, 2 = f64, 3 = u8   |
//! | 9      | 1         | row-major flag (0 or 1)               |
//! | 10     | 2         | rank `r` (`u16`, at least 1)          |
//! | 12     | 8·r       | dimensions (`u64` each)               |
//! | 12+8r  | …         | payload, `product(shape) × dtype size` bytes |
//!
//! # Packed code layout
//!
//! `CQPK`, version `u32`, bit width `u8`, count `u64`, then `ceil(count·c/8)`
//! payload bytes. Code `j` occupies stream bits `[j·c, (j+1)·c)`, where stream
//! bit `t` is bit `t % 8` (LSB = 0) of byte `t / 8`. Trailing bits of the last
//! byte are zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Bits, CodeVector};

pub const CONTAINER_MAGIC: [u8; 4] = *b"CQTC";
pub const PACKED_MAGIC: [u8; 4] = *b"CQPK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::U8),
            other => Err(Error::MalformedHeader(format!("unknown dtype tag {other}"))),
        }
    }
}

/// A dense tensor with a typed header and raw little-endian payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub version: u32,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub row_major: bool,
    payload: Vec<u8>,
}

impl TensorContainer {
    fn with_payload(dtype: DType, shape: Vec<usize>, payload: Vec<u8>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor shape must have at least one dimension".into()));
        }
        let expected = element_count(&shape)? * dtype.size();
        if payload.len() != expected {
            return Err(Error::PayloadLengthMismatch {
                expected,
                found: payload.len(),
            });
        }
        Ok(TensorContainer {
            version: FORMAT_VERSION,
            dtype,
            shape,
            row_major: true,
            payload,
        })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        check_finite(values.iter().map(|v| v.is_finite()))?;
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::with_payload(DType::F32, shape, payload)
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        check_finite(values.iter().map(|v| v.is_finite()))?;
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::with_payload(DType::F64, shape, payload)
    }

    pub fn from_u8(shape: Vec<usize>, values: &[u8]) -> Result<Self> {
        Self::with_payload(DType::U8, shape, values.to_vec())
    }

    /// Stores a matrix row-major as f32.
    pub fn from_matrix_f32(m: &DMatrix<f64>) -> Result<Self> {
        let values: Vec<f32> = row_major_values(m).map(|v| v as f32).collect();
        Self::from_f32(vec![m.nrows(), m.ncols()], &values)
    }

    /// Stores a matrix row-major as f64.
    pub fn from_matrix_f64(m: &DMatrix<f64>) -> Result<Self> {
        let values: Vec<f64> = row_major_values(m).collect();
        Self::from_f64(vec![m.nrows(), m.ncols()], &values)
    }

    pub fn len(&self) -> usize {
        self.payload.len() / self.dtype.size()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        match self.dtype {
            DType::F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()),
            other => Err(Error::MalformedHeader(format!("expected f32 payload, found {other:?}"))),
        }
    }

    /// Values widened to f64. Accepts f32 and f64 payloads.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        match self.dtype {
            DType::F32 => Ok(self.to_f32_vec()?.into_iter().map(f64::from).collect()),
            DType::F64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect()),
            DType::U8 => Err(Error::MalformedHeader("expected float payload, found u8".into())),
        }
    }

    pub fn to_u8_vec(&self) -> Result<Vec<u8>> {
        match self.dtype {
            DType::U8 => Ok(self.payload.clone()),
            other => Err(Error::MalformedHeader(format!("expected u8 payload, found {other:?}"))),
        }
    }

    /// Interprets a rank-2 float container as a matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected a rank-2 tensor, found shape {:?}",
                self.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let values = self.to_f64_vec()?;
        Ok(if self.row_major {
            DMatrix::from_row_slice(rows, cols, &values)
        } else {
            DMatrix::from_column_slice(rows, cols, &values)
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.shape.len() + self.payload.len());
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype.tag());
        out.push(u8::from(self.row_major));
        out.extend_from_slice(&(self.shape.len() as u16).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4)? != CONTAINER_MAGIC {
            return Err(Error::MalformedHeader("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported version {version}")));
        }
        let dtype = DType::from_tag(cur.u8()?)?;
        let row_major = match cur.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::MalformedHeader(format!("bad row-major flag {other}"))),
        };
        let rank = cur.u16()? as usize;
        if rank == 0 {
            return Err(Error::MalformedHeader("rank 0".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u64()?;
            shape.push(usize::try_from(d).map_err(|_| Error::MalformedHeader("dimension overflow".into()))?);
        }
        let expected = element_count(&shape)
            .map_err(|_| Error::MalformedHeader("shape overflow".into()))?
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::MalformedHeader("shape overflow".into()))?;
        let payload = cur.rest();
        if payload.len() != expected {
            return Err(Error::PayloadLengthMismatch {
                expected,
                found: payload.len(),
            });
        }
        let container = TensorContainer {
            version,
            dtype,
            shape,
            row_major,
            payload: payload.to_vec(),
        };
        container.check_values()?;
        Ok(container)
    }

    fn check_values(&self) -> Result<()> {
        match self.dtype {
            DType::F32 => check_finite(self.to_f32_vec()?.iter().map(|v| v.is_finite())),
            DType::F64 => check_finite(self.to_f64_vec()?.iter().map(|v| v.is_finite())),
            DType::U8 => Ok(()),
        }
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape("shape product overflows".into()))
}

fn check_finite(flags: impl Iterator<Item = bool>) -> Result<()> {
    for (index, ok) in flags.enumerate() {
        if !ok {
            return Err(Error::NonFinite { index });
        }
    }
    Ok(())
}

fn row_major_values(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedHeader("truncated header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}

pub fn write_container(path: impl AsRef<Path>, data: &TensorContainer) -> Result<()> {
    let path = path.as_ref();
    data.check_values()?;
    fs::write(path, data.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorContainer::from_bytes(&bytes)
}

/// Low-bit codes packed into a little-endian bit stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    pub bits: Bits,
    pub count: usize,
    pub payload: Vec<u8>,
}

impl PackedCodes {
    pub fn payload_len(bits: Bits, count: usize) -> usize {
        (count * bits.get() as usize).div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.payload.len());
        out.extend_from_slice(&PACKED_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.bits.get());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4)? != PACKED_MAGIC {
            return Err(Error::MalformedHeader("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported version {version}")));
        }
        let bits = Bits::new(cur.u8()? as u32)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let count = usize::try_from(cur.u64()?)
            .map_err(|_| Error::MalformedHeader("count overflow".into()))?;
        let payload = cur.rest();
        let expected = count
            .checked_mul(bits.get() as usize)
            .map(|b| b.div_ceil(8))
            .ok_or_else(|| Error::MalformedHeader("count overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::PayloadLengthMismatch {
                expected,
                found: payload.len(),
            });
        }
        Ok(PackedCodes {
            bits,
            count,
            payload: payload.to_vec(),
        })
    }
}

pub fn pack_codes(codes: &[u8], bits: Bits) -> Result<PackedCodes> {
    let c = bits.get() as u32;
    let mut payload = vec![0u8; PackedCodes::payload_len(bits, codes.len())];
    let mut acc: u32 = 0;
    let mut filled: u32 = 0;
    let mut out = 0usize;
    for (position, &code) in codes.iter().enumerate() {
        if code as usize >= bits.levels() {
            return Err(Error::CodeOutOfRange {
                code: code as u32,
                position,
                bits: bits.get(),
            });
        }
        acc |= (code as u32) << filled;
        filled += c;
        while filled >= 8 {
            payload[out] = acc as u8;
            out += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        payload[out] = acc as u8;
    }
    Ok(PackedCodes {
        bits,
        count: codes.len(),
        payload,
    })
}

pub fn unpack_codes(packed: &PackedCodes) -> Result<CodeVector> {
    let expected = PackedCodes::payload_len(packed.bits, packed.count);
    if packed.payload.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            expected,
            found: packed.payload.len(),
        });
    }
    let c = packed.bits.get() as u32;
    let mask = (1u32 << c) - 1;
    let mut codes = Vec::with_capacity(packed.count);
    let mut acc: u32 = 0;
    let mut avail: u32 = 0;
    let mut bytes = packed.payload.iter();
    for _ in 0..packed.count {
        while avail < c {
            acc |= (*bytes.next().expect("length checked") as u32) << avail;
            avail += 8;
        }
        codes.push((acc & mask) as u8);
        acc >>= c;
        avail -= c;
    }
    Ok(CodeVector::new(codes))
}

pub fn write_packed(path: impl AsRef<Path>, packed: &PackedCodes) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, packed.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<PackedCodes> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PackedCodes::from_bytes(&bytes)
}

/// One row of a benchmark or quantization report.
///
/// `instance` labels the problem the row came from (a seed, a file, or the
/// fixed regression instance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub instance: String,
    pub method: String,
    pub bits: u8,
    pub group_size: usize,
    pub block_size: usize,
    pub epochs: usize,
    pub column: usize,
    pub objective: f64,
    pub relative_objective: f64,
    pub steps: usize,
    pub wall_millis: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl ReportFormat {
    /// `.csv` maps to CSV; anything else to JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Jsonl,
        }
    }
}

/// Serializes records in the given format. Column order follows the
/// [`BenchRecord`] field order.
pub fn render_report<T: Serialize>(records: &[T], format: ReportFormat) -> Result<Vec<u8>> {
    if records.is_empty() {
        return Err(Error::EmptyReport);
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in records {
                w.serialize(r)?;
            }
            w.into_inner()
                .map_err(|e| Error::io("<csv buffer>", e.into_error()))
        }
        ReportFormat::Jsonl => {
            let mut out = Vec::new();
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                out.push(b'\n');
            }
            Ok(out)
        }
    }
}

pub fn emit_report<T: Serialize>(records: &[T], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_report(records, format)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(c: u32) -> Bits {
        Bits::new(c).unwrap()
    }

    #[test]
    fn pack_nibbles() {
        let p = pack_codes(&[1, 2], bits(4)).unwrap();
        assert_eq!(p.payload, vec![0x21]);
    }

    #[test]
    fn pack_three_bit_spills_into_second_byte() {
        let p = pack_codes(&[7, 7, 7], bits(3)).unwrap();
        assert_eq!(p.payload, vec![0xFF, 0x01]);
    }

    #[test]
    fn pack_two_bit() {
        let p = pack_codes(&[3, 0, 1, 2], bits(2)).unwrap();
        assert_eq!(p.payload, vec![0b10_01_00_11]);
        assert_eq!(p.payload, vec![0x93]);
    }

    #[test]
    fn pack_rejects_out_of_range() {
        let err = pack_codes(&[0, 4], bits(2)).unwrap_err();
        assert!(matches!(err, Error::CodeOutOfRange { code: 4, position: 1, bits: 2 }));
    }

    #[test]
    fn identity_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eye.bin");
        let c = TensorContainer::from_f32(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.payload().len(), 16);
        write_container(&path, &c).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_f32_vec().unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_tensor_is_valid() {
        let c = TensorContainer::from_f32(vec![0], &[]).unwrap();
        assert!(c.is_empty());
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.shape, vec![0]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let c = TensorContainer::from_f32(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 3);
        let err = TensorContainer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::PayloadLengthMismatch { expected: 16, found: 13 }));
    }

    #[test]
    fn truncated_header_is_malformed() {
        let c = TensorContainer::from_f32(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = c.to_bytes();
        let err = TensorContainer::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorContainer::from_bytes(&bad), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_container("/nonexistent/definitely/not/here.bin").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn nan_rejected_at_write() {
        assert!(matches!(
            TensorContainer::from_f32(vec![2], &[1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            TensorContainer::from_f64(vec![1], &[f64::INFINITY]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn nan_rejected_at_load() {
        let c = TensorContainer::from_f32(vec![2], &[1.0, 2.0]).unwrap();
        let mut bytes = c.to_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn matrix_round_trip_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = TensorContainer::from_matrix_f64(&m).unwrap();
        assert_eq!(c.to_f64_vec().unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.to_matrix().unwrap(), m);
    }

    #[test]
    fn packed_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.bin");
        let p = pack_codes(&[5, 0, 3, 7, 1], bits(3)).unwrap();
        write_packed(&path, &p).unwrap();
        let back = read_packed(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(unpack_codes(&back).unwrap().as_slice(), &[5, 0, 3, 7, 1]);
    }

    fn record(column: usize) -> BenchRecord {
        BenchRecord {
            instance: "seed-1".into(),
            method: "cd".into(),
            bits: 3,
            group_size: 0,
            block_size: 1,
            epochs: 1,
            column,
            objective: 0.5,
            relative_objective: 0.25,
            steps: 12,
            wall_millis: 1.5,
        }
    }

    #[test]
    fn csv_report_has_header_and_rows() {
        let out = String::from_utf8(render_report(&[record(0)], ReportFormat::Csv).unwrap()).unwrap();
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "instance,method,bits,group_size,block_size,epochs,column,objective,relative_objective,steps,wall_millis"
        );
    }

    #[test]
    fn jsonl_report_lines_are_flat_objects() {
        let out = String::from_utf8(render_report(&[record(0), record(1)], ReportFormat::Jsonl).unwrap()).unwrap();
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let obj = v.as_object().unwrap();
            assert!(obj.values().all(|x| !x.is_object() && !x.is_array()));
            assert_eq!(obj["column"], i);
        }
    }

    #[test]
    fn empty_report_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_report::<BenchRecord>(&[], ReportFormat::Csv, dir.path().join("r.csv")).unwrap_err();
        assert!(matches!(err, Error::EmptyReport));
        assert_eq!(err.to_string(), "empty report");
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(c in 1u32..=8, raw in proptest::collection::vec(any::<u8>(), 0..200)) {
            let b = bits(c);
            let codes: Vec<u8> = raw.iter().map(|&x| x & b.max_code()).collect();
            let packed = pack_codes(&codes, b).unwrap();
            prop_assert_eq!(packed.payload.len(), (codes.len() * c as usize).div_ceil(8));
            let back = unpack_codes(&packed).unwrap();
            prop_assert_eq!(back.as_slice(), &codes[..]);
        }

        #[test]
        fn f32_container_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 0..64)) {
            let c = TensorContainer::from_f32(vec![values.len()], &values).unwrap();
            let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
            let out = back.to_f32_vec().unwrap();
            prop_assert!(out.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
