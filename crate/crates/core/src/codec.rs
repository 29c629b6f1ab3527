//! Binary payload encoding used inside wire-protocol frames.
//!
//! All multi-byte integers are little-endian. Strings and byte buffers are
//! length-prefixed with a `u32`. The frame envelope that carries these
//! payloads lives in [`crate::cluster`]; this module only knows how to pack
//! and unpack the bytes between the two ends of a connection.

use crate::shards::{Column, RecordBatch};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PayloadError {
    #[error("payload truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("payload string is not valid UTF-8")]
    BadUtf8,
    #[error("{0} unexpected bytes after end of payload")]
    Trailing(usize),
    #[error("unknown column kind code {0}")]
    BadColumnKind(u8),
    #[error("record batch malformed: {0}")]
    BadBatch(String),
}

/// Append-only builder for a frame payload. Methods chain.
#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// u32 byte length followed by the UTF-8 bytes.
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    /// u32 byte length followed by the raw bytes.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    /// u32 element count followed by each value as f32 little-endian.
    pub fn f32s(&mut self, v: &[f32]) -> &mut Self {
        self.u32(v.len() as u32);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a received payload. Every accessor advances past what it read;
/// call [`PayloadReader::finish`] at the end to reject trailing bytes.
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        PayloadReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.remaining() < n {
            return Err(PayloadError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, PayloadError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, PayloadError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| PayloadError::BadUtf8)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], PayloadError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>, PayloadError> {
        let count = self.u32()? as usize;
        let raw = self.take(count.checked_mul(4).ok_or(PayloadError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Succeeds only if the whole payload was consumed.
    pub fn finish(self) -> Result<(), PayloadError> {
        if self.remaining() > 0 {
            return Err(PayloadError::Trailing(self.remaining()));
        }
        Ok(())
    }
}

const COL_FLOAT: u8 = 0;
const COL_STR: u8 = 1;

/// Serialize a [`RecordBatch`] for scatter frames and task results.
///
/// Layout: u32 column count, then per column a length-prefixed name, a kind
/// byte (0 float, 1 string), a u32 row count, and the row data.
pub fn encode_record_batch(batch: &RecordBatch) -> Vec<u8> {
    let mut w = PayloadWriter::new();
    w.u32(batch.n_columns() as u32);
    for (name, col) in batch.columns() {
        w.str(name);
        match col {
            Column::Float(vals) => {
                w.u8(COL_FLOAT);
                w.f32s(vals);
            }
            Column::Str(vals) => {
                w.u8(COL_STR);
                w.u32(vals.len() as u32);
                for s in vals {
                    w.str(s);
                }
            }
        }
    }
    w.finish()
}

pub fn decode_record_batch(bytes: &[u8]) -> Result<RecordBatch, PayloadError> {
    let mut r = PayloadReader::new(bytes);
    let n_cols = r.u32()? as usize;
    let mut names = Vec::with_capacity(n_cols);
    let mut columns = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        names.push(r.str()?);
        let kind = r.u8()?;
        let col = match kind {
            COL_FLOAT => Column::Float(r.f32s()?),
            COL_STR => {
                let rows = r.u32()? as usize;
                let mut vals = Vec::with_capacity(rows.min(bytes.len()));
                for _ in 0..rows {
                    vals.push(r.str()?);
                }
                Column::Str(vals)
            }
            other => return Err(PayloadError::BadColumnKind(other)),
        };
        columns.push(col);
    }
    r.finish()?;
    RecordBatch::new(names, columns).map_err(|e| PayloadError::BadBatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip_preserves_values_and_order() {
        let mut w = PayloadWriter::new();
        w.u8(7)
            .u16(513)
            .u32(70_000)
            .u64(1 << 40)
            .f32(-1.5)
            .f64(2.25)
            .str("hello")
            .bytes(&[9, 8, 7])
            .f32s(&[0.5, -0.25]);
        let buf = w.finish();

        let mut r = PayloadReader::new(&buf);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u16().unwrap(), 513);
        assert_eq!(r.u32().unwrap(), 70_000);
        assert_eq!(r.u64().unwrap(), 1 << 40);
        assert_eq!(r.f32().unwrap(), -1.5);
        assert_eq!(r.f64().unwrap(), 2.25);
        assert_eq!(r.str().unwrap(), "hello");
        assert_eq!(r.bytes().unwrap(), &[9, 8, 7]);
        assert_eq!(r.f32s().unwrap(), vec![0.5, -0.25]);
        r.finish().unwrap();
    }

    #[test]
    fn golden_bytes_for_prefixed_string() {
        let mut w = PayloadWriter::new();
        w.str("ab");
        assert_eq!(w.finish(), vec![2, 0, 0, 0, b'a', b'b']);
    }

    #[test]
    fn truncated_read_reports_offset_and_shortfall() {
        let mut r = PayloadReader::new(&[1, 0]);
        let err = r.u32().unwrap_err();
        match err {
            PayloadError::Truncated { offset, needed } => {
                assert_eq!(offset, 0);
                assert_eq!(needed, 2);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut w = PayloadWriter::new();
        w.u8(1).u8(2);
        let buf = w.finish();
        let mut r = PayloadReader::new(&buf);
        r.u8().unwrap();
        assert!(matches!(r.finish(), Err(PayloadError::Trailing(1))));
    }

    #[test]
    fn string_length_lying_past_end_is_truncation_not_panic() {
        // Claims 100 bytes of string but carries 2.
        let buf = vec![100, 0, 0, 0, b'h', b'i'];
        let mut r = PayloadReader::new(&buf);
        assert!(matches!(r.str(), Err(PayloadError::Truncated { .. })));
    }

    #[test]
    fn invalid_utf8_is_a_distinct_error() {
        let buf = vec![2, 0, 0, 0, 0xff, 0xfe];
        let mut r = PayloadReader::new(&buf);
        assert!(matches!(r.str(), Err(PayloadError::BadUtf8)));
    }

    #[test]
    fn record_batch_round_trip() {
        let batch = RecordBatch::new(
            vec!["x".into(), "label".into()],
            vec![
                Column::Float(vec![1.0, 2.5, -3.0]),
                Column::Str(vec!["a".into(), "b".into(), "c".into()]),
            ],
        )
        .unwrap();
        let bytes = encode_record_batch(&batch);
        let back = decode_record_batch(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.names(), batch.names());
        assert_eq!(back.float_column("x").unwrap(), &[1.0, 2.5, -3.0]);
        match back.column("label").unwrap() {
            Column::Str(vals) => assert_eq!(vals, &["a", "b", "c"]),
            _ => panic!("label decoded to the wrong column kind"),
        }
    }

    #[test]
    fn empty_record_batch_round_trip() {
        let bytes = encode_record_batch(&RecordBatch::empty());
        let back = decode_record_batch(&bytes).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.n_columns(), 0);
    }

    #[test]
    fn record_batch_with_unknown_column_kind_is_rejected() {
        let mut w = PayloadWriter::new();
        w.u32(1).str("x").u8(9);
        let err = decode_record_batch(&w.finish()).unwrap_err();
        assert!(matches!(err, PayloadError::BadColumnKind(9)));
    }

    #[test]
    fn record_batch_with_ragged_columns_is_rejected() {
        // Hand-build two columns with different row counts; the constructor
        // check must surface as BadBatch rather than producing a batch.
        let mut w = PayloadWriter::new();
        w.u32(2);
        w.str("a").u8(COL_FLOAT).f32s(&[1.0, 2.0]);
        w.str("b").u8(COL_FLOAT).f32s(&[1.0]);
        let err = decode_record_batch(&w.finish()).unwrap_err();
        assert!(matches!(err, PayloadError::BadBatch(_)), "{err}");
    }
}
