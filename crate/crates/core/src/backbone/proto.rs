//! Protobuf wire-format reading and writing, enough for ONNX model files.

use super::BackboneError;

#[derive(Debug, Clone, Copy)]
pub enum WireValue<'a> {
    Varint(u64),
    Fixed64(u64),
    Bytes(&'a [u8]),
    Fixed32(u32),
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> BackboneError {
    BackboneError::Malformed(msg.into())
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn varint(&mut self) -> Result<u64, BackboneError> {
        let mut out = 0u64;
        for shift in (0..64).step_by(7) {
            let byte = *self.buf.get(self.pos).ok_or_else(|| malformed("truncated varint"))?;
            self.pos += 1;
            out |= ((byte & 0x7f) as u64) << shift;
            if byte & 0x80 == 0 {
                return Ok(out);
            }
        }
        Err(malformed("varint longer than 10 bytes"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], BackboneError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| malformed("truncated field"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    /// Next (field number, value), or `None` at the end of the buffer.
    pub fn next_field(&mut self) -> Result<Option<(u32, WireValue<'a>)>, BackboneError> {
        if self.pos >= self.buf.len() {
            return Ok(None);
        }
        let key = self.varint()?;
        let field = (key >> 3) as u32;
        let value = match key & 7 {
            0 => WireValue::Varint(self.varint()?),
            1 => WireValue::Fixed64(u64::from_le_bytes(self.take(8)?.try_into().unwrap())),
            2 => {
                let len = self.varint()? as usize;
                WireValue::Bytes(self.take(len)?)
            }
            5 => WireValue::Fixed32(u32::from_le_bytes(self.take(4)?.try_into().unwrap())),
            other => return Err(malformed(format!("unsupported wire type {other} for field {field}"))),
        };
        Ok(Some((field, value)))
    }
}

pub fn as_bytes<'a>(v: WireValue<'a>, what: &str) -> Result<&'a [u8], BackboneError> {
    match v {
        WireValue::Bytes(b) => Ok(b),
        _ => Err(malformed(format!("{what}: expected length-delimited field"))),
    }
}

pub fn as_string(v: WireValue<'_>, what: &str) -> Result<String, BackboneError> {
    String::from_utf8(as_bytes(v, what)?.to_vec()).map_err(|_| malformed(format!("{what}: invalid UTF-8")))
}

pub fn as_i64(v: WireValue<'_>, what: &str) -> Result<i64, BackboneError> {
    match v {
        WireValue::Varint(x) => Ok(x as i64),
        _ => Err(malformed(format!("{what}: expected varint"))),
    }
}

pub fn as_f32(v: WireValue<'_>, what: &str) -> Result<f32, BackboneError> {
    match v {
        WireValue::Fixed32(x) => Ok(f32::from_bits(x)),
        _ => Err(malformed(format!("{what}: expected fixed32"))),
    }
}

/// Appends a repeated int64 field value, packed or not.
pub fn push_i64s(out: &mut Vec<i64>, v: WireValue<'_>, what: &str) -> Result<(), BackboneError> {
    match v {
        WireValue::Varint(x) => out.push(x as i64),
        WireValue::Bytes(b) => {
            let mut r = Reader::new(b);
            while r.pos < b.len() {
                out.push(r.varint()? as i64);
            }
        }
        _ => return Err(malformed(format!("{what}: bad repeated int64 encoding"))),
    }
    Ok(())
}

pub fn push_f32s(out: &mut Vec<f32>, v: WireValue<'_>, what: &str) -> Result<(), BackboneError> {
    match v {
        WireValue::Fixed32(x) => out.push(f32::from_bits(x)),
        WireValue::Bytes(b) => {
            if b.len() % 4 != 0 {
                return Err(malformed(format!("{what}: packed float length not a multiple of 4")));
            }
            out.extend(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        _ => return Err(malformed(format!("{what}: bad repeated float encoding"))),
    }
    Ok(())
}

pub fn push_f64s(out: &mut Vec<f64>, v: WireValue<'_>, what: &str) -> Result<(), BackboneError> {
    match v {
        WireValue::Fixed64(x) => out.push(f64::from_bits(x)),
        WireValue::Bytes(b) => {
            if b.len() % 8 != 0 {
                return Err(malformed(format!("{what}: packed double length not a multiple of 8")));
            }
            out.extend(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
        }
        _ => return Err(malformed(format!("{what}: bad repeated double encoding"))),
    }
    Ok(())
}

/// Message encoder.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    fn raw_varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    fn key(&mut self, field: u32, wire: u8) {
        self.raw_varint(((field as u64) << 3) | wire as u64);
    }

    pub fn varint(&mut self, field: u32, v: i64) -> &mut Self {
        self.key(field, 0);
        self.raw_varint(v as u64);
        self
    }

    pub fn bytes(&mut self, field: u32, b: &[u8]) -> &mut Self {
        self.key(field, 2);
        self.raw_varint(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn string(&mut self, field: u32, s: &str) -> &mut Self {
        self.bytes(field, s.as_bytes())
    }

    pub fn message(&mut self, field: u32, m: Writer) -> &mut Self {
        self.bytes(field, &m.finish())
    }

    pub fn fixed32(&mut self, field: u32, v: f32) -> &mut Self {
        self.key(field, 5);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn packed_i64(&mut self, field: u32, vs: &[i64]) -> &mut Self {
        let mut inner = Writer::new();
        for &v in vs {
            inner.raw_varint(v as u64);
        }
        self.bytes(field, &inner.finish())
    }

    pub fn packed_f32(&mut self, field: u32, vs: &[f32]) -> &mut Self {
        let bytes: Vec<u8> = vs.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.bytes(field, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn writer_reader_roundtrip(ints in proptest::collection::vec(any::<i64>(), 0..20),
                                   floats in proptest::collection::vec(any::<f32>(), 0..20),
                                   s in "[a-z_]{0,12}", n in any::<i64>()) {
            let mut w = Writer::new();
            w.varint(1, n).string(2, &s).packed_i64(3, &ints).packed_f32(4, &floats).fixed32(5, 1.5);
            let bytes = w.finish();
            let mut r = Reader::new(&bytes);
            let (f, v) = r.next_field().unwrap().unwrap();
            prop_assert_eq!((f, as_i64(v, "n").unwrap()), (1, n));
            let (f, v) = r.next_field().unwrap().unwrap();
            prop_assert_eq!((f, as_string(v, "s").unwrap()), (2, s.clone()));
            let (_, v) = r.next_field().unwrap().unwrap();
            let mut got = Vec::new();
            push_i64s(&mut got, v, "ints").unwrap();
            prop_assert_eq!(got, ints);
            let (_, v) = r.next_field().unwrap().unwrap();
            let mut got = Vec::new();
            push_f32s(&mut got, v, "floats").unwrap();
            prop_assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            floats.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            let (_, v) = r.next_field().unwrap().unwrap();
            prop_assert_eq!(as_f32(v, "f").unwrap(), 1.5);
            prop_assert!(r.next_field().unwrap().is_none());
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut w = Writer::new();
        w.string(1, "hello");
        let bytes = w.finish();
        let mut r = Reader::new(&bytes[..bytes.len() - 2]);
        assert!(r.next_field().is_err());
        let mut r = Reader::new(&[0x80]);
        assert!(r.next_field().is_err());
    }
}
