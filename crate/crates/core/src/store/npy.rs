//! Reading and writing NumPy `.npy` files (format version 1.0).
//!
//! Only little-endian `float32` (`'<f4'`) is accepted for bundle arrays.
//! Fitted detector state is stored as `'<f8'` through the `_f64` variants.
//! Fortran-ordered files are transposed to row-major on load; files are
//! always written in C order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::array::{Array, ArrayF32, ArrayF64};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const PREAMBLE_LEN: usize = MAGIC.len() + 2 + 2;
const ALIGN: usize = 64;

/// Element types with a fixed little-endian NPY encoding.
pub trait NpyElement: Copy {
    const DESCR: &'static str;
    const SIZE: usize;
    fn from_le(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
}

impl NpyElement for f32 {
    const DESCR: &'static str = "<f4";
    const SIZE: usize = 4;
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl NpyElement for f64 {
    const DESCR: &'static str = "<f8";
    const SIZE: usize = 8;
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<ArrayF32> {
    read_path(path.as_ref())
}

pub fn write_npy(array: &ArrayF32, path: impl AsRef<Path>) -> Result<()> {
    write_path(array, path.as_ref())
}

pub fn read_npy_f64(path: impl AsRef<Path>) -> Result<ArrayF64> {
    read_path(path.as_ref())
}

pub fn write_npy_f64(array: &ArrayF64, path: impl AsRef<Path>) -> Result<()> {
    write_path(array, path.as_ref())
}

fn read_path<T: NpyElement>(path: &Path) -> Result<Array<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}

fn write_path<T: NpyElement>(array: &Array<T>, path: &Path) -> Result<()> {
    let bytes = encode(array);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Serializes an array into NPY v1.0 bytes.
pub fn encode<T: NpyElement>(array: &Array<T>) -> Vec<u8> {
    let shape = match array.shape() {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        T::DESCR,
        shape
    );
    let unpadded = PREAMBLE_LEN + header.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + array.len() * T::SIZE);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in array.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses NPY v1.0 bytes.
pub fn decode<T: NpyElement>(bytes: &[u8]) -> Result<Array<T>> {
    if bytes.len() < PREAMBLE_LEN || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Format(format!(
            "unsupported NPY version {major}.{minor} (only 1.0 is read)"
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = PREAMBLE_LEN + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("header extends past end of file".into()));
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE_LEN..payload_start])
        .map_err(|_| Error::Format("header is not valid text".into()))?;
    let header = Header::parse(text)?;
    if header.descr != T::DESCR {
        return Err(Error::UnsupportedDtype {
            found: header.descr,
            expected: T::DESCR,
        });
    }

    let count: usize = header.shape.iter().product();
    let payload = &bytes[payload_start..];
    let expected = count * T::SIZE;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes but shape {:?} requires {expected}",
            payload.len(),
            header.shape
        )));
    }
    let mut data: Vec<T> = payload.chunks_exact(T::SIZE).map(T::from_le).collect();
    if header.fortran_order && header.shape.len() > 1 {
        data = fortran_to_c(&data, &header.shape);
    }
    Array::new(header.shape, data)
}

/// Reorders column-major data into row-major order for an arbitrary rank.
fn fortran_to_c<T: Copy>(data: &[T], shape: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut f_strides = vec![1usize; rank];
    for k in 1..rank {
        f_strides[k] = f_strides[k - 1] * shape[k - 1];
    }
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = index.iter().zip(&f_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for k in (0..rank).rev() {
            index[k] += 1;
            if index[k] < shape[k] {
                break;
            }
            index[k] = 0;
        }
    }
    out
}

#[derive(Debug, PartialEq)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl Header {
    /// Parses the Python dict literal written by `numpy.lib.format`.
    fn parse(text: &str) -> Result<Header> {
        let mut p = Parser {
            s: text.trim_end().as_bytes(),
            pos: 0,
        };
        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;

        p.expect(b'{')?;
        loop {
            p.skip_ws();
            if p.eat(b'}') {
                break;
            }
            let key = p.string()?;
            p.skip_ws();
            p.expect(b':')?;
            p.skip_ws();
            match key.as_str() {
                "descr" => descr = Some(p.string()?),
                "fortran_order" => fortran_order = Some(p.boolean()?),
                "shape" => shape = Some(p.tuple()?),
                other => return Err(Error::Format(format!("unexpected header key '{other}'"))),
            }
            p.skip_ws();
            if !p.eat(b',') {
                p.skip_ws();
                p.expect(b'}')?;
                break;
            }
        }
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(Error::Format("trailing characters after header dict".into()));
        }

        let missing = |k: &str| Error::Format(format!("header lacks '{k}'"));
        Ok(Header {
            descr: descr.ok_or_else(|| missing("descr"))?,
            fortran_order: fortran_order.ok_or_else(|| missing("fortran_order"))?,
            shape: shape.ok_or_else(|| missing("shape"))?,
        })
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected '{}' at header offset {}",
                c as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.s.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(Error::Format(format!("expected string at offset {}", self.pos))),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.s.len() {
            return Err(Error::Format("unterminated string in header".into()));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn boolean(&mut self) -> Result<bool> {
        let rest = &self.s[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(Error::Format("expected True or False in header".into()))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(Error::Format("expected integer in shape tuple".into()));
            }
            let digits = std::str::from_utf8(&self.s[start..self.pos]).expect("ascii digits");
            dims.push(
                digits
                    .parse()
                    .map_err(|_| Error::Format(format!("shape extent {digits} out of range")))?,
            );
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}
