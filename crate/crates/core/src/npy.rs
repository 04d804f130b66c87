//! Reading and writing the numpy `.npy` format.
//!
//! Only the subset this crate exchanges is supported: C-order arrays of
//! little-endian `float32` (`<f4`) and unsigned bytes (`|u1`). Files are
//! written as format version 1.0 with the header padded to a 64-byte
//! boundary, the same layout `numpy.save` produces. Versions 2.0 and 3.0
//! are accepted when reading.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::U8 => "|u1",
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F32),
            "|u1" | "<u1" | ">u1" | "u1" => Ok(Dtype::U8),
            other => Err(Error::Npy(format!(
                "unsupported dtype '{other}' (expected '<f4' or '|u1')"
            ))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Parsed `.npy` header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dict_string(&self) -> String {
        let shape = match self.shape.len() {
            0 => "()".to_string(),
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        };
        format!(
            "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
            self.dtype.descr(),
            shape
        )
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> io::Result<()> {
        let mut dict = self.dict_string();
        // magic + version + u16 length + dict + '\n' must land on ALIGN
        let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
        let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
        dict.extend(std::iter::repeat_n(' ', pad));
        dict.push('\n');

        writer.write_all(MAGIC)?;
        writer.write_all(&[1, 0])?;
        writer.write_all(&(dict.len() as u16).to_le_bytes())?;
        writer.write_all(dict.as_bytes())
    }

    pub fn read<R: Read>(reader: &mut R) -> Result<Self> {
        let mut magic = [0u8; 6];
        read_exact(reader, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Npy("missing \\x93NUMPY magic".into()));
        }
        let mut version = [0u8; 2];
        read_exact(reader, &mut version)?;
        let header_len = match version[0] {
            1 => {
                let mut buf = [0u8; 2];
                read_exact(reader, &mut buf)?;
                u16::from_le_bytes(buf) as usize
            }
            2 | 3 => {
                let mut buf = [0u8; 4];
                read_exact(reader, &mut buf)?;
                u32::from_le_bytes(buf) as usize
            }
            v => return Err(Error::Npy(format!("unsupported format version {v}"))),
        };
        let mut raw = vec![0u8; header_len];
        read_exact(reader, &mut raw)?;
        let text = String::from_utf8(raw).map_err(|_| Error::Npy("header is not utf-8".into()))?;
        parse_dict(&text)
    }
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|e| Error::Npy(format!("truncated file: {e}")))
}

fn dict_value<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}'");
    let start = text
        .find(&needle)
        .ok_or_else(|| Error::Npy(format!("header lacks key {needle}")))?;
    let rest = text[start + needle.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Npy(format!("expected ':' after {needle}")))?;
    Ok(rest.trim_start())
}

fn parse_dict(text: &str) -> Result<Header> {
    let descr = dict_value(text, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| Error::Npy("descr is not a string".into()))?;
    let dtype = Dtype::from_descr(descr)?;

    let fortran = dict_value(text, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(Error::Npy("fortran-order arrays are not supported".into()));
    } else if !fortran.starts_with("False") {
        return Err(Error::Npy("fortran_order is not a boolean".into()));
    }

    let shape = dict_value(text, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Npy("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Header { dtype, shape })
}

/// An array loaded from an `.npy` file.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

pub fn read_from<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let header = Header::read(reader)?;
    let n = header.len();
    let mut bytes = vec![0u8; n * header.dtype.size()];
    read_exact(reader, &mut bytes)?;
    Ok(match header.dtype {
        Dtype::F32 => NpyArray::F32 {
            shape: header.shape,
            data: bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        },
        Dtype::U8 => NpyArray::U8 {
            shape: header.shape,
            data: bytes,
        },
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads only the header, leaving the payload untouched.
pub fn read_header(path: &Path) -> Result<Header> {
    Header::read(&mut open(path)?)
}

pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    match read_from(&mut open(path)?)? {
        NpyArray::F32 { shape, data } => Ok((shape, data)),
        NpyArray::U8 { .. } => Err(Error::Npy(format!(
            "{}: expected float32 data, found uint8",
            path.display()
        ))),
    }
}

pub fn read_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    match read_from(&mut open(path)?)? {
        NpyArray::U8 { shape, data } => Ok((shape, data)),
        NpyArray::F32 { .. } => Err(Error::Npy(format!(
            "{}: expected uint8 data, found float32",
            path.display()
        ))),
    }
}

pub fn write_f32_to<W: Write>(writer: &mut W, shape: &[usize], data: &[f32]) -> Result<()> {
    check_len(shape, data.len())?;
    let header = Header {
        dtype: Dtype::F32,
        shape: shape.to_vec(),
    };
    header
        .write(writer)
        .map_err(|e| Error::Npy(format!("write failed: {e}")))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    writer
        .write_all(&bytes)
        .map_err(|e| Error::Npy(format!("write failed: {e}")))
}

pub fn write_u8_to<W: Write>(writer: &mut W, shape: &[usize], data: &[u8]) -> Result<()> {
    check_len(shape, data.len())?;
    let header = Header {
        dtype: Dtype::U8,
        shape: shape.to_vec(),
    };
    header
        .write(writer)
        .and_then(|_| writer.write_all(data))
        .map_err(|e| Error::Npy(format!("write failed: {e}")))
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    write_file(path, |w| write_f32_to(w, shape, data))
}

pub fn write_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    write_file(path, |w| write_u8_to(w, shape, data))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    body(&mut writer)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Npy(format!(
            "shape {shape:?} holds {expected} elements but {len} were given"
        )));
    }
    Ok(())
}
