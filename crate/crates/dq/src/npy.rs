//! Reading and writing arrays in the NumPy `.npy` format, version 1.0.
//!
//! Layout: the magic `\x93NUMPY`, version bytes `01 00`, a little-endian
//! `u16` header length, an ASCII Python-dict header such as
//! `{'descr': '<f4', 'fortran_order': False, 'shape': (3, 2), }` padded with
//! spaces and a trailing newline so the payload starts on a 64-byte boundary,
//! then the raw little-endian payload in C order.
//!
//! Only `<f4`, `<i8` and `|u1` are supported. Fortran-order files and other
//! format versions are rejected.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dq_core::patch::Grid;
use dq_core::{AttentionMap, FeatureMatrix, LabelVector};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const PREAMBLE_LEN: usize = MAGIC.len() + 2 + 2;
const ALIGN: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum NpyError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported npy version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("fortran-order arrays are not supported")]
    FortranOrder,
    #[error("payload size mismatch (expected {expected}, found {found})")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("arrays must have at least one dimension")]
    EmptyShape,
    #[error("expected {expected}, found dtype {dtype} with shape {shape:?}")]
    Layout { expected: &'static str, dtype: &'static str, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NpyError>;

/// Element type of an array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I64,
    U8,
}

impl DType {
    pub fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::I64 => "<i8",
            DType::U8 => "|u1",
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(DType::F32),
            "<i8" => Ok(DType::I64),
            "|u1" | "<u1" => Ok(DType::U8),
            other => Err(NpyError::UnsupportedDtype(other.to_string())),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::I64(_) => DType::I64,
            ArrayData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A C-order array with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        if shape.is_empty() {
            return Err(NpyError::EmptyShape);
        }
        let expected = element_count(&shape)?;
        if expected != data.len() {
            let size = data.dtype().size();
            return Err(NpyError::PayloadMismatch { expected: expected * size, found: data.len() * size });
        }
        Ok(Self { shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    fn layout_error(&self, expected: &'static str) -> NpyError {
        NpyError::Layout { expected, dtype: self.dtype().descr(), shape: self.shape.clone() }
    }

    /// 2-D `<f4` array as a feature matrix.
    pub fn into_features(self) -> Result<FeatureMatrix> {
        match (&self.data, self.shape.as_slice()) {
            (ArrayData::F32(v), &[rows, cols]) => {
                let data = v.iter().map(|&x| f64::from(x)).collect();
                FeatureMatrix::new(data, rows, cols).map_err(|e| NpyError::Header(e.to_string()))
            }
            _ => Err(self.layout_error("2-d <f4 features")),
        }
    }

    pub fn from_features(features: &FeatureMatrix) -> Self {
        Self {
            shape: vec![features.num_samples(), features.dim()],
            data: ArrayData::F32(features.as_slice().iter().map(|&x| x as f32).collect()),
        }
    }

    /// 1-D `<i8` array as labels.
    pub fn into_labels(self) -> Result<LabelVector> {
        match (self.data, self.shape.as_slice()) {
            (ArrayData::I64(v), &[_]) => Ok(LabelVector::from_labels(v)),
            (data, _) => {
                Err(NpyError::Layout { expected: "1-d <i8 labels", dtype: data.dtype().descr(), shape: self.shape })
            }
        }
    }

    /// `<f4` attention: `(H, W)` for one image or `(n, H, W)` for a batch.
    /// Image ids are positions in the batch.
    pub fn into_attention(self) -> Result<Vec<AttentionMap>> {
        let (count, h, w) = match self.shape.as_slice() {
            [h, w] => (1, *h, *w),
            [n, h, w] => (*n, *h, *w),
            _ => return Err(self.layout_error("<f4 attention of shape (H, W) or (n, H, W)")),
        };
        let ArrayData::F32(values) = &self.data else {
            return Err(self.layout_error("<f4 attention of shape (H, W) or (n, H, W)"));
        };
        let plane = h * w;
        (0..count)
            .map(|i| {
                let vals = values[i * plane..(i + 1) * plane].iter().map(|&x| f64::from(x)).collect();
                let grid = Grid::new(h, w, vals).map_err(|e| NpyError::Header(e.to_string()))?;
                AttentionMap::new(i, grid).map_err(|e| NpyError::Header(format!("image {i}: {e}")))
            })
            .collect()
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NpyError::Header(format!("shape {shape:?} overflows")))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<NpyArray> {
    read_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_from<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    read_prefix(reader, &mut preamble)?;
    if preamble[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (preamble[6], preamble[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion(major, minor));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut header = vec![0u8; header_len];
    read_prefix(reader, &mut header)?;
    let header = std::str::from_utf8(&header).map_err(|_| NpyError::Header("header is not ASCII".into()))?;
    let dict = HeaderDict::parse(header)?;
    if dict.fortran_order {
        return Err(NpyError::FortranOrder);
    }
    let dtype = DType::from_descr(&dict.descr)?;
    let count = element_count(&dict.shape)?;
    let expected =
        count.checked_mul(dtype.size()).ok_or_else(|| NpyError::Header(format!("shape {:?} overflows", dict.shape)))?;

    let mut payload = Vec::with_capacity(expected.min(1 << 30));
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(NpyError::PayloadMismatch { expected, found: payload.len() });
    }
    let data = match dtype {
        DType::F32 => ArrayData::F32(
            payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect(),
        ),
        DType::I64 => ArrayData::I64(
            payload.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        ),
        DType::U8 => ArrayData::U8(payload),
    };
    NpyArray::new(dict.shape, data)
}

/// Fills `buf`, mapping a short read to [`NpyError::BadMagic`] before the
/// magic is complete and to a header error after.
fn read_prefix<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled < MAGIC.len() => return Err(NpyError::BadMagic),
            Ok(0) => return Err(NpyError::Header("file ends inside the header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn write_array(path: impl AsRef<Path>, array: &NpyArray) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_to(&mut writer, array)?;
    writer.flush()?;
    Ok(())
}

pub fn write_to<W: Write>(writer: &mut W, array: &NpyArray) -> Result<()> {
    if array.shape.is_empty() {
        return Err(NpyError::EmptyShape);
    }
    writer.write_all(&header_bytes(array.dtype(), &array.shape))?;
    match &array.data {
        ArrayData::F32(v) => v.iter().try_for_each(|x| writer.write_all(&x.to_le_bytes()))?,
        ArrayData::I64(v) => v.iter().try_for_each(|x| writer.write_all(&x.to_le_bytes()))?,
        ArrayData::U8(v) => writer.write_all(v)?,
    }
    Ok(())
}

/// Preamble plus padded header for the given dtype and shape.
pub fn header_bytes(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let shape_str = match shape {
        [one] => format!("({one},)"),
        dims => format!("({})", dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")),
    };
    let mut dict = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {shape_str}, }}", dtype.descr());
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    dict.extend(std::iter::repeat(' ').take((ALIGN - unpadded % ALIGN) % ALIGN));
    dict.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + dict.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let body = text
            .trim()
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or_else(|| NpyError::Header(format!("not a dict: {text:?}")))?;
        let descr = Self::value_of(body, "descr")?;
        let descr = descr
            .strip_prefix('\'')
            .and_then(|d| d.strip_suffix('\''))
            .or_else(|| descr.strip_prefix('"').and_then(|d| d.strip_suffix('"')))
            .ok_or_else(|| NpyError::Header(format!("descr is not a string: {descr}")))?
            .to_string();
        let fortran_order = match Self::value_of(body, "fortran_order")? {
            "True" => true,
            "False" => false,
            other => return Err(NpyError::Header(format!("fortran_order is {other}"))),
        };
        let shape_text = Self::value_of(body, "shape")?;
        let inner = shape_text
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| NpyError::Header(format!("shape is not a tuple: {shape_text}")))?;
        let shape = inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.trim_end_matches('L').parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| NpyError::Header(format!("bad shape {shape_text}")))?;
        if shape.is_empty() {
            return Err(NpyError::EmptyShape);
        }
        Ok(Self { descr, fortran_order, shape })
    }

    /// Raw text of the value for `key`, up to the next top-level comma.
    fn value_of<'a>(body: &'a str, key: &str) -> Result<&'a str> {
        let start = [format!("'{key}'"), format!("\"{key}\"")]
            .iter()
            .find_map(|k| body.find(k.as_str()).map(|i| i + k.len()))
            .ok_or_else(|| NpyError::Header(format!("missing key {key}")))?;
        let rest = body[start..].trim_start();
        let rest = rest.strip_prefix(':').ok_or_else(|| NpyError::Header(format!("no ':' after {key}")))?.trim_start();
        let mut depth = 0usize;
        let end = rest
            .char_indices()
            .find(|&(_, c)| match c {
                '(' => {
                    depth += 1;
                    false
                }
                ')' => {
                    depth = depth.saturating_sub(1);
                    false
                }
                ',' | '}' => depth == 0,
                _ => false,
            })
            .map_or(rest.len(), |(i, _)| i);
        Ok(rest[..end].trim())
    }
}
