use super::{FeatureGrid, TelemetryError};

const MAGIC: &[u8; 4] = b"ATNT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// An ATNT tensor as it sits on disk: dims plus a row-major `f32` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct AtntTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl AtntTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().map(|&d| d as usize).product::<usize>(), data.len());
        AtntTensor { dims, data }
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Self {
        AtntTensor {
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

pub fn decode_atnt(bytes: &[u8]) -> Result<AtntTensor, TelemetryError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TelemetryError::BadMagic);
    }
    let header_err = |need: usize| TelemetryError::DimMismatch {
        expected: need,
        found: bytes.len(),
    };
    if bytes.len() < 10 {
        return Err(header_err(10));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(TelemetryError::UnsupportedVersion(version));
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F32 {
        return Err(TelemetryError::UnsupportedDtype(dtype));
    }
    let ndim = bytes[9] as usize;
    let payload_start = 10 + 4 * ndim;
    if bytes.len() < payload_start {
        return Err(header_err(payload_start));
    }
    let dims: Vec<u32> = bytes[10..payload_start]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(payload_start));
    let expected = count.unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(TelemetryError::DimMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[payload_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(TelemetryError::NonFiniteValue(i));
    }
    Ok(AtntTensor { dims, data })
}

pub fn encode_atnt(tensor: &AtntTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(tensor.dims.len() as u8);
    for d in &tensor.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Loads a `grid_h × grid_w × dim` feature tensor.
pub fn load_feature_tensor(bytes: &[u8]) -> Result<FeatureGrid, TelemetryError> {
    let t = decode_atnt(bytes)?;
    if t.dims.len() != 3 {
        return Err(TelemetryError::MalformedRecord {
            line: 0,
            reason: format!("feature tensor must have 3 dims, found {}", t.dims.len()),
        });
    }
    let d = t.dims_usize();
    FeatureGrid::new(d[0], d[1], d[2], t.data)
}

pub fn save_feature_tensor(grid: &FeatureGrid) -> Vec<u8> {
    encode_atnt(&AtntTensor {
        dims: vec![grid.grid_h() as u32, grid.grid_w() as u32, grid.dim() as u32],
        data: grid.data().to_vec(),
    })
}
