use crate::error::{Error, Result};

/// Bytes per `(x, y, z, reflectance)` record.
pub const RECORD_BYTES: usize = 16;

/// Decodes a velodyne `.bin` scan of packed little-endian `f32` records.
pub fn parse_velodyne(bytes: &[u8]) -> Result<Vec<[f32; 4]>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Parse(format!(
            "velodyne scan has {} bytes, not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(RECORD_BYTES)
        .map(|rec| std::array::from_fn(|k| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap())))
        .collect())
}

pub fn write_velodyne(points: &[[f32; 4]]) -> Vec<u8> {
    points.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
}
