//! Binary tensor files ("GAFT"), binary PPM image export, and the blue-to-red
//! heatmap ramp. All multi-byte integers are little-endian regardless of host;
//! payloads are row-major 32-bit floats. Writers go through a temp-file +
//! rename so a failed command never leaves a partial artifact behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"GAFT";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-gaff");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn validate_dims(dims: &[u64]) -> Result<u64> {
    if dims.is_empty() {
        return Err(Error::validation("tensor rank must be at least 1"));
    }
    let mut n: u64 = 1;
    for &d in dims {
        if d == 0 {
            return Err(Error::validation("tensor dimensions must be nonzero"));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::validation("tensor element count overflows u64"))?;
    }
    Ok(n)
}

/// Serialize a tensor to the GAFT byte layout without touching disk.
pub fn encode_tensor(dims: &[u64], data: &[f32]) -> Result<Vec<u8>> {
    let n = validate_dims(dims)?;
    if n != data.len() as u64 {
        return Err(Error::validation(format!(
            "tensor payload length {} does not match product of dims {}",
            data.len(),
            n
        )));
    }
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "tensor payload contains non-finite value {bad}"
        )));
    }
    let mut out = Vec::with_capacity(4 + 4 + 1 + 4 + dims.len() * 8 + data.len() * 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_tensor(path: &Path, dims: &[u64], data: &[f32]) -> Result<()> {
    atomic_write(path, &encode_tensor(dims, data)?)
}

/// Parse GAFT bytes. `path` is used only for error messages.
pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<(Vec<u64>, Vec<f32>)> {
    let take = |off: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes
            .get(off..off + len)
            .ok_or_else(|| Error::format(path, format!("truncated while reading {what}")))
    };
    let magic = take(0, 4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:?}, expected \"GAFT\""),
        ));
    }
    let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dtype = take(8, 1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {dtype}")));
    }
    let rank = u32::from_le_bytes(take(9, 4, "rank")?.try_into().unwrap()) as usize;
    if rank == 0 {
        return Err(Error::format(path, "rank must be at least 1"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut off = 13;
    for i in 0..rank {
        dims.push(u64::from_le_bytes(
            take(off, 8, &format!("dim {i}"))?.try_into().unwrap(),
        ));
        off += 8;
    }
    let n = validate_dims(&dims).map_err(|e| Error::format(path, e.to_string()))?;
    let payload_len = (n as usize) * 4;
    if bytes.len() < off + payload_len {
        return Err(Error::format(
            path,
            format!(
                "payload truncated: expected {} bytes, found {}",
                payload_len,
                bytes.len() - off
            ),
        ));
    }
    if bytes.len() > off + payload_len {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(n as usize);
    for i in 0..n as usize {
        let v = f32::from_le_bytes(bytes[off + i * 4..off + i * 4 + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(path, format!("non-finite payload value {v}")));
        }
        data.push(v);
    }
    Ok((dims, data))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(path, &bytes)
}

/// Write a binary P6 pixmap. `pixels` is H*W*3 row-major RGB in [0, 1];
/// each channel is stored as round(v * 255).
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::validation(format!(
            "ppm buffer length {} does not match {}x{}x3",
            pixels.len(),
            width,
            height
        )));
    }
    if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!(
            "ppm channel value {bad} outside [0, 1]"
        )));
    }
    let mut out = Vec::with_capacity(32 + pixels.len());
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend(pixels.iter().map(|&v| (v * 255.0).round() as u8));
    atomic_write(path, &out)
}

/// Little-endian byte reader shared by the container formats.
pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub off: usize,
    pub path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, off: 0, path }
    }
    pub fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.off..self.off + len)
            .ok_or_else(|| Error::format(self.path, format!("truncated while reading {what}")))?;
        self.off += len;
        Ok(s)
    }
    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn done(&self) -> Result<()> {
        if self.off != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}

/// Map scalar scores in [0, 1] onto a linear blue-to-red ramp
/// (s, 0, 1-s). Inputs are clamped, so the map is total.
pub fn heatmap_to_image(scores: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(scores.len() * 3);
    for &s in scores {
        let s = s.max(0.0).min(1.0);
        out.push(s);
        out.push(0.0);
        out.push(1.0 - s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tmpdir();
        let p = dir.path().join("t.gaft");
        let data = [1.0f32, 2.0, 3.0, 4.0];
        write_tensor(&p, &[2, 2], &data).unwrap();
        let (dims, back) = read_tensor(&p).unwrap();
        assert_eq!(dims, vec![2, 2]);
        assert_eq!(back, data);
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tmpdir();
        let p = dir.path().join("t.gaft");
        write_tensor(&p, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let len = fs::metadata(&p).unwrap().len();
        // magic + version + dtype + rank + 2 dims + 4 floats
        assert_eq!(len, 4 + 4 + 1 + 4 + 2 * 8 + 16);
    }

    #[test]
    fn empty_rank_rejected() {
        let dir = tmpdir();
        let err = write_tensor(&dir.path().join("t.gaft"), &[], &[]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn zero_dim_rejected() {
        let dir = tmpdir();
        let err = write_tensor(&dir.path().join("t.gaft"), &[0], &[]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn non_finite_rejected() {
        let dir = tmpdir();
        let err = write_tensor(&dir.path().join("t.gaft"), &[3], &[0.0, 0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tmpdir();
        let p = dir.path().join("t.gaft");
        let mut bytes = encode_tensor(&[1], &[1.0]).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tmpdir();
        let p = dir.path().join("t.gaft");
        let mut bytes = encode_tensor(&[3], &[1.0, 2.0, 3.0]).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, &bytes).unwrap();
        let err = read_tensor(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn endianness_is_fixed() {
        // 1.0f32 is 0x3f800000; little-endian payload bytes are 00 00 80 3f.
        let bytes = encode_tensor(&[1], &[1.0]).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x80, 0x3f]);
        // rank (u32 = 1) little-endian at offset 9.
        assert_eq!(&bytes[9..13], &[1, 0, 0, 0]);
    }

    #[test]
    fn ppm_pixel_bytes() {
        let dir = tmpdir();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, 1, 1, &[1.0, 0.0, 0.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0]);

        write_ppm(&p, 1, 1, &[0.5, 0.5, 0.5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[11..], &[128, 128, 128]);
    }

    #[test]
    fn ppm_out_of_range_rejected() {
        let dir = tmpdir();
        let err = write_ppm(&dir.path().join("a.ppm"), 1, 1, &[1.2, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn heatmap_ramp_endpoints_and_midpoint() {
        let img = heatmap_to_image(&[0.0, 1.0, 0.5]);
        assert_eq!(&img[0..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&img[3..6], &[1.0, 0.0, 0.0]);
        assert_eq!(&img[6..9], &[0.5, 0.0, 0.5]);
    }
}
