//! Float image container.
//!
//! ```text
//! magic     4 bytes  b"FIMG"
//! version   u32 LE   1
//! height    u32 LE
//! width     u32 LE
//! channels  u32 LE
//! pixels    f64 LE × height·width·channels, row-major (y, x, c)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"FIMG";

pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 {
        return Err(Error::Invalid(format!("image must be [H, W, C], got {:?}", img.shape)));
    }
    let mut out = Vec::with_capacity(20 + img.numel() * 8);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    for &d in &img.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in &img.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |r: &str| Error::format("image", path, r);
    if bytes.len() < 20 || &bytes[..4] != IMAGE_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != 1 {
        return Err(bad("unsupported version"));
    }
    let shape = vec![word(8), word(12), word(16)];
    let numel: usize = shape.iter().product();
    if bytes.len() != 20 + numel * 8 {
        return Err(bad("size does not match header"));
    }
    let data = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode_image(img)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = Tensor::new(vec![2, 3, 1], vec![0.0, 0.5, 1.0, -1.0, 1e-300, 7.25]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(decode_image(&bytes, Path::new("m")).unwrap(), img);
        assert!(decode_image(&bytes[..bytes.len() - 8], Path::new("m")).is_err());
    }
}
