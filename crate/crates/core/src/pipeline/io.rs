//! Field files (`LPF1`), 8-bit previews and binary mask images.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::masking::is_binary;

const MAGIC: &[u8; 4] = b"LPF1";

pub fn encode_field(f: &Field) -> Result<Vec<u8>> {
    let (c, h, w) = f.shape();
    let mut out = Writer::default();
    out.bytes(MAGIC);
    for d in [c, h, w] {
        out.u32(binio::to_u32(d, "dimension")?);
    }
    out.f32s(f.data());
    Ok(out.buf)
}

pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    let mut r = Reader::new(bytes, "field file");
    r.magic(MAGIC)?;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format("field dimensions overflow"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Field::new((c, h, w), data)
}

pub fn write_field(path: &Path, f: &Field) -> Result<()> {
    binio::write_atomic(path, &encode_field(f)?)
}

pub fn read_field(path: &Path) -> Result<Field> {
    decode_field(&binio::read_file(path)?)
}

/// Min-max normalised 8-bit image: `P6` for three channels, otherwise `P5`
/// of the channel mean. Returns the bytes and the `(min, max)` used.
pub fn encode_preview(f: &Field) -> (Vec<u8>, f32, f32) {
    let (c, h, w) = f.shape();
    let plane = h * w;
    let values: Vec<f32> = if c == 3 {
        (0..plane)
            .flat_map(|i| (0..3).map(move |ci| (ci, i)))
            .map(|(ci, i)| f.data()[ci * plane + i])
            .collect()
    } else {
        (0..plane)
            .map(|i| (0..c).map(|ci| f.data()[ci * plane + i]).sum::<f32>() / c as f32)
            .collect()
    };
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect();
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    (out, lo, hi)
}

/// Writes the preview and a sidecar `.txt` recording the normalisation.
pub fn write_preview(path: &Path, f: &Field) -> Result<()> {
    let (bytes, lo, hi) = encode_preview(f);
    binio::write_atomic(path, &bytes)?;
    let note = format!(
        "normalisation: min-max per file\nmin {lo}\nmax {hi}\nchannels {}\n",
        f.channels()
    );
    binio::write_atomic(&path.with_extension("txt"), note.as_bytes())
}

pub fn encode_mask_pgm(mask: &Field) -> Result<Vec<u8>> {
    let (c, h, w) = mask.shape();
    if c != 1 || !is_binary(mask) {
        return Err(Error::param(
            "mask images need a binary single-channel field",
        ));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        mask.data()
            .iter()
            .map(|&v| if v != 0.0 { 255u8 } else { 0 }),
    );
    Ok(out)
}

/// Parses a binary `P5` image whose pixels are all 0 or 255.
pub fn decode_mask_pgm(bytes: &[u8]) -> Result<Field> {
    let mut pos = 0usize;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if header[0] != "P5" {
        return Err(Error::format(format!(
            "expected P5 image, found {}",
            header[0]
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PGM header field '{s}'")))
    };
    let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval != 255 {
        return Err(Error::format("mask images must use maxval 255"));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(Error::format(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            w * h
        )));
    }
    let data = raster
        .iter()
        .map(|&b| match b {
            0 => Ok(0.0),
            255 => Ok(1.0),
            v => Err(Error::param(format!(
                "mask pixel value {v} is neither 0 nor 255"
            ))),
        })
        .collect::<Result<Vec<f32>>>()?;
    Field::new((1, h, w), data)
}

pub fn write_mask(path: &Path, mask: &Field) -> Result<()> {
    binio::write_atomic(path, &encode_mask_pgm(mask)?)
}

pub fn read_mask(path: &Path) -> Result<Field> {
    decode_mask_pgm(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip_and_rejection() {
        let f = crate::rng::normal_field(1, 2, (3, 5, 4));
        let back = decode_field(&encode_field(&f).unwrap()).unwrap();
        assert!(back.bit_eq(&f));
        let mut bad = encode_field(&f).unwrap();
        bad[0] = b'X';
        assert!(decode_field(&bad).is_err());
        let bytes = encode_field(&f).unwrap();
        assert!(decode_field(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_dims = bytes.clone();
        wrong_dims[4] = 4;
        assert!(decode_field(&wrong_dims).is_err());
    }

    #[test]
    fn preview_hand_encoded() {
        let f = Field::new((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (bytes, lo, hi) = encode_preview(&f);
        let mut expect = b"P5\n2 2\n255\n".to_vec();
        expect.extend([0u8, 85, 170, 255]);
        assert_eq!(bytes, expect);
        assert_eq!((lo, hi), (0.0, 3.0));
        let (flat, _, _) = encode_preview(&Field::filled((1, 3, 3), -4.0));
        assert!(flat[flat.len() - 9..].iter().all(|&b| b == 128));
        let (rgb, _, _) = encode_preview(&Field::filled((3, 1, 2), 1.0));
        assert!(rgb.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(rgb.len(), 11 + 6);
    }

    #[test]
    fn mask_round_trip() {
        let m = Field::from_fn((1, 3, 5), |_, y, x| ((x + y) % 2) as f32);
        let bytes = encode_mask_pgm(&m).unwrap();
        assert!(decode_mask_pgm(&bytes).unwrap().bit_eq(&m));
        let mut grey = bytes.clone();
        let last = grey.len() - 1;
        grey[last] = 17;
        assert!(decode_mask_pgm(&grey).is_err());
        assert!(encode_mask_pgm(&Field::filled((1, 2, 2), 0.5)).is_err());
        let commented = b"P5\n# note\n2 1\n255\n\xff\x00";
        assert_eq!(decode_mask_pgm(commented).unwrap().data(), &[1.0, 0.0]);
    }
}
