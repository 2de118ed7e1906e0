//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P5/P6 image to `(1, c, h, w)` with values `p / 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "file too short for a PNM header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::format(
                0,
                format!("unsupported magic {:?}; only P5 and P6 are read", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, what) in ["width", "height", "maxval"].into_iter().enumerate() {
        // whitespace and `#` comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        fields[k] = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start as u64, format!("{what} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos as u64, format!("unsupported maxval {maxval}; only 255 is read")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(pos as u64, "image has a zero extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "expected a single whitespace byte before pixel data"));
    }
    pos += 1;
    let need = w * h * channels;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::format(bytes.len() as u64, format!("truncated pixel data: need {need} bytes after offset {pos}"))
    })?;
    let plane = w * h;
    let mut data = vec![0f32; need];
    for (i, px) in pixels.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, channels, h, w], data)
}

pub fn read_image_pnm(path: &Path) -> Result<Tensor<f32>> {
    decode_pnm(&fs::read(path)?)
}

/// Encodes a `(1, c, h, w)` tensor, `c` ∈ {1, 3}, clamping to `[0, 1]`.
pub fn encode_pnm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    let magic = match (s.n, s.c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(Error::data(format!("cannot encode {s} as PNM; need (1, 1|3, h, w)"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    for i in 0..plane {
        for c in 0..s.c {
            let v = img.data()[c * plane + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_image_pnm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pnm(img)?)?;
    Ok(())
}

/// Nearest-neighbor resize: output pixel `(i, j)` takes input
/// `(floor(i·h/th), floor(j·w/tw))`.
pub fn resize_nearest(img: &Tensor<f32>, th: usize, tw: usize) -> Tensor<f32> {
    let s = img.shape();
    if (s.h, s.w) == (th, tw) {
        return img.clone();
    }
    let mut out = Tensor::zeros([s.n, s.c, th, tw]);
    let mut k = 0;
    let dst = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..th {
                let si = i * s.h / th;
                for j in 0..tw {
                    dst[k] = img.at(n, c, si, j * s.w / tw);
                    k += 1;
                }
            }
        }
    }
    out
}

/// Replicates a single channel or averages three into one as needed.
pub fn to_channels(img: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.c == channels {
        return Ok(img.clone());
    }
    let plane = s.plane();
    match (s.c, channels) {
        (1, c) => {
            let data = img.data().repeat(c);
            Tensor::from_vec([1, c, s.h, s.w], data)
        }
        (3, 1) => {
            let d = img.data();
            let data = (0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0).collect();
            Tensor::from_vec([1, 1, s.h, s.w], data)
        }
        (from, to) => Err(Error::data(format!("cannot convert a {from}-channel image to {to} channels"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_pixel() {
        let t = decode_pnm(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(t.shape().dims(), [1, 1, 1, 1]);
        assert_eq!(t.data(), &[1.0]);
    }

    #[test]
    fn ppm_shape_and_layout() {
        let mut bytes = b"P6 # comment\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0]);
        let t = decode_pnm(&bytes).unwrap();
        assert_eq!(t.shape().dims(), [1, 3, 2, 2]);
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 1, 0, 1), 1.0);
        assert_eq!(t.at(0, 2, 1, 0), 1.0);
        assert_eq!(encode_pnm(&t).unwrap(), b"P6\n2 2\n255\n\xff\0\0\0\xff\0\0\0\xff\0\0\0".to_vec());
    }

    #[test]
    fn rejects_other_formats() {
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n1"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_pnm(b"P5\n1 1\n65535\n\0\0"), Err(Error::Format { .. })));
        assert!(matches!(decode_pnm(b"P5\n2 2\n255\n\0"), Err(Error::Format { .. })));
    }

    #[test]
    fn nearest_resize_picks_even_pixels() {
        let t = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let r = resize_nearest(&t, 2, 2);
        assert_eq!(r.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn gray_to_rgb() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![0.25, 0.5]).unwrap();
        let rgb = to_channels(&t, 3).unwrap();
        assert_eq!(rgb.data(), &[0.25, 0.5, 0.25, 0.5, 0.25, 0.5]);
        assert_eq!(to_channels(&rgb, 1).unwrap(), t);
    }
}
