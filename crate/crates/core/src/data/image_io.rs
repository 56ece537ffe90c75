//! Image codecs and resampling: 8-bit RGB PNG for images, PGM (8-bit for
//! masks, 16-bit big-endian for heatmaps), and exact area-average
//! resampling. All writes go through a temp file and an atomic rename.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn from_unit(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write bytes to `path` atomically (temp file in the same directory,
/// then rename). No partial files on failure.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))
        .map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Encode a `[3,H,W]` unit-range tensor as RGB8 PNG.
pub fn write_png_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("png writer expects [3,H,W], got {:?}", image.shape())))?;
    if c != 3 {
        return Err(Error::config(format!("png writer expects 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                from_unit(image.at(&[0, y, x])),
                from_unit(image.at(&[1, y, x])),
                from_unit(image.at(&[2, y, x])),
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    atomic_write(path, &bytes)
}

/// Decode a PNG to a `[3,H,W]` unit-range tensor (any source color type is
/// converted to RGB8 first).
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set(&[c, y, x], to_unit(px[c]));
            }
        }
    }
    Ok(t)
}

/// 8-bit binary PGM (P5, maxval 255) from a `[H,W]` unit-range tensor.
pub fn write_pgm8(path: &Path, map: &Tensor) -> Result<()> {
    let [h, w]: [usize; 2] = map
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("pgm writer expects [H,W], got {:?}", map.shape())))?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| from_unit(v)));
    atomic_write(path, &bytes)
}

/// 16-bit binary PGM (P5, maxval 65535, big-endian samples).
pub fn write_pgm16(path: &Path, samples: &[u16], h: usize, w: usize) -> Result<()> {
    if samples.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "write_pgm16",
            left: vec![samples.len()],
            right: vec![h, w],
        });
    }
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &s in samples {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    atomic_write(path, &bytes)
}

/// Read a binary PGM (maxval 255 or 65535) to a `[H,W]` unit-range tensor.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut fields: Vec<u64> = Vec::new();
    if bytes.get(..2) != Some(b"P5") {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    pos += 2;
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && (bytes[pos] as char).is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed PGM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-utf8 header"))?;
        fields.push(text.parse().map_err(|_| bad("bad header number"))?);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    let mut t = Tensor::zeros(&[h, w]);
    match maxval {
        255 => {
            let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
            for (o, &b) in t.data_mut().iter_mut().zip(data) {
                *o = b as f32 / 255.0;
            }
        }
        65535 => {
            let data = bytes
                .get(pos..pos + 2 * w * h)
                .ok_or_else(|| bad("truncated pixel data"))?;
            for (o, pair) in t.data_mut().iter_mut().zip(data.chunks_exact(2)) {
                *o = u16::from_be_bytes([pair[0], pair[1]]) as f32 / 65535.0;
            }
        }
        other => return Err(bad(&format!("unsupported maxval {other}"))),
    }
    Ok(t)
}

/// Exact area-average resampling of a `[C,H,W]` tensor. Integer-factor
/// downsampling reduces to plain box averaging; constants are preserved.
pub fn resize_area(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("resize expects [C,H,W], got {:?}", image.shape())))?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target must be positive".to_string()));
    }
    if out_h == h && out_w == w {
        return Ok(image.clone());
    }
    let overlaps = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let mut weights = Vec::new();
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(n_in);
                for i in first..last {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        weights.push((i, overlap / scale));
                    }
                }
                weights
            })
            .collect()
    };
    let rows = overlaps(h, out_h);
    let cols = overlaps(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for (oy, rws) in rows.iter().enumerate() {
            for (ox, cws) in cols.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(iy, wy) in rws {
                    for &(ix, wx) in cws {
                        acc += image.at(&[ch, iy, ix]) as f64 * wy * wx;
                    }
                }
                out.set(&[ch, oy, ox], acc as f32);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand::Rng;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut rng = rng_from(1, 0, 0);
        let img = Tensor::uniform(&[3, 9, 7], 0.0, 1.0, &mut rng);
        write_png_rgb(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (&a, &b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn quantized_values_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.png");
        let mut rng = rng_from(2, 0, 0);
        let img = Tensor::from_fn(&[3, 8, 8], |_| {
            to_unit((rng.gen_range(0.0..1.0f64) * 255.0) as u8)
        });
        write_png_rgb(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn mask_round_trip_preserves_binary_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut rng = rng_from(3, 0, 0);
        let mask = Tensor::from_fn(&[6, 6], |_| if rng.gen_range(0.0..1.0) < 0.4 { 1.0 } else { 0.0 });
        write_pgm8(&path, &mask).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn pgm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        let samples: Vec<u16> = vec![0, 1, 65535, 40000, 255, 256];
        write_pgm16(&path, &samples, 2, 3).unwrap();
        let back = read_pgm(&path).unwrap();
        for (i, &s) in samples.iter().enumerate() {
            assert!((back.data()[i] - s as f32 / 65535.0).abs() < 1e-7);
        }
    }

    #[test]
    fn downsample_of_constant_is_constant() {
        let img = Tensor::filled(&[3, 8, 8], 0.42);
        let out = resize_area(&img, 4, 4).unwrap();
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_factor_downsample_is_box_average() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_area(&img, 1, 1).unwrap();
        assert!((out.at(&[0, 0, 0]) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn corrupt_file_reports_filename() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = read_png(&path).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn truncated_pgm_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
