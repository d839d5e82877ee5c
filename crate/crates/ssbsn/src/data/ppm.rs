//! Binary PPM (P6) image files, 8-bit only. Round trips are byte-exact:
//! reading then writing an image we produced reproduces the file.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};
use std::io::{BufRead, Read, Write};
use std::path::Path;

/// Read one whitespace/comment-delimited header token.
fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) => {
                if !tok.is_empty() && e.kind() == std::io::ErrorKind::UnexpectedEof {
                    return Ok(tok);
                }
                return Err(Error::Format(format!("truncated header: {e}")));
            }
        }
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(b as char),
        }
    }
}

/// Read a P6 image into a `(1, 3, h, w)` tensor with values `v / 255`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::Format(format!(
            "unsupported image magic {magic:?} in {} (binary P6 only)",
            path.display()
        )));
    }
    let parse = |tok: String, what: &str| -> Result<usize> {
        tok.parse()
            .map_err(|_| Error::Format(format!("bad {what}: {tok:?}")))
    };
    let w = parse(read_token(&mut r)?, "width")?;
    let h = parse(read_token(&mut r)?, "height")?;
    let maxval = parse(read_token(&mut r)?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported maxval {maxval} (8-bit images only)"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("degenerate image size {w}x{h}")));
    }
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated pixel data: {e}")))?;
    let shape = Shape::new(1, 3, h, w);
    let mut data = vec![T::zero(); shape.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[shape.at(0, c, y, x)] = T::from_f64(raw[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::from_vec(shape, data))
}

/// Quantize `v in [0, 1]` to a byte with round-half-up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `(1, 3, h, w)` tensor as binary P6, clamping to `[0, 1]`.
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let sh = image.shape();
    assert_eq!(sh.n, 1, "write_ppm expects a single image");
    assert_eq!(sh.c, 3, "write_ppm expects 3 channels");
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", sh.w, sh.h)?;
    let data = image.data();
    let mut raw = Vec::with_capacity(sh.h * sh.w * 3);
    for y in 0..sh.h {
        for x in 0..sh.w {
            for c in 0..3 {
                raw.push(quantize(data[sh.at(0, c, y, x)].as_f64()));
            }
        }
    }
    w.write_all(&raw)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_image, PatternKind};

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = make_image::<f64>(PatternKind::Tiles { period: 4 }, 13, 17, 2);
        write_ppm(&path, &img).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_ppm::<f64>(&path).unwrap();
        let path2 = dir.path().join("img2.ppm");
        write_ppm(&path2, &back).unwrap();
        assert_eq!(first, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6 # format\n# a comment line\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_ppm::<f64>(&path).unwrap();
        assert_eq!(img.shape(), crate::tensor::Shape::new(1, 3, 1, 2));
        assert!((img.data()[0] - 10.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_magic_maxval_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P5\n2 2\n255\n0000").unwrap();
        assert!(read_ppm::<f64>(&p).is_err());
        std::fs::write(&p, b"P6\n2 2\n65535\n").unwrap();
        assert!(read_ppm::<f64>(&p).is_err());
        std::fs::write(&p, b"P6\n2 2\n255\nxy").unwrap();
        assert!(read_ppm::<f64>(&p).is_err());
    }

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
    }
}
