//! Grayscale image container, file codecs, mirror padding and bilinear
//! sampling / patch extraction.
//!
//! Two on-disk formats are supported and nothing else:
//! - binary PGM ("P5", maxval 255), values divided by 255 on decode;
//! - `rawf32`: a 16-byte header (`LPIM`, u32 height, u32 width, little
//!   endian) followed by `H*W` little-endian f32 intensities.

use crate::error::{Error, Result};
use crate::geometry::{GridKind, SamplingGrid};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Supported byte-level image encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm8,
    RawF32,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{} values ({height}x{width})", height * width),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite intensity at index {i}"
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// All-zero image.
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }
}

fn read_u32_le(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Decode {
            offset: bytes.len(),
            msg: "truncated header".into(),
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Decode an image from bytes in the given format.
pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Image> {
    match format {
        ImageFormat::Pgm8 => decode_pgm8(bytes),
        ImageFormat::RawF32 => decode_rawf32(bytes),
    }
}

fn decode_pgm8(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Decode {
            offset: 0,
            msg: "expected binary PGM magic \"P5\"".into(),
        });
    }
    let mut pos = 2usize;

    // Header tokens: width, height, maxval; whitespace separated, with
    // '#' comment lines allowed.
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode {
                offset: pos,
                msg: "expected integer header field".into(),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| Error::Decode {
            offset: start,
            msg: "header field out of range".into(),
        })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Decode {
            offset: pos,
            msg: format!("unsupported maxval {maxval}, only 255"),
        });
    }
    // single whitespace byte after maxval
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Decode {
            offset: pos,
            msg: "missing whitespace after maxval".into(),
        });
    }
    pos += 1;
    let expected = height * width;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Decode {
            offset: bytes.len(),
            msg: format!(
                "truncated pixel data: expected {expected} bytes, found {}",
                payload.len()
            ),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(height, width, data)
}

const RAWF32_MAGIC: &[u8; 4] = b"LPIM";

fn decode_rawf32(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 4 || &bytes[0..4] != RAWF32_MAGIC {
        return Err(Error::Decode {
            offset: 0,
            msg: "expected rawf32 magic \"LPIM\"".into(),
        });
    }
    let height = read_u32_le(bytes, 4)? as usize;
    let width = read_u32_le(bytes, 8)? as usize;
    // bytes 12..16 reserved, must be present
    read_u32_le(bytes, 12)?;
    let expected = height * width;
    let payload = &bytes[16..];
    if payload.len() < expected * 4 {
        return Err(Error::Decode {
            offset: bytes.len(),
            msg: format!(
                "truncated pixel data: expected {} bytes, found {}",
                expected * 4,
                payload.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(expected);
    for i in 0..expected {
        let v = f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Decode {
                offset: 16 + i * 4,
                msg: "non-finite intensity".into(),
            });
        }
        data.push(v);
    }
    Image::new(height, width, data)
}

/// Encode an image as binary PGM (P5, maxval 255). Values are clamped to
/// `[0,1]` and rounded to 8 bits.
pub fn encode_pgm8(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Encode an image in the lossless rawf32 format.
pub fn encode_rawf32(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data().len() * 4);
    out.extend_from_slice(RAWF32_MAGIC);
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// rawf32 variant for depth maps: negative values are allowed and act as
/// the invalid/occluded sentinel, so the finiteness check is the only guard.
pub fn decode_rawf32_any(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let img = decode_rawf32(bytes)?;
    Ok((img.height, img.width, img.data))
}

/// Mirror-pad an image by `pad` pixels on every side, reflecting without
/// repeating the border pixel (the sample at -1 equals the sample at 1).
pub fn mirror_pad(img: &Image, pad: usize) -> Result<Image> {
    if pad == 0 {
        return Ok(img.clone());
    }
    if pad >= img.height().min(img.width()) {
        return Err(Error::InvalidArgument(format!(
            "pad {pad} must be smaller than min(H,W) = {}",
            img.height().min(img.width())
        )));
    }
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i as usize
    };
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut data = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = reflect(oy as isize - pad as isize, h);
        for ox in 0..ow {
            let sx = reflect(ox as isize - pad as isize, w);
            data.push(img.get(sy, sx));
        }
    }
    Image::new(oh, ow, data)
}

/// Bilinear sample at pixel coordinates `(x, y)`; pixel centers sit at
/// integer coordinates, origin top-left, x rightward, y downward.
/// Out-of-bounds neighbours clamp to the edge.
pub fn bilinear_sample(img: &Image, x: f64, y: f64) -> Result<f32> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite sample coordinates ({x}, {y})"
        )));
    }
    Ok(bilinear_sample_unchecked(img, x, y))
}

#[inline]
pub(crate) fn bilinear_sample_unchecked(img: &Image, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let clamp = |i: f64, n: usize| -> usize { (i.max(0.0) as usize).min(n - 1) };
    let x0i = clamp(x0, img.width());
    let x1i = clamp(x0 + 1.0, img.width());
    let y0i = clamp(y0, img.height());
    let y1i = clamp(y0 + 1.0, img.height());
    let p00 = img.get(y0i, x0i) as f64;
    let p01 = img.get(y0i, x1i) as f64;
    let p10 = img.get(y1i, x0i) as f64;
    let p11 = img.get(y1i, x1i) as f64;
    let top = p00 * (1.0 - fx) + p01 * fx;
    let bot = p10 * (1.0 - fx) + p11 * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// An `L x L` resampled patch, tagged with the grid kind and scale factor
/// that produced it so mismatched patches are never mixed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub grid_kind: GridKind,
    pub lambda: f64,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.size + col]
    }
}

/// Look up every grid source coordinate in the image with bilinear
/// interpolation.
pub fn extract_patch(img: &Image, grid: &SamplingGrid) -> Patch {
    let l = grid.size();
    let mut data = Vec::with_capacity(l * l);
    for i in 0..l * l {
        data.push(bilinear_sample_unchecked(img, grid.src_x[i], grid.src_y[i]));
    }
    Patch {
        size: l,
        grid_kind: grid.kind,
        lambda: grid.lambda,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cartesian_grid, GridSpec, Keypoint};

    #[test]
    fn pgm8_linear_scaling() {
        let bytes = b"P5\n2 2\n255\n".iter().chain([0u8, 255, 128, 64].iter());
        let bytes: Vec<u8> = bytes.copied().collect();
        let img = decode_image(&bytes, ImageFormat::Pgm8).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn rawf32_identity() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LPIM");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        for v in [0.5f32, 0.25, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let img = decode_image(&bytes, ImageFormat::RawF32).unwrap();
        assert_eq!(img.data(), &[0.5, 0.25, 1.0]);
    }

    #[test]
    fn pgm8_truncation_is_an_error() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend(std::iter::repeat(7u8).take(15));
        let err = decode_image(&bytes, ImageFormat::Pgm8).unwrap_err();
        match err {
            Error::Decode { msg, .. } => assert!(msg.contains("truncated")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pgm8_roundtrip() {
        let img = Image::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let enc = encode_pgm8(&img);
        let dec = decode_image(&enc, ImageFormat::Pgm8).unwrap();
        for (a, b) in img.data().iter().zip(dec.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rawf32_roundtrip_bitexact() {
        let img = Image::new(3, 2, vec![0.1, 0.9, 0.33, 0.0, 1.0, 0.5]).unwrap();
        let dec = decode_image(&encode_rawf32(&img), ImageFormat::RawF32).unwrap();
        assert_eq!(img, dec);
    }

    #[test]
    fn mirror_pad_row_reflection() {
        let img = Image::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        // pad must stay below min(H,W)=1, so build a 3x3 instead
        let img3 = Image::new(3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let padded = mirror_pad(&img3, 1).unwrap();
        // middle row of the padded image is {b,a,b,c,b} of the original row
        let row: Vec<f32> = (0..5).map(|c| padded.get(2, c)).collect();
        assert_eq!(row, vec![4.0, 3.0, 4.0, 5.0, 4.0]);
        assert!(mirror_pad(&img, 1).is_err());
    }

    #[test]
    fn mirror_pad_zero_is_identity() {
        let img = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mirror_pad(&img, 0).unwrap(), img);
    }

    #[test]
    fn mirror_pad_corner_enumeration() {
        // 3x3 with distinct values, pad 2: the (0,0) corner of the output
        // reflects to (2,2) of the original.
        let img = Image::new(3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let padded = mirror_pad(&img, 2).unwrap();
        assert_eq!(padded.get(0, 0), img.get(2, 2));
    }

    #[test]
    fn mirror_pad_center_crop_recovers_original() {
        let img = Image::new(4, 5, (0..20).map(|v| v as f32 * 0.05).collect()).unwrap();
        let padded = mirror_pad(&img, 3).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(padded.get(y + 3, x + 3), img.get(y, x));
            }
        }
    }

    #[test]
    fn bilinear_integer_coordinates_are_exact() {
        let img = Image::new(6, 6, (0..36).map(|v| v as f32 / 36.0).collect()).unwrap();
        assert_eq!(bilinear_sample(&img, 3.0, 5.0).unwrap(), img.get(5, 3));
    }

    #[test]
    fn bilinear_midpoint_is_average() {
        let img = Image::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&img, 0.5, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn bilinear_four_term_sum() {
        let (p00, p01, p10, p11) = (0.2f64, 0.9, 0.4, 0.7);
        let img = Image::new(2, 2, vec![p00 as f32, p01 as f32, p10 as f32, p11 as f32]).unwrap();
        let (x, y) = (0.25, 0.75);
        let expected =
            (1.0 - x) * (1.0 - y) * p00 + x * (1.0 - y) * p01 + (1.0 - x) * y * p10 + x * y * p11;
        let got = bilinear_sample(&img, x, y).unwrap() as f64;
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
    }

    #[test]
    fn bilinear_rejects_non_finite() {
        let img = Image::zeros(2, 2);
        assert!(bilinear_sample(&img, f64::NAN, 0.0).is_err());
        assert!(bilinear_sample(&img, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn bilinear_exact_on_affine_images() {
        // I(x,y) = a x + b y + c sampled anywhere in bounds
        let (a, b, c) = (0.013f64, -0.007, 0.4);
        let mut img = Image::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                img.set(y, x, (a * x as f64 + b * y as f64 + c) as f32);
            }
        }
        for &(x, y) in &[(0.3, 0.7), (7.25, 9.75), (14.9, 0.1), (3.5, 3.5)] {
            let got = bilinear_sample(&img, x, y).unwrap() as f64;
            let want = a * x + b * y + c;
            assert!((got - want).abs() < 4.0 * f32::EPSILON as f64, "{got} {want}");
        }
    }

    #[test]
    fn extract_patch_constant_image() {
        let img = Image::new(8, 8, vec![0.37; 64]).unwrap();
        let kp = Keypoint::new(4.0, 4.0, 0.5, 0.3).unwrap();
        let spec = GridSpec::new(5, 4.0, GridKind::Cartesian).unwrap();
        let grid = cartesian_grid(&kp, &spec).unwrap();
        let patch = extract_patch(&img, &grid);
        assert!(patch.data.iter().all(|&v| v == 0.37));
        assert_eq!(patch.grid_kind, GridKind::Cartesian);
        assert_eq!(patch.lambda, 4.0);
    }

    #[test]
    fn extract_patch_identity_crop() {
        // cartesian grid with theta=0 and r_i=(L-1)/2 lands on integer
        // pixel offsets, so the patch equals the crop exactly
        let img = Image::new(9, 9, (0..81).map(|v| v as f32 / 81.0).collect()).unwrap();
        let l = 5usize;
        let sigma = 1.0;
        let lambda = (l - 1) as f64; // r_i = lambda/2 * sigma = (L-1)/2
        let kp = Keypoint::new(4.0, 4.0, sigma, 0.0).unwrap();
        let spec = GridSpec::new(l, lambda, GridKind::Cartesian).unwrap();
        let patch = extract_patch(&img, &cartesian_grid(&kp, &spec).unwrap());
        for py in 0..l {
            for px in 0..l {
                assert_eq!(patch.get(py, px), img.get(py + 2, px + 2));
            }
        }
    }

    #[test]
    fn extract_patch_deterministic() {
        let img = Image::new(16, 16, (0..256).map(|v| (v as f32).sin() * 0.5 + 0.5).collect())
            .unwrap();
        let kp = Keypoint::new(8.3, 7.9, 1.7, 1.1).unwrap();
        let spec = GridSpec::new(8, 6.0, GridKind::Cartesian).unwrap();
        let g1 = cartesian_grid(&kp, &spec).unwrap();
        let g2 = cartesian_grid(&kp, &spec).unwrap();
        assert_eq!(extract_patch(&img, &g1), extract_patch(&img, &g2));
    }
}
