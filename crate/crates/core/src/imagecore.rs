//! 16-bit raster representation, PGM I/O, box-filter downscaling and global
//! intensity standardization.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image dimensions {width}x{height} for {len} samples")]
    Dimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("unsupported bit depth (maxval {0}); expected a 16-bit PGM")]
    BitDepth(u32),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("scale {0} outside (0, 1] or yields an empty image")]
    Scale(f64),
    #[error("standard deviation must be positive, got {0}")]
    Sigma(f64),
    #[error("cannot compute statistics: {0}")]
    Stats(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single-channel 16-bit measurement, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image16 {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl Image16 {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImageError::Dimensions {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u16) {
        self.data[y * self.width + x] = value;
    }

    /// Copies the rectangle `[x0, x1) x [y0, y1)`; the caller guarantees it lies inside.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image16, ImageError> {
        if x1 <= x0 || y1 <= y0 || x1 > self.width || y1 > self.height {
            return Err(ImageError::Dimensions {
                width: x1.saturating_sub(x0),
                height: y1.saturating_sub(y0),
                len: 0,
            });
        }
        let w = x1 - x0;
        let mut data = Vec::with_capacity(w * (y1 - y0));
        for y in y0..y1 {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x1]);
        }
        Image16::new(w, y1 - y0, data)
    }
}

/// Real-valued image produced by [`normalize_global`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Corpus-wide photon-count statistics used for standardization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GlobalStats {
    pub mu: f64,
    pub sigma: f64,
}

impl GlobalStats {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, ImageError> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(ImageError::Sigma(sigma));
        }
        Ok(Self { mu, sigma })
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Header("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(token: &[u8], what: &str) -> Result<u32, ImageError> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse::<u32>().ok())
        .ok_or_else(|| ImageError::Header(format!("bad {what}")))
}

/// Decodes a binary 16-bit PGM from memory.
pub fn decode_pgm16(bytes: &[u8]) -> Result<Image16, ImageError> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P5" {
        return Err(ImageError::Header("magic is not P5".into()));
    }
    let width = parse_number(next_token(bytes, &mut pos)?, "width")? as usize;
    let height = parse_number(next_token(bytes, &mut pos)?, "height")? as usize;
    let maxval = parse_number(next_token(bytes, &mut pos)?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Header("zero dimension".into()));
    }
    if maxval <= 255 {
        return Err(ImageError::BitDepth(maxval));
    }
    if maxval > 65535 {
        return Err(ImageError::Header(format!("maxval {maxval} exceeds 65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Header("missing raster separator".into()));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| ImageError::Header("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Image16::new(width, height, data)
}

/// Encodes with the canonical header `P5\n<w> <h>\n65535\n`.
pub fn encode_pgm16(img: &Image16) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 2);
    out.extend_from_slice(header.as_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn load_pgm16(path: impl AsRef<Path>) -> Result<Image16, ImageError> {
    decode_pgm16(&fs::read(path)?)
}

pub fn save_pgm16(img: &Image16, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_pgm16(img))?;
    Ok(())
}

/// Per-destination-index list of `(source index, weight)` pairs for a 1-D box
/// filter mapping `src` samples onto `dst` samples. Weights of each list sum to 1.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = if i + 1 == dst { src as f64 } else { (i + 1) as f64 * ratio };
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut taps = Vec::with_capacity(last - first);
            for s in first..last {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / (hi - lo)));
                }
            }
            taps
        })
        .collect()
}

#[inline]
pub(crate) fn quantize(v: f64) -> u16 {
    (v + 0.5).floor().clamp(0.0, 65535.0) as u16
}

/// Area-averaging downscale to `max(1, floor(scale * dim))` on each axis.
pub fn downscale(img: &Image16, scale: f64) -> Result<Image16, ImageError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(ImageError::Scale(scale));
    }
    let out_w = ((scale * img.width as f64).floor() as usize).max(1);
    let out_h = ((scale * img.height as f64).floor() as usize).max(1);
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let wx = box_weights(img.width, out_w);
    let wy = box_weights(img.height, out_h);

    // horizontal pass into a real-valued buffer, then vertical pass
    let mut rows = vec![0.0f64; img.height * out_w];
    for y in 0..img.height {
        let src = &img.data[y * img.width..(y + 1) * img.width];
        let dst = &mut rows[y * out_w..(y + 1) * out_w];
        for (d, taps) in dst.iter_mut().zip(&wx) {
            *d = taps.iter().map(|&(s, w)| src[s] as f64 * w).sum();
        }
    }
    let mut data = vec![0u16; out_w * out_h];
    let mut acc = vec![0.0f64; out_w];
    for (oy, taps) in wy.iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(sy, w) in taps {
            let row = &rows[sy * out_w..(sy + 1) * out_w];
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r * w;
            }
        }
        for (d, &a) in data[oy * out_w..(oy + 1) * out_w].iter_mut().zip(&acc) {
            *d = quantize(a);
        }
    }
    Image16::new(out_w, out_h, data)
}

/// Pooled mean and population standard deviation over every pixel of every image.
pub fn compute_global_stats(images: &[Image16]) -> Result<GlobalStats, ImageError> {
    if images.is_empty() {
        return Err(ImageError::Stats("no images"));
    }
    let mut n = 0u64;
    let mut sum = 0u128;
    for img in images {
        n += img.data.len() as u64;
        sum += img.data.iter().map(|&v| v as u128).sum::<u128>();
    }
    let mu = sum as f64 / n as f64;
    let ss: f64 = images
        .iter()
        .flat_map(|img| img.data.iter())
        .map(|&v| {
            let d = v as f64 - mu;
            d * d
        })
        .sum();
    let sigma = (ss / n as f64).sqrt();
    if !(sigma > 0.0) {
        return Err(ImageError::Stats("constant corpus"));
    }
    GlobalStats::new(mu, sigma)
}

pub fn normalize_global(img: &Image16, stats: &GlobalStats) -> Result<NormalizedImage, ImageError> {
    if !(stats.sigma > 0.0) {
        return Err(ImageError::Sigma(stats.sigma));
    }
    let data = img
        .data
        .iter()
        .map(|&x| (x as f64 - stats.mu) / stats.sigma)
        .collect();
    Ok(NormalizedImage {
        width: img.width,
        height: img.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, data: Vec<u16>) -> Image16 {
        Image16::new(w, h, data).unwrap()
    }

    #[test]
    fn pgm_decodes_hand_built_file() {
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        for v in [0u16, 1, 256, 65535] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let decoded = decode_pgm16(&bytes).unwrap();
        assert_eq!(decoded, img(2, 2, vec![0, 1, 256, 65535]));
        assert_eq!(encode_pgm16(&decoded), bytes);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5 # comment\n1 1\n# another\n4095\n".to_vec();
        bytes.extend_from_slice(&4000u16.to_be_bytes());
        assert_eq!(decode_pgm16(&bytes).unwrap().data(), &[4000]);
    }

    #[test]
    fn pgm_rejects_8bit_and_truncation() {
        let bytes = b"P5\n1 1\n255\n\x00".to_vec();
        let err = decode_pgm16(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported bit depth"));

        let bytes = b"P5\n2 2\n65535\n\x00\x01".to_vec();
        assert!(matches!(decode_pgm16(&bytes), Err(ImageError::Truncated { .. })));
        assert!(matches!(decode_pgm16(b"P2\n1 1\n65535\n0"), Err(ImageError::Header(_))));
        assert!(matches!(decode_pgm16(b"P5\n1"), Err(ImageError::Header(_))));
    }

    #[test]
    fn pgm_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let im = img(3, 2, vec![9, 8, 7, 600, 5, 40000]);
        save_pgm16(&im, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(load_pgm16(&path).unwrap(), im);
        save_pgm16(&load_pgm16(&path).unwrap(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn downscale_examples() {
        let out = downscale(&Image16::filled(4, 4, 100).unwrap(), 0.25).unwrap();
        assert_eq!(out, img(1, 1, vec![100]));

        let out = downscale(&img(2, 1, vec![0, 65535]), 0.5).unwrap();
        assert_eq!(out, img(1, 1, vec![32768]));

        let im = img(3, 2, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(downscale(&im, 1.0).unwrap(), im);
    }

    #[test]
    fn downscale_fractional_footprint() {
        // 3 -> 2 samples: footprints [0,1.5) and [1.5,3)
        let out = downscale(&img(3, 1, vec![0, 100, 200]), 0.7).unwrap();
        assert_eq!(out.width(), 2);
        // (0*1 + 100*0.5)/1.5 = 33.33 ; (100*0.5 + 200)/1.5 = 166.67
        assert_eq!(out.data(), &[33, 167]);
    }

    #[test]
    fn downscale_rejects_bad_scale() {
        let im = img(2, 2, vec![0; 4]);
        assert!(downscale(&im, 0.0).is_err());
        assert!(downscale(&im, 1.5).is_err());
        assert!(downscale(&im, f64::NAN).is_err());
        assert_eq!(downscale(&im, 0.2).unwrap().width(), 1);
    }

    #[test]
    fn stats_examples() {
        let s = compute_global_stats(&[img(2, 1, vec![0, 2])]).unwrap();
        assert_eq!((s.mu, s.sigma), (1.0, 1.0));
        let s = compute_global_stats(&[img(2, 1, vec![0, 0]), img(2, 1, vec![2, 2])]).unwrap();
        assert_eq!((s.mu, s.sigma), (1.0, 1.0));
        assert!(compute_global_stats(&[img(2, 1, vec![7, 7])]).is_err());
        assert!(compute_global_stats(&[]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let stats = GlobalStats::new(100.0, 10.0).unwrap();
        let n = normalize_global(&img(2, 1, vec![100, 110]), &stats).unwrap();
        assert_eq!(n.data, vec![0.0, 1.0]);
        assert!(GlobalStats::new(0.0, 0.0).is_err());
        let bad = GlobalStats { mu: 0.0, sigma: -1.0 };
        assert!(normalize_global(&img(1, 1, vec![0]), &bad).is_err());
    }

    #[test]
    fn normalized_corpus_is_standard() {
        let corpus: Vec<Image16> = (0..4)
            .map(|k| img(8, 8, (0..64).map(|i| ((i * 37 + k * 1001) % 5000) as u16).collect()))
            .collect();
        let stats = compute_global_stats(&corpus).unwrap();
        let pooled: Vec<f64> = corpus
            .iter()
            .flat_map(|im| normalize_global(im, &stats).unwrap().data)
            .collect();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let std = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }

    fn arb_image() -> impl Strategy<Value = Image16> {
        (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u16>(), w * h)
                .prop_map(move |data| Image16::new(w, h, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pgm_round_trip_lossless(im in arb_image()) {
            let bytes = encode_pgm16(&im);
            let back = decode_pgm16(&bytes).unwrap();
            prop_assert_eq!(&back, &im);
            prop_assert_eq!(encode_pgm16(&back), bytes);
        }

        #[test]
        fn downscale_keeps_constant(w in 1usize..40, h in 1usize..40, v in any::<u16>(), scale in 0.05f64..=1.0) {
            let im = Image16::filled(w, h, v).unwrap();
            if let Ok(out) = downscale(&im, scale) {
                prop_assert!(out.data().iter().all(|&p| p == v));
            }
        }

        #[test]
        fn downscale_uniform_footprint_preserves_mean(k in 1usize..5, ow in 1usize..8, oh in 1usize..8,
                                                      seed in any::<u64>()) {
            let (w, h) = (ow * k, oh * k);
            let data: Vec<u16> = (0..w * h)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407))) >> 48) as u16)
                .collect();
            let im = Image16::new(w, h, data).unwrap();
            let out = downscale(&im, 1.0 / k as f64).unwrap();
            let mean_in = im.data().iter().map(|&v| v as f64).sum::<f64>() / (w * h) as f64;
            let mean_out = out.data().iter().map(|&v| v as f64).sum::<f64>() / (ow * oh) as f64;
            prop_assert!((mean_in - mean_out).abs() <= 1.0);
        }

        #[test]
        fn normalize_is_affine(data in proptest::collection::vec(0u16..1000, 1..50),
                               a in 1u16..40, b in 0u16..1000, mu in 0.0f64..1000.0, sigma in 5.0f64..500.0) {
            let n = data.len();
            let im = Image16::new(n, 1, data.clone()).unwrap();
            let scaled = Image16::new(n, 1, data.iter().map(|&x| x * a + b).collect()).unwrap();
            let (a, b) = (a as f64, b as f64);
            let s1 = GlobalStats::new(mu, sigma).unwrap();
            let s2 = GlobalStats::new(a * mu + b, a * sigma).unwrap();
            let n1 = normalize_global(&im, &s1).unwrap();
            let n2 = normalize_global(&scaled, &s2).unwrap();
            for (x, y) in n1.data.iter().zip(&n2.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
