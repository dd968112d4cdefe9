//! Signal-to-image encoding: groups signals into RGB triples, resizes time to
//! a fixed width, and min-max normalizes the whole image at once.
//!
//! Normalization statistics come from real signal values only. Padded
//! channels (when the signal count is not a multiple of 3) are fixed at zero,
//! so the same matrix encodes identically no matter how its values are
//! shifted or positively scaled.

use crate::signal::SignalMatrix;
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("EmptyMatrix: cannot encode a matrix with no rows or columns")]
    EmptyMatrix,
    #[error("NonFiniteInput: value at row {row}, column {col} is not finite")]
    NonFiniteInput { row: usize, col: usize },
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("PngError: {0}")]
    Png(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, EncodeError>;

/// A normalized 3-channel image: one row per signal triple, one column per
/// resampled time step. Values live in [0, 1]; padded channels are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalImage {
    height: usize,
    width: usize,
    /// Row-major H x W x 3.
    pixels: Vec<f64>,
    /// Signal count before padding; channel c of row h is padding
    /// iff 3h + c >= source_rows.
    source_rows: usize,
    source_id: String,
}

impl SignalImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        debug_assert!(h < self.height && w < self.width && c < 3);
        self.pixels[(h * self.width + w) * 3 + c]
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn is_padded(&self, h: usize, c: usize) -> bool {
        3 * h + c >= self.source_rows
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Repacks H x W x 3 into a channels-first [3, H, W] tensor, the layout
    /// the embedding network consumes.
    pub fn to_chw_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = self.get(y, x, c);
                }
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    }
}

/// Encodes a signal matrix as a 3-channel image: consecutive signal triples
/// become image rows (channels 0/1/2; the last row is zero-padded when the
/// signal count is not divisible by 3), each signal is resized to
/// `target_width` samples, and real values are min-max normalized globally.
pub fn encode(s: &SignalMatrix, target_width: usize) -> Result<SignalImage> {
    encode_tagged(s, target_width, "")
}

/// `encode` with a source tag carried through for exports and caching.
pub fn encode_tagged(
    s: &SignalMatrix,
    target_width: usize,
    source_id: &str,
) -> Result<SignalImage> {
    assert!(target_width >= 2, "target_width must be at least 2");
    let n = s.rows();
    if n == 0 || s.cols() == 0 {
        return Err(EncodeError::EmptyMatrix);
    }
    for (i, row) in s.values().iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(EncodeError::NonFiniteInput { row: i, col: j });
        }
    }

    let height = n.div_ceil(3);
    let width = target_width;
    let mut pixels = vec![0.0; height * width * 3];

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, row) in s.values().iter().enumerate() {
        let resized = resize_time(row, width);
        let (h, c) = (i / 3, i % 3);
        for (x, &v) in resized.iter().enumerate() {
            pixels[(h * width + x) * 3 + c] = v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }

    // Rescale real positions only; padded positions stay exactly zero so the
    // normalization statistics never depend on how much padding exists.
    let span = hi - lo;
    for i in 0..n {
        let (h, c) = (i / 3, i % 3);
        for x in 0..width {
            let p = &mut pixels[(h * width + x) * 3 + c];
            *p = if span > 0.0 { (*p - lo) / span } else { 0.0 };
        }
    }

    Ok(SignalImage {
        height,
        width,
        pixels,
        source_rows: n,
        source_id: source_id.to_string(),
    })
}

/// Linearly resamples a row to `target_width` points at continuous positions
/// j*(M-1)/(target_width-1). Endpoints are copied bit-exactly, and
/// target_width == M reproduces the row unchanged.
pub fn resize_time(row: &[f64], target_width: usize) -> Vec<f64> {
    assert!(!row.is_empty(), "cannot resize an empty row");
    assert!(target_width >= 2, "target_width must be at least 2");
    let m = row.len();
    if m == 1 {
        return vec![row[0]; target_width];
    }
    (0..target_width)
        .map(|j| {
            let pos = (j * (m - 1)) as f64 / (target_width - 1) as f64;
            let idx = pos.floor() as usize;
            let frac = pos - idx as f64;
            if frac == 0.0 {
                row[idx]
            } else {
                row[idx] * (1.0 - frac) + row[idx + 1] * frac
            }
        })
        .collect()
}

/// Min-max normalizes a tensor over all of its entries: (v - min)/(max - min),
/// or all zeros when the input is constant.
pub fn normalize_global(t: &Tensor) -> Result<Tensor> {
    if let Some(i) = t.iter().position(|v| !v.is_finite()) {
        return Err(EncodeError::NonFiniteInput { row: i, col: 0 });
    }
    let lo = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = t
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(t.shape(), data))
}

/// Writes the image as an 8-bit RGB PNG (byte = round(value * 255)). This is
/// a debugging view; training always consumes the float pixels.
pub fn export_png(img: &SignalImage, path: impl AsRef<Path>) -> Result<()> {
    let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = [
                (img.get(y, x, 0) * 255.0).round() as u8,
                (img.get(y, x, 1) * 255.0).round() as u8,
                (img.get(y, x, 2) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path.as_ref())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: Vec<Vec<f64>>) -> SignalMatrix {
        let names = (0..rows.len()).map(|i| format!("s{i}")).collect();
        SignalMatrix::new(rows, names, "test", 0.0)
    }

    #[test]
    fn encode_two_signals_pads_third_channel() {
        // min 0, max 8 over the real values; pad channel stays zero
        let s = mat(vec![vec![0.0, 2.0], vec![4.0, 8.0]]);
        let img = encode(&s, 2).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(0, 1, 0), 0.25);
        assert_eq!(img.get(0, 0, 1), 0.5);
        assert_eq!(img.get(0, 1, 1), 1.0);
        assert_eq!(img.get(0, 0, 2), 0.0);
        assert_eq!(img.get(0, 1, 2), 0.0);
        assert!(!img.is_padded(0, 1));
        assert!(img.is_padded(0, 2));
    }

    #[test]
    fn encode_four_signals_means_two_rows() {
        let s = mat(vec![
            vec![0.0, 1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![2.0, 3.0, 4.0, 5.0],
            vec![3.0, 4.0, 5.0, 6.0],
        ]);
        let img = encode(&s, 4).unwrap();
        assert_eq!(img.height(), 2);
        // row 1 channels 1 and 2 come from padding
        for x in 0..4 {
            assert_eq!(img.get(1, x, 1), 0.0);
            assert_eq!(img.get(1, x, 2), 0.0);
        }
        assert!(img.is_padded(1, 1) && img.is_padded(1, 2));
        assert!(!img.is_padded(1, 0));
    }

    #[test]
    fn encode_constant_input_is_all_zero() {
        let s = mat(vec![vec![7.0; 5]; 3]);
        let img = encode(&s, 5).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_non_finite() {
        let s = mat(vec![vec![0.0, f64::NAN, 1.0]]);
        match encode(&s, 3) {
            Err(EncodeError::NonFiniteInput { row: 0, col: 1 }) => {}
            other => panic!("expected NonFiniteInput, got {other:?}"),
        }
    }

    #[test]
    fn resize_midpoint_and_identity() {
        assert_eq!(resize_time(&[0.0, 1.0], 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(resize_time(&[0.0, 3.0, 6.0, 9.0], 3), vec![0.0, 4.5, 9.0]);
        let row = [0.3, -1.7, 2.2, 0.0, 5.5];
        assert_eq!(resize_time(&row, 5), row.to_vec());
    }

    #[test]
    fn resize_single_sample_repeats() {
        assert_eq!(resize_time(&[4.2], 3), vec![4.2, 4.2, 4.2]);
    }

    #[test]
    fn normalize_global_examples() {
        let t = Tensor::from_vec(&[4], vec![-2.0, 0.0, 1.0, 2.0]);
        let out = normalize_global(&t).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 0.75, 1.0]);

        let konst = Tensor::from_vec(&[3], vec![7.0; 3]);
        assert!(normalize_global(&konst).unwrap().iter().all(|&v| v == 0.0));

        let unit = Tensor::from_vec(&[3], vec![0.0, 0.25, 1.0]);
        assert_eq!(normalize_global(&unit).unwrap().data(), unit.data());
    }

    #[test]
    fn chw_tensor_matches_get() {
        let s = mat(vec![
            vec![0.0, 1.0, 2.0],
            vec![3.0, 4.0, 5.0],
            vec![6.0, 7.0, 8.0],
            vec![1.0, 1.5, 2.5],
        ]);
        let img = encode(&s, 3).unwrap();
        let t = img.to_chw_tensor();
        assert_eq!(t.shape(), &[3, 2, 3]);
        for c in 0..3 {
            for h in 0..2 {
                for w in 0..3 {
                    assert_eq!(t.get3(c, h, w), img.get(h, w, c));
                }
            }
        }
    }

    #[test]
    fn png_roundtrip_bytes() {
        let s = mat(vec![vec![0.0, 0.5, 1.0]]);
        let img = encode(&s, 3).unwrap();
        let f = tempfile::Builder::new().suffix(".png").tempfile().unwrap();
        export_png(&img, f.path()).unwrap();
        let back = image::open(f.path()).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (3, 1));
        assert_eq!(back.get_pixel(0, 0).0[0], 0);
        assert_eq!(back.get_pixel(1, 0).0[0], 128);
        assert_eq!(back.get_pixel(2, 0).0[0], 255);
    }

    fn pseudo_matrix(rows: usize, cols: usize, seed: u64) -> SignalMatrix {
        let mut v = seed.wrapping_add(99);
        let mut next = || {
            v = v.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((v >> 33) as f64 / 4e9) * 20.0 - 10.0
        };
        mat((0..rows).map(|_| (0..cols).map(|_| next()).collect()).collect())
    }

    proptest! {
        #[test]
        fn affine_invariance_on_real_pixels(
            rows in 1usize..10,
            cols in 2usize..30,
            width in 2usize..30,
            seed in 0u64..500,
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
        ) {
            let s = pseudo_matrix(rows, cols, seed);
            let scaled = mat(
                s.values()
                    .iter()
                    .map(|r| r.iter().map(|&v| a * v + b).collect())
                    .collect(),
            );
            let base = encode(&s, width).unwrap();
            let mapped = encode(&scaled, width).unwrap();
            for h in 0..base.height() {
                for c in 0..3 {
                    if base.is_padded(h, c) {
                        continue;
                    }
                    for w in 0..width {
                        let d = (base.get(h, w, c) - mapped.get(h, w, c)).abs();
                        prop_assert!(d <= 1e-12, "pixel ({h},{w},{c}) differs by {d}");
                    }
                }
            }
        }

        #[test]
        fn output_range_and_extremes(
            rows in 1usize..10,
            cols in 2usize..30,
            width in 2usize..30,
            seed in 0u64..500,
        ) {
            let s = pseudo_matrix(rows, cols, seed);
            let img = encode(&s, width).unwrap();
            let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo >= 0.0 && hi <= 1.0);
            // random inputs are non-constant with probability 1
            prop_assert_eq!(lo, 0.0);
            prop_assert_eq!(hi, 1.0);
        }

        #[test]
        fn resize_identity_and_endpoints(
            cols in 2usize..40,
            width in 2usize..40,
            seed in 0u64..500,
        ) {
            let s = pseudo_matrix(1, cols, seed);
            let row = s.row(0);
            let resized = resize_time(row, width);
            prop_assert_eq!(resized[0], row[0]);
            prop_assert_eq!(resized[width - 1], row[cols - 1]);
            if width == cols {
                prop_assert_eq!(resized.as_slice(), row);
            }
        }

        #[test]
        fn encode_monotone_for_ordered_inputs(
            rows in 2usize..6,
            cols in 3usize..12,
            width in 2usize..12,
            seed in 0u64..200,
        ) {
            // raise interior values toward max while pinning the min and max
            // at row-0 endpoints. Endpoints survive resizing exactly, so both
            // matrices normalize with the same affine map and pixel order is
            // preserved.
            let base = pseudo_matrix(rows, cols, seed);
            let lo = base.values().iter().flatten().cloned().fold(f64::INFINITY, f64::min);
            let hi = base.values().iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi > lo);
            let pin = |mut v: Vec<Vec<f64>>| {
                v[0][0] = lo;
                v[0][cols - 1] = hi;
                v
            };
            let v1 = pin(base.values().to_vec());
            let v2 = pin(
                v1.iter()
                    .map(|r| r.iter().map(|&v| v + (hi - v) * 0.25).collect())
                    .collect(),
            );
            let i1 = encode(&mat(v1), width).unwrap();
            let i2 = encode(&mat(v2), width).unwrap();
            for (p1, p2) in i1.pixels().iter().zip(i2.pixels()) {
                prop_assert!(p1 <= p2 || (p1 - p2).abs() < 1e-12);
            }
        }
    }
}
