//! Pure quantize/dequantize transforms.
//!
//! Two code families are supported on 2-D weight matrices `[rows x cols]`
//! (rows are output channels):
//!
//! - **Absmean binarization**: sign codes in {-1, +1} with one scale per
//!   group equal to the mean absolute value of the group. Exact zeros are
//!   replaced by `+eps` before the sign step so a code is never 0. No mean
//!   centering is applied. The scale is computed from the original values,
//!   so an all-zero group has scale 0 and dequantizes to exact zeros.
//! - **Absmax asymmetric**: affine codes in `0..2^bits` with per-group
//!   scale `(hi - lo) / (2^bits - 1)` and zero point `lo`, where
//!   `lo = clip * min`, `hi = clip * max`. Values are clamped into
//!   `[lo, hi]` and rounded half-to-even.
//!
//! Groups are whole channels or fixed-size sub-channel blocks (see
//! [`groups::GroupLayout`]). Channel lengths the block size does not divide
//! are zero-padded up to the next multiple; pad slots are excluded from
//! group statistics and stripped again on dequantization.
//!
//! Everything here is deterministic and gradient-free; the straight-through
//! training rules live in [`crate::autodiff`].

mod groups;
mod scheme;

pub use scheme::{Granularity, QuantMode, QuantScheme, DEFAULT_CLIP, DEFAULT_EPS};

pub(crate) use groups::GroupLayout;

use num_traits::Float;

use crate::error::{Error, Result};

/// Packed integer codes plus the metadata needed for exact dequantization.
///
/// Codes are stored in the split layout (group-major, pad slots included):
/// `codes[g * block + j]` is element `j` of group `g`. For absmean schemes
/// every code is -1 or +1; for absmax schemes codes lie in `0..2^bits`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i8>,
    /// One dequantization multiplier per group; finite and >= 0 for absmean.
    pub scales: Vec<f32>,
    /// Per-group asymmetric offset; `None` for absmean.
    pub zero_points: Option<Vec<f32>>,
    /// Pre-split shape `(rows, cols)` restored by [`dequantize`].
    pub original_shape: (usize, usize),
    /// Zeros appended to each row before the sub-channel split.
    pub pad: usize,
    pub scheme: QuantScheme,
}

impl QuantizedTensor {
    pub(crate) fn layout(&self) -> GroupLayout {
        GroupLayout::new(
            self.original_shape.0,
            self.original_shape.1,
            self.scheme.granularity,
        )
    }

    /// Shape of the code matrix, pad slots included.
    pub fn split_shape(&self) -> (usize, usize) {
        self.layout().split_shape()
    }

    pub fn group_count(&self) -> usize {
        self.layout().group_count()
    }

    /// Check internal consistency of codes and metadata.
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        let layout = self.layout();
        if layout.pad != self.pad {
            return Err(Error::ShapeMismatch(format!(
                "recorded pad {} does not match layout pad {}",
                self.pad, layout.pad
            )));
        }
        let (groups, block) = layout.split_shape();
        if self.codes.len() != groups * block {
            return Err(Error::ShapeMismatch(format!(
                "expected {} codes for split shape {}x{}, got {}",
                groups * block,
                groups,
                block,
                self.codes.len()
            )));
        }
        if self.scales.len() != groups {
            return Err(Error::ShapeMismatch(format!(
                "expected {} scales, got {}",
                groups,
                self.scales.len()
            )));
        }
        if let Some(zp) = &self.zero_points {
            if zp.len() != groups {
                return Err(Error::ShapeMismatch(format!(
                    "expected {} zero points, got {}",
                    groups,
                    zp.len()
                )));
            }
        }
        match self.scheme.mode {
            QuantMode::AbsmeanSymmetric => {
                if self.zero_points.is_some() {
                    return Err(Error::ShapeMismatch(
                        "absmean tensor carries zero points".into(),
                    ));
                }
                if self.codes.iter().any(|&c| c != -1 && c != 1) {
                    return Err(Error::ShapeMismatch(
                        "absmean codes must be -1 or +1".into(),
                    ));
                }
                if self.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
                    return Err(Error::ShapeMismatch(
                        "absmean scales must be finite and >= 0".into(),
                    ));
                }
            }
            QuantMode::AbsmaxAsymmetric => {
                let max_code = (self.scheme.levels() - 1) as i8;
                if self.codes.iter().any(|&c| c < 0 || c > max_code) {
                    return Err(Error::ShapeMismatch(format!(
                        "absmax codes must be in 0..={max_code}"
                    )));
                }
                if self.zero_points.is_none() {
                    return Err(Error::ShapeMismatch(
                        "absmax tensor is missing zero points".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Split each channel row of `w` into consecutive blocks of `block_size`.
///
/// `[C x K]` becomes `[C*K/block_size x block_size]` in row-major order;
/// [`subchannel_merge`] is the exact inverse. Unlike [`quantize`], no
/// padding is applied here: a non-divisible channel length is an error.
pub fn subchannel_split(
    w: &[f32],
    shape: (usize, usize),
    block_size: usize,
) -> Result<(Vec<f32>, (usize, usize))> {
    let (rows, cols) = shape;
    check_len(w.len(), rows, cols)?;
    if block_size == 0 || cols % block_size != 0 {
        return Err(Error::BlockSizeMismatch(format!(
            "block size {block_size} does not divide channel length {cols}"
        )));
    }
    // Row-major regrouping preserves the linear element order, so the split
    // is a reshape.
    Ok((w.to_vec(), (rows * cols / block_size, block_size)))
}

/// Inverse of [`subchannel_split`].
pub fn subchannel_merge(
    w: &[f32],
    split_shape: (usize, usize),
    original_shape: (usize, usize),
) -> Result<Vec<f32>> {
    let (groups, block) = split_shape;
    let (rows, cols) = original_shape;
    check_len(w.len(), groups, block)?;
    if rows * cols != groups * block || cols % block != 0 {
        return Err(Error::BlockSizeMismatch(format!(
            "split shape {groups}x{block} does not merge into {rows}x{cols}"
        )));
    }
    Ok(w.to_vec())
}

/// Quantize `w` under `scheme`. Group statistics are accumulated in f64.
pub fn quantize(w: &[f32], shape: (usize, usize), scheme: &QuantScheme) -> Result<QuantizedTensor> {
    let detail = quantize_detail(w, shape.0, shape.1, scheme, false)?;
    Ok(QuantizedTensor {
        codes: detail.codes_split,
        scales: detail.scales,
        zero_points: detail.zero_points,
        original_shape: shape,
        pad: detail.layout.pad,
        scheme: *scheme,
    })
}

/// Absmean-binarize `w` with one scale per channel.
pub fn absmean_binarize(w: &[f32], shape: (usize, usize), eps: f32) -> Result<QuantizedTensor> {
    let scheme = QuantScheme {
        eps,
        ..QuantScheme::absmean1()
    };
    quantize(w, shape, &scheme)
}

/// Absmax-asymmetric quantization; `scheme.mode` must be
/// [`QuantMode::AbsmaxAsymmetric`].
pub fn quantize_absmax_asym(
    w: &[f32],
    shape: (usize, usize),
    scheme: &QuantScheme,
) -> Result<QuantizedTensor> {
    if scheme.mode != QuantMode::AbsmaxAsymmetric {
        return Err(Error::InvalidScheme(
            "quantize_absmax_asym requires the absmax-asymmetric mode".into(),
        ));
    }
    quantize(w, shape, scheme)
}

/// Reconstruct the dense tensor in its original `(rows, cols)` shape.
pub fn dequantize(q: &QuantizedTensor) -> Result<Vec<f32>> {
    q.validate()?;
    let layout = q.layout();
    let mut out = vec![0.0f32; layout.rows * layout.cols];
    for g in 0..layout.group_count() {
        let span = layout.group_span(g);
        let scale = q.scales[g];
        let zp = q.zero_points.as_ref().map_or(0.0, |z| z[g]);
        for (j, col) in (span.col_start..span.col_end).enumerate() {
            let code = q.codes[g * layout.block + j] as f32;
            out[span.row * layout.cols + col] = code * scale + zp;
        }
    }
    Ok(out)
}

/// Quantize-then-dequantize at full precision: the training-path forward.
pub fn fake_quant(w: &[f32], shape: (usize, usize), scheme: &QuantScheme) -> Result<Vec<f32>> {
    dequantize(&quantize(w, shape, scheme)?)
}

/// Mean squared error between `w` and its fake-quantized image.
pub fn quant_mse(w: &[f32], shape: (usize, usize), scheme: &QuantScheme) -> Result<f64> {
    let fq = fake_quant(w, shape, scheme)?;
    let sum: f64 = w
        .iter()
        .zip(&fq)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / w.len() as f64)
}

// ---------------------------------------------------------------------------
// Generic engine (shared by the f32 storage path and the f64 training path)
// ---------------------------------------------------------------------------

/// Quantization output plus what the straight-through backward needs.
#[derive(Debug, Clone)]
pub(crate) struct QuantDetail<F> {
    pub layout: GroupLayout,
    /// Codes in the split layout, pad slots included.
    pub codes_split: Vec<i8>,
    pub scales: Vec<F>,
    pub zero_points: Option<Vec<F>>,
    /// Populated for absmax when requested.
    pub affine: Option<AffineAux<F>>,
}

/// Backward bookkeeping for the absmax-asymmetric mode, in logical
/// (unsplit) element order.
#[derive(Debug, Clone)]
pub(crate) struct AffineAux<F> {
    /// Rounding residual `round(u) - u` per element; 0 for clipped values.
    pub resid: Vec<F>,
    /// Whether the element fell inside `[lo, hi]` before clamping.
    pub in_range: Vec<bool>,
    /// First minimum per group, as a logical flat index.
    pub argmin: Vec<usize>,
    /// First maximum per group, as a logical flat index.
    pub argmax: Vec<usize>,
}

impl<F: Float> QuantDetail<F> {
    /// Dequantized values in logical element order.
    pub fn reconstruct(&self) -> Vec<F> {
        let layout = &self.layout;
        let mut out = vec![F::zero(); layout.rows * layout.cols];
        for g in 0..layout.group_count() {
            let span = layout.group_span(g);
            let scale = self.scales[g];
            let zp = self.zero_points.as_ref().map_or(F::zero(), |z| z[g]);
            for (j, col) in (span.col_start..span.col_end).enumerate() {
                let code = F::from(self.codes_split[g * layout.block + j]).unwrap();
                out[span.row * layout.cols + col] = code * scale + zp;
            }
        }
        out
    }
}

pub(crate) fn quantize_detail<F: Float>(
    w: &[F],
    rows: usize,
    cols: usize,
    scheme: &QuantScheme,
    want_affine_aux: bool,
) -> Result<QuantDetail<F>> {
    scheme.validate()?;
    check_len(w.len(), rows, cols)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteWeights);
    }
    let layout = GroupLayout::new(rows, cols, scheme.granularity);
    match scheme.mode {
        QuantMode::AbsmeanSymmetric => absmean_groups(w, layout),
        QuantMode::AbsmaxAsymmetric => absmax_groups(w, layout, scheme, want_affine_aux),
    }
}

/// Fake-quantized values plus the detail record, generic over precision.
pub(crate) fn fake_quant_detail<F: Float>(
    w: &[F],
    rows: usize,
    cols: usize,
    scheme: &QuantScheme,
    want_affine_aux: bool,
) -> Result<(Vec<F>, QuantDetail<F>)> {
    let detail = quantize_detail(w, rows, cols, scheme, want_affine_aux)?;
    let values = detail.reconstruct();
    Ok((values, detail))
}

fn absmean_groups<F: Float>(w: &[F], layout: GroupLayout) -> Result<QuantDetail<F>> {
    let (groups, block) = layout.split_shape();
    // Pad slots read as +eps -> sign +1.
    let mut codes = vec![1i8; groups * block];
    let mut scales = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = layout.group_span(g);
        let base = span.row * layout.cols;
        let mut sum_abs = 0.0f64;
        for (j, col) in (span.col_start..span.col_end).enumerate() {
            let v = w[base + col];
            sum_abs += v.to_f64().unwrap().abs();
            // Exact zeros (including -0.0) become +eps, so the sign is +1.
            codes[g * block + j] = if v < F::zero() { -1 } else { 1 };
        }
        let len = span.col_end - span.col_start;
        scales.push(F::from(sum_abs / len as f64).unwrap());
    }
    Ok(QuantDetail {
        layout,
        codes_split: codes,
        scales,
        zero_points: None,
        affine: None,
    })
}

fn absmax_groups<F: Float>(
    w: &[F],
    layout: GroupLayout,
    scheme: &QuantScheme,
    want_aux: bool,
) -> Result<QuantDetail<F>> {
    let (groups, block) = layout.split_shape();
    let clip = scheme.clip as f64;
    let levels = (scheme.levels() - 1) as f64;

    let mut codes = vec![0i8; groups * block];
    let mut scales = Vec::with_capacity(groups);
    let mut zero_points = Vec::with_capacity(groups);
    let mut aux = want_aux.then(|| AffineAux {
        resid: vec![F::zero(); layout.rows * layout.cols],
        in_range: vec![false; layout.rows * layout.cols],
        argmin: Vec::with_capacity(groups),
        argmax: Vec::with_capacity(groups),
    });

    for g in 0..groups {
        let span = layout.group_span(g);
        let base = span.row * layout.cols;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut argmin = base + span.col_start;
        let mut argmax = base + span.col_start;
        for col in span.col_start..span.col_end {
            let v = w[base + col].to_f64().unwrap();
            if v < min {
                min = v;
                argmin = base + col;
            }
            if v > max {
                max = v;
                argmax = base + col;
            }
        }
        let lo = clip * min;
        let hi = clip * max;
        let scale = (hi - lo) / levels;
        scales.push(F::from(scale).unwrap());
        zero_points.push(F::from(lo).unwrap());
        if let Some(aux) = aux.as_mut() {
            aux.argmin.push(argmin);
            aux.argmax.push(argmax);
        }

        for (j, col) in (span.col_start..span.col_end).enumerate() {
            let v = w[base + col].to_f64().unwrap();
            let in_range = v >= lo && v <= hi;
            let code = if scale == 0.0 {
                // Degenerate range: every value lands on the zero point.
                0.0
            } else {
                let u = (v.clamp(lo, hi) - lo) / scale;
                let r = u.round_ties_even().clamp(0.0, levels);
                if let Some(aux) = aux.as_mut() {
                    aux.resid[base + col] = F::from(r - u).unwrap();
                }
                r
            };
            if let Some(aux) = aux.as_mut() {
                aux.in_range[base + col] = in_range;
            }
            codes[g * block + j] = code as i8;
        }
    }

    Ok(QuantDetail {
        layout,
        codes_split: codes,
        scales,
        zero_points: Some(zero_points),
        affine: aux,
    })
}

fn check_len(len: usize, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::ShapeMismatch(format!(
            "matrix dims must be positive, got {rows}x{cols}"
        )));
    }
    if len != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "expected {} elements for {rows}x{cols}, got {len}",
            rows * cols
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f32, b: f32) -> bool {
        (a - b).abs() <= 1e-6 * b.abs().max(1.0)
    }

    #[test]
    fn split_fig_shapes() {
        let w: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let (_, shape) = subchannel_split(&w, (2, 6), 3).unwrap();
        assert_eq!(shape, (4, 3));

        // block_size == K is the identity split.
        let (out, shape) = subchannel_split(&w, (2, 6), 6).unwrap();
        assert_eq!(shape, (2, 6));
        assert_eq!(out, w);
    }

    #[test]
    fn split_regroups_row_major() {
        let w = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (out, shape) = subchannel_split(&w, (2, 4), 2).unwrap();
        assert_eq!(shape, (4, 2));
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let merged = subchannel_merge(&out, shape, (2, 4)).unwrap();
        assert_eq!(merged, w.to_vec());
    }

    #[test]
    fn split_rejects_non_divisible_block() {
        let w = vec![0.0f32; 12];
        let err = subchannel_split(&w, (2, 6), 4).unwrap_err();
        assert!(err.to_string().contains("block size mismatch"));
    }

    #[test]
    fn absmean_example_channel() {
        let w = [0.5f32, -1.0, 1.5, -0.25];
        let q = absmean_binarize(&w, (1, 4), DEFAULT_EPS).unwrap();
        assert_eq!(q.codes, vec![1, -1, 1, -1]);
        assert!(close(q.scales[0], 0.8125));
        let d = dequantize(&q).unwrap();
        assert_eq!(d, vec![0.8125, -0.8125, 0.8125, -0.8125]);
    }

    #[test]
    fn absmean_zero_channel_dequantizes_to_zero() {
        let w = [0.0f32; 4];
        let q = absmean_binarize(&w, (1, 4), 1e-6).unwrap();
        assert_eq!(q.codes, vec![1, 1, 1, 1]);
        assert_eq!(q.scales[0], 0.0);
        assert_eq!(dequantize(&q).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn absmean_constant_magnitude_is_lossless() {
        let w = [-2.0f32, -2.0];
        let q = absmean_binarize(&w, (1, 2), DEFAULT_EPS).unwrap();
        assert_eq!(q.codes, vec![-1, -1]);
        assert_eq!(q.scales[0], 2.0);
        assert_eq!(dequantize(&q).unwrap(), vec![-2.0, -2.0]);
    }

    #[test]
    fn absmean_rejects_non_finite() {
        let w = [0.5f32, f32::NAN];
        let err = absmean_binarize(&w, (1, 2), DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, Error::NonFiniteWeights));
    }

    #[test]
    fn dequantize_affine_map() {
        let q = QuantizedTensor {
            codes: vec![0, 1, 2, 3],
            scales: vec![1.0],
            zero_points: Some(vec![-1.0]),
            original_shape: (1, 4),
            pad: 0,
            scheme: QuantScheme::absmax_asym(2),
        };
        assert_eq!(dequantize(&q).unwrap(), vec![-1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn absmax_two_bit_exact_on_four_levels() {
        let w = [-1.0f32, 0.0, 1.0, 2.0];
        let q = quantize_absmax_asym(&w, (1, 4), &QuantScheme::absmax_asym(2)).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.zero_points, Some(vec![-1.0]));
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q).unwrap(), w.to_vec());
    }

    #[test]
    fn absmax_degenerate_group_reproduces_constant() {
        let w = [5.0f32, 5.0, 5.0];
        for bits in [1, 2] {
            let q = quantize_absmax_asym(&w, (1, 3), &QuantScheme::absmax_asym(bits)).unwrap();
            assert_eq!(q.scales, vec![0.0]);
            assert_eq!(q.zero_points, Some(vec![5.0]));
            assert_eq!(q.codes, vec![0, 0, 0]);
            assert_eq!(dequantize(&q).unwrap(), w.to_vec());
        }
    }

    #[test]
    fn absmax_one_bit_rounds_to_range_endpoints() {
        let w = [-1.0f32, 0.0, 1.0, 2.0];
        let q = quantize_absmax_asym(&w, (1, 4), &QuantScheme::absmax_asym(1)).unwrap();
        assert_eq!(q.scales, vec![3.0]);
        assert_eq!(q.zero_points, Some(vec![-1.0]));
        assert_eq!(q.codes, vec![0, 0, 1, 1]);
        assert_eq!(dequantize(&q).unwrap(), vec![-1.0, -1.0, 2.0, 2.0]);
    }

    #[test]
    fn rounding_is_half_to_even() {
        // lo=0, hi=3, scale=1, so u = w and 0.5 / 1.5 are exact ties.
        let w = [0.0f32, 0.5, 1.5, 3.0];
        let q = quantize_absmax_asym(&w, (1, 4), &QuantScheme::absmax_asym(2)).unwrap();
        assert_eq!(q.codes, vec![0, 0, 2, 3]);
    }

    #[test]
    fn fake_quant_composes_quantize_and_dequantize() {
        let w = [0.5f32, -1.0, 1.5, -0.25];
        let fq = fake_quant(&w, (1, 4), &QuantScheme::absmean1()).unwrap();
        assert_eq!(fq, vec![0.8125, -0.8125, 0.8125, -0.8125]);

        // A group of <= 4 distinct equally spaced values is exact at 2 bits.
        let w = [0.2f32, 0.4, 0.6, 0.8, 0.4, 0.2];
        let fq = fake_quant(&w, (1, 6), &QuantScheme::absmax_asym(2)).unwrap();
        for (a, b) in w.iter().zip(&fq) {
            assert!(
                (a - b).abs() < 1e-6,
                "expected exact reconstruction, got {fq:?}"
            );
        }
    }

    #[test]
    fn mse_examples() {
        let w = [3.0f32, 3.0, 3.0];
        assert_eq!(
            quant_mse(&w, (1, 3), &QuantScheme::absmean1()).unwrap(),
            0.0
        );

        let w = [1.0f32, 2.0, 3.0];
        let mse = quant_mse(&w, (1, 3), &QuantScheme::absmean1()).unwrap();
        assert!((mse - 2.0 / 3.0).abs() < 1e-12, "mse = {mse}");
    }

    #[test]
    fn subchannel_padding_roundtrips() {
        // cols=5 with block 3 pads each row by one zero slot.
        let w = [0.5f32, -1.0, 1.5, -0.25, 2.0, -0.5, 0.75, -2.0, 1.0, 0.25];
        let scheme = QuantScheme::absmean1_block(3);
        let q = quantize(&w, (2, 5), &scheme).unwrap();
        assert_eq!(q.pad, 1);
        assert_eq!(q.split_shape(), (4, 3));
        assert_eq!(q.scales.len(), 4);
        // Scale of the final partial block covers only its two real values.
        assert!(close(q.scales[1], (0.25 + 2.0) / 2.0));
        let d = dequantize(&q).unwrap();
        assert_eq!(d.len(), 10);
    }

    #[test]
    fn no_hidden_centering() {
        // Shifting a channel by a constant changes the codes: binarization
        // acts on raw values, not mean-centered ones.
        let w = [0.5f32, -1.0, 1.5, -0.25];
        let shifted: Vec<f32> = w.iter().map(|v| v + 10.0).collect();
        let q = absmean_binarize(&w, (1, 4), DEFAULT_EPS).unwrap();
        let q_shifted = absmean_binarize(&shifted, (1, 4), DEFAULT_EPS).unwrap();
        assert_eq!(q.codes, vec![1, -1, 1, -1]);
        assert_eq!(q_shifted.codes, vec![1, 1, 1, 1]);
        assert_ne!(q.codes, q_shifted.codes);
    }

    #[test]
    fn refinement_and_bit_monotonicity_on_fixed_tensor() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f32> = (0..4 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shape = (4, 32);

        let pc = quant_mse(&w, shape, &QuantScheme::absmean1()).unwrap();
        let b16 = quant_mse(&w, shape, &QuantScheme::absmean1_block(16)).unwrap();
        let b8 = quant_mse(&w, shape, &QuantScheme::absmean1_block(8)).unwrap();
        assert!(pc >= b16 && b16 >= b8, "pc={pc} b16={b16} b8={b8}");

        let one = quant_mse(&w, shape, &QuantScheme::absmax_asym(1)).unwrap();
        let two = quant_mse(&w, shape, &QuantScheme::absmax_asym(2)).unwrap();
        assert!(two <= one, "two={two} one={one}");
    }

    proptest! {
        #[test]
        fn absmean_codes_are_never_zero(
            values in proptest::collection::vec(-1.0f32..1.0, 1..64),
            zero_mask in proptest::collection::vec(any::<bool>(), 1..64),
        ) {
            let w: Vec<f32> = values
                .iter()
                .zip(zero_mask.iter().cycle())
                .map(|(&v, &z)| if z { 0.0 } else { v })
                .collect();
            let q = absmean_binarize(&w, (1, w.len()), DEFAULT_EPS).unwrap();
            prop_assert!(q.codes.iter().all(|&c| c == 1 || c == -1));
        }

        #[test]
        fn roundtrip_preserves_shape(
            rows in 1usize..5,
            cols in 1usize..40,
            block in 1usize..17,
            seed in any::<u64>(),
            scheme_pick in 0u8..4,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            let scheme = match scheme_pick {
                0 => QuantScheme::absmean1(),
                1 => QuantScheme::absmean1_block(block),
                2 => QuantScheme::absmax_asym(2).with_block(block),
                _ => QuantScheme::e3(),
            };
            let q = quantize(&w, (rows, cols), &scheme).unwrap();
            let d = dequantize(&q).unwrap();
            prop_assert_eq!(d.len(), w.len());
            prop_assert!(d.iter().all(|v| v.is_finite()));
        }
    }
}
