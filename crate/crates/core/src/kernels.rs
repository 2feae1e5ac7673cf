//! Bit-packed weight storage and the inference-path matmul.
//!
//! Codes are packed LSB-first within each byte in ascending weight order:
//! 1-bit sign codes store +1 as bit 1 and -1 as bit 0; 2-bit codes store the
//! raw value `0..4` in ascending bit pairs. A partial final byte is
//! zero-padded and `logical_len` governs unpacking.
//!
//! [`PackedLayer::matmul`] computes on raw codes and applies each group's
//! scale once to the block partial sum, instead of dequantizing the weights
//! first. Batch rows are processed in parallel; per-row results are
//! deterministic regardless of thread count.

use rayon::prelude::*;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::quant::{GroupLayout, QuantMode, QuantScheme, QuantizedTensor};

/// Bit-packed code buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    pub bytes: Vec<u8>,
    /// 1 or 2.
    pub bit_width: u8,
    /// Number of packed codes; trailing bits of the final byte are padding.
    pub logical_len: usize,
}

impl PackedBits {
    /// Byte length required for `len` codes at `bit_width` bits.
    pub fn byte_len(len: usize, bit_width: u8) -> usize {
        (len * bit_width as usize).div_ceil(8)
    }
}

/// Pack codes at the given width. 1-bit packing accepts sign codes
/// {-1, +1}; 2-bit packing accepts `0..4`.
pub fn pack_codes(codes: &[i8], bit_width: u8) -> Result<PackedBits> {
    let mut bytes = vec![0u8; PackedBits::byte_len(codes.len(), bit_width)];
    match bit_width {
        1 => {
            for (i, &c) in codes.iter().enumerate() {
                let bit = match c {
                    1 => 1u8,
                    -1 => 0u8,
                    _ => return Err(Error::CodeOutOfRange { code: c, bits: 1 }),
                };
                bytes[i / 8] |= bit << (i % 8);
            }
        }
        2 => {
            for (i, &c) in codes.iter().enumerate() {
                if !(0..4).contains(&c) {
                    return Err(Error::CodeOutOfRange { code: c, bits: 2 });
                }
                bytes[i / 4] |= (c as u8) << (2 * (i % 4));
            }
        }
        other => {
            return Err(Error::InvalidScheme(format!(
                "unsupported pack width {other}"
            )))
        }
    }
    Ok(PackedBits {
        bytes,
        bit_width,
        logical_len: codes.len(),
    })
}

/// Exact inverse of [`pack_codes`].
pub fn unpack_codes(packed: &PackedBits) -> Vec<i8> {
    let mut codes = Vec::with_capacity(packed.logical_len);
    match packed.bit_width {
        1 => {
            for i in 0..packed.logical_len {
                let bit = (packed.bytes[i / 8] >> (i % 8)) & 1;
                codes.push(if bit == 1 { 1 } else { -1 });
            }
        }
        _ => {
            for i in 0..packed.logical_len {
                codes.push(((packed.bytes[i / 4] >> (2 * (i % 4))) & 0b11) as i8);
            }
        }
    }
    codes
}

/// One weight matrix in packed form, ready for the deferred-scale matmul.
///
/// 1-bit layers always hold sign codes: an asymmetric 1-bit tensor with
/// codes {0, 1} is rewritten as signs with scale `s/2` and zero point
/// `zp + s/2`, which reconstructs the same two levels.
#[derive(Debug, Clone)]
pub struct PackedLayer {
    pub codes: PackedBits,
    pub scales: Vec<f32>,
    pub zero_points: Option<Vec<f32>>,
    /// Original weight shape `(out_channels, in_features)`.
    pub shape: (usize, usize),
    pub scheme: QuantScheme,
    layout: GroupLayout,
}

impl PackedLayer {
    pub fn from_quantized(q: &QuantizedTensor) -> Result<Self> {
        q.validate()?;
        let layout = GroupLayout::new(q.original_shape.0, q.original_shape.1, q.scheme.granularity);
        let (codes, scales, zero_points) = match (q.scheme.mode, q.scheme.bits) {
            (QuantMode::AbsmeanSymmetric, _) => (pack_codes(&q.codes, 1)?, q.scales.clone(), None),
            (QuantMode::AbsmaxAsymmetric, 1) => {
                let signs: Vec<i8> = q
                    .codes
                    .iter()
                    .map(|&c| if c == 0 { -1 } else { 1 })
                    .collect();
                let scales: Vec<f32> = q.scales.iter().map(|s| s / 2.0).collect();
                let zps: Vec<f32> = q
                    .zero_points
                    .as_ref()
                    .expect("validated asymmetric tensor has zero points")
                    .iter()
                    .zip(&q.scales)
                    .map(|(zp, s)| zp + s / 2.0)
                    .collect();
                (pack_codes(&signs, 1)?, scales, Some(zps))
            }
            (QuantMode::AbsmaxAsymmetric, _) => (
                pack_codes(&q.codes, 2)?,
                q.scales.clone(),
                q.zero_points.clone(),
            ),
        };
        Ok(Self {
            codes,
            scales,
            zero_points,
            shape: q.original_shape,
            scheme: q.scheme,
            layout,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.shape.0
    }

    pub fn in_features(&self) -> usize {
        self.shape.1
    }

    /// Scale groups per output channel.
    pub fn groups_per_channel(&self) -> usize {
        self.layout.groups_per_row
    }

    /// Bytes occupied by codes plus scale/zero-point metadata (f32 meta).
    pub fn storage_bytes(&self) -> usize {
        let meta = self.scales.len() + self.zero_points.as_ref().map_or(0, |z| z.len());
        self.codes.bytes.len() + 4 * meta
    }

    /// `y = a . Wᵀ` over packed codes: for every output channel the inner
    /// sum runs on raw codes per block and the block scale multiplies the
    /// partial sum once. Asymmetric layers add `zp_g * sum(a over block g)`.
    ///
    /// `a` is `[batch x in_features]` row-major; the result is
    /// `[batch x out_channels]`.
    pub fn matmul(&self, a: &[f32], batch: usize) -> Result<Vec<f32>> {
        let k = self.in_features();
        if a.len() != batch * k {
            return Err(Error::ShapeMismatch(format!(
                "expected {} activations for batch {batch} x {k}, got {}",
                batch * k,
                a.len()
            )));
        }
        let codes = unpack_codes(&self.codes);
        let c_out = self.out_channels();
        let mut y = vec![0.0f32; batch * c_out];
        y.par_chunks_mut(c_out)
            .zip(a.par_chunks(k))
            .for_each(|(row_out, row_a)| {
                for (c, out) in row_out.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for gc in 0..self.layout.groups_per_row {
                        let g = c * self.layout.groups_per_row + gc;
                        let span = self.layout.group_span(g);
                        let mut partial = 0.0f64;
                        let mut act_sum = 0.0f64;
                        for (j, col) in (span.col_start..span.col_end).enumerate() {
                            let act = row_a[col] as f64;
                            let code = codes[g * self.layout.block + j];
                            // Sign codes reduce to add/subtract.
                            match code {
                                1 => partial += act,
                                -1 => partial -= act,
                                _ => partial += act * code as f64,
                            }
                            act_sum += act;
                        }
                        acc += self.scales[g] as f64 * partial;
                        if let Some(zp) = &self.zero_points {
                            acc += zp[g] as f64 * act_sum;
                        }
                    }
                    *out = acc as f32;
                }
            });
        Ok(y)
    }

    /// Integer-activation variant: block partial sums accumulate in i32 and
    /// the f32 scales apply on the output. Only meaningful when the
    /// activations are already integer-valued (e.g. pre-quantized).
    pub fn matmul_i32(&self, a: &[i32], batch: usize) -> Result<Vec<f32>> {
        let k = self.in_features();
        if a.len() != batch * k {
            return Err(Error::ShapeMismatch(format!(
                "expected {} activations for batch {batch} x {k}, got {}",
                batch * k,
                a.len()
            )));
        }
        let codes = unpack_codes(&self.codes);
        let c_out = self.out_channels();
        let mut y = vec![0.0f32; batch * c_out];
        for (b, row_a) in a.chunks(k).enumerate() {
            for c in 0..c_out {
                let mut acc = 0.0f64;
                for gc in 0..self.layout.groups_per_row {
                    let g = c * self.layout.groups_per_row + gc;
                    let span = self.layout.group_span(g);
                    let mut partial: i32 = 0;
                    let mut act_sum: i32 = 0;
                    for (j, col) in (span.col_start..span.col_end).enumerate() {
                        let act = row_a[col];
                        partial += act * codes[g * self.layout.block + j] as i32;
                        act_sum += act;
                    }
                    acc += self.scales[g] as f64 * partial as f64;
                    if let Some(zp) = &self.zero_points {
                        acc += zp[g] as f64 * act_sum as f64;
                    }
                }
                y[b * c_out + c] = acc as f32;
            }
        }
        Ok(y)
    }
}

/// Reference dense path: `y = a . Wᵀ` with f64 accumulation.
/// `a` is `[batch x k]`, `w` is `[c x k]` row-major.
pub fn matmul_ref(a: &[f32], batch: usize, w: &[f32], shape: (usize, usize)) -> Result<Vec<f32>> {
    let (c_out, k) = shape;
    if a.len() != batch * k || w.len() != c_out * k {
        return Err(Error::ShapeMismatch(format!(
            "matmul_ref: a {} vs batch {batch} x {k}, w {} vs {c_out}x{k}",
            a.len(),
            w.len()
        )));
    }
    let mut y = vec![0.0f32; batch * c_out];
    y.par_chunks_mut(c_out)
        .zip(a.par_chunks(k))
        .for_each(|(row_out, row_a)| {
            for c in 0..c_out {
                let mut acc = 0.0f64;
                for j in 0..k {
                    acc += row_a[j] as f64 * w[c * k + j] as f64;
                }
                row_out[c] = acc as f32;
            }
        });
    Ok(y)
}

/// One timing comparison row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    /// Batch rows.
    pub m: usize,
    /// Inner dimension.
    pub k: usize,
    /// Output channels.
    pub n: usize,
    pub scheme: String,
    pub f32_ns: u128,
    pub packed_ns: u128,
}

/// Wall-clock comparison of the dense f32 matmul against the packed path.
/// Times are the minimum over `reps` runs.
pub fn bench_matmul(
    sizes: &[(usize, usize, usize)],
    reps: usize,
    scheme: &QuantScheme,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    use rand::{Rng, SeedableRng};
    let mut rows = Vec::with_capacity(sizes.len());
    for &(m, k, n) in sizes {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (m * k * n) as u64);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = crate::quant::quantize(&w, (n, k), scheme)?;
        let packed = PackedLayer::from_quantized(&q)?;
        let dense = crate::quant::dequantize(&q)?;

        let mut f32_ns = u128::MAX;
        let mut packed_ns = u128::MAX;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            let y_ref = matmul_ref(&a, m, &dense, (n, k))?;
            f32_ns = f32_ns.min(t.elapsed().as_nanos());

            let t = Instant::now();
            let y_packed = packed.matmul(&a, m)?;
            packed_ns = packed_ns.min(t.elapsed().as_nanos());
            debug_assert_eq!(y_ref.len(), y_packed.len());
        }
        rows.push(BenchRow {
            m,
            k,
            n,
            scheme: scheme.to_string(),
            f32_ns,
            packed_ns,
        });
    }
    Ok(rows)
}

/// Render benchmark rows as CSV with header `m,k,n,scheme,f32_ns,packed_ns`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("m,k,n,scheme,f32_ns,packed_ns\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.m, r.k, r.n, r.scheme, r.f32_ns, r.packed_ns
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{self, QuantScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_bit_packing_example() {
        let codes = [1i8, -1, 1, 1, -1, 1, 1, 1];
        let packed = pack_codes(&codes, 1).unwrap();
        assert_eq!(packed.bytes, vec![0xED]);
        assert_eq!(unpack_codes(&packed), codes.to_vec());
    }

    #[test]
    fn all_plus_one_packs_to_ff() {
        let packed = pack_codes(&[1i8; 8], 1).unwrap();
        assert_eq!(packed.bytes, vec![0xFF]);
    }

    #[test]
    fn two_bit_packing_example() {
        let packed = pack_codes(&[0i8, 1, 2, 3], 2).unwrap();
        assert_eq!(packed.bytes, vec![0xE4]);
        assert_eq!(unpack_codes(&packed), vec![0, 1, 2, 3]);
    }

    #[test]
    fn out_of_range_codes_rejected() {
        assert!(matches!(
            pack_codes(&[0i8], 1),
            Err(Error::CodeOutOfRange { code: 0, bits: 1 })
        ));
        assert!(matches!(
            pack_codes(&[4i8], 2),
            Err(Error::CodeOutOfRange { code: 4, bits: 2 })
        ));
    }

    #[test]
    fn roundtrip_all_partial_byte_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in 0..=257 {
            let signs: Vec<i8> = (0..len)
                .map(|_| if rng.random::<bool>() { 1 } else { -1 })
                .collect();
            let packed = pack_codes(&signs, 1).unwrap();
            assert_eq!(packed.bytes.len(), PackedBits::byte_len(len, 1));
            assert_eq!(unpack_codes(&packed), signs);

            let duos: Vec<i8> = (0..len).map(|_| rng.random_range(0..4)).collect();
            let packed = pack_codes(&duos, 2).unwrap();
            assert_eq!(unpack_codes(&packed), duos);
        }
    }

    #[test]
    fn identity_sign_weights_sum_activations() {
        // All codes +1, all scales 1 -> y[b, c] = sum_k a[b, k].
        let w = vec![1.0f32; 3 * 4];
        let q = quant::quantize(&w, (3, 4), &QuantScheme::absmean1()).unwrap();
        let packed = PackedLayer::from_quantized(&q).unwrap();
        let a = [0.5f32, -1.0, 2.0, 0.25];
        let y = packed.matmul(&a, 1).unwrap();
        let expect = a.iter().sum::<f32>();
        for v in y {
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn subchannel_layout_matches_fig_shapes() {
        // Weights [2x6] split at block 3 -> [4x3]: two partial sums per
        // output channel.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quant::quantize(&w, (2, 6), &QuantScheme::absmean1_block(3)).unwrap();
        let packed = PackedLayer::from_quantized(&q).unwrap();
        assert_eq!(packed.groups_per_channel(), 2);
        assert_eq!(q.split_shape(), (4, 3));

        let a: Vec<f32> = (0..3 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = packed.matmul(&a, 3).unwrap();
        let dense = quant::dequantize(&q).unwrap();
        let y_ref = matmul_ref(&a, 3, &dense, (2, 6)).unwrap();
        for (p, r) in y.iter().zip(&y_ref) {
            assert!((p - r).abs() <= 1e-5 * r.abs().max(1.0));
        }
    }

    #[test]
    fn deferred_scale_equals_prescaled_weights() {
        // Applying the scale to block partial sums distributes over the sum.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w: Vec<f32> = (0..4 * 10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q = quant::quantize(&w, (4, 10), &QuantScheme::e2()).unwrap();
        let packed = PackedLayer::from_quantized(&q).unwrap();
        let a: Vec<f32> = (0..2 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let deferred = packed.matmul(&a, 2).unwrap();
        let prescaled = matmul_ref(&a, 2, &quant::dequantize(&q).unwrap(), (4, 10)).unwrap();
        for (d, p) in deferred.iter().zip(&prescaled) {
            assert!((d - p).abs() <= 1e-5 * p.abs().max(1.0), "{d} vs {p}");
        }
    }

    #[test]
    fn integer_activation_path_matches_float_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w: Vec<f32> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        for scheme in [QuantScheme::e4(), QuantScheme::e1()] {
            let q = quant::quantize(&w, (4, 8), &scheme).unwrap();
            let packed = PackedLayer::from_quantized(&q).unwrap();
            let a_int: Vec<i32> = (0..2 * 8).map(|_| rng.random_range(-5..6)).collect();
            let a_f32: Vec<f32> = a_int.iter().map(|&v| v as f32).collect();
            let yi = packed.matmul_i32(&a_int, 2).unwrap();
            let yf = packed.matmul(&a_f32, 2).unwrap();
            assert_eq!(yi, yf);
        }
    }

    #[test]
    fn packed_storage_fraction_at_block_64() {
        // 1-bit codes at block 64 with f32 scales: (1/32 + 1/64) of the
        // dense f32 weight bytes.
        let w = vec![0.5f32; 128 * 128];
        let q = quant::quantize(&w, (128, 128), &QuantScheme::absmean1_block(64)).unwrap();
        let packed = PackedLayer::from_quantized(&q).unwrap();
        let dense_bytes = 4 * 128 * 128;
        let expect = dense_bytes / 32 + dense_bytes / 64;
        assert_eq!(packed.storage_bytes(), expect);
    }

    #[test]
    fn packed_matmul_is_deterministic_across_reps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f32> = (0..8 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quant::quantize(&w, (8, 64), &QuantScheme::e5()).unwrap();
        let packed = PackedLayer::from_quantized(&q).unwrap();
        let a: Vec<f32> = (0..4 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let first = packed.matmul(&a, 4).unwrap();
        for _ in 0..5 {
            assert_eq!(packed.matmul(&a, 4).unwrap(), first);
        }
    }

    #[test]
    fn bench_emits_one_row_per_size() {
        let rows = bench_matmul(&[(2, 16, 4), (3, 32, 8)], 2, &QuantScheme::e5(), 42).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = bench_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("m,k,n,scheme,f32_ns,packed_ns"));
        assert_eq!(lines.count(), 2);
    }
}
