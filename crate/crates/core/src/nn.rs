//! One-hidden-layer `tanh` network evaluated with GEMM.
//!
//! With patterns as rows of `X` (`n_p × n_i`) and targets `T` (`n_p × n_o`):
//!
//! ```text
//! H   = tanh(X · W_ihᵀ)                 n_p × n_h
//! Y   = tanh(H · W_hoᵀ)                 n_p × n_o
//! Y_Δ = (1 − Y∘Y) ∘ (T − Y)
//! H_Δ = (1 − H∘H) ∘ (Y_Δ · W_ho)
//! G_ih = H_Δᵀ · X                       n_h × n_i
//! G_ho = Y_Δᵀ · H                       n_o × n_h
//! ```
//!
//! `∘` is the elementwise product and `1` the all-ones matrix. The returned
//! `G` equals `−½ ∂E/∂W` for the summed squared error `E = Σ (y − t)²`, so it
//! points uphill in `−E`; the optimizer steps along it.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gemm::{Kernel, Op};
use crate::matcore::{elemwise_mul, ones_minus_sq, sub_mat, tanh_map, Mat32};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ULSNN1";

/// Layer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetShape {
    pub n_i: usize,
    pub n_h: usize,
    pub n_o: usize,
}

impl NetShape {
    pub const fn new(n_i: usize, n_h: usize, n_o: usize) -> Self {
        NetShape { n_i, n_h, n_o }
    }

    /// The 400/480/3203 character-recognition network.
    pub const fn jocr() -> Self {
        NetShape::new(400, 480, 3203)
    }

    pub fn param_count(&self) -> usize {
        param_count(self.n_i, self.n_h, self.n_o)
    }

    /// Bytes of one single-precision parameter or gradient vector.
    pub fn vector_bytes(&self) -> u64 {
        4 * self.param_count() as u64
    }

    pub fn error_flops(&self, n_p: usize) -> Result<u64> {
        error_flops(n_p, self.n_i, self.n_h, self.n_o)
    }

    pub fn gradient_flops(&self, n_p: usize) -> Result<u64> {
        gradient_flops(n_p, self.n_i, self.n_h, self.n_o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    shape: NetShape,
    /// `n_h × n_i`
    pub w_ih: Mat32,
    /// `n_o × n_h`
    pub w_ho: Mat32,
}

impl MlpParams {
    pub fn zeros(shape: NetShape) -> Self {
        MlpParams {
            shape,
            w_ih: Mat32::zeros(shape.n_h, shape.n_i),
            w_ho: Mat32::zeros(shape.n_o, shape.n_h),
        }
    }

    /// Uniform weights in `±1/sqrt(fan_in)`.
    pub fn random(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let si = 1.0 / (shape.n_i as f32).sqrt();
        let sh = 1.0 / (shape.n_h as f32).sqrt();
        let w_ih = Mat32::from_fn(shape.n_h, shape.n_i, |_, _| rng.gen_range(-si..si));
        let w_ho = Mat32::from_fn(shape.n_o, shape.n_h, |_, _| rng.gen_range(-sh..sh));
        MlpParams { shape, w_ih, w_ho }
    }

    pub fn from_weights(w_ih: Mat32, w_ho: Mat32) -> Result<Self> {
        if w_ho.cols() != w_ih.rows() {
            return Err(shape_err(
                "MlpParams",
                format!(
                    "w_ih is {}x{} but w_ho is {}x{}",
                    w_ih.rows(),
                    w_ih.cols(),
                    w_ho.rows(),
                    w_ho.cols()
                ),
            ));
        }
        let shape = NetShape::new(w_ih.cols(), w_ih.rows(), w_ho.rows());
        Ok(MlpParams {
            shape,
            w_ih: w_ih.with_stride(w_ih.cols())?,
            w_ho: w_ho.with_stride(w_ho.cols())?,
        })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    /// `w_ih` then `w_ho`, each row-major.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut v = self.w_ih.to_vec();
        v.extend(self.w_ho.to_vec());
        v
    }

    pub fn from_flat(shape: NetShape, flat: &[f32]) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(shape_err(
                "from_flat",
                format!("{} values for {} parameters", flat.len(), shape.param_count()),
            ));
        }
        let split = shape.n_h * shape.n_i;
        Ok(MlpParams {
            shape,
            w_ih: Mat32::from_vec(shape.n_h, shape.n_i, flat[..split].to_vec())?,
            w_ho: Mat32::from_vec(shape.n_o, shape.n_h, flat[split..].to_vec())?,
        })
    }

    /// `W := W + step · d` with `d` in flat order.
    pub fn add_scaled(&mut self, step: f32, d: &[f32]) -> Result<()> {
        if d.len() != self.param_count() {
            return Err(shape_err(
                "add_scaled",
                format!("direction of {} for {} parameters", d.len(), self.param_count()),
            ));
        }
        let split = self.shape.n_h * self.shape.n_i;
        add_scaled_rows(&mut self.w_ih, step, &d[..split]);
        add_scaled_rows(&mut self.w_ho, step, &d[split..]);
        Ok(())
    }

    /// CRC-32 of the little-endian weight bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.w_ih.rows_iter().chain(self.w_ho.rows_iter()).flatten() {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }

    pub fn all_finite(&self) -> bool {
        self.w_ih.all_finite() && self.w_ho.all_finite()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for n in [self.shape.n_i, self.shape.n_h, self.shape.n_o] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.param_count());
        for v in self.w_ih.rows_iter().chain(self.w_ho.rows_iter()).flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint shorter than its magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Format("layer width does not fit usize".into()))?;
        }
        let shape = NetShape::new(dims[0], dims[1], dims[2]);
        let count = dims[0]
            .checked_mul(dims[1])
            .and_then(|a| dims[1].checked_mul(dims[2]).and_then(|b| a.checked_add(b)))
            .ok_or_else(|| Error::Format("parameter count overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * count {
            return Err(Error::Format(format!(
                "expected {} weight bytes, found {}",
                4 * count,
                bytes.len()
            )));
        }
        let flat: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        MlpParams::from_flat(shape, &flat)
    }
}

fn add_scaled_rows(m: &mut Mat32, step: f32, d: &[f32]) {
    let cols = m.cols();
    for (i, dr) in d.chunks_exact(cols.max(1)).enumerate().take(m.rows()) {
        for (w, &dv) in m.row_mut(i).iter_mut().zip(dr) {
            *w += step * dv;
        }
    }
}

/// Patterns and targets, one row per pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Mat32,
    pub t: Mat32,
}

impl Batch {
    pub fn new(x: Mat32, t: Mat32) -> Result<Self> {
        if x.rows() != t.rows() {
            return Err(shape_err(
                "Batch",
                format!("{} input rows but {} target rows", x.rows(), t.rows()),
            ));
        }
        Ok(Batch { x, t })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Batch> {
        Ok(Batch {
            x: self.x.slice_rows(start, end)?,
            t: self.t.slice_rows(start, end)?,
        })
    }

    /// The rows selected by [`in_subsample`].
    pub fn subsample(&self, stride: usize) -> Result<Batch> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| in_subsample(i, stride)).collect();
        let x = Mat32::from_fn(idx.len(), self.x.cols(), |i, j| self.x.get(idx[i], j));
        let t = Mat32::from_fn(idx.len(), self.t.cols(), |i, j| self.t.get(idx[i], j));
        Batch::new(x, t)
    }

    fn check(&self, shape: NetShape) -> Result<()> {
        if self.x.cols() != shape.n_i || self.t.cols() != shape.n_o {
            return Err(shape_err(
                "batch",
                format!(
                    "x has {} cols and t has {} cols for a {}/{}/{} net",
                    self.x.cols(),
                    self.t.cols(),
                    shape.n_i,
                    shape.n_h,
                    shape.n_o
                ),
            ));
        }
        Ok(())
    }
}

/// Whether pattern `row` belongs to the roughly `1/stride` subsample.
///
/// Membership hashes the row index, so the sample does not alias with
/// periodic orderings such as labels assigned round-robin.
pub fn in_subsample(row: usize, stride: usize) -> bool {
    if stride <= 1 {
        return true;
    }
    let mut z = (row as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z.is_multiple_of(stride as u64)
}

/// Gradient, error and accounting for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    /// `n_h × n_i`
    pub g_ih: Mat32,
    /// `n_o × n_h`
    pub g_ho: Mat32,
    pub error: f64,
    pub n_patterns: usize,
    pub flops: u64,
}

impl GradResult {
    pub fn zeros(shape: NetShape) -> Self {
        GradResult {
            g_ih: Mat32::zeros(shape.n_h, shape.n_i),
            g_ho: Mat32::zeros(shape.n_o, shape.n_h),
            error: 0.0,
            n_patterns: 0,
            flops: 0,
        }
    }

    pub fn to_flat(&self) -> Vec<f32> {
        let mut v = self.g_ih.to_vec();
        v.extend(self.g_ho.to_vec());
        v
    }

    /// Elementwise sum with another partial result.
    pub fn accumulate(&mut self, other: &GradResult) -> Result<()> {
        if !self.g_ih.same_shape(&other.g_ih) || !self.g_ho.same_shape(&other.g_ho) {
            return Err(shape_err("GradResult::accumulate", "partial shapes differ"));
        }
        for (a, b) in self.g_ih.raw_mut().iter_mut().zip(other.g_ih.raw()) {
            *a += b;
        }
        for (a, b) in self.g_ho.raw_mut().iter_mut().zip(other.g_ho.raw()) {
            *a += b;
        }
        self.error += other.error;
        self.n_patterns += other.n_patterns;
        self.flops += other.flops;
        Ok(())
    }
}

/// Hidden and output activations for every pattern.
pub fn forward(p: &MlpParams, x: &Mat32, kernel: &Kernel) -> Result<(Mat32, Mat32)> {
    if x.cols() != p.shape.n_i {
        return Err(shape_err(
            "forward",
            format!("x has {} cols, network expects {}", x.cols(), p.shape.n_i),
        ));
    }
    let h = tanh_map(&kernel.matmul(Op::N, x, Op::T, &p.w_ih)?);
    let y = tanh_map(&kernel.matmul(Op::N, &h, Op::T, &p.w_ho)?);
    Ok((h, y))
}

/// `Σᵢ Σⱼ (yᵢⱼ − tᵢⱼ)²`, row-major, accumulated in `f64`.
pub fn mse_error(y: &Mat32, t: &Mat32) -> Result<f64> {
    if !y.same_shape(t) {
        return Err(shape_err(
            "mse_error",
            format!("{}x{} vs {}x{}", y.rows(), y.cols(), t.rows(), t.cols()),
        ));
    }
    let mut e = 0.0f64;
    for (ry, rt) in y.rows_iter().zip(t.rows_iter()) {
        for (&a, &b) in ry.iter().zip(rt) {
            let d = a as f64 - b as f64;
            e += d * d;
        }
    }
    Ok(e)
}

/// Error of the network on a batch and the contributing flops.
pub fn error(p: &MlpParams, batch: &Batch, kernel: &Kernel) -> Result<(f64, u64)> {
    batch.check(p.shape)?;
    let (_, y) = forward(p, &batch.x, kernel)?;
    Ok((mse_error(&y, &batch.t)?, p.shape.error_flops(batch.len())?))
}

/// Error and `−½ ∂E/∂W` from a single forward pass.
pub fn gradient(p: &MlpParams, batch: &Batch, kernel: &Kernel) -> Result<GradResult> {
    batch.check(p.shape)?;
    let (h, y) = forward(p, &batch.x, kernel)?;
    let error = mse_error(&y, &batch.t)?;
    let y_delta = elemwise_mul(&ones_minus_sq(&y), &sub_mat(&batch.t, &y)?)?;
    let back = kernel.matmul(Op::N, &y_delta, Op::N, &p.w_ho)?;
    let h_delta = elemwise_mul(&ones_minus_sq(&h), &back)?;
    let g_ih = kernel.matmul(Op::T, &h_delta, Op::N, &batch.x)?;
    let g_ho = kernel.matmul(Op::T, &y_delta, Op::N, &h)?;
    Ok(GradResult {
        g_ih,
        g_ho,
        error,
        n_patterns: batch.len(),
        flops: p.shape.gradient_flops(batch.len())?,
    })
}

/// Index of the largest output per pattern.
pub fn predict(p: &MlpParams, x: &Mat32, kernel: &Kernel) -> Result<Vec<usize>> {
    let (_, y) = forward(p, x, kernel)?;
    Ok(y.rows_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect())
}

/// Fraction of patterns whose predicted class differs from the label.
pub fn classification_error(p: &MlpParams, x: &Mat32, labels: &[usize], kernel: &Kernel) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(shape_err("classification_error", format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(p, x, kernel)?;
    let wrong = pred.iter().zip(labels).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / labels.len() as f64)
}

pub fn param_count(n_i: usize, n_h: usize, n_o: usize) -> usize {
    n_i * n_h + n_h * n_o
}

fn mul_all(xs: &[u64]) -> Result<u64> {
    xs.iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or(Error::Overflow)
}

/// `2 · n_p · (n_i + n_o) · n_h`
pub fn error_flops(n_p: usize, n_i: usize, n_h: usize, n_o: usize) -> Result<u64> {
    let io = (n_i as u64).checked_add(n_o as u64).ok_or(Error::Overflow)?;
    mul_all(&[2, n_p as u64, io, n_h as u64])
}

/// `n_p · (4 · n_i · n_h + 6 · n_h · n_o)`
pub fn gradient_flops(n_p: usize, n_i: usize, n_h: usize, n_o: usize) -> Result<u64> {
    let a = mul_all(&[4, n_i as u64, n_h as u64])?;
    let b = mul_all(&[6, n_h as u64, n_o as u64])?;
    mul_all(&[n_p as u64, a.checked_add(b).ok_or(Error::Overflow)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gemm::sgemm_naive;

    fn rnd(rows: usize, cols: usize, seed: u64, lo: f32, hi: f32) -> Mat32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat32::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
    }

    // relative to the activation range: outputs of tanh are within ±1
    fn close(a: f32, b: f32, rel: f32) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn subsample_keeps_about_one_in_stride_and_every_residue() {
        let kept: Vec<usize> = (0..20_000).filter(|&i| in_subsample(i, 10)).collect();
        assert!((1_800..2_200).contains(&kept.len()), "{}", kept.len());
        let mut seen = [0usize; 50];
        kept.iter().for_each(|&i| seen[i % 50] += 1);
        assert!(seen.iter().all(|&c| c >= 20), "{seen:?}");
        assert!((0..100).all(|i| in_subsample(i, 1)));
    }

    #[test]
    fn zero_weights_give_zero_activations() {
        let p = MlpParams::zeros(NetShape::new(4, 3, 2));
        let (h, y) = forward(&p, &rnd(5, 4, 1, -1.0, 1.0), &Kernel::default()).unwrap();
        assert!(h.raw().iter().chain(y.raw()).all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_network() {
        let p = MlpParams::from_weights(Mat32::filled(1, 1, 1.0), Mat32::filled(1, 1, 1.0)).unwrap();
        let (_, y) = forward(&p, &Mat32::filled(1, 1, 0.5), &Kernel::default()).unwrap();
        // tanh(tanh(0.5)) from the libm reference
        assert!((y.get(0, 0) - 0.431_808_18).abs() < 1e-6);
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let shape = NetShape::new(400, 7, 5);
        let p = MlpParams::random(shape, 3);
        let x = rnd(3, 400, 4, -1.0, 1.0);
        let (h, y) = forward(&p, &x, &Kernel::default()).unwrap();
        for r in 0..3 {
            let mut hid = vec![0.0f32; shape.n_h];
            for (j, hv) in hid.iter_mut().enumerate() {
                let mut s = 0.0f32;
                for k in 0..shape.n_i {
                    s += p.w_ih.get(j, k) * x.get(r, k);
                }
                *hv = s.tanh();
                assert!(close(h.get(r, j), *hv, 1e-5));
            }
            for i in 0..shape.n_o {
                let mut s = 0.0f32;
                for (j, hv) in hid.iter().enumerate() {
                    s += p.w_ho.get(i, j) * hv;
                }
                assert!(close(y.get(r, i), s.tanh(), 1e-5));
            }
        }
    }

    #[test]
    fn blocked_and_naive_forward_agree() {
        let p = MlpParams::random(NetShape::new(37, 11, 6), 8);
        let x = rnd(29, 37, 9, -1.0, 1.0);
        let (_, yb) = forward(&p, &x, &Kernel::default()).unwrap();
        let (_, yn) = forward(&p, &x, &Kernel::Naive).unwrap();
        for (a, b) in yb.raw().iter().zip(yn.raw()) {
            assert!(close(*a, *b, 1e-5));
        }
    }

    #[test]
    fn mse_values() {
        let t = rnd(3, 4, 2, -1.0, 1.0);
        assert_eq!(mse_error(&t, &t).unwrap(), 0.0);
        let y = Mat32::from_rows(&[[1.0, 0.0]]).unwrap();
        let t = Mat32::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(mse_error(&y, &t).unwrap(), 2.0);
        assert!(mse_error(&y, &Mat32::zeros(2, 1)).is_err());
    }

    #[test]
    fn mse_matches_double_loop_exactly() {
        let y = rnd(6, 5, 10, -1.0, 1.0);
        let t = rnd(6, 5, 11, -1.0, 1.0);
        let mut e = 0.0f64;
        for i in 0..6 {
            for j in 0..5 {
                let d = y.get(i, j) as f64 - t.get(i, j) as f64;
                e += d * d;
            }
        }
        assert_eq!(mse_error(&y, &t).unwrap().to_bits(), e.to_bits());
    }

    #[test]
    fn gradient_vanishes_at_targets() {
        let p = MlpParams::random(NetShape::new(5, 4, 3), 12);
        let x = rnd(6, 5, 13, -1.0, 1.0);
        let (_, y) = forward(&p, &x, &Kernel::default()).unwrap();
        let g = gradient(&p, &Batch::new(x, y).unwrap(), &Kernel::default()).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(g.error, 0.0);
    }

    #[test]
    fn transposed_gemm_path_matches_explicit_transpose() {
        let shape = NetShape::new(9, 6, 4);
        let p = MlpParams::random(shape, 14);
        let batch = Batch::new(rnd(15, 9, 15, -1.0, 1.0), rnd(15, 4, 16, -1.0, 1.0)).unwrap();
        let g = gradient(&p, &batch, &Kernel::default()).unwrap();

        let (h, y) = forward(&p, &batch.x, &Kernel::Naive).unwrap();
        let yd = elemwise_mul(&ones_minus_sq(&y), &sub_mat(&batch.t, &y).unwrap()).unwrap();
        let mut back = Mat32::zeros(15, 6);
        sgemm_naive(Op::N, Op::N, 1.0, &yd, &p.w_ho, 0.0, &mut back).unwrap();
        let hd = elemwise_mul(&ones_minus_sq(&h), &back).unwrap();
        let mut g_ih = Mat32::zeros(6, 9);
        sgemm_naive(Op::N, Op::N, 1.0, &hd.transpose(), &batch.x, 0.0, &mut g_ih).unwrap();
        for (a, b) in g.g_ih.raw().iter().zip(g_ih.raw()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gradient_is_additive_over_row_partitions() {
        let shape = NetShape::new(8, 5, 3);
        let p = MlpParams::random(shape, 20);
        let batch = Batch::new(rnd(30, 8, 21, -1.0, 1.0), rnd(30, 3, 22, -1.0, 1.0)).unwrap();
        let whole = gradient(&p, &batch, &Kernel::default()).unwrap();
        let mut parts = GradResult::zeros(shape);
        for (s, e) in [(0, 7), (7, 19), (19, 30)] {
            parts
                .accumulate(&gradient(&p, &batch.slice(s, e).unwrap(), &Kernel::default()).unwrap())
                .unwrap();
        }
        for (a, b) in whole.to_flat().iter().zip(parts.to_flat()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
        }
        assert_eq!(parts.n_patterns, 30);
        assert_eq!(parts.flops, whole.flops);
        assert!((parts.error - whole.error).abs() <= 1e-9 * whole.error);
    }

    #[test]
    fn flops_field_matches_formula() {
        for (n_p, n_i, n_h, n_o) in [(1, 1, 1, 1), (17, 9, 4, 3), (40, 20, 12, 7)] {
            let shape = NetShape::new(n_i, n_h, n_o);
            let p = MlpParams::random(shape, 1);
            let batch = Batch::new(rnd(n_p, n_i, 2, -1.0, 1.0), rnd(n_p, n_o, 3, -1.0, 1.0)).unwrap();
            let g = gradient(&p, &batch, &Kernel::default()).unwrap();
            assert_eq!(g.flops, gradient_flops(n_p, n_i, n_h, n_o).unwrap());
            assert_eq!(g.flops as usize, n_p * (4 * n_i * n_h + 6 * n_h * n_o));
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(400, 480, 3203), 1_729_440);
        assert_eq!(param_count(100, 50, 50), 7_500);
        assert_eq!(param_count(1, 1, 1), 2);
    }

    #[test]
    fn flop_formulas_at_full_scale() {
        let e = error_flops(9_264_000, 400, 480, 3203).unwrap();
        assert_eq!(e, 2 * 9_264_000 * (400 + 3203) * 480);
        assert_eq!((e as f64 / 1e12).round(), 32.0);
        let g = gradient_flops(9_264_000, 400, 480, 3203).unwrap();
        assert_eq!(g, 92_571_816_960_000);
        assert!(matches!(
            gradient_flops(usize::MAX, 400, 480, 3203),
            Err(Error::Overflow)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let p = MlpParams::random(NetShape::new(6, 4, 3), 5);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 6 + 24 + 4 * p.param_count());
        assert_eq!(&buf[..6], b"ULSNN1");
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 6);
        let back = MlpParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.checksum(), p.checksum());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(MlpParams::read_checkpoint(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(
            MlpParams::read_checkpoint(&buf[..buf.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn flat_roundtrip_and_step() {
        let shape = NetShape::new(3, 2, 2);
        let p = MlpParams::random(shape, 9);
        let flat = p.to_flat();
        assert_eq!(MlpParams::from_flat(shape, &flat).unwrap(), p);
        let mut q = p.clone();
        q.add_scaled(0.5, &vec![2.0; flat.len()]).unwrap();
        for (a, b) in q.to_flat().iter().zip(&flat) {
            assert_eq!(*a, b + 1.0);
        }
        assert!(q.add_scaled(1.0, &[1.0]).is_err());
    }
}
