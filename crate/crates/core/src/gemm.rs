//! Single-precision GEMM: `C := alpha * op(A) * op(B) + beta * C`.
//!
//! Two kernels share one contract:
//!
//! * [`gemm_naive`] is the three-loop reference. It accumulates each dot
//!   product in `f32`, in `k` order, so it is a true single-precision oracle.
//! * [`gemm_blocked`] is the fast path. The output is walked in L2 tiles of
//!   `m2 × n2` over `k2`-long slabs of the shared dimension. Inside a tile,
//!   `k_block × n_panel` panels of B are re-buffered into a contiguous,
//!   lane-interleaved layout ([`pack_b_panel`]) and each row of A is streamed
//!   against the panel, accumulating `n_panel` dot products in
//!   register-resident `lane_width`-wide accumulators.
//!
//! `lane_width == 1` selects the scalar path; widths 2, 4 and 8 use the same
//! code with wider accumulator arrays, which the compiler lowers to vector
//! instructions where the target has them.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matcore::Mat32;

/// Largest supported number of simultaneous dot products per panel.
pub const MAX_PANEL: usize = 8;

/// Whether an operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    N,
    T,
}

impl Op {
    #[inline]
    fn dims(self, m: &Mat32) -> (usize, usize) {
        match self {
            Op::N => (m.rows(), m.cols()),
            Op::T => (m.cols(), m.rows()),
        }
    }

    #[inline]
    fn at(self, m: &Mat32, i: usize, j: usize) -> f32 {
        match self {
            Op::N => m.get(i, j),
            Op::T => m.get(j, i),
        }
    }
}

/// Blocking parameters of the blocked kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Length of the shared dimension held in L1 per panel.
    pub k_block: usize,
    /// Dot products computed together in the inner loop.
    pub n_panel: usize,
    /// Width of each accumulator. 1 is the scalar path.
    pub lane_width: usize,
    pub m2: usize,
    pub n2: usize,
    pub k2: usize,
    /// L1 budget the packed panel plus one A row must fit in.
    pub l1_bytes: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            k_block: 336,
            n_panel: 5,
            lane_width: 4,
            m2: 64,
            n2: 240,
            k2: 672,
            l1_bytes: 32 * 1024,
        }
    }
}

impl BlockConfig {
    pub fn scalar() -> Self {
        BlockConfig {
            lane_width: 1,
            ..Self::default()
        }
    }

    /// Floats resident in L1 for one inner loop: the panel and one A row.
    pub fn l1_floats(&self) -> usize {
        self.k_block * (self.n_panel + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.lane_width, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "lane_width {} not in {{1, 2, 4, 8}}",
                self.lane_width
            )));
        }
        if self.n_panel == 0 || self.n_panel > MAX_PANEL {
            return Err(Error::Config(format!(
                "n_panel {} not in 1..={MAX_PANEL}",
                self.n_panel
            )));
        }
        if self.k_block < self.lane_width {
            return Err(Error::Config(format!(
                "k_block {} smaller than lane_width {}",
                self.k_block, self.lane_width
            )));
        }
        if self.m2 == 0 || self.n2 == 0 || self.k2 == 0 {
            return Err(Error::Config("L2 block extents must be >= 1".into()));
        }
        let bytes = self.l1_floats() * 4;
        if bytes > self.l1_bytes {
            return Err(Error::Config(format!(
                "k_block*(n_panel+1)*4 = {bytes} bytes exceeds L1 budget {}",
                self.l1_bytes
            )));
        }
        Ok(())
    }
}

/// Which GEMM implementation to run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Naive,
    Blocked(BlockConfig),
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Blocked(BlockConfig::default())
    }
}

impl Kernel {
    /// In-place `c := alpha * op(a) * op(b) + beta * c`.
    #[allow(clippy::too_many_arguments)]
    pub fn sgemm(
        &self,
        ta: Op,
        tb: Op,
        alpha: f32,
        a: &Mat32,
        b: &Mat32,
        beta: f32,
        c: &mut Mat32,
    ) -> Result<()> {
        match self {
            Kernel::Naive => sgemm_naive(ta, tb, alpha, a, b, beta, c),
            Kernel::Blocked(cfg) => sgemm_blocked(ta, tb, alpha, a, b, beta, c, cfg),
        }
    }

    /// `op(a) * op(b)` into a fresh compact matrix.
    pub fn matmul(&self, ta: Op, a: &Mat32, tb: Op, b: &Mat32) -> Result<Mat32> {
        let (m, _) = ta.dims(a);
        let (_, n) = tb.dims(b);
        let mut c = Mat32::zeros(m, n);
        self.sgemm(ta, tb, 1.0, a, b, 0.0, &mut c)?;
        Ok(c)
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            Kernel::Naive => KernelKind::Naive,
            Kernel::Blocked(_) => KernelKind::Blocked,
        }
    }
}

fn check_shapes(ta: Op, tb: Op, a: &Mat32, b: &Mat32, c: &Mat32) -> Result<(usize, usize, usize)> {
    let (m, k) = ta.dims(a);
    let (kb, n) = tb.dims(b);
    if k != kb {
        return Err(shape_err(
            "sgemm",
            format!("inner dimensions differ: op(A) is {m}x{k}, op(B) is {kb}x{n}"),
        ));
    }
    if c.shape() != (m, n) {
        return Err(shape_err(
            "sgemm",
            format!("C is {}x{}, expected {m}x{n}", c.rows(), c.cols()),
        ));
    }
    Ok((m, n, k))
}

/// `c := beta * c`, where `beta == 0` overwrites (NaN in `c` is discarded).
fn scale_c(c: &mut Mat32, beta: f32) {
    if beta == 1.0 {
        return;
    }
    for i in 0..c.rows() {
        let row = c.row_mut(i);
        if beta == 0.0 {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v *= beta);
        }
    }
}

/// Reference three-loop SGEMM, in place.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_naive(
    ta: Op,
    tb: Op,
    alpha: f32,
    a: &Mat32,
    b: &Mat32,
    beta: f32,
    c: &mut Mat32,
) -> Result<()> {
    let (m, n, k) = check_shapes(ta, tb, a, b, c)?;
    if alpha == 0.0 {
        scale_c(c, beta);
        return Ok(());
    }
    if ta == Op::N && tb == Op::N {
        // plain loops over the raw buffers; this is what the benchmark times
        let (sa, sb, sc) = (a.stride(), b.stride(), c.stride());
        let (ar, br) = (a.raw(), b.raw());
        let cr = c.raw_mut();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += ar[i * sa + p] * br[p * sb + j];
                }
                let cv = &mut cr[i * sc + j];
                *cv = if beta == 0.0 { alpha * s } else { alpha * s + beta * *cv };
            }
        }
        return Ok(());
    }
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f32;
            for p in 0..k {
                s += ta.at(a, i, p) * tb.at(b, p, j);
            }
            let old = c.get(i, j);
            c.set(i, j, if beta == 0.0 { alpha * s } else { alpha * s + beta * old });
        }
    }
    Ok(())
}

/// `alpha * a * b + beta * c` with the reference kernel.
pub fn gemm_naive(a: &Mat32, b: &Mat32, c: &Mat32, alpha: f32, beta: f32) -> Result<Mat32> {
    let mut out = c.clone();
    sgemm_naive(Op::N, Op::N, alpha, a, b, beta, &mut out)?;
    Ok(out)
}

/// `alpha * a * b + beta * c` with the blocked kernel.
pub fn gemm_blocked(
    a: &Mat32,
    b: &Mat32,
    c: &Mat32,
    alpha: f32,
    beta: f32,
    cfg: &BlockConfig,
) -> Result<Mat32> {
    let mut out = c.clone();
    sgemm_blocked(Op::N, Op::N, alpha, a, b, beta, &mut out, cfg)?;
    Ok(out)
}

/// A `k × n_panel` slice of B re-ordered for the inner loop.
///
/// Layout: the shared dimension is cut into runs of `lane_width`. For run `q`,
/// column `c` and lane `l`, element `B'[q*lane_width + l][c]` lives at
/// `(q*n_panel + c)*lane_width + l`. Rows past `k` and columns past `cols`
/// are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedPanel {
    pub k: usize,
    pub cols: usize,
    pub n_panel: usize,
    pub lane_width: usize,
    pub data: Vec<f32>,
}

impl PackedPanel {
    #[inline]
    pub fn index_of(&self, k: usize, c: usize) -> usize {
        let (q, l) = (k / self.lane_width, k % self.lane_width);
        (q * self.n_panel + c) * self.lane_width + l
    }

    /// Recover the `k × cols` panel.
    pub fn unpack(&self) -> Mat32 {
        Mat32::from_fn(self.k, self.cols, |k, c| self.data[self.index_of(k, c)])
    }
}

#[inline]
fn round_up(x: usize, to: usize) -> usize {
    x.div_ceil(to) * to
}

/// Pack `op(B)[k0..k0+kl, j0..j0+nc]` into `dst` (length `round_up(kl, lane) * np`).
#[allow(clippy::too_many_arguments)]
fn pack_into(
    dst: &mut [f32],
    b: &Mat32,
    tb: Op,
    k0: usize,
    kl: usize,
    j0: usize,
    nc: usize,
    lane: usize,
    np: usize,
) {
    let runs = kl.div_ceil(lane);
    debug_assert_eq!(dst.len(), runs * lane * np);
    for q in 0..runs {
        for c in 0..np {
            let base = (q * np + c) * lane;
            for l in 0..lane {
                let kk = q * lane + l;
                dst[base + l] = if kk < kl && c < nc {
                    tb.at(b, k0 + kk, j0 + c)
                } else {
                    0.0
                };
            }
        }
    }
}

/// Re-buffer the panel of `b` starting at column `col0`, covering all rows.
///
/// Fewer than `n_panel` remaining columns are zero padded.
pub fn pack_b_panel(b: &Mat32, col0: usize, cfg: &BlockConfig) -> Result<PackedPanel> {
    if col0 >= b.cols() {
        return Err(Error::Bounds(format!(
            "panel start column {col0} outside 0..{}",
            b.cols()
        )));
    }
    if cfg.lane_width == 0 || cfg.n_panel == 0 {
        return Err(Error::Config("lane_width and n_panel must be >= 1".into()));
    }
    let cols = cfg.n_panel.min(b.cols() - col0);
    let k = b.rows();
    let mut data = vec![0.0; round_up(k, cfg.lane_width) * cfg.n_panel];
    pack_into(&mut data, b, Op::N, 0, k, col0, cols, cfg.lane_width, cfg.n_panel);
    Ok(PackedPanel {
        k,
        cols,
        n_panel: cfg.n_panel,
        lane_width: cfg.lane_width,
        data,
    })
}

/// `NP` dot products of `a[..kl]` against a packed panel.
#[inline(always)]
fn dot_panel<const L: usize, const NP: usize>(a: &[f32], panel: &[f32], kl: usize) -> [f32; NP] {
    let full = kl / L;
    let (a_main, a_tail) = a[..kl].split_at(full * L);
    let (p_main, p_tail) = panel.split_at(full * L * NP);
    let mut acc = [[0.0f32; L]; NP];
    for (ach, pch) in a_main.chunks_exact(L).zip(p_main.chunks_exact(L * NP)) {
        let av: &[f32; L] = ach.try_into().unwrap();
        for (c, accc) in acc.iter_mut().enumerate() {
            let bv: &[f32; L] = pch[c * L..(c + 1) * L].try_into().unwrap();
            for l in 0..L {
                accc[l] += av[l] * bv[l];
            }
        }
    }
    if !a_tail.is_empty() {
        for (c, accc) in acc.iter_mut().enumerate() {
            for (l, &av) in a_tail.iter().enumerate() {
                accc[l] += av * p_tail[c * L + l];
            }
        }
    }
    let mut out = [0.0f32; NP];
    for (o, accc) in out.iter_mut().zip(&acc) {
        *o = accc.iter().sum();
    }
    out
}

struct Dims {
    m: usize,
    n: usize,
    k: usize,
}

#[allow(clippy::too_many_arguments)]
fn blocked_impl<const L: usize, const NP: usize>(
    ta: Op,
    tb: Op,
    alpha: f32,
    a: &Mat32,
    b: &Mat32,
    c: &mut Mat32,
    cfg: &BlockConfig,
    d: Dims,
) {
    let kb_max = cfg.k_block.min(cfg.k2);
    let n2 = round_up(cfg.n2, NP);
    let mut slab: Vec<f32> = Vec::new();
    let mut a_buf: Vec<f32> = Vec::new();
    // (k start, k length, padded length, slab offset) per L1 sub-block
    let mut subs: Vec<(usize, usize, usize, usize)> = Vec::new();

    for jj in (0..d.n).step_by(n2) {
        let nj = n2.min(d.n - jj);
        let panels = nj.div_ceil(NP);
        for kk in (0..d.k).step_by(cfg.k2) {
            let kl2 = cfg.k2.min(d.k - kk);

            // re-buffer the whole k2 × n2 slab of B as a sequence of panels
            subs.clear();
            let mut off = 0;
            for kb in (kk..kk + kl2).step_by(kb_max) {
                let kl = kb_max.min(kk + kl2 - kb);
                let kp = round_up(kl, L);
                subs.push((kb, kl, kp, off));
                off += kp * NP * panels;
            }
            slab.resize(off, 0.0);
            for &(kb, kl, kp, off) in &subs {
                for p in 0..panels {
                    let j0 = jj + p * NP;
                    let nc = NP.min(jj + nj - j0);
                    let dst = &mut slab[off + p * kp * NP..off + (p + 1) * kp * NP];
                    pack_into(dst, b, tb, kb, kl, j0, nc, L, NP);
                }
            }

            for ii in (0..d.m).step_by(cfg.m2) {
                let mi = cfg.m2.min(d.m - ii);
                for &(kb, kl, kp, off) in &subs {
                    if ta == Op::T {
                        // transposed A has no contiguous rows; copy the block
                        a_buf.resize(mi * kl, 0.0);
                        for r in 0..mi {
                            for q in 0..kl {
                                a_buf[r * kl + q] = a.get(kb + q, ii + r);
                            }
                        }
                    }
                    for p in 0..panels {
                        let j0 = jj + p * NP;
                        let nc = NP.min(jj + nj - j0);
                        let panel = &slab[off + p * kp * NP..off + (p + 1) * kp * NP];
                        for r in 0..mi {
                            let i = ii + r;
                            let arow = match ta {
                                Op::N => &a.row(i)[kb..kb + kl],
                                Op::T => &a_buf[r * kl..(r + 1) * kl],
                            };
                            let acc = dot_panel::<L, NP>(arow, panel, kl);
                            let crow = &mut c.row_mut(i)[j0..j0 + nc];
                            for (cv, av) in crow.iter_mut().zip(acc) {
                                *cv += alpha * av;
                            }
                        }
                    }
                }
            }
        }
    }
}

macro_rules! dispatch_panel {
    ($lane:literal, $np:expr, $($args:expr),*) => {
        match $np {
            1 => blocked_impl::<$lane, 1>($($args),*),
            2 => blocked_impl::<$lane, 2>($($args),*),
            3 => blocked_impl::<$lane, 3>($($args),*),
            4 => blocked_impl::<$lane, 4>($($args),*),
            5 => blocked_impl::<$lane, 5>($($args),*),
            6 => blocked_impl::<$lane, 6>($($args),*),
            7 => blocked_impl::<$lane, 7>($($args),*),
            8 => blocked_impl::<$lane, 8>($($args),*),
            _ => unreachable!("validated n_panel"),
        }
    };
}

/// Blocked SGEMM, in place.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_blocked(
    ta: Op,
    tb: Op,
    alpha: f32,
    a: &Mat32,
    b: &Mat32,
    beta: f32,
    c: &mut Mat32,
    cfg: &BlockConfig,
) -> Result<()> {
    cfg.validate()?;
    let (m, n, k) = check_shapes(ta, tb, a, b, c)?;
    scale_c(c, beta);
    if alpha == 0.0 || k == 0 || m == 0 || n == 0 {
        return Ok(());
    }
    let d = Dims { m, n, k };
    match cfg.lane_width {
        1 => dispatch_panel!(1, cfg.n_panel, ta, tb, alpha, a, b, c, cfg, d),
        2 => dispatch_panel!(2, cfg.n_panel, ta, tb, alpha, a, b, c, cfg, d),
        4 => dispatch_panel!(4, cfg.n_panel, ta, tb, alpha, a, b, c, cfg, d),
        8 => dispatch_panel!(8, cfg.n_panel, ta, tb, alpha, a, b, c, cfg, d),
        _ => unreachable!("validated lane_width"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Benchmarking

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Naive,
    Blocked,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Naive => "naive",
            KernelKind::Blocked => "blocked",
        })
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(KernelKind::Naive),
            "blocked" => Ok(KernelKind::Blocked),
            other => Err(Error::Invalid(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kernel: KernelKind,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub stride: usize,
    pub wall_seconds: f64,
    pub mflops: f64,
    /// The requested stride was smaller than the matrix, so stride = size.
    pub stride_overridden: bool,
}

impl BenchRecord {
    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub stride: usize,
    pub reps: usize,
    /// The flush buffer is four times this size.
    pub l2_bytes: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            stride: 700,
            reps: 3,
            l2_bytes: 1 << 20,
            seed: 0x5eed,
        }
    }
}

/// Evicts data caches by writing and reading a buffer larger than L2.
pub struct CacheFlusher {
    buf: Vec<u8>,
    pass: u8,
}

impl CacheFlusher {
    pub fn new(l2_bytes: usize) -> Self {
        CacheFlusher {
            buf: vec![0; 4 * l2_bytes.max(1)],
            pass: 0,
        }
    }

    pub fn flush(&mut self) -> u64 {
        self.pass = self.pass.wrapping_add(1);
        let p = self.pass;
        for b in self.buf.iter_mut() {
            *b = b.wrapping_add(p);
        }
        let sum = self.buf.iter().step_by(64).map(|&b| b as u64).sum();
        black_box(sum)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random_strided(rng: &mut ChaCha8Rng, size: usize, stride: usize) -> Mat32 {
    let mut m = Mat32::zeros_with_stride(size, size, stride).expect("stride >= size");
    for i in 0..size {
        for v in m.row_mut(i) {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    m
}

fn time_square(
    kernel: &Kernel,
    size: usize,
    opts: &BenchOptions,
    flusher: &mut CacheFlusher,
) -> Result<(usize, bool, f64)> {
    let overridden = size > opts.stride;
    let stride = opts.stride.max(size);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ size as u64);
    let a = random_strided(&mut rng, size, stride);
    let b = random_strided(&mut rng, size, stride);
    let mut c = random_strided(&mut rng, size, stride);
    let mut times = Vec::with_capacity(opts.reps.max(3));
    for _ in 0..opts.reps.max(3) {
        flusher.flush();
        let t0 = Instant::now();
        kernel.sgemm(Op::N, Op::N, 1.0, &a, &b, 0.0, &mut c)?;
        let dt = t0.elapsed().as_secs_f64();
        black_box(c.get(0, 0));
        times.push(dt.max(1e-9));
    }
    Ok((stride, overridden, median(times)))
}

/// Time `M = N = K = size` multiplies with the fixed-stride, cache-flushed,
/// median-of-repetitions protocol.
pub fn bench_gemm(
    sizes: &[usize],
    kind: KernelKind,
    cfg: &BlockConfig,
    opts: &BenchOptions,
) -> Result<Vec<BenchRecord>> {
    let kernel = match kind {
        KernelKind::Naive => Kernel::Naive,
        KernelKind::Blocked => Kernel::Blocked(*cfg),
    };
    let mut flusher = CacheFlusher::new(opts.l2_bytes);
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 {
            return Err(Error::Invalid("benchmark size must be >= 1".into()));
        }
        let (stride, overridden, secs) = time_square(&kernel, size, opts, &mut flusher)?;
        let flops = 2.0 * (size as f64).powi(3);
        out.push(BenchRecord {
            kernel: kind,
            m: size,
            n: size,
            k: size,
            stride,
            wall_seconds: secs,
            mflops: flops / secs / 1e6,
            stride_overridden: overridden,
        });
    }
    Ok(out)
}

pub const BENCH_CSV_HEADER: &str = "kernel,m,n,k,stride,seconds,mflops";

pub fn write_bench_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{:.9},{:.3}",
            r.kernel, r.m, r.n, r.k, r.stride, r.wall_seconds, r.mflops
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Block size search

#[derive(Clone, Debug)]
pub struct TuneOptions {
    pub size: usize,
    pub k_blocks: Vec<usize>,
    pub n_panels: Vec<usize>,
    pub lane_width: usize,
    pub bench: BenchOptions,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            size: 512,
            k_blocks: (64..=512).step_by(32).collect(),
            n_panels: (1..=MAX_PANEL).collect(),
            lane_width: 4,
            bench: BenchOptions {
                stride: 512,
                reps: 3,
                ..BenchOptions::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct TuneReport {
    pub best: BlockConfig,
    pub best_mflops: f64,
    /// The `k_block = 16, n_panel = 1` starting point, always measured.
    pub baseline: BlockConfig,
    pub baseline_mflops: f64,
    pub trials: Vec<(BlockConfig, f64)>,
}

/// Grid search over `k_block × n_panel` under the L1 budget, keeping the
/// fastest measured configuration.
pub fn tune_blocks_with(l1_bytes: usize, l2_bytes: usize, opts: &TuneOptions) -> Result<TuneReport> {
    if l1_bytes == 0 || l2_bytes == 0 {
        return Err(Error::Invalid("cache sizes must be > 0".into()));
    }
    let template = BlockConfig {
        lane_width: opts.lane_width,
        l1_bytes,
        ..BlockConfig::default()
    };
    let baseline = BlockConfig {
        k_block: 16.max(opts.lane_width),
        n_panel: 1,
        ..template
    };
    baseline.validate()?;

    let mut candidates = vec![baseline];
    for &kb in &opts.k_blocks {
        for &np in &opts.n_panels {
            let cfg = BlockConfig {
                k_block: kb,
                n_panel: np,
                // keep the L2 slab a whole number of L1 blocks
                k2: kb * (l2_bytes / (4 * kb * template.n2.max(1))).max(1),
                ..template
            };
            if cfg.validate().is_ok() && !candidates.contains(&cfg) {
                candidates.push(cfg);
            }
        }
    }

    let bench = BenchOptions {
        l2_bytes,
        ..opts.bench.clone()
    };
    let mut trials = Vec::with_capacity(candidates.len());
    for cfg in candidates {
        let rec = bench_gemm(&[opts.size], KernelKind::Blocked, &cfg, &bench)?;
        trials.push((cfg, rec[0].mflops));
    }
    let baseline_mflops = trials[0].1;
    let (best, best_mflops) = trials
        .iter()
        .copied()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("baseline is always a candidate");
    Ok(TuneReport {
        best,
        best_mflops,
        baseline,
        baseline_mflops,
        trials,
    })
}

pub fn tune_blocks(l1_bytes: usize, l2_bytes: usize) -> Result<BlockConfig> {
    Ok(tune_blocks_with(l1_bytes, l2_bytes, &TuneOptions::default())?.best)
}
