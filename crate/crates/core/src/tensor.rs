//! Dense row-major `f32` tensors and the handful of kernels the rest of the
//! crate is built from.
//!
//! Every kernel has a fixed summation order so repeated calls are bitwise
//! reproducible:
//!
//! * `matmul` / `matmul_nt`: each output element is accumulated over the inner
//!   index in ascending order, starting from `0.0`. The two functions therefore
//!   agree bitwise when `matmul_nt(a, b) == matmul(a, b^T)`.
//! * `conv2d`: kernel taps in row-major order over the shift set, then input
//!   channels ascending. Out-of-grid taps are skipped (zero padding).
//! * `dwconv2d`: kernel taps in row-major order.
//!
//! Non-finite values are treated as an error state: constructors reject them
//! and every kernel checks its output.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
        .finite("Tensor::new")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from a closure over the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(f).collect())
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(shape_err!("expected rank-3 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(shape_err!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &dim) in index.iter().zip(&self.shape) {
            assert!(i < dim, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * dim + i;
        }
        self.data[flat]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let mut out = vec![0.0; self.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = self.data[i * cols + j];
            }
        }
        Ok(Tensor::from_raw(vec![cols, rows], out))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn columns(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if start > end || end > cols {
            return Err(shape_err!("column range {start}..{end} out of 0..{cols}"));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(rows * width);
        for row in self.data.chunks_exact(cols) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(Tensor::from_raw(vec![rows, width], out))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if start > end || end > rows {
            return Err(shape_err!("row range {start}..{end} out of 0..{rows}"));
        }
        Ok(Tensor::from_raw(
            vec![end - start, cols],
            self.data[start * cols..end * cols].to_vec(),
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn hconcat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("hconcat"))?;
        let (rows, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(shape_err!("hconcat row mismatch: {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_raw(vec![rows, total], out))
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!("{op}: {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_raw(self.shape.clone(), data).finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        self.map("scale", |v| v * factor)
    }

    /// `alpha * self + beta * other`.
    pub fn axpby(&self, alpha: f32, other: &Tensor, beta: f32) -> Result<Tensor> {
        self.zip_with(other, "axpby", |a, b| alpha * a + beta * b)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect()).finite(op)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        Ok(self.argmax_abs_diff(other)?.map_or(0.0, |(_, d)| d))
    }

    /// Flat index and value of the largest elementwise absolute difference.
    pub fn argmax_abs_diff(&self, other: &Tensor) -> Result<Option<(usize, f32)>> {
        if self.shape != other.shape {
            return Err(shape_err!("diff: {:?} vs {:?}", self.shape, other.shape));
        }
        let mut best: Option<(usize, f32)> = None;
        for (i, (&a, &b)) in self.data.iter().zip(&other.data).enumerate() {
            let d = (a - b).abs();
            if best.map_or(true, |(_, m)| d > m) {
                best = Some((i, d));
            }
        }
        Ok(best)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(shape_err!("rank must be 1..={MAX_RANK}, got {shape:?}"));
    }
    Ok(())
}

/// The symmetric `k x k` shift set, offsets stored as `(row, col)` in
/// row-major order from `(-k/2, -k/2)` to `(k/2, k/2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftSet {
    k: usize,
    offsets: Vec<(isize, isize)>,
}

impl ShiftSet {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(config_err!("kernel size must be odd and >= 1, got {k}"));
        }
        let half = (k / 2) as isize;
        let offsets = (-half..=half)
            .flat_map(|dy| (-half..=half).map(move |dx| (dy, dx)))
            .collect();
        Ok(ShiftSet { k, offsets })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn half(&self) -> isize {
        (self.k / 2) as isize
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn contains(&self, dy: isize, dx: isize) -> bool {
        let h = self.half();
        dy.abs() <= h && dx.abs() <= h
    }

    /// Row-major position of an offset inside a `k x k` kernel.
    pub fn tap_index(&self, dy: isize, dx: isize) -> Option<usize> {
        let h = self.half();
        self.contains(dy, dx)
            .then(|| ((dy + h) as usize) * self.k + (dx + h) as usize)
    }
}

/// Position shifted by `(dy, dx)`, or `None` when it falls off an
/// `rows x cols` grid.
#[inline]
pub(crate) fn shifted(i: usize, j: usize, dy: isize, dx: isize, rows: usize, cols: usize) -> Option<(usize, usize)> {
    let y = i as isize + dy;
    let x = j as isize + dx;
    (y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols).then_some((y as usize, x as usize))
}

/// `C = A * B`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (q2, r) = b.dims2()?;
    if q != q2 {
        return Err(shape_err!("matmul inner dims: [{p}x{q}] * [{q2}x{r}]"));
    }
    let mut out = vec![0.0f32; p * r];
    if r == 0 {
        return Ok(Tensor::from_raw(vec![p, r], out));
    }
    let ad = a.data();
    let bd = b.data();
    let mut blocks = out.chunks_exact_mut(4 * r);
    let mut i0 = 0;
    for block in &mut blocks {
        let (c0, rest) = block.split_at_mut(r);
        let (c1, rest) = rest.split_at_mut(r);
        let (c2, c3) = rest.split_at_mut(r);
        for t in 0..q {
            let brow = &bd[t * r..(t + 1) * r];
            let a0 = ad[i0 * q + t];
            let a1 = ad[(i0 + 1) * q + t];
            let a2 = ad[(i0 + 2) * q + t];
            let a3 = ad[(i0 + 3) * q + t];
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i0 += 4;
    }
    for (offset, crow) in blocks.into_remainder().chunks_exact_mut(r).enumerate() {
        let i = i0 + offset;
        for t in 0..q {
            let av = ad[i * q + t];
            for (c, &bv) in crow.iter_mut().zip(&bd[t * r..(t + 1) * r]) {
                *c += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![p, r], out).finite("matmul")
}

/// `C = A * B^T`, with the same per-element summation order as [`matmul`].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (r, q2) = b.dims2()?;
    if q != q2 {
        return Err(shape_err!("matmul_nt inner dims: [{p}x{q}] * [{r}x{q2}]^T"));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(p * r);
    for i in 0..p {
        let arow = &ad[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &bd[j * q..(j + 1) * q];
            let mut acc = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Tensor::from_raw(vec![p, r], out).finite("matmul_nt")
}

/// Row-wise softmax with max subtraction. Exponentials and the normaliser are
/// computed in `f64` so every row sums to one within a few `f32` ulps.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (_, cols) = t.dims2()?;
    if !t.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = Vec::with_capacity(t.len());
    let mut scratch = vec![0.0f64; cols];
    for row in t.data.chunks_exact(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (e, &v) in scratch.iter_mut().zip(row) {
            *e = ((v - max) as f64).exp();
            total += *e;
        }
        out.extend(scratch.iter().map(|&e| (e / total) as f32));
    }
    Tensor::from_raw(t.shape.clone(), out).finite("softmax_rows")
}

/// Full 2-D convolution (cross-correlation form), stride 1, zero padding.
///
/// `x` is `rows x cols x c_in`, `w` is `k x k x c_in x c_out`; tap `(dy, dx)`
/// of the shift set is stored at kernel position `(dy + k/2, dx + k/2)`.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (rows, cols, c_in) = x.dims3()?;
    let (kh, kw, wc_in, c_out) = w.dims4()?;
    if kh != kw {
        return Err(shape_err!("conv2d kernel must be square, got {kh}x{kw}"));
    }
    let shifts = ShiftSet::new(kh)?;
    if wc_in != c_in {
        return Err(shape_err!("conv2d channels: input {c_in}, kernel {wc_in}"));
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f32; rows * cols * c_out];
    for i in 0..rows {
        for j in 0..cols {
            let acc = &mut out[(i * cols + j) * c_out..(i * cols + j + 1) * c_out];
            for (tap, &(dy, dx)) in shifts.offsets().iter().enumerate() {
                let Some((y, xx)) = shifted(i, j, dy, dx, rows, cols) else {
                    continue;
                };
                let xin = &xd[(y * cols + xx) * c_in..(y * cols + xx + 1) * c_in];
                let wtap = &wd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                for (ci, &xv) in xin.iter().enumerate() {
                    for (o, &wv) in acc.iter_mut().zip(&wtap[ci * c_out..(ci + 1) * c_out]) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![rows, cols, c_out], out).finite("conv2d")
}

/// Depthwise 2-D convolution, stride 1, zero padding: one `k x k` filter per
/// channel, `kernel` shaped `k x k x c`.
pub fn dwconv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (rows, cols, c) = x.dims3()?;
    let (kh, kw, kc) = kernel.dims3()?;
    if kh != kw {
        return Err(shape_err!("dwconv2d kernel must be square, got {kh}x{kw}"));
    }
    let shifts = ShiftSet::new(kh)?;
    if kc != c {
        return Err(shape_err!("dwconv2d channels: input {c}, kernel {kc}"));
    }
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; rows * cols * c];
    for i in 0..rows {
        for j in 0..cols {
            let acc = &mut out[(i * cols + j) * c..(i * cols + j + 1) * c];
            for (tap, &(dy, dx)) in shifts.offsets().iter().enumerate() {
                let Some((y, xx)) = shifted(i, j, dy, dx, rows, cols) else {
                    continue;
                };
                let xin = &xd[(y * cols + xx) * c..(y * cols + xx + 1) * c];
                let ktap = &kd[tap * c..(tap + 1) * c];
                for ((o, &xv), &kv) in acc.iter_mut().zip(xin).zip(ktap) {
                    *o += kv * xv;
                }
            }
        }
    }
    Tensor::from_raw(vec![rows, cols, c], out).finite("dwconv2d")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform on `[low, high)`.
    Uniform { low: f32, high: f32 },
    Gaussian { mean: f32, std: f32 },
}

/// Deterministic random tensor.
///
/// Generator: ChaCha8 seeded through `SeedableRng::seed_from_u64(seed)`.
/// Uniform values take the top 24 bits of each `u64` draw. Gaussian values use
/// the Box-Muller transform on two open-interval `f64` uniforms built from the
/// top 53 bits of consecutive draws, evaluated with the pure-Rust `libm`
/// functions, and emit both the cosine and the sine variate. The output is the
/// same on every platform.
pub fn seeded_fill(shape: &[usize], seed: u64, dist: Distribution) -> Result<Tensor> {
    check_shape(shape)?;
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(len);
    match dist {
        Distribution::Uniform { low, high } => {
            if !(low < high) {
                return Err(config_err!("uniform bounds must satisfy low < high"));
            }
            for _ in 0..len {
                let u = (rng.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32);
                data.push(low + (high - low) * u);
            }
        }
        Distribution::Gaussian { mean, std } => {
            if !(std >= 0.0) {
                return Err(config_err!("gaussian std must be >= 0"));
            }
            while data.len() < len {
                let (z0, z1) = box_muller(&mut rng);
                data.push(mean + std * z0 as f32);
                if data.len() < len {
                    data.push(mean + std * z1 as f32);
                }
            }
        }
    }
    Tensor::new(shape, data)
}

/// Uniform on the open interval `(0, 1)`.
pub(crate) fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1 = open_unit(rng);
    let u2 = open_unit(rng);
    let radius = libm::sqrt(-2.0 * libm::log(u1));
    let angle = 2.0 * std::f64::consts::PI * u2;
    (radius * libm::cos(angle), radius * libm::sin(angle))
}

/// Mixes a base seed with a stream index (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named tensor (FNV-1a over the name, then [`derive_seed`]).
pub fn named_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(seed, h)
}
