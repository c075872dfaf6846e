//! Dense row-major tensors and the numeric kernels the recurrent unit needs.
//!
//! Everything here is eager and allocation-per-op. The kernels are plain
//! functions over [`Tensor`] so both the taped graph and the tape-free
//! inference path call exactly the same code.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a tensor can hold. Implemented for `f32` (training) and
/// `f64` (gradient checking and reference tests).
pub trait Real: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const NAME: &'static str;

    /// `c = a * b + beta * c` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`
    /// with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the strided extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the strided extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        same_shape(self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

pub(crate) fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "operand shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn hard_tanh<T: Real>(x: T) -> T {
    x.min(T::one()).max(-T::one())
}

pub fn hard_sigmoid<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    ((x + T::one()) * half).min(T::one()).max(T::zero())
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Hinge penalty on a pre-activation leaving the linear range.
pub fn saturation_cost<T: Real>(x: T, s_limit: T) -> T {
    (x.abs() - s_limit).max(T::zero())
}

/// Direction a map's contents are copied from under a diagonal gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shift {
    /// Filter `[0,1,0]`.
    Stay,
    /// Filter `[1,0,0]`: out\[i\] = in\[i-1\].
    Right,
    /// Filter `[0,0,1]`: out\[i\] = in\[i+1\].
    Left,
}

impl Shift {
    pub fn offset(self) -> isize {
        match self {
            Shift::Stay => 0,
            Shift::Right => -1,
            Shift::Left => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Shift::Stay => "stay",
            Shift::Right => "right",
            Shift::Left => "left",
        }
    }
}

fn seq_dims<T: Real>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::Shape(format!(
            "expected [.., n, m] tensor, got {:?}",
            input.shape()
        )));
    }
    let m = input.cols();
    let n = input.shape()[input.rank() - 2];
    Ok((input.len() / (n * m), n, m))
}

fn check_conv_shapes<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, n, m_in) = seq_dims(input)?;
    let ks = kernel.shape();
    if ks.len() != 3 || ks[1] != m_in || bias.shape() != [ks[2]] || ks[0].is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "conv1d: input {:?}, kernel {:?}, bias {:?}",
            input.shape(),
            ks,
            bias.shape()
        )));
    }
    Ok((batch, n, m_in, ks[2], ks[0]))
}

/// Zero-padded "same" 1-D convolution over the sequence axis.
///
/// `input: [.., n, m_in]`, `kernel: [w, m_in, m_out]` with odd `w`,
/// `bias: [m_out]`. Leading axes are independent sequences; padding never
/// leaks between them.
pub fn conv1d_same<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, n, m_in, m_out, width) = check_conv_shapes(input, kernel, bias)?;
    let half = (width / 2) as isize;
    let mut out_shape = input.shape().to_vec();
    *out_shape.last_mut().unwrap() = m_out;
    let mut out = vec![T::zero(); batch * n * m_out];
    for row in out.chunks_mut(m_out) {
        row.copy_from_slice(bias.data());
    }
    let x = input.data();
    let k = kernel.data();
    for tap in 0..width {
        let offset = tap as isize - half;
        // out[b, i] += x[b, i + offset] . K[tap] for rows where i + offset is inside
        let lo = (-offset).max(0) as usize;
        let hi = (n as isize - offset.max(0)).max(0) as usize;
        if lo >= hi {
            continue;
        }
        let rows = hi - lo;
        let kt = &k[tap * m_in * m_out..(tap + 1) * m_in * m_out];
        for b in 0..batch {
            let src = (b * n + (lo as isize + offset) as usize) * m_in;
            let dst = (b * n + lo) * m_out;
            T::gemm(
                rows,
                m_in,
                m_out,
                &x[src..src + rows * m_in],
                m_in as isize,
                1,
                kt,
                m_out as isize,
                1,
                T::one(),
                &mut out[dst..dst + rows * m_out],
                m_out as isize,
                1,
            );
        }
    }
    Tensor::new(&out_shape, out)
}

/// Gradients of [`conv1d_same`] with respect to input, kernel and bias.
pub fn conv1d_same_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, n, m_in, m_out, width) = check_conv_shapes(input, kernel, bias)?;
    let half = (width / 2) as isize;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); m_out];
    for row in go.chunks(m_out) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    for tap in 0..width {
        let offset = tap as isize - half;
        let lo = (-offset).max(0) as usize;
        let hi = (n as isize - offset.max(0)).max(0) as usize;
        if lo >= hi {
            continue;
        }
        let rows = hi - lo;
        let kt = &k[tap * m_in * m_out..(tap + 1) * m_in * m_out];
        let gkt = &mut gk[tap * m_in * m_out..(tap + 1) * m_in * m_out];
        for b in 0..batch {
            let src = (b * n + (lo as isize + offset) as usize) * m_in;
            let dst = (b * n + lo) * m_out;
            let go_blk = &go[dst..dst + rows * m_out];
            // gx[src rows] += go_blk . K^T
            T::gemm(
                rows,
                m_out,
                m_in,
                go_blk,
                m_out as isize,
                1,
                kt,
                1,
                m_out as isize,
                T::one(),
                &mut gx[src..src + rows * m_in],
                m_in as isize,
                1,
            );
            // gK[tap] += x_blk^T . go_blk
            T::gemm(
                m_in,
                rows,
                m_out,
                &x[src..src + rows * m_in],
                1,
                m_in as isize,
                go_blk,
                m_out as isize,
                1,
                T::one(),
                gkt,
                m_out as isize,
                1,
            );
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(kernel.shape(), gk)?,
        Tensor::new(bias.shape(), gb)?,
    ))
}

/// Per-map shift along the sequence axis, zero-filled at the boundary.
pub fn depthwise_shift<T: Real>(input: &Tensor<T>, directions: &[Shift]) -> Result<Tensor<T>> {
    shift_impl(input, directions, 1)
}

/// Adjoint of [`depthwise_shift`]: shifts each map the opposite way.
pub fn depthwise_shift_backward<T: Real>(
    grad_out: &Tensor<T>,
    directions: &[Shift],
) -> Result<Tensor<T>> {
    shift_impl(grad_out, directions, -1)
}

fn shift_impl<T: Real>(input: &Tensor<T>, directions: &[Shift], sign: isize) -> Result<Tensor<T>> {
    let (batch, n, m) = seq_dims(input)?;
    if directions.len() != m {
        return Err(Error::Shape(format!(
            "shift: {} directions for {} maps",
            directions.len(),
            m
        )));
    }
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for i in 0..n {
            let row = (b * n + i) * m;
            for (j, dir) in directions.iter().enumerate() {
                let src = i as isize + sign * dir.offset();
                if src >= 0 && (src as usize) < n {
                    out[row + j] = x[(b * n + src as usize) * m + j];
                }
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Row-wise affine map `out[.., o] = bias[o] + sum_j x[.., j] * w[j, o]`.
pub fn affine<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let k = input.cols();
    let ws = weight.shape();
    if ws.len() != 2 || ws[0] != k || bias.shape() != [ws[1]] {
        return Err(Error::Shape(format!(
            "affine: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            ws,
            bias.shape()
        )));
    }
    let rows = input.rows();
    let n_out = ws[1];
    let mut out = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        rows,
        k,
        n_out,
        input.data(),
        k as isize,
        1,
        weight.data(),
        n_out as isize,
        1,
        T::one(),
        &mut out,
        n_out as isize,
        1,
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = n_out;
    Tensor::new(&shape, out)
}

pub fn affine_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let k = input.cols();
    let n_out = weight.shape()[1];
    let rows = input.rows();
    let mut gx = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); n_out];
    for row in grad_out.data().chunks(n_out) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    T::gemm(
        rows,
        n_out,
        k,
        grad_out.data(),
        n_out as isize,
        1,
        weight.data(),
        1,
        n_out as isize,
        T::zero(),
        &mut gx,
        k as isize,
        1,
    );
    T::gemm(
        k,
        rows,
        n_out,
        input.data(),
        1,
        k as isize,
        grad_out.data(),
        n_out as isize,
        1,
        T::zero(),
        &mut gw,
        n_out as isize,
        1,
    );
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[n_out], gb)?,
    ))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over rows of `logits: [.., v]`.
///
/// Returns the mean loss, the per-row correctness mask (argmax equals the
/// target), and the softmax probabilities for the backward pass.
pub fn softmax_xent<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Vec<bool>, Tensor<T>)> {
    let v = logits.cols();
    let rows = logits.rows();
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "softmax_xent: {} targets for {} rows",
            targets.len(),
            rows
        )));
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0f64;
    let mut correct = Vec::with_capacity(rows);
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::Data(format!("target {t} outside vocabulary of {v}")));
        }
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = row.iter().fold(T::zero(), |a, &b| a + (b - max).exp());
        let log_z = max + sum.ln();
        total += (log_z - row[t]).as_f64();
        probs.extend(row.iter().map(|&x| (x - log_z).exp()));
        correct.push(argmax(row) == t);
    }
    Ok((
        T::from_f64(total / rows as f64),
        correct,
        Tensor::new(logits.shape(), probs)?,
    ))
}

/// Gather rows of `table: [v, m]` by token index into `[tokens.len(), m]`.
pub fn embed_rows<T: Real>(table: &Tensor<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let m = table.cols();
    let v = table.rows();
    let mut out = Vec::with_capacity(tokens.len() * m);
    for &t in tokens {
        if t >= v {
            return Err(Error::Data(format!("token {t} outside vocabulary of {v}")));
        }
        out.extend_from_slice(&table.data()[t * m..(t + 1) * m]);
    }
    Tensor::new(&[tokens.len(), m], out)
}

/// A named learned tensor together with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    /// Replace the gradient, checking it matches the value's shape.
    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        same_shape(&self.value, &grad)?;
        self.grad = grad;
        Ok(())
    }
}
