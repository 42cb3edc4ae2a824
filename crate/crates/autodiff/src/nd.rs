//! Dense row-major arrays and the value-level kernels shared by the tape and
//! the exposed numeric operations.

use crate::{Error, Result};

/// Element dtype tag, used by checkpoint serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Float element of an [`NdArray`]. Implemented for `f32` and `f64` only; the
/// GEMM hook dispatches to the matching `matrixmultiply` kernel.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Self;
    fn byte_width() -> usize {
        match Self::DTYPE {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

/// Dense row-major array. The buffer length always equals the product of the
/// shape extents.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> NdArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        NdArray {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "buffer length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Interprets the array as a matrix: (product of leading dims, last dim).
    /// A 1-D array of length n is seen as shape (1, n).
    pub fn as_2d(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let last = *self.shape.last().unwrap();
                (self.len() / last.max(1), last)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.as_2d().0
    }

    pub fn cols(&self) -> usize {
        self.as_2d().1
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.as_2d();
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let (_, cols) = self.as_2d();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.as_2d();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let (_, cols) = self.as_2d();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape buffer of length {} to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        NdArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale_inplace(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for &x in &self.data {
            let a = x.abs();
            if a > m {
                m = a;
            }
        }
        m
    }

    pub fn l2_norm(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Lossless cast between element types through f64.
    pub fn cast<U: Scalar>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    // ---- GEMM-backed products (2-D) ----

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, b: &Self) -> Self {
        let (m, k) = self.as_2d();
        let (kb, n) = b.as_2d();
        assert_eq!(k, kb, "matmul inner dim mismatch: {:?} x {:?}", self.shape, b.shape);
        let mut out = NdArray::zeros(&[m, n]);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// [m,k] x [n,k]^T -> [m,n]
    pub fn matmul_nt(&self, b: &Self) -> Self {
        let (m, k) = self.as_2d();
        let (n, kb) = b.as_2d();
        assert_eq!(k, kb, "matmul_nt inner dim mismatch: {:?} x {:?}", self.shape, b.shape);
        let mut out = NdArray::zeros(&[m, n]);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                1,
                kb as isize,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// [n,m]^T x [n,k] -> [m,k]
    pub fn matmul_tn(&self, b: &Self) -> Self {
        let (na, m) = self.as_2d();
        let (nb, k) = b.as_2d();
        assert_eq!(na, nb, "matmul_tn outer dim mismatch: {:?} x {:?}", self.shape, b.shape);
        let mut out = NdArray::zeros(&[m, k]);
        unsafe {
            T::gemm(
                m,
                na,
                k,
                T::one(),
                self.data.as_ptr(),
                1,
                m as isize,
                b.data.as_ptr(),
                k as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        out
    }
}

// ---- shared row-wise kernels ----

/// Numerically stabilized softmax over the trailing axis, in place.
pub fn softmax_rows_inplace<T: Scalar>(x: &mut NdArray<T>) {
    let (rows, cols) = x.as_2d();
    for r in 0..rows {
        let row = &mut x.data_mut()[r * cols..(r + 1) * cols];
        let mut m = T::neg_infinity();
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise L2 normalization: y_r = x_r / max(||x_r||, eps). Returns the
/// normalized array and the pre-normalization row norms.
pub fn l2_normalize_rows<T: Scalar>(x: &NdArray<T>, eps: T) -> (NdArray<T>, Vec<T>) {
    let (rows, cols) = x.as_2d();
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for &v in row.iter() {
            acc += v * v;
        }
        let n = acc.sqrt();
        let denom = if n > eps { n } else { eps };
        for v in row.iter_mut() {
            *v /= denom;
        }
        norms.push(n);
    }
    (out, norms)
}

/// tanh-form GELU used across the transformer blocks.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::of(0.044715);
    let u = c * (x + a * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * sech2 * du
}
