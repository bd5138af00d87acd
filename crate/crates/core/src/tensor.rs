//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous buffer. Gradients
//! and graph bookkeeping live on the [`Tape`](crate::autodiff::Tape), so
//! tensors can be moved between threads and stored in checkpoints freely.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Scalar type a tensor can hold. Implemented for `f32` (training) and
/// `f64` (gradient checking).
pub trait Element: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// `c <- alpha * a(m×k) · b(k×n) + beta * c`, all row-major with the
    /// given row strides. Transposition is expressed through the strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_rs: isize,
        a_cs: isize,
        b: &[Self],
        b_rs: isize,
        b_cs: isize,
        beta: Self,
        c: &mut [Self],
        c_rs: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_rs: isize,
                a_cs: isize,
                b: &[Self],
                b_rs: isize,
                b_cs: isize,
                beta: Self,
                c: &mut [Self],
                c_rs: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(c.len() >= (m - 1) * c_rs as usize + n);
                // SAFETY: callers pass slices covering every addressed element;
                // the debug assertion above checks the output extent.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_rs,
                        a_cs,
                        b.as_ptr(),
                        b_rs,
                        b_cs,
                        beta,
                        c.as_mut_ptr(),
                        c_rs,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a tensor whose invariants the caller has already established.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossless widening / narrowing between element types.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect())
    }

    pub fn strides(&self) -> Vec<usize> {
        contiguous_strides(&self.shape)
    }
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned, zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len()).map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] }).collect()
}

/// Visits every flat output index of `out` with the matching flat offsets
/// of up to two broadcast operands.
pub(crate) fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // odometer over the outer axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `shape` across broadcast axes.
pub(crate) fn reduce_to_shape<T: Element>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let s = broadcast_strides(shape, grad.shape());
    let mut acc = vec![T::zero(); shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(grad.shape(), &s, &s, |o, i, _| acc[i] += g[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}
