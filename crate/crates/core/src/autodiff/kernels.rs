// Raw numeric kernels shared by forward and backward rules.

use crate::error::Result;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Element, Tensor};

pub(crate) fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

pub(crate) fn broadcast_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(out, data))
}

pub(crate) fn mul_broadcast<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_map(a, b, |x, y| x * y)
}

pub(crate) fn div_broadcast<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_map(a, b, |x, y| x / y)
}

/// `acc += g` where `g` broadcasts into `acc`'s shape.
pub(crate) fn add_broadcast_into<T: Element>(acc: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
    let out = acc.shape().to_vec();
    let sg = broadcast_strides(g.shape(), &out);
    let gd = g.data();
    let ad = acc.data_mut();
    for_each_broadcast(&out, &sg, &sg, |o, i, _| ad[o] += gd[i]);
    Ok(())
}

/// a[m,k] · b[k,n]
pub(crate) fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut c, n as isize);
    Tensor::from_parts(vec![m, n], c)
}

/// g[m,n] · b[k,n]ᵀ
pub(crate) fn matmul_nt<T: Element>(g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, n, k) = (g.shape()[0], g.shape()[1], b.shape()[0]);
    let mut c = vec![T::zero(); m * k];
    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut c, k as isize);
    Tensor::from_parts(vec![m, k], c)
}

/// a[m,k]ᵀ · g[m,n]
pub(crate) fn matmul_tn<T: Element>(a: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], g.shape()[1]);
    let mut c = vec![T::zero(); k * n];
    T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut c, n as isize);
    Tensor::from_parts(vec![k, n], c)
}
