use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel batch statistics (biased variance).
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) struct BatchNormNode<T: Element> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
    channels: usize,
    inner: usize,
}

impl<T: Element> BatchNormNode<T> {
    pub(crate) fn backward(&self, g: &Tensor<T>, gamma: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let (c, inner) = (self.channels, self.inner);
        let n = g.len() / (c * inner);
        let m = T::from_usize(n * inner).unwrap();
        let gd = g.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                let (gs, hs) = (&gd[base..base + inner], &self.xhat[base..base + inner]);
                dgamma[ch] += gs.iter().zip(hs).map(|(&g, &h)| g * h).sum::<T>();
                dbeta[ch] += gs.iter().copied().sum::<T>();
            }
        }
        let mut dx = vec![T::zero(); gd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                let k = gamma.data()[ch] * self.inv_std[ch];
                let (gs, hs) = (&gd[base..base + inner], &self.xhat[base..base + inner]);
                let out = &mut dx[base..base + inner];
                if self.train {
                    // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                    let (mg, mgh) = (dbeta[ch] / m, dgamma[ch] / m);
                    for ((o, &g), &h) in out.iter_mut().zip(gs).zip(hs) {
                        *o = k * (g - mg - h * mgh);
                    }
                } else {
                    for (o, &g) in out.iter_mut().zip(gs) {
                        *o = k * g;
                    }
                }
            }
        }
        vec![
            (self.x, Tensor::from_parts(g.shape().to_vec(), dx)),
            (self.gamma, Tensor::from_parts(vec![c], dgamma)),
            (self.beta, Tensor::from_parts(vec![c], dbeta)),
        ]
    }
}

impl<T: Element> Tape<T> {
    /// Batch normalization over axis 1 of `x[N, C, ...]` using batch
    /// statistics. Returns the statistics so callers can track running values.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (c, inner) = self.bn_check(x, gamma, beta)?;
        let n = self.shape(x)[0];
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let xd = self.value(x).data();
        let m = T::from_usize(n * inner).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                mean[ch] += xd[base..base + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                var[ch] += xd[base..base + inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, &mean, &inv_std, c, inner, true);
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (c, inner) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch("running statistics do not match channels".into()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, &inv_std, c, inner, false))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::ShapeMismatch(format!("batch norm input {s:?} needs a channel axis")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batch norm affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((c, s[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        c: usize,
        inner: usize,
        train: bool,
    ) -> Var {
        let xt = self.value(x);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xt.len()];
        let mut y = vec![T::zero(); xt.len()];
        for (i, ((src, hd), yd)) in
            xt.data().chunks(inner).zip(xhat.chunks_mut(inner)).zip(y.chunks_mut(inner)).enumerate()
        {
            let ch = i % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for ((&v, h), o) in src.iter().zip(hd.iter_mut()).zip(yd.iter_mut()) {
                *h = (v - m) * s;
                *o = g * *h + b;
            }
        }
        let shape = xt.shape().to_vec();
        let node = BatchNormNode { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), train, channels: c, inner };
        self.push(Tensor::from_parts(shape, y), Op::BatchNorm(node))
    }
}
