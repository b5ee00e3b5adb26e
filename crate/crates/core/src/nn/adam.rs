use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};
use num_traits::Float;

use crate::error::{Error, Result};

/// Adam over a fixed, named parameter list.
///
/// Moment buffers persist across learning-rate changes; a parameter that did
/// not receive a gradient in a step is left untouched.
pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

fn update<T: WithDType + Float>(
    p: &Var,
    g: &Tensor,
    m: &Tensor,
    v: &Tensor,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    step: u64,
) -> Result<(Tensor, Tensor)> {
    let shape = p.shape().clone();
    let dev = p.device().clone();
    let mut pv = p.as_tensor().flatten_all()?.to_vec1::<T>()?;
    let gv = g.flatten_all()?.to_vec1::<T>()?;
    let mut mv = m.flatten_all()?.to_vec1::<T>()?;
    let mut vv = v.flatten_all()?.to_vec1::<T>()?;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let t = |x: f64| T::from_f64(x);
    let (b1t, b2t, one) = (t(b1), t(b2), T::one());
    let step_size = t(lr / c1);
    let c2_sqrt = t(c2.sqrt());
    let eps = t(eps);
    for i in 0..pv.len() {
        let gi = gv[i];
        mv[i] = b1t * mv[i] + (one - b1t) * gi;
        vv[i] = b2t * vv[i] + (one - b2t) * gi * gi;
        let denom = vv[i].sqrt() / c2_sqrt + eps;
        pv[i] = pv[i] - step_size * mv[i] / denom;
    }
    p.set(&Tensor::from_vec(pv, shape.clone(), &dev)?)?;
    Ok((
        Tensor::from_vec(mv, shape.clone(), &dev)?,
        Tensor::from_vec(vv, shape, &dev)?,
    ))
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            steps: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        })
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let step = self.steps;
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let (m, v) = match p.dtype() {
                DType::F32 => update::<f32>(p, g, &self.m[i], &self.v[i], self.lr, self.beta1, self.beta2, self.eps, step)?,
                DType::F64 => update::<f64>(p, g, &self.m[i], &self.v[i], self.lr, self.beta1, self.beta2, self.eps, step)?,
                other => return Err(Error::Config(format!("adam: unsupported dtype {other:?}"))),
            };
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` for every parameter.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    pub fn restore(&mut self, steps: u64, mut lookup: impl FnMut(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let (m, v) = lookup(name).ok_or_else(|| Error::malformed("optimizer state", format!("missing moments for {name}")))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Shape(format!("optimizer moments for {name}")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.steps = steps;
        Ok(())
    }
}
