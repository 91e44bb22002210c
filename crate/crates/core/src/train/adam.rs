use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::train::checkpoint::{Checkpoint, CheckpointError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn save_into(&self, params: &ParamStore<T>, ck: &mut Checkpoint) {
        for ((name, m), v) in params.names().iter().zip(&self.m).zip(&self.v) {
            ck.insert(format!("opt.{name}.m"), m);
            ck.insert(format!("opt.{name}.v"), v);
        }
        ck.insert(format!("opt.{}.t", params.prefix()), &Tensor::<f64>::scalar(self.t as f64));
    }

    pub fn load_from(&mut self, params: &ParamStore<T>, ck: &Checkpoint) -> Result<(), CheckpointError> {
        for (i, name) in params.names().iter().enumerate() {
            self.m[i] = ck.get(&format!("opt.{name}.m"))?;
            self.v[i] = ck.get(&format!("opt.{name}.v"))?;
        }
        let t: Tensor<f64> = ck.get(&format!("opt.{}.t", params.prefix()))?;
        self.t = t.data().first().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter in the group.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (one_b1, one_b2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(EPS);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            *w = *w - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new("p");
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 1e-3).unwrap();
        assert!((p.values()[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = store(0.7);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 1e-2).unwrap();
        }
        assert_eq!(p.values()[0].data()[0], 0.7);
    }

    #[test]
    fn groups_are_independent() {
        let (mut a, mut b) = (store(0.0), store(0.0));
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        adam_step(&mut a, &[Tensor::scalar(1.0)], &mut sa, 0.1).unwrap();
        adam_step(&mut a, &[Tensor::scalar(1.0)], &mut sa, 0.1).unwrap();
        adam_step(&mut b, &[Tensor::scalar(-1.0)], &mut sb, 0.1).unwrap();
        assert_eq!((sa.t, sb.t), (2, 1));
        assert!((b.values()[0].data()[0] - 0.1).abs() < 1e-9);
        assert!(adam_step(&mut a, &[], &mut sa, 0.1).is_err());
    }
}
