//! Adam with decoupled weight decay.

use crate::e4mer::{Param, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Param]) -> Self {
        AdamW {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter selected by `trainable`. A missing
    /// gradient counts as zero, so decay still applies.
    pub fn step(
        &mut self,
        params: &mut [Param],
        grads: &[Option<Tensor>],
        lr: f64,
        weight_decay: f64,
        trainable: impl Fn(&Param) -> bool,
    ) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable(p) {
                continue;
            }
            let decay = 1.0 - lr * weight_decay;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.get(i).and_then(|g| g.as_ref());
            for j in 0..p.value.data.len() {
                let gj = g.map_or(0.0, |g| g.data[j]);
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + EPS);
                p.value.data[j] = p.value.data[j] * decay - lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::e4mer::ParamGroup;

    fn param(v: f64) -> Param {
        Param { name: "w".into(), group: ParamGroup::Head, value: Tensor::filled(1, 3, v) }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut ps = vec![param(2.0)];
        let mut opt = AdamW::new(&ps);
        let (lr, wd) = (0.01, 0.5);
        for k in 1..=5 {
            opt.step(&mut ps, &[None], lr, wd, |_| true);
            let want = 2.0 * (1.0 - lr * wd).powi(k);
            assert!(ps[0].value.data.iter().all(|&x| (x - want).abs() < 1e-15));
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = vec![param(1.0)];
        let mut opt = AdamW::new(&ps);
        let g = Tensor::from_vec(1, 3, vec![3.0, -0.5, 0.0]);
        opt.step(&mut ps, &[Some(g)], 0.1, 0.0, |_| true);
        let d: Vec<f64> = ps[0].value.data.iter().map(|x| x - 1.0).collect();
        assert!((d[0] + 0.1).abs() < 1e-6 && (d[1] - 0.1).abs() < 1e-6 && d[2] == 0.0);
    }

    #[test]
    fn untouched_when_not_trainable() {
        let mut ps = vec![param(1.0)];
        let mut opt = AdamW::new(&ps);
        opt.step(&mut ps, &[Some(Tensor::filled(1, 3, 1.0))], 0.1, 0.1, |_| false);
        assert_eq!(ps[0].value.data, vec![1.0; 3]);
    }
}
