use indexmap::IndexMap;

use super::graph::Arr;
use super::params::ParamStore;

/// Adam with classic L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: IndexMap<String, Arr>,
    v: IndexMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` maps parameter name to gradient (as
    /// produced by `ParamBinding::collect_grads`); `trainable` filters
    /// which parameters move (frozen ones keep their moments untouched).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Option<Arr>>,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(grad) = grad else { continue };
            if !trainable(name) {
                continue;
            }
            let param = store.get_mut(name);
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g.zip_mut_with(param, |gv, &pv| *gv += self.weight_decay * pv);
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(&g, |vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
