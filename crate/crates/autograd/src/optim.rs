use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with the store's parameter order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "gradient count does not match parameters");
        if self.first.is_empty() {
            self.first = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = params.get_mut(id);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let sq = tape.mul(b[id], b[id]);
            let loss = tape.sum(sq);
            let mut grads = tape.backward(loss);
            adam.step(&mut store, &b.gradients(&mut grads));
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(adam.steps_taken(), 500);
    }
}
