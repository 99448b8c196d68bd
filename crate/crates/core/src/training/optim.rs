use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction and a per-epoch exponential learning-rate decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier applied at each epoch boundary.
    pub gamma: f64,
    steps: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, gamma: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(gamma > 0.0) {
            return Err(Error::invalid(format!("need lr >= 0 and gamma > 0, got {lr} and {gamma}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gamma,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moments of parameter `i`, once it has been updated.
    pub fn moments(&self, i: usize) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(i)?.as_ref()?, self.second.get(i)?.as_ref()?))
    }

    /// One update. `grads[i]` is `None` for a frozen parameter, which is left
    /// untouched together with its moments.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Option<Tensor>]) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.first.is_empty() {
            self.first = vec![None; params.len()];
            self.second = vec![None; params.len()];
        } else if self.first.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("optimizer tracks {} parameters, got {}", self.first.len(), params.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "adam",
                        format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                    ));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.gamma;
    }
}
