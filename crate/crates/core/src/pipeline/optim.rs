use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with decay rates `(0.5, 0.999)` and `eps = 1e-8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[i]` belongs to `params[i]`.
    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (nb1, nb2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(self.lr / c1);
        let c2_sqrt = T::from_f64_lossy(c2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != p.numel() || m.len() != g.len() {
                return Err(Error::dim("gradient length does not match its parameter"));
            }
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + nb1 * gi;
                *vi = b2 * *vi + nb2 * gi * gi;
                *w = *w - step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.update(vec![&mut p], &[vec![3.0, -0.5]]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::<f64>::new(vec![1], vec![5.0]).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * (p.data()[0] - 2.0)];
            opt.update(vec![&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-2);
    }
}
