use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// g   = grad + wd * w (+ mu * (w - anchor))
/// buf = momentum * buf + g
/// w   = w - lr * buf
/// ```
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Clears momentum.
    pub fn reset(&mut self) {
        self.buffers.clear();
    }

    /// Applies one update in place. `prox` is an optional
    /// `(mu, anchor parameters)` proximal pull.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], prox: Option<(f64, &[Tensor<T>])>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let lr = T::from_f64_lossy(self.lr);
        let momentum = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let mu = prox.map(|(mu, _)| T::from_f64_lossy(mu));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let anchor = prox.map(|(_, a)| a[i].data());
            let buf = &mut self.buffers[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let mut d = gj + wd * *w;
                if let (Some(mu), Some(anchor)) = (mu, anchor) {
                    d += mu * (*w - anchor[j]);
                }
                buf[j] = momentum * buf[j] + d;
                *w -= lr * buf[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut opt = Sgd::<f64>::new(0.1, 0.0, 0.0);
        let mut p = vec![Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap()];
        let g = vec![Tensor::from_f64(vec![2], &[0.5, -1.0]).unwrap()];
        opt.step(&mut p, &g, None).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn momentum_and_decay() {
        let mut opt = Sgd::<f64>::new(1.0, 0.5, 0.1);
        let mut p = vec![Tensor::from_f64(vec![1], &[1.0]).unwrap()];
        let g = vec![Tensor::from_f64(vec![1], &[1.0]).unwrap()];
        opt.step(&mut p, &g, None).unwrap();
        // d = 1 + 0.1 * 1 = 1.1, buf = 1.1, w = -0.1
        assert!((p[0].data()[0] + 0.1f64).abs() < 1e-15);
        opt.step(&mut p, &g, None).unwrap();
        // d = 1 - 0.01 = 0.99, buf = 0.55 + 0.99 = 1.54, w = -1.64
        assert!((p[0].data()[0] + 1.64f64).abs() < 1e-12);
    }

    #[test]
    fn proximal_term_vanishes_at_anchor() {
        let anchor = vec![Tensor::<f64>::from_f64(vec![2], &[0.3, -0.2]).unwrap()];
        let g = vec![Tensor::from_f64(vec![2], &[0.1, 0.1]).unwrap()];
        let mut a = anchor.clone();
        let mut b = anchor.clone();
        Sgd::new(0.5, 0.9, 0.0).step(&mut a, &g, Some((100.0, &anchor))).unwrap();
        Sgd::new(0.5, 0.9, 0.0).step(&mut b, &g, None).unwrap();
        assert_eq!(a, b);
    }
}
