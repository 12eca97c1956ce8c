//! AdamW with decoupled weight decay and a constant learning rate.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::TrainHyper;

/// A tensor handed to [`AdamW::step`].
pub struct Param<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    /// Biases are excluded from weight decay.
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hyper: &TrainHyper) -> Self {
        AdamW {
            lr: T::lit(hyper.lr),
            beta1: T::lit(hyper.beta1),
            beta2: T::lit(hyper.beta2),
            eps: T::lit(hyper.eps),
            weight_decay: T::lit(hyper.weight_decay),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every parameter. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [Param<'_, T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient {:?} for `{}` of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                ));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{}`", p.name)));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect::<Result<_>>()?;
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(shape_err!(
                "optimizer holds {} moments, got {} parameters",
                self.m.len(),
                params.len()
            ));
        }

        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        let shrink = one - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = p.decay;
            let values = p.value.data_mut();
            for (((x, &gi), mi), vi) in values.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                if decay {
                    *x = *x * shrink;
                }
                *x = *x - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(wd: f64) -> TrainHyper {
        TrainHyper {
            weight_decay: wd,
            ..TrainHyper::default()
        }
    }

    fn step(opt: &mut AdamW<f64>, p: &mut Tensor<f64>, g: &Tensor<f64>, decay: bool) -> Result<()> {
        opt.step(
            &mut [Param {
                name: "p",
                value: p,
                decay,
            }],
            &[g],
        )
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut opt = AdamW::new(&hyper(0.0));
        let mut p = Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap();
        let before = p.clone();
        for _ in 0..5 {
            step(&mut opt, &mut p, &Tensor::zeros(&[1, 2]).unwrap(), true).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let h = hyper(0.0);
        let mut opt = AdamW::new(&h);
        let mut p = Tensor::scalar(0.0);
        step(&mut opt, &mut p, &Tensor::scalar(1.0), true).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = -h.lr * 1.0 / (1.0 + h.eps);
        assert!((p.data()[0] - expect).abs() < 1e-18);
        assert!((p.data()[0] + h.lr).abs() < 1e-10);
    }

    #[test]
    fn decay_is_multiplicative_shrink() {
        let h = hyper(0.01);
        let mut opt = AdamW::new(&h);
        let mut p = Tensor::from_rows(&[vec![2.0, -4.0]]).unwrap();
        step(&mut opt, &mut p, &Tensor::zeros(&[1, 2]).unwrap(), true).unwrap();
        let f = 1.0 - h.lr * h.weight_decay;
        assert_eq!(p.data(), &[2.0 * f, -4.0 * f]);

        let mut bias = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let mut opt = AdamW::new(&h);
        step(&mut opt, &mut bias, &Tensor::zeros(&[1, 1]).unwrap(), false).unwrap();
        assert_eq!(bias.data(), &[2.0]);
    }

    #[test]
    fn nan_gradient_names_tensor_and_leaves_params() {
        let mut opt = AdamW::new(&hyper(0.01));
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let err = opt
            .step(
                &mut [
                    Param {
                        name: "head_w",
                        value: &mut a,
                        decay: true,
                    },
                    Param {
                        name: "sigma",
                        value: &mut b,
                        decay: true,
                    },
                ],
                &[&Tensor::scalar(0.5), &Tensor::scalar(f64::NAN)],
            )
            .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("sigma")));
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 1.0));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut opt = AdamW::new(&TrainHyper {
            lr: 0.05,
            weight_decay: 0.0,
            ..TrainHyper::default()
        });
        let mut p = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        for _ in 0..500 {
            let g = p.scale(2.0);
            step(&mut opt, &mut p, &g, true).unwrap();
        }
        assert!(p.max_abs() < 1e-2);
    }
}
