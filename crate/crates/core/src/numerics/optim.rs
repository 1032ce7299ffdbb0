use super::mlp::MlpParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &MlpParams, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::shape("gradient layout does not match parameters"));
        }
        let mirrors = |moments: &[Tensor]| {
            moments.len() == params.tensors().count()
                && moments
                    .iter()
                    .zip(params.tensors())
                    .all(|(m, p)| m.shape() == p.shape())
        };
        if !mirrors(&self.first_moment) || !mirrors(&self.second_moment) {
            return Err(Error::shape("optimizer moments do not mirror parameters"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at optimizer step {}",
                self.step_count + 1
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::{Activation, Layer};

    fn scalar_net(w: f64) -> MlpParams {
        MlpParams::new(vec![Layer::new(
            Tensor::matrix(1, 1, vec![w]).unwrap(),
            Tensor::zeros(&[1]),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    fn scalar_grad(g: f64) -> MlpParams {
        let mut p = scalar_net(g);
        p.layers_mut()[0].bias.data_mut()[0] = 0.0;
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_net(1.5);
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &scalar_grad(0.0)).unwrap();
        assert_eq!(p.to_flat(), vec![1.5, 0.0]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_net(0.0);
        let eps = 1e-8;
        let mut opt = Adam::new(&p, 0.01, 0.9, 0.999, eps);
        let g = 0.37;
        opt.step(&mut p, &scalar_grad(g)).unwrap();
        let expected = 0.01 * g / (g + eps);
        assert!((p.to_flat()[0] + expected).abs() < 1e-15);
    }

    #[test]
    fn three_step_trace_matches_hand_recurrence() {
        let (lr, b1, b2, eps) = (0.05, 0.8, 0.95, 1e-6);
        let grads = [0.5, -1.25, 2.0];
        // Hand-unrolled recurrence, written out independently of `step`.
        let m1 = 0.2 * 0.5;
        let v1: f64 = 0.05 * 0.25;
        let p1 = 1.0 - lr * (m1 / (1.0 - 0.8)) / ((v1 / (1.0 - 0.95)).sqrt() + eps);
        let m2 = 0.8 * m1 + 0.2 * -1.25;
        let v2: f64 = 0.95 * v1 + 0.05 * 1.5625;
        let p2 = p1 - lr * (m2 / (1.0 - 0.64)) / ((v2 / (1.0 - 0.9025)).sqrt() + eps);
        let m3 = 0.8 * m2 + 0.2 * 2.0;
        let v3: f64 = 0.95 * v2 + 0.05 * 4.0;
        let p3 = p2 - lr * (m3 / (1.0 - 0.512)) / ((v3 / (1.0 - 0.857375)).sqrt() + eps);

        let mut p = scalar_net(1.0);
        let mut opt = Adam::new(&p, lr, b1, b2, eps);
        let mut trace = vec![];
        for g in grads {
            opt.step(&mut p, &scalar_grad(g)).unwrap();
            trace.push(p.to_flat()[0]);
        }
        for (a, b) in trace.iter().zip([p1, p2, p3]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = scalar_net(1.0);
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        let mut g = scalar_grad(0.0);
        g.layers_mut()[0].weight.data_mut()[0] = f64::NAN;
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite(_))));
        assert_eq!(opt.step_count, 0);
        assert_eq!(p.to_flat(), vec![1.0, 0.0]);
    }
}
