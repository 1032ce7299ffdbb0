use super::mlp::MlpParams;
use crate::error::{Error, Result};

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: MlpParams,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &MlpParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config(format!("ema decay {decay} outside [0, 1]")));
        }
        Ok(EmaState {
            shadow: params.clone(),
            decay,
        })
    }

    /// `shadow ← decay·shadow + (1−decay)·params`.
    pub fn update(&mut self, params: &MlpParams) -> Result<()> {
        if !self.shadow.same_layout(params) {
            return Err(Error::shape("ema shadow does not match parameters"));
        }
        let d = self.decay;
        for (s, p) in self.shadow.tensors_mut().zip(params.tensors()) {
            for (si, &pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = d * *si + (1.0 - d) * pi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::{Activation, Layer};
    use crate::numerics::tensor::Tensor;

    fn net(vals: [f64; 3]) -> MlpParams {
        MlpParams::new(vec![Layer::new(
            Tensor::matrix(1, 2, vec![vals[0], vals[1]]).unwrap(),
            Tensor::vector(vec![vals[2]]).unwrap(),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn decay_extremes() {
        let s0 = net([1.0, 2.0, 3.0]);
        let p = net([-4.0, 0.5, 8.0]);
        let mut e = EmaState::new(&s0, 0.0).unwrap();
        e.update(&p).unwrap();
        assert_eq!(e.shadow, p);
        let mut e = EmaState::new(&s0, 1.0).unwrap();
        e.update(&p).unwrap();
        assert_eq!(e.shadow, s0);
    }

    #[test]
    fn half_decay_unrolls() {
        let s0 = net([1.0, 2.0, 3.0]);
        let p1 = net([5.0, -2.0, 0.0]);
        let p2 = net([-1.0, 4.0, 2.0]);
        let mut e = EmaState::new(&s0, 0.5).unwrap();
        e.update(&p1).unwrap();
        e.update(&p2).unwrap();
        let expect: Vec<f64> = s0
            .to_flat()
            .iter()
            .zip(p1.to_flat())
            .zip(p2.to_flat())
            .map(|((a, b), c)| 0.25 * a + 0.25 * b + 0.5 * c)
            .collect();
        assert_eq!(e.shadow.to_flat(), expect);
    }

    #[test]
    fn rejects_out_of_range_decay() {
        assert!(EmaState::new(&net([0.0; 3]), 1.5).is_err());
    }
}
