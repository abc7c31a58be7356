use super::Trainable;
use crate::error::Result;
use crate::langmodel::sha256_hex;
use crate::numerics::Tensor;

/// One scalar parameter θ; a sample `c` has loss `(θ − c)² / 2`.
///
/// Small enough that every optimizer and influence quantity has a closed form,
/// which makes it a convenient fixture for checking the generic machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    theta: Vec<Tensor>,
}

impl QuadraticModel {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: vec![Tensor::scalar(theta)],
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta[0].data()[0]
    }
}

impl Trainable for QuadraticModel {
    type Sample = f64;

    fn params(&self) -> &[Tensor] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.theta
    }

    fn loss_and_grads(&self, batch: &[&f64]) -> Result<(f64, Vec<Tensor>)> {
        let th = self.theta();
        let n = batch.len() as f64;
        let loss = batch.iter().map(|&&c| 0.5 * (th - c) * (th - c)).sum::<f64>() / n;
        let grad = batch.iter().map(|&&c| th - c).sum::<f64>() / n;
        Ok((loss, vec![Tensor::scalar(grad)]))
    }

    fn sample_losses(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let th = self.theta();
        Ok(samples.iter().map(|c| 0.5 * (th - c) * (th - c)).collect())
    }

    fn fits(&self, _: &f64) -> bool {
        true
    }

    fn content_hash(&self) -> String {
        sha256_hex(&self.theta().to_le_bytes())
    }
}
