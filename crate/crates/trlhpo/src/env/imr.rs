//! Intermediate model representation: a frozen random projection that
//! maps one layer's action (4 values) and validation profile (32 values)
//! to the uniform 64-value slot encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::util::derive_seed;

pub const IMR_ACTION_VALUES: usize = 4;
pub const IMR_PROFILE_VALUES: usize = 32;
pub const IMR_INPUT: usize = IMR_ACTION_VALUES + IMR_PROFILE_VALUES;
pub const IMR_DIM: usize = 64;

/// Static single-layer mapping `36 -> 64` with tanh output and zero
/// bias. Weights are drawn once from a seeded normal distribution and
/// never updated.
#[derive(Debug, Clone)]
pub struct ImrEncoder {
    weights: Vec<f64>, // IMR_DIM x IMR_INPUT, row-major
}

impl ImrEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &["imr-encoder"]));
        let scale = 1.0 / (IMR_INPUT as f64).sqrt();
        let weights = (0..IMR_DIM * IMR_INPUT)
            .map(|_| scale * crate::util::gaussian(&mut rng))
            .collect();
        ImrEncoder { weights }
    }

    /// `tanh(W @ concat(action, batch_accuracies))`, 64 values in (-1, 1).
    pub fn encode(&self, action: &[f64; 4], batch_accuracies: &[f64]) -> Vec<f64> {
        assert_eq!(batch_accuracies.len(), IMR_PROFILE_VALUES);
        let mut input = [0.0; IMR_INPUT];
        input[..IMR_ACTION_VALUES].copy_from_slice(action);
        input[IMR_ACTION_VALUES..].copy_from_slice(batch_accuracies);
        (0..IMR_DIM)
            .map(|r| {
                let row = &self.weights[r * IMR_INPUT..(r + 1) * IMR_INPUT];
                row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>().tanh()
            })
            .collect()
    }
}
