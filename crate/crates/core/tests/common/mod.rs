#![allow(dead_code)]

use uqsep::nn::{Activation, MlpParams};
use uqsep::problems::{toy_problem, Problem};
use uqsep::separation::SeparationConfig;
use uqsep::surrogates::{EqrConfig, NetworkConfig, SurrogateConfig};

/// A network that ignores its input and always returns `outputs`.
pub fn constant_net(input_dim: usize, outputs: &[f64]) -> MlpParams {
    let mut p = MlpParams::zeros(&[input_dim, 4, outputs.len()], Activation::Tanh).unwrap();
    p.biases_mut()[1].iter_mut().zip(outputs).for_each(|(b, v)| *b = *v);
    p
}

/// Small, fast separation settings for structural tests.
pub fn quick_config(seed: u64) -> SeparationConfig {
    let mut eqr = EqrConfig {
        n_members: 3,
        network: NetworkConfig {
            hidden: vec![16, 16],
            ..NetworkConfig::default()
        },
        ..EqrConfig::default()
    };
    eqr.train.epochs = 15;
    SeparationConfig {
        iterations: 2,
        n_initial: 400,
        grid_resolution: 16,
        seed,
        surrogate: SurrogateConfig::Eqr(eqr),
        ..SeparationConfig::default()
    }
}

pub fn toy() -> Problem {
    toy_problem()
}
