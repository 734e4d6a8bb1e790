use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Fan-in and fan-out of a weight shape. Rank-1 shapes count the single
/// dimension on both sides; higher ranks fold leading dims into a receptive
/// field.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        _ => {
            let field: usize = shape[2..].iter().product();
            (shape[1] * field, shape[0] * field)
        }
    }
}

/// Glorot/Xavier uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<F: Real>(shape: &[usize], seed: u64) -> Result<Tensor<F>> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("xavier_init on shape {shape:?}")));
    }
    let (fan_in, fan_out) = fans(shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(dist.sample(&mut rng))).collect();
    Tensor::from_vec(shape, data)
}
