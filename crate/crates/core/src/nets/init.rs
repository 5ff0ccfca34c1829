use rand::Rng;

use crate::tensor::Tensor;

/// Bound of the Kaiming-uniform distribution with rectifier gain.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// I.i.d. samples from `U[-b, b]`, `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let b = kaiming_bound(fan_in) as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-b..=b)).collect();
    Tensor::from_vec(shape, data)
}

/// Fan-in of a weight tensor laid out as `[out, in, ...]`.
pub fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

/// Initial value for a parameter, chosen by its name suffix.
pub fn init_param<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<f32> {
    if name.ends_with(".weight") {
        kaiming_uniform_init(shape, fan_in(shape), rng)
    } else if name.ends_with(".scale") || name.ends_with(".running_var") {
        Tensor::full(shape, 1.0)
    } else {
        // bias, shift, running_mean
        Tensor::zeros(shape)
    }
}
