use super::Scalar;

/// SGD with classical momentum: `v ← m·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(n_params: usize, lr: f64, momentum: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        Self { lr, momentum, velocity: vec![T::zero(); n_params] }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        sgd_step(params, grad, self.lr, &mut self.velocity, self.momentum);
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }
}

pub fn sgd_step<T: Scalar>(params: &mut [T], grad: &[T], lr: f64, velocity: &mut [T], momentum: f64) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), velocity.len());
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + *g;
        *p -= lr * *v;
    }
}
