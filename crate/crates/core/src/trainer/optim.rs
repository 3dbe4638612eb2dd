use crate::models::{Gradients, Network};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: net.zero_gradients().0,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        for ((param, grad), vel) in net
            .params_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.velocity)
        {
            for ((w, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= self.lr * *v;
            }
        }
    }
}
