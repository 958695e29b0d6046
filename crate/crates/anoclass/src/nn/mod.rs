//! Small training stack for the classifier heads: f64 tensors, hand-written
//! backward passes, Adam. Heads are a few conv blocks plus a linear tail, so
//! the layer set stays deliberately small.

pub mod layers;

pub use layers::{BatchNorm2d, Conv3x3, ConvBlock, GlobalAvgPool, Linear, MaxPool2x2};

/// A flat parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(data: Vec<f64>) -> Self {
        let n = data.len();
        Param {
            data,
            grad: vec![0.0; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Param::new(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Adam with the usual defaults; state is keyed by parameter visit order, so
/// the same optimizer instance must always see the same parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / b1t;
                let v_hat = v[j] / b2t;
                p.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_decreases_a_quadratic() {
        // minimize (x - 3)^2
        let mut p = Param::new(vec![0.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.zero_grad();
            p.grad[0] = 2.0 * (p.data[0] - 3.0);
            opt.step(&mut [&mut p]);
        }
        assert!((p.data[0] - 3.0).abs() < 1e-2, "got {}", p.data[0]);
    }

    #[test]
    fn sigmoid_range_and_symmetry() {
        assert!(sigmoid(0.0) == 0.5);
        assert!(sigmoid(30.0) < 1.0 && sigmoid(30.0) > 0.999);
        assert!(sigmoid(-30.0) > 0.0 && sigmoid(-30.0) < 0.001);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-12);
    }
}
