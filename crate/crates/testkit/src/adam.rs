//! Scalar reference implementation of Adam with bias correction.

pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: f64,
    v: f64,
    t: u32,
}

impl ScalarAdam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> ScalarAdam {
        ScalarAdam {
            lr,
            beta1,
            beta2,
            eps,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    /// One update of a single parameter; returns the new value.
    pub fn step(&mut self, theta: f64, grad: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t as i32));
        theta - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}
