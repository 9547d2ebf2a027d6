//! First-order optimizers over any parameter set exposed as flat slices.

pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Descends along `grads`, which must share the layout of `params`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.flatten();
        let mut offset = 0;
        match self.kind {
            OptimizerKind::Sgd => {
                for slice in params.slices_mut() {
                    for (p, g) in slice.iter_mut().zip(&grads[offset..]) {
                        *p -= self.lr * g;
                    }
                    offset += slice.len();
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != grads.len() {
                    self.m = vec![0.0; grads.len()];
                    self.v = vec![0.0; grads.len()];
                    self.t = 0;
                }
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                for slice in params.slices_mut() {
                    for (k, p) in slice.iter_mut().enumerate() {
                        let i = offset + k;
                        let g = grads[i];
                        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = self.m[i] / bc1;
                        let v_hat = self.v[i] / bc2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    offset += slice.len();
                }
            }
        }
    }
}
