use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamConfig),
}

/// Optimizer state: learning rate, step count and (for Adam) first and
/// second moments, one buffer per parameter in the order parameters are
/// passed to [`Optimizer::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Self {
            kind,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            step_count: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam(AdamConfig::default()), lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds a saved optimizer. Moment buffers must come in pairs of
    /// equal shape; they are empty before the first Adam step and for SGD.
    pub fn from_parts(
        kind: OptimizerKind,
        lr: f64,
        step_count: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(TensorError::Contract(format!("learning rate {lr} is not positive")));
        }
        let paired = first.len() == second.len() && first.iter().zip(&second).all(|(a, b)| a.len() == b.len());
        if !paired || (matches!(kind, OptimizerKind::Sgd) && !first.is_empty()) {
            return Err(TensorError::Contract("inconsistent optimizer moment buffers".into()));
        }
        Ok(Self {
            kind,
            lr,
            first,
            second,
            step_count,
        })
    }

    /// Applies one update to every parameter and zeroes their gradients.
    ///
    /// Fails without touching anything if a parameter lacks a gradient or
    /// the parameter list no longer matches the moment buffers.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::MissingGrad(i));
        }
        if let OptimizerKind::Adam(_) = self.kind {
            if self.first.is_empty() {
                self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                self.second = self.first.clone();
            }
            if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
                return Err(TensorError::Contract(
                    "optimizer moment buffers do not match the parameter list".into(),
                ));
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let g = p.take_grad().expect("checked above");
                    for (w, gi) in p.data_mut().iter_mut().zip(&g) {
                        *w -= self.lr * gi;
                    }
                    p.accumulate_grad(&vec![0.0; g.len()])?;
                }
            }
            OptimizerKind::Adam(cfg) => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let mut g = p.take_grad().expect("checked above");
                    for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                    g.iter_mut().for_each(|x| *x = 0.0);
                    p.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }
}
