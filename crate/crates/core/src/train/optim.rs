use creepformer_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Mean squared error between `pred` and a constant target of the same size.
pub fn mse_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if g.value(pred).len() != target.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} targets",
            g.value(pred).len(),
            target.len()
        )));
    }
    if target.is_empty() {
        return Err(Error::Input("loss of an empty batch".into()));
    }
    let t = g.constant(target.clone().reshape(g.shape(pred).to_vec())?);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq)?)
}

/// Adam with decoupled weight decay. Each step first shrinks every
/// parameter by `lr · weight_decay`, then applies the bias-corrected update.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Input("optimizer state does not match the parameter list".into()));
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Tracks the best value seen; an observation improves only if it is below
/// `best − 1e-12`.
#[derive(Debug, Clone, Default)]
struct Stall {
    best: Option<f64>,
    epochs: usize,
}

impl Stall {
    fn observe(&mut self, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => value < b - 1e-12,
        };
        if improved {
            self.best = Some(value);
            self.epochs = 0;
        } else {
            self.epochs += 1;
        }
        improved
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement of the validation loss.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    stall: Stall,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            stall: Stall::default(),
        }
    }

    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        self.stall.observe(val_loss);
        if self.stall.epochs >= self.patience {
            self.stall.epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Signals a stop after `patience` consecutive epochs without a strict
/// improvement of the validation MAPE.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    stall: Stall,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            stall: Stall::default(),
        }
    }

    pub fn step(&mut self, val_mape: f64) -> bool {
        self.stall.observe(val_mape);
        self.stall.epochs >= self.patience
    }
}
