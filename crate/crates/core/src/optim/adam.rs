use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AxialMlp;
use crate::tensor::Tensor;

/// Adam moments and step counter.
///
/// Moments are allocated lazily on the first step and must keep the same
/// block layout afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held by the moment buffers once allocated for `n` scalars.
    pub fn bytes_for(n: usize) -> usize {
        2 * n * std::mem::size_of::<f64>()
    }

    /// One bias-corrected update of every block from its grad slot.
    ///
    /// All grads are checked before anything is written, so a failed step
    /// leaves both the parameters and the state untouched. Grads themselves are
    /// never modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], names: &[String], lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::param(format!("learning rate must be positive, got {lr}")));
        }
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("block {i}"));
        for (i, p) in params.iter().enumerate() {
            let g = p
                .grad()
                .ok_or_else(|| Error::Contract(format!("{} has no gradient", name(i))))?;
            if g.len() != p.len() {
                return Err(Error::dim(format!("{}: gradient and parameter sizes differ", name(i))));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in {} at element {j}",
                    g[j],
                    name(i)
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::dim("parameter layout changed between optimizer steps"));
        }

        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked above").to_vec();
            for (((x, m), v), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// [`AdamState::step`] over every model parameter, with diagnostics
    /// naming the offending block.
    pub fn step_model(&mut self, model: &mut AxialMlp, lr: f64) -> Result<()> {
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        let mut params = model.parameters_mut();
        self.step(&mut params, &names, lr)
    }
}
