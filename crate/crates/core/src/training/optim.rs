use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::HasParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Global L2 norm over a gradient set; refuses non-finite entries rather
/// than letting them vanish inside a clip.
pub fn global_norm(grads: &[(String, Vec<f64>)]) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        for &v in g {
            if !v.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in {name}")));
            }
            sq += v * v;
        }
    }
    Ok(sq.sqrt())
}

/// Scales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the factor applied.
pub fn clip_gradients(grads: &mut [(String, Vec<f64>)], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for (_, g) in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
    Ok(factor)
}

/// Biases and batch-norm affine parameters are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

/// Adds `alpha * w` to the gradient of every decaying parameter. Gradients
/// must be listed in the model's visit order.
pub fn add_weight_decay<M: HasParams>(
    model: &M,
    grads: &mut [(String, Vec<f64>)],
    alpha: f64,
) -> Result<()> {
    if alpha == 0.0 {
        return Ok(());
    }
    let mut i = 0usize;
    let mut problem = None;
    model.visit_params(&mut |p| {
        if problem.is_some() {
            return;
        }
        match grads.get_mut(i) {
            Some((name, g)) if name == &p.name && g.len() == p.values.len() => {
                if decays(&p.name) {
                    for (gv, wv) in g.iter_mut().zip(&p.values) {
                        *gv += alpha * wv;
                    }
                }
            }
            _ => problem = Some(p.name.clone()),
        }
        i += 1;
    });
    if let Some(name) = problem {
        return Err(Error::Training(format!(
            "gradient set out of step with parameters at {name}"
        )));
    }
    if i != grads.len() {
        return Err(Error::Training(format!(
            "{} gradients for {} parameters",
            grads.len(),
            i
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptAlgo {
    Sgd,
    Adam,
}

/// Stateful optimizer. Moment tensors are kept in the model's parameter
/// visit order, fixed at construction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub algo: OptAlgo,
    pub lr: f64,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64, manifest: &[(String, Vec<usize>)]) -> Optimizer {
        Optimizer {
            algo: OptAlgo::Sgd,
            lr,
            step: 0,
            names: manifest.iter().map(|(n, _)| n.clone()).collect(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64, manifest: &[(String, Vec<usize>)]) -> Optimizer {
        let sizes: Vec<usize> = manifest.iter().map(|(_, s)| s.iter().product()).collect();
        Optimizer {
            algo: OptAlgo::Adam,
            lr,
            step: 0,
            names: manifest.iter().map(|(n, _)| n.clone()).collect(),
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters, in visit order.
    pub fn apply<M: HasParams>(
        &mut self,
        model: &mut M,
        grads: &[(String, Vec<f64>)],
    ) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::Training(format!(
                "{} gradients for {} tracked parameters",
                grads.len(),
                self.names.len()
            )));
        }
        if self.algo == OptAlgo::Adam {
            self.step += 1;
        }
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let lr = self.lr;
        let algo = self.algo;
        let (names, ms, vs) = (&self.names, &mut self.m, &mut self.v);
        let mut i = 0usize;
        let mut problem = None;
        model.visit_params_mut(&mut |p| {
            if problem.is_some() {
                return;
            }
            let ok = names.get(i).map(|n| n == &p.name).unwrap_or(false)
                && grads[i].0 == p.name
                && grads[i].1.len() == p.values.len();
            if !ok {
                problem = Some(p.name.clone());
                return;
            }
            let g = &grads[i].1;
            match algo {
                OptAlgo::Sgd => {
                    for (w, gv) in p.values.iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
                OptAlgo::Adam => {
                    let m = &mut ms[i];
                    let v = &mut vs[i];
                    for j in 0..g.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p.values[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
            i += 1;
        });
        if let Some(name) = problem {
            return Err(Error::Training(format!(
                "gradient set out of step with parameters at {name}"
            )));
        }
        if i != self.names.len() {
            return Err(Error::Training(format!(
                "model visited {i} parameters, optimizer tracks {}",
                self.names.len()
            )));
        }
        Ok(())
    }

    /// Persists step counter, learning rate and moment tensors.
    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.insert_scalar("opt.step", self.step as f64)?;
        ck.insert_scalar("opt.lr", self.lr)?;
        ck.insert_scalar(
            "opt.algo",
            match self.algo {
                OptAlgo::Sgd => 0.0,
                OptAlgo::Adam => 1.0,
            },
        )?;
        if self.algo == OptAlgo::Adam {
            for (i, name) in self.names.iter().enumerate() {
                ck.insert(&format!("opt.m.{name}"), &[self.m[i].len()], self.m[i].clone())?;
                ck.insert(&format!("opt.v.{name}"), &[self.v[i].len()], self.v[i].clone())?;
            }
        }
        Ok(())
    }

    pub fn restore_from(&mut self, ck: &Checkpoint) -> Result<()> {
        let algo = ck
            .scalar("opt.algo")
            .ok_or_else(|| Error::Checkpoint("missing opt.algo".into()))?;
        let expected = match self.algo {
            OptAlgo::Sgd => 0.0,
            OptAlgo::Adam => 1.0,
        };
        if algo != expected {
            return Err(Error::Checkpoint("optimizer kind mismatch".into()));
        }
        self.step = ck
            .scalar("opt.step")
            .ok_or_else(|| Error::Checkpoint("missing opt.step".into()))? as u64;
        self.lr = ck
            .scalar("opt.lr")
            .ok_or_else(|| Error::Checkpoint("missing opt.lr".into()))?;
        if self.algo == OptAlgo::Adam {
            for (i, name) in self.names.iter().enumerate() {
                for (label, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                    let key = format!("opt.{label}.{name}");
                    match ck.get(&key) {
                        Some((_, vals)) if vals.len() == slot.len() => {
                            slot.copy_from_slice(vals)
                        }
                        Some(_) => {
                            return Err(Error::Checkpoint(format!("{key} has wrong size")))
                        }
                        None => return Err(Error::Checkpoint(format!("missing {key}"))),
                    }
                }
            }
        }
        Ok(())
    }
}
