use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::DepthModel;
use crate::error::{config_err, data_err, numerics_err, Result};
use crate::graph::{Graph, Var};
use crate::scenegen::Scene;
use crate::tensor::Tensor;

/// Adam over a named parameter map, with `f64` moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| config_err!("no parameter named {name}"))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = (*w as f64 - upd) as f32;
            }
            if !p.all_finite() {
                return Err(numerics_err!("parameter {name} diverged at step {}", self.t));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 3e-3,
            lr_decay: 0.94,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be at least 1"));
        }
        // lr = 0 is allowed and leaves the weights untouched
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(config_err!("invalid learning-rate schedule"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Records `mean(|a - b| / c)` on `g`.
pub(crate) fn relative_l1(g: &mut Graph, a: Var, b: Var, c: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let diff = g.abs(diff);
    let rel = g.div(diff, c)?;
    Ok(g.mean_all(rel))
}

/// Loss and parameter gradients for one supervised sample.
fn sample_grads(model: &DepthModel, scene: &Scene) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::<f32>::new();
    let params = model.bind(&mut g, true)?;
    let x = g.constant(scene.image.clone())?;
    let gt = g.constant(scene.depth.clone())?;
    let pred = model.forward_graph(&mut g, &params, x)?;
    let loss = relative_l1(&mut g, pred, gt, gt)?;
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|(name, v)| {
            let grad = g.grad_f64(v).map(<[f64]>::to_vec);
            (name.to_string(), grad.unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        })
        .collect();
    Ok((g.value(loss).data()[0] as f64, grads))
}

/// Supervised training on `mean(|pred - gt| / gt)`. Returns the trained
/// model and the mean training loss of every epoch.
pub fn train_with_history(
    model: &DepthModel,
    data: &[Scene],
    cfg: &TrainConfig,
) -> Result<(DepthModel, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(data_err!("training set is empty"));
    }
    let mut model = model.clone();
    let mut opt = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let (loss, grads) = sample_grads(&model, &data[i])?;
                if !loss.is_finite() {
                    return Err(numerics_err!("training loss is {loss} at epoch {epoch}"));
                }
                total += loss;
                for (name, gv) in grads {
                    let a = acc.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                    for (s, v) in a.iter_mut().zip(gv) {
                        *s += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for a in acc.values_mut() {
                a.iter_mut().for_each(|v| *v *= scale);
            }
            if lr > 0.0 {
                opt.step(model.params_mut(), &acc, lr)?;
            }
        }
        let mean = total / data.len() as f64;
        log::info!("{} epoch {epoch}: loss {mean:.4} lr {lr:.2e}", model.architecture());
        history.push(mean);
    }
    Ok((model, history))
}

pub fn train(model: &DepthModel, data: &[Scene], cfg: &TrainConfig) -> Result<DepthModel> {
    train_with_history(model, data, cfg).map(|(m, _)| m)
}
