//! Gaussian-blur preprocessing and adversarial fine-tuning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{craft, target_loss, AttackConfig};
use crate::depth_net::{relative_l1, Adam, DepthModel};
use crate::error::{config_err, data_err, numerics_err, shape_err, Error, Result};
use crate::eval_metrics::{perturbed, Stats};
use crate::graph::Graph;
use crate::scenegen::Scene;
use crate::targets::{build_target, TargetSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurConfig {
    pub sigma: f64,
    /// Kernel radius; `None` means `ceil(3 sigma)`.
    pub radius: Option<usize>,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            radius: None,
        }
    }
}

impl BlurConfig {
    pub fn new(sigma: f64) -> Self {
        Self { sigma, radius: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(config_err!("blur sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.radius.unwrap_or_else(|| (3.0 * self.sigma).ceil() as usize)
    }

    /// Normalized 1-D kernel of length `2 * radius + 1`.
    pub fn kernel(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let r = self.radius() as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|k| k / sum).collect())
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur of every channel of a `[C,H,W]` image.
pub fn gaussian_blur(image: &Tensor, cfg: &BlurConfig) -> Result<Tensor> {
    let k = cfg.kernel()?;
    let (c, h, w) = image.chw()?;
    if k.len() == 1 {
        return Ok(image.clone());
    }
    let r = (k.len() / 2) as i64;
    let src = image.data();
    let mut tmp = vec![0.0f64; src.len()];
    for ch in 0..c {
        for row in 0..h {
            let base = (ch * h + row) * w;
            for col in 0..w {
                tmp[base + col] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[base + reflect(col as i64 + j as i64 - r, w)] as f64)
                    .sum();
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = ch * h * w;
        for row in 0..h {
            for col in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[plane + reflect(row as i64 + j as i64 - r, h) * w + col])
                    .sum();
                out[plane + row * w + col] = acc as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// ARE of `model` on `blur(clamp(x + v))` against `target`.
pub fn eval_under_blur(model: &DepthModel, x: &Tensor, v: &Tensor, target: &Tensor, cfg: &BlurConfig) -> Result<f64> {
    if x.shape() != v.shape() {
        return Err(shape_err!("perturbation {:?} does not match image {:?}", v.shape(), x.shape()));
    }
    let blurred = gaussian_blur(&perturbed(x, v, 1.0)?, cfg)?;
    let zero = Tensor::zeros(x.shape().to_vec());
    target_loss(model, &blurred, &zero, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvTrainConfig {
    /// Scale factors of the targets the pool is crafted for.
    pub alphas: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplier, below 1.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            alphas: vec![-0.10, -0.05, 0.05, 0.10],
            epochs: 5,
            batch_size: 4,
            lr: 5e-5,
            lr_decay: 0.5,
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.batch_size == 0 {
            return Err(config_err!("adversarial training needs alphas and a positive batch size"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(config_err!("learning-rate schedule must start positive and strictly decrease"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// One perturbation per scene, crafted on `model` for a scale target with
/// a seeded choice of alpha and attack configuration.
pub fn craft_pool(
    model: &DepthModel,
    data: &[Scene],
    attacks: &[AttackConfig],
    cfg: &AdvTrainConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    if attacks.is_empty() {
        return Err(config_err!("no attack configurations for the perturbation pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data.iter()
        .map(|s| {
            let alpha = cfg.alphas[rng.gen_range(0..cfg.alphas.len())];
            let attack = &attacks[rng.gen_range(0..attacks.len())];
            let t = build_target(model, s, &TargetSpec::Scale(alpha), None)?;
            Ok(craft(model, &s.image, &t.depth, attack)?.v)
        })
        .collect()
}

/// Loss `mean(|f(x) - f(x + v)| / f(x))` and its weight gradients, with the
/// clean prediction held fixed.
fn sample_grads(model: &DepthModel, x: &Tensor, v: &Tensor) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let clean = model.predict(x)?;
    let mut g = Graph::<f32>::new();
    let params = model.bind(&mut g, true)?;
    let xv = g.constant(perturbed(x, v, 1.0)?)?;
    let reference = g.constant(clean)?;
    let pred = model.forward_graph(&mut g, &params, xv)?;
    let loss = relative_l1(&mut g, pred, reference, reference)?;
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|(name, p)| {
            let grad = g.grad_f64(p).map(<[f64]>::to_vec);
            (name.to_string(), grad.unwrap_or_else(|| vec![0.0; g.value(p).len()]))
        })
        .collect();
    Ok((g.value(loss).data()[0] as f64, grads))
}

/// Fine-tunes `model` so perturbed inputs reproduce the clean prediction.
/// Returns the model and the mean loss of every epoch.
pub fn fine_tune(
    model: &DepthModel,
    data: &[Scene],
    pool: &[Tensor],
    cfg: &AdvTrainConfig,
) -> Result<(DepthModel, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(data_err!("adversarial training set is empty"));
    }
    if pool.len() != data.len() {
        return Err(shape_err!("{} perturbations for {} scenes", pool.len(), data.len()));
    }
    let mut model = model.clone();
    let mut opt = Adam::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let (loss, grads) = sample_grads(&model, &data[i].image, &pool[i])?;
                if !loss.is_finite() {
                    return Err(numerics_err!("adversarial loss is {loss} at epoch {epoch}"));
                }
                total += loss;
                for (name, gv) in grads {
                    let a = acc.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                    a.iter_mut().zip(gv).for_each(|(s, v)| *s += v);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.values_mut().for_each(|a| a.iter_mut().for_each(|v| *v *= scale));
            opt.step(model.params_mut(), &acc, lr)?;
        }
        let mean = total / data.len() as f64;
        log::info!("adversarial epoch {epoch}: loss {mean:.5} lr {lr:.2e}");
        history.push(mean);
    }
    Ok((model, history))
}

/// Crafts a perturbation pool on `model` and fine-tunes against it.
pub fn adversarial_train(
    model: &DepthModel,
    data: &[Scene],
    attacks: &[AttackConfig],
    cfg: &AdvTrainConfig,
) -> Result<DepthModel> {
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    let pool = craft_pool(model, data, attacks, cfg)?;
    fine_tune(model, data, &pool, cfg).map(|(m, _)| m)
}

/// One line of `defense.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseRow {
    pub defense: String,
    pub xi: f64,
    pub target: String,
    pub stats: Stats,
    pub clean_are: f64,
}

/// `defense,xi,target_kind,mean,median,std,clean_are`
pub fn write_defense_csv(path: impl AsRef<Path>, rows: &[DefenseRow]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["defense", "xi", "target_kind", "mean", "median", "std", "clean_are"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.defense.clone(),
            r.xi.to_string(),
            r.target.clone(),
            r.stats.mean.to_string(),
            r.stats.median.to_string(),
            r.stats.std.to_string(),
            r.clean_are.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.3, 1.0, 2.5] {
            let k = BlurConfig::new(sigma).kernel().unwrap();
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-7);
        }
    }

    #[test]
    fn non_positive_sigma_is_config_error() {
        let img = Tensor::zeros(vec![3, 4, 4]);
        for sigma in [0.0, -1.0, f64::NAN] {
            assert!(matches!(gaussian_blur(&img, &BlurConfig::new(sigma)), Err(Error::Config(_))));
        }
    }

    #[test]
    fn constant_image_is_fixed() {
        let img = Tensor::full(vec![3, 9, 7], 0.375);
        let out = gaussian_blur(&img, &BlurConfig::new(1.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.375).abs() <= 1e-7));
    }

    #[test]
    fn impulse_gives_kernel() {
        let cfg = BlurConfig::new(1.0);
        let k = cfg.kernel().unwrap();
        let mut img = Tensor::zeros(vec![1, 15, 15]);
        img.data_mut()[7 * 15 + 7] = 1.0;
        let out = gaussian_blur(&img, &cfg).unwrap();
        for (dr, kr) in k.iter().enumerate() {
            for (dc, kc) in k.iter().enumerate() {
                let got = out.data()[(4 + dr) * 15 + 4 + dc] as f64;
                assert!((got - kr * kc).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn zero_radius_is_identity() {
        let img = Tensor::from_fn(vec![3, 5, 6], |i| (i % 7) as f32 / 7.0);
        let cfg = BlurConfig {
            sigma: 1.0,
            radius: Some(0),
        };
        assert_eq!(gaussian_blur(&img, &cfg).unwrap(), img);
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn schedule_must_decrease() {
        let bad = AdvTrainConfig {
            lr_decay: 1.0,
            ..AdvTrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let cfg = AdvTrainConfig::default();
        assert!(cfg.lr_at(1) < cfg.lr_at(0));
    }

    proptest! {
        #[test]
        fn blur_commutes_with_shift(seed in any::<u64>(), c in -0.5f32..0.5, sigma in 0.2f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::from_fn(vec![2, 6, 9], |_| rng.gen::<f32>());
            let cfg = BlurConfig::new(sigma);
            let a = gaussian_blur(&img.map(|v| v + c), &cfg).unwrap();
            let b = gaussian_blur(&img, &cfg).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - (y + c)).abs() <= 1e-6);
            }
        }
    }
}
