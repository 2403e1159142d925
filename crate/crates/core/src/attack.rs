//! Clipped iterative gradient descent on the normalized L1 target loss.
//!
//! Starting from `v = 0`, every step clips `v` to `[-xi, xi]`, zeroes the
//! forbidden region, evaluates `mean(|f(clamp(x + v)) - d_t| / d_t)` and
//! moves `v` against its gradient. A last clip and mask follow the loop.

use std::path::Path;

use crate::depth_net::{relative_l1, DepthModel};
use crate::error::{config_err, numerics_err, shape_err, Error, Result};
use crate::graph::Graph;
use crate::pnm::{self, Raster};
use crate::targets::Mask;
use crate::tensor::{clip_inf, Tensor};

/// Default L-infinity budgets.
pub const XI_GRID: [f64; 4] = [2e-3, 5e-3, 1e-2, 2e-2];
/// Default step sizes, paired with [`XI_GRID`].
pub const ETA_GRID: [f64; 4] = [0.1, 1.0, 3.0, 5.0];
pub const DEFAULT_STEPS: usize = 500;
/// Gain of the perturbation visualizations.
pub const VIS_GAIN: f32 = 10.0;

/// Step size for `xi`: the grid entry closest in log scale.
pub fn default_eta(xi: f64) -> f64 {
    let mut best = (f64::INFINITY, ETA_GRID[0]);
    for (x, e) in XI_GRID.iter().zip(ETA_GRID) {
        let d = (x.ln() - xi.max(f64::MIN_POSITIVE).ln()).abs();
        if d < best.0 {
            best = (d, e);
        }
    }
    best.1
}

/// Where the perturbation may be non-zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Constraint {
    #[default]
    None,
    InsideMask(Mask),
    OutsideMask(Mask),
}

impl Constraint {
    fn check(&self, h: usize, w: usize) -> Result<()> {
        match self {
            Constraint::None => Ok(()),
            Constraint::InsideMask(m) | Constraint::OutsideMask(m) => m.check_dims(h, w),
        }
    }

    /// Whether pixel `i` of the `[H,W]` grid may carry perturbation.
    #[inline]
    pub fn allows(&self, i: usize) -> bool {
        match self {
            Constraint::None => true,
            Constraint::InsideMask(m) => m.data[i],
            Constraint::OutsideMask(m) => !m.data[i],
        }
    }

    /// Writes exact zeros into the forbidden region of a `[C,H,W]` tensor.
    pub fn apply(&self, v: &mut Tensor) {
        if matches!(self, Constraint::None) {
            return;
        }
        let plane = v.shape()[1] * v.shape()[2];
        for (k, x) in v.data_mut().iter_mut().enumerate() {
            if !self.allows(k % plane) {
                *x = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub xi: f64,
    pub eta: f64,
    pub steps: usize,
    pub constraint: Constraint,
    /// Recorded for provenance; the method itself is deterministic.
    pub seed: u64,
}

impl AttackConfig {
    /// Default step size and step count for budget `xi`.
    pub fn new(xi: f64) -> Self {
        Self {
            xi,
            eta: default_eta(xi),
            steps: DEFAULT_STEPS,
            constraint: Constraint::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(config_err!("xi must be a finite non-negative bound, got {}", self.xi));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(config_err!("eta must be finite and non-negative, got {}", self.eta));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub v: Tensor,
    pub xi: f64,
    pub steps: usize,
    /// Loss at the returned `v`.
    pub final_loss: f64,
    /// Loss before each update.
    pub loss_curve: Vec<f64>,
}

impl Perturbation {
    pub fn zeros_like(x: &Tensor) -> Self {
        Self {
            v: Tensor::zeros(x.shape().to_vec()),
            xi: 0.0,
            steps: 0,
            final_loss: f64::NAN,
            loss_curve: Vec::new(),
        }
    }

    pub fn linf(&self) -> f64 {
        self.v.max_abs()
    }

    /// Mean |v| per element.
    pub fn l1(&self) -> f64 {
        self.v.mean_abs()
    }

    /// Writes `<stem>.dtns` and an amplified `<stem>.ppm`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.v.save_dtns(dir.join(format!("{stem}.dtns")))?;
        let (c, h, w) = self.v.chw()?;
        let plane = h * w;
        let mut data = vec![0u8; plane * 3];
        for i in 0..plane {
            for ch in 0..3 {
                let x = self.v.data()[(ch % c) * plane + i];
                data[i * 3 + ch] = ((0.5 + VIS_GAIN * x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let raster = Raster {
            width: w,
            height: h,
            channels: 3,
            data,
        };
        let note = format!("perturbation amplified x{VIS_GAIN} around mid-gray, xi {}", self.xi);
        pnm::write(dir.join(format!("{stem}.ppm")), &raster, Some(&note))
    }
}

/// One weighted loss term of an attack objective.
struct Term<'a> {
    model: &'a DepthModel,
    target: &'a Tensor,
    weight: f64,
}

fn check_inputs(x: &Tensor, target: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = match *x.shape() {
        [3, h, w] => (h, w),
        _ => return Err(shape_err!("image must be [3,H,W], got {:?}", x.shape())),
    };
    if target.shape() != [1, h, w] {
        return Err(shape_err!("target {:?} does not match image {:?}", target.shape(), x.shape()));
    }
    if target.data().iter().any(|&d| !(d > 0.0)) {
        return Err(numerics_err!("target depth must be strictly positive"));
    }
    Ok((h, w))
}

/// Weighted objective and, when `grad` is set, its gradient with respect to v.
fn objective(terms: &[Term], x: &Tensor, v: &Tensor, grad: bool) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut g_total = if grad { vec![0.0; v.len()] } else { Vec::new() };
    for t in terms {
        let mut g = Graph::<f32>::new();
        let params = t.model.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let vv = g.leaf(v.clone(), grad)?;
        let dt = g.constant(t.target.clone())?;
        let sum = g.add(xv, vv)?;
        let img = g.clamp(sum, 0.0, 1.0);
        let pred = t.model.forward_graph(&mut g, &params, img)?;
        let loss = relative_l1(&mut g, pred, dt, dt)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(numerics_err!("loss is {value}"));
        }
        total += t.weight * value;
        if grad {
            g.backward(loss)?;
            if let Some(gv) = g.grad_f64(vv) {
                for (acc, d) in g_total.iter_mut().zip(gv) {
                    *acc += t.weight * d;
                }
            }
        }
    }
    Ok((total, g_total))
}

fn run(terms: &[Term], x: &Tensor, cfg: &AttackConfig) -> Result<Perturbation> {
    cfg.validate()?;
    for t in terms {
        let (h, w) = check_inputs(x, t.target)?;
        cfg.constraint.check(h, w)?;
        t.model.check_input_shape(x.shape())?;
    }
    let mut v = Tensor::zeros(x.shape().to_vec());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        v = clip_inf(&v, cfg.xi)?;
        cfg.constraint.apply(&mut v);
        let (loss, grad) = objective(terms, x, &v, true).map_err(|e| match e {
            Error::Numerics(m) => numerics_err!("step {step}: {m}"),
            e => e,
        })?;
        curve.push(loss);
        for (vi, gi) in v.data_mut().iter_mut().zip(&grad) {
            *vi = (*vi as f64 - cfg.eta * gi) as f32;
        }
    }
    v = clip_inf(&v, cfg.xi)?;
    cfg.constraint.apply(&mut v);
    let (final_loss, _) = objective(terms, x, &v, false)?;
    Ok(Perturbation {
        v,
        xi: cfg.xi,
        steps: cfg.steps,
        final_loss,
        loss_curve: curve,
    })
}

/// `mean(|f(clamp(x + v)) - d_t| / d_t)`.
pub fn target_loss(model: &DepthModel, x: &Tensor, v: &Tensor, target: &Tensor) -> Result<f64> {
    check_inputs(x, target)?;
    x.expect_same_shape(v)?;
    let terms = [Term {
        model,
        target,
        weight: 1.0,
    }];
    objective(&terms, x, v, false).map(|(l, _)| l)
}

/// Targeted perturbation of `x` toward `target` for a frozen `model`,
/// honouring `cfg.constraint`.
pub fn craft(model: &DepthModel, x: &Tensor, target: &Tensor, cfg: &AttackConfig) -> Result<Perturbation> {
    run(
        &[Term {
            model,
            target,
            weight: 1.0,
        }],
        x,
        cfg,
    )
}

/// [`craft`] for a spatially constrained configuration.
pub fn craft_constrained(
    model: &DepthModel,
    x: &Tensor,
    target: &Tensor,
    cfg: &AttackConfig,
) -> Result<Perturbation> {
    if matches!(cfg.constraint, Constraint::None) {
        return Err(config_err!("constrained attack needs an InsideMask or OutsideMask constraint"));
    }
    craft(model, x, target, cfg)
}

/// One perturbation minimizing the unweighted mean of the per-model losses.
/// `targets[i]` is the target for `models[i]`.
pub fn craft_joint(
    models: &[&DepthModel],
    x: &Tensor,
    targets: &[Tensor],
    cfg: &AttackConfig,
) -> Result<Perturbation> {
    if models.is_empty() || models.len() != targets.len() {
        return Err(config_err!(
            "joint attack needs one target per model, got {} models and {} targets",
            models.len(),
            targets.len()
        ));
    }
    let weight = 1.0 / models.len() as f64;
    let terms: Vec<Term> = models
        .iter()
        .zip(targets)
        .map(|(model, target)| Term {
            model,
            target,
            weight,
        })
        .collect();
    run(&terms, x, cfg)
}

/// Baseline that descends on the target loss while ascending on the loss
/// against the clean prediction.
pub fn dag_baseline(model: &DepthModel, x: &Tensor, target: &Tensor, cfg: &AttackConfig) -> Result<Perturbation> {
    let clean = model.predict(x)?;
    run(
        &[
            Term {
                model,
                target,
                weight: 1.0,
            },
            Term {
                model,
                target: &clean,
                weight: -1.0,
            },
        ],
        x,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_net::{Architecture, DepthRange};

    fn setup() -> (DepthModel, Tensor) {
        let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 4);
        let x = Tensor::from_fn(vec![3, 16, 16], |i| ((i * 37 % 101) as f32) / 101.0);
        (m, x)
    }

    #[test]
    fn loss_examples() {
        let (m, x) = setup();
        let d = m.predict(&x).unwrap();
        let v = Tensor::zeros(x.shape().to_vec());
        assert_eq!(target_loss(&m, &x, &v, &d).unwrap(), 0.0);
        let up = d.map(|z| z * 1.1);
        assert!((target_loss(&m, &x, &v, &up).unwrap() - 0.1 / 1.1).abs() < 1e-6);
        let down = d.map(|z| z * 0.9);
        assert!((target_loss(&m, &x, &v, &down).unwrap() - 0.1 / 0.9).abs() < 1e-6);
        let zero = d.map(|_| 0.0);
        assert!(matches!(target_loss(&m, &x, &v, &zero), Err(Error::Numerics(_))));
    }

    #[test]
    fn degenerate_runs() {
        let (m, x) = setup();
        let t = m.predict(&x).unwrap().map(|z| z * 1.1);
        let mut cfg = AttackConfig::new(2e-2);
        cfg.steps = 0;
        let p = craft(&m, &x, &t, &cfg).unwrap();
        assert_eq!(p.linf(), 0.0);
        assert_eq!(p.final_loss, target_loss(&m, &x, &p.v, &t).unwrap());
        cfg.steps = 5;
        cfg.eta = 0.0;
        assert_eq!(craft(&m, &x, &t, &cfg).unwrap().linf(), 0.0);
    }

    #[test]
    fn budget_and_masks_hold() {
        let (m, x) = setup();
        let t = m.predict(&x).unwrap().map(|z| z * 1.1);
        let mut cfg = AttackConfig::new(2e-3);
        cfg.steps = 4;
        cfg.eta = 1e3;
        let p = craft(&m, &x, &t, &cfg).unwrap();
        assert!(p.linf() <= 2e-3 && p.linf() > 0.0);
        assert!(p.final_loss < p.loss_curve[0]);

        let mask = Mask::from_fn(16, 16, |r, c| r < 8 && c % 3 == 0);
        cfg.constraint = Constraint::InsideMask(mask.clone());
        let p = craft_constrained(&m, &x, &t, &cfg).unwrap();
        for (k, &v) in p.v.data().iter().enumerate() {
            if !mask.data[k % 256] {
                assert_eq!(v.to_bits(), 0);
            }
        }
        cfg.constraint = Constraint::InsideMask(Mask::filled(16, 16, false));
        assert_eq!(craft(&m, &x, &t, &cfg).unwrap().linf(), 0.0);

        let free = AttackConfig {
            constraint: Constraint::None,
            ..cfg.clone()
        };
        cfg.constraint = Constraint::OutsideMask(Mask::filled(16, 16, false));
        assert_eq!(craft(&m, &x, &t, &cfg).unwrap(), craft(&m, &x, &t, &free).unwrap());
        assert!(craft_constrained(&m, &x, &t, &free).is_err());
    }

    #[test]
    fn joint_reductions() {
        let (m, x) = setup();
        let t = m.predict(&x).unwrap().map(|z| z * 0.9);
        let mut cfg = AttackConfig::new(5e-3);
        cfg.steps = 3;
        cfg.eta = 50.0;
        let single = craft(&m, &x, &t, &cfg).unwrap();
        assert_eq!(craft_joint(&[&m], &x, &[t.clone()], &cfg).unwrap(), single);
        let pair = craft_joint(&[&m, &m], &x, &[t.clone(), t.clone()], &cfg).unwrap();
        assert_eq!(pair.v, single.v);
        assert!(pair.linf() <= 5e-3);
        assert!(craft_joint(&[&m, &m], &x, &[t], &cfg).is_err());
    }

    #[test]
    fn dag_respects_budget() {
        let (m, x) = setup();
        let t = m.predict(&x).unwrap().map(|z| z * 1.1);
        let mut cfg = AttackConfig::new(1e-2);
        cfg.steps = 0;
        assert_eq!(dag_baseline(&m, &x, &t, &cfg).unwrap().linf(), 0.0);
        cfg.steps = 3;
        cfg.eta = 1e3;
        assert!(dag_baseline(&m, &x, &t, &cfg).unwrap().linf() <= 1e-2);
    }

    #[test]
    fn default_eta_follows_grid() {
        for (x, e) in XI_GRID.iter().zip(ETA_GRID) {
            assert_eq!(default_eta(*x), e);
        }
    }

    #[test]
    fn visualization_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Perturbation::zeros_like(&Tensor::zeros(vec![3, 8, 8]));
        p.v.data_mut()[0] = 0.02;
        p.save(dir.path(), "v").unwrap();
        let r = pnm::read(dir.path().join("v.ppm")).unwrap();
        assert_eq!(r.data[0], 179);
        assert_eq!(r.data[1], 128);
        assert_eq!(Tensor::load_dtns(dir.path().join("v.dtns")).unwrap(), p.v);
    }
}
