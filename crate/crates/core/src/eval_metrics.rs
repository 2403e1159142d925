//! Absolute relative error, distance-binned error, attack and transfer
//! reports, and the linear perturbation analyses (summation, gamma sweep).

use std::fmt;
use std::path::Path;

use crate::attack::{craft, target_loss, AttackConfig, Perturbation};
use crate::depth_net::{Architecture, DepthModel, DepthRange};
use crate::error::{config_err, numerics_err, shape_err, Error, Result};
use crate::scenegen::Scene;
use crate::targets::{build_target, TargetSpec};
use crate::tensor::Tensor;

/// Width of the distance bins, in meters.
pub const BIN_WIDTH: f64 = 5.0;

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    pred.expect_same_shape(target)?;
    if target.data().iter().any(|&t| !(t > 0.0)) {
        return Err(numerics_err!("target depth must be strictly positive"));
    }
    Ok(())
}

/// `mean(|pred - target| / target)`.
pub fn are(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p as f64 - t as f64).abs() / t as f64)
        .sum();
    Ok(sum / pred.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub start: f64,
    pub end: f64,
    /// `None` when no target pixel falls in the bin.
    pub are: Option<f64>,
    pub pixels: usize,
}

/// ARE per `width`-meter bin of target depth. Bins sit on multiples of
/// `width`, trimmed to `range`; the last bin is closed on the right.
pub fn binned_are(pred: &Tensor, target: &Tensor, width: f64, range: DepthRange) -> Result<Vec<Bin>> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(config_err!("bin width must be positive, got {width}"));
    }
    check_pair(pred, target)?;
    let (lo, hi) = (range.min as f64, range.max as f64);
    let first = (lo / width).floor() as i64;
    let last = ((hi / width).ceil() as i64 - 1).max(first);
    let n = (last - first + 1) as usize;
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let k = ((t as f64 / width).floor() as i64).clamp(first, last) - first;
        sums[k as usize] += (p as f64 - t as f64).abs() / t as f64;
        counts[k as usize] += 1;
    }
    Ok((0..n)
        .map(|k| {
            let b = (first + k as i64) as f64;
            Bin {
                start: (b * width).max(lo),
                end: ((b + 1.0) * width).min(hi),
                are: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
                pixels: counts[k],
            }
        })
        .collect())
}

/// Mean, median and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Self {
            mean,
            median,
            std: var.sqrt(),
        }
    }
}

/// One attacked scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub scene_id: usize,
    pub baseline_are: f64,
    pub final_are: f64,
    pub linf: f64,
    /// Mean |v| per element.
    pub l1: f64,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub bins: Vec<Bin>,
}

/// All scenes attacked with one budget and one target kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub xi: f64,
    pub target: String,
    pub rows: Vec<SceneResult>,
}

impl AttackReport {
    pub fn final_stats(&self) -> Stats {
        Stats::of(&self.rows.iter().map(|r| r.final_are).collect::<Vec<_>>())
    }

    pub fn baseline_stats(&self) -> Stats {
        Stats::of(&self.rows.iter().map(|r| r.baseline_are).collect::<Vec<_>>())
    }
}

/// Builds the target, crafts against it and measures the outcome.
pub fn attack_scene(
    model: &DepthModel,
    scene_id: usize,
    scene: &Scene,
    spec: &TargetSpec,
    preset: Option<&Tensor>,
    cfg: &AttackConfig,
) -> Result<(SceneResult, Perturbation)> {
    let target = build_target(model, scene, spec, preset)?;
    if let Some(w) = &target.warning {
        log::warn!("scene {scene_id}: {w}");
    }
    let zero = Tensor::zeros(scene.image.shape().to_vec());
    let baseline_are = target_loss(model, &scene.image, &zero, &target.depth)?;
    let p = craft(model, &scene.image, &target.depth, cfg)?;
    let pred = model.predict(&perturbed(&scene.image, &p.v, 1.0)?)?;
    let bins = binned_are(&pred, &target.depth, BIN_WIDTH, model.range())?;
    let row = SceneResult {
        scene_id,
        baseline_are,
        final_are: p.final_loss,
        linf: p.linf(),
        l1: p.l1(),
        steps: p.steps,
        loss_curve: p.loss_curve.clone(),
        bins,
    };
    Ok((row, p))
}

/// `clamp(x + gamma * v, 0, 1)`.
pub fn perturbed(x: &Tensor, v: &Tensor, gamma: f64) -> Result<Tensor> {
    let g = gamma as f32;
    x.zip_map(v, |a, b| (a + g * b).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferMode {
    /// Crafted on the evaluated model.
    SelfAttack,
    /// Crafted on the other model.
    Cross,
    /// Sum of the perturbations crafted on each model.
    Sum,
    /// Crafted jointly on both models.
    Both,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::SelfAttack => "Self",
            TransferMode::Cross => "Cross",
            TransferMode::Sum => "Sum",
            TransferMode::Both => "Both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferCell {
    pub source: String,
    pub eval: Architecture,
    pub mode: TransferMode,
    pub xi: f64,
    pub values: Vec<f64>,
    pub stats: Stats,
}

impl TransferCell {
    pub fn new(source: impl Into<String>, eval: Architecture, mode: TransferMode, xi: f64, values: Vec<f64>) -> Self {
        let stats = Stats::of(&values);
        Self {
            source: source.into(),
            eval,
            mode,
            xi,
            values,
            stats,
        }
    }
}

/// ARE of `eval_model` on `x + v` against `target`, which must be built
/// from `eval_model`'s own prediction.
pub fn transfer_eval(eval_model: &DepthModel, x: &Tensor, v: &Tensor, target: &Tensor) -> Result<f64> {
    if x.shape() != v.shape() {
        return Err(shape_err!("perturbation {:?} does not match image {:?}", v.shape(), x.shape()));
    }
    target_loss(eval_model, x, v, target)
}

/// `v1 + v2`, deliberately not re-clipped. The bound recorded is the
/// triangle-inequality sum; [`Perturbation::linf`] gives the actual norm.
pub fn sum_perturbations(a: &Perturbation, b: &Perturbation) -> Result<Perturbation> {
    let v = a.v.zip_map(&b.v, |x, y| x + y)?;
    Ok(Perturbation {
        v,
        xi: a.xi + b.xi,
        steps: 0,
        final_loss: f64::NAN,
        loss_curve: Vec::new(),
    })
}

/// Predictions on `x + gamma * v` for every gamma, in order.
pub fn gamma_sweep(model: &DepthModel, x: &Tensor, v: &Tensor, gammas: &[f64]) -> Result<Vec<Tensor>> {
    gammas
        .iter()
        .map(|&g| {
            if !g.is_finite() {
                return Err(config_err!("gamma must be finite, got {g}"));
            }
            model.predict(&perturbed(x, v, g)?)
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `scene_id,xi,target_kind,baseline_are,final_are,linf,l1,steps`
pub fn write_report_csv(path: impl AsRef<Path>, reports: &[AttackReport]) -> Result<()> {
    let rows = reports.iter().flat_map(|rep| {
        rep.rows.iter().map(move |r| {
            vec![
                r.scene_id.to_string(),
                rep.xi.to_string(),
                rep.target.clone(),
                r.baseline_are.to_string(),
                r.final_are.to_string(),
                r.linf.to_string(),
                r.l1.to_string(),
                r.steps.to_string(),
            ]
        })
    });
    write_rows(
        path.as_ref(),
        &["scene_id", "xi", "target_kind", "baseline_are", "final_are", "linf", "l1", "steps"],
        rows,
    )
}

/// `scene_id,xi,target_kind,bin_start,bin_end,are,pixel_count`; empty bins
/// carry an empty `are`.
pub fn write_bins_csv(path: impl AsRef<Path>, reports: &[AttackReport]) -> Result<()> {
    let rows = reports.iter().flat_map(|rep| {
        rep.rows.iter().flat_map(move |r| {
            r.bins.iter().map(move |b| {
                vec![
                    r.scene_id.to_string(),
                    rep.xi.to_string(),
                    rep.target.clone(),
                    b.start.to_string(),
                    b.end.to_string(),
                    b.are.map(|a| a.to_string()).unwrap_or_default(),
                    b.pixels.to_string(),
                ]
            })
        })
    });
    write_rows(
        path.as_ref(),
        &["scene_id", "xi", "target_kind", "bin_start", "bin_end", "are", "pixel_count"],
        rows,
    )
}

/// `source,eval,mode,xi,mean,median,std`
pub fn write_transfer_csv(path: impl AsRef<Path>, cells: &[TransferCell]) -> Result<()> {
    let rows = cells.iter().map(|c| {
        vec![
            c.source.clone(),
            c.eval.to_string(),
            c.mode.to_string(),
            c.xi.to_string(),
            c.stats.mean.to_string(),
            c.stats.median.to_string(),
            c.stats.std.to_string(),
        ]
    });
    write_rows(path.as_ref(), &["source", "eval", "mode", "xi", "mean", "median", "std"], rows)
}
