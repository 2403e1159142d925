//! Subcommands of the `advdepth` binary. Every command writes its resolved
//! configuration to `<out>/config.txt` next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{craft, craft_joint, Perturbation};
use crate::config::{Defense, RunConfig, Split};
use crate::defenses::{adversarial_train, eval_under_blur, gaussian_blur, write_defense_csv, DefenseRow};
use crate::depth_net::{train_with_history, DepthModel, DepthRange};
use crate::error::{config_err, Error, Result};
use crate::eval_metrics::{
    are, attack_scene, binned_are, gamma_sweep, sum_perturbations, transfer_eval, write_bins_csv,
    write_report_csv, write_transfer_csv, AttackReport, Stats, TransferCell, TransferMode, BIN_WIDTH,
};
use crate::scenegen::{load_dataset, make_dataset, save_dataset, Dataset, Scene};
use crate::targets::{build_target, depth_visual, Target, TargetSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Attack,
    Eval,
    Transfer,
    Defend,
    Sweep,
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    match cmd {
        Command::GenData => gen_data(cfg, out),
        Command::Train => train(cfg, out),
        Command::Attack => attack(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Transfer => transfer(cfg, out),
        Command::Defend => defend(cfg, out),
        Command::Sweep => sweep(cfg, out),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| config_err!("this command needs 'dataset = <dir>'"))?;
    load_dataset(dir)
}

fn models(cfg: &RunConfig, max: usize) -> Result<Vec<DepthModel>> {
    if cfg.models.is_empty() || cfg.models.len() > max {
        return Err(config_err!("expected 1 to {max} entries in 'models', got {}", cfg.models.len()));
    }
    cfg.models.iter().map(DepthModel::load).collect()
}

fn scenes<'a>(ds: &'a Dataset, cfg: &RunConfig) -> Result<&'a [Scene]> {
    let all = match cfg.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    match cfg.scenes {
        None => Ok(all),
        Some(n) if n >= 1 && n <= all.len() => Ok(&all[..n]),
        Some(n) => Err(config_err!("asked for {n} scenes but the {} split has {}", cfg.split, all.len())),
    }
}

/// The other image a preset target borrows its prediction from: the given
/// index, or a seeded random scene different from `i`.
pub fn preset_image<'a>(scenes: &'a [Scene], i: usize, spec: &TargetSpec, seed: u64) -> Result<Option<&'a Tensor>> {
    let TargetSpec::Preset(which) = spec else {
        return Ok(None);
    };
    let j = match *which {
        Some(j) if j < scenes.len() && j != i => j,
        Some(j) => return Err(config_err!("preset scene {j} is out of range or the attacked scene itself")),
        None => {
            if scenes.len() < 2 {
                return Err(config_err!("preset targets need at least two scenes"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let j = rng.gen_range(0..scenes.len() - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        }
    };
    Ok(Some(&scenes[j].image))
}

/// File-system friendly form of a target spec.
fn slug(spec: &TargetSpec) -> String {
    spec.to_string()
        .chars()
        .map(|c| match c {
            ':' => '_',
            '+' => 'p',
            '-' => 'm',
            '%' => 'f',
            c => c,
        })
        .collect()
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = make_dataset(cfg.seed, cfg.n_train, cfg.n_test, &cfg.scene)?;
    save_dataset(out, &ds)?;
    log::info!("wrote {} train and {} test scenes to {}", ds.train.len(), ds.test.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let init = DepthModel::new(cfg.architecture, DepthRange::default(), cfg.model_seed);
    let (model, history) = train_with_history(&init, &ds.train, &cfg.train)?;
    model.save(out)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(csv, "{e},{l}");
    }
    write_text(&out.join("train_loss.csv"), &csv)?;
    let held_out: Vec<f64> = ds
        .test
        .iter()
        .map(|s| are(&model.predict(&s.image)?, &s.depth))
        .collect::<Result<_>>()?;
    log::info!("{}: held-out ARE {:.4}", cfg.architecture, Stats::of(&held_out).mean);
    Ok(())
}

/// Runs every (xi, target) pair over `scenes` and returns the reports.
pub fn attack_campaign(
    model: &DepthModel,
    scenes: &[Scene],
    cfg: &RunConfig,
    mut keep: impl FnMut(&AttackReport, usize, &Perturbation) -> Result<()>,
) -> Result<Vec<AttackReport>> {
    let mut reports = Vec::new();
    for spec in &cfg.targets {
        for k in 0..cfg.xi.len() {
            let mut rep = AttackReport {
                xi: cfg.xi[k],
                target: spec.to_string(),
                rows: Vec::with_capacity(scenes.len()),
            };
            for (i, s) in scenes.iter().enumerate() {
                let mut acfg = cfg.attack(k);
                acfg.constraint = cfg.constraint.resolve(s)?;
                let preset = preset_image(scenes, i, spec, cfg.seed)?;
                let (row, p) = attack_scene(model, i, s, spec, preset, &acfg)?;
                rep.rows.push(row);
                keep(&rep, i, &p)?;
            }
            log::info!(
                "{} {} xi {}: median final ARE {:.4}",
                model.architecture(),
                spec,
                rep.xi,
                rep.final_stats().median
            );
            reports.push(rep);
        }
    }
    Ok(reports)
}

fn attack(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let model = models(cfg, 1)?.remove(0);
    let scenes = scenes(&ds, cfg)?;
    let reports = attack_campaign(&model, scenes, cfg, |rep, i, p| {
        if !cfg.save_perturbations {
            return Ok(());
        }
        let spec: TargetSpec = rep.target.parse()?;
        let dir = out.join("perturbations").join(slug(&spec)).join(format!("xi_{}", rep.xi));
        p.save(dir, &format!("scene_{i:04}"))
    })?;
    write_report_csv(out.join("report.csv"), &reports)?;
    write_bins_csv(out.join("bins.csv"), &reports)
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let models = models(cfg, usize::MAX)?;
    let scenes = scenes(&ds, cfg)?;
    let mut rows = String::from("model,split,scene_id,are\n");
    let mut bins = String::from("model,scene_id,bin_start,bin_end,are,pixel_count\n");
    for m in &models {
        let mut all = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            let pred = m.predict(&s.image)?;
            let a = are(&pred, &s.depth)?;
            all.push(a);
            let _ = writeln!(rows, "{},{},{i},{a}", m.architecture(), cfg.split);
            for b in binned_are(&pred, &s.depth, BIN_WIDTH, m.range())? {
                let a = b.are.map(|a| a.to_string()).unwrap_or_default();
                let _ = writeln!(bins, "{},{i},{},{},{a},{}", m.architecture(), b.start, b.end, b.pixels);
            }
        }
        log::info!("{}: mean ARE {:.4} over {} scenes", m.architecture(), Stats::of(&all).mean, all.len());
    }
    write_text(&out.join("eval.csv"), &rows)?;
    write_text(&out.join("eval_bins.csv"), &bins)
}

/// Self, and with two models also Cross, Sum and Both, cells for every
/// (xi, target) pair.
pub fn transfer_cells(models: &[DepthModel], scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<TransferCell>> {
    let mut cells = Vec::new();
    let names: Vec<String> = models.iter().map(|m| m.architecture().to_string()).collect();
    for spec in &cfg.targets {
        for k in 0..cfg.xi.len() {
            let acfg = cfg.attack(k);
            let n = models.len();
            let mut own = vec![Vec::new(); n];
            let mut cross = vec![Vec::new(); n];
            let mut summed = vec![Vec::new(); n];
            let mut joint = vec![Vec::new(); n];
            for (i, s) in scenes.iter().enumerate() {
                let preset = preset_image(scenes, i, spec, cfg.seed)?;
                let targets: Vec<Target> = models
                    .iter()
                    .map(|m| build_target(m, s, spec, preset))
                    .collect::<Result<_>>()?;
                let perts: Vec<Perturbation> = models
                    .iter()
                    .zip(&targets)
                    .map(|(m, t)| craft(m, &s.image, &t.depth, &acfg))
                    .collect::<Result<_>>()?;
                for e in 0..n {
                    own[e].push(perts[e].final_loss);
                }
                if n == 2 {
                    let sum = sum_perturbations(&perts[0], &perts[1])?;
                    let refs: Vec<&DepthModel> = models.iter().collect();
                    let depths: Vec<Tensor> = targets.iter().map(|t| t.depth.clone()).collect();
                    let both = craft_joint(&refs, &s.image, &depths, &acfg)?;
                    for e in 0..2 {
                        let (m, t) = (&models[e], &targets[e].depth);
                        cross[e].push(transfer_eval(m, &s.image, &perts[1 - e].v, t)?);
                        summed[e].push(transfer_eval(m, &s.image, &sum.v, t)?);
                        joint[e].push(transfer_eval(m, &s.image, &both.v, t)?);
                    }
                }
            }
            let xi = acfg.xi;
            for e in 0..n {
                let arch = models[e].architecture();
                cells.push(TransferCell::new(&names[e], arch, TransferMode::SelfAttack, xi, own[e].clone()));
                if n == 2 {
                    let other = &names[1 - e];
                    cells.push(TransferCell::new(other, arch, TransferMode::Cross, xi, cross[e].clone()));
                    let both_names = names.join("+");
                    cells.push(TransferCell::new(&both_names, arch, TransferMode::Sum, xi, summed[e].clone()));
                    cells.push(TransferCell::new(&both_names, arch, TransferMode::Both, xi, joint[e].clone()));
                }
            }
            log::info!("transfer {spec} xi {xi}: {} scenes", scenes.len());
        }
    }
    Ok(cells)
}

fn transfer(cfg: &RunConfig, out: &Path) -> Result<()> {
    let models = models(cfg, 2)?;
    let ds = dataset(cfg)?;
    let cells = transfer_cells(&models, scenes(&ds, cfg)?, cfg)?;
    write_transfer_csv(out.join("transfer.csv"), &cells)
}

fn mean_clean_are(model: &DepthModel, scenes: &[Scene], blur: Option<&crate::defenses::BlurConfig>) -> Result<f64> {
    let mut all = Vec::with_capacity(scenes.len());
    for s in scenes {
        let img = match blur {
            Some(b) => gaussian_blur(&s.image, b)?,
            None => s.image.clone(),
        };
        all.push(are(&model.predict(&img)?, &s.depth)?);
    }
    Ok(Stats::of(&all).mean)
}

/// Attack outcome per defense, evaluated on the same scenes and targets.
pub fn defense_rows(
    model: &DepthModel,
    train: &[Scene],
    scenes: &[Scene],
    cfg: &RunConfig,
    adv_out: Option<&Path>,
) -> Result<Vec<DefenseRow>> {
    let adv_model = if cfg.defenses.contains(&Defense::AdvTrain) {
        let n = cfg.adv_scenes.min(train.len());
        let attacks: Vec<_> = (0..cfg.xi.len())
            .map(|k| {
                let mut a = cfg.attack(k);
                a.steps = cfg.adv_pool_steps;
                a
            })
            .collect();
        let m = adversarial_train(model, &train[..n], &attacks, &cfg.adv)?;
        if let Some(dir) = adv_out {
            m.save(dir)?;
        }
        Some(m)
    } else {
        None
    };
    let mut rows = Vec::new();
    for spec in &cfg.targets {
        for k in 0..cfg.xi.len() {
            let acfg = cfg.attack(k);
            let (mut none, mut blur, mut adv) = (Vec::new(), Vec::new(), Vec::new());
            for (i, s) in scenes.iter().enumerate() {
                let preset = preset_image(scenes, i, spec, cfg.seed)?;
                let t = build_target(model, s, spec, preset)?;
                let p = craft(model, &s.image, &t.depth, &acfg)?;
                none.push(p.final_loss);
                if cfg.defenses.contains(&Defense::Blur) {
                    blur.push(eval_under_blur(model, &s.image, &p.v, &t.depth, &cfg.blur)?);
                }
                if let Some(m) = &adv_model {
                    let t = build_target(m, s, spec, preset)?;
                    adv.push(craft(m, &s.image, &t.depth, &acfg)?.final_loss);
                }
            }
            let row = |defense: Defense, values: &[f64], clean: f64| DefenseRow {
                defense: defense.to_string(),
                xi: acfg.xi,
                target: spec.to_string(),
                stats: Stats::of(values),
                clean_are: clean,
            };
            for d in &cfg.defenses {
                rows.push(match d {
                    Defense::None => row(*d, &none, mean_clean_are(model, scenes, None)?),
                    Defense::Blur => row(*d, &blur, mean_clean_are(model, scenes, Some(&cfg.blur))?),
                    Defense::AdvTrain => {
                        let m = adv_model.as_ref().expect("trained above");
                        row(*d, &adv, mean_clean_are(m, scenes, None)?)
                    }
                });
            }
        }
    }
    Ok(rows)
}

fn defend(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let model = models(cfg, 1)?.remove(0);
    let rows = defense_rows(&model, &ds.train, scenes(&ds, cfg)?, cfg, Some(&out.join("adv_model")))?;
    write_defense_csv(out.join("defense.csv"), &rows)
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let model = models(cfg, 1)?.remove(0);
    let scenes = scenes(&ds, cfg)?;
    let mut csv = String::from("scene_id,xi,target_kind,gamma,are_target,are_clean\n");
    for spec in &cfg.targets {
        for k in 0..cfg.xi.len() {
            let acfg = cfg.attack(k);
            for (i, s) in scenes.iter().enumerate() {
                let preset = preset_image(scenes, i, spec, cfg.seed)?;
                let t = build_target(&model, s, spec, preset)?;
                let p = craft(&model, &s.image, &t.depth, &acfg)?;
                let clean = model.predict(&s.image)?;
                let dir: PathBuf = out
                    .join("sweep")
                    .join(slug(spec))
                    .join(format!("xi_{}", acfg.xi))
                    .join(format!("scene_{i:04}"));
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (g, d) in cfg.gammas.iter().zip(gamma_sweep(&model, &s.image, &p.v, &cfg.gammas)?) {
                    d.save_dtns(dir.join(format!("gamma_{g}.dtns")))?;
                    crate::pnm::write(dir.join(format!("gamma_{g}.pgm")), &depth_visual(&d, model.range())?, None)?;
                    let _ = writeln!(
                        csv,
                        "{i},{},{spec},{g},{},{}",
                        acfg.xi,
                        are(&d, &t.depth)?,
                        are(&d, &clean)?
                    );
                }
            }
        }
    }
    write_text(&out.join("sweep.csv"), &csv)
}
