//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! rejected so typos cannot silently fall back to defaults. Lists are comma
//! separated; scene parameters take a `scene.` prefix.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{default_eta, AttackConfig, Constraint, DEFAULT_STEPS, XI_GRID};
use crate::defenses::{AdvTrainConfig, BlurConfig};
use crate::depth_net::{Architecture, TrainConfig};
use crate::error::{config_err, Error, Result};
use crate::scenegen::{Category, Scene, SceneParams, DEFAULT_TEST, DEFAULT_TRAIN};
use crate::targets::{category_mask, instance_mask, largest_instance, Mask, TargetSpec};

/// Region a constrained attack refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Category(Category),
    LargestInstance,
}

impl Region {
    pub fn mask(&self, scene: &Scene) -> Result<Mask> {
        match self {
            Region::Category(c) => Ok(category_mask(&scene.semantic, *c)),
            Region::LargestInstance => {
                let id = largest_instance(scene)
                    .ok_or_else(|| config_err!("scene {} has no instances", scene.seed))?;
                instance_mask(&scene.instance, &[id])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintMode {
    #[default]
    None,
    Inside(Region),
    Outside(Region),
}

impl ConstraintMode {
    /// The concrete constraint for one scene.
    pub fn resolve(&self, scene: &Scene) -> Result<Constraint> {
        Ok(match self {
            ConstraintMode::None => Constraint::None,
            ConstraintMode::Inside(r) => Constraint::InsideMask(r.mask(scene)?),
            ConstraintMode::Outside(r) => Constraint::OutsideMask(r.mask(scene)?),
        })
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (side, region) = match self {
            ConstraintMode::None => return f.write_str("none"),
            ConstraintMode::Inside(r) => ("inside", r),
            ConstraintMode::Outside(r) => ("outside", r),
        };
        match region {
            Region::Category(c) => write!(f, "{side}:{c}"),
            Region::LargestInstance => write!(f, "{side}:largest"),
        }
    }
}

impl FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "none" {
            return Ok(ConstraintMode::None);
        }
        let (side, region) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| config_err!("constraint must be none, inside:<region> or outside:<region>"))?;
        let region = match region {
            "largest" => Region::LargestInstance,
            c => Region::Category(c.parse()?),
        };
        match side {
            "inside" => Ok(ConstraintMode::Inside(region)),
            "outside" => Ok(ConstraintMode::Outside(region)),
            other => Err(config_err!("unknown constraint side '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defense {
    None,
    Blur,
    AdvTrain,
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Defense::None => "none",
            Defense::Blur => "blur",
            Defense::AdvTrain => "adv_train",
        })
    }
}

impl FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Defense::None),
            "blur" => Ok(Defense::Blur),
            "adv_train" => Ok(Defense::AdvTrain),
            other => Err(config_err!("unknown defense '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub scene: SceneParams,
    pub dataset: Option<PathBuf>,

    pub architecture: Architecture,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub models: Vec<PathBuf>,

    pub xi: Vec<f64>,
    /// Step size per budget; `None` picks the default for each budget.
    pub eta: Option<Vec<f64>>,
    pub steps: usize,
    pub targets: Vec<TargetSpec>,
    pub constraint: ConstraintMode,
    pub split: Split,
    /// Attack only the first `scenes` scenes of the split.
    pub scenes: Option<usize>,
    pub save_perturbations: bool,

    pub defenses: Vec<Defense>,
    pub blur: BlurConfig,
    pub adv: AdvTrainConfig,
    /// Training scenes used for adversarial fine-tuning.
    pub adv_scenes: usize,
    /// Attack steps used to craft the fine-tuning pool.
    pub adv_pool_steps: usize,

    pub gammas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: DEFAULT_TRAIN,
            n_test: DEFAULT_TEST,
            scene: SceneParams::default(),
            dataset: None,
            architecture: Architecture::ModelA,
            model_seed: 1,
            train: TrainConfig::default(),
            models: Vec::new(),
            xi: XI_GRID.to_vec(),
            eta: None,
            steps: DEFAULT_STEPS,
            targets: vec![TargetSpec::Scale(0.10), TargetSpec::Scale(-0.10)],
            constraint: ConstraintMode::None,
            split: Split::Test,
            scenes: None,
            save_perturbations: true,
            defenses: vec![Defense::None, Defense::Blur, Defense::AdvTrain],
            blur: BlurConfig::default(),
            adv: AdvTrainConfig::default(),
            adv_scenes: 40,
            adv_pool_steps: 50,
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| config_err!("bad value '{}' for {key}", v.trim()))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value", n + 1))?;
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(config_err!("line {}: key '{k}' given twice", n + 1));
            }
            seen.push(k.to_string());
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => config_err!("line {}: {m}", n + 1),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some(p) = key.strip_prefix("scene.") {
            return self.scene.set(p, v);
        }
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "architecture" => self.architecture = v.parse()?,
            "model_seed" => self.model_seed = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "lr_decay" => self.train.lr_decay = parse(key, v)?,
            "train_seed" => self.train.seed = parse(key, v)?,
            "models" => self.models = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            "xi" => self.xi = parse_list(key, v)?,
            "eta" => self.eta = if v == "default" { None } else { Some(parse_list(key, v)?) },
            "steps" => self.steps = parse(key, v)?,
            "targets" => {
                self.targets = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "constraint" => self.constraint = v.parse()?,
            "split" => {
                self.split = match v {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(config_err!("unknown split '{other}'")),
                }
            }
            "scenes" => self.scenes = if v == "all" { None } else { Some(parse(key, v)?) },
            "save_perturbations" => self.save_perturbations = parse(key, v)?,
            "defenses" => self.defenses = parse_list(key, v)?,
            "blur_sigma" => self.blur.sigma = parse(key, v)?,
            "blur_radius" => self.blur.radius = if v == "auto" { None } else { Some(parse(key, v)?) },
            "adv_alphas" => self.adv.alphas = parse_list(key, v)?,
            "adv_epochs" => self.adv.epochs = parse(key, v)?,
            "adv_batch_size" => self.adv.batch_size = parse(key, v)?,
            "adv_lr" => self.adv.lr = parse(key, v)?,
            "adv_lr_decay" => self.adv.lr_decay = parse(key, v)?,
            "adv_seed" => self.adv.seed = parse(key, v)?,
            "adv_scenes" => self.adv_scenes = parse(key, v)?,
            "adv_pool_steps" => self.adv_pool_steps = parse(key, v)?,
            "gammas" => self.gammas = parse_list(key, v)?,
            other => return Err(config_err!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(config_err!("n_train and n_test must be at least 1"));
        }
        self.scene.validate().map_err(|e| config_err!("{e}"))?;
        if self.xi.is_empty() || self.xi.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(config_err!("xi values must be positive and finite"));
        }
        if let Some(eta) = &self.eta {
            if eta.len() != self.xi.len() {
                return Err(config_err!("eta has {} entries but xi has {}", eta.len(), self.xi.len()));
            }
        }
        if self.targets.is_empty() {
            return Err(config_err!("no targets given"));
        }
        if self.gammas.iter().any(|g| !g.is_finite()) {
            return Err(config_err!("gammas must be finite"));
        }
        if self.defenses.contains(&Defense::Blur) {
            self.blur.validate()?;
        }
        if self.defenses.contains(&Defense::AdvTrain) {
            if self.adv.epochs > 0 {
                self.adv.validate()?;
            }
            if self.adv_scenes == 0 {
                return Err(config_err!("adv_scenes must be at least 1"));
            }
        }
        self.train.validate()
    }

    /// Attack settings for budget index `k`.
    pub fn attack(&self, k: usize) -> AttackConfig {
        let xi = self.xi[k];
        AttackConfig {
            xi,
            eta: self.eta.as_ref().map_or_else(|| default_eta(xi), |e| e[k]),
            steps: self.steps,
            constraint: Constraint::None,
            seed: self.seed,
        }
    }

    /// The resolved configuration in the same `key = value` form.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved advdepth configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        for (k, v) in self.scene.pairs() {
            kv(&format!("scene.{k}"), v);
        }
        kv("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("architecture", self.architecture.to_string());
        kv("model_seed", self.model_seed.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("lr", self.train.lr.to_string());
        kv("lr_decay", self.train.lr_decay.to_string());
        kv("train_seed", self.train.seed.to_string());
        kv("models", self.models.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
        kv("xi", join(&self.xi));
        kv("eta", self.eta.as_ref().map_or_else(|| "default".to_string(), |e| join(e)));
        kv("steps", self.steps.to_string());
        kv("targets", join(&self.targets));
        kv("constraint", self.constraint.to_string());
        kv("split", self.split.to_string());
        kv("scenes", self.scenes.map_or_else(|| "all".to_string(), |n| n.to_string()));
        kv("save_perturbations", self.save_perturbations.to_string());
        kv("defenses", join(&self.defenses));
        kv("blur_sigma", self.blur.sigma.to_string());
        kv("blur_radius", self.blur.radius.map_or_else(|| "auto".to_string(), |r| r.to_string()));
        kv("adv_alphas", join(&self.adv.alphas));
        kv("adv_epochs", self.adv.epochs.to_string());
        kv("adv_batch_size", self.adv.batch_size.to_string());
        kv("adv_lr", self.adv.lr.to_string());
        kv("adv_lr_decay", self.adv.lr_decay.to_string());
        kv("adv_seed", self.adv.seed.to_string());
        kv("adv_scenes", self.adv_scenes.to_string());
        kv("adv_pool_steps", self.adv_pool_steps.to_string());
        kv("gammas", join(&self.gammas));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn custom_values_roundtrip() {
        let text = "\
# comment
seed = 7
scene.height = 32
scene.width = 64
dataset = /tmp/data
models = a, b
xi = 0.002, 0.02
eta = 0.5, 4
targets = scale:+0.10, flip_v, category:Vehicle:-0.05, remove:largest
constraint = outside:largest
scenes = 3
defenses = none, blur
gammas = 0, 1
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!((cfg.scene.height, cfg.scene.width), (32, 64));
        assert_eq!(cfg.models, vec![PathBuf::from("a"), PathBuf::from("b")]);
        assert_eq!(cfg.attack(1).eta, 4.0);
        assert_eq!(cfg.targets.len(), 4);
        assert_eq!(cfg.constraint, ConstraintMode::Outside(Region::LargestInstance));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour = red",
            "seed = 1\nseed = 2",
            "n_test = 0",
            "xi = 0.01, -0.02",
            "xi = 0.01\neta = 1, 2",
            "targets = scale:+0.9",
            "constraint = around:Sky",
            "no equals sign",
            "scene.depth_min = x",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn default_eta_follows_budget() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.attack(0).eta, default_eta(cfg.xi[0]));
        assert_eq!(cfg.attack(3).steps, DEFAULT_STEPS);
    }
}
