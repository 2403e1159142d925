use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{architecture_spec, Activation, Architecture, LayerInput, LayerSpec, INPUT};
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Metric depth interval a model can emit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min: f32,
    pub max: f32,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { min: 1.0, max: 80.0 }
    }
}

impl DepthRange {
    pub fn new(min: f32, max: f32) -> Result<Self> {
        if !(min > 0.0 && max > min && max.is_finite()) {
            return Err(config_err!("invalid depth range [{min}, {max}]"));
        }
        Ok(Self { min, max })
    }

    pub fn clamp(&self, d: f32) -> f32 {
        d.clamp(self.min, self.max)
    }

    pub fn contains(&self, d: f32) -> bool {
        d >= self.min && d <= self.max
    }
}

/// Fixed input standardization `(x - INPUT_MEAN) / INPUT_STD` applied before
/// the first layer.
pub const INPUT_MEAN: f64 = 0.55;
pub const INPUT_STD: f64 = 0.1;

/// Number of stride-2 stages; input height and width must be divisible by
/// `2^DOWNSAMPLE_STAGES`.
pub const DOWNSAMPLE_STAGES: u32 = 3;

/// A frozen differentiable map from an RGB image `[3,H,W]` in `[0,1]` to a
/// depth map `[1,H,W]` inside [`DepthRange`].
///
/// The head emits `s = sigmoid(z)` and interprets it as scaled disparity:
/// `depth = 1 / (s * (1/min - 1/max) + 1/max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthModel {
    arch: Architecture,
    params: BTreeMap<String, Tensor>,
    range: DepthRange,
    seed: u64,
}

/// Graph handles of every parameter of a model.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl DepthModel {
    /// Seeded He-normal initialisation.
    pub fn new(arch: Architecture, range: DepthRange, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for layer in architecture_spec(arch) {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let std = if layer.activation == Activation::DepthHead {
                0.1 / fan_in.sqrt()
            } else {
                (2.0 / fan_in).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let w = Tensor::from_fn(
                vec![layer.out_channels, layer.in_channels, layer.kernel, layer.kernel],
                |_| normal.sample(&mut rng) as f32,
            );
            params.insert(layer.weight_name(), w);
            params.insert(layer.bias_name(), Tensor::zeros(vec![layer.out_channels]));
        }
        Self {
            arch,
            params,
            range,
            seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn range(&self) -> DepthRange {
        self.range
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let m = 1usize << DOWNSAMPLE_STAGES;
        match *shape {
            [3, h, w] if h > 0 && w > 0 && h % m == 0 && w % m == 0 => Ok((h, w)),
            _ => Err(shape_err!(
                "depth model input must be [3,H,W] with H,W multiples of {m}, got {:?}",
                shape
            )),
        }
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), g.leaf(t.cast::<T>(), trainable)?);
        }
        Ok(BoundParams { vars })
    }

    /// Records the forward pass on `g` and returns the `[1,H,W]` depth node.
    pub fn forward_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        image: Var,
    ) -> Result<Var> {
        self.forward_graph_traced(g, params, image, |_, _| {})
    }

    /// As [`forward_graph`](Self::forward_graph), reporting every layer
    /// output to `trace`.
    pub fn forward_graph_traced<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        image: Var,
        mut trace: impl FnMut(&LayerSpec, &Tensor<T>),
    ) -> Result<Var> {
        self.check_input_shape(g.value(image).shape())?;
        let scaled = g.mul_scalar(image, 1.0 / INPUT_STD);
        let image = g.add_scalar(scaled, -INPUT_MEAN / INPUT_STD);
        let mut outputs: HashMap<&'static str, Var> = HashMap::new();
        outputs.insert(INPUT, image);
        let mut cur = image;
        for layer in architecture_spec(self.arch) {
            let input = match layer.input {
                LayerInput::Previous => cur,
                LayerInput::UpsampleConcat(skip) => {
                    let up = g.upsample2x(cur)?;
                    match skip {
                        Some(name) => g.concat_channels(&[up, outputs[name]])?,
                        None => up,
                    }
                }
            };
            let z = g.conv2d(
                input,
                params.get(&layer.weight_name()),
                Some(params.get(&layer.bias_name())),
                layer.stride,
                layer.padding(),
            )?;
            cur = match layer.activation {
                Activation::Elu => g.elu(z),
                Activation::Relu => g.relu(z),
                Activation::DepthHead => self.depth_head(g, z)?,
            };
            trace(&layer, g.value(cur));
            outputs.insert(layer.name, cur);
        }
        Ok(cur)
    }

    fn depth_head<T: Element>(&self, g: &mut Graph<T>, logits: Var) -> Result<Var> {
        let inv_min = 1.0 / self.range.min as f64;
        let inv_max = 1.0 / self.range.max as f64;
        let s = g.sigmoid(logits);
        let disp = g.mul_scalar(s, inv_min - inv_max);
        let disp = g.add_scalar(disp, inv_max);
        let ones = g.constant(Tensor::full(g.value(disp).shape().to_vec(), T::from_f64(1.0)))?;
        let depth = g.div(ones, disp)?;
        // rounding can step a hair outside the range
        Ok(g.clamp(depth, self.range.min as f64, self.range.max as f64))
    }

    /// Inference on a single image.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let d = self.forward_graph(&mut g, &params, x)?;
        Ok(g.value(d).clone())
    }

    /// Byte serialisation of all weights in name order; equal bytes mean
    /// equal models.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.params {
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_dtns_bytes());
        }
        out
    }

    /// Writes `manifest.txt` and one `<name>.dtns` per tensor into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "# advdepth model manifest");
        let _ = writeln!(manifest, "architecture = {}", self.arch);
        let _ = writeln!(manifest, "depth_min = {}", self.range.min);
        let _ = writeln!(manifest, "depth_max = {}", self.range.max);
        let _ = writeln!(manifest, "seed = {}", self.seed);
        for (name, t) in &self.params {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(manifest, "tensor {} {}", name, shape.join(","));
            t.save_dtns(dir.join(format!("{name}.dtns")))?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut arch = None;
        let mut min = None;
        let mut max = None;
        let mut seed = None;
        let mut params = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::format(&mpath, format!("line {}: {m}", lineno + 1));
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut it = rest.split_whitespace();
                let (Some(name), Some(shape)) = (it.next(), it.next()) else {
                    return Err(bad("expected 'tensor <name> <shape>'"));
                };
                let shape: Vec<usize> = shape
                    .split(',')
                    .map(|s| s.parse().map_err(|_| bad("bad extent")))
                    .collect::<Result<_>>()?;
                let t = Tensor::load_dtns(dir.join(format!("{name}.dtns")))?;
                if t.shape() != shape.as_slice() {
                    return Err(bad(&format!("tensor {name} shape differs from manifest")));
                }
                params.insert(name.to_string(), t);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let value = value.trim();
            match key.trim() {
                "architecture" => arch = Some(value.parse::<Architecture>()?),
                "depth_min" => min = Some(value.parse::<f32>().map_err(|_| bad("bad depth_min"))?),
                "depth_max" => max = Some(value.parse::<f32>().map_err(|_| bad("bad depth_max"))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("bad seed"))?),
                other => return Err(bad(&format!("unknown key '{other}'"))),
            }
        }
        let missing = |k: &str| Error::format(&mpath, format!("missing '{k}'"));
        let arch = arch.ok_or_else(|| missing("architecture"))?;
        let range = DepthRange::new(
            min.ok_or_else(|| missing("depth_min"))?,
            max.ok_or_else(|| missing("depth_max"))?,
        )?;
        let model = Self {
            arch,
            params,
            range,
            seed: seed.ok_or_else(|| missing("seed"))?,
        };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        for layer in architecture_spec(self.arch) {
            let want_w = [layer.out_channels, layer.in_channels, layer.kernel, layer.kernel];
            match self.params.get(&layer.weight_name()) {
                Some(t) if t.shape() == want_w => {}
                _ => return Err(shape_err!("{}: missing or misshapen {}", self.arch, layer.weight_name())),
            }
            match self.params.get(&layer.bias_name()) {
                Some(t) if t.shape() == [layer.out_channels] => {}
                _ => return Err(shape_err!("{}: missing or misshapen {}", self.arch, layer.bias_name())),
            }
        }
        if self.params.len() != 2 * architecture_spec(self.arch).len() {
            return Err(shape_err!("{}: unexpected extra parameters", self.arch));
        }
        Ok(())
    }
}
