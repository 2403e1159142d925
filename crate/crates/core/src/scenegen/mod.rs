//! Synthetic road scenes with exact depth, semantic and instance labels.
//!
//! The camera looks along a flat road. Ground depth follows the pinhole law
//! `depth(row) = f * h_cam / (row + 0.5 - horizon)`, everything above the
//! horizon is sky at the far plane, and objects are fronto-parallel boxes
//! standing on the ground.

mod io;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{config_err, data_err, Error, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, load_scene, save_dataset, save_scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Category {
    Sky = 0,
    Flat = 1,
    Construction = 2,
    Vehicle = 3,
    Human = 4,
    Nature = 5,
    Traffic = 6,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Sky,
        Category::Flat,
        Category::Construction,
        Category::Vehicle,
        Category::Human,
        Category::Nature,
        Category::Traffic,
    ];
    pub const OBJECTS: [Category; 5] = [
        Category::Construction,
        Category::Vehicle,
        Category::Human,
        Category::Nature,
        Category::Traffic,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| config_err!("unknown category id {id}"))
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Sky => "Sky",
            Category::Flat => "Flat",
            Category::Construction => "Construction",
            Category::Vehicle => "Vehicle",
            Category::Human => "Human",
            Category::Nature => "Nature",
            Category::Traffic => "Traffic",
        }
    }

    /// Only countable things get instance ids.
    pub fn has_instances(self) -> bool {
        matches!(self, Category::Vehicle | Category::Human)
    }

    fn base_color(self) -> [f32; 3] {
        match self {
            Category::Sky => [0.55, 0.72, 0.92],
            Category::Flat => [0.36, 0.36, 0.38],
            Category::Construction => [0.58, 0.48, 0.40],
            Category::Vehicle => [0.70, 0.18, 0.16],
            Category::Human => [0.30, 0.30, 0.60],
            Category::Nature => [0.20, 0.50, 0.18],
            Category::Traffic => [0.90, 0.78, 0.12],
        }
    }

    /// (width m, height m, depth m) sampling ranges.
    fn extents(self) -> ([f32; 2], [f32; 2], [f32; 2]) {
        match self {
            Category::Vehicle => ([1.8, 4.5], [1.3, 1.9], [5.0, 35.0]),
            Category::Human => ([0.5, 0.9], [1.5, 1.9], [4.0, 25.0]),
            Category::Construction => ([5.0, 15.0], [4.0, 12.0], [15.0, 45.0]),
            Category::Nature => ([1.5, 4.0], [3.0, 8.0], [8.0, 45.0]),
            Category::Traffic => ([0.5, 0.9], [2.5, 4.0], [5.0, 30.0]),
            Category::Sky | Category::Flat => unreachable!("not an object category"),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| config_err!("unknown category '{}'", s.trim()))
    }
}

/// A `[H,W]` map of byte labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub depth_min: f32,
    /// Far plane; sky sits here.
    pub depth_max: f32,
    /// Horizon row as a fraction of the height.
    pub horizon: f32,
    /// Uniform per-scene horizon jitter in rows.
    pub horizon_jitter: f32,
    pub camera_height: f32,
    /// Ground depth at the bottom row for the nominal horizon.
    pub bottom_depth: f32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise_std: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            depth_min: 1.0,
            depth_max: 60.0,
            horizon: 0.4,
            horizon_jitter: 2.0,
            camera_height: 1.5,
            bottom_depth: 3.0,
            min_objects: 3,
            max_objects: 8,
            noise_std: 0.02,
        }
    }
}

impl SceneParams {
    /// Largest object count a canvas accepts: one object per 8x8 cell,
    /// capped by the 8-bit instance map.
    pub fn capacity(&self) -> usize {
        (self.height * self.width / 64).min(255)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(config_err!("canvas {}x{} too small", self.height, self.width));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(config_err!("invalid depth range [{}, {}]", self.depth_min, self.depth_max));
        }
        if !(self.horizon > 0.0 && self.horizon < 1.0) || self.horizon_jitter < 0.0 {
            return Err(config_err!("horizon must lie inside the canvas"));
        }
        if !(self.camera_height > 0.0 && self.bottom_depth >= self.depth_min) {
            return Err(config_err!("invalid camera geometry"));
        }
        if self.min_objects > self.max_objects {
            return Err(config_err!("min_objects > max_objects"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(config_err!("noise_std must be non-negative"));
        }
        if self.max_objects > self.capacity() {
            return Err(data_err!(
                "{} objects exceed canvas capacity {}",
                self.max_objects,
                self.capacity()
            ));
        }
        Ok(())
    }

    /// Focal length in pixels implied by the nominal geometry.
    pub fn focal(&self) -> f32 {
        let horizon = self.horizon * self.height as f32;
        self.bottom_depth * (self.height as f32 - 0.5 - horizon) / self.camera_height
    }

    /// Ground depth of `row` for a horizon at `horizon` rows, clamped to the
    /// far plane; `None` above the horizon.
    pub fn ground_depth(&self, row: usize, horizon: f32) -> Option<f32> {
        let dy = row as f32 + 0.5 - horizon;
        if dy <= 0.0 {
            return None;
        }
        Some((self.focal() * self.camera_height / dy).clamp(self.depth_min, self.depth_max))
    }
}

/// A placed object: half-open pixel box (may extend past the canvas) at a
/// constant depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub category: Category,
    pub depth: f32,
    pub top: i32,
    pub bottom: i32,
    pub left: i32,
    pub right: i32,
    pub tint: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub depth: Tensor,
    pub semantic: LabelMap,
    pub instance: LabelMap,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.semantic.height
    }

    pub fn width(&self) -> usize {
        self.semantic.width
    }

    /// SHA-256 over image, depth and both label maps.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image.to_dtns_bytes());
        h.update(self.depth.to_dtns_bytes());
        h.update(&self.semantic.data);
        h.update(&self.instance.data);
        hex::encode(h.finalize())
    }

    /// Distinct non-zero instance ids in ascending order.
    pub fn instance_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &id in &self.instance.data {
            seen[id as usize] = true;
        }
        (1..=255u8).filter(|&id| seen[id as usize]).collect()
    }

    pub fn instance_pixels(&self, id: u8) -> usize {
        self.instance.data.iter().filter(|&&v| v == id).count()
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]) -> f32 {
    rng.gen_range(lo..=hi)
}

fn sample_category(rng: &mut ChaCha8Rng) -> Category {
    const WEIGHTS: [(Category, u32); 5] = [
        (Category::Vehicle, 30),
        (Category::Construction, 18),
        (Category::Human, 18),
        (Category::Nature, 18),
        (Category::Traffic, 16),
    ];
    let total: u32 = WEIGHTS.iter().map(|w| w.1).sum();
    let mut r = rng.gen_range(0..total);
    for (c, w) in WEIGHTS {
        if r < w {
            return c;
        }
        r -= w;
    }
    unreachable!()
}

fn sample_objects(params: &SceneParams, horizon: f32, rng: &mut ChaCha8Rng) -> Vec<ObjectSpec> {
    let n = rng.gen_range(params.min_objects..=params.max_objects);
    let f = params.focal();
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let category = sample_category(rng);
        let (wr, hr, zr) = category.extents();
        let w_m = uniform(rng, wr);
        let h_m = uniform(rng, hr);
        let z = uniform(rng, zr).clamp(params.depth_min, params.depth_max);
        let cx = rng.gen_range(0.0..params.width as f32);
        let tint = [
            rng.gen_range(-0.12..0.12f32),
            rng.gen_range(-0.12..0.12f32),
            rng.gen_range(-0.12..0.12f32),
        ];
        let scale = f / z;
        let bottom = (horizon + params.camera_height * scale).round() as i32;
        let hp = (h_m * scale).round().max(1.0) as i32;
        let half = (0.5 * w_m * scale).max(0.5);
        let left = (cx - half).round() as i32;
        let right = ((cx + half).round() as i32).max(left + 1);
        objects.push(ObjectSpec {
            category,
            depth: z,
            top: bottom - hp,
            bottom,
            left,
            right,
            tint,
        });
    }
    objects
}

/// Deterministic scene for `seed`.
pub fn generate(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = params.horizon * params.height as f32
        + rng.gen_range(-1.0..=1.0f32) * params.horizon_jitter;
    let objects = sample_objects(params, horizon, &mut rng);
    compose(params, horizon, &objects, &mut rng, seed)
}

/// Renders a scene from an explicit object list; nearer objects win pixels
/// and ties go to the earlier object.
pub fn compose(
    params: &SceneParams,
    horizon: f32,
    objects: &[ObjectSpec],
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<Scene> {
    params.validate()?;
    if objects.len() > params.capacity() {
        return Err(data_err!(
            "{} objects exceed canvas capacity {}",
            objects.len(),
            params.capacity()
        ));
    }
    let (h, w) = (params.height, params.width);
    let mut depth = vec![params.depth_max; h * w];
    let mut semantic = LabelMap::new(h, w);
    let mut instance = LabelMap::new(h, w);
    // index into `objects` owning each pixel
    let mut owner: Vec<Option<usize>> = vec![None; h * w];

    for row in 0..h {
        let (cat, d) = match params.ground_depth(row, horizon) {
            Some(d) => (Category::Flat, d),
            None => (Category::Sky, params.depth_max),
        };
        for col in 0..w {
            depth[row * w + col] = d;
            semantic.data[row * w + col] = cat.id();
        }
    }

    let mut next_id = 1u8;
    let mut ids = vec![0u8; objects.len()];
    for (k, obj) in objects.iter().enumerate() {
        if obj.category.has_instances() {
            ids[k] = next_id;
            next_id = next_id.wrapping_add(1);
        }
        let rows = obj.top.max(0) as usize..(obj.bottom.min(h as i32)).max(0) as usize;
        let cols = obj.left.max(0) as usize..(obj.right.min(w as i32)).max(0) as usize;
        for row in rows {
            for col in cols.clone() {
                let i = row * w + col;
                let nearer = match owner[i] {
                    Some(o) => obj.depth < objects[o].depth,
                    None => true,
                };
                if nearer {
                    owner[i] = Some(k);
                    depth[i] = obj.depth;
                    semantic.data[i] = obj.category.id();
                    instance.data[i] = ids[k];
                }
            }
        }
    }

    let image = shade(params, horizon, objects, &owner, &depth, &semantic, rng);
    Ok(Scene {
        image,
        depth: Tensor::new(vec![1, h, w], depth)?,
        semantic,
        instance,
        seed,
    })
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scaled(c: [f32; 3], s: f32) -> [f32; 3] {
    [c[0] * s, c[1] * s, c[2] * s]
}

const HAZE: [f32; 3] = [0.78, 0.80, 0.84];

/// Surface pattern of an object at local coordinates in meters: `u` from the
/// left edge, `v` up from the ground, `hm` the total height.
fn object_color(obj: &ObjectSpec, u: f32, v: f32, hm: f32) -> [f32; 3] {
    let base = obj.category.base_color();
    let c = [base[0] + obj.tint[0], base[1] + obj.tint[1], base[2] + obj.tint[2]];
    match obj.category {
        Category::Vehicle if v < 0.45 => [0.08, 0.08, 0.09],
        Category::Vehicle if v > 0.8 * hm => mix(c, [0.55, 0.65, 0.75], 0.6),
        Category::Human if v > 0.85 * hm => [0.85, 0.66, 0.52],
        Category::Construction if u % 2.0 > 0.6 && v % 3.0 > 1.2 && v % 3.0 < 2.4 => {
            scaled(c, 0.55)
        }
        Category::Nature if v < 0.35 * hm => [0.35, 0.24, 0.14],
        Category::Traffic if v < 0.7 * hm => [0.45, 0.45, 0.47],
        _ => c,
    }
}

fn shade(
    params: &SceneParams,
    horizon: f32,
    objects: &[ObjectSpec],
    owner: &[Option<usize>],
    depth: &[f32],
    semantic: &LabelMap,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (h, w) = (params.height, params.width);
    let f = params.focal();
    let noise = Normal::new(0.0f32, params.noise_std.max(0.0)).expect("valid std");
    let mut img = vec![0.0f32; 3 * h * w];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let z = depth[i];
            let color = match owner[i] {
                Some(k) => {
                    let obj = &objects[k];
                    let s = obj.depth / f;
                    let u = (col as f32 + 0.5 - obj.left as f32) * s;
                    let v = (obj.bottom as f32 - row as f32 - 0.5) * s;
                    let hm = (obj.bottom - obj.top) as f32 * s;
                    object_color(obj, u, v, hm)
                }
                None if semantic.data[i] == Category::Sky.id() => {
                    let t = (row as f32 / horizon.max(1.0)).clamp(0.0, 1.0);
                    mix(Category::Sky.base_color(), HAZE, t * t)
                }
                None => {
                    // painted bands every 4 m shrink toward the horizon
                    let band = if (z / 4.0).fract() < 0.25 { 0.06 } else { 0.0 };
                    let lateral = (col as f32 + 0.5 - 0.5 * w as f32) * z / f;
                    let lane = if lateral.abs() < 0.12 && (z / 3.0).fract() < 0.5 { 0.35 } else { 0.0 };
                    let b = Category::Flat.base_color();
                    [b[0] + band + lane, b[1] + band + lane, b[2] + band + lane]
                }
            };
            let haze = if semantic.data[i] == Category::Sky.id() {
                0.0
            } else {
                1.0 - (-z / 20.0).exp()
            };
            let c = mix(color, HAZE, haze);
            for ch in 0..3 {
                let v = (c[ch] + noise.sample(rng)).clamp(0.0, 1.0);
                // quantise to 8 bits so PPM files round-trip exactly
                img[ch * h * w + i] = (v * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], img).expect("shape matches")
}

/// Mixes a dataset seed, split and index into a per-scene seed.
fn scene_seed(seed: u64, split: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split << 32 | index)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: SceneParams,
    pub seed: u64,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub const DEFAULT_TRAIN: usize = 200;
pub const DEFAULT_TEST: usize = 20;

pub fn make_dataset(seed: u64, n_train: usize, n_test: usize, params: &SceneParams) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(config_err!("n_train and n_test must be at least 1"));
    }
    let mut seeds = std::collections::HashSet::new();
    let mut split = |which: u64, n: usize| -> Result<Vec<Scene>> {
        (0..n)
            .map(|i| {
                let s = scene_seed(seed, which, i as u64);
                if !seeds.insert(s) {
                    return Err(data_err!("scene seed collision at {which}/{i}"));
                }
                generate(s, params)
            })
            .collect()
    };
    let train = split(0, n_train)?;
    let test = split(1, n_test)?;
    Ok(Dataset {
        params: params.clone(),
        seed,
        train,
        test,
    })
}
