//! Target depth maps `d_t` built from a model prediction.
//!
//! Depth maps are `[1,H,W]` tensors. Every constructor keeps its output
//! inside the model's depth range.

use std::fmt;
use std::str::FromStr;

use crate::depth_net::{DepthModel, DepthRange};
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::pnm::Raster;
use crate::scenegen::{Category, LabelMap, Scene};
use crate::tensor::Tensor;

/// Largest |alpha| accepted by scaling targets.
pub const MAX_ALPHA: f64 = 0.45;

/// Binary `[H,W]` map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Mask) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(shape_err!(
                "mask is {}x{} but the image is {h}x{w}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

/// What a mask selects.
#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    Category(Category),
    CategoryId(u8),
    Instances(Vec<u8>),
}

pub fn category_mask(semantic: &LabelMap, cat: Category) -> Mask {
    Mask {
        height: semantic.height,
        width: semantic.width,
        data: semantic.data.iter().map(|&v| v == cat.id()).collect(),
    }
}

/// Union of the given instance ids. Ids absent from the map are rejected.
pub fn instance_mask(instance: &LabelMap, ids: &[u8]) -> Result<Mask> {
    for &id in ids {
        if id == 0 || !instance.data.contains(&id) {
            return Err(config_err!("instance id {id} does not occur in the scene"));
        }
    }
    Ok(Mask {
        height: instance.height,
        width: instance.width,
        data: instance.data.iter().map(|v| ids.contains(v)).collect(),
    })
}

pub fn mask_from(scene: &Scene, selector: &Selector) -> Result<Mask> {
    match selector {
        Selector::Category(c) => Ok(category_mask(&scene.semantic, *c)),
        Selector::CategoryId(id) => Ok(category_mask(&scene.semantic, Category::from_id(*id)?)),
        Selector::Instances(ids) => instance_mask(&scene.instance, ids),
    }
}

fn depth_hw(d: &Tensor) -> Result<(usize, usize)> {
    match d.shape() {
        &[1, h, w] => Ok((h, w)),
        s => Err(shape_err!("depth map must be [1,H,W], got {s:?}")),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.abs() <= MAX_ALPHA) {
        return Err(config_err!("scale factor {alpha} outside [-{MAX_ALPHA}, {MAX_ALPHA}]"));
    }
    Ok(())
}

/// `(1 + alpha) * d`, clamped to `range`.
pub fn scale_target(d: &Tensor, alpha: f64, range: DepthRange) -> Result<Tensor> {
    check_alpha(alpha)?;
    depth_hw(d)?;
    Ok(d.map(|v| range.clamp(((1.0 + alpha) * v as f64) as f32)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Mirror left-right.
    H,
    /// Mirror top-bottom.
    V,
}

pub fn flip_target(d: &Tensor, axis: Axis) -> Result<Tensor> {
    let (c, h, w) = d.chw()?;
    let src = d.data();
    Ok(Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), i / w % h, i % w);
        let (r, col) = match axis {
            Axis::H => (r, w - 1 - col),
            Axis::V => (h - 1 - r, col),
        };
        src[(ch * h + r) * w + col]
    }))
}

/// The model's prediction for another image.
pub fn preset_target(model: &DepthModel, x: &Tensor, other: &Tensor) -> Result<Tensor> {
    if x.shape() != other.shape() {
        return Err(shape_err!(
            "preset image {:?} does not match {:?}",
            other.shape(),
            x.shape()
        ));
    }
    model.predict(other)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetWarning {
    /// The selecting mask was empty so the target equals the prediction.
    EmptyMask,
}

impl fmt::Display for TargetWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetWarning::EmptyMask => f.write_str("EmptyMaskWarning"),
        }
    }
}

/// `(1 - M) * d + (1 + alpha) * M * d`, clamped to `range`.
pub fn category_scale_target(
    d: &Tensor,
    mask: &Mask,
    alpha: f64,
    range: DepthRange,
) -> Result<(Tensor, Option<TargetWarning>)> {
    check_alpha(alpha)?;
    let (h, w) = depth_hw(d)?;
    mask.check_dims(h, w)?;
    let warning = mask.is_empty().then(|| {
        log::warn!("category mask is empty; target equals the prediction");
        TargetWarning::EmptyMask
    });
    let mut out = d.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask.data) {
        if m {
            *v = range.clamp(((1.0 + alpha) * *v as f64) as f32);
        }
    }
    Ok((out, warning))
}

/// Fills the masked region by linear interpolation from unmasked depth.
///
/// Each masked pixel takes the linear blend of the nearest unmasked pixels to
/// its left and right on the same row, or the one available side. Rows that
/// are fully masked fall back to the same rule along the column, and pixels
/// whose row and column are both fully masked take the nearest unmasked value.
pub fn remove_instance_target(d: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (h, w) = depth_hw(d)?;
    mask.check_dims(h, w)?;
    if mask.count() == h * w {
        return Err(data_err!("mask covers the whole image; nothing to interpolate from"));
    }
    let src = d.data();
    let mut out = src.to_vec();
    let mut pending = Vec::new();

    for r in 0..h {
        let row = |c: usize| mask.get(r, c);
        for c in 0..w {
            if !row(c) {
                continue;
            }
            let left = (0..c).rev().find(|&k| !row(k));
            let right = (c + 1..w).find(|&k| !row(k));
            match blend(left, right, c, |k| src[r * w + k]) {
                Some(v) => out[r * w + c] = v,
                None => pending.push((r, c)),
            }
        }
    }

    let mut nearest = Vec::new();
    for &(r, c) in &pending {
        let col = |k: usize| mask.get(k, c);
        let up = (0..r).rev().find(|&k| !col(k));
        let down = (r + 1..h).find(|&k| !col(k));
        match blend(up, down, r, |k| src[k * w + c]) {
            Some(v) => out[r * w + c] = v,
            None => nearest.push((r, c)),
        }
    }

    for (r, c) in nearest {
        let mut best = (usize::MAX, 0.0f32);
        for (i, &m) in mask.data.iter().enumerate() {
            if !m {
                let (rr, cc) = (i / w, i % w);
                let dist = rr.abs_diff(r).pow(2) + cc.abs_diff(c).pow(2);
                if dist < best.0 {
                    best = (dist, src[i]);
                }
            }
        }
        out[r * w + c] = best.1;
    }
    Tensor::new(vec![1, h, w], out)
}

/// Linear interpolation at `at` between anchors `lo < at < hi`, or the one
/// available anchor.
fn blend(lo: Option<usize>, hi: Option<usize>, at: usize, val: impl Fn(usize) -> f32) -> Option<f32> {
    match (lo, hi) {
        (Some(a), Some(b)) => {
            let (va, vb) = (val(a) as f64, val(b) as f64);
            Some(((va * (b - at) as f64 + vb * (at - a) as f64) / (b - a) as f64) as f32)
        }
        (Some(a), None) => Some(val(a)),
        (None, Some(b)) => Some(val(b)),
        (None, None) => None,
    }
}

/// Removes the masked instance and pastes its original depth values shifted
/// by `(dcol, drow)` pixels.
pub fn translate_instance_target(d: &Tensor, mask: &Mask, dcol: i32, drow: i32) -> Result<Tensor> {
    let (h, w) = depth_hw(d)?;
    mask.check_dims(h, w)?;
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            let r = (i / w) as i64 + drow as i64;
            let c = (i % w) as i64 + dcol as i64;
            if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                return Err(config_err!(
                    "translation by ({dcol}, {drow}) moves the instance off the canvas"
                ));
            }
        }
    }
    let mut out = remove_instance_target(d, mask)?;
    let src = d.data();
    let dst = out.data_mut();
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            let r = (i / w) as i64 + drow as i64;
            let c = (i % w) as i64 + dcol as i64;
            dst[r as usize * w + c as usize] = src[i];
        }
    }
    Ok(out)
}

/// Which instance an instance target refers to.
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceRef {
    /// The instance with the most visible pixels in each scene.
    Largest,
    Ids(Vec<u8>),
}

/// A translation component in pixels or as a fraction of the canvas side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Offset {
    Pixels(i32),
    Fraction(f64),
}

impl Offset {
    pub fn resolve(self, side: usize) -> i32 {
        match self {
            Offset::Pixels(p) => p,
            Offset::Fraction(f) => (f * side as f64).round() as i32,
        }
    }
}

/// Declarative target description.
///
/// Textual forms: `scale:+0.10`, `flip_h`, `flip_v`, `preset` (random other
/// test scene) or `preset:<index>`, `category:Vehicle:+0.10`,
/// `remove:largest` or `remove:3,4`, `translate:largest:+8%:0`.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Scale(f64),
    FlipH,
    FlipV,
    Preset(Option<usize>),
    CategoryScale(Category, f64),
    RemoveInstance(InstanceRef),
    TranslateInstance(InstanceRef, Offset, Offset),
}

impl TargetSpec {
    /// Whether the target needs an instance in the scene.
    pub fn needs_instance(&self) -> bool {
        matches!(self, TargetSpec::RemoveInstance(_) | TargetSpec::TranslateInstance(..))
    }
}

fn fmt_alpha(a: f64) -> String {
    format!("{a:+.2}")
}

impl fmt::Display for InstanceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstanceRef::Largest => f.write_str("largest"),
            InstanceRef::Ids(ids) => {
                let s: Vec<String> = ids.iter().map(u8::to_string).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Offset::Pixels(p) => write!(f, "{p}"),
            Offset::Fraction(x) => write!(f, "{:+}%", x * 100.0),
        }
    }
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::Scale(a) => write!(f, "scale:{}", fmt_alpha(*a)),
            TargetSpec::FlipH => f.write_str("flip_h"),
            TargetSpec::FlipV => f.write_str("flip_v"),
            TargetSpec::Preset(None) => f.write_str("preset"),
            TargetSpec::Preset(Some(i)) => write!(f, "preset:{i}"),
            TargetSpec::CategoryScale(c, a) => write!(f, "category:{c}:{}", fmt_alpha(*a)),
            TargetSpec::RemoveInstance(r) => write!(f, "remove:{r}"),
            TargetSpec::TranslateInstance(r, dc, dr) => write!(f, "translate:{r}:{dc}:{dr}"),
        }
    }
}

fn parse_alpha(s: &str) -> Result<f64> {
    let a: f64 = s
        .trim()
        .parse()
        .map_err(|_| config_err!("bad scale factor '{s}'"))?;
    if a <= -1.0 {
        return Err(config_err!("scale factor {a} would make depth non-positive"));
    }
    check_alpha(a)?;
    Ok(a)
}

fn parse_instance(s: &str) -> Result<InstanceRef> {
    if s.trim() == "largest" {
        return Ok(InstanceRef::Largest);
    }
    let ids = s
        .split(',')
        .map(|t| t.trim().parse::<u8>().map_err(|_| config_err!("bad instance id '{t}'")))
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() || ids.contains(&0) {
        return Err(config_err!("instance ids must be non-zero"));
    }
    Ok(InstanceRef::Ids(ids))
}

fn parse_offset(s: &str) -> Result<Offset> {
    let s = s.trim();
    if let Some(p) = s.strip_suffix('%') {
        let v: f64 = p.parse().map_err(|_| config_err!("bad offset '{s}'"))?;
        return Ok(Offset::Fraction(v / 100.0));
    }
    s.parse()
        .map(Offset::Pixels)
        .map_err(|_| config_err!("bad offset '{s}'"))
}

impl FromStr for TargetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts[..] {
            ["scale", a] => Ok(TargetSpec::Scale(parse_alpha(a)?)),
            ["flip_h"] => Ok(TargetSpec::FlipH),
            ["flip_v"] => Ok(TargetSpec::FlipV),
            ["preset"] => Ok(TargetSpec::Preset(None)),
            ["preset", i] => Ok(TargetSpec::Preset(Some(
                i.parse().map_err(|_| config_err!("bad preset index '{i}'"))?,
            ))),
            ["category", c, a] => Ok(TargetSpec::CategoryScale(c.parse()?, parse_alpha(a)?)),
            ["remove", r] => Ok(TargetSpec::RemoveInstance(parse_instance(r)?)),
            ["translate", r, dc, dr] => Ok(TargetSpec::TranslateInstance(
                parse_instance(r)?,
                parse_offset(dc)?,
                parse_offset(dr)?,
            )),
            _ => Err(config_err!("unknown target spec '{s}'")),
        }
    }
}

/// Instance with the most visible pixels; ties go to the lower id.
pub fn largest_instance(scene: &Scene) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &id in &scene.instance.data {
        counts[id as usize] += 1;
    }
    (1..=255u8)
        .filter(|&id| counts[id as usize] > 0)
        .max_by_key(|&id| (counts[id as usize], std::cmp::Reverse(id)))
}

fn resolve_instances(scene: &Scene, r: &InstanceRef) -> Result<Vec<u8>> {
    match r {
        InstanceRef::Largest => largest_instance(scene)
            .map(|id| vec![id])
            .ok_or_else(|| data_err!("scene {} has no instances", scene.seed)),
        InstanceRef::Ids(ids) => Ok(ids.clone()),
    }
}

/// A constructed target plus any warning raised on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub depth: Tensor,
    pub warning: Option<TargetWarning>,
}

/// Builds the target for `scene` from `model`'s prediction. `preset` supplies
/// the other image for preset targets.
pub fn build_target(
    model: &DepthModel,
    scene: &Scene,
    spec: &TargetSpec,
    preset: Option<&Tensor>,
) -> Result<Target> {
    let range = model.range();
    let pred = model.predict(&scene.image)?;
    let plain = |depth| Target { depth, warning: None };
    Ok(match spec {
        TargetSpec::Scale(a) => plain(scale_target(&pred, *a, range)?),
        TargetSpec::FlipH => plain(flip_target(&pred, Axis::H)?),
        TargetSpec::FlipV => plain(flip_target(&pred, Axis::V)?),
        TargetSpec::Preset(_) => {
            let other = preset.ok_or_else(|| config_err!("preset target needs a second image"))?;
            plain(preset_target(model, &scene.image, other)?)
        }
        TargetSpec::CategoryScale(c, a) => {
            let m = category_mask(&scene.semantic, *c);
            let (depth, warning) = category_scale_target(&pred, &m, *a, range)?;
            Target { depth, warning }
        }
        TargetSpec::RemoveInstance(r) => {
            let m = instance_mask(&scene.instance, &resolve_instances(scene, r)?)?;
            plain(remove_instance_target(&pred, &m)?)
        }
        TargetSpec::TranslateInstance(r, dc, dr) => {
            let m = instance_mask(&scene.instance, &resolve_instances(scene, r)?)?;
            let (dc, dr) = (dc.resolve(scene.width()), dr.resolve(scene.height()));
            plain(translate_instance_target(&pred, &m, dc, dr)?)
        }
    })
}

/// Gray visualization: inverse depth normalized over `range` to 0..=255,
/// so near is bright.
pub fn depth_visual(d: &Tensor, range: DepthRange) -> Result<Raster> {
    let (h, w) = depth_hw(d)?;
    let (lo, hi) = (1.0 / range.max as f64, 1.0 / range.min as f64);
    let data = d
        .data()
        .iter()
        .map(|&v| {
            let t = ((1.0 / v.max(range.min) as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect();
    Ok(Raster {
        width: w,
        height: h,
        channels: 1,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![1, h, w], v.to_vec()).unwrap()
    }

    const R: DepthRange = DepthRange { min: 1.0, max: 80.0 };

    #[test]
    fn scale_examples() {
        let d = map(1, 1, &[10.0]);
        assert_eq!(scale_target(&d, 0.0, R).unwrap(), d);
        assert_eq!(scale_target(&d, -0.10, R).unwrap().data(), &[9.0]);
        for a in [-0.10, -0.05, 0.05, 0.10] {
            assert!(scale_target(&d, a, R).is_ok());
        }
        assert!(matches!(scale_target(&d, -1.0, R), Err(Error::Config(_))));
        assert!(matches!("scale:-1.5".parse::<TargetSpec>(), Err(Error::Config(_))));
        assert_eq!(scale_target(&map(1, 1, &[79.0]), 0.1, R).unwrap().data(), &[80.0]);
    }

    #[test]
    fn flip_examples() {
        let d = map(1, 2, &[1.0, 2.0]);
        assert_eq!(flip_target(&d, Axis::H).unwrap().data(), &[2.0, 1.0]);
        let d = map(2, 1, &[1.0, 2.0]);
        assert_eq!(flip_target(&d, Axis::V).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn category_examples() {
        let d = map(1, 2, &[10.0, 10.0]);
        let m = Mask {
            height: 1,
            width: 2,
            data: vec![true, false],
        };
        let (t, warn) = category_scale_target(&d, &m, 0.10, R).unwrap();
        assert_eq!(t.data(), &[11.0, 10.0]);
        assert!(warn.is_none());
        let (t, warn) = category_scale_target(&d, &Mask::filled(1, 2, false), 0.10, R).unwrap();
        assert_eq!((t, warn), (d.clone(), Some(TargetWarning::EmptyMask)));
        let (t, _) = category_scale_target(&d, &Mask::filled(1, 2, true), 0.10, R).unwrap();
        assert_eq!(t, scale_target(&d, 0.10, R).unwrap());
    }

    #[test]
    fn remove_examples() {
        let d = map(1, 6, &[1.0, 2.0, 9.0, 9.0, 5.0, 6.0]);
        let m = Mask::from_fn(1, 6, |_, c| c == 2 || c == 3);
        assert_eq!(remove_instance_target(&d, &m).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let d = map(1, 4, &[7.0, 7.0, 4.0, 5.0]);
        let m = Mask::from_fn(1, 4, |_, c| c < 2);
        assert_eq!(remove_instance_target(&d, &m).unwrap().data(), &[4.0, 4.0, 4.0, 5.0]);

        let c = Tensor::full(vec![1, 5, 7], 3.5f32);
        let m = Mask::from_fn(5, 7, |r, col| r > 0 && col > 2);
        assert_eq!(remove_instance_target(&c, &m).unwrap(), c);

        assert!(matches!(
            remove_instance_target(&c, &Mask::filled(5, 7, true)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn remove_falls_back_to_columns() {
        // middle row fully masked: filled from the rows above and below
        let d = map(3, 2, &[2.0, 4.0, 0.0, 0.0, 6.0, 8.0]);
        let m = Mask::from_fn(3, 2, |r, _| r == 1);
        assert_eq!(remove_instance_target(&d, &m).unwrap().data(), &[2.0, 4.0, 4.0, 6.0, 6.0, 8.0]);
    }

    #[test]
    fn remove_falls_back_to_nearest() {
        // (1,1) has no unmasked pixel on its row or column
        let d = map(2, 2, &[1.0, 2.0, 3.0, 0.0]);
        let m = Mask::from_fn(2, 2, |r, c| !(r == 0 && c == 0));
        let t = remove_instance_target(&d, &m).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn translate_examples() {
        let d = Tensor::from_fn(vec![1, 8, 10], |i| 5.0 + (i % 13) as f32);
        let m = Mask::from_fn(8, 10, |r, c| (2..5).contains(&r) && (3..6).contains(&c));
        assert_eq!(translate_instance_target(&d, &m, 0, 0).unwrap(), d);
        let t = translate_instance_target(&d, &m, 2, -1).unwrap();
        assert_eq!(t.data()[10 + 5], d.data()[2 * 10 + 3]);
        assert!(matches!(translate_instance_target(&d, &m, 5, 0), Err(Error::Config(_))));
        // lateral shifts of 8% and a 42% upward shift on a 64x128 canvas
        let big = Tensor::full(vec![1, 64, 128], 10.0f32);
        let car = Mask::from_fn(64, 128, |r, c| (40..56).contains(&r) && (50..70).contains(&c));
        for (dc, dr) in [(Offset::Fraction(0.08), Offset::Pixels(0)), (Offset::Fraction(-0.08), Offset::Pixels(0)), (Offset::Pixels(0), Offset::Fraction(-0.42))] {
            assert!(translate_instance_target(&big, &car, dc.resolve(128), dr.resolve(64)).is_ok());
        }
    }

    #[test]
    fn spec_text_roundtrips() {
        for s in [
            "scale:+0.10",
            "scale:-0.05",
            "flip_h",
            "flip_v",
            "preset",
            "preset:3",
            "category:Vehicle:+0.10",
            "remove:largest",
            "remove:3,4",
            "translate:largest:+8%:0",
            "translate:2:-10:-27",
        ] {
            let spec: TargetSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("warp:2".parse::<TargetSpec>().is_err());
        assert!("category:Bicycle:+0.1".parse::<TargetSpec>().is_err());
    }

    #[test]
    fn masks_from_scene() {
        use crate::scenegen::{generate, SceneParams};
        let p = SceneParams::default();
        let s = (0..50).map(|k| generate(k, &p).unwrap()).find(|s| !s.instance_ids().is_empty()).unwrap();
        let all = Category::ALL
            .iter()
            .map(|&c| mask_from(&s, &Selector::Category(c)).unwrap())
            .reduce(|a, b| a.union(&b))
            .unwrap();
        assert_eq!(all.count(), s.height() * s.width());
        for id in s.instance_ids() {
            let im = mask_from(&s, &Selector::Instances(vec![id])).unwrap();
            let cat = Category::from_id(s.semantic.data[im.data.iter().position(|&b| b).unwrap()]).unwrap();
            let cm = category_mask(&s.semantic, cat);
            assert!(im.data.iter().zip(&cm.data).all(|(i, c)| !i || *c));
        }
        assert!(matches!(mask_from(&s, &Selector::Instances(vec![200])), Err(Error::Config(_))));
        assert!(matches!(mask_from(&s, &Selector::CategoryId(9)), Err(Error::Config(_))));
        let empty = (0..50)
            .map(|k| generate(k, &p).unwrap())
            .find(|s| !s.semantic.data.contains(&Category::Vehicle.id()))
            .unwrap();
        assert!(mask_from(&empty, &Selector::Category(Category::Vehicle)).unwrap().is_empty());
    }

    fn depth_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), proptest::collection::vec(1.0f32..80.0, h * w))
        })
    }

    proptest! {
        #[test]
        fn category_target_decomposes((h, w, v) in depth_strategy(), bits in any::<u64>(), alpha in -0.45f64..0.45) {
            let d = map(h, w, &v);
            let m = Mask::from_fn(h, w, |r, c| bits >> ((r * w + c) % 64) & 1 == 1);
            let (t, _) = category_scale_target(&d, &m, alpha, R).unwrap();
            for i in 0..h * w {
                let expect = if m.data[i] { R.clamp(((1.0 + alpha) * v[i] as f64) as f32) } else { v[i] };
                prop_assert_eq!(t.data()[i], expect);
                prop_assert!(R.contains(t.data()[i]));
            }
        }

        #[test]
        fn removal_is_local((h, w, v) in depth_strategy(), bits in any::<u64>()) {
            let d = map(h, w, &v);
            let m = Mask::from_fn(h, w, |r, c| bits >> ((r * w + c) % 64) & 1 == 1);
            prop_assume!(m.count() < h * w);
            let t = remove_instance_target(&d, &m).unwrap();
            for i in 0..h * w {
                if !m.data[i] {
                    prop_assert_eq!(t.data()[i], v[i]);
                }
                prop_assert!(R.contains(t.data()[i]));
            }
        }

        #[test]
        fn flips_commute_and_invert((h, w, v) in depth_strategy()) {
            let d = map(h, w, &v);
            let hv = flip_target(&flip_target(&d, Axis::H).unwrap(), Axis::V).unwrap();
            let vh = flip_target(&flip_target(&d, Axis::V).unwrap(), Axis::H).unwrap();
            prop_assert_eq!(&hv, &vh);
            prop_assert_eq!(flip_target(&flip_target(&d, Axis::H).unwrap(), Axis::H).unwrap(), d);
        }

        #[test]
        fn scale_stays_in_range((h, w, v) in depth_strategy(), alpha in -0.45f64..0.45) {
            let t = scale_target(&map(h, w, &v), alpha, R).unwrap();
            prop_assert!(t.data().iter().all(|&x| R.contains(x)));
        }
    }
}
