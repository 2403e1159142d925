use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, LabelMap, Scene, SceneParams};
use crate::error::{config_err, Error, Result};
use crate::pnm::{self, Raster};
use crate::tensor::Tensor;

impl SceneParams {
    pub const KEYS: [&'static str; 11] = [
        "height",
        "width",
        "depth_min",
        "depth_max",
        "horizon",
        "horizon_jitter",
        "camera_height",
        "bottom_depth",
        "min_objects",
        "max_objects",
        "noise_std",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| config_err!("bad value '{v}' for {key}"))
        }
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "depth_min" => self.depth_min = parse(key, value)?,
            "depth_max" => self.depth_max = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "horizon_jitter" => self.horizon_jitter = parse(key, value)?,
            "camera_height" => self.camera_height = parse(key, value)?,
            "bottom_depth" => self.bottom_depth = parse(key, value)?,
            "min_objects" => self.min_objects = parse(key, value)?,
            "max_objects" => self.max_objects = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            other => return Err(config_err!("unknown scene parameter '{other}'")),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("depth_min", self.depth_min.to_string()),
            ("depth_max", self.depth_max.to_string()),
            ("horizon", self.horizon.to_string()),
            ("horizon_jitter", self.horizon_jitter.to_string()),
            ("camera_height", self.camera_height.to_string()),
            ("bottom_depth", self.bottom_depth.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("noise_std", self.noise_std.to_string()),
        ]
    }
}

fn to_raster(t: &Tensor) -> Raster {
    let (c, h, w) = t.chw().expect("image is [C,H,W]");
    let plane = h * w;
    let mut data = vec![0u8; c * plane];
    for i in 0..plane {
        for ch in 0..c {
            data[i * c + ch] = (t.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Raster {
        width: w,
        height: h,
        channels: c,
        data,
    }
}

fn from_raster(r: &Raster) -> Tensor {
    let plane = r.width * r.height;
    Tensor::from_fn(vec![r.channels, r.height, r.width], |k| {
        let (ch, i) = (k / plane, k % plane);
        r.data[i * r.channels + ch] as f32 / 255.0
    })
}

fn label_raster(m: &LabelMap) -> Raster {
    Raster {
        width: m.width,
        height: m.height,
        channels: 1,
        data: m.data.clone(),
    }
}

/// Writes `image.ppm`, `depth.dtns`, `semantic.pgm` and `instance.pgm`.
pub fn save_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pnm::write(dir.join("image.ppm"), &to_raster(&scene.image), None)?;
    scene.depth.save_dtns(dir.join("depth.dtns"))?;
    pnm::write(dir.join("semantic.pgm"), &label_raster(&scene.semantic), None)?;
    pnm::write(dir.join("instance.pgm"), &label_raster(&scene.instance), None)
}

pub fn load_scene(dir: impl AsRef<Path>, seed: u64) -> Result<Scene> {
    let dir = dir.as_ref();
    let img = pnm::read(dir.join("image.ppm"))?;
    let depth = Tensor::load_dtns(dir.join("depth.dtns"))?;
    let sem = pnm::read(dir.join("semantic.pgm"))?;
    let inst = pnm::read(dir.join("instance.pgm"))?;
    let (h, w) = (img.height, img.width);
    let consistent = img.channels == 3
        && depth.shape() == [1, h, w]
        && [&sem, &inst]
            .iter()
            .all(|r| r.channels == 1 && r.height == h && r.width == w);
    if !consistent {
        return Err(Error::format(dir, "scene files disagree on size"));
    }
    let label = |r: Raster| LabelMap {
        height: h,
        width: w,
        data: r.data,
    };
    Ok(Scene {
        image: from_raster(&img),
        depth,
        semantic: label(sem),
        instance: label(inst),
        seed,
    })
}

fn scene_dir(split: &str, i: usize) -> String {
    format!("{split}/scene_{i:04}")
}

/// Writes every scene plus `manifest.txt` recording parameters, seeds and
/// per-scene checksums.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let mut m = String::from("# advdepth dataset manifest\n");
    let _ = writeln!(m, "seed = {}", ds.seed);
    for (k, v) in ds.params.pairs() {
        let _ = writeln!(m, "{k} = {v}");
    }
    for (split, scenes) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, s) in scenes.iter().enumerate() {
            let rel = scene_dir(split, i);
            save_scene(dir.join(&rel), s)?;
            let _ = writeln!(m, "scene {split} {rel} {} {}", s.seed, s.checksum());
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, m).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`save_dataset`], verifying every checksum.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut params = SceneParams::default();
    let mut seed = None;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::format(&mpath, format!("line {}: {msg}", n + 1));
        if let Some(rest) = line.strip_prefix("scene ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let [split, rel, s, sum] = f[..] else {
                return Err(bad("expected 'scene <split> <dir> <seed> <sha256>'".into()));
            };
            let s: u64 = s.parse().map_err(|_| bad(format!("bad seed '{s}'")))?;
            let scene = load_scene(dir.join(rel), s)?;
            if scene.checksum() != sum {
                return Err(bad(format!("checksum mismatch for {rel}")));
            }
            match split {
                "train" => train.push(scene),
                "test" => test.push(scene),
                other => return Err(bad(format!("unknown split '{other}'"))),
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad("expected key = value".into()))?;
        match k.trim() {
            "seed" => seed = Some(v.trim().parse().map_err(|_| bad("bad seed".into()))?),
            key => params.set(key, v).map_err(|e| bad(e.to_string()))?,
        }
    }
    Ok(Dataset {
        params,
        seed: seed.ok_or_else(|| Error::format(&mpath, "missing seed"))?,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::super::make_dataset;
    use super::*;

    #[test]
    fn dataset_roundtrips_through_disk() {
        let p = SceneParams {
            height: 16,
            width: 32,
            max_objects: 4,
            ..SceneParams::default()
        };
        let ds = make_dataset(9, 3, 2, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn tampered_scene_fails_checksum() {
        let p = SceneParams {
            height: 16,
            width: 32,
            ..SceneParams::default()
        };
        let ds = make_dataset(1, 1, 1, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let mut d = ds.test[0].depth.clone();
        d.data_mut()[0] += 1.0;
        d.save_dtns(dir.path().join("test/scene_0000/depth.dtns")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
