//! Procedural dataset generation and manifest handling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ArchConfig;
use crate::config::SynthConfig;
use crate::error::{ensure, Error, Result};
use crate::events::{read_events, synth_events, synth_lowlight, voxelize, write_events, EventStream};
use crate::imaging::{load_png, save_png};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}, expected train or test"))),
        }
    }
}

/// One `(lowlight, events, gt)` triplet. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub lowlight: PathBuf,
    pub events: PathBuf,
    pub gt: PathBuf,
}

impl ManifestEntry {
    pub fn name(&self) -> String {
        self.gt
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::input(path, e.to_string()))?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::input(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Checks that every file exists and each triplet shares one resolution.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let low = load_png(&self.resolve(&e.lowlight))?;
            let gt = load_png(&self.resolve(&e.gt))?;
            let ev_path = self.resolve(&e.events);
            let ev = read_events(&ev_path)?;
            check_aligned(&low, &gt, &ev, &ev_path)?;
        }
        Ok(())
    }
}

fn check_aligned(low: &Tensor, gt: &Tensor, ev: &EventStream, ev_path: &Path) -> Result<()> {
    let (_, h, w) = low.dims3()?;
    ensure!(
        gt.shape() == low.shape(),
        Error::Shape(format!("lowlight {:?} and ground truth {:?} differ", low.shape(), gt.shape()))
    );
    ensure!(
        (ev.height, ev.width) == (h, w),
        Error::input(
            ev_path,
            format!("events are {}x{}, image is {h}x{w}", ev.height, ev.width)
        )
    );
    Ok(())
}

/// A loaded triplet, with events already voxelised.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub lowlight: Tensor,
    pub voxels: Tensor,
    pub gt: Tensor,
}

/// Voxel grid with the bin count and normalisation of `arch`.
pub fn prepare_voxels(stream: &EventStream, arch: &ArchConfig) -> Result<Tensor> {
    let grid = voxelize(stream, arch.event_bins)?;
    let grid = if arch.normalize_voxels { grid.normalized() } else { grid };
    Ok(grid.into_tensor())
}

pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry, arch: &ArchConfig) -> Result<Sample> {
    let lowlight = load_png(&manifest.resolve(&entry.lowlight))?;
    let gt = load_png(&manifest.resolve(&entry.gt))?;
    let ev_path = manifest.resolve(&entry.events);
    let stream = read_events(&ev_path)?;
    check_aligned(&lowlight, &gt, &stream, &ev_path)?;
    Ok(Sample {
        name: entry.name(),
        lowlight,
        voxels: prepare_voxels(&stream, arch)?,
        gt,
    })
}

pub fn load_split(manifest: &Manifest, split: Split, arch: &ArchConfig) -> Result<Vec<Sample>> {
    manifest.split(split).map(|e| load_sample(manifest, e, arch)).collect()
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// A `[3, size, size]` scene: a two-colour gradient, a few flat discs and
/// rectangles, and one patch of sinusoidal stripes.
pub fn procedural_scene(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colour = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.15..0.85)) };
    let (c0, c1) = (colour(&mut rng), colour(&mut rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let n = size as f64;
    let mut img = Tensor::from_fn([3, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        let (u, v) = (2.0 * x as f64 / n - 1.0, 2.0 * y as f64 / n - 1.0);
        let t = 0.5 + 0.5 * (u * theta.cos() + v * theta.sin()) / std::f64::consts::SQRT_2;
        c0[c] + (c1[c] - c0[c]) * t
    });
    let shapes = rng.random_range(3..=5);
    for _ in 0..shapes {
        let col = colour(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let r = rng.random_range(0.1..0.3) * n;
        let disc = rng.random_bool(0.5);
        paint(&mut img, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            if disc {
                dx * dx + dy * dy <= r * r
            } else {
                dx.abs() <= r && dy.abs() <= 0.6 * r
            }
        }, |c, _, _| col[c]);
    }
    let (x0, y0) = (rng.random_range(0.0..0.5 * n), rng.random_range(0.0..0.5 * n));
    let side = rng.random_range(0.25..0.5) * n;
    let freq = rng.random_range(0.3..0.9);
    let amp = rng.random_range(0.08..0.15);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (fx, fy) = (freq * phi.cos(), freq * phi.sin());
    let base = img.clone();
    paint(
        &mut img,
        |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side,
        |c, x, y| base.at3(c, y as usize, x as usize) + amp * (fx * x + fy * y).sin(),
    );
    img.clamp(0.02, 0.98)
}

fn paint(img: &mut Tensor, inside: impl Fn(f64, f64) -> bool, value: impl Fn(usize, f64, f64) -> f64) {
    let (_, h, w) = img.dims3().expect("scene is [3, H, W]");
    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            if inside(fx, fy) {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = value(c, fx, fy);
                }
            }
        }
    }
}

/// `gt` scaled by `factor` and translated by `shift` pixels along both axes,
/// with edge replication.
pub fn shifted_variant(gt: &Tensor, factor: f64, shift: usize) -> Result<Tensor> {
    let (c, h, w) = gt.dims3()?;
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        factor * gt.at3(ch, y.saturating_sub(shift), x.saturating_sub(shift))
    }))
}

/// Writes `n_scenes` triplets under `out_dir` plus a manifest, and returns it.
/// The last `test_fraction` of the scenes are tagged `test`.
pub fn make_synthetic(out_dir: &Path, synth: &SynthConfig, seed: u64) -> Result<Manifest> {
    synth.validate()?;
    for sub in ["gt", "lowlight", "events"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let n_test = (synth.n_scenes as f64 * synth.test_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(synth.n_scenes);
    for i in 0..synth.n_scenes {
        let (scene_seed, noise_seed) = (rng.random::<u64>(), rng.random::<u64>());
        let name = format!("scene_{i:03}");
        let gt = quantize(&procedural_scene(synth.size, scene_seed));
        let low = synth_lowlight(&gt, synth.gain, synth.gamma, synth.noise_std, noise_seed)?;
        let reference = shifted_variant(&gt, synth.brightness_shift, synth.shift_px)?;
        let events = synth_events(&reference, &gt, synth.contrast_threshold, synth.substeps)?;
        let entry = ManifestEntry {
            split: if i + n_test >= synth.n_scenes { Split::Test } else { Split::Train },
            lowlight: PathBuf::from(format!("lowlight/{name}.png")),
            events: PathBuf::from(format!("events/{name}.txt")),
            gt: PathBuf::from(format!("gt/{name}.png")),
        };
        save_png(&gt, &out_dir.join(&entry.gt))?;
        save_png(&low, &out_dir.join(&entry.lowlight))?;
        write_events(out_dir.join(&entry.events), &events)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_scenes: 3,
            size: 16,
            test_fraction: 0.34,
            ..Default::default()
        }
    }

    #[test]
    fn scenes_are_seeded_and_in_range() {
        let a = procedural_scene(32, 5);
        assert_eq!(a, procedural_scene(32, 5));
        assert_ne!(a, procedural_scene(32, 6));
        assert!(a.data().iter().all(|v| (0.02..=0.98).contains(v)));
    }

    #[test]
    fn dataset_is_byte_identical_across_runs() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = make_synthetic(d1.path(), &small(), 9).unwrap();
        make_synthetic(d2.path(), &small(), 9).unwrap();
        let files = m1
            .entries
            .iter()
            .flat_map(|e| [e.lowlight.clone(), e.events.clone(), e.gt.clone()])
            .chain([PathBuf::from(MANIFEST_FILE)]);
        for f in files {
            assert_eq!(fs::read(d1.path().join(&f)).unwrap(), fs::read(d2.path().join(&f)).unwrap(), "{f:?}");
        }
    }

    #[test]
    fn manifest_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let made = make_synthetic(dir.path(), &small(), 1).unwrap();
        let loaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, made);
        loaded.validate().unwrap();
        assert_eq!(loaded.split(Split::Test).count(), 1);
        assert_eq!(loaded.split(Split::Train).count(), 2);
        let arch = ArchConfig::micro();
        for s in load_split(&loaded, Split::Train, &arch).unwrap() {
            assert_eq!(s.voxels.shape(), &[arch.event_bins, 16, 16]);
            assert_eq!(s.gt.shape(), s.lowlight.shape());
        }
    }

    #[test]
    fn shift_beyond_one_threshold_gives_events() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic(dir.path(), &small(), 2).unwrap();
        for e in &m.entries {
            assert!(!read_events(m.resolve(&e.events)).unwrap().is_empty());
        }
    }

    #[test]
    fn misaligned_events_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic(dir.path(), &small(), 3).unwrap();
        write_events(m.resolve(&m.entries[0].events), &EventStream::empty(0.0, 1.0, 8, 8)).unwrap();
        let err = load_sample(&m, &m.entries[0], &ArchConfig::micro()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(m.validate().is_err());
    }
}
