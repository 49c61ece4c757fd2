//! Synthetic multi-channel volumes for the toy pipeline: three nested
//! ellipsoid shells (whole region, core, enhancing center) rendered into four
//! channels with distinct shell contrasts, a per-site intensity shift that
//! gives sample routing something real to learn, and Gaussian noise.
//! Labels use the clinical {0, 1, 2, 4} convention: 1 core, 2 surrounding
//! shell, 4 enhancing center.

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LABEL_VALUES: [u32; 4] = [0, 1, 2, 4];

/// Per-channel intensity for [background, shell(2), core(1), center(4)].
/// Channel 3 is the contrast-like channel: the enhancing center is far
/// brighter there than anywhere else.
const PROFILES: [[f64; 4]; 4] = [
    [0.10, 0.55, 0.40, 0.50],
    [0.15, 0.70, 0.55, 0.60],
    [0.10, 0.30, 0.65, 0.55],
    [0.05, 0.25, 0.35, 1.50],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub shape: [usize; 3],
    /// Training samples.
    pub count: usize,
    /// Held-out samples.
    pub val_count: usize,
    pub seed: u64,
    pub sites: usize,
    /// Site s is shifted by a value in [-site_shift, +site_shift].
    pub site_shift: f64,
    pub noise_sigma: f64,
    /// Fractional semi-axes of the nested regions, outer to inner,
    /// relative to half the volume extent. Must be strictly decreasing.
    pub radii: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: [32, 32, 32],
            count: 12,
            val_count: 4,
            seed: 0,
            sites: 2,
            site_shift: 0.5,
            noise_sigma: 0.15,
            radii: [0.80, 0.52, 0.28],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("volume shape must be positive".into()));
        }
        if self.sites == 0 {
            return Err(Error::Config("need at least one site".into()));
        }
        if !(self.radii[0] > self.radii[1] && self.radii[1] > self.radii[2] && self.radii[2] > 0.0) {
            return Err(Error::Config(format!("radii {:?} must be strictly decreasing and positive", self.radii)));
        }
        if self.radii[0] > 1.0 {
            return Err(Error::Config("outer radius above 1 leaves the volume".into()));
        }
        if self.noise_sigma < 0.0 || self.site_shift < 0.0 {
            return Err(Error::Config("noise_sigma and site_shift must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn site_name(&self, sample: usize) -> String {
        format!("site{}", sample % self.sites)
    }

    fn site_offset(&self, sample: usize) -> f64 {
        let s = (sample % self.sites) as f64;
        if self.sites == 1 {
            0.0
        } else {
            -self.site_shift + 2.0 * self.site_shift * s / (self.sites - 1) as f64
        }
    }
}

pub struct Sample {
    /// (1, 4, D, H, W)
    pub volume: Tensor<f32>,
    /// (D, H, W) values from LABEL_VALUES
    pub labels: Vec<u32>,
    pub site: String,
}

pub struct ToyDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn sample_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(0x9E3779B97F4A7C15)
}

fn render(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let [d, h, w] = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index as u64 + 1));
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
    let half = [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0];
    // one shared center keeps the shells nested no matter the jitter
    let center: Vec<f64> = half.iter().map(|&c| c * (1.0 + 0.2 * (rng.random::<f64>() - 0.5))).collect();
    let stretch: Vec<f64> = (0..3).map(|_| 0.85 + 0.3 * rng.random::<f64>()).collect();
    let axes: Vec<[f64; 3]> = spec
        .radii
        .iter()
        .map(|&r| [r * half[0] * stretch[0], r * half[1] * stretch[1], r * half[2] * stretch[2]])
        .collect();

    let vox = d * h * w;
    let mut labels = vec![0u32; vox];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let dist = |a: &[f64; 3]| -> f64 {
                    (0..3).map(|i| ((p[i] - center[i]) / a[i]).powi(2)).sum()
                };
                let idx = (z * h + y) * w + x;
                labels[idx] = if dist(&axes[2]) <= 1.0 {
                    4
                } else if dist(&axes[1]) <= 1.0 {
                    1
                } else if dist(&axes[0]) <= 1.0 {
                    2
                } else {
                    0
                };
            }
        }
    }

    let shift = spec.site_offset(index);
    let mut vol = vec![0f32; 4 * vox];
    for c in 0..4 {
        for (i, &lab) in labels.iter().enumerate() {
            let region = match lab {
                0 => 0,
                2 => 1,
                1 => 2,
                4 => 3,
                _ => unreachable!(),
            };
            let v = PROFILES[c][region] + shift + if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            vol[c * vox + i] = v as f32;
        }
    }
    Ok(Sample {
        volume: Tensor::new(vec![1, 4, d, h, w], vol)?,
        labels,
        site: spec.site_name(index),
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.count);
    let mut val = Vec::with_capacity(spec.val_count);
    for i in 0..spec.count + spec.val_count {
        let s = render(spec, i)?;
        if i < spec.count {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    Ok(ToyDataset { train, val })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume: String,
    pub labels: String,
    pub site: String,
    pub split: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub samples: Vec<ManifestEntry>,
}

/// Writes volume/label pairs plus manifest.json under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = generate(spec)?;
    let mut samples = Vec::new();
    let mut write_split = |list: &[Sample], split: &str, base: usize| -> Result<()> {
        for (j, s) in list.iter().enumerate() {
            let i = base + j;
            let vol_name = format!("sample{i:04}_vol.m4fv");
            let lab_name = format!("sample{i:04}_lab.m4fv");
            io::write_volume(dir.join(&vol_name), &s.volume)?;
            let [d, h, w] = spec.shape;
            let lab_t = Tensor::new(vec![1, 1, d, h, w], s.labels.iter().map(|&v| v as f32).collect())?;
            io::write_volume(dir.join(&lab_name), &lab_t)?;
            samples.push(ManifestEntry {
                volume: vol_name,
                labels: lab_name,
                site: s.site.clone(),
                split: split.into(),
            });
        }
        Ok(())
    };
    write_split(&data.train, "train", 0)?;
    write_split(&data.val, "val", spec.count)?;
    let manifest = Manifest { spec: spec.clone(), samples };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads a dataset written by `write_dataset`.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, ToyDataset)> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for entry in &manifest.samples {
        let volume: Tensor<f32> = io::read_volume(dir.join(&entry.volume))?;
        let lab_t: Tensor<f32> = io::read_volume(dir.join(&entry.labels))?;
        let labels = lab_t
            .data()
            .iter()
            .map(|&v| {
                let r = v.round();
                if LABEL_VALUES.contains(&(r as u32)) && (v - r).abs() < 1e-3 {
                    Ok(r as u32)
                } else {
                    Err(Error::Data(format!("label volume {} holds non-label value {v}", entry.labels)))
                }
            })
            .collect::<Result<Vec<u32>>>()?;
        let sample = Sample { volume, labels, site: entry.site.clone() };
        if entry.split == "val" {
            val.push(sample);
        } else {
            train.push(sample);
        }
    }
    Ok((manifest, ToyDataset { train, val }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(labels: &[u32]) -> (usize, usize, usize) {
        let wt = labels.iter().filter(|&&l| l == 1 || l == 2 || l == 4).count();
        let tc = labels.iter().filter(|&&l| l == 1 || l == 4).count();
        let et = labels.iter().filter(|&&l| l == 4).count();
        (wt, tc, et)
    }

    #[test]
    fn regions_are_nested_and_nonempty() {
        let spec = SyntheticSpec::default();
        let data = generate(&spec).unwrap();
        for s in data.train.iter().chain(&data.val) {
            assert!(s.labels.iter().all(|l| LABEL_VALUES.contains(l)));
            let (wt, tc, et) = counts(&s.labels);
            assert!(et > 0, "empty center region");
            assert!(tc > et, "core shell empty");
            assert!(wt > tc, "outer shell empty");
        }
    }

    #[test]
    fn same_spec_same_bytes() {
        let spec = SyntheticSpec { count: 3, val_count: 1, ..SyntheticSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.volume.data(), y.volume.data());
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.site, y.site);
        }
    }

    #[test]
    fn different_samples_differ() {
        let spec = SyntheticSpec { count: 2, val_count: 0, ..SyntheticSpec::default() };
        let d = generate(&spec).unwrap();
        assert_ne!(d.train[0].volume.data(), d.train[1].volume.data());
    }

    #[test]
    fn empty_dataset() {
        let spec = SyntheticSpec { count: 0, val_count: 0, ..SyntheticSpec::default() };
        let d = generate(&spec).unwrap();
        assert!(d.train.is_empty() && d.val.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &spec).unwrap();
        assert!(m.samples.is_empty());
    }

    #[test]
    fn site_shift_separates_channel_means() {
        let spec = SyntheticSpec { count: 6, val_count: 0, noise_sigma: 0.05, ..SyntheticSpec::default() };
        let d = generate(&spec).unwrap();
        let mean = |s: &Sample| {
            s.volume.data().iter().map(|&v| v as f64).sum::<f64>() / s.volume.len() as f64
        };
        let m0: f64 = d.train.iter().filter(|s| s.site == "site0").map(mean).sum::<f64>() / 3.0;
        let m1: f64 = d.train.iter().filter(|s| s.site == "site1").map(mean).sum::<f64>() / 3.0;
        assert!(((m1 - m0) - 1.0).abs() < 0.05, "mean gap {}", m1 - m0);
    }

    #[test]
    fn contrast_channel_highlights_center() {
        let spec = SyntheticSpec { sites: 1, count: 1, val_count: 0, noise_sigma: 0.0, ..SyntheticSpec::default() };
        let d = generate(&spec).unwrap();
        let s = &d.train[0];
        let vox = s.labels.len();
        let ch3 = &s.volume.data()[3 * vox..4 * vox];
        let et_mean = s
            .labels
            .iter()
            .zip(ch3)
            .filter(|(&l, _)| l == 4)
            .map(|(_, &v)| v as f64)
            .sum::<f64>()
            / counts(&s.labels).2 as f64;
        assert!(et_mean > 1.2);
    }

    #[test]
    fn dataset_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { count: 2, val_count: 1, shape: [8, 8, 8], ..SyntheticSpec::default() };
        let manifest = write_dataset(dir.path(), &spec).unwrap();
        assert_eq!(manifest.samples.len(), 3);
        let (m2, data) = read_dataset(dir.path()).unwrap();
        assert_eq!(m2.samples.len(), 3);
        assert_eq!(data.train.len(), 2);
        assert_eq!(data.val.len(), 1);
        let fresh = generate(&spec).unwrap();
        for (a, b) in fresh.train.iter().zip(&data.train) {
            assert_eq!(a.volume.data(), b.volume.data());
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = SyntheticSpec::default();
        s.radii = [0.5, 0.6, 0.3];
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::default();
        s.sites = 0;
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::default();
        s.shape = [0, 8, 8];
        assert!(s.validate().is_err());
    }
}
