//! Synthetic multi-site phantom datasets.
//!
//! A phantom is a set of nested, smoothly deformed ellipses on a zero
//! background. Each region has a fixed class intensity with a small
//! per-subject offset and a faint low-frequency texture. Sites share the
//! anatomy of every subject index and differ only by an intensity shift.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize_value, ImageBatch};
use crate::rng::{child_seed, child_seed_idx, rng, Rng};
use crate::scalar::Scalar;
use crate::seg::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Intensity shift of one acquisition site, applied to `[0, 1]` images in
/// the order gamma, gain, brightness, bias field, noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftSpec {
    pub gamma: f64,
    pub gain: f64,
    pub brightness: f64,
    /// Peak relative amplitude of the multiplicative bias field.
    pub bias_amplitude: f64,
    /// Wavelength of the bias field, as a fraction of the image size.
    pub bias_scale: f64,
    pub noise_sigma: f64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        DomainShiftSpec::identity()
    }
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        DomainShiftSpec { gamma: 1.0, gain: 1.0, brightness: 0.0, bias_amplitude: 0.0, bias_scale: 1.0, noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.gain, self.brightness, self.bias_amplitude, self.bias_scale, self.noise_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.gamma <= 0.0 || self.bias_scale <= 0.0 || self.noise_sigma < 0.0 || self.bias_amplitude < 0.0 {
            return Err(Error::invalid(format!("invalid domain shift {self:?}")));
        }
        Ok(())
    }

    /// Default shifts of sites 2–4.
    pub fn default_targets() -> Vec<DomainShiftSpec> {
        vec![
            DomainShiftSpec { gamma: 0.7, gain: 1.15, brightness: 0.06, bias_amplitude: 0.1, bias_scale: 1.0, noise_sigma: 0.004 },
            DomainShiftSpec { gamma: 1.4, gain: 0.8, brightness: 0.03, bias_amplitude: 0.12, bias_scale: 0.8, noise_sigma: 0.004 },
            DomainShiftSpec { gamma: 1.0, gain: 1.3, brightness: 0.1, bias_amplitude: 0.08, bias_scale: 1.2, noise_sigma: 0.006 },
        ]
    }
}

/// Smooth field in roughly `[−1, 1]`: a normalized sum of three plane waves.
fn smooth_field(h: usize, w: usize, wavelength: f64, r: &mut Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = r.random_range(0.0..PI);
            let lambda = wavelength * r.random_range(0.8..1.25);
            (theta, lambda, r.random_range(0.0..2.0 * PI))
        })
        .collect();
    let size = h.max(w) as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 / size, j as f64 / size);
            let v: f64 = waves
                .iter()
                .map(|&(th, lam, ph)| (2.0 * PI * (x * th.cos() + y * th.sin()) / lam + ph).sin())
                .sum();
            out.push(v / 3f64.sqrt());
        }
    }
    out
}

/// Applies `spec` to a continuous `[0, 1]` image and re-quantizes to levels.
pub fn apply_domain_shift(image: &[f64], h: usize, w: usize, spec: &DomainShiftSpec, r: &mut Rng) -> Vec<u8> {
    assert_eq!(image.len(), h * w, "image does not match {h}×{w}");
    let field = if spec.bias_amplitude > 0.0 {
        smooth_field(h, w, spec.bias_scale, r).into_iter().map(|f| 1.0 + spec.bias_amplitude * f).collect()
    } else {
        vec![1.0; h * w]
    };
    image
        .iter()
        .zip(&field)
        .map(|(&v, &f)| {
            let mut y = v.max(0.0).powf(spec.gamma) * spec.gain + spec.brightness;
            y *= f;
            if spec.noise_sigma > 0.0 {
                let n: f64 = StandardNormal.sample(r);
                y += spec.noise_sigma * n;
            }
            quantize_value(y)
        })
        .collect()
}

/// Phantom shape and intensity parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Outer-ellipse semi-axes as fractions of height and width.
    pub outer_radius: [f64; 2],
    /// Radius of the innermost region relative to the outer ellipse.
    pub inner_fraction: f64,
    pub deformation: f64,
    pub intensity_range: [f64; 2],
    pub intensity_jitter: f64,
    pub texture: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 64,
            width: 64,
            classes: 6,
            outer_radius: [0.4, 0.36],
            inner_fraction: 0.3,
            deformation: 0.05,
            intensity_range: [0.2, 0.9],
            intensity_jitter: 0.02,
            texture: 0.015,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("phantoms need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > 16 {
            return Err(Error::invalid(format!("at most 16 classes are supported, got {}", self.classes)));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::invalid(format!("phantom size {}×{} is not divisible by 16", self.height, self.width)));
        }
        Ok(())
    }

    /// Base intensity of every foreground class: evenly spaced over the
    /// range, assigned in a fixed stride order so nesting depth and
    /// brightness are decorrelated.
    pub fn class_intensities(&self) -> Vec<f64> {
        let m = self.classes - 1;
        let stride = (2..).find(|s| gcd(*s, m) == 1).filter(|_| m > 2).unwrap_or(1);
        let [lo, hi] = self.intensity_range;
        let mut out = vec![0.0];
        for k in 0..m {
            let slot = (k * stride) % m;
            out.push(if m == 1 { hi } else { lo + (hi - lo) * slot as f64 / (m - 1) as f64 });
        }
        out
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One phantom: continuous `[0, 1]` image and its label mask.
pub fn generate_phantom(spec: &PhantomSpec, r: &mut Rng) -> Result<(Vec<f64>, LabelMask)> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.classes);
    let (cy, cx) = (h as f64 / 2.0 + r.random_range(-0.03..0.03) * h as f64, w as f64 / 2.0 + r.random_range(-0.03..0.03) * w as f64);
    let rot: f64 = r.random_range(-0.3..0.3);
    let ry = spec.outer_radius[0] * h as f64 * r.random_range(0.95..1.05);
    let rx = spec.outer_radius[1] * w as f64 * r.random_range(0.95..1.05);

    struct Region {
        cy: f64,
        cx: f64,
        scale: f64,
        harmonics: [(f64, f64); 3],
    }
    let regions: Vec<Region> = (1..k)
        .map(|c| {
            let t = (c - 1) as f64 / (k - 2).max(1) as f64;
            let scale = 1.0 - (1.0 - spec.inner_fraction) * t;
            let off = 0.04 * scale;
            Region {
                cy: cy + r.random_range(-off..=off) * ry,
                cx: cx + r.random_range(-off..=off) * rx,
                scale,
                harmonics: [0; 3].map(|_| (r.random_range(-spec.deformation..=spec.deformation), r.random_range(0.0..2.0 * PI))),
            }
        })
        .collect();

    let base = spec.class_intensities();
    let offsets: Vec<f64> = (0..k).map(|_| r.random_range(-spec.intensity_jitter..=spec.intensity_jitter)).collect();
    let texture = smooth_field(h, w, 0.35, r);

    let (cos, sin) = (rot.cos(), rot.sin());
    let mut labels = vec![0u8; h * w];
    let mut image = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut label = 0;
            for (ri, reg) in regions.iter().enumerate() {
                let (dy, dx) = (i as f64 + 0.5 - reg.cy, j as f64 + 0.5 - reg.cx);
                let (u, v) = ((dy * cos + dx * sin) / ry, (-dy * sin + dx * cos) / rx);
                let rho = u.hypot(v);
                let theta = v.atan2(u);
                let bound: f64 = reg.scale
                    * (1.0 + reg.harmonics.iter().enumerate().map(|(m, (a, ph))| a * ((m + 2) as f64 * theta + ph).cos()).sum::<f64>());
                if rho <= bound {
                    label = ri + 1;
                }
            }
            let idx = i * w + j;
            labels[idx] = label as u8;
            if label > 0 {
                image[idx] = (base[label] + offsets[label] + spec.texture * texture[idx]).clamp(0.0, 1.0);
            }
        }
    }
    Ok((image, LabelMask::new(h, w, k, labels)?))
}

/// Generator seed and shift that produced a site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub shift: DomainShiftSpec,
}

/// Images, masks and split assignment of one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: String,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<Vec<u8>>,
    pub masks: Vec<LabelMask>,
    pub splits: Vec<Split>,
    pub provenance: Provenance,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Discrete batch of the given items.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> ImageBatch<T> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            data.extend(self.images[i].iter().map(|&v| T::lit(f64::from(v))));
        }
        ImageBatch::discrete(Tensor::from_vec([idx.len(), 1, h, w], data).expect("image sizes")).expect("levels are valid")
    }

    pub fn split_batch<T: Scalar>(&self, split: Split) -> ImageBatch<T> {
        self.batch(&self.indices(split))
    }

    pub fn split_masks(&self, split: Split) -> Vec<LabelMask> {
        self.indices(split).into_iter().map(|i| self.masks[i].clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.masks.len() != n || self.splits.len() != n {
            return Err(Error::invalid(format!("site {}: images, masks and splits are not aligned", self.domain_id)));
        }
        for (img, m) in self.images.iter().zip(&self.masks) {
            if img.len() != self.height * self.width || m.height() != self.height || m.width() != self.width {
                return Err(Error::invalid(format!("site {}: item size differs from {}×{}", self.domain_id, self.height, self.width)));
            }
        }
        Ok(())
    }
}

/// 60/15/25 split sizes, each rounded to the nearest item.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.15 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Layout of a multi-site build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiteConfig {
    pub images_per_site: usize,
    pub phantom: PhantomSpec,
    /// Shifts of sites 2.. (site 1 is always the identity).
    pub targets: Vec<DomainShiftSpec>,
}

impl Default for SiteConfig {
    fn default() -> Self {
        SiteConfig { images_per_site: 20, phantom: PhantomSpec::default(), targets: DomainShiftSpec::default_targets() }
    }
}

/// One dataset per site; subject `i` has the same anatomy at every site.
pub fn build_sites(seed: u64, config: &SiteConfig) -> Result<Vec<DomainDataset>> {
    config.phantom.validate()?;
    let n = config.images_per_site;
    let subjects: Vec<(Vec<f64>, LabelMask)> = (0..n)
        .map(|i| generate_phantom(&config.phantom, &mut rng(child_seed_idx(seed, "subject", i as u64))))
        .collect::<Result<_>>()?;

    let (train, val, _) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(child_seed(seed, "split")));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let shifts = std::iter::once(DomainShiftSpec::identity()).chain(config.targets.iter().cloned());
    let (h, w) = (config.phantom.height, config.phantom.width);
    shifts
        .enumerate()
        .map(|(s, shift)| {
            shift.validate()?;
            let site_seed = child_seed_idx(seed, "site", s as u64);
            let images = subjects
                .iter()
                .enumerate()
                .map(|(i, (img, _))| apply_domain_shift(img, h, w, &shift, &mut rng(child_seed_idx(site_seed, "shift", i as u64))))
                .collect();
            Ok(DomainDataset {
                domain_id: format!("site{}", s + 1),
                height: h,
                width: w,
                classes: config.phantom.classes,
                images,
                masks: subjects.iter().map(|(_, m)| m.clone()).collect(),
                splits: splits.clone(),
                provenance: Provenance { seed: site_seed, shift },
            })
        })
        .collect()
}

/// L1 distance between the normalized 256-bin histograms of two sites.
pub fn histogram_distance(a: &DomainDataset, b: &DomainDataset) -> f64 {
    let hist = |d: &DomainDataset| {
        let mut hgm = [0.0f64; 256];
        let total = (d.len() * d.height * d.width) as f64;
        for img in &d.images {
            for &v in img {
                hgm[v as usize] += 1.0 / total;
            }
        }
        hgm
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub domain_id: String,
    pub count: usize,
    pub provenance: Provenance,
    pub splits: Vec<Split>,
}

/// `manifest.json` at the root of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub sites: Vec<SiteEntry>,
}

pub const DATASET_FORMAT: &str = "harmoflow-sites/1";

/// Writes `manifest.json` plus, per site, `<id>/images.u8` and
/// `<id>/masks.u8`: raw row-major bytes, item after item, `H·W` bytes each.
pub fn save_sites(dir: &Path, seed: u64, sites: &[DomainDataset]) -> Result<()> {
    let first = sites.first().ok_or_else(|| Error::invalid("no sites to save"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in sites {
        s.validate()?;
        let sub = dir.join(&s.domain_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let images: Vec<u8> = s.images.concat();
        let masks: Vec<u8> = s.masks.iter().flat_map(|m| m.data().iter().copied()).collect();
        fs::write(sub.join("images.u8"), images).map_err(|e| Error::io(sub.join("images.u8"), e))?;
        fs::write(sub.join("masks.u8"), masks).map_err(|e| Error::io(sub.join("masks.u8"), e))?;
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.to_string(),
        seed,
        height: first.height,
        width: first.width,
        classes: first.classes,
        sites: sites
            .iter()
            .map(|s| SiteEntry {
                domain_id: s.domain_id.clone(),
                count: s.len(),
                provenance: s.provenance.clone(),
                splits: s.splits.clone(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_sites(dir: &Path) -> Result<Vec<DomainDataset>> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::invalid(format!("unsupported dataset format `{}`", manifest.format)));
    }
    let px = manifest.height * manifest.width;
    manifest
        .sites
        .iter()
        .map(|e| {
            let sub = dir.join(&e.domain_id);
            let images = fs::read(sub.join("images.u8")).map_err(|err| Error::io(sub.join("images.u8"), err))?;
            let masks = fs::read(sub.join("masks.u8")).map_err(|err| Error::io(sub.join("masks.u8"), err))?;
            if images.len() != e.count * px || masks.len() != e.count * px || e.splits.len() != e.count {
                return Err(Error::invalid(format!("site {} does not match its manifest entry", e.domain_id)));
            }
            let masks = masks
                .chunks(px)
                .map(|c| LabelMask::new(manifest.height, manifest.width, manifest.classes, c.to_vec()))
                .collect::<Result<_>>()?;
            Ok(DomainDataset {
                domain_id: e.domain_id.clone(),
                height: manifest.height,
                width: manifest.width,
                classes: manifest.classes,
                images: images.chunks(px).map(<[u8]>::to_vec).collect(),
                masks,
                splits: e.splits.clone(),
                provenance: e.provenance.clone(),
            })
        })
        .collect()
}

/// Binary PGM of one image, for visual inspection.
pub fn write_pgm(path: &Path, image: &[u8], h: usize, w: usize) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(image);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::level_center;

    #[test]
    fn phantom_is_deterministic_and_aligned() {
        let spec = PhantomSpec::default();
        let (a, ma) = generate_phantom(&spec, &mut rng(3)).unwrap();
        let (b, mb) = generate_phantom(&spec, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.len(), ma.height() * ma.width());
    }

    #[test]
    fn phantom_rejects_bad_arguments() {
        let spec = PhantomSpec { classes: 1, ..Default::default() };
        assert!(generate_phantom(&spec, &mut rng(0)).is_err());
        let spec = PhantomSpec { height: 40, ..Default::default() };
        assert!(generate_phantom(&spec, &mut rng(0)).is_err());
    }

    #[test]
    fn every_class_covers_one_percent_over_100_seeds() {
        let spec = PhantomSpec::default();
        for seed in 0..100 {
            let (_, m) = generate_phantom(&spec, &mut rng(seed)).unwrap();
            let px = (m.height() * m.width()) as f64;
            for k in 0..spec.classes as u8 {
                assert!(m.count(k) as f64 >= 0.01 * px, "seed {seed}: class {k} has {} pixels", m.count(k));
            }
        }
    }

    #[test]
    fn class_intensities_are_distinct() {
        let v = PhantomSpec::default().class_intensities();
        assert_eq!(v.len(), 6);
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
    }

    #[test]
    fn identity_shift_only_requantizes() {
        let img: Vec<f64> = (0..256).map(|k| level_center(k as u8)).collect();
        let out = apply_domain_shift(&img, 16, 16, &DomainShiftSpec::identity(), &mut rng(0));
        assert_eq!(out, (0..=255u8).collect::<Vec<_>>());
    }

    #[test]
    fn brightness_closed_form() {
        let spec = DomainShiftSpec { brightness: 0.1, ..DomainShiftSpec::identity() };
        let out = apply_domain_shift(&[0.5; 4], 2, 2, &spec, &mut rng(0));
        assert_eq!(out, vec![quantize_value(0.6); 4]);
    }

    #[test]
    fn default_build_shape_and_determinism() {
        let cfg = SiteConfig::default();
        let sites = build_sites(11, &cfg).unwrap();
        assert_eq!(sites.len(), 4);
        for s in &sites {
            assert_eq!(s.len(), 20);
            assert_eq!(s.indices(Split::Train).len(), 12);
            assert_eq!(s.indices(Split::Val).len(), 3);
            assert_eq!(s.indices(Split::Test).len(), 5);
            assert_eq!(s.masks, sites[0].masks);
            assert_eq!(s.splits, sites[0].splits);
        }
        assert_eq!(sites, build_sites(11, &cfg).unwrap());
        assert_ne!(sites[1].images, sites[0].images);
    }

    #[test]
    fn default_shifts_move_the_histogram() {
        let sites = build_sites(5, &SiteConfig::default()).unwrap();
        for t in &sites[1..] {
            let d = histogram_distance(&sites[0], t);
            assert!(d > 0.5, "{}: histogram distance {d}", t.domain_id);
        }
    }

    #[test]
    fn split_sizes_track_proportions() {
        for n in 1..60 {
            let (a, b, c) = split_sizes(n);
            assert_eq!(a + b + c, n);
            assert!((a as f64 - 0.6 * n as f64).abs() <= 1.0);
            assert!((b as f64 - 0.15 * n as f64).abs() <= 1.0);
            assert!((c as f64 - 0.25 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SiteConfig { images_per_site: 4, ..Default::default() };
        let sites = build_sites(2, &cfg).unwrap();
        save_sites(dir.path(), 2, &sites).unwrap();
        assert_eq!(load_sites(dir.path()).unwrap(), sites);
        write_pgm(&dir.path().join("x.pgm"), &sites[0].images[0], 64, 64).unwrap();
    }
}
