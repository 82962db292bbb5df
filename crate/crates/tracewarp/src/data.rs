//! Synthetic paired datasets with known ground-truth deformations, plus
//! image I/O and normalization.
//!
//! Each pair renders a source image from smooth blobs plus one
//! high-contrast circular feature region, samples a smooth displacement
//! that is anchored at that region (a radial expansion of random magnitude
//! with a smooth random residual on top), warps the source by it, and
//! applies an intensity change strictly inside the region. The model
//! therefore faces both halves of the task: a spatial change that is partly
//! predictable from the visible feature, and an appearance change that no
//! deformation can explain.
//!
//! Every pair records its ground-truth displacement; generation rejects and
//! resamples any field whose Jacobian determinant is not strictly positive.

use crate::deformation::{
    fold_fraction, read_twf, write_twf, DeformationField, DisplacementField,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Circular feature region, in pixel coordinates of the reference frame.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureRegion {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
}

impl FeatureRegion {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let dr = r as f64 - self.row;
        let dc = c as f64 - self.col;
        (dr * dr + dc * dc).sqrt() <= self.radius
    }

    /// Binary mask of the region.
    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| self.contains(i / w, i % w)).collect()
    }
}

/// One training/evaluation sample. Images are `[1,1,H,W]` in [-1, 1].
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub source: Tensor<f32>,
    pub reference: Tensor<f32>,
    pub gt_displacement: Option<DisplacementField<f32>>,
    pub region: Option<FeatureRegion>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_pairs: usize,
    /// Maximum displacement magnitude in pixels.
    pub deform_amplitude: f64,
    /// Gaussian blur sigma (pixels) for the residual random field.
    pub deform_smoothness: f64,
    /// Additive intensity change applied inside the feature region.
    pub intensity_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_pairs: 64,
            deform_amplitude: 2.5,
            deform_smoothness: 6.0,
            intensity_shift: 0.35,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Parse a config file; `.toml` and `.json` are both accepted.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SynthConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be >= 1".into()));
        }
        if !(self.deform_amplitude >= 0.0) {
            return Err(Error::Config(format!(
                "deform_amplitude must be >= 0, got {}",
                self.deform_amplitude
            )));
        }
        if !(self.deform_smoothness > 0.0) {
            return Err(Error::Config(format!(
                "deform_smoothness must be > 0, got {}",
                self.deform_smoothness
            )));
        }
        Ok(())
    }
}

/// Independent RNG stream per pair, derived from the dataset seed.
fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // SplitMix64-style mixing keeps streams uncorrelated.
    let mut z = seed.wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

// ── rendering ───────────────────────────────────────────────────────

fn render_source(size: usize, region: &FeatureRegion, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = size as f64;
    let mut img = vec![0.0f64; size * size];

    // Gentle background ramp.
    let (ar, ac) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    for r in 0..size {
        for c in 0..size {
            img[r * size + c] = -0.85 + ar * r as f64 / s + ac * c as f64 / s;
        }
    }

    // 2-4 smooth anisotropic blobs.
    let n_blobs = rng.gen_range(2..=4usize);
    for _ in 0..n_blobs {
        let cr = rng.gen_range(0.15 * s..0.85 * s);
        let cc = rng.gen_range(0.15 * s..0.85 * s);
        let s1 = rng.gen_range(s / 10.0..s / 4.0);
        let s2 = rng.gen_range(s / 10.0..s / 4.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(0.5..1.5);
        let (ct, st) = (theta.cos(), theta.sin());
        for r in 0..size {
            for c in 0..size {
                let dr = r as f64 - cr;
                let dc = c as f64 - cc;
                let a = ct * dr + st * dc;
                let b = -st * dr + ct * dc;
                let q = (a / s1).powi(2) + (b / s2).powi(2);
                img[r * size + c] += amp * (-0.5 * q).exp();
            }
        }
    }

    // High-contrast feature: a bright disc with a dark nucleus, smooth rims.
    for r in 0..size {
        for c in 0..size {
            let dr = r as f64 - region.row;
            let dc = c as f64 - region.col;
            let d = (dr * dr + dc * dc).sqrt();
            let rim = ((region.radius - d) / 1.2).clamp(-1.0, 1.0) * 0.5 + 0.5;
            img[r * size + c] += 1.4 * rim;
            let nucleus = ((region.radius * 0.45 - d) / 1.0).clamp(-1.0, 1.0) * 0.5 + 0.5;
            img[r * size + c] -= 1.6 * nucleus;
        }
    }

    Tensor::from_vec(
        vec![1, 1, size, size],
        img.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
    )
    .expect("size > 0")
}

/// Separable Gaussian blur of a 2-channel plane stack, truncated at 3 sigma.
fn gaussian_blur_field(field: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..2 {
        let plane = &mut field[ch * h * w..(ch + 1) * h * w];
        // Rows.
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let cc = (c as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * plane[r * w + cc];
                }
                tmp[r * w + c] = acc / ksum;
            }
        }
        // Columns.
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let rr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[rr * w + c];
                }
                plane[r * w + c] = acc / ksum;
            }
        }
    }
}

fn max_vector_norm(field: &[f64], hw: usize) -> f64 {
    (0..hw)
        .map(|i| (field[i] * field[i] + field[hw + i] * field[hw + i]).sqrt())
        .fold(0.0, f64::max)
}

/// Ground-truth displacement: radial expansion anchored at the feature
/// region plus a smooth random residual, capped at `amplitude` pixels.
fn sample_displacement(
    size: usize,
    region: &FeatureRegion,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let hw = size * size;
    let mut field = vec![0.0f64; 2 * hw];
    if cfg.deform_amplitude > 0.0 {
        let magnitude = rng.gen_range(0.35..0.8) * cfg.deform_amplitude;
        let spread = region.radius * 1.6;
        for r in 0..size {
            for c in 0..size {
                let dr = r as f64 - region.row;
                let dc = c as f64 - region.col;
                let d = (dr * dr + dc * dc).sqrt();
                let gain = magnitude * (-0.5 * (d / spread).powi(2)).exp() / d.max(1.0);
                field[r * size + c] = gain * dr;
                field[hw + r * size + c] = gain * dc;
            }
        }

        let mut noise: Vec<f64> = (0..2 * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        gaussian_blur_field(&mut noise, size, size, cfg.deform_smoothness);
        let noise_max = max_vector_norm(&noise, hw);
        if noise_max > 0.0 {
            let target = 0.25 * cfg.deform_amplitude;
            for (f, n) in field.iter_mut().zip(&noise) {
                *f += n * target / noise_max;
            }
        }

        let total_max = max_vector_norm(&field, hw);
        if total_max > cfg.deform_amplitude {
            let s = cfg.deform_amplitude / total_max;
            for f in field.iter_mut() {
                *f *= s;
            }
        }
    }
    Tensor::from_vec(
        vec![1, 2, size, size],
        field.into_iter().map(|v| v as f32).collect(),
    )
    .expect("size > 0")
}

/// Intensity profile of the "surgical" change: full strength in the core,
/// fading to zero strictly inside the region boundary.
fn shift_profile(d: f64, radius: f64) -> f64 {
    ((radius - d) / (0.25 * radius).max(1.0)).clamp(0.0, 1.0)
}

/// Generate one pair. Deterministic in `(cfg.seed, index)`.
pub fn generate_pair(cfg: &SynthConfig, index: usize) -> Result<ImagePair> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = pair_rng(cfg.seed, index);
    let s = size as f64;

    for _attempt in 0..32 {
        let region = FeatureRegion {
            row: rng.gen_range(0.25 * s..0.75 * s),
            col: rng.gen_range(0.25 * s..0.75 * s),
            radius: rng.gen_range(s / 12.0..s / 8.0),
        };
        let source = render_source(size, &region, &mut rng);
        let gt = sample_displacement(size, &region, cfg, &mut rng);
        let displacement = DisplacementField::new(gt)?;
        let phi = DeformationField::from_displacement(displacement.clone());
        if fold_fraction(&phi)? > 0.0 {
            continue; // folded field: resample
        }
        let mut reference = crate::deformation::warp_image(&source, &phi)?;
        if cfg.intensity_shift != 0.0 {
            for r in 0..size {
                for c in 0..size {
                    let dr = r as f64 - region.row;
                    let dc = c as f64 - region.col;
                    let d = (dr * dr + dc * dc).sqrt();
                    let p = shift_profile(d, region.radius);
                    if p > 0.0 {
                        let i = r * size + c;
                        let v = reference.data()[i] as f64 + cfg.intensity_shift * p;
                        reference.data_mut()[i] = v.clamp(-1.0, 1.0) as f32;
                    }
                }
            }
        }
        return Ok(ImagePair {
            id: format!("{index:04}"),
            source,
            reference,
            gt_displacement: Some(displacement),
            region: Some(region),
        });
    }
    Err(Error::Numeric(format!(
        "pair {index}: could not sample a fold-free displacement in 32 attempts \
         (amplitude {}, smoothness {})",
        cfg.deform_amplitude, cfg.deform_smoothness
    )))
}

/// Generate the full dataset; pairs are independent, so generation is
/// parallel and still deterministic in the seed.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<ImagePair>> {
    cfg.validate()?;
    (0..cfg.n_pairs)
        .into_par_iter()
        .map(|i| generate_pair(cfg, i))
        .collect()
}

// ── normalization and PNG I/O ───────────────────────────────────────

/// Map `[0, 255]` intensities to `[-1, 1]`.
pub fn normalize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v / 127.5 - 1.0)
}

/// Map `[-1, 1]` intensities back to `[0, 255]`.
pub fn denormalize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v + 1.0) * 127.5)
}

/// Write a `[1,1,H,W]` image in [-1, 1] as 8-bit grayscale PNG.
pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!(
            "save_png: expected [1,1,H,W], got {:?}",
            t.shape()
        )));
    }
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for cc in 0..w {
            let v = ((t.at4(0, 0, r, cc) + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0) as u8;
            img.put_pixel(cc as u32, r as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Load an 8-bit grayscale PNG into `[1,1,H,W]` in [-1, 1].
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Data(format!(
                "{}: expected 8-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Vec<f32> = gray.pixels().map(|p| p.0[0] as f32 / 127.5 - 1.0).collect();
    Tensor::from_vec(vec![1, 1, h, w], data)
}

// ── dataset directory layout ────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub src: String,
    pub reference: String,
    pub gtu: Option<String>,
    pub sha256_src: String,
    pub sha256_ref: String,
    pub region: Option<FeatureRegion>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub pairs: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Write `pairs/<id>_src.png`, `pairs/<id>_ref.png`, `pairs/<id>_gtu.twf`
/// and `manifest.json`. Entries are sorted by id.
pub fn save_dataset(dir: &Path, cfg: &SynthConfig, pairs: &[ImagePair]) -> Result<Manifest> {
    let pair_dir = dir.join("pairs");
    std::fs::create_dir_all(&pair_dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let src_rel = format!("pairs/{}_src.png", p.id);
        let ref_rel = format!("pairs/{}_ref.png", p.id);
        save_png(&p.source, &dir.join(&src_rel))?;
        save_png(&p.reference, &dir.join(&ref_rel))?;
        let gtu_rel = match &p.gt_displacement {
            Some(u) => {
                let rel = format!("pairs/{}_gtu.twf", p.id);
                write_twf(&dir.join(&rel), u.grid())?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: p.id.clone(),
            sha256_src: file_sha256(&dir.join(&src_rel))?,
            sha256_ref: file_sha256(&dir.join(&ref_rel))?,
            src: src_rel,
            reference: ref_rel,
            gtu: gtu_rel,
            region: p.region,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = Manifest {
        config: *cfg,
        pairs: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Combined checksum over all per-pair checksums, in manifest order.
pub fn dataset_checksum(manifest: &Manifest) -> String {
    let mut h = Sha256::new();
    for e in &manifest.pairs {
        h.update(e.sha256_src.as_bytes());
        h.update(e.sha256_ref.as_bytes());
    }
    format!("{:x}", h.finalize())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Data(format!(
            "{}: no manifest.json (not a dataset directory?)",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest parse: {e}")))?;
    manifest.pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(manifest)
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(SynthConfig, Vec<ImagePair>)> {
    let manifest = read_manifest(dir)?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let source = load_png(&dir.join(&e.src))?;
        let reference = load_png(&dir.join(&e.reference))?;
        let gt_displacement = match &e.gtu {
            Some(rel) => Some(DisplacementField::new(read_twf(&dir.join(rel))?)?),
            None => None,
        };
        pairs.push(ImagePair {
            id: e.id.clone(),
            source,
            reference,
            gt_displacement,
            region: e.region,
        });
    }
    Ok((manifest.config, pairs))
}

/// Source-image paths in manifest order.
pub fn dataset_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    Ok(manifest.pairs.iter().map(|e| dir.join(&e.src)).collect())
}

// ── train/test split ────────────────────────────────────────────────

/// Deterministic shuffled split; disjoint and exhaustive.
pub fn split(
    pairs: Vec<ImagePair>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train_fraction must lie in [0,1], got {train_fraction}"
        )));
    }
    let n = pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_u64);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
    let mut slots: Vec<Option<ImagePair>> = pairs.into_iter().map(Some).collect();
    let train = order[..n_train]
        .iter()
        .map(|&i| slots[i].take().expect("unique index"))
        .collect();
    let test = order[n_train..]
        .iter()
        .map(|&i| slots[i].take().expect("unique index"))
        .collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 32,
            n_pairs: 4,
            ..Default::default()
        }
    }

    #[test]
    fn identity_config_reproduces_source() {
        let cfg = SynthConfig {
            deform_amplitude: 0.0,
            intensity_shift: 0.0,
            ..small_cfg()
        };
        let p = generate_pair(&cfg, 0).unwrap();
        assert_eq!(p.source, p.reference);
        assert!(p
            .gt_displacement
            .unwrap()
            .grid()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn shift_only_config_differs_only_inside_region() {
        let cfg = SynthConfig {
            deform_amplitude: 0.0,
            intensity_shift: 0.4,
            ..small_cfg()
        };
        let p = generate_pair(&cfg, 1).unwrap();
        let region = p.region.unwrap();
        let size = cfg.image_size;
        let mut changed_inside = 0;
        for r in 0..size {
            for c in 0..size {
                let i = r * size + c;
                let diff = (p.source.data()[i] - p.reference.data()[i]).abs();
                if region.contains(r, c) {
                    if diff > 0.0 {
                        changed_inside += 1;
                    }
                } else {
                    assert_eq!(diff, 0.0, "pixel outside region changed at ({r},{c})");
                }
            }
        }
        assert!(changed_inside > 0);
    }

    #[test]
    fn generated_fields_are_fold_free_and_capped() {
        let cfg = SynthConfig {
            deform_amplitude: 3.0,
            ..small_cfg()
        };
        for i in 0..4 {
            let p = generate_pair(&cfg, i).unwrap();
            let u = p.gt_displacement.unwrap();
            let phi = DeformationField::from_displacement(u.clone());
            assert_eq!(fold_fraction(&phi).unwrap(), 0.0);
            let g = u.grid();
            let hw = cfg.image_size * cfg.image_size;
            for k in 0..hw {
                let m = (g.data()[k].powi(2) + g.data()[hw + k].powi(2)).sqrt();
                assert!(m <= cfg.deform_amplitude as f32 + 1e-5);
            }
        }
    }

    #[test]
    fn warped_source_matches_reference_outside_region() {
        let cfg = small_cfg();
        let p = generate_pair(&cfg, 2).unwrap();
        let u = p.gt_displacement.clone().unwrap();
        let phi = DeformationField::from_displacement(u);
        let warped = crate::deformation::warp_image(&p.source, &phi).unwrap();
        let region = p.region.unwrap();
        let size = cfg.image_size;
        let mut acc = 0.0f64;
        let mut n = 0.0;
        for r in 0..size {
            for c in 0..size {
                if !region.contains(r, c) {
                    let i = r * size + c;
                    acc += (warped.data()[i] - p.reference.data()[i]).abs() as f64;
                    n += 1.0;
                }
            }
        }
        assert!(acc / n < 0.01, "outside-region MAE {}", acc / n);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.source, y.source);
            assert_eq!(x.reference, y.reference);
        }
    }

    #[test]
    fn normalization_affine_map() {
        let t = Tensor::from_vec(vec![1, 1, 1, 3], vec![0.0, 127.5, 255.0]).unwrap();
        let n = normalize(&t);
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
        let back = denormalize(&n);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let p = generate_pair(&cfg, 3).unwrap();
        let path = dir.path().join("img.png");
        save_png(&p.source, &path).unwrap();
        let back = load_png(&path).unwrap();
        let max_err = p
            .source
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-6, "max error {max_err}");
    }

    #[test]
    fn non_grayscale_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        image::RgbImage::new(4, 4).save(&path).unwrap();
        assert!(matches!(load_png(&path), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_round_trip_and_lexicographic_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_pairs: 5,
            ..small_cfg()
        };
        let pairs = generate_dataset(&cfg).unwrap();
        let manifest = save_dataset(dir.path(), &cfg, &pairs).unwrap();
        let ids: Vec<&str> = manifest.pairs.iter().map(|e| e.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);

        let (loaded_cfg, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.len(), pairs.len());
        for (orig, back) in pairs.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            // PNG quantization bounds the image error; the field is exact.
            let err = orig
                .source
                .data()
                .iter()
                .zip(back.source.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err <= 1.0 / 255.0 + 1e-6);
            assert_eq!(
                orig.gt_displacement.as_ref().unwrap().grid(),
                back.gt_displacement.as_ref().unwrap().grid()
            );
        }

        // Checksums are stable across a rewrite.
        let manifest2 = save_dataset(dir.path(), &cfg, &pairs).unwrap();
        assert_eq!(dataset_checksum(&manifest), dataset_checksum(&manifest2));
    }

    #[test]
    fn split_follows_ratio_and_is_disjoint() {
        let cfg = SynthConfig {
            n_pairs: 10,
            ..small_cfg()
        };
        let pairs = generate_dataset(&cfg).unwrap();
        let (train, test) = split(pairs.clone(), 0.7, 1).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        let (train2, test2) = split(pairs, 0.7, 1).unwrap();
        let ids = |v: &[ImagePair]| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
        assert_eq!(ids(&test), ids(&test2));
        let mut all = ids(&train);
        all.extend(ids(&test));
        all.sort();
        let want: Vec<String> = (0..10).map(|i| format!("{i:04}")).collect();
        assert_eq!(all, want);
    }

    #[test]
    fn invalid_size_rejected_naming_constraint() {
        let cfg = SynthConfig {
            image_size: 48,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("multiple of 32"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
