//! Evaluation metrics and protocols: SSIM, PSNR, MAE, hard-binned NMI,
//! Sobel edge maps, Dice overlap, and the standard / correspondence /
//! traceability reports.
//!
//! Everything here runs in f64 on detached tensors; the hard-binned NMI is
//! deliberately distinct from the differentiable estimator used in
//! training. Images are reported on the 0-255 intensity scale (so MAE
//! magnitudes are comparable across tools), SSIM and Dice as percentages.

use crate::data::ImagePair;
use crate::deformation::{fold_fraction, warp_image, DeformationField};
use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const EDGE_QUANTILE: f64 = 0.9;

fn plane(t: &Tensor<f32>, what: &str) -> Result<(Vec<f64>, usize, usize)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!(
            "{what}: expected [1,1,H,W], got {:?}",
            t.shape()
        )));
    }
    Ok((t.data().iter().map(|&v| v as f64).collect(), h, w))
}

fn check_same_shape(a: &Tensor<f32>, b: &Tensor<f32>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Map [-1, 1] image data to the 0-255 reporting scale.
pub fn to_report_scale(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v + 1.0) * 127.5)
}

// ── SSIM ────────────────────────────────────────────────────────────

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering restricted to fully valid windows.
/// Output is `(H-2r) x (W-2r)`.
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let ow = w - 2 * r;
    let oh = h - 2 * r;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * img[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local structural similarity with an 11x11 Gaussian window
/// (sigma 1.5) and the standard constants. `peak` is the dynamic range.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (pa, h, w) = plane(a, "ssim")?;
    let (pb, _, _) = plane(b, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW / 2, SSIM_SIGMA);
    let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&pa, h, w, &kernel);
    let mu_b = filter_valid(&pb, h, w, &kernel);
    let m_aa = filter_valid(&aa, h, w, &kernel);
    let m_bb = filter_valid(&bb, h, w, &kernel);
    let m_ab = filter_valid(&ab, h, w, &kernel);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += s;
    }
    Ok(acc / mu_a.len() as f64)
}

// ── PSNR / MAE / NMI ────────────────────────────────────────────────

/// `10 log10(peak^2 / MSE)`; identical images return `f64::INFINITY`,
/// which report summaries exclude from means with a count note.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn mae(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same_shape(a, b, "mae")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.numel() as f64)
}

/// Hard-binned normalized mutual information, `(H(A)+H(B))/H(A,B)`.
/// Non-differentiable by design; the training estimator is separate.
pub fn nmi_hard(a: &Tensor<f32>, b: &Tensor<f32>, bins: usize, range: (f64, f64)) -> Result<f64> {
    check_same_shape(a, b, "nmi")?;
    if bins < 2 {
        return Err(Error::Config(format!("nmi: bins must be >= 2, got {bins}")));
    }
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::Config(format!("nmi: degenerate range ({lo}, {hi})")));
    }
    let bin_of = |v: f32| -> usize {
        let t = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
        ((t * bins as f64) as usize).min(bins - 1)
    };
    let mut joint = vec![0.0f64; bins * bins];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        joint[bin_of(x) * bins + bin_of(y)] += 1.0;
    }
    let n = a.numel() as f64;
    for j in joint.iter_mut() {
        *j /= n;
    }
    let ent = |p: &[f64]| -> f64 {
        -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
    };
    let pa: Vec<f64> = (0..bins)
        .map(|i| joint[i * bins..(i + 1) * bins].iter().sum())
        .collect();
    let pb: Vec<f64> = (0..bins)
        .map(|j| (0..bins).map(|i| joint[i * bins + j]).sum())
        .collect();
    let h_ab = ent(&joint);
    if h_ab == 0.0 {
        // Single occupied cell: both images are constants.
        return Ok(2.0);
    }
    Ok((ent(&pa) + ent(&pb)) / h_ab)
}

// ── Sobel edges and Dice ────────────────────────────────────────────

/// Binary edge map from thresholded Sobel gradient magnitude.
#[derive(Clone, Debug)]
pub struct EdgeMap {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

impl EdgeMap {
    /// Edge pixels as a 0/1 image for image-space comparisons.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            vec![1, 1, self.h, self.w],
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask matches shape")
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// 3x3 Sobel gradient magnitude binarized at a magnitude quantile, so the
/// map is invariant to contrast and to constant intensity shifts.
pub fn sobel_edges(img: &Tensor<f32>, threshold_quantile: f64) -> Result<EdgeMap> {
    if !(0.0..=1.0).contains(&threshold_quantile) {
        return Err(Error::Config(format!(
            "sobel: quantile must lie in [0,1], got {threshold_quantile}"
        )));
    }
    let (p, h, w) = plane(img, "sobel")?;
    let mut mag = vec![0.0f64; h * w];
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let at = |dr: isize, dc: isize| -> f64 {
                p[((r as isize + dr) as usize) * w + (c as isize + dc) as usize]
            };
            let gx = -at(-1, -1) + at(-1, 1) - 2.0 * at(0, -1) + 2.0 * at(0, 1) - at(1, -1)
                + at(1, 1);
            let gy = -at(-1, -1) - 2.0 * at(-1, 0) - at(-1, 1)
                + at(1, -1)
                + 2.0 * at(1, 0)
                + at(1, 1);
            mag[r * w + c] = (gx * gx + gy * gy).sqrt();
        }
    }
    let mut sorted = mag.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let idx = ((threshold_quantile * (sorted.len() - 1) as f64).floor() as usize)
        .min(sorted.len() - 1);
    let threshold = sorted[idx];
    Ok(EdgeMap {
        h,
        w,
        mask: mag.iter().map(|&m| m > threshold).collect(),
        threshold,
    })
}

/// Dice overlap `2|A∩B| / (|A|+|B|)` over optionally masked pixels;
/// both-empty counts as perfect agreement (1.0).
pub fn dice(a: &EdgeMap, b: &EdgeMap, mask: Option<&[bool]>) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!(
            "dice: edge maps {}x{} and {}x{} differ",
            a.h, a.w, b.h, b.w
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.mask.len() {
            return Err(Error::Shape("dice: mask length mismatch".into()));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for i in 0..a.mask.len() {
        if !keep(i) {
            continue;
        }
        if a.mask[i] {
            na += 1;
        }
        if b.mask[i] {
            nb += 1;
        }
        if a.mask[i] && b.mask[i] {
            inter += 1;
        }
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

// ── reports ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MetricColumn {
    pub name: String,
    pub values: Vec<f64>,
}

/// Per-pair metric values with summary statistics. Non-finite entries
/// (the PSNR infinity sentinel) are excluded from summaries and counted.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub pair_ids: Vec<String>,
    pub columns: Vec<MetricColumn>,
}

#[derive(Clone, Copy, Debug)]
pub struct ColumnSummary {
    pub mean: f64,
    pub std: f64,
    pub n_finite: usize,
    pub n_excluded: usize,
}

impl MetricReport {
    pub fn column(&self, name: &str) -> Option<&MetricColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn summary(&self, name: &str) -> Option<ColumnSummary> {
        let col = self.column(name)?;
        let finite: Vec<f64> = col.values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Some(ColumnSummary {
                mean: f64::NAN,
                std: f64::NAN,
                n_finite: 0,
                n_excluded: col.values.len(),
            });
        }
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / finite.len() as f64;
        Some(ColumnSummary {
            mean,
            std: var.sqrt(),
            n_finite: finite.len(),
            n_excluded: col.values.len() - finite.len(),
        })
    }

    pub fn mean_of(&self, name: &str) -> f64 {
        self.summary(name).map(|s| s.mean).unwrap_or(f64::NAN)
    }

    /// Per-pair rows followed by `mean`, `std`, and `n_finite` summary rows.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("id");
        for c in &self.columns {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push('\n');
        for (i, id) in self.pair_ids.iter().enumerate() {
            out.push_str(id);
            for c in &self.columns {
                out.push(',');
                out.push_str(&format_value(c.values[i]));
            }
            out.push('\n');
        }
        for label in ["mean", "std", "n_finite"] {
            out.push_str(label);
            for c in &self.columns {
                let s = self.summary(&c.name).expect("column exists");
                out.push(',');
                out.push_str(&match label {
                    "mean" => format_value(s.mean),
                    "std" => format_value(s.std),
                    _ => s.n_finite.to_string(),
                });
            }
            out.push('\n');
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

// ── protocols ───────────────────────────────────────────────────────

/// Standard image-fidelity protocol: SSIM / MAE / PSNR / NMI between the
/// translated prediction and the reference, on the 0-255 scale.
pub fn standard_eval<F>(mut forward: F, pairs: &[ImagePair]) -> Result<MetricReport>
where
    F: FnMut(&Tensor<f32>) -> Result<ModelOutput<f32>>,
{
    let mut ids = Vec::new();
    let mut ssim_v = Vec::new();
    let mut mae_v = Vec::new();
    let mut psnr_v = Vec::new();
    let mut nmi_v = Vec::new();
    for p in pairs {
        let out = forward(&p.source)?;
        let pred = to_report_scale(&out.y_trans);
        let refr = to_report_scale(&p.reference);
        ids.push(p.id.clone());
        ssim_v.push(ssim(&pred, &refr, 255.0)? * 100.0);
        mae_v.push(mae(&pred, &refr)?);
        psnr_v.push(psnr(&pred, &refr, 255.0)?);
        nmi_v.push(nmi_hard(&pred, &refr, 64, (0.0, 255.0))?);
    }
    Ok(MetricReport {
        pair_ids: ids,
        columns: vec![
            MetricColumn { name: "ssim_pct".into(), values: ssim_v },
            MetricColumn { name: "mae".into(), values: mae_v },
            MetricColumn { name: "psnr_db".into(), values: psnr_v },
            MetricColumn { name: "nmi".into(), values: nmi_v },
        ],
    })
}

/// Structural-correspondence protocol: Sobel edge maps of the deformed
/// source (under the model's own predicted field) against edge maps of the
/// predicted translation — Dice plus image metrics on the binary maps.
pub fn correspondence_eval<F>(mut forward: F, pairs: &[ImagePair]) -> Result<MetricReport>
where
    F: FnMut(&Tensor<f32>) -> Result<ModelOutput<f32>>,
{
    let mut ids = Vec::new();
    let mut dice_v = Vec::new();
    let mut masked_v = Vec::new();
    let mut ssim_v = Vec::new();
    let mut psnr_v = Vec::new();
    let mut nmi_v = Vec::new();
    for p in pairs {
        let out = forward(&p.source)?;
        let warped = warp_image(&p.source, &out.deformation)?;
        let e_warp = sobel_edges(&warped, EDGE_QUANTILE)?;
        let e_trans = sobel_edges(&out.y_trans, EDGE_QUANTILE)?;
        ids.push(p.id.clone());
        dice_v.push(dice(&e_warp, &e_trans, None)? * 100.0);
        let masked = match &p.region {
            Some(region) => {
                let m = region.mask(e_warp.h, e_warp.w);
                dice(&e_warp, &e_trans, Some(&m))? * 100.0
            }
            None => f64::NAN,
        };
        masked_v.push(masked);
        let ta = e_warp.to_tensor();
        let tb = e_trans.to_tensor();
        ssim_v.push(ssim(&ta, &tb, 1.0)? * 100.0);
        psnr_v.push(psnr(&ta, &tb, 1.0)?);
        nmi_v.push(nmi_hard(&ta, &tb, 2, (0.0, 1.0))?);
    }
    Ok(MetricReport {
        pair_ids: ids,
        columns: vec![
            MetricColumn { name: "edge_dice_pct".into(), values: dice_v },
            MetricColumn { name: "masked_dice_pct".into(), values: masked_v },
            MetricColumn { name: "edge_ssim_pct".into(), values: ssim_v },
            MetricColumn { name: "edge_psnr_db".into(), values: psnr_v },
            MetricColumn { name: "edge_nmi".into(), values: nmi_v },
        ],
    })
}

/// Traceability protocol: how well the deformed source explains the
/// predicted translation, the displacement endpoint error against the
/// synthetic ground truth (when present), and the folding rate of the
/// predicted field. The endpoint-error column has no counterpart outside
/// synthetic data, where true fields are unknown.
pub fn traceability_eval<F>(mut forward: F, pairs: &[ImagePair]) -> Result<MetricReport>
where
    F: FnMut(&Tensor<f32>) -> Result<ModelOutput<f32>>,
{
    let mut ids = Vec::new();
    let mut mae_v = Vec::new();
    let mut ssim_v = Vec::new();
    let mut epe_v = Vec::new();
    let mut fold_v = Vec::new();
    for p in pairs {
        let out = forward(&p.source)?;
        let warped = warp_image(&p.source, &out.deformation)?;
        let pred = to_report_scale(&out.y_trans);
        let wrp = to_report_scale(&warped);
        ids.push(p.id.clone());
        mae_v.push(mae(&wrp, &pred)?);
        ssim_v.push(ssim(&wrp, &pred, 255.0)? * 100.0);
        epe_v.push(match &p.gt_displacement {
            Some(gt) => endpoint_error(out.displacement.grid(), gt.grid())?,
            None => f64::NAN,
        });
        fold_v.push(fold_fraction(&out.deformation)?);
    }
    Ok(MetricReport {
        pair_ids: ids,
        columns: vec![
            MetricColumn { name: "trace_mae".into(), values: mae_v },
            MetricColumn { name: "trace_ssim_pct".into(), values: ssim_v },
            MetricColumn { name: "endpoint_error_px".into(), values: epe_v },
            MetricColumn { name: "fold_fraction".into(), values: fold_v },
        ],
    })
}

/// Mean Euclidean distance between two displacement fields, in pixels.
pub fn endpoint_error(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "endpoint_error: field shapes {:?} and {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let (n, _, h, w) = pred.dims4()?;
    let hw = h * w;
    let mut acc = 0.0f64;
    for s in 0..n {
        for i in 0..hw {
            let dr = pred.data()[s * 2 * hw + i] as f64 - gt.data()[s * 2 * hw + i] as f64;
            let dc =
                pred.data()[s * 2 * hw + hw + i] as f64 - gt.data()[s * 2 * hw + hw + i] as f64;
            acc += (dr * dr + dc * dc).sqrt();
        }
    }
    Ok(acc / (n * hw) as f64)
}

/// Identity-model output used by tests and the zero-velocity baselines:
/// `y_trans = y_warp = x`, zero fields.
pub fn identity_output(x: &Tensor<f32>) -> Result<ModelOutput<f32>> {
    let (n, _, h, w) = x.dims4()?;
    let zero = Tensor::zeros(&[n, 2, h, w]);
    let disp = crate::deformation::DisplacementField::new(zero.clone())?;
    Ok(ModelOutput {
        y_trans: x.clone(),
        y_warp: x.clone(),
        velocity: crate::deformation::VelocityField::new(zero)?,
        deformation: DeformationField::from_displacement(disp.clone()),
        displacement: disp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(vec![1, 1, h, w], data).unwrap()
    }

    fn rand_img(h: usize, w: usize, seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 1, h, w], |_| rng.gen_range(lo..hi))
    }

    /// Direct per-window SSIM oracle: no separable filtering, plain loops.
    fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> f64 {
        let (_, _, h, w) = a.dims4().unwrap();
        let r = SSIM_WINDOW / 2;
        let kernel = {
            let mut k = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
            let g = |i: usize| {
                let d = i as f64 - r as f64;
                (-0.5 * (d / SSIM_SIGMA).powi(2)).exp()
            };
            let mut sum = 0.0;
            for y in 0..SSIM_WINDOW {
                for x in 0..SSIM_WINDOW {
                    k[y * SSIM_WINDOW + x] = g(y) * g(x);
                    sum += k[y * SSIM_WINDOW + x];
                }
            }
            for v in k.iter_mut() {
                *v /= sum;
            }
            k
        };
        let c1 = (SSIM_K1 * peak).powi(2);
        let c2 = (SSIM_K2 * peak).powi(2);
        let mut acc = 0.0;
        let mut count = 0.0;
        for cy in r..h - r {
            for cx in r..w - r {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = kernel[dy * SSIM_WINDOW + dx];
                        let va = a.at4(0, 0, cy + dy - r, cx + dx - r) as f64;
                        let vb = b.at4(0, 0, cy + dy - r, cx + dx - r) as f64;
                        ma += k * va;
                        mb += k * vb;
                        maa += k * va * va;
                        mbb += k * vb * vb;
                        mab += k * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn ssim_self_similarity_is_exactly_one() {
        let a = rand_img(16, 16, 1, 0.0, 255.0);
        assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let a = rand_img(18, 16, 2, 0.0, 255.0);
        let b = rand_img(18, 16, 3, 0.0, 255.0);
        let got = ssim(&a, &b, 255.0).unwrap();
        let want = ssim_oracle(&a, &b, 255.0);
        assert!((got - want).abs() < 1e-10, "impl {got} oracle {want}");
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let a = img(
            16,
            16,
            (0..256)
                .map(|i| if (i / 16 + i % 16) % 2 == 0 { 255.0 } else { 0.0 })
                .collect(),
        );
        let b = a.map(|v| 255.0 - v);
        let got = ssim(&a, &b, 255.0).unwrap();
        let want = ssim_oracle(&a, &b, 255.0);
        assert!((got - want).abs() < 1e-10);
        assert!(got < 0.0, "anti-correlated SSIM should be negative, got {got}");
    }

    #[test]
    fn ssim_approaches_one_monotonically_as_offset_shrinks() {
        let a = img(16, 16, vec![100.0; 256]);
        let mut last = -1.0;
        for eps in [8.0f32, 4.0, 2.0, 1.0, 0.5] {
            let b = a.map(|v| v + eps);
            let s = ssim(&a, &b, 255.0).unwrap();
            let o = ssim_oracle(&a, &b, 255.0);
            assert!((s - o).abs() < 1e-10);
            assert!(s > last, "not monotone at eps {eps}");
            last = s;
        }
        assert!(last > 0.99 && last < 1.0);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = rand_img(8, 8, 1, 0.0, 1.0);
        assert!(matches!(ssim(&a, &a, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_mae_nmi_basic_examples() {
        let a = rand_img(16, 16, 5, 0.0, 255.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert!(psnr(&a, &a, 255.0).unwrap().is_infinite());
        assert_eq!(nmi_hard(&a, &a, 16, (0.0, 255.0)).unwrap(), 2.0);

        let b = a.map(|v| v + 10.0);
        assert!((mae(&a, &b).unwrap() - 10.0).abs() < 1e-4);
    }

    #[test]
    fn nmi_of_independent_noise_is_near_one() {
        let a = rand_img(100, 100, 7, 0.0, 255.0);
        let b = rand_img(100, 100, 8, 0.0, 255.0);
        let v = nmi_hard(&a, &b, 64, (0.0, 255.0)).unwrap();
        assert!((v - 1.0).abs() < 0.05, "NMI {v}");
    }

    #[test]
    fn psnr_decreases_monotonically_with_noise_amplitude() {
        let a = rand_img(32, 32, 9, 0.0, 255.0);
        let noise = rand_img(32, 32, 10, -1.0, 1.0);
        let mut last = f64::INFINITY;
        for amp in [1.0f32, 2.0, 4.0, 8.0, 16.0] {
            let b = Tensor::from_fn(a.shape(), |i| a.data()[i] + amp * noise.data()[i]);
            let p = psnr(&a, &b, 255.0).unwrap();
            assert!(p < last, "psnr not decreasing at amp {amp}");
            last = p;
        }
    }

    #[test]
    fn metric_symmetry() {
        let a = rand_img(16, 16, 11, 0.0, 255.0);
        let b = rand_img(16, 16, 12, 0.0, 255.0);
        assert!((ssim(&a, &b, 255.0).unwrap() - ssim(&b, &a, 255.0).unwrap()).abs() < 1e-10);
        assert!((mae(&a, &b).unwrap() - mae(&b, &a).unwrap()).abs() < 1e-12);
        assert!((psnr(&a, &b, 255.0).unwrap() - psnr(&b, &a, 255.0).unwrap()).abs() < 1e-10);
        assert!(
            (nmi_hard(&a, &b, 16, (0.0, 255.0)).unwrap()
                - nmi_hard(&b, &a, 16, (0.0, 255.0)).unwrap())
            .abs()
                < 1e-10
        );
    }

    #[test]
    fn sobel_constant_image_has_no_edges() {
        let a = img(16, 16, vec![0.3; 256]);
        let e = sobel_edges(&a, EDGE_QUANTILE).unwrap();
        assert_eq!(e.count(), 0);
    }

    #[test]
    fn sobel_vertical_step_marks_step_columns() {
        // Columns 0..8 dark, 8.. bright: the 3x3 Sobel responds at columns
        // 7 and 8 only (hand-evaluated on the step profile).
        let a = img(
            24,
            24,
            (0..24 * 24)
                .map(|i| if i % 24 < 8 { -0.5 } else { 0.5 })
                .collect(),
        );
        let e = sobel_edges(&a, 0.9).unwrap();
        for r in 1..23 {
            for c in 1..23 {
                let expected = c == 7 || c == 8;
                assert_eq!(
                    e.mask[r * 24 + c],
                    expected,
                    "unexpected edge state at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn sobel_invariant_to_constant_shift() {
        let a = rand_img(16, 16, 13, -0.5, 0.5);
        let b = a.map(|v| v + 0.3);
        let ea = sobel_edges(&a, 0.9).unwrap();
        let eb = sobel_edges(&b, 0.9).unwrap();
        assert_eq!(ea.mask, eb.mask);
    }

    #[test]
    fn dice_formula_cases() {
        let mk = |bits: Vec<bool>| EdgeMap {
            h: 1,
            w: bits.len(),
            mask: bits,
            threshold: 0.0,
        };
        let a = mk(vec![true, true, false, false]);
        assert_eq!(dice(&a, &a, None).unwrap(), 1.0);
        let disjoint = mk(vec![false, false, true, true]);
        assert_eq!(dice(&a, &disjoint, None).unwrap(), 0.0);
        let empty = mk(vec![false; 4]);
        assert_eq!(dice(&empty, &empty, None).unwrap(), 1.0);

        // |A| = |B| = 100, |A∩B| = 50 -> 0.5
        let mut av = vec![false; 300];
        let mut bv = vec![false; 300];
        for v in av.iter_mut().take(100) {
            *v = true;
        }
        for v in bv.iter_mut().take(150).skip(50) {
            *v = true;
        }
        let (a300, b300) = (
            EdgeMap { h: 1, w: 300, mask: av, threshold: 0.0 },
            EdgeMap { h: 1, w: 300, mask: bv, threshold: 0.0 },
        );
        assert_eq!(dice(&a300, &b300, None).unwrap(), 0.5);
    }

    #[test]
    fn identity_model_scores_perfect_correspondence() {
        let cfg = SynthConfig {
            image_size: 32,
            n_pairs: 3,
            ..Default::default()
        };
        let pairs = generate_dataset(&cfg).unwrap();
        let report = correspondence_eval(identity_output, &pairs).unwrap();
        for &v in &report.column("edge_dice_pct").unwrap().values {
            assert_eq!(v, 100.0);
        }
        let trace = traceability_eval(identity_output, &pairs).unwrap();
        for &v in &trace.column("fold_fraction").unwrap().values {
            assert_eq!(v, 0.0);
        }
        // Identity prediction's endpoint error equals the mean true
        // displacement magnitude, which the generator caps.
        for &v in &trace.column("endpoint_error_px").unwrap().values {
            assert!(v <= cfg.deform_amplitude);
        }
    }

    #[test]
    fn report_summaries_recompute_and_bound_means() {
        let report = MetricReport {
            pair_ids: vec!["a".into(), "b".into(), "c".into()],
            columns: vec![MetricColumn {
                name: "m".into(),
                values: vec![1.0, 2.0, f64::INFINITY],
            }],
        };
        let s = report.summary("m").unwrap();
        assert_eq!(s.n_finite, 2);
        assert_eq!(s.n_excluded, 1);
        assert!((s.mean - 1.5).abs() < 1e-9);
        assert!((s.std - 0.5).abs() < 1e-9);
        assert!(s.mean >= 1.0 && s.mean <= 2.0);
        let csv = report.to_csv_string();
        assert!(csv.contains("inf"));
        assert!(csv.lines().count() == 1 + 3 + 3);
    }

    #[test]
    fn endpoint_error_of_unit_offset_is_one() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let mut b = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        for v in b.data_mut()[..16].iter_mut() {
            *v = 1.0; // row displacement of 1 everywhere
        }
        assert!((endpoint_error(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }
}
