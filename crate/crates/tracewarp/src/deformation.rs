//! Velocity-field integration, warping, and deformation diagnostics.
//!
//! Coordinate convention, used everywhere in this crate: fields are
//! `[N,2,H,W]` with channel 0 the row component and channel 1 the column
//! component, origin at the top-left, units of pixels. A deformation maps
//! pixel `p` to `p + u(p)`; it is represented by its displacement `u` so
//! that `phi - Id` recovers `u` exactly, and absolute coordinates are formed
//! at sample time.
//!
//! Integration uses scaling and squaring: the stationary velocity is scaled
//! by `2^-steps` and the resulting small displacement is self-composed
//! `steps` times, `u <- u o (Id + u) + u`, with the same bilinear sampler
//! used for images. Out-of-bounds samples clamp to the border; zeros from a
//! padded border would otherwise leak into intensity histograms downstream.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const DEFAULT_INTEGRATION_STEPS: usize = 7;

fn expect_field_shape<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    let (_, c, _, _) = t.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!(
            "{what}: expected 2 channels (row, col), got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Stationary velocity field `v`, pixels per unit time.
#[derive(Clone, Debug)]
pub struct VelocityField<T>(Tensor<T>);

/// Displacement field `u`, pixels.
#[derive(Clone, Debug)]
pub struct DisplacementField<T>(Tensor<T>);

/// Deformation `phi(p) = p + u(p)`, stored by its displacement so the
/// `phi - Id == u` identity is exact.
#[derive(Clone, Debug)]
pub struct DeformationField<T> {
    displacement: Tensor<T>,
}

impl<T: Scalar> VelocityField<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        expect_field_shape(&grid, "velocity field")?;
        if !grid.is_finite() {
            return Err(Error::Numeric("velocity field contains non-finite values".into()));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_grid(self) -> Tensor<T> {
        self.0
    }
}

impl<T: Scalar> DisplacementField<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        expect_field_shape(&grid, "displacement field")?;
        if !grid.is_finite() {
            return Err(Error::Numeric(
                "displacement field contains non-finite values".into(),
            ));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_grid(self) -> Tensor<T> {
        self.0
    }
}

impl<T: Scalar> DeformationField<T> {
    pub fn from_displacement(u: DisplacementField<T>) -> Self {
        Self { displacement: u.0 }
    }

    /// `phi - Id`, exact by construction.
    pub fn to_displacement(&self) -> DisplacementField<T> {
        DisplacementField(self.displacement.clone())
    }

    pub fn displacement(&self) -> &Tensor<T> {
        &self.displacement
    }

    /// Materialize `phi(p) = p + u(p)` in absolute pixel coordinates.
    pub fn absolute_grid(&self) -> Tensor<T> {
        let (n, _, h, w) = self.displacement.dims4().expect("validated rank 4");
        let u = &self.displacement;
        Tensor::from_fn(&[n, 2, h, w], |i| {
            let wi = i % w;
            let hi = (i / w) % h;
            let ci = (i / (w * h)) % 2;
            let coord = if ci == 0 { hi } else { wi };
            sc::<T>(coord as f64) + u.data()[i]
        })
    }
}

// ── tape-level operations ───────────────────────────────────────────

/// Scaling-and-squaring integration of a stationary velocity field,
/// differentiable through the tape. Returns the displacement at time 1.
pub fn integrate_velocity<T: Scalar>(tape: &mut Tape<T>, v: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Config("integrate_velocity: steps must be >= 1".into()));
    }
    expect_field_shape(tape.value(v), "integrate_velocity input")?;
    if !tape.value(v).is_finite() {
        return Err(Error::Numeric(
            "integrate_velocity: non-finite velocity input".into(),
        ));
    }
    let mut u = tape.mul_scalar(v, 0.5f64.powi(steps as i32));
    for _ in 0..steps {
        let composed = tape.warp(u, u)?;
        u = tape.add(composed, u)?;
    }
    Ok(u)
}

/// Mean squared forward-difference gradient of a 2-channel field, averaged
/// over `N*H*W` so the weight is resolution-independent.
pub fn smoothness_loss<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let (n, _, h, w) = tape.value(v).dims4()?;
    expect_field_shape(tape.value(v), "smoothness_loss input")?;
    let base_r = tape.crop(v, 0, 0, h - 1, w)?;
    let next_r = tape.crop(v, 1, 0, h - 1, w)?;
    let dr = tape.sub(next_r, base_r)?;
    let base_c = tape.crop(v, 0, 0, h, w - 1)?;
    let next_c = tape.crop(v, 0, 1, h, w - 1)?;
    let dc = tape.sub(next_c, base_c)?;
    let dr2 = tape.square(dr);
    let dc2 = tape.square(dc);
    let sr = tape.sum(dr2);
    let scl = tape.sum(dc2);
    let total = tape.add(sr, scl)?;
    Ok(tape.mul_scalar(total, 1.0 / (n * h * w) as f64))
}

/// Determinant of the forward-difference Jacobian of `phi = Id + u`,
/// one value per `(H-1)x(W-1)` cell. Positive everywhere means no folding.
pub fn jacobian_determinant<T: Scalar>(tape: &mut Tape<T>, disp: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(disp).dims4()?;
    expect_field_shape(tape.value(disp), "jacobian_determinant input")?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(
            "jacobian_determinant: field must be at least 2x2".into(),
        ));
    }
    let base = tape.crop(disp, 0, 0, h - 1, w - 1)?;
    let down = tape.crop(disp, 1, 0, h - 1, w - 1)?;
    let right = tape.crop(disp, 0, 1, h - 1, w - 1)?;
    let dr = tape.sub(down, base)?; // du/drow, both channels
    let dc = tape.sub(right, base)?; // du/dcol, both channels
    let drr = tape.channel_slice(dr, 0)?;
    let dcr = tape.channel_slice(dr, 1)?;
    let drc = tape.channel_slice(dc, 0)?;
    let dcc = tape.channel_slice(dc, 1)?;
    let a = tape.add_scalar(drr, 1.0); // d(phi_r)/dr
    let d = tape.add_scalar(dcc, 1.0); // d(phi_c)/dc
    let ad = tape.mul(a, d)?;
    let bc = tape.mul(drc, dcr)?;
    tape.sub(ad, bc)
}

// ── plain-tensor wrappers (evaluation paths) ────────────────────────

pub fn integrate_velocity_field<T: Scalar>(
    v: &VelocityField<T>,
    steps: usize,
) -> Result<DisplacementField<T>> {
    let mut tape = Tape::new();
    let var = tape.constant(v.grid().clone());
    let u = integrate_velocity(&mut tape, var, steps)?;
    DisplacementField::new(tape.value(u).clone())
}

pub fn warp_image<T: Scalar>(m: &Tensor<T>, phi: &DeformationField<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mv = tape.constant(m.clone());
    let dv = tape.constant(phi.displacement().clone());
    let out = tape.warp(mv, dv)?;
    Ok(tape.value(out).clone())
}

pub fn jacobian_determinant_field<T: Scalar>(phi: &DeformationField<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let dv = tape.constant(phi.displacement().clone());
    let det = jacobian_determinant(&mut tape, dv)?;
    Ok(tape.value(det).clone())
}

/// Fraction of non-positive Jacobian determinants (folded cells).
pub fn fold_fraction<T: Scalar>(phi: &DeformationField<T>) -> Result<f64> {
    let det = jacobian_determinant_field(phi)?;
    let folded = det.data().iter().filter(|&&d| d <= T::zero()).count();
    Ok(folded as f64 / det.numel() as f64)
}

// ── TWF1 flat binary field format ───────────────────────────────────

pub const TWF_MAGIC: &[u8; 4] = b"TWF1";

/// Write a `[N,2,H,W]` field: magic, then N, C, H, W as little-endian u32,
/// then row-major f32 little-endian data.
pub fn write_twf(path: &Path, field: &Tensor<f32>) -> Result<()> {
    expect_field_shape(field, "TWF field")?;
    let (n, c, h, w) = field.dims4()?;
    let mut f = fs::File::create(path)?;
    f.write_all(TWF_MAGIC)?;
    for dim in [n, c, h, w] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(field.numel() * 4);
    for &v in field.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_twf(path: &Path) -> Result<Tensor<f32>> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != TWF_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}, expected \"TWF1\"",
            path.display(),
            magic
        )));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [n, c, h, w] = dims;
    if c != 2 {
        return Err(Error::Data(format!(
            "{}: expected 2 channels, header says {c}",
            path.display()
        )));
    }
    let numel = n * c * h * w;
    let mut buf = vec![0u8; numel * 4];
    f.read_exact(&mut buf)?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(vec![n, c, h, w], data)
}

// ── flow visualization ──────────────────────────────────────────────

/// Encode a `[1,2,H,W]` displacement as an RGB image: hue is direction,
/// saturation is magnitude relative to the field maximum.
pub fn flow_to_rgb(field: &Tensor<f32>) -> Result<image::RgbImage> {
    let (n, _, h, w) = field.dims4()?;
    expect_field_shape(field, "flow visualization")?;
    if n != 1 {
        return Err(Error::Shape("flow_to_rgb: expected a single field".into()));
    }
    let mut max_mag = 0.0f32;
    for i in 0..h * w {
        let ur = field.data()[i];
        let uc = field.data()[h * w + i];
        max_mag = max_mag.max((ur * ur + uc * uc).sqrt());
    }
    let scale = if max_mag > 0.0 { 1.0 / max_mag } else { 0.0 };
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let ur = field.data()[r * w + c];
            let uc = field.data()[h * w + r * w + c];
            let mag = (ur * ur + uc * uc).sqrt() * scale;
            let hue = uc.atan2(ur).rem_euclid(2.0 * std::f32::consts::PI);
            let rgb = hsv_to_rgb(hue.to_degrees(), mag, 1.0);
            img.put_pixel(c as u32, r as u32, image::Rgb(rgb));
        }
    }
    Ok(img)
}

fn hsv_to_rgb(h_deg: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h_deg / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Smooth random field for tests: white noise, box-blurred a few times,
    /// rescaled to a maximum vector norm.
    pub(crate) fn smooth_field(
        h: usize,
        w: usize,
        max_norm: f64,
        blur_passes: usize,
        rng: &mut impl Rng,
    ) -> Tensor<f64> {
        let mut data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..blur_passes {
            let mut next = data.clone();
            for ch in 0..2 {
                for r in 0..h {
                    for c in 0..w {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for dr in -1i64..=1 {
                            for dc in -1i64..=1 {
                                let rr = r as i64 + dr;
                                let cc = c as i64 + dc;
                                if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 {
                                    acc += data[ch * h * w + rr as usize * w + cc as usize];
                                    cnt += 1.0;
                                }
                            }
                        }
                        next[ch * h * w + r * w + c] = acc / cnt;
                    }
                }
            }
            data = next;
        }
        let mut max = 0.0f64;
        for i in 0..h * w {
            let m = (data[i] * data[i] + data[h * w + i] * data[h * w + i]).sqrt();
            max = max.max(m);
        }
        let s = if max > 0.0 { max_norm / max } else { 0.0 };
        Tensor::from_vec(vec![1, 2, h, w], data.into_iter().map(|v| v * s).collect()).unwrap()
    }

    /// Independent bilinear lookup used only by the Euler oracle.
    fn sample(field: &Tensor<f64>, ch: usize, r: f64, c: f64, h: usize, w: usize) -> f64 {
        let r = r.clamp(0.0, (h - 1) as f64);
        let c = c.clamp(0.0, (w - 1) as f64);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let at = |rr: usize, cc: usize| field.data()[ch * h * w + rr * w + cc];
        at(r0, c0) * (1.0 - fr) * (1.0 - fc)
            + at(r0, c1) * (1.0 - fr) * fc
            + at(r1, c0) * fr * (1.0 - fc)
            + at(r1, c1) * fr * fc
    }

    /// Fine-step forward-Euler integration of dx/dt = v(x) over t in [0,1].
    fn euler_displacement(v: &Tensor<f64>, h: usize, w: usize, n_steps: usize) -> Tensor<f64> {
        let dt = 1.0 / n_steps as f64;
        let mut out = Tensor::zeros(&[1, 2, h, w]);
        for r in 0..h {
            for c in 0..w {
                let mut pr = r as f64;
                let mut pc = c as f64;
                for _ in 0..n_steps {
                    let vr = sample(v, 0, pr, pc, h, w);
                    let vc = sample(v, 1, pr, pc, h, w);
                    pr += vr * dt;
                    pc += vc * dt;
                }
                out.data_mut()[r * w + c] = pr - r as f64;
                out.data_mut()[h * w + r * w + c] = pc - c as f64;
            }
        }
        out
    }

    fn integrate(v: &Tensor<f64>, steps: usize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let var = tape.constant(v.clone());
        let u = integrate_velocity(&mut tape, var, steps).unwrap();
        tape.value(u).clone()
    }

    #[test]
    fn zero_velocity_integrates_to_zero_bit_exactly() {
        let v = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        let u = integrate(&v, 7);
        assert!(u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_velocity_is_a_fixed_point() {
        let mut v = Tensor::<f64>::zeros(&[1, 2, 12, 12]);
        for x in v.data_mut()[0..144].iter_mut() {
            *x = 0.75; // row component only
        }
        let u = integrate(&v, 7);
        // Interior pixels far from the boundary see the constant field.
        for r in 2..9 {
            for c in 2..10 {
                assert!((u.data()[r * 12 + c] - 0.75).abs() < 1e-5, "row at ({r},{c})");
                assert!(u.data()[144 + r * 12 + c].abs() < 1e-5, "col at ({r},{c})");
            }
        }
    }

    #[test]
    fn scaling_and_squaring_matches_fine_euler_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (h, w) = (16, 16);
        for trial in 0..5 {
            let v = smooth_field(h, w, 1.5, 4, &mut rng);
            let u = integrate(&v, 7);
            let u_ref = euler_displacement(&v, h, w, 256);
            let mut max_err = 0.0f64;
            for r in 3..h - 3 {
                for c in 3..w - 3 {
                    for ch in 0..2 {
                        let i = ch * h * w + r * w + c;
                        max_err = max_err.max((u.data()[i] - u_ref.data()[i]).abs());
                    }
                }
            }
            assert!(max_err < 0.05, "trial {trial}: max interior error {max_err}");
        }
    }

    #[test]
    fn composition_converges_with_more_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (16, 16);
        let v = smooth_field(h, w, 1.5, 4, &mut rng);
        let u7 = integrate(&v, 7);
        let u8 = integrate(&v, 8);
        let mut max_err = 0.0f64;
        for r in 3..h - 3 {
            for c in 3..w - 3 {
                for ch in 0..2 {
                    let i = ch * h * w + r * w + c;
                    max_err = max_err.max((u7.data()[i] - u8.data()[i]).abs());
                }
            }
        }
        assert!(max_err < 1e-3, "steps 7 vs 8 interior drift {max_err}");
    }

    #[test]
    fn approximate_inverse_recovers_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (24, 24);
        let v = smooth_field(h, w, 1.0, 5, &mut rng);
        let v_neg = v.map(|x| -x);
        // Smooth test image.
        let img = Tensor::<f64>::from_fn(&[1, 1, h, w], |i| {
            let r = (i / w) as f64;
            let c = (i % w) as f64;
            ((r / 5.0).sin() + (c / 4.0).cos()) * 0.5
        });
        let fwd = DeformationField::from_displacement(
            DisplacementField::new(integrate(&v, 7)).unwrap(),
        );
        let bwd = DeformationField::from_displacement(
            DisplacementField::new(integrate(&v_neg, 7)).unwrap(),
        );
        let there = warp_image(&img, &fwd).unwrap();
        let back = warp_image(&there, &bwd).unwrap();
        let mut acc = 0.0;
        let mut n = 0.0;
        for r in 3..h - 3 {
            for c in 3..w - 3 {
                acc += (back.data()[r * w + c] - img.data()[r * w + c]).abs();
                n += 1.0;
            }
        }
        assert!(acc / n < 0.02, "round-trip interior MAE {}", acc / n);
    }

    #[test]
    fn identity_deformation_has_unit_determinant() {
        let u = DisplacementField::new(Tensor::<f64>::zeros(&[1, 2, 6, 6])).unwrap();
        let phi = DeformationField::from_displacement(u);
        let det = jacobian_determinant_field(&phi).unwrap();
        assert_eq!(det.shape(), &[1, 1, 5, 5]);
        assert!(det.data().iter().all(|&d| d == 1.0));
        assert_eq!(fold_fraction(&phi).unwrap(), 0.0);
    }

    #[test]
    fn uniform_scaling_has_analytic_determinant() {
        // phi(p) = 1.1 p  =>  u(p) = 0.1 p, det = 1.21 everywhere.
        let (h, w) = (8, 8);
        let u = Tensor::<f64>::from_fn(&[1, 2, h, w], |i| {
            let wi = i % w;
            let hi = (i / w) % h;
            let ch = (i / (w * h)) % 2;
            0.1 * if ch == 0 { hi as f64 } else { wi as f64 }
        });
        let phi = DeformationField::from_displacement(DisplacementField::new(u).unwrap());
        let det = jacobian_determinant_field(&phi).unwrap();
        for &d in det.data() {
            assert!((d - 1.21).abs() < 1e-12);
        }
    }

    #[test]
    fn integrated_smooth_fields_do_not_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let v = smooth_field(24, 24, 3.0, 4, &mut rng);
            let u = DisplacementField::new(integrate(&v, 7)).unwrap();
            let phi = DeformationField::from_displacement(u);
            assert_eq!(fold_fraction(&phi).unwrap(), 0.0);
        }
    }

    #[test]
    fn displacement_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |_| rng.gen_range(-2.0..2.0));
        let u = DisplacementField::new(grid.clone()).unwrap();
        let phi = DeformationField::from_displacement(u);
        assert_eq!(phi.to_displacement().grid(), &grid);
        // And the absolute grid equals Id + u elementwise.
        let abs = phi.absolute_grid();
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(abs.at4(0, 0, r, c), r as f64 + grid.at4(0, 0, r, c));
                assert_eq!(abs.at4(0, 1, r, c), c as f64 + grid.at4(0, 1, r, c));
            }
        }
    }

    #[test]
    fn constant_field_has_zero_smoothness() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::filled(&[1, 2, 6, 6], 1.7));
        let loss = smoothness_loss(&mut tape, v).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn corner_step_smoothness_matches_hand_sum() {
        // One unit bump at the far corner of a 4x4 grid contributes exactly
        // one squared forward difference per direction: loss = 2 / (H*W).
        let mut grid = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        grid.set4(0, 0, 3, 3, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(grid);
        let loss = smoothness_loss(&mut tape, v).unwrap();
        assert!((tape.value(loss).item() - 2.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn twf_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.twf");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = Tensor::<f32>::from_fn(&[2, 2, 4, 3], |_| rng.gen_range(-4.0..4.0));
        write_twf(&path, &field).unwrap();
        let back = read_twf(&path).unwrap();
        assert_eq!(field, back);
    }

    #[test]
    fn twf_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.twf");
        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_twf(&path), Err(Error::Data(_))));
    }
}
