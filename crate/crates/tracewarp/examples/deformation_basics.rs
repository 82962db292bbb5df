//! Velocity fields, scaling-and-squaring integration, and warping.
//!
//! Builds a swirl velocity field, integrates it to a displacement, applies
//! it to a test image, checks invertibility, and writes the flow
//! visualization plus the raw field next to the warped images.
//!
//! ```bash
//! cargo run --release --example deformation_basics -- /tmp/deformation_demo
//! ```

use std::path::PathBuf;
use tracewarp::data::save_png;
use tracewarp::deformation::{
    flow_to_rgb, fold_fraction, integrate_velocity_field, warp_image, write_twf,
    DeformationField, VelocityField,
};
use tracewarp::tensor::Tensor;

fn main() -> tracewarp::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/deformation_demo".into())
        .into();
    std::fs::create_dir_all(&out)?;
    let (h, w) = (64usize, 64usize);

    // A gentle swirl around the image center, up to ~2.5 px.
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let velocity = Tensor::<f32>::from_fn(&[1, 2, h, w], |i| {
        let wi = (i % w) as f64;
        let hi = ((i / w) % h) as f64;
        let ch = i / (w * h);
        let (dy, dx) = (hi - cy, wi - cx);
        let r = (dy * dy + dx * dx).sqrt();
        let gain = 2.5 * (-(r / 18.0).powi(2)).exp();
        (if ch == 0 { -dx } else { dy } / r.max(1.0) * gain) as f32
    });
    let v = VelocityField::new(velocity)?;

    let u = integrate_velocity_field(&v, 7)?;
    let phi = DeformationField::from_displacement(u.clone());
    println!(
        "integrated swirl: max |u| = {:.3} px, fold fraction = {}",
        u.grid().max_abs(),
        fold_fraction(&phi)?
    );

    // Checkerboard test image.
    let image = Tensor::<f32>::from_fn(&[1, 1, h, w], |i| {
        let (r, c) = (i / w, i % w);
        if (r / 8 + c / 8) % 2 == 0 {
            0.8
        } else {
            -0.8
        }
    });
    let warped = warp_image(&image, &phi)?;

    // Inverse check: integrate -v and warp back.
    let v_neg = VelocityField::new(v.grid().map(|x| -x))?;
    let u_inv = integrate_velocity_field(&v_neg, 7)?;
    let back = warp_image(
        &warped,
        &DeformationField::from_displacement(u_inv),
    )?;
    let mut err = 0.0f64;
    let mut n = 0.0;
    for r in 8..h - 8 {
        for c in 8..w - 8 {
            err += (back.data()[r * w + c] - image.data()[r * w + c]).abs() as f64;
            n += 1.0;
        }
    }
    println!("round-trip interior MAE after inverse warp: {:.4}", err / n);

    save_png(&image, &out.join("source.png"))?;
    save_png(&warped, &out.join("warped.png"))?;
    save_png(&back, &out.join("restored.png"))?;
    write_twf(&out.join("swirl.twf"), u.grid())?;
    flow_to_rgb(u.grid())?.save(out.join("flow.png"))?;
    println!("wrote source/warped/restored PNGs, swirl.twf, flow.png to {}", out.display());
    Ok(())
}
