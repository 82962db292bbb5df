//! Scratch harness: orderings across seeds for the acceptance trends.
use rayon::prelude::*;
use tracewarp::cli::run_ablation;
use tracewarp::data::{generate_dataset, split, SynthConfig};
use tracewarp::eval::{ssim, standard_eval, to_report_scale};
use tracewarp::model::infer;
use tracewarp::trainer::{fit, TrainConfig};

fn main() -> tracewarp::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("ablate");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(24);
    let n_pairs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(48);
    let size: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let synth = SynthConfig { image_size: size, n_pairs, ..Default::default() };
    let pairs = generate_dataset(&synth)?;
    let (train, test) = split(pairs, 0.7, synth.seed)?;
    let base = TrainConfig { image_size: size, epochs, ..Default::default() };

    match mode {
        "ablate" => {
            for seed in 0..5u64 {
                let cfg = TrainConfig { seed, ..base };
                let rows = run_ablation(&train, &test, &cfg, None)?;
                let mae: Vec<f64> = rows.iter().map(|r| r.standard.mean_of("mae")).collect();
                let dice: Vec<f64> = rows.iter().map(|r| r.correspondence.mean_of("edge_dice_pct")).collect();
                println!(
                    "seed {seed}: MAE trans={:.2} g0={:.2} full={:.2} | order_ok={} strict={} || dice g0={:.2} full={:.2} ok={} strict={}",
                    mae[0], mae[1], mae[2],
                    mae[2] <= mae[1] && mae[1] <= mae[0],
                    mae[2] < mae[1] && mae[1] < mae[0],
                    dice[1], dice[2],
                    dice[2] >= dice[1],
                    dice[2] > dice[1],
                );
            }
        }
        "alpha" => {
            for seed in [42u64, 0, 1] {
                let results: Vec<(f64, f64)> = [0.25, 0.5, 0.75, 1.0]
                    .par_iter()
                    .map(|&alpha| {
                        let cfg = TrainConfig { alpha, seed, ..base };
                        let (state, _) = fit(&train, &cfg, None).unwrap();
                        let rep = standard_eval(
                            |x| infer(&state.params, x, cfg.integration_steps),
                            &test,
                        )
                        .unwrap();
                        (alpha, rep.mean_of("ssim_pct"))
                    })
                    .collect();
                let vals: Vec<f64> = results.iter().map(|r| r.1).collect();
                let max_idx = vals
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                println!(
                    "seed {seed}: SSIM over alpha [0.25,0.5,0.75,1.0] = {:.2?} -> argmax {} (interior={})",
                    vals, results[max_idx].0, max_idx < 3
                );
            }
        }
        "gamma" => {
            for seed in 0..5u64 {
                let results: Vec<(f64, f64)> = [0.0, 0.5, 1.0]
                    .par_iter()
                    .map(|&gamma| {
                        let cfg = TrainConfig { gamma, seed, ..base };
                        let (state, _) = fit(&train, &cfg, None).unwrap();
                        // SSIM between y_trans and y_warp on the test split.
                        let mut acc = 0.0;
                        for p in &test {
                            let out = infer(&state.params, &p.source, cfg.integration_steps).unwrap();
                            acc += ssim(
                                &to_report_scale(&out.y_trans),
                                &to_report_scale(&out.y_warp),
                                255.0,
                            )
                            .unwrap();
                        }
                        (gamma, acc / test.len() as f64 * 100.0)
                    })
                    .collect();
                let v: Vec<f64> = results.iter().map(|r| r.1).collect();
                println!(
                    "seed {seed}: SSIM(y_trans,y_warp) over gamma [0,0.5,1] = {:.2?} nondecreasing={} strict={}",
                    v,
                    v[0] <= v[1] + 1e-12 && v[1] <= v[2] + 1e-12,
                    v[0] < v[1] && v[1] < v[2]
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
    Ok(())
}
