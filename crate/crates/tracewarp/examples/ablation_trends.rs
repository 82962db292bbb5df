//! Compare the three ablation presets (translation-only, two streams
//! without the cross-domain constraint, full model) on one shared seed.
//! Small scale, so it finishes in a couple of minutes.

use tracewarp::cli::{ablation_csv, run_ablation};
use tracewarp::data::{generate_dataset, split, SynthConfig};
use tracewarp::trainer::TrainConfig;

fn main() -> tracewarp::Result<()> {
    let synth = SynthConfig {
        image_size: 32,
        n_pairs: 32,
        ..Default::default()
    };
    let pairs = generate_dataset(&synth)?;
    let (train, test) = split(pairs, 0.7, synth.seed)?;
    let base = TrainConfig {
        image_size: 32,
        epochs: 16,
        ..Default::default()
    };
    println!(
        "training 3 presets x {} epochs on {} pairs...",
        base.epochs,
        train.len()
    );
    let rows = run_ablation(&train, &test, &base, None)?;
    print!("{}", ablation_csv(&rows));
    println!(
        "\nfidelity MAE:        {:.3} (trans-only) vs {:.3} (two-stream) vs {:.3} (full)",
        rows[0].standard.mean_of("mae"),
        rows[1].standard.mean_of("mae"),
        rows[2].standard.mean_of("mae")
    );
    println!(
        "correspondence dice: {:.2}% (two-stream) vs {:.2}% (full)",
        rows[1].correspondence.mean_of("edge_dice_pct"),
        rows[2].correspondence.mean_of("edge_dice_pct")
    );
    Ok(())
}
