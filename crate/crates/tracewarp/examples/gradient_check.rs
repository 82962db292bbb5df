//! Verify every tape operation and composite loss against central finite
//! differences, printing one line per check.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use tracewarp::gradcheck::run_sweep;

fn main() -> tracewarp::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0u64);
    let started = std::time::Instant::now();
    let report = run_sweep(seed)?;
    print!("{}", report.to_table_string());
    println!("seed {seed}, {:.1}s", started.elapsed().as_secs_f64());
    std::process::exit(if report.all_passed() { 0 } else { 4 });
}
