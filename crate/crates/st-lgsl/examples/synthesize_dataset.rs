//! Generate the planted-graph benchmark series, window it into train /
//! validation / test splits, and measure the historical-average baseline
//! that any real forecaster has to beat.
//!
//! ```bash
//! cargo run --example synthesize_dataset
//! ```

use st_lgsl::data::{generate_synthetic, split_and_window, Split, SplitSpec, SynthParams};
use st_lgsl::metrics::compute_metrics;
use st_lgsl::train::historical_average_baseline;
use st_lgsl::Result;

fn main() -> Result<()> {
    // 20 sensors, 2000 five-minute steps. Each node couples to the rest of
    // the network through a hidden adjacency G*; the generator's job
    // elsewhere in this crate is to rediscover exactly that graph.
    let (series, planted) = generate_synthetic(20, 2000, 3, 7, &SynthParams::default())?;
    println!(
        "series: {} nodes × {} steps × {} feature(s)",
        series.num_nodes, series.num_steps, series.num_features
    );

    let edges = planted.data().iter().filter(|v| **v != 0.0).count() / 2;
    let degrees: Vec<usize> = (0..20)
        .map(|i| (0..20).filter(|&j| planted.get2(i, j) != 0.0).count())
        .collect();
    println!(
        "planted graph: {edges} undirected edges, degrees {}..{}",
        degrees.iter().min().unwrap(),
        degrees.iter().max().unwrap()
    );

    // Chronological 7:2:1 split; the z-score normalizer is fitted on the
    // training range only so the later splits stay unseen.
    let dataset = split_and_window(series, SplitSpec::default())?;
    for (name, split) in [
        ("train", Split::Train),
        ("val", Split::Val),
        ("test", Split::Test),
    ] {
        println!(
            "{name:>5}: {} windows of 12 steps in, 12 steps out",
            dataset.window_starts(split).len()
        );
    }

    // The naive baseline repeats the input-window mean for every horizon.
    let (pred, target) = historical_average_baseline(&dataset, Split::Test)?;
    let report = compute_metrics(&pred, &target, &[1, 6, 12], None)?;
    println!("\nhistorical average on the test split:");
    for (h, m) in &report.per_horizon {
        println!("  horizon {h:>2}: MAE {:.4}  RMSE {:.4}", m.mae, m.rmse);
    }
    println!(
        "  overall   : MAE {:.4}  RMSE {:.4}",
        report.overall.mae, report.overall.rmse
    );
    Ok(())
}
