//! Pre-train the MLP-kNN graph generator so its latent graph reproduces a
//! reference adjacency, then compare edge supports before and after.
//!
//! The generator embeds every node's full (z-scored) training history with a
//! small MLP, scores node pairs by cosine similarity, keeps the top k per
//! row, and degree-normalizes the result. Initialization fits that output to
//! the pre-defined graph; during forecaster training the same parameters
//! keep learning from the task loss.
//!
//! ```bash
//! cargo run --example learn_latent_graph
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use st_lgsl::data::{generate_synthetic, split_and_window, SplitSpec, SynthParams};
use st_lgsl::graph::{
    edge_support_metrics, generate_latent, initialize_generator, normalize_graph,
    GeneratorParams,
};
use st_lgsl::tensor::{Tape, Tensor};
use st_lgsl::Result;

/// Current latent graph (dense, normalized) for a generator.
fn latent(gen: &GeneratorParams<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = gen.on_tape(&mut tape);
    let raw = generate_latent(&mut tape, xv, &vars, gen.k)?;
    let norm = normalize_graph(&mut tape, raw, true)?;
    Ok(tape.value(norm).clone())
}

fn main() -> Result<()> {
    let (series, planted) = generate_synthetic(20, 2000, 3, 7, &SynthParams::default())?;
    let dataset = split_and_window(series, SplitSpec::default())?;

    // Node histories from the training split only; width = training steps.
    let x = dataset.generator_input::<f64>();
    println!("generator input: {} nodes × {} steps", x.shape()[0], x.shape()[1]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut gen = GeneratorParams::<f64>::init(&[x.shape()[1], 128, 48], 8, &mut rng)?;

    let before = latent(&gen, &x)?;
    let (p, r) = edge_support_metrics(&before, &planted);
    println!("before init: edge support precision {p:.3}, recall {r:.3}");

    let history = initialize_generator(&mut gen, &x, &planted, 1000, 1e-3, true)?;
    println!(
        "init: 1000 epochs, loss {:.6} → {:.6}",
        history[0],
        history.last().unwrap()
    );

    let after = latent(&gen, &x)?;
    let (p, r) = edge_support_metrics(&after, &planted);
    println!("after init:  edge support precision {p:.3}, recall {r:.3}");

    // Show one node's learned neighborhood against the planted truth.
    let node = 0;
    let mut learned: Vec<(usize, f64)> = (0..20)
        .filter(|&j| after.get2(node, j) > 1e-8)
        .map(|j| (j, after.get2(node, j)))
        .collect();
    learned.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let truth: Vec<usize> = (0..20).filter(|&j| planted.get2(node, j) != 0.0).collect();
    println!("\nnode {node}: planted neighbors {truth:?}");
    println!("node {node}: learned neighbors (weight):");
    for (j, w) in learned {
        println!("  {j:>2}  {w:.4}");
    }
    Ok(())
}
