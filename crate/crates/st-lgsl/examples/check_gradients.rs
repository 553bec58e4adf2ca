//! Verify the tape's analytic gradients against central finite differences
//! for each layer and for the assembled forecaster.
//!
//! Everything in this crate trains through one reverse-mode tape, so a
//! single bad backward rule would silently corrupt every experiment. This
//! tour prints the worst relative error per component; anything above 1e-6
//! in f64 would be suspicious, and 1e-4 is the hard acceptance line.
//!
//! ```bash
//! cargo run --example check_gradients
//! ```

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use st_lgsl::graph::{generate_latent, normalize_graph, GeneratorParams};
use st_lgsl::layers::{diffusion_conv, dilated_causal_conv, gated_tcn, ConvKernel, DiffusionWeights};
use st_lgsl::model::{forward, model_init, GraphContext, ModelConfig};
use st_lgsl::tensor::{grad_check, PadMode, Tensor};
use st_lgsl::Result;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn main() -> Result<()> {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut table: Vec<(&str, f64)> = Vec::new();

    // dilated causal convolution, gradient with respect to the input
    let kernel = ConvKernel::<f64>::init(4, 3, 2, 2, &mut rng);
    let x = rand_tensor(&[2, 3, 8], &mut rng);
    let err = grad_check(
        |tape, v| {
            let k = kernel.on_tape(tape);
            let y = dilated_causal_conv(tape, v, &k, PadMode::Causal).unwrap();
            tape.mean(y).unwrap()
        },
        &x,
        EPS,
    );
    table.push(("dilated conv / input", err));

    // gated TCN, gradient with respect to the filter taps
    let filter = ConvKernel::<f64>::init(4, 3, 2, 1, &mut rng);
    let gate = ConvKernel::<f64>::init(4, 3, 2, 1, &mut rng);
    let err = grad_check(
        |tape, v| {
            let mut f = filter.on_tape(tape);
            f.weight = v;
            let g = gate.on_tape(tape);
            let x = tape.constant(x.clone());
            let y = gated_tcn(tape, x, &f, &g, PadMode::Causal).unwrap();
            tape.mean(y).unwrap()
        },
        &filter.weight,
        EPS,
    );
    table.push(("gated TCN / filter taps", err));

    // diffusion convolution, gradient with respect to the graph itself —
    // this is the path that trains the generator from the forecast loss
    let weights = DiffusionWeights::<f64>::init(1, 2, 3, 4, &mut rng);
    let xg = rand_tensor(&[2, 5, 3], &mut rng);
    let graph = rand_tensor(&[5, 5], &mut rng).map(|v| v.abs());
    let err = grad_check(
        |tape, v| {
            let w = weights.on_tape(tape);
            let x = tape.constant(xg.clone());
            let z = diffusion_conv(tape, x, &[v], &w, 2).unwrap();
            tape.mean(z).unwrap()
        },
        &graph,
        EPS,
    );
    table.push(("diffusion conv / graph", err));

    // generator: through cosine similarity, hard top-k and normalization
    let gen = GeneratorParams::<f64>::init(&[10, 6, 3], 2, &mut rng)?;
    let x_full = rand_tensor(&[4, 10], &mut rng);
    let err = grad_check(
        |tape, v| {
            let mut g = gen.on_tape(tape);
            g.weights[0] = v;
            let x = tape.constant(x_full.clone());
            let a = generate_latent(tape, x, &g, 2).unwrap();
            let norm = normalize_graph(tape, a, true).unwrap();
            tape.mean(norm).unwrap()
        },
        &gen.weights[0],
        EPS,
    );
    table.push(("generator / first layer", err));

    // the whole model, gradient with respect to the input batch
    let config = ModelConfig {
        blocks: 2,
        dilations: vec![1, 2],
        residual_channels: 4,
        skip_channels: 5,
        end_channels: 6,
        k_diff: 1,
        t_in: 4,
        t_out: 2,
        num_features: 1,
        k_neighbors: 2,
        embed_dim: 3,
        gen_hidden: vec![5],
        use_predefined_graph: false,
        use_predefined_init: false,
        init_epochs: 0,
        ..ModelConfig::default()
    };
    let gen_input = rand_tensor(&[4, 10], &mut rng);
    let params = model_init::<f64>(&config, 10, 77)?;
    let ctx = GraphContext::build(&config, None, Some(gen_input))?;
    let x_t = rand_tensor(&[2, 4, 4, 1], &mut rng);
    let err = grad_check(
        |tape, v| {
            let vars = params.on_tape_frozen(tape);
            let out = forward(tape, &vars, &config, &ctx, v).unwrap();
            tape.mean(out.prediction).unwrap()
        },
        &x_t,
        EPS,
    );
    table.push(("full model / input batch", err));

    println!("worst relative error, analytic vs central differences (ε = {EPS:.0e}):\n");
    for (name, err) in &table {
        let verdict = if *err < 1e-4 { "ok" } else { "BAD" };
        println!("  {name:<28} {err:>12.3e}  {verdict}");
    }
    Ok(())
}
