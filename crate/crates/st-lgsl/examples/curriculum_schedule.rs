//! Trace the curriculum schedule that grows the supervised horizon during
//! training, check it against its closed form, and watch the `r` column of a
//! real training history follow the same staircase.
//!
//! ```bash
//! cargo run --example curriculum_schedule
//! ```

use st_lgsl::data::{generate_synthetic, split_and_window, SplitSpec, SynthParams};
use st_lgsl::model::{model_init, GraphContext, ModelConfig, Padding};
use st_lgsl::train::{train, CurriculumState, TrainConfig};
use st_lgsl::Result;

fn main() -> Result<()> {
    // Every `step_size` iterations one more horizon joins the loss, until
    // all T_out are supervised. Early iterations therefore only optimize
    // one-step-ahead error, which is a far easier target.
    let (step_size, t_out) = (100usize, 12usize);
    let mut cur = CurriculumState::new();
    println!("step_size {step_size}, T_out {t_out}:");
    let mut last = 0usize;
    for it in 1..=1400u64 {
        let r = cur.step(step_size, t_out);
        let closed = ((1 + it / step_size as u64) as usize).min(t_out);
        assert_eq!(r, closed, "schedule must match min(1 + ⌊it/s⌋, T_out)");
        if r != last {
            println!("  iteration {it:>4}: supervising {r:>2}/{t_out} horizons");
            last = r;
        }
    }

    // The same staircase shows up in the training history. 271 train
    // windows in batches of 8 give 34 iterations per epoch, so step_size 64
    // bumps the horizon roughly every other epoch.
    let (series, planted) = generate_synthetic(8, 400, 2, 3, &SynthParams::default())?;
    let spec = SplitSpec {
        t_in: 6,
        t_out: 4,
        batch: 8,
        ..SplitSpec::default()
    };
    let dataset = split_and_window(series, spec)?;
    let config = ModelConfig {
        blocks: 3,
        dilations: vec![1, 2, 4],
        residual_channels: 4,
        skip_channels: 8,
        end_channels: 8,
        k_diff: 1,
        t_in: 6,
        t_out: 4,
        k_neighbors: 3,
        embed_dim: 6,
        gen_hidden: vec![16],
        pad: Padding::Causal,
        use_generator: false,
        use_predefined_graph: true,
        init_epochs: 0,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        lr: 2e-3,
        epochs: 8,
        step_size: 64,
        ..TrainConfig::default()
    };
    let params = model_init::<f32>(&config, 1, 1)?;
    let ctx = GraphContext::build(&config, Some(&planted), None)?;
    let out = train(params, &ctx, &dataset, &train_config, 1)?;

    println!("\nepoch  train_loss  val_mae  horizons");
    for rec in &out.history {
        println!(
            "{:>5}  {:>10.4}  {:>7.4}  {:>8}",
            rec.epoch, rec.train_loss, rec.val_mae, rec.r
        );
    }
    println!(
        "\nwithout use_curriculum the r column would sit at {} from epoch 0.",
        config.t_out
    );
    Ok(())
}
