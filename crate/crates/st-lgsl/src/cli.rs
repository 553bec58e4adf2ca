//! Run configuration and the implementations behind the command-line
//! subcommands. Each `cmd_*` function is a thin, testable orchestration of
//! the library: the binary only parses arguments and maps errors to exit
//! codes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    build_predefined_adjacency, convert_csv_to_stlg, generate_synthetic, load_dataset,
    load_triplets, save_dataset, save_dense_csv, save_triplets, split_and_window, Dataset,
    NanPolicy, Split, SplitSpec, SynthParams,
};
use crate::error::{Error, Result};
use crate::graph::{edge_support_metrics, initialize_generator, normalize_graph_plain};
use crate::metrics::{compute_metrics, write_report_csv, MetricsReport};
use crate::model::{
    forward, load_checkpoint, model_init, save_checkpoint, GraphContext, ModelConfig, ModelParams,
};
use crate::tensor::{Real, Tape, Tensor};
use crate::train::{train, write_history_csv, TrainConfig};

/// Environment variable consulted when neither the command line nor the
/// config file pins a seed.
pub const SEED_ENV: &str = "STLGSL_SEED";
pub const DEFAULT_SEED: u64 = 42;

/// Floating-point width used for training and inference. Checkpoints are
/// stored as f32 either way.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Where the data comes from and how it is windowed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Path of the binary series container.
    pub dataset: String,
    /// Pre-defined adjacency as `src,dst,value` triplets (already weights).
    pub adjacency_csv: Option<String>,
    /// Pairwise distances as `src,dst,distance` triplets, turned into
    /// weights with a thresholded Gaussian kernel. Pairs that are absent
    /// (or listed as 0 off the diagonal) count as unreachable.
    pub distance_csv: Option<String>,
    /// Gaussian kernel width σ; required with `distance_csv`.
    pub sigma: Option<f64>,
    /// Distance cutoff κ; required with `distance_csv`.
    pub kappa: Option<f64>,
    pub nan_policy: NanPolicy,
    /// Chronological train/val/test fractions.
    pub ratios: (f64, f64, f64),
    pub batch: usize,
    /// Feature channel to forecast.
    pub target_feature: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: String::new(),
            adjacency_csv: None,
            distance_csv: None,
            sigma: None,
            kappa: None,
            nan_policy: NanPolicy::default(),
            ratios: (0.7, 0.2, 0.1),
            batch: 64,
            target_feature: 0,
        }
    }
}

/// The complete, strictly validated run description. Unknown keys are
/// rejected so typos fail loudly instead of silently using defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Overrides [`SEED_ENV`] and the built-in default when set.
    pub seed: Option<u64>,
    pub out_dir: String,
    pub precision: Precision,
    /// 1-based horizons reported by `eval` (single steps, not averages).
    pub eval_horizons: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: None,
            out_dir: "runs/latest".into(),
            precision: Precision::F32,
            eval_horizons: vec![3, 6, 12],
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if cfg.data.dataset.is_empty() {
        return Err(Error::Config(format!(
            "{}: data.dataset must point at a series file",
            path.display()
        )));
    }
    cfg.model.validate()?;
    Ok(cfg)
}

/// Seed precedence: command-line flag, then the config file, then the
/// `STLGSL_SEED` environment variable, then [`DEFAULT_SEED`].
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse::<u64>().map_err(|_| {
            Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// The dataset plus the optional pre-defined adjacency, loaded and windowed
/// according to the run config and the (possibly checkpoint-supplied) model
/// architecture.
pub struct LoadedData {
    pub dataset: Dataset,
    pub a_pre: Option<Tensor<f64>>,
}

pub fn load_data(cfg: &RunConfig, model: &ModelConfig) -> Result<LoadedData> {
    let series = load_dataset(Path::new(&cfg.data.dataset), cfg.data.nan_policy)?;
    let m = series.num_nodes;
    let a_pre = match (&cfg.data.adjacency_csv, &cfg.data.distance_csv) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set either adjacency_csv or distance_csv, not both".into(),
            ))
        }
        (Some(adj), None) => Some(load_triplets(Path::new(adj), Some(m))?),
        (None, Some(dist)) => {
            let (sigma, kappa) = match (cfg.data.sigma, cfg.data.kappa) {
                (Some(s), Some(k)) => (s, k),
                _ => {
                    return Err(Error::Config(
                        "distance_csv needs both sigma and kappa".into(),
                    ))
                }
            };
            let mut d = load_triplets(Path::new(dist), Some(m))?;
            // absent pairs load as 0; off the diagonal that means
            // "no measured link", not "zero distance"
            for i in 0..m {
                for j in 0..m {
                    if i != j && d.get2(i, j) == 0.0 {
                        d.set2(i, j, f64::INFINITY);
                    }
                }
            }
            Some(build_predefined_adjacency(&d, sigma, kappa)?)
        }
        (None, None) => None,
    };
    let spec = SplitSpec {
        ratios: cfg.data.ratios,
        t_in: model.t_in,
        t_out: model.t_out,
        batch: cfg.data.batch,
        target_feature: cfg.data.target_feature,
    };
    let dataset = split_and_window(series, spec)?;
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    Ok(LoadedData { dataset, a_pre })
}

/// Build the graph context for `params`, checking that the generator's
/// expected history length matches this dataset's training split.
fn build_context<T: Real>(
    params: &ModelParams<T>,
    data: &LoadedData,
) -> Result<GraphContext<T>> {
    let gen_input = if params.config.use_generator {
        let hist = data.dataset.generator_input::<T>();
        if let Some(gen) = &params.generator {
            if gen.input_dim() != hist.shape()[1] {
                return Err(Error::Config(format!(
                    "the generator was trained on histories of length {} but this dataset's \
                     training split has {} steps; use the original split",
                    gen.input_dim(),
                    hist.shape()[1]
                )));
            }
        }
        Some(hist)
    } else {
        None
    };
    GraphContext::build(&params.config, data.a_pre.as_ref(), gen_input)
}

fn create_out_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))
}

fn write_init_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        text.push_str(&format!("{e},{l:.8}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Generate a synthetic benchmark: the series container plus the planted
/// graph as an edge-list CSV.
pub fn cmd_synth(
    nodes: usize,
    steps: usize,
    k_true: usize,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    let seed = resolve_seed(seed, None)?;
    create_out_dir(out_dir)?;
    let (series, planted) = generate_synthetic(nodes, steps, k_true, seed, &SynthParams::default())?;
    let series_path = out_dir.join("synthetic.stlg");
    let graph_path = out_dir.join("planted_adjacency.csv");
    save_dataset(&series_path, &series)?;
    save_triplets(&graph_path, &planted)?;
    let edges = planted.data().iter().filter(|v| **v != 0.0).count() / 2;
    println!(
        "wrote {} ({} nodes × {} steps, seed {seed}) and {} ({} undirected edges)",
        series_path.display(),
        nodes,
        steps,
        graph_path.display(),
        edges
    );
    Ok(())
}

/// Convert a dense CSV (rows = time steps, columns = nodes) into the binary
/// container.
pub fn cmd_convert(input: &Path, output: &Path) -> Result<()> {
    convert_csv_to_stlg(input, output)?;
    let series = load_dataset(output, NanPolicy::CarryForward)?;
    println!(
        "wrote {} ({} nodes × {} steps, {} feature{})",
        output.display(),
        series.num_nodes,
        series.num_steps,
        series.num_features,
        if series.num_features == 1 { "" } else { "s" }
    );
    Ok(())
}

fn init_generator_if_configured<T: Real>(
    params: &mut ModelParams<T>,
    data: &LoadedData,
    out_dir: &Path,
) -> Result<Option<Vec<f64>>> {
    let cfg = params.config.clone();
    if !(cfg.use_generator && cfg.use_predefined_init && cfg.init_epochs > 0) {
        return Ok(None);
    }
    let Some(a_pre) = data.a_pre.as_ref() else {
        eprintln!(
            "warning: use_predefined_init is set but no adjacency was provided; \
             skipping generator pre-training"
        );
        return Ok(None);
    };
    let hist = data.dataset.generator_input::<T>();
    let gen = params
        .generator
        .as_mut()
        .expect("use_generator implies generator params");
    let history = initialize_generator(gen, &hist, a_pre, cfg.init_epochs, cfg.init_lr, cfg.symmetrize)?;
    write_init_history(&out_dir.join("init_history.csv"), &history)?;
    println!(
        "generator pre-training: {} epochs, loss {:.6} → {:.6}",
        history.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN),
    );
    Ok(Some(history))
}

fn run_train_once<T: Real>(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<MetricsReport> {
    create_out_dir(out_dir)?;
    let data = load_data(cfg, &cfg.model)?;
    let gen_width = data.dataset.generator_input::<T>().shape()[1];
    let mut params = model_init::<T>(&cfg.model, gen_width, seed)?;
    init_generator_if_configured(&mut params, &data, out_dir)?;
    let ctx = build_context(&params, &data)?;

    let outcome = train(params, &ctx, &data.dataset, &cfg.train, seed)?;
    for rec in &outcome.history {
        println!(
            "epoch {:>3}  train {:.6}  val MAE {:.6}  r {}",
            rec.epoch, rec.train_loss, rec.val_mae, rec.r
        );
    }
    println!(
        "best epoch {} with validation MAE {:.6}",
        outcome.best_epoch, outcome.best_val_mae
    );

    save_checkpoint(out_dir.join("model.ckpt"), &outcome.params)?;
    write_history_csv(out_dir.join("history.csv"), &outcome.history)?;

    let (preds, targets) =
        crate::train::predict_split(&outcome.params, &ctx, &data.dataset, Split::Test)?;
    let horizons = usable_horizons(&cfg.eval_horizons, cfg.model.t_out)?;
    let report = compute_metrics(&preds, &targets, &horizons, None)?;
    write_report_csv(out_dir.join("report.csv"), &report)?;
    println!(
        "test: MAE {:.6}  RMSE {:.6}  MAPE {:.4}%",
        report.overall.mae, report.overall.rmse, report.overall.mape_percent
    );
    Ok(report)
}

/// `eval` reports exactly the configured horizons and rejects ones the model
/// cannot produce.
fn usable_horizons(requested: &[usize], t_out: usize) -> Result<Vec<usize>> {
    for &h in requested {
        if h == 0 || h > t_out {
            return Err(Error::Config(format!(
                "eval horizon {h} is outside this model's 1..={t_out}"
            )));
        }
    }
    Ok(requested.to_vec())
}

/// Train (optionally several times with consecutive seeds) and report the
/// spread of the resulting test MAE.
pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    repeats: usize,
    out_dir_override: Option<&Path>,
) -> Result<()> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut cfg = load_run_config(config_path)?;
    if let Some(dir) = out_dir_override {
        cfg.out_dir = dir.display().to_string();
    }
    let base_seed = resolve_seed(seed, cfg.seed)?;
    let out_root = PathBuf::from(&cfg.out_dir);
    let mut maes = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let run_seed = base_seed + rep as u64;
        let dir = if repeats == 1 {
            out_root.clone()
        } else {
            out_root.join(format!("run{rep}"))
        };
        if repeats > 1 {
            println!("--- run {rep} (seed {run_seed}) ---");
        }
        let report = match cfg.precision {
            Precision::F32 => run_train_once::<f32>(&cfg, run_seed, &dir)?,
            Precision::F64 => run_train_once::<f64>(&cfg, run_seed, &dir)?,
        };
        maes.push(report.overall.mae);
    }
    if repeats > 1 {
        let n = maes.len() as f64;
        let mean = maes.iter().sum::<f64>() / n;
        let var = maes.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0);
        println!(
            "test MAE over {repeats} runs: {mean:.4}±{:.4}",
            var.sqrt()
        );
    }
    Ok(())
}

/// Pre-train only the graph generator against the pre-defined adjacency and
/// save the result (plus its loss history) without running the main loop.
pub fn cmd_init_graph(config_path: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    if !cfg.model.use_generator {
        return Err(Error::Config(
            "init-graph needs use_generator; there is nothing to pre-train otherwise".into(),
        ));
    }
    if cfg.model.init_epochs == 0 {
        return Err(Error::Config(
            "init-graph needs init_epochs to be at least 1".into(),
        ));
    }
    let seed = resolve_seed(seed, cfg.seed)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    create_out_dir(&out_dir)?;
    let data = load_data(&cfg, &cfg.model)?;
    let Some(a_pre) = data.a_pre.clone() else {
        return Err(Error::Config(
            "init-graph needs a pre-defined adjacency (adjacency_csv or distance_csv)".into(),
        ));
    };

    match cfg.precision {
        Precision::F32 => init_graph_run::<f32>(&cfg, &data, &a_pre, seed, &out_dir),
        Precision::F64 => init_graph_run::<f64>(&cfg, &data, &a_pre, seed, &out_dir),
    }
}

fn init_graph_run<T: Real>(
    cfg: &RunConfig,
    data: &LoadedData,
    a_pre: &Tensor<f64>,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let hist = data.dataset.generator_input::<T>();
    let mut params = model_init::<T>(&cfg.model, hist.shape()[1], seed)?;
    let gen = params.generator.as_mut().expect("use_generator checked");
    let history = initialize_generator(
        gen,
        &hist,
        a_pre,
        cfg.model.init_epochs,
        cfg.model.init_lr,
        cfg.model.symmetrize,
    )?;
    write_init_history(&out_dir.join("init_history.csv"), &history)?;
    save_checkpoint(out_dir.join("generator_init.ckpt"), &params)?;

    let latent = latent_graph(&params, data)?;
    save_dense_csv(&out_dir.join("latent_graph.csv"), &latent)?;
    let (precision, recall) = edge_support_metrics(&latent, a_pre);
    println!(
        "init: {} epochs, loss {:.6} → {:.6}; edge support vs the given graph: \
         precision {precision:.3}, recall {recall:.3}",
        history.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN),
    );
    println!(
        "artifacts: {}, {}, {}",
        out_dir.join("generator_init.ckpt").display(),
        out_dir.join("init_history.csv").display(),
        out_dir.join("latent_graph.csv").display()
    );
    Ok(())
}

/// The adjacency the diffusion would use as its latent support, as f64.
fn latent_graph<T: Real>(params: &ModelParams<T>, data: &LoadedData) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    match &params.generator {
        Some(_) => {
            let vars = params.on_tape_frozen(&mut tape);
            let hist = data.dataset.generator_input::<T>();
            let h = tape.constant(hist);
            let raw = crate::graph::generate_latent(
                &mut tape,
                h,
                vars.generator.as_ref().expect("generator present"),
                params.config.k_neighbors,
            )?;
            let norm = crate::graph::normalize_graph(&mut tape, raw, params.config.symmetrize)?;
            Ok(tape.value(norm).to_f64())
        }
        None => {
            let a = data.a_pre.as_ref().ok_or_else(|| {
                Error::Config("no generator and no pre-defined graph to export".into())
            })?;
            normalize_graph_plain(a, params.config.symmetrize)
        }
    }
}

/// Evaluate a trained checkpoint on the test split.
pub fn cmd_eval(config_path: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    create_out_dir(&out_dir)?;
    match cfg.precision {
        Precision::F32 => eval_run::<f32>(&cfg, checkpoint, &out_dir),
        Precision::F64 => eval_run::<f64>(&cfg, checkpoint, &out_dir),
    }
}

fn eval_run<T: Real>(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let params = load_checkpoint::<T>(checkpoint)?;
    // the checkpoint's architecture decides the windowing
    let data = load_data(cfg, &params.config)?;
    let ctx = build_context(&params, &data)?;
    let (preds, targets) =
        crate::train::predict_split(&params, &ctx, &data.dataset, Split::Test)?;
    let horizons = usable_horizons(&cfg.eval_horizons, params.config.t_out)?;
    let report = compute_metrics(&preds, &targets, &horizons, None)?;
    write_report_csv(out_dir.join("report.csv"), &report)?;
    for (h, m) in &report.per_horizon {
        println!(
            "horizon {h:>2}: MAE {:.6}  RMSE {:.6}  MAPE {:.4}%",
            m.mae, m.rmse, m.mape_percent
        );
    }
    println!(
        "overall   : MAE {:.6}  RMSE {:.6}  MAPE {:.4}%",
        report.overall.mae, report.overall.rmse, report.overall.mape_percent
    );
    println!("wrote {}", out_dir.join("report.csv").display());
    Ok(())
}

/// Forecast from the window that ends at step `at` (0-based, inclusive) and
/// write the raw-unit predictions as a dense T_out × M CSV.
pub fn cmd_predict(config_path: &Path, checkpoint: &Path, at: usize) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    create_out_dir(&out_dir)?;
    match cfg.precision {
        Precision::F32 => predict_run::<f32>(&cfg, checkpoint, at, &out_dir),
        Precision::F64 => predict_run::<f64>(&cfg, checkpoint, at, &out_dir),
    }
}

fn predict_run<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    at: usize,
    out_dir: &Path,
) -> Result<()> {
    let params = load_checkpoint::<T>(checkpoint)?;
    let data = load_data(cfg, &params.config)?;
    let (t_in, t_out) = (params.config.t_in, params.config.t_out);
    let series = &data.dataset.series;
    if at + 1 < t_in || at >= series.num_steps {
        return Err(Error::Config(format!(
            "prediction window must end inside the series: need {} <= at < {}, got {at}",
            t_in - 1,
            series.num_steps
        )));
    }
    let (m, f_n, tf) = (
        series.num_nodes,
        series.num_features,
        data.dataset.spec.target_feature,
    );
    let t0 = at + 1 - t_in;
    let mut input = Tensor::<T>::zeros(&[1, t_in, m, f_n]);
    for ti in 0..t_in {
        for mi in 0..m {
            for fi in 0..f_n {
                let z = data
                    .dataset
                    .normalizer
                    .transform(mi, fi, series.get(t0 + ti, mi, fi));
                input.data_mut()[((ti * m) + mi) * f_n + fi] = T::from_f64(z);
            }
        }
    }
    let ctx = build_context(&params, &data)?;
    let mut tape = Tape::new();
    let vars = params.on_tape_frozen(&mut tape);
    let x = tape.constant(input);
    let out = forward(&mut tape, &vars, &params.config, &ctx, x)?;
    let pred_z = tape.value(out.prediction);
    let mut pred = Tensor::<f64>::zeros(&[t_out, m]);
    for h in 0..t_out {
        for mi in 0..m {
            let z = pred_z.data()[h * m + mi].to_f64();
            pred.data_mut()[h * m + mi] = data.dataset.normalizer.inverse(mi, tf, z);
        }
    }
    let path = out_dir.join("prediction.csv");
    save_dense_csv(&path, &pred)?;
    println!(
        "forecast for steps {}..{} (window ended at {at}) written to {}",
        at + 1,
        at + t_out,
        path.display()
    );
    Ok(())
}

/// Export the graph a checkpoint would use as its latent diffusion support.
pub fn cmd_export_graph(
    config_path: &Path,
    checkpoint: &Path,
    output: Option<&Path>,
) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    create_out_dir(&out_dir)?;
    let default_path = out_dir.join("latent_graph.csv");
    let path = output.unwrap_or(&default_path);
    match cfg.precision {
        Precision::F32 => export_run::<f32>(&cfg, checkpoint, path),
        Precision::F64 => export_run::<f64>(&cfg, checkpoint, path),
    }
}

fn export_run<T: Real>(cfg: &RunConfig, checkpoint: &Path, path: &Path) -> Result<()> {
    let params = load_checkpoint::<T>(checkpoint)?;
    let data = load_data(cfg, &params.config)?;
    if params.generator.is_none() {
        println!(
            "notice: this checkpoint has no generator; exporting the normalized \
             pre-defined graph instead"
        );
    }
    let latent = latent_graph(&params, &data)?;
    save_dense_csv(path, &latent)?;
    println!("wrote {} ({} × {})", path.display(), latent.shape()[0], latent.shape()[1]);
    if let Some(a_pre) = &data.a_pre {
        let (precision, recall) = edge_support_metrics(&latent, a_pre);
        println!(
            "edge support vs the pre-defined graph: precision {precision:.3}, recall {recall:.3}"
        );
    }
    Ok(())
}
