//! The full forecaster: a 1×1 input projection, stacked blocks of gated
//! temporal convolution + diffusion convolution with residual and skip
//! connections, and a two-layer head that emits every horizon at once.
//! The latent graph is produced by the generator once per forward pass and
//! shared by all blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    generate_latent, glorot_uniform, normalize_graph, normalize_graph_plain, GeneratorParams,
    GeneratorVars,
};
use crate::layers::{
    diffusion_conv, dilated_causal_conv, gated_tcn, transition_matrices, ConvKernel,
    ConvKernelVars, DiffusionVars, DiffusionWeights,
};
use crate::tensor::{PadMode, Real, Tape, Tensor, Var};

const CKPT_MAGIC: &[u8; 8] = b"STLGCKPT";
const CKPT_VERSION: u32 = 1;

/// Temporal padding policy. Causal keeps sequence length and is the default;
/// valid drops warm-up positions, which requires the receptive field to equal
/// the input window exactly.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Causal,
    Valid,
}

impl Padding {
    pub fn mode(self) -> PadMode {
        match self {
            Padding::Causal => PadMode::Causal,
            Padding::Valid => PadMode::Valid,
        }
    }
}

/// Architecture and ablation switches. Everything that changes parameter
/// shapes or the forward graph lives here so a checkpoint can embed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of spatio-temporal blocks.
    pub blocks: usize,
    /// Temporal kernel width K.
    pub kernel_size: usize,
    /// Per-block dilation factors; length must equal `blocks`.
    pub dilations: Vec<usize>,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub end_channels: usize,
    /// Diffusion steps K_diff; each support contributes K_diff+1 terms.
    pub k_diff: usize,
    /// Input window length.
    pub t_in: usize,
    /// Forecast horizons emitted.
    pub t_out: usize,
    /// Input feature channels per node.
    pub num_features: usize,
    /// Neighbors kept per row when sparsifying the latent graph.
    pub k_neighbors: usize,
    /// Node embedding width T′ produced by the generator.
    pub embed_dim: usize,
    /// Hidden widths of the generator MLP.
    pub gen_hidden: Vec<usize>,
    pub pad: Padding,
    /// Learn a latent graph; when false the normalized pre-defined adjacency
    /// stands in for it.
    pub use_generator: bool,
    /// Include forward/backward transition matrices of the pre-defined graph
    /// as diffusion supports.
    pub use_predefined_graph: bool,
    /// Pre-train the generator against the pre-defined graph before the main
    /// loop.
    pub use_predefined_init: bool,
    /// Symmetric degree normalization of the latent graph; when false only
    /// row degrees are used.
    pub symmetrize: bool,
    /// Grow the supervised horizon during training instead of starting with
    /// all of them.
    pub use_curriculum: bool,
    /// Epochs of generator pre-training (0 disables even if
    /// `use_predefined_init` is set).
    pub init_epochs: usize,
    pub init_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 4,
            kernel_size: 2,
            dilations: vec![1, 2, 4, 8],
            residual_channels: 32,
            skip_channels: 64,
            end_channels: 64,
            k_diff: 2,
            t_in: 12,
            t_out: 12,
            num_features: 1,
            k_neighbors: 20,
            embed_dim: 64,
            gen_hidden: vec![256],
            pad: Padding::Causal,
            use_generator: true,
            use_predefined_graph: true,
            use_predefined_init: true,
            symmetrize: true,
            use_curriculum: true,
            init_epochs: 1000,
            init_lr: 1e-3,
        }
    }
}

impl ModelConfig {
    /// How far back the last output position can see: `1 + (K−1)·Σ dᵢ`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }

    /// Diffusion supports per block: forward + backward transitions when the
    /// pre-defined graph participates, plus the latent (or stand-in) graph.
    pub fn num_supports(&self) -> usize {
        if self.use_predefined_graph {
            3
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.dilations.len() != self.blocks {
            return Err(Error::Config(format!(
                "dilation schedule has {} entries for {} blocks",
                self.dilations.len(),
                self.blocks
            )));
        }
        if self.kernel_size == 0 || self.dilations.contains(&0) {
            return Err(Error::Config(
                "kernel size and dilations must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("residual_channels", self.residual_channels),
            ("skip_channels", self.skip_channels),
            ("end_channels", self.end_channels),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("num_features", self.num_features),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let rf = self.receptive_field();
        if rf < self.t_in {
            return Err(Error::Config(format!(
                "receptive field {rf} cannot cover the input window t_in = {}; \
                 deepen the dilation schedule or enlarge the kernel",
                self.t_in
            )));
        }
        if self.pad == Padding::Valid && rf > self.t_in {
            return Err(Error::Config(format!(
                "valid padding needs receptive field == t_in, got {rf} vs {}",
                self.t_in
            )));
        }
        if self.use_generator {
            if self.embed_dim == 0 {
                return Err(Error::Config("embed_dim must be at least 1".into()));
            }
            if self.k_neighbors == 0 {
                return Err(Error::Config("k_neighbors must be at least 1".into()));
            }
            if self.gen_hidden.contains(&0) {
                return Err(Error::Config(
                    "generator hidden widths must be at least 1".into(),
                ));
            }
        }
        if !self.use_generator && !self.use_predefined_graph {
            return Err(Error::Config(
                "either the graph generator or the pre-defined graph must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// One spatio-temporal block.
#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub filter: ConvKernel<T>,
    pub gate: ConvKernel<T>,
    pub diffusion: DiffusionWeights<T>,
    pub residual: ConvKernel<T>,
    pub skip: ConvKernel<T>,
}

pub struct BlockVars {
    pub filter: ConvKernelVars,
    pub gate: ConvKernelVars,
    pub diffusion: DiffusionVars,
    pub residual: ConvKernelVars,
    pub skip: ConvKernelVars,
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub input_proj: ConvKernel<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_w1: Tensor<T>,
    pub head_b1: Tensor<T>,
    pub head_w2: Tensor<T>,
    pub head_b2: Tensor<T>,
    pub generator: Option<GeneratorParams<T>>,
}

/// Tape handles mirroring [`ModelParams`]; field order defines the canonical
/// parameter enumeration shared by the optimizer and the checkpoint format.
pub struct ModelVars {
    pub input_proj: ConvKernelVars,
    pub blocks: Vec<BlockVars>,
    pub head_w1: Var,
    pub head_b1: Var,
    pub head_w2: Var,
    pub head_b2: Var,
    pub generator: Option<GeneratorVars>,
}

impl ModelVars {
    /// All parameter handles in [`ModelParams::named_tensors`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.input_proj.weight, self.input_proj.bias];
        for b in &self.blocks {
            out.push(b.filter.weight);
            out.push(b.filter.bias);
            out.push(b.gate.weight);
            out.push(b.gate.bias);
            for ws in &b.diffusion.terms {
                out.extend_from_slice(ws);
            }
            out.push(b.residual.weight);
            out.push(b.residual.bias);
            out.push(b.skip.weight);
            out.push(b.skip.bias);
        }
        out.extend([self.head_w1, self.head_b1, self.head_w2, self.head_b2]);
        if let Some(g) = &self.generator {
            out.extend(g.flat());
        }
        out
    }
}

impl<T: Real> ModelParams<T> {
    /// Stable (name, tensor) enumeration; the name set and order are part of
    /// the checkpoint contract.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("input_proj.w".into(), &self.input_proj.weight),
            ("input_proj.b".into(), &self.input_proj.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.filter.w"), &b.filter.weight));
            out.push((format!("block{i}.filter.b"), &b.filter.bias));
            out.push((format!("block{i}.gate.w"), &b.gate.weight));
            out.push((format!("block{i}.gate.b"), &b.gate.bias));
            for (s, ws) in b.diffusion.terms.iter().enumerate() {
                for (k, w) in ws.iter().enumerate() {
                    out.push((format!("block{i}.diffusion.s{s}k{k}"), w));
                }
            }
            out.push((format!("block{i}.residual.w"), &b.residual.weight));
            out.push((format!("block{i}.residual.b"), &b.residual.bias));
            out.push((format!("block{i}.skip.w"), &b.skip.weight));
            out.push((format!("block{i}.skip.b"), &b.skip.bias));
        }
        out.push(("head.w1".into(), &self.head_w1));
        out.push(("head.b1".into(), &self.head_b1));
        out.push(("head.w2".into(), &self.head_w2));
        out.push(("head.b2".into(), &self.head_b2));
        if let Some(g) = &self.generator {
            out.extend(g.named_tensors());
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("input_proj.w".into(), &mut self.input_proj.weight),
            ("input_proj.b".into(), &mut self.input_proj.bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.filter.w"), &mut b.filter.weight));
            out.push((format!("block{i}.filter.b"), &mut b.filter.bias));
            out.push((format!("block{i}.gate.w"), &mut b.gate.weight));
            out.push((format!("block{i}.gate.b"), &mut b.gate.bias));
            for (s, ws) in b.diffusion.terms.iter_mut().enumerate() {
                for (k, w) in ws.iter_mut().enumerate() {
                    out.push((format!("block{i}.diffusion.s{s}k{k}"), w));
                }
            }
            out.push((format!("block{i}.residual.w"), &mut b.residual.weight));
            out.push((format!("block{i}.residual.b"), &mut b.residual.bias));
            out.push((format!("block{i}.skip.w"), &mut b.skip.weight));
            out.push((format!("block{i}.skip.b"), &mut b.skip.bias));
        }
        out.push(("head.w1".into(), &mut self.head_w1));
        out.push(("head.b1".into(), &mut self.head_b1));
        out.push(("head.w2".into(), &mut self.head_w2));
        out.push(("head.b2".into(), &mut self.head_b2));
        if let Some(g) = &mut self.generator {
            out.extend(g.named_tensors_mut());
        }
        out
    }

    /// Register every parameter as a differentiable leaf.
    pub fn on_tape(&self, tape: &mut Tape<T>) -> ModelVars {
        self.vars(tape, false)
    }

    /// Register every parameter as a constant (inference / evaluation).
    pub fn on_tape_frozen(&self, tape: &mut Tape<T>) -> ModelVars {
        self.vars(tape, true)
    }

    fn vars(&self, tape: &mut Tape<T>, frozen: bool) -> ModelVars {
        let put = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if frozen {
                tape.constant(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        let conv = |tape: &mut Tape<T>, k: &ConvKernel<T>, frozen: bool| {
            if frozen {
                k.on_tape_frozen(tape)
            } else {
                k.on_tape(tape)
            }
        };
        ModelVars {
            input_proj: conv(tape, &self.input_proj, frozen),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    filter: conv(tape, &b.filter, frozen),
                    gate: conv(tape, &b.gate, frozen),
                    diffusion: if frozen {
                        b.diffusion.on_tape_frozen(tape)
                    } else {
                        b.diffusion.on_tape(tape)
                    },
                    residual: conv(tape, &b.residual, frozen),
                    skip: conv(tape, &b.skip, frozen),
                })
                .collect(),
            head_w1: put(tape, &self.head_w1),
            head_b1: put(tape, &self.head_b1),
            head_w2: put(tape, &self.head_w2),
            head_b2: put(tape, &self.head_b2),
            generator: self.generator.as_ref().map(|g| {
                if frozen {
                    GeneratorVars {
                        weights: g.weights.iter().map(|w| tape.constant(w.clone())).collect(),
                        biases: g.biases.iter().map(|b| tape.constant(b.clone())).collect(),
                    }
                } else {
                    g.on_tape(tape)
                }
            }),
        }
    }
}

/// Glorot-seeded parameters for `config`. `gen_input_width` is the length of
/// the history the generator embeds (the training-split length); it is
/// ignored when the generator is disabled.
pub fn model_init<T: Real>(
    config: &ModelConfig,
    gen_input_width: usize,
    seed: u64,
) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_res, c_skip, c_end) = (
        config.residual_channels,
        config.skip_channels,
        config.end_channels,
    );
    let input_proj = ConvKernel::init(c_res, config.num_features, 1, 1, &mut rng);
    let blocks = config
        .dilations
        .iter()
        .map(|&d| BlockParams {
            filter: ConvKernel::init(c_res, c_res, config.kernel_size, d, &mut rng),
            gate: ConvKernel::init(c_res, c_res, config.kernel_size, d, &mut rng),
            diffusion: DiffusionWeights::init(
                config.num_supports(),
                config.k_diff,
                c_res,
                c_res,
                &mut rng,
            ),
            residual: ConvKernel::init(c_res, c_res, 1, 1, &mut rng),
            skip: ConvKernel::init(c_skip, c_res, 1, 1, &mut rng),
        })
        .collect();
    let head_w1 = glorot_uniform(&[c_skip, c_end], c_skip, c_end, &mut rng);
    let head_w2 = glorot_uniform(&[c_end, config.t_out], c_end, config.t_out, &mut rng);
    let generator = if config.use_generator {
        if gen_input_width == 0 {
            return Err(Error::Config(
                "generator input width must be at least 1".into(),
            ));
        }
        let mut dims = vec![gen_input_width];
        dims.extend_from_slice(&config.gen_hidden);
        dims.push(config.embed_dim);
        Some(GeneratorParams::init(
            &dims,
            config.k_neighbors,
            &mut rng,
        )?)
    } else {
        None
    };
    Ok(ModelParams {
        config: config.clone(),
        input_proj,
        blocks,
        head_w1,
        head_b1: Tensor::zeros(&[c_end]),
        head_w2,
        head_b2: Tensor::zeros(&[config.t_out]),
        generator,
    })
}

/// Fixed graph-side inputs of a forward pass: transition matrices of the
/// pre-defined graph and/or the node histories the generator embeds.
#[derive(Clone, Debug)]
pub struct GraphContext<T> {
    pub p_forward: Option<Tensor<T>>,
    pub p_backward: Option<Tensor<T>>,
    /// Normalized pre-defined adjacency; stands in for the latent graph when
    /// the generator is disabled.
    pub a_pre_norm: Option<Tensor<T>>,
    /// (M, T_train) z-scored node histories for the generator.
    pub gen_input: Option<Tensor<T>>,
}

impl<T: Real> GraphContext<T> {
    pub fn build(
        config: &ModelConfig,
        a_pre: Option<&Tensor<f64>>,
        gen_input: Option<Tensor<T>>,
    ) -> Result<Self> {
        let needs_pre = config.use_predefined_graph || !config.use_generator;
        if needs_pre && a_pre.is_none() {
            return Err(Error::Config(
                "this configuration needs a pre-defined adjacency; provide a distance or \
                 adjacency table, or disable use_predefined_graph"
                    .into(),
            ));
        }
        if config.use_generator && gen_input.is_none() {
            return Err(Error::Config(
                "the graph generator needs node histories; none were provided".into(),
            ));
        }
        if let (Some(a), Some(g)) = (a_pre, gen_input.as_ref()) {
            if a.shape()[0] != g.shape()[0] {
                return Err(Error::Data(format!(
                    "adjacency covers {} nodes but the series has {}",
                    a.shape()[0],
                    g.shape()[0]
                )));
            }
        }
        let (p_forward, p_backward) = if config.use_predefined_graph {
            let a = Tensor::from_f64_tensor(a_pre.expect("checked above"));
            let (f, b) = transition_matrices(&a)?;
            (Some(f), Some(b))
        } else {
            (None, None)
        };
        let a_pre_norm = if config.use_generator {
            None
        } else {
            let a = Tensor::from_f64_tensor(a_pre.expect("checked above"));
            Some(normalize_graph_plain(&a, config.symmetrize)?)
        };
        Ok(GraphContext {
            p_forward,
            p_backward,
            a_pre_norm,
            gen_input,
        })
    }

    fn num_nodes(&self) -> Option<usize> {
        self.p_forward
            .as_ref()
            .or(self.a_pre_norm.as_ref())
            .or(self.gen_input.as_ref())
            .map(|t| t.shape()[0])
    }
}

/// Result of a forward pass.
pub struct ForwardOutput {
    /// Predictions, shape (batch, T_out, M), in normalized units.
    pub prediction: Var,
    /// The adjacency used as the latent-graph support (normalized latent
    /// graph, or the normalized pre-defined graph when the generator is off).
    pub graph: Var,
}

/// Run the model on a batch `x` of shape (batch, T_in, M, F).
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    ctx: &GraphContext<T>,
    x: Var,
) -> Result<ForwardOutput> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 || xs[1] != config.t_in || xs[3] != config.num_features {
        return Err(Error::Data(format!(
            "model expects input (batch, {}, nodes, {}), got {xs:?}",
            config.t_in, config.num_features
        )));
    }
    let (b, t_in, m, f) = (xs[0], xs[1], xs[2], xs[3]);
    if let Some(n) = ctx.num_nodes() {
        if n != m {
            return Err(Error::Data(format!(
                "graph context covers {n} nodes but the batch has {m}"
            )));
        }
    }

    // the latent graph is built once and shared by every block
    let graph = match (&vars.generator, &ctx.gen_input) {
        (Some(gen), Some(hist)) => {
            let hist = tape.constant(hist.clone());
            let raw = generate_latent(tape, hist, gen, config.k_neighbors)?;
            normalize_graph(tape, raw, config.symmetrize)?
        }
        _ => {
            let a = ctx.a_pre_norm.as_ref().ok_or_else(|| {
                Error::Config("no latent generator and no pre-defined graph available".into())
            })?;
            tape.constant(a.clone())
        }
    };
    let mut supports = Vec::with_capacity(3);
    if config.use_predefined_graph {
        let (pf, pb) = match (&ctx.p_forward, &ctx.p_backward) {
            (Some(f), Some(bwd)) => (f.clone(), bwd.clone()),
            _ => {
                return Err(Error::Config(
                    "use_predefined_graph is set but no transition matrices were built".into(),
                ))
            }
        };
        supports.push(tape.constant(pf));
        supports.push(tape.constant(pb));
    }
    supports.push(graph);

    let pad = config.pad.mode();
    let c_res = config.residual_channels;

    let h = tape.permute(x, &[0, 2, 3, 1])?; // (b, M, F, T)
    let h = tape.reshape(h, &[b * m, f, t_in])?;
    let mut cur = dilated_causal_conv(tape, h, &vars.input_proj, PadMode::Causal)?;

    let mut skip_sum: Option<Var> = None;
    for block in &vars.blocks {
        let block_in = cur;
        let gated = gated_tcn(tape, block_in, &block.filter, &block.gate, pad)?;
        let glen = tape.value(gated).shape()[2];

        // skip path reads the newest position only; its 1×1 conv commutes
        // with the slice, so slice first and convolve a single column
        let last = tape.slice_axis(gated, 2, glen - 1, 1)?;
        let sk = dilated_causal_conv(tape, last, &block.skip, PadMode::Causal)?;
        skip_sum = Some(match skip_sum {
            Some(acc) => tape.add(acc, sk)?,
            None => sk,
        });

        // diffuse across nodes independently at every retained position
        let g4 = tape.reshape(gated, &[b, m, c_res, glen])?;
        let g4 = tape.permute(g4, &[0, 3, 1, 2])?; // (b, glen, M, C)
        let gflat = tape.reshape(g4, &[b * glen, m, c_res])?;
        let z = diffusion_conv(tape, gflat, &supports, &block.diffusion, config.k_diff)?;
        let z = tape.reshape(z, &[b, glen, m, c_res])?;
        let z = tape.permute(z, &[0, 2, 3, 1])?;
        let z = tape.reshape(z, &[b * m, c_res, glen])?;

        // residual from the block input, aligned at the sequence end when
        // valid padding shortened the gated output
        let in_len = tape.value(block_in).shape()[2];
        let aligned = if in_len == glen {
            block_in
        } else {
            tape.slice_axis(block_in, 2, in_len - glen, glen)?
        };
        let res = dilated_causal_conv(tape, aligned, &block.residual, PadMode::Causal)?;
        cur = tape.add(z, res)?;
    }

    let skip = skip_sum.expect("at least one block (validated)");
    let h = tape.relu(skip)?;
    let h = tape.reshape(h, &[b * m, config.skip_channels])?;
    let h = tape.matmul(h, vars.head_w1)?;
    let h = tape.add_row_vec(h, vars.head_b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, vars.head_w2)?;
    let h = tape.add_row_vec(h, vars.head_b2)?; // (b·M, T_out)
    let y = tape.reshape(h, &[b, m, config.t_out])?;
    let prediction = tape.permute(y, &[0, 2, 1])?; // (b, T_out, M)

    Ok(ForwardOutput { prediction, graph })
}

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

/// Write the model (architecture plus every parameter) to a versioned binary
/// checkpoint. Values are stored as little-endian `f32` regardless of the
/// working precision.
pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_u32(&mut w, CKPT_VERSION, path)?;
    let json = serde_json::to_vec(&params.config)
        .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
    write_u32(&mut w, json.len() as u32, path)?;
    w.write_all(&json).map_err(|e| Error::io(path.display().to_string(), e))?;
    let named = params.named_tensors();
    write_u32(&mut w, named.len() as u32, path)?;
    for (name, tensor) in named {
        write_u32(&mut w, name.len() as u32, path)?;
        w.write_all(name.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
        write_u32(&mut w, tensor.rank() as u32, path)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a checkpoint back. The embedded config decides the expected tensor
/// names; any mismatch (missing, extra, renamed, reshaped) is a data error.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let json_len = read_u32(&mut r, path)? as usize;
    let mut json = vec![0u8; json_len];
    read_exact(&mut r, &mut json, path)?;
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::Data(format!("checkpoint carries an invalid model config: {e}")))?;
    config.validate()?;

    let n_tensors = read_u32(&mut r, path)? as usize;
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, path)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, path)?;
            data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
        }
        let tensor = Tensor::from_vec(shape, data).map_err(Error::from)?;
        tensors.push((name, tensor));
    }

    let mut it = tensors.into_iter();
    let mut next = |expect: &str| -> Result<Tensor<T>> {
        match it.next() {
            Some((name, t)) if name == expect => Ok(t),
            Some((name, _)) => Err(Error::Data(format!(
                "checkpoint tensor order mismatch: expected {expect}, found {name}"
            ))),
            None => Err(Error::Data(format!(
                "checkpoint ends early: missing tensor {expect}"
            ))),
        }
    };

    let input_proj = ConvKernel {
        weight: next("input_proj.w")?,
        bias: next("input_proj.b")?,
        dilation: 1,
    };
    let mut blocks = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let d = config.dilations[i];
        let filter = ConvKernel {
            weight: next(&format!("block{i}.filter.w"))?,
            bias: next(&format!("block{i}.filter.b"))?,
            dilation: d,
        };
        let gate = ConvKernel {
            weight: next(&format!("block{i}.gate.w"))?,
            bias: next(&format!("block{i}.gate.b"))?,
            dilation: d,
        };
        let mut terms = Vec::with_capacity(config.num_supports());
        for s in 0..config.num_supports() {
            let mut ws = Vec::with_capacity(config.k_diff + 1);
            for k in 0..=config.k_diff {
                ws.push(next(&format!("block{i}.diffusion.s{s}k{k}"))?);
            }
            terms.push(ws);
        }
        let residual = ConvKernel {
            weight: next(&format!("block{i}.residual.w"))?,
            bias: next(&format!("block{i}.residual.b"))?,
            dilation: 1,
        };
        let skip = ConvKernel {
            weight: next(&format!("block{i}.skip.w"))?,
            bias: next(&format!("block{i}.skip.b"))?,
            dilation: 1,
        };
        blocks.push(BlockParams {
            filter,
            gate,
            diffusion: DiffusionWeights { terms },
            residual,
            skip,
        });
    }
    let head_w1 = next("head.w1")?;
    let head_b1 = next("head.b1")?;
    let head_w2 = next("head.w2")?;
    let head_b2 = next("head.b2")?;
    let generator = if config.use_generator {
        let layers = config.gen_hidden.len() + 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            weights.push(next(&format!("generator.w{l}"))?);
            biases.push(next(&format!("generator.b{l}"))?);
        }
        Some(GeneratorParams {
            weights,
            biases,
            k: config.k_neighbors,
        })
    } else {
        None
    };
    if let Some((name, _)) = it.next() {
        return Err(Error::Data(format!(
            "checkpoint carries unexpected extra tensor {name}"
        )));
    }

    Ok(ModelParams {
        config,
        input_proj,
        blocks,
        head_w1,
        head_b1,
        head_w2,
        head_b2,
        generator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use approx::assert_relative_eq;
    use tempfile::TempDir;

    /// Small but fully featured configuration for tests: 5 nodes, two blocks.
    fn toy_config() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            kernel_size: 2,
            dilations: vec![1, 2],
            residual_channels: 6,
            skip_channels: 7,
            end_channels: 9,
            k_diff: 1,
            t_in: 4,
            t_out: 3,
            num_features: 2,
            k_neighbors: 2,
            embed_dim: 4,
            gen_hidden: vec![8],
            init_epochs: 0,
            ..ModelConfig::default()
        }
    }

    fn ring_adjacency(m: usize) -> Tensor<f64> {
        let mut a = Tensor::zeros(&[m, m]);
        for i in 0..m {
            a.set2(i, (i + 1) % m, 1.0);
            a.set2((i + 1) % m, i, 1.0);
        }
        a
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        glorot_uniform(shape, 4, 4, &mut rng)
    }

    fn toy_setup(
        config: &ModelConfig,
        m: usize,
        hist_len: usize,
        seed: u64,
    ) -> (ModelParams<f64>, GraphContext<f64>) {
        let params = model_init::<f64>(config, hist_len, seed).unwrap();
        let a = ring_adjacency(m);
        let hist = rand_tensor(&[m, hist_len], seed ^ 0xabcd);
        let ctx = GraphContext::build(config, Some(&a), Some(hist)).unwrap();
        (params, ctx)
    }

    #[test]
    fn forward_shape_contract() {
        let config = toy_config();
        let (params, ctx) = toy_setup(&config, 5, 30, 7);
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape);
        let x = tape.constant(rand_tensor(&[3, 4, 5, 2], 11));
        let out = forward(&mut tape, &vars, &config, &ctx, x).unwrap();
        assert_eq!(tape.value(out.prediction).shape(), &[3, 3, 5]);
        assert!(tape.value(out.prediction).all_finite());
        assert_eq!(tape.value(out.graph).shape(), &[5, 5]);
    }

    #[test]
    fn same_seed_init_is_identical() {
        let config = toy_config();
        let a = model_init::<f64>(&config, 30, 99).unwrap();
        let b = model_init::<f64>(&config, 30, 99).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na} differs between same-seed inits");
        }
        let c = model_init::<f64>(&config, 30, 100).unwrap();
        assert_ne!(a.head_w1, c.head_w1);
    }

    #[test]
    fn receptive_field_too_small_is_rejected() {
        let config = ModelConfig {
            blocks: 2,
            dilations: vec![1, 1],
            kernel_size: 2,
            t_in: 12,
            ..ModelConfig::default()
        };
        // receptive field 1 + (2−1)·2 = 3 < 12
        let err = model_init::<f64>(&config, 30, 0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("receptive field"));
    }

    #[test]
    fn valid_padding_needs_exact_receptive_field() {
        let mut config = toy_config();
        config.pad = Padding::Valid;
        // rf = 1 + 3 = 4 == t_in → accepted
        let (params, ctx) = toy_setup(&config, 5, 30, 3);
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape);
        let x = tape.constant(rand_tensor(&[2, 4, 5, 2], 5));
        let out = forward(&mut tape, &vars, &config, &ctx, x).unwrap();
        assert_eq!(tape.value(out.prediction).shape(), &[2, 3, 5]);

        config.t_in = 6; // rf 4 < 6 fails the coverage guard already
        assert!(config.validate().is_err());
        config.dilations = vec![1, 4]; // rf 6 == t_in fine
        assert!(config.validate().is_ok());
        config.dilations = vec![2, 4]; // rf 7 > t_in → rejected for valid pad
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("valid padding"));
    }

    #[test]
    fn forward_is_pure_and_deterministic() {
        let config = toy_config();
        let (params, ctx) = toy_setup(&config, 5, 30, 13);
        let before = params.clone();
        let x_t = rand_tensor(&[2, 4, 5, 2], 17);
        let run = || {
            let mut tape = Tape::new();
            let vars = params.on_tape(&mut tape);
            let x = tape.constant(x_t.clone());
            let out = forward(&mut tape, &vars, &config, &ctx, x).unwrap();
            tape.value(out.prediction).data().to_vec()
        };
        assert_eq!(run(), run());
        for ((_, ta), (_, tb)) in params.named_tensors().iter().zip(before.named_tensors()) {
            assert_eq!(*ta, tb);
        }
    }

    #[test]
    fn latent_only_config_needs_no_adjacency() {
        let mut config = toy_config();
        config.use_predefined_graph = false;
        config.use_predefined_init = false;
        let params = model_init::<f64>(&config, 30, 7).unwrap();
        assert_eq!(params.blocks[0].diffusion.terms.len(), 1);
        let hist = rand_tensor(&[5, 30], 23);
        let ctx = GraphContext::build(&config, None, Some(hist)).unwrap();
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape);
        let x = tape.constant(rand_tensor(&[2, 4, 5, 2], 29));
        let out = forward(&mut tape, &vars, &config, &ctx, x).unwrap();
        assert_eq!(tape.value(out.prediction).shape(), &[2, 3, 5]);
    }

    #[test]
    fn generator_off_uses_normalized_predefined_graph() {
        let mut config = toy_config();
        config.use_generator = false;
        let params = model_init::<f64>(&config, 0, 7).unwrap();
        assert!(params.generator.is_none());
        let a = ring_adjacency(5);
        let ctx = GraphContext::build(&config, Some(&a), None).unwrap();
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape);
        let x = tape.constant(rand_tensor(&[1, 4, 5, 2], 31));
        let out = forward(&mut tape, &vars, &config, &ctx, x).unwrap();
        let expected = normalize_graph_plain(&ring_adjacency(5), true).unwrap();
        assert_eq!(tape.value(out.graph), &expected);
    }

    #[test]
    fn context_build_rejects_missing_pieces() {
        let config = toy_config();
        let err = GraphContext::<f64>::build(&config, None, Some(rand_tensor(&[5, 30], 1)))
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = GraphContext::<f64>::build(&config, Some(&ring_adjacency(5)), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        // node-count mismatch between adjacency and histories
        let err = GraphContext::<f64>::build(
            &config,
            Some(&ring_adjacency(4)),
            Some(rand_tensor(&[5, 30], 2)),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let config = toy_config();
        let m = 4;
        let (params, ctx) = toy_setup(&config, m, 20, 41);
        let x_t = rand_tensor(&[2, 4, m, 2], 43);

        // gradient wrt the input batch
        let err = grad_check(
            |tape, v| {
                let vars = params.on_tape_frozen(tape);
                let out = forward(tape, &vars, &config, &ctx, v).unwrap();
                tape.mean(out.prediction).unwrap()
            },
            &x_t,
            1e-5,
        );
        assert!(err < 1e-4, "input grad error {err}");

        // gradient wrt a temporal kernel in the first block
        let w0 = params.blocks[0].filter.weight.clone();
        let err = grad_check(
            |tape, v| {
                let mut vars = params.on_tape_frozen(tape);
                vars.blocks[0].filter.weight = v;
                let x = tape.constant(x_t.clone());
                let out = forward(tape, &vars, &config, &ctx, x).unwrap();
                tape.mean(out.prediction).unwrap()
            },
            &w0,
            1e-5,
        );
        assert!(err < 1e-4, "filter grad error {err}");

        // gradient wrt the generator's first layer (through similarity,
        // top-k masking and normalization)
        let gw0 = params.generator.as_ref().unwrap().weights[0].clone();
        let err = grad_check(
            |tape, v| {
                let mut vars = params.on_tape_frozen(tape);
                vars.generator.as_mut().unwrap().weights[0] = v;
                let x = tape.constant(x_t.clone());
                let out = forward(tape, &vars, &config, &ctx, x).unwrap();
                tape.mean(out.prediction).unwrap()
            },
            &gw0,
            1e-5,
        );
        assert!(err < 1e-4, "generator grad error {err}");

        // gradient wrt the head
        let hw1 = params.head_w1.clone();
        let err = grad_check(
            |tape, v| {
                let mut vars = params.on_tape_frozen(tape);
                vars.head_w1 = v;
                let x = tape.constant(x_t.clone());
                let out = forward(tape, &vars, &config, &ctx, x).unwrap();
                tape.mean(out.prediction).unwrap()
            },
            &hw1,
            1e-5,
        );
        assert!(err < 1e-4, "head grad error {err}");
    }

    #[test]
    fn node_permutation_equivariance() {
        // relabeling nodes permutes the forecast accordingly; tolerance
        // instead of bit equality because FP summation order changes
        let config = toy_config();
        let m = 5;
        let perm = [2usize, 0, 4, 1, 3];
        let (params, _) = toy_setup(&config, m, 30, 47);
        let a = ring_adjacency(m);
        let hist = rand_tensor(&[m, 30], 53);
        let x_t = rand_tensor(&[2, 4, m, 2], 59);

        let mut a_p = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                a_p.set2(i, j, a.get2(perm[i], perm[j]));
            }
        }
        let mut hist_p = Tensor::zeros(&[m, 30]);
        for (i, &pi) in perm.iter().enumerate() {
            for t in 0..30 {
                hist_p.data_mut()[i * 30 + t] = hist.data()[pi * 30 + t];
            }
        }
        let mut x_p = Tensor::zeros(&[2, 4, m, 2]);
        for b in 0..2 {
            for t in 0..4 {
                for (i, &pi) in perm.iter().enumerate() {
                    for f in 0..2 {
                        let src = ((b * 4 + t) * m + pi) * 2 + f;
                        let dst = ((b * 4 + t) * m + i) * 2 + f;
                        x_p.data_mut()[dst] = x_t.data()[src];
                    }
                }
            }
        }

        let run = |a: &Tensor<f64>, hist: &Tensor<f64>, x_t: &Tensor<f64>| {
            let ctx = GraphContext::build(&config, Some(a), Some(hist.clone())).unwrap();
            let mut tape = Tape::new();
            let vars = params.on_tape_frozen(&mut tape);
            let x = tape.constant(x_t.clone());
            let out = forward(&mut tape, &vars, &config, &ctx, x).unwrap();
            tape.value(out.prediction).clone()
        };
        let base = run(&a, &hist, &x_t);
        let permuted = run(&a_p, &hist_p, &x_p);
        for b in 0..2 {
            for t in 0..3 {
                for (i, &pi) in perm.iter().enumerate() {
                    let want = base.data()[(b * 3 + t) * m + pi];
                    let got = permuted.data()[(b * 3 + t) * m + i];
                    assert_relative_eq!(got, want, max_relative = 1e-8, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_in_f32() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = toy_config();
        let params = model_init::<f32>(&config, 30, 61).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        for ((na, ta), (nb, tb)) in params
            .named_tensors()
            .iter()
            .zip(loaded.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na} changed across the roundtrip");
        }
    }

    #[test]
    fn checkpoint_rejects_garbage_and_truncation() {
        let dir = TempDir::new().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"definitely not a checkpoint").unwrap();
        let err = load_checkpoint::<f32>(&bad).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        let config = toy_config();
        let params = model_init::<f32>(&config, 30, 61).unwrap();
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&good, &params).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint::<f32>(&cut).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
