//! Spatio-temporal building blocks: dilated causal temporal convolution with
//! tanh/sigmoid gating, and the bidirectional diffusion convolution that
//! mixes random-walk powers of the pre-defined graph with the latent graph.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::glorot_uniform;
use crate::tensor::{PadMode, Real, Tape, Tensor, Var};

/// Parameters of one dilated convolution.
#[derive(Clone, Debug)]
pub struct ConvKernel<T> {
    /// Taps, shape (C_out, C_in, K).
    pub weight: Tensor<T>,
    /// Shape (C_out).
    pub bias: Tensor<T>,
    pub dilation: usize,
}

/// Tape handles for a [`ConvKernel`].
#[derive(Copy, Clone)]
pub struct ConvKernelVars {
    pub weight: Var,
    pub bias: Var,
    pub dilation: usize,
}

impl<T: Real> ConvKernel<T> {
    pub fn init(
        c_out: usize,
        c_in: usize,
        k: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvKernel {
            weight: glorot_uniform(&[c_out, c_in, k], c_in * k, c_out * k, rng),
            bias: Tensor::zeros(&[c_out]),
            dilation,
        }
    }

    pub fn on_tape(&self, tape: &mut Tape<T>) -> ConvKernelVars {
        ConvKernelVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            dilation: self.dilation,
        }
    }

    pub fn on_tape_frozen(&self, tape: &mut Tape<T>) -> ConvKernelVars {
        ConvKernelVars {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
            dilation: self.dilation,
        }
    }
}

/// Dilated causal convolution `y_t = Σ_i f_i · x_{t−d·i}`.
///
/// Accepts `(C_in, L)` for a single sequence or `(N, C_in, L)` batched.
/// `PadMode::Causal` left-pads with `(K−1)·d` zeros so the output length
/// equals the input length; `PadMode::Valid` crops to the positions whose
/// full tap window exists, shortening the sequence by `(K−1)·d`.
pub fn dilated_causal_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: &ConvKernelVars,
    pad: PadMode,
) -> Result<Var> {
    let rank2 = tape.value(x).rank() == 2;
    let x3 = if rank2 {
        let s = tape.value(x).shape().to_vec();
        tape.reshape(x, &[1, s[0], s[1]])?
    } else {
        x
    };
    let y = tape.conv1d_causal(x3, kernel.weight, kernel.bias, kernel.dilation)?;
    let y = match pad {
        PadMode::Causal => y,
        PadMode::Valid => {
            let len = tape.value(y).shape()[2];
            let taps = tape.value(kernel.weight).shape()[2];
            let crop = (taps - 1) * kernel.dilation;
            if crop >= len {
                return Err(Error::Config(format!(
                    "valid convolution needs length > {crop}, got {len}"
                )));
            }
            tape.slice_axis(y, 2, crop, len - crop)?
        }
    };
    if rank2 {
        let s = tape.value(y).shape().to_vec();
        Ok(tape.reshape(y, &[s[1], s[2]])?)
    } else {
        Ok(y)
    }
}

/// Gated temporal convolution `h = tanh(Θ₁ ∗ x + b) ⊙ σ(Θ₂ ∗ x + c)`.
/// The biases b, c live inside the two kernels.
pub fn gated_tcn<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    filter: &ConvKernelVars,
    gate: &ConvKernelVars,
    pad: PadMode,
) -> Result<Var> {
    let f = dilated_causal_conv(tape, x, filter, pad)?;
    let g = dilated_causal_conv(tape, x, gate, pad)?;
    let ft = tape.tanh(f)?;
    let gs = tape.sigmoid(g)?;
    Ok(tape.mul(ft, gs)?)
}

/// Forward/backward random-walk transition matrices `P_f = A / rowsum(A)`
/// and `P_b = Aᵀ / rowsum(Aᵀ)`. Rows with zero sum stay zero.
pub fn transition_matrices<T: Real>(a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Data(format!(
            "transition matrices need a square adjacency, got {shape:?}"
        )));
    }
    let m = shape[0];
    let row_normalize = |mat: &Tensor<T>| {
        let mut out = mat.clone();
        for i in 0..m {
            let sum: T = (0..m).map(|j| mat.get2(i, j)).sum();
            if sum.to_f64() > 0.0 {
                for j in 0..m {
                    let v = out.get2(i, j);
                    out.set2(i, j, v / sum);
                }
            } else {
                for j in 0..m {
                    out.set2(i, j, T::zero());
                }
            }
        }
        out
    };
    for &v in a.data() {
        if v.to_f64() < 0.0 {
            return Err(Error::Data(format!(
                "transition matrices need nonnegative entries, found {}",
                v.to_f64()
            )));
        }
    }
    let p_f = row_normalize(a);
    let p_b = row_normalize(&a.transpose2());
    Ok((p_f, p_b))
}

/// Per-support, per-power mixing weights of the diffusion convolution:
/// `terms[s][k]` has shape (C_in, C_out).
#[derive(Clone, Debug)]
pub struct DiffusionWeights<T> {
    pub terms: Vec<Vec<Tensor<T>>>,
}

pub struct DiffusionVars {
    pub terms: Vec<Vec<Var>>,
}

impl<T: Real> DiffusionWeights<T> {
    pub fn init(
        num_supports: usize,
        k_diff: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let terms = (0..num_supports)
            .map(|_| {
                (0..=k_diff)
                    .map(|_| glorot_uniform(&[c_in, c_out], c_in, c_out, rng))
                    .collect()
            })
            .collect();
        DiffusionWeights { terms }
    }

    pub fn on_tape(&self, tape: &mut Tape<T>) -> DiffusionVars {
        DiffusionVars {
            terms: self
                .terms
                .iter()
                .map(|ws| ws.iter().map(|w| tape.leaf(w.clone())).collect())
                .collect(),
        }
    }

    pub fn on_tape_frozen(&self, tape: &mut Tape<T>) -> DiffusionVars {
        DiffusionVars {
            terms: self
                .terms
                .iter()
                .map(|ws| ws.iter().map(|w| tape.constant(w.clone())).collect())
                .collect(),
        }
    }
}

/// Diffusion convolution `Z = Σ_s Σ_{k=0}^{K} Pₛᵏ X W_{s,k}` over the given
/// supports (forward/backward transitions and/or the latent graph).
///
/// `x` has shape (B, M, C_in); every support is (M, M). Powers are built
/// iteratively — `stateₖ₊₁ = P·stateₖ` — never by materializing `Pᵏ`. The
/// k = 0 term of each support is the identity, so `K_diff = 0` with all
/// weights identity returns `num_supports · X`.
pub fn diffusion_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    supports: &[Var],
    weights: &DiffusionVars,
    k_diff: usize,
) -> Result<Var> {
    if supports.is_empty() || supports.len() != weights.terms.len() {
        return Err(Error::Config(format!(
            "diffusion needs matching supports and weight groups, got {} and {}",
            supports.len(),
            weights.terms.len()
        )));
    }
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 3 {
        return Err(Error::Numeric(format!(
            "diffusion input must be (B, M, C), got {xs:?}"
        )));
    }
    let (b, m, c_in) = (xs[0], xs[1], xs[2]);

    let mut out: Option<Var> = None;
    for (support, ws) in supports.iter().zip(&weights.terms) {
        if ws.len() != k_diff + 1 {
            return Err(Error::Config(format!(
                "support carries {} weight matrices, expected K_diff+1 = {}",
                ws.len(),
                k_diff + 1
            )));
        }
        let mut state = x;
        for (k, &w) in ws.iter().enumerate() {
            if k > 0 {
                state = tape.graph_matmul(*support, state)?;
            }
            let c_out = tape.value(w).shape()[1];
            let flat = tape.reshape(state, &[b * m, c_in])?;
            let term = tape.matmul(flat, w)?;
            let term = tape.reshape(term, &[b, m, c_out])?;
            out = Some(match out {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    Ok(out.expect("at least one support checked above"))
}
