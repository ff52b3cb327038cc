//! Tape-level building blocks of the encoder. Every function works on a
//! batch: images are `[B, channels, height, width]`, features `[B, n]`.

use super::model::{BoundEncoder, BoundLayer, BoundLocal};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `x · Wᵀ + b` for `x: [B, in]`, `W: [out, in]`.
pub fn linear(tape: &mut Tape, x: Var, layer: BoundLayer) -> Result<Var> {
    let wt = tape.transpose(layer.weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add_bias(y, layer.bias)
}

fn conv_bias(
    tape: &mut Tape,
    x: Var,
    layer: BoundLayer,
    stride: usize,
    pad: (usize, usize),
) -> Result<Var> {
    tape.conv2d(x, layer.weight, Some(layer.bias), (stride, stride), pad)
}

/// Three 3×3 stride-2 convolutions with ReLU: `[B, Cin, 64, 32] → [B, C, 8, 4]`.
pub fn backbone_forward(tape: &mut Tape, enc: &BoundEncoder, images: Var) -> Result<Var> {
    let mut x = images;
    for layer in enc.backbone {
        let y = conv_bias(tape, x, layer, 2, (1, 1))?;
        x = tape.relu(y)?;
    }
    Ok(x)
}

fn require_rank(tape: &Tape, x: Var, rank: usize, op: &'static str) -> Result<()> {
    if tape.shape(x).len() != rank {
        return Err(Error::Dimension {
            op,
            lhs: tape.shape(x).to_vec(),
            rhs: vec![rank],
        });
    }
    Ok(())
}

/// Per-channel mean over all spatial positions: `[B, C, H, W] → [B, C]`.
pub fn global_pool(tape: &mut Tape, fmap: Var) -> Result<Var> {
    require_rank(tape, fmap, 4, "global_pool")?;
    tape.mean(fmap, &[2, 3])
}

/// Width-wise mean of each feature-map row followed by the 1×1 reduction
/// `C → c`. Returns the stacked sequence `[B, c, H, 1]`, rows ordered top
/// to bottom.
pub fn row_pool_reduce(tape: &mut Tape, fmap: Var, reduction: BoundLayer) -> Result<Var> {
    require_rank(tape, fmap, 4, "row_pool_reduce")?;
    let shape = tape.shape(fmap).to_vec();
    let rows = tape.mean(fmap, &[3])?;
    let rows = tape.reshape(rows, &[shape[0], shape[1], shape[2], 1])?;
    conv_bias(tape, rows, reduction, 1, (0, 0))
}

/// Splits a stacked `[B, c, H, 1]` sequence into `H` steps of `[B, c]`.
pub fn sequence_steps(tape: &mut Tape, stacked: Var) -> Result<Vec<Var>> {
    require_rank(tape, stacked, 4, "sequence_steps")?;
    let shape = tape.shape(stacked).to_vec();
    let (batch, channels, len) = (shape[0], shape[1], shape[2]);
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let s = tape.narrow(stacked, 2, t, 1)?;
        steps.push(tape.reshape(s, &[batch, channels])?);
    }
    Ok(steps)
}

/// One LSTM step with a pre-transposed weight `Wᵀ: [c + e, 4e]`.
fn lstm_cell(
    tape: &mut Tape,
    step: Var,
    h_prev: Var,
    d_prev: Var,
    weight_t: Var,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let e = tape.shape(h_prev)[1];
    if tape.shape(weight_t)[1] != 4 * e {
        return Err(Error::Dimension {
            op: "lstm_step",
            lhs: tape.shape(weight_t).to_vec(),
            rhs: tape.shape(h_prev).to_vec(),
        });
    }
    let joined = tape.concat(&[step, h_prev], 1)?;
    let mut pre = tape.matmul(joined, weight_t)?;
    if let Some(b) = bias {
        pre = tape.add_bias(pre, b)?;
    }
    let block = |tape: &mut Tape, k: usize| tape.narrow(pre, 1, k * e, e);
    let (i, f, o, g) = (
        block(tape, 0)?,
        block(tape, 1)?,
        block(tape, 2)?,
        block(tape, 3)?,
    );
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let o = tape.sigmoid(o)?;
    let g = tape.tanh(g)?;
    let keep = tape.hadamard(f, d_prev)?;
    let write = tape.hadamard(i, g)?;
    let d = tape.add(keep, write)?;
    let squashed = tape.tanh(d)?;
    let h = tape.hadamard(o, squashed)?;
    Ok((h, d))
}

/// Gates `(i, f, o) = σ(·)`, `g = tanh(·)` from `W·[s; h_prev] + b` split in
/// that block order; `d = f⊙d_prev + i⊙g`, `h = o⊙tanh(d)`.
///
/// `step: [B, c]`, `h_prev`/`d_prev: [B, e]`, `weight: [4e, c + e]`.
pub fn lstm_step(
    tape: &mut Tape,
    step: Var,
    h_prev: Var,
    d_prev: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let wt = tape.transpose(weight)?;
    lstm_cell(tape, step, h_prev, d_prev, wt, bias)
}

fn zero_state(tape: &mut Tape, batch: usize, hidden: usize) -> Var {
    tape.constant(Tensor::zeros(vec![batch, hidden]))
}

/// Runs the LSTM from a zero state over `steps` and returns the last
/// hidden state.
pub fn lstm_encode(tape: &mut Tape, steps: &[Var], weight: Var, bias: Option<Var>) -> Result<Var> {
    let first = *steps
        .first()
        .ok_or_else(|| Error::contract("lstm_encode needs a non-empty sequence"))?;
    let batch = tape.shape(first)[0];
    let w_shape = tape.shape(weight).to_vec();
    if w_shape.len() != 2 || !w_shape[0].is_multiple_of(4) {
        return Err(Error::Dimension {
            op: "lstm_encode",
            lhs: w_shape,
            rhs: tape.shape(first).to_vec(),
        });
    }
    let e = w_shape[0] / 4;
    let wt = tape.transpose(weight)?;
    let mut h = zero_state(tape, batch, e);
    let mut d = zero_state(tape, batch, e);
    for &s in steps {
        (h, d) = lstm_cell(tape, s, h, d, wt, bias)?;
    }
    Ok(h)
}

/// `h_t = tanh(W·[s_t; h_{t-1}] + b)` from a zero state; last hidden state.
pub fn rnn_encode(tape: &mut Tape, steps: &[Var], layer: BoundLayer) -> Result<Var> {
    let first = *steps
        .first()
        .ok_or_else(|| Error::contract("rnn_encode needs a non-empty sequence"))?;
    let batch = tape.shape(first)[0];
    let e = tape.shape(layer.weight)[0];
    let wt = tape.transpose(layer.weight)?;
    let mut h = zero_state(tape, batch, e);
    for &s in steps {
        let joined = tape.concat(&[s, h], 1)?;
        let pre = tape.matmul(joined, wt)?;
        let pre = tape.add_bias(pre, layer.bias)?;
        h = tape.tanh(pre)?;
    }
    Ok(h)
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub feature_map: Var,
    pub global_feature: Var,
    pub self_feature: Option<Var>,
    pub embedding: Var,
    pub logits: Var,
}

/// Full forward pass over a batch `[B, Cin, H, W]`.
pub fn encoder_forward(
    tape: &mut Tape,
    enc: &BoundEncoder,
    images: Var,
    normalize: bool,
) -> Result<ForwardVars> {
    require_rank(tape, images, 4, "forward")?;
    let feature_map = backbone_forward(tape, enc, images)?;
    let global_feature = global_pool(tape, feature_map)?;

    let self_feature = match (enc.local, enc.reduction) {
        (BoundLocal::None, _) => None,
        (_, None) => {
            return Err(Error::contract(
                "local branch bound without a reduction layer",
            ))
        }
        (local, Some(reduction)) => {
            let stacked = row_pool_reduce(tape, feature_map, reduction)?;
            Some(match local {
                BoundLocal::None => unreachable!(),
                BoundLocal::Lstm { weight, bias } => {
                    let steps = sequence_steps(tape, stacked)?;
                    lstm_encode(tape, &steps, weight, bias)?
                }
                BoundLocal::Rnn(layer) => {
                    let steps = sequence_steps(tape, stacked)?;
                    rnn_encode(tape, &steps, layer)?
                }
                BoundLocal::Conv(layer) => {
                    let y = conv_bias(tape, stacked, layer, 1, (1, 0))?;
                    let y = tape.relu(y)?;
                    tape.mean(y, &[2, 3])?
                }
                BoundLocal::Fc(layer) => {
                    let s = tape.shape(stacked).to_vec();
                    let flat = tape.reshape(stacked, &[s[0], s[1] * s[2]])?;
                    let y = linear(tape, flat, layer)?;
                    tape.relu(y)?
                }
            })
        }
    };

    let fused = match self_feature {
        Some(l) => tape.concat(&[global_feature, l], 1)?,
        None => global_feature,
    };
    let mut embedding = linear(tape, fused, enc.fusion)?;
    if normalize {
        embedding = tape.l2_normalize_rows(embedding)?;
    }
    let logits = linear(tape, embedding, enc.classifier)?;
    Ok(ForwardVars {
        feature_map,
        global_feature,
        self_feature,
        embedding,
        logits,
    })
}
