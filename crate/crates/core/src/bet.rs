//! Bird-eye attention.
//!
//! A first causal pass produces `H = A·V`. A per-head gate scores every key
//! token from `[H, K]`, the gate rescales the key columns of the dot-product
//! matrix, an optional diagonal policy edits the rescaled logits, and a second
//! softmax yields the weights that produce the head output `H' = A'·V`.

use serde::{Deserialize, Serialize};

use crate::attention::{causal_dot_product, project_qkv, AttentionTrace, BirdEyeTrace, BlockVars, GateMode};
use crate::tape::{Tape, Var};
use crate::tensor::{BoolMask, Result, Tensor, TensorError};

/// Edit applied to the diagonal of the dot-product matrix before softmax.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagPolicy {
    #[default]
    Keep,
    /// Multiply every diagonal logit by the factor.
    Scale(f64),
    /// Hide the diagonal from every row except the first.
    MaskOut,
}

impl DiagPolicy {
    pub const REDUCED: DiagPolicy = DiagPolicy::Scale(0.1);
    pub const MAGNIFIED: DiagPolicy = DiagPolicy::Scale(2.0);

    pub fn validate(&self) -> Result<()> {
        match *self {
            DiagPolicy::Scale(f) if !(f.is_finite() && f > 0.0) => Err(TensorError::Contract(format!(
                "diagonal scale factor must be positive and finite, got {f}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Applies `policy` to square logits `dots` under `mask`.
///
/// Row 0 keeps its diagonal under [`DiagPolicy::MaskOut`] because it has no
/// other visible entry.
pub fn apply_diag_policy(
    tape: &mut Tape,
    dots: Var,
    mask: &BoolMask,
    policy: DiagPolicy,
) -> Result<(Var, BoolMask)> {
    policy.validate()?;
    let (n, m) = tape.value(dots).dims2("apply_diag_policy")?;
    if n != m || mask.shape() != [n, m] {
        return Err(TensorError::ShapeMismatch {
            op: "apply_diag_policy",
            left: tape.value(dots).shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    match policy {
        DiagPolicy::Keep => Ok((dots, mask.clone())),
        DiagPolicy::Scale(f) => Ok((tape.scale_diag(dots, f)?, mask.clone())),
        DiagPolicy::MaskOut => {
            let mut out = mask.clone();
            for i in 1..n {
                out.set(i, i, false);
            }
            Ok((dots, out))
        }
    }
}

/// `R[j] = sigmoid(w · [H[j], K[j]])`, one gate value per token, shape `[n]`.
pub fn high_level_gate(tape: &mut Tape, h: Var, k: Var, w: Var) -> Result<Var> {
    let (hv, kv) = (tape.value(h), tape.value(k));
    if hv.shape() != kv.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "high_level_gate",
            left: hv.shape().to_vec(),
            right: kv.shape().to_vec(),
        });
    }
    let (n, dh) = hv.dims2("high_level_gate")?;
    let wv = tape.value(w);
    if wv.numel() != 2 * dh {
        return Err(TensorError::ShapeMismatch {
            op: "high_level_gate",
            left: vec![2 * dh],
            right: wv.shape().to_vec(),
        });
    }
    let hk = tape.concat_cols(&[h, k])?;
    let w_col = tape.reshape(w, &[2 * dh, 1])?;
    let scores = tape.matmul(hk, w_col)?;
    let scores = tape.reshape(scores, &[n])?;
    Ok(tape.sigmoid(scores))
}

/// `M'[i][j] = D[i][j]·R[j]` on visible entries; masked entries are left as is.
pub fn bird_eye_rescale(tape: &mut Tape, dots: Var, mask: &BoolMask, gate: Var) -> Result<Var> {
    tape.mul_cols(dots, gate, Some(mask))
}

/// Two-pass bird-eye attention on already projected `q`, `k`, `v`.
pub fn bird_eye_head(
    tape: &mut Tape,
    (q, k, v): (Var, Var, Var),
    gate_w: Var,
    policy: DiagPolicy,
    gate_mode: GateMode,
) -> Result<AttentionTrace> {
    let (dots, causal_mask) = causal_dot_product(tape, q, k)?;
    let weights = tape.masked_softmax(dots, &causal_mask)?;
    let output = tape.matmul(weights, v)?;
    let gate = match gate_mode {
        GateMode::Learned => high_level_gate(tape, output, k, gate_w)?,
        GateMode::Fixed(value) => {
            let n = tape.value(dots).rows();
            tape.constant(Tensor::filled(&[n], value))
        }
    };
    let rescaled = bird_eye_rescale(tape, dots, &causal_mask, gate)?;
    let (rescaled, mask) = apply_diag_policy(tape, rescaled, &causal_mask, policy)?;
    let final_weights = tape.masked_softmax(rescaled, &mask)?;
    let final_output = tape.matmul(final_weights, v)?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        dots,
        mask: causal_mask.clone(),
        causal_mask,
        weights,
        output,
        bird_eye: Some(BirdEyeTrace {
            gate,
            rescaled,
            mask,
            weights: final_weights,
            output: final_output,
        }),
    })
}

/// Bird-eye attention of one head of `block` over sequence `x`; returns `H'`.
pub fn bet_attention(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    head: usize,
    policy: DiagPolicy,
    gate_mode: GateMode,
) -> Result<(Var, AttentionTrace)> {
    if tape.value(x).rows() == 0 {
        return Err(TensorError::Contract("attention over an empty sequence".into()));
    }
    let hv = block.heads.get(head).ok_or(TensorError::OutOfRange {
        op: "head",
        index: head,
        len: block.heads.len(),
    })?;
    let qkv = project_qkv(tape, x, hv)?;
    let trace = bird_eye_head(tape, qkv, hv.gate, policy, gate_mode)?;
    Ok((trace.final_output(), trace))
}
