//! Causal self-attention, multi-head assembly and the post-norm transformer
//! block.
//!
//! All functions operate on a [`Tape`] so the same code path serves training,
//! evaluation and gradient checks. Sequences are `n×d` matrices; a batch of
//! sequences is a row-wise stack of them described by `segments`.

use std::ops::Range;

use rand::Rng;

use crate::bet::{apply_diag_policy, bird_eye_head, DiagPolicy};
use crate::tape::{Tape, Var};
use crate::tensor::{BoolMask, Result, Tensor, TensorError};

/// Layer-norm epsilon used by every block.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Query/key/value projections of one head, each `d_model × d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub proj: ProjectionWeights,
    /// High-level-token gate vector of length `2·d_head`; only read by the
    /// bird-eye path.
    pub gate: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Tensor,
    pub ffn: FeedForwardParams,
    pub norm_attn: NormParams,
    pub norm_ffn: NormParams,
}

impl BlockParams {
    pub fn init<R: Rng>(rng: &mut R, d_model: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(TensorError::Contract(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let dh = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                proj: ProjectionWeights {
                    w_q: xavier_uniform(rng, &[d_model, dh], d_model, dh),
                    w_k: xavier_uniform(rng, &[d_model, dh], d_model, dh),
                    w_v: xavier_uniform(rng, &[d_model, dh], d_model, dh),
                },
                gate: xavier_uniform(rng, &[2 * dh], 2 * dh, 1),
            })
            .collect();
        Ok(Self {
            heads,
            w_o: xavier_uniform(rng, &[d_model, d_model], d_model, d_model),
            ffn: FeedForwardParams {
                w_in: xavier_uniform(rng, &[d_model, d_ff], d_model, d_ff),
                b_in: Tensor::zeros(&[d_ff]),
                w_out: xavier_uniform(rng, &[d_ff, d_model], d_ff, d_model),
                b_out: Tensor::zeros(&[d_model]),
            },
            norm_attn: NormParams::identity(d_model),
            norm_ffn: NormParams::identity(d_model),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_o.rows()
    }

    pub fn d_head(&self) -> usize {
        self.heads.first().map_or(0, |h| h.proj.w_q.cols())
    }

    /// Parameters under stable relative names, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("heads.{h}.w_q"), &head.proj.w_q));
            out.push((format!("heads.{h}.w_k"), &head.proj.w_k));
            out.push((format!("heads.{h}.w_v"), &head.proj.w_v));
            out.push((format!("heads.{h}.gate"), &head.gate));
        }
        out.push(("w_o".into(), &self.w_o));
        out.push(("ffn.w_in".into(), &self.ffn.w_in));
        out.push(("ffn.b_in".into(), &self.ffn.b_in));
        out.push(("ffn.w_out".into(), &self.ffn.w_out));
        out.push(("ffn.b_out".into(), &self.ffn.b_out));
        out.push(("norm_attn.gain".into(), &self.norm_attn.gain));
        out.push(("norm_attn.bias".into(), &self.norm_attn.bias));
        out.push(("norm_ffn.gain".into(), &self.norm_ffn.gain));
        out.push(("norm_ffn.bias".into(), &self.norm_ffn.bias));
        out
    }

    /// Mutable access in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for head in &mut self.heads {
            out.push(&mut head.proj.w_q);
            out.push(&mut head.proj.w_k);
            out.push(&mut head.proj.w_v);
            out.push(&mut head.gate);
        }
        out.push(&mut self.w_o);
        out.push(&mut self.ffn.w_in);
        out.push(&mut self.ffn.b_in);
        out.push(&mut self.ffn.w_out);
        out.push(&mut self.ffn.b_out);
        out.push(&mut self.norm_attn.gain);
        out.push(&mut self.norm_attn.bias);
        out.push(&mut self.norm_ffn.gain);
        out.push(&mut self.norm_ffn.bias);
        out
    }

    /// Records every parameter as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> BlockVars {
        self.register_leaves(tape, true)
    }

    /// Records every parameter as a leaf, trainable or frozen.
    pub fn register_leaves(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let heads = self
            .heads
            .iter()
            .map(|h| HeadVars {
                w_q: leaf(&h.proj.w_q),
                w_k: leaf(&h.proj.w_k),
                w_v: leaf(&h.proj.w_v),
                gate: leaf(&h.gate),
            })
            .collect();
        BlockVars {
            heads,
            w_o: leaf(&self.w_o),
            ffn_w_in: leaf(&self.ffn.w_in),
            ffn_b_in: leaf(&self.ffn.b_in),
            ffn_w_out: leaf(&self.ffn.w_out),
            ffn_b_out: leaf(&self.ffn.b_out),
            norm_attn_gain: leaf(&self.norm_attn.gain),
            norm_attn_bias: leaf(&self.norm_attn.bias),
            norm_ffn_gain: leaf(&self.norm_ffn.gain),
            norm_ffn_bias: leaf(&self.norm_ffn.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gate: Var,
}

/// Tape handles of a registered [`BlockParams`].
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub w_o: Var,
    pub ffn_w_in: Var,
    pub ffn_b_in: Var,
    pub ffn_w_out: Var,
    pub ffn_b_out: Var,
    pub norm_attn_gain: Var,
    pub norm_attn_bias: Var,
    pub norm_ffn_gain: Var,
    pub norm_ffn_bias: Var,
}

impl BlockVars {
    /// Handles in the same order as [`BlockParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.extend([h.w_q, h.w_k, h.w_v, h.gate]);
        }
        out.extend([
            self.w_o,
            self.ffn_w_in,
            self.ffn_b_in,
            self.ffn_w_out,
            self.ffn_b_out,
            self.norm_attn_gain,
            self.norm_attn_bias,
            self.norm_ffn_gain,
            self.norm_ffn_bias,
        ]);
        out
    }

    /// Inverse of [`Self::vars`].
    pub fn from_vars(vars: &[Var], n_heads: usize) -> Result<Self> {
        let want = 4 * n_heads + 9;
        if vars.len() != want {
            return Err(TensorError::Contract(format!(
                "{} handles for a {n_heads}-head block, expected {want}",
                vars.len()
            )));
        }
        let heads = vars[..4 * n_heads]
            .chunks(4)
            .map(|c| HeadVars {
                w_q: c[0],
                w_k: c[1],
                w_v: c[2],
                gate: c[3],
            })
            .collect();
        let r = &vars[4 * n_heads..];
        Ok(Self {
            heads,
            w_o: r[0],
            ffn_w_in: r[1],
            ffn_b_in: r[2],
            ffn_w_out: r[3],
            ffn_b_out: r[4],
            norm_attn_gain: r[5],
            norm_attn_bias: r[6],
            norm_ffn_gain: r[7],
            norm_ffn_bias: r[8],
        })
    }

    fn head(&self, head: usize) -> Result<&HeadVars> {
        self.heads.get(head).ok_or(TensorError::OutOfRange {
            op: "head",
            index: head,
            len: self.heads.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionKind {
    #[default]
    Standard,
    /// Two-pass bird-eye attention with the learned high-level-token gate.
    BetSf,
}

/// How the bird-eye gate is produced.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Every gate value pinned to a constant.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub policy: DiagPolicy,
    pub gate: GateMode,
}

impl AttentionConfig {
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn bet_sf() -> Self {
        Self {
            kind: AttentionKind::BetSf,
            policy: DiagPolicy::MaskOut,
            gate: GateMode::Learned,
        }
    }
}

/// Second-pass intermediates of bird-eye attention.
#[derive(Clone, Debug)]
pub struct BirdEyeTrace {
    /// Gate `R`, one value per key token.
    pub gate: Var,
    /// Rescaled dot products `M'` (diagonal scaling already applied).
    pub rescaled: Var,
    /// Mask used by the second softmax.
    pub mask: BoolMask,
    /// `A'`.
    pub weights: Var,
    /// `H'`.
    pub output: Var,
}

/// Every intermediate of one head's attention over one sequence.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// `QKᵀ/√d_head`, computed at every position.
    pub dots: Var,
    pub causal_mask: BoolMask,
    /// Mask used to compute `weights` (the causal mask after any diagonal
    /// policy on the single-pass path).
    pub mask: BoolMask,
    /// `A`.
    pub weights: Var,
    /// `H = A·V`.
    pub output: Var,
    pub bird_eye: Option<BirdEyeTrace>,
}

impl AttentionTrace {
    /// The matrix that actually weights `V` in the head output.
    pub fn final_weights(&self) -> Var {
        self.bird_eye.as_ref().map_or(self.weights, |b| b.weights)
    }

    pub fn final_output(&self) -> Var {
        self.bird_eye.as_ref().map_or(self.output, |b| b.output)
    }
}

pub fn project_qkv(tape: &mut Tape, x: Var, head: &HeadVars) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(x, head.w_q)?;
    let k = tape.matmul(x, head.w_k)?;
    let v = tape.matmul(x, head.w_v)?;
    Ok((q, k, v))
}

/// `QKᵀ/√d_head` together with the causal mask.
pub fn causal_dot_product(tape: &mut Tape, q: Var, k: Var) -> Result<(Var, BoolMask)> {
    let (qv, kv) = (tape.value(q), tape.value(k));
    if qv.shape() != kv.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "causal_dot_product",
            left: qv.shape().to_vec(),
            right: kv.shape().to_vec(),
        });
    }
    let (n, dh) = qv.dims2("causal_dot_product")?;
    let raw = tape.matmul_nt(q, k)?;
    let dots = tape.scale(raw, 1.0 / (dh as f64).sqrt());
    Ok((dots, BoolMask::causal(n)))
}

/// Single-pass attention on already projected `q`, `k`, `v`, with an optional
/// diagonal policy applied to the logits before the softmax.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, policy: DiagPolicy) -> Result<AttentionTrace> {
    let (dots, causal_mask) = causal_dot_product(tape, q, k)?;
    let (logits, mask) = apply_diag_policy(tape, dots, &causal_mask, policy)?;
    let weights = tape.masked_softmax(logits, &mask)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        dots,
        causal_mask,
        mask,
        weights,
        output,
        bird_eye: None,
    })
}

/// Standard causal attention of one head: `A = softmax(D)`, `H = A·V`.
pub fn standard_attention(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    head: usize,
) -> Result<(Var, AttentionTrace)> {
    if tape.value(x).rows() == 0 {
        return Err(TensorError::Contract("attention over an empty sequence".into()));
    }
    let (q, k, v) = project_qkv(tape, x, block.head(head)?)?;
    let trace = attend(tape, q, k, v, DiagPolicy::Keep)?;
    Ok((trace.output, trace))
}

fn head_attention(
    tape: &mut Tape,
    (q, k, v): (Var, Var, Var),
    head: &HeadVars,
    config: &AttentionConfig,
) -> Result<AttentionTrace> {
    match config.kind {
        AttentionKind::Standard => attend(tape, q, k, v, config.policy),
        AttentionKind::BetSf => bird_eye_head(tape, (q, k, v), head.gate, config.policy, config.gate),
    }
}

/// Multi-head attention over a row-stack of sequences. Returns the projected
/// `N×d` output and, per segment, one trace per head.
pub fn multi_head_attention_segments(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    config: &AttentionConfig,
    segments: &[Range<usize>],
) -> Result<(Var, Vec<Vec<AttentionTrace>>)> {
    let (total, d) = tape.value(x).dims2("multi_head_attention")?;
    let n_heads = block.heads.len();
    let dh = tape.value(block.heads.first().ok_or_else(|| {
        TensorError::Contract("block has no attention heads".into())
    })?.w_q).cols();
    if n_heads * dh != d {
        return Err(TensorError::Contract(format!(
            "{n_heads} heads of width {dh} do not tile model dimension {d}"
        )));
    }
    let covered: usize = segments.iter().map(|s| s.len()).sum();
    if covered != total || segments.iter().any(|s| s.is_empty()) {
        return Err(TensorError::Contract(format!(
            "segments cover {covered} of {total} rows or include an empty sequence"
        )));
    }

    let single = segments.len() == 1;
    let mut traces: Vec<Vec<AttentionTrace>> = vec![Vec::with_capacity(n_heads); segments.len()];
    let mut head_outputs = Vec::with_capacity(n_heads);
    for head in &block.heads {
        let (q_all, k_all, v_all) = project_qkv(tape, x, head)?;
        let mut pieces = Vec::with_capacity(segments.len());
        for (s, seg) in segments.iter().enumerate() {
            let qkv = if single {
                (q_all, k_all, v_all)
            } else {
                (
                    tape.slice(q_all, seg.clone(), 0..dh)?,
                    tape.slice(k_all, seg.clone(), 0..dh)?,
                    tape.slice(v_all, seg.clone(), 0..dh)?,
                )
            };
            let trace = head_attention(tape, qkv, head, config)?;
            pieces.push(trace.final_output());
            traces[s].push(trace);
        }
        let out = if single { pieces[0] } else { tape.concat_rows(&pieces)? };
        head_outputs.push(out);
    }
    let concat = if n_heads == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)?
    };
    let out = tape.matmul(concat, block.w_o)?;
    Ok((out, traces))
}

/// Multi-head attention of a single sequence.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    config: &AttentionConfig,
) -> Result<(Var, Vec<AttentionTrace>)> {
    let n = tape.value(x).rows();
    let (out, mut traces) = multi_head_attention_segments(tape, x, block, config, &[0..n])?;
    Ok((out, traces.pop().unwrap_or_default()))
}

/// Elementwise mean of equally shaped matrices, e.g. per-head attention.
pub fn head_average(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| TensorError::Contract("average of no matrices".into()))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64))
}

/// Position-wise feed-forward layer: `gelu(x·W_in + b_in)·W_out + b_out`.
pub fn feed_forward(tape: &mut Tape, x: Var, block: &BlockVars) -> Result<Var> {
    let h = tape.matmul(x, block.ffn_w_in)?;
    let h = tape.add_row_bias(h, block.ffn_b_in)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, block.ffn_w_out)?;
    tape.add_row_bias(h, block.ffn_b_out)
}

/// Post-norm block: `X' = LN(X + Attn(X))`, `out = LN(X' + FFN(X'))`.
pub fn transformer_block_segments(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    config: &AttentionConfig,
    segments: &[Range<usize>],
) -> Result<(Var, Vec<Vec<AttentionTrace>>)> {
    let (attn, traces) = multi_head_attention_segments(tape, x, block, config, segments)?;
    let res = tape.add(x, attn)?;
    let mid = tape.layer_norm(res, block.norm_attn_gain, block.norm_attn_bias, LAYER_NORM_EPS)?;
    let ff = feed_forward(tape, mid, block)?;
    let res = tape.add(mid, ff)?;
    let out = tape.layer_norm(res, block.norm_ffn_gain, block.norm_ffn_bias, LAYER_NORM_EPS)?;
    Ok((out, traces))
}

pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    config: &AttentionConfig,
) -> Result<(Var, Vec<AttentionTrace>)> {
    let n = tape.value(x).rows();
    let (out, mut traces) = transformer_block_segments(tape, x, block, config, &[0..n])?;
    Ok((out, traces.pop().unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::masked_softmax_values;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        xavier_uniform(rng, shape, 1, 1)
    }

    fn block(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> BlockParams {
        BlockParams::init(rng, d, heads, 4 * d).unwrap()
    }

    #[test]
    fn identity_projection_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 2]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let head = HeadVars {
            w_q: t.constant(Tensor::identity(2)),
            w_k: t.constant(Tensor::identity(2)),
            w_v: t.constant(Tensor::identity(2)),
            gate: t.constant(Tensor::zeros(&[4])),
        };
        let (q, k, v) = project_qkv(&mut t, xv, &head).unwrap();
        for var in [q, k, v] {
            assert_eq!(t.value(var), &x);
        }
        let z = t.constant(Tensor::zeros(&[3, 2]));
        let (q, _, _) = project_qkv(&mut t, z, &head).unwrap();
        assert!(t.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_two_by_two_by_hand() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap());
        let w = t.constant(Tensor::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap());
        let head = HeadVars { w_q: w, w_k: w, w_v: w, gate: w };
        let (q, _, _) = project_qkv(&mut t, x, &head).unwrap();
        assert_eq!(t.value(q).data(), &[4.0, 7.0, -2.0, -2.5]);
    }

    #[test]
    fn dot_product_identity_case() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::identity(2));
        let (d, mask) = causal_dot_product(&mut t, q, q).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(t.value(d).data(), &[s, 0.0, 0.0, s]);
        assert_eq!(mask.bits(), &[true, false, true, true]);

        let one = t.constant(Tensor::from_rows(&[[0.3, 0.4]]).unwrap());
        let (d, mask) = causal_dot_product(&mut t, one, one).unwrap();
        assert_eq!(t.value(d).shape(), &[1, 1]);
        assert_eq!(mask.bits(), &[true]);
    }

    #[test]
    fn orthogonal_rows_give_zero_dot() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
        let k = t.constant(Tensor::from_rows(&[[0.0, 3.0], [1.0, 1.0]]).unwrap());
        let (d, _) = causal_dot_product(&mut t, q, k).unwrap();
        assert_eq!(t.value(d).at(0, 0), 0.0);
    }

    #[test]
    fn single_token_attends_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bp = block(&mut rng, 4, 1);
        let mut t = Tape::new();
        let bv = bp.register(&mut t);
        let x = t.constant(random(&mut rng, &[1, 4]));
        let (h, trace) = standard_attention(&mut t, x, &bv, 0).unwrap();
        assert_eq!(t.value(trace.weights).data(), &[1.0]);
        assert_eq!(t.value(h), t.value(trace.v));
        assert!(trace.bird_eye.is_none());
    }

    #[test]
    fn equal_logits_give_uniform_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.0, 0.0], [2.0, 1.0], [0.0, 1.0]]).unwrap());
        let zero = t.constant(Tensor::zeros(&[2, 2]));
        let id = t.constant(Tensor::identity(2));
        let head = HeadVars { w_q: zero, w_k: id, w_v: id, gate: zero };
        let (q, k, v) = project_qkv(&mut t, x, &head).unwrap();
        let trace = attend(&mut t, q, k, v, DiagPolicy::Keep).unwrap();
        let a = t.value(trace.weights);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((a.at(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn three_token_attention_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bp = block(&mut rng, 4, 2);
        let x = random(&mut rng, &[3, 4]);
        let mut t = Tape::new();
        let bv = bp.register(&mut t);
        let xv = t.constant(x.clone());
        let (h, _) = standard_attention(&mut t, xv, &bv, 1).unwrap();

        let p = &bp.heads[1].proj;
        let q = x.matmul(&p.w_q).unwrap();
        let k = x.matmul(&p.w_k).unwrap();
        let v = x.matmul(&p.w_v).unwrap();
        let dh = q.cols();
        let mut expected = Tensor::zeros(&[3, dh]);
        for i in 0..3 {
            let logits: Vec<f64> = (0..=i)
                .map(|j| (0..dh).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..dh {
                let s: f64 = (0..=i).map(|j| (logits[j] - max).exp() / z * v.at(j, c)).sum();
                expected.set(i, c, s);
            }
        }
        assert!(t.value(h).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn single_head_identity_output_equals_head_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bp = block(&mut rng, 4, 1);
        bp.w_o = Tensor::identity(4);
        let mut t = Tape::new();
        let bv = bp.register(&mut t);
        let x = t.constant(random(&mut rng, &[5, 4]));
        let (out, traces) = multi_head_attention(&mut t, x, &bv, &AttentionConfig::standard()).unwrap();
        let (h, _) = standard_attention(&mut t, x, &bv, 0).unwrap();
        assert_eq!(traces.len(), 1);
        assert!(t.value(out).max_abs_diff(t.value(h)) < 1e-15);
    }

    #[test]
    fn identical_heads_give_identical_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bp = block(&mut rng, 4, 2);
        bp.heads[1] = bp.heads[0].clone();
        let mut t = Tape::new();
        let bv = bp.register(&mut t);
        let x = t.constant(random(&mut rng, &[4, 4]));
        for cfg in [AttentionConfig::standard(), AttentionConfig::bet_sf()] {
            let (_, traces) = multi_head_attention(&mut t, x, &bv, &cfg).unwrap();
            let (a, b) = (&traces[0], &traces[1]);
            assert_eq!(t.value(a.final_weights()), t.value(b.final_weights()));
            assert_eq!(t.value(a.final_output()), t.value(b.final_output()));
        }
    }

    #[test]
    fn two_head_output_is_concat_then_project() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bp = block(&mut rng, 4, 2);
        let mut t = Tape::new();
        let bv = bp.register(&mut t);
        let x = t.constant(random(&mut rng, &[3, 4]));
        let (out, _) = multi_head_attention(&mut t, x, &bv, &AttentionConfig::standard()).unwrap();
        let (h0, _) = standard_attention(&mut t, x, &bv, 0).unwrap();
        let (h1, _) = standard_attention(&mut t, x, &bv, 1).unwrap();
        let (a, b) = (t.value(h0), t.value(h1));
        let rows: Vec<Vec<f64>> = (0..3).map(|i| [a.row(i), b.row(i)].concat()).collect();
        let manual = Tensor::from_rows(&rows).unwrap().matmul(&bp.w_o).unwrap();
        assert!(t.value(out).max_abs_diff(&manual) < 1e-14);
    }

    #[test]
    fn zero_sublayers_reduce_block_to_double_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bp = block(&mut rng, 4, 2);
        bp.w_o = Tensor::zeros(&[4, 4]);
        bp.ffn.w_in = Tensor::zeros(&[4, 16]);
        bp.ffn.w_out = Tensor::zeros(&[16, 4]);
        let x = random(&mut rng, &[3, 4]);
        let mut t = Tape::new();
        let bv = bp.register(&mut t);
        let xv = t.constant(x);
        let (out, _) = transformer_block(&mut t, xv, &bv, &AttentionConfig::standard()).unwrap();
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let once = t.layer_norm(xv, g, b, LAYER_NORM_EPS).unwrap();
        let twice = t.layer_norm(once, g, b, LAYER_NORM_EPS).unwrap();
        assert!(t.value(out).max_abs_diff(t.value(twice)) < 1e-15);
        // the residual path alone still carries the input
        assert!(t.value(out).data().iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn block_matches_step_by_step_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bp = block(&mut rng, 4, 2);
        for n in 1..6 {
            let mut t = Tape::new();
            let bv = bp.register(&mut t);
            let x = t.constant(random(&mut rng, &[n, 4]));
            let (out, _) = transformer_block(&mut t, x, &bv, &AttentionConfig::standard()).unwrap();
            assert_eq!(t.value(out).shape(), &[n, 4]);

            let (attn, _) = multi_head_attention(&mut t, x, &bv, &AttentionConfig::standard()).unwrap();
            let r = t.add(x, attn).unwrap();
            let mid = t.layer_norm(r, bv.norm_attn_gain, bv.norm_attn_bias, LAYER_NORM_EPS).unwrap();
            let ff = feed_forward(&mut t, mid, &bv).unwrap();
            let r = t.add(mid, ff).unwrap();
            let manual = t.layer_norm(r, bv.norm_ffn_gain, bv.norm_ffn_bias, LAYER_NORM_EPS).unwrap();
            assert_eq!(t.value(out), t.value(manual));
        }
    }

    #[test]
    fn segmented_batch_equals_per_sequence_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bp = block(&mut rng, 4, 2);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[5, 4]);
        for cfg in [AttentionConfig::standard(), AttentionConfig::bet_sf()] {
            let mut t = Tape::new();
            let bv = bp.register(&mut t);
            let (xa, xb) = (t.constant(a.clone()), t.constant(b.clone()));
            let stacked = t.concat_rows(&[xa, xb]).unwrap();
            let (out, traces) = transformer_block_segments(&mut t, stacked, &bv, &cfg, &[0..3, 3..8]).unwrap();
            let (oa, _) = transformer_block(&mut t, xa, &bv, &cfg).unwrap();
            let (ob, _) = transformer_block(&mut t, xb, &bv, &cfg).unwrap();
            assert_eq!(traces.len(), 2);
            let out = t.value(out).clone();
            let (oa, ob) = (t.value(oa), t.value(ob));
            for i in 0..3 {
                for (x, y) in out.row(i).iter().zip(oa.row(i)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            for i in 0..5 {
                for (x, y) in out.row(3 + i).iter().zip(ob.row(i)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn head_count_must_tile_model_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert!(BlockParams::init(&mut rng, 6, 4, 8).is_err());
        let bp = block(&mut rng, 4, 2);
        let mut t = Tape::new();
        let bv = bp.register(&mut t);
        let x = t.constant(random(&mut rng, &[2, 6]));
        assert!(multi_head_attention(&mut t, x, &bv, &AttentionConfig::standard()).is_err());
        let x = t.constant(random(&mut rng, &[2, 4]));
        assert!(standard_attention(&mut t, x, &bv, 2).is_err());
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&mut rng, &[6, 6]);
        let a = masked_softmax_values(&logits, &BoolMask::causal(6)).unwrap();
        for i in 0..6 {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(a.row(i)[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
}
