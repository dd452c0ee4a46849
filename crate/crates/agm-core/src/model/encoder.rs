//! Tape-recorded (differentiable) forward passes.
//!
//! The plain inference path in `infer.rs` mirrors the exact operation order
//! used here so the two paths agree numerically.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, NodeId, Tape};
use crate::model::ModelConfig;

const LN_EPS: f64 = 1e-5;
pub(crate) const MASK_BIAS: f64 = -1e30;

/// Parameter leaves injected into one tape.
pub struct TapedParams {
    ids: IndexMap<String, NodeId>,
}

impl TapedParams {
    pub(crate) fn new(ids: IndexMap<String, NodeId>) -> Self {
        Self { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not injected"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}

/// Dropout configuration for one forward pass. `off` disables it (eval-mode
/// statistics); `on` draws inverted-dropout masks from the given stream.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Dropout<'static> {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn on(rate: f64, rng: &'a mut ChaCha8Rng) -> Dropout<'a> {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        match (&mut self.rng, self.rate) {
            (Some(rng), rate) if rate > 0.0 => tape.dropout(x, rate, rng),
            _ => x,
        }
    }
}

/// Differentiable encoder outputs for one sequence.
pub struct TapedEncoding {
    /// L×d final hidden states.
    pub hidden: NodeId,
    /// 1×d CLS-position state.
    pub pooled: NodeId,
    /// L×d states entering the final encoder layer: the representation the
    /// attribution signal is computed on. The CLS-pooled loss reads only
    /// row 0 of the final states, so per-token gradients live one block
    /// earlier, where the last attention still routes every position into
    /// the prediction.
    pub attr: NodeId,
}

/// Gathered token embeddings (L×d), before position embeddings. This is the
/// integration point for attribution over input embeddings.
pub fn token_embeddings(tp: &TapedParams, tape: &mut Tape, tokens: &[u32]) -> NodeId {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    tape.gather_rows(tp.id("embed.tok"), &ids)
}

/// Full differentiable encoder pass over token ids.
pub fn encode_taped(
    cfg: &ModelConfig,
    tp: &TapedParams,
    tape: &mut Tape,
    tokens: &[u32],
    mask: &[bool],
    dropout: &mut Dropout,
) -> TapedEncoding {
    let emb = token_embeddings(tp, tape, tokens);
    encode_taped_from_embeddings(cfg, tp, tape, emb, mask, dropout)
}

/// Encoder pass starting from externally supplied token embeddings (L×d).
pub fn encode_taped_from_embeddings(
    cfg: &ModelConfig,
    tp: &TapedParams,
    tape: &mut Tape,
    tok_emb: NodeId,
    mask: &[bool],
    dropout: &mut Dropout,
) -> TapedEncoding {
    let len = tape.value(tok_emb).nrows();
    assert_eq!(len, mask.len(), "mask length");
    let pos = tape.slice_rows(tp.id("embed.pos"), 0, len);
    let summed = tape.add(tok_emb, pos);
    let g = tp.id("embed.ln.g");
    let b = tp.id("embed.ln.b");
    let mut x = layer_norm(tape, summed, g, b);
    x = dropout.apply(tape, x);

    let bias = tape.constant(attention_bias(len, mask));
    let mut attr = x;
    for layer in 0..cfg.num_layers {
        if layer == cfg.num_layers - 1 {
            attr = x;
        }
        x = encoder_layer(cfg, tp, tape, x, bias, layer, dropout);
    }
    let pooled = tape.slice_rows(x, 0, 1);
    TapedEncoding {
        hidden: x,
        pooled,
        attr,
    }
}

/// Additive attention bias: masked-out key columns get a huge negative
/// value so they receive exactly zero probability after softmax.
pub(crate) fn attention_bias(len: usize, mask: &[bool]) -> Mat {
    let mut bias = Mat::zeros((len, len));
    for (j, &keep) in mask.iter().enumerate() {
        if !keep {
            bias.column_mut(j).fill(MASK_BIAS);
        }
    }
    bias
}

fn encoder_layer(
    cfg: &ModelConfig,
    tp: &TapedParams,
    tape: &mut Tape,
    x: NodeId,
    attn_bias: NodeId,
    layer: usize,
    dropout: &mut Dropout,
) -> NodeId {
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let p = |s: &str| tp.id(&format!("enc.{layer}.{s}"));

    let q = linear(tape, x, p("attn.wq"), p("attn.bq"));
    let k = linear(tape, x, p("attn.wk"), p("attn.bk"));
    let v = linear(tape, x, p("attn.wv"), p("attn.bv"));

    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx: Option<NodeId> = None;
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt);
        let scaled = tape.scale(raw, scale);
        let masked = tape.add(scaled, attn_bias);
        let mut probs = tape.softmax_rows(masked);
        probs = dropout.apply(tape, probs);
        let ctx_h = tape.matmul(probs, vh);
        let placed = tape.put_cols(ctx_h, h * dh, d);
        ctx = Some(match ctx {
            None => placed,
            Some(acc) => tape.add(acc, placed),
        });
    }
    let ctx = ctx.expect("at least one head");

    let mut attn_out = linear(tape, ctx, p("attn.wo"), p("attn.bo"));
    attn_out = dropout.apply(tape, attn_out);
    let res1 = tape.add(x, attn_out);
    let x = layer_norm(tape, res1, p("ln1.g"), p("ln1.b"));

    let h1 = linear(tape, x, p("ffn.w1"), p("ffn.b1"));
    let h1 = tape.gelu(h1);
    let mut h2 = linear(tape, h1, p("ffn.w2"), p("ffn.b2"));
    h2 = dropout.apply(tape, h2);
    let res2 = tape.add(x, h2);
    layer_norm(tape, res2, p("ln2.g"), p("ln2.b"))
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = tape.matmul(x, w);
    tape.add(xw, b)
}

fn layer_norm(tape: &mut Tape, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
    let d = tape.value(x).ncols();
    let inv_d = 1.0 / d as f64;
    let mean = tape.sum_cols(x);
    let mean = tape.scale(mean, inv_d);
    let mean_b = tape.broadcast_cols(mean, d);
    let xc = tape.sub(x, mean_b);
    let sq = tape.mul(xc, xc);
    let ss = tape.sum_cols(sq);
    let var_eps = tape.affine(ss, inv_d, LN_EPS);
    let std = tape.sqrt(var_eps);
    let istd = tape.recip(std);
    let istd_b = tape.broadcast_cols(istd, d);
    let normed = tape.mul(xc, istd_b);
    let scaled = tape.mul(normed, g);
    tape.add(scaled, b)
}

/// Classification logits (1×num_labels) from the pooled CLS state.
pub fn classify_logits_taped(tp: &TapedParams, tape: &mut Tape, pooled: NodeId) -> NodeId {
    linear(tape, pooled, tp.id("cls.w"), tp.id("cls.b"))
}

/// Per-position vocabulary logits (L×V) from hidden states.
pub fn mlm_logits_taped(tp: &TapedParams, tape: &mut Tape, hidden: NodeId) -> NodeId {
    linear(tape, hidden, tp.id("mlm.w"), tp.id("mlm.b"))
}

/// Cross-entropy of a single logits row against an integer label.
pub fn ce_loss_taped(tape: &mut Tape, logits: NodeId, label: usize) -> NodeId {
    let n = tape.value(logits).ncols();
    assert!(label < n, "label {label} out of range for {n} classes");
    let ls = tape.log_softmax_rows(logits);
    let mut onehot = Mat::zeros((1, n));
    onehot[(0, label)] = 1.0;
    let oh = tape.constant(onehot);
    let picked = tape.mul(ls, oh);
    let s = tape.sum_all(picked);
    tape.neg(s)
}

/// Mean cross-entropy over selected positions of an L×V logits matrix.
pub fn mlm_loss_taped(
    tape: &mut Tape,
    logits: NodeId,
    positions: &[usize],
    targets: &[u32],
) -> NodeId {
    assert_eq!(positions.len(), targets.len());
    assert!(!positions.is_empty(), "mlm loss needs at least one position");
    let vocab = tape.value(logits).ncols();
    let rows = tape.gather_rows(logits, positions);
    let ls = tape.log_softmax_rows(rows);
    let mut onehot = Mat::zeros((positions.len(), vocab));
    for (i, &t) in targets.iter().enumerate() {
        onehot[(i, t as usize)] = 1.0;
    }
    let oh = tape.constant(onehot);
    let picked = tape.mul(ls, oh);
    let s = tape.sum_all(picked);
    tape.scale(s, -1.0 / positions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{full_mask, Model, ModelConfig, CLS_ID};

    #[test]
    fn taped_and_plain_forward_agree() {
        let model = Model::new(ModelConfig::tiny(), 9).unwrap();
        let tokens = [CLS_ID, 5, 9, 12];
        let mask = full_mask(4);
        let plain = model.encode(&tokens, &mask).unwrap();

        let mut tape = Tape::new();
        let tp = model.inject(&mut tape);
        let enc = encode_taped(
            &model.config,
            &tp,
            &mut tape,
            &tokens,
            &mask,
            &mut Dropout::off(),
        );
        let taped = tape.value(enc.hidden);
        let diff = (taped - &plain.hidden_states).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "taped vs plain forward diverge: {diff}");
    }

    #[test]
    fn taped_classifier_matches_plain() {
        let mut model = Model::new(ModelConfig::tiny(), 10).unwrap();
        // Give the zero-initialized classifier head some structure.
        model
            .params_mut()
            .get_mut("cls.w")
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.17).sin() * 0.3);
        let tokens = [CLS_ID, 6, 7];
        let mask = full_mask(3);
        let plain = model.classify(&tokens, &mask).unwrap();

        let mut tape = Tape::new();
        let tp = model.inject(&mut tape);
        let enc = encode_taped(
            &model.config,
            &tp,
            &mut tape,
            &tokens,
            &mask,
            &mut Dropout::off(),
        );
        let logits = classify_logits_taped(&tp, &mut tape, enc.pooled);
        let taped = tape.value(logits);
        for (a, b) in taped.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_loss_is_minus_log_softmax_at_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(Mat::from_shape_vec((1, 2), vec![2.0, -1.0]).unwrap());
        let loss = ce_loss_taped(&mut tape, logits, 0);
        let manual = (2.0f64.exp() + (-1.0f64).exp()).ln() - 2.0;
        assert!((tape.scalar(loss) - manual).abs() < 1e-12);
    }

    #[test]
    fn padded_positions_get_zero_attention() {
        let model = Model::new(ModelConfig::tiny(), 11).unwrap();
        // Content rows must be unchanged when PAD positions are appended.
        let base = model.encode(&[CLS_ID, 5, 9], &full_mask(3)).unwrap();
        let padded = model
            .encode(
                &[CLS_ID, 5, 9, 0, 0],
                &[true, true, true, false, false],
            )
            .unwrap();
        for i in 0..3 {
            let diff: f64 = (&base.hidden_states.row(i) - &padded.hidden_states.row(i))
                .mapv(f64::abs)
                .sum();
            assert!(diff < 1e-12, "row {i} changed by {diff} after padding");
        }
    }
}
