//! Plain (untaped) eval-mode forward pass, used for inference loops where
//! gradients are not needed. Operation order mirrors `encoder.rs` so both
//! paths produce the same numbers.

use ndarray::Array1;

use crate::autograd::Mat;
use crate::model::encoder::attention_bias;
use crate::model::{ModelConfig, Params};

const LN_EPS: f64 = 1e-5;

pub(crate) fn encode_plain(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &[u32],
    mask: &[bool],
) -> Mat {
    let tok_table = params.get("embed.tok");
    let mut emb = Mat::zeros((tokens.len(), cfg.hidden_dim));
    for (i, &t) in tokens.iter().enumerate() {
        emb.row_mut(i).assign(&tok_table.row(t as usize));
    }
    encode_plain_from_embeddings(cfg, params, &emb, mask)
}

pub(crate) fn encode_plain_from_embeddings(
    cfg: &ModelConfig,
    params: &Params,
    tok_emb: &Mat,
    mask: &[bool],
) -> Mat {
    let len = tok_emb.nrows();
    let pos_table = params.get("embed.pos");
    let mut x = tok_emb.clone();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row.iter_mut()
            .zip(pos_table.row(i))
            .for_each(|(o, &p)| *o += p);
    }
    x = layer_norm(&x, params.get("embed.ln.g"), params.get("embed.ln.b"));

    let bias = attention_bias(len, mask);
    for layer in 0..cfg.num_layers {
        x = encoder_layer(cfg, params, &x, &bias, layer);
    }
    x
}

fn encoder_layer(cfg: &ModelConfig, params: &Params, x: &Mat, bias: &Mat, layer: usize) -> Mat {
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let p = |s: &str| params.get(&format!("enc.{layer}.{s}"));

    let q = linear(x, p("attn.wq"), p("attn.bq"));
    let k = linear(x, p("attn.wk"), p("attn.bk"));
    let v = linear(x, p("attn.wv"), p("attn.bv"));

    let scale = 1.0 / (dh as f64).sqrt();
    let len = x.nrows();
    let mut ctx = Mat::zeros((len, d));
    for h in 0..cfg.num_heads {
        let cols = ndarray::s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|e| scale * e);
        scores += bias;
        let probs = softmax_rows(&scores);
        let ctx_h = probs.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
    }

    let attn_out = linear(&ctx, p("attn.wo"), p("attn.bo"));
    let res1 = x + &attn_out;
    let x = layer_norm(&res1, p("ln1.g"), p("ln1.b"));

    let mut h1 = linear(&x, p("ffn.w1"), p("ffn.b1"));
    h1.mapv_inplace(gelu);
    let h2 = linear(&h1, p("ffn.w2"), p("ffn.b2"));
    let res2 = &x + &h2;
    layer_norm(&res2, p("ln2.g"), p("ln2.b"))
}

fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut out = x.dot(w);
    for mut row in out.rows_mut() {
        row.iter_mut().zip(b.row(0)).for_each(|(o, &bv)| *o += bv);
    }
    out
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    let d = x.ncols();
    let inv_d = 1.0 / d as f64;
    let mut out = Mat::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() * inv_d;
        let mut ss = 0.0;
        for &e in row {
            let c = e + (-mean);
            ss += c * c;
        }
        let istd = (ss * inv_d + LN_EPS).sqrt().recip();
        for (j, &e) in row.iter().enumerate() {
            let c = e + (-mean);
            out[(i, j)] = (c * istd) * g[(0, j)] + b[(0, j)];
        }
    }
    out
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &e) in row.iter().enumerate() {
            let v = (e - m).exp();
            out[(i, j)] = v;
            sum += v;
        }
        let inv = sum.recip();
        for j in 0..x.ncols() {
            out[(i, j)] *= inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C1: f64 = 0.797_884_560_802_865_4;
    const C2: f64 = 0.044_715;
    let x2 = x * x;
    let x3 = x2 * x;
    let x3s = C2 * x3;
    let inner = x + x3s;
    let u = C1 * inner;
    let t = u.tanh();
    let one_plus = t + 1.0;
    (0.5 * x) * one_plus
}

pub(crate) fn classify_from_pooled(params: &Params, pooled: &Array1<f64>) -> Vec<f64> {
    let w = params.get("cls.w");
    let b = params.get("cls.b");
    let mut out = vec![0.0; w.ncols()];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &x) in pooled.iter().enumerate() {
            acc += x * w[(i, j)];
        }
        *o = acc + b[(0, j)];
    }
    out
}

pub(crate) fn mlm_from_hidden(params: &Params, hidden: &Mat) -> Mat {
    linear(hidden, params.get("mlm.w"), params.get("mlm.b"))
}
