//! Independent f64 forward pass of the full model, used as the
//! finite-difference oracle. It shares nothing with the library beyond
//! parameter names and shapes, so a wrong backward rule cannot hide behind
//! a matching forward.

use std::collections::BTreeMap;

use taxoseq::label_codec::PAD;
use taxoseq::numerics::ParamStore;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add(&self, other: &Mat) -> Mat {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { data, ..*self }
    }
}

/// Parameter values in f64, keyed by name. Vectors are stored as `1 x n`.
#[derive(Clone, Debug)]
pub struct Params(pub BTreeMap<String, Mat>);

impl Params {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut map = BTreeMap::new();
        for (_, p) in store.iter() {
            let shape = p.value.shape();
            let (rows, cols) = if shape.len() == 2 {
                (shape[0], shape[1])
            } else {
                (1, shape[0])
            };
            let data = p.value.data().iter().map(|&v| v as f64).collect();
            map.insert(p.name.clone(), Mat { rows, cols, data });
        }
        Self(map)
    }

    fn get(&self, name: &str) -> &Mat {
        self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn embed(table: &Mat, ids: &[u32]) -> Mat {
    let mut out = Mat::zeros(ids.len(), table.cols);
    for (r, &id) in ids.iter().enumerate() {
        out.data[r * table.cols..(r + 1) * table.cols].copy_from_slice(table.row(id as usize));
    }
    out
}

fn linear(p: &Params, prefix: &str, x: &Mat) -> Mat {
    let w = p.get(&format!("{prefix}.weight"));
    let b = p.get(&format!("{prefix}.bias"));
    let mut out = Mat::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        for c in 0..w.cols {
            let mut acc = b.data[c];
            for k in 0..x.cols {
                acc += x.at(r, k) * w.at(k, c);
            }
            out.data[r * w.cols + c] = acc;
        }
    }
    out
}

fn layer_norm(p: &Params, prefix: &str, x: &Mat) -> Mat {
    let g = p.get(&format!("{prefix}.gain"));
    let b = p.get(&format!("{prefix}.bias"));
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for (c, v) in row.iter().enumerate() {
            out.data[r * x.cols + c] = (v - mean) * rstd * g.data[c] + b.data[c];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn feed_forward(p: &Params, prefix: &str, x: &Mat) -> Mat {
    let mut h = linear(p, &format!("{prefix}.up"), x);
    h.data.iter_mut().for_each(|v| *v = gelu(*v));
    linear(p, &format!("{prefix}.down"), &h)
}

/// Attention where query row `i` may see key `j` iff `visible(i, j)`.
fn attention(
    p: &Params,
    prefix: &str,
    heads: usize,
    xq: &Mat,
    xkv: &Mat,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let q = linear(p, &format!("{prefix}.query"), xq);
    let k = linear(p, &format!("{prefix}.key"), xkv);
    let v = linear(p, &format!("{prefix}.value"), xkv);
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = Mat::zeros(q.rows, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.rows {
            let scores: Vec<Option<f64>> = (0..k.rows)
                .map(|j| visible(i, j).then(|| cols.clone().map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale))
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = weights.iter().sum();
            for c in cols.clone() {
                merged.data[i * d + c] = (0..k.rows).map(|j| weights[j] / z * v.at(j, c)).sum();
            }
        }
    }
    linear(p, &format!("{prefix}.output"), &merged)
}

pub fn encode(p: &Params, s: &Shape, ids: &[u32], mask: &[u8]) -> Mat {
    let positions: Vec<u32> = (0..ids.len() as u32).collect();
    let x = embed(p.get("encoder.word_embed"), ids).add(&embed(p.get("encoder.pos_embed"), &positions));
    let mut x = layer_norm(p, "encoder.norm_embed", &x);
    for l in 0..s.encoder_layers {
        let pre = format!("encoder.layer{l}");
        let a = attention(p, &format!("{pre}.attention"), s.encoder_heads, &x, &x, &|_, j| {
            mask[j] != 0
        });
        let h = layer_norm(p, &format!("{pre}.norm_attention"), &x.add(&a));
        let f = feed_forward(p, &format!("{pre}.ff"), &h);
        x = layer_norm(p, &format!("{pre}.norm_ff"), &h.add(&f));
    }
    x
}

pub fn decoder_logits(p: &Params, s: &Shape, tokens: &[u32], enc: &Mat, enc_mask: &[u8]) -> Mat {
    let positions: Vec<u32> = (0..tokens.len() as u32).collect();
    let mut x = embed(p.get("decoder.word_embed"), tokens).add(&embed(p.get("decoder.pos_embed"), &positions));
    for l in 0..s.decoder_layers {
        let pre = format!("decoder.layer{l}");
        let a = attention(p, &format!("{pre}.self_attention"), s.decoder_heads, &x, &x, &|i, j| {
            j <= i
        });
        let n = layer_norm(p, &format!("{pre}.norm_query"), &a.add(&x));
        let c = attention(
            p,
            &format!("{pre}.cross_attention"),
            s.decoder_heads,
            &n,
            enc,
            &|_, j| enc_mask[j] != 0,
        );
        let h = layer_norm(p, &format!("{pre}.norm_cross"), &n.add(&c));
        let f = feed_forward(p, &format!("{pre}.ff"), &h);
        x = layer_norm(p, &format!("{pre}.norm_ff"), &h.add(&f));
    }
    linear(p, "decoder.output", &x)
}

/// Sum of label-smoothed NLL over non-padding targets, and their count.
pub fn smoothed_nll_sum(logits: &Mat, targets: &[u32], smoothing: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        sum += (1.0 - smoothing) * (lse - row[t as usize]) + smoothing * (lse - mean);
        count += 1;
    }
    (sum, count)
}

/// One teacher-forced sample: word ids and mask, decoder inputs, targets.
pub struct RefSample<'a> {
    pub ids: &'a [u32],
    pub mask: &'a [u8],
    pub inputs: &'a [u32],
    pub targets: &'a [u32],
}

/// Batch focal loss of one window: the token-mean cross-entropy, modulated
/// once.
pub fn window_focal_loss(p: &Params, s: &Shape, samples: &[RefSample<'_>], smoothing: f64, gamma: f64) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for x in samples {
        let enc = encode(p, s, x.ids, x.mask);
        let logits = decoder_logits(p, s, x.inputs, &enc, x.mask);
        let (a, b) = smoothed_nll_sum(&logits, x.targets, smoothing);
        sum += a;
        count += b;
    }
    let ce = sum / count as f64;
    (1.0 - (-ce).exp()).powf(gamma) * ce
}
