//! Forward pass, cross-entropy loss and hand-written reverse-mode gradients.

use super::model::Model;
use super::tensor::{add_at_b, gemm, gemm_view, matmul, matmul_bt, View};
use super::TrainError;

const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// A batch of equal-length token sequences. Each sequence supplies `len - 1`
/// next-token predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub seqs: usize,
    pub len: usize,
    pub tokens: Vec<u32>,
}

impl Batch {
    pub fn new(rows: &[Vec<u32>]) -> Result<Self, TrainError> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || len < 2 {
            return Err(TrainError::InvalidBatch("need at least one sequence of length >= 2".into()));
        }
        if rows.iter().any(|r| r.len() != len) {
            return Err(TrainError::InvalidBatch("ragged batch".into()));
        }
        Ok(Self {
            seqs: rows.len(),
            len,
            tokens: rows.concat(),
        })
    }

    /// Positions per sequence.
    pub fn positions(&self) -> usize {
        self.len - 1
    }

    fn input(&self, b: usize, t: usize) -> usize {
        self.tokens[b * self.len + t] as usize
    }

    fn target(&self, b: usize, t: usize) -> usize {
        self.tokens[b * self.len + t + 1] as usize
    }
}

/// Gradients, one buffer per parameter, same shapes.
pub type Grads = Vec<Vec<f64>>;

struct Dims {
    seqs: usize,
    t: usize,
    n: usize,
    d: usize,
    hidden: usize,
    heads: usize,
    hd: usize,
    vocab: usize,
}

struct BlockCache {
    x_in: Vec<f64>,
    r1: Vec<f64>,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    x_mid: Vec<f64>,
    r2: Vec<f64>,
    a2: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    sig: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    x_final: Vec<f64>,
    r_final: Vec<f64>,
    h_final: Vec<f64>,
    /// Softmax of the logits.
    probs: Vec<f64>,
}

struct Rope {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl Rope {
    fn new(t: usize, hd: usize) -> Self {
        let half = hd / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for pos in 0..t {
            for i in 0..half {
                let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self { cos, sin, half }
    }

    /// Rotate every head of `x` (`n × d`) by its position angle; `inverse` rotates back.
    fn apply(&self, x: &mut [f64], dims: &Dims, inverse: bool) {
        let sign = if inverse { -1.0 } else { 1.0 };
        for row in 0..dims.n {
            let pos = row % dims.t;
            let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
            let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
            let r = &mut x[row * dims.d..(row + 1) * dims.d];
            for h in 0..dims.heads {
                let base = h * dims.hd;
                for i in 0..self.half {
                    let (x1, x2) = (r[base + i], r[base + i + self.half]);
                    let (c, s) = (cs[i], sign * sn[i]);
                    r[base + i] = x1 * c - x2 * s;
                    r[base + i + self.half] = x1 * s + x2 * c;
                }
            }
        }
    }
}

fn rmsnorm(x: &[f64], gain: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut r = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        r[i] = inv;
        for j in 0..d {
            y[i * d + j] = xr[j] * inv * gain[j];
        }
    }
    (y, r)
}

/// Accumulates into `dx` and `dgain`.
fn rmsnorm_backward(x: &[f64], r: &[f64], gain: &[f64], dy: &[f64], d: usize, dx: &mut [f64], dgain: &mut [f64]) {
    for i in 0..r.len() {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let inv = r[i];
        let mut dot = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * inv;
            dot += gain[j] * dyr[j] * xr[j];
        }
        let coef = inv * inv * inv * dot / d as f64;
        for j in 0..d {
            dx[i * d + j] += inv * gain[j] * dyr[j] - xr[j] * coef;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn head_view(dims: &Dims, b: usize, h: usize) -> View {
    View::rows(b * dims.t * dims.d + h * dims.hd, dims.d)
}

fn attention(q: &[f64], k: &[f64], v: &[f64], dims: &Dims) -> (Vec<f64>, Vec<f64>) {
    let (t, hd) = (dims.t, dims.hd);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; dims.seqs * dims.heads * t * t];
    let mut out = vec![0.0; dims.n * dims.d];
    for b in 0..dims.seqs {
        for h in 0..dims.heads {
            let hv = head_view(dims, b, h);
            let pv = View::rows((b * dims.heads + h) * t * t, t);
            gemm_view(t, hd, t, scale, q, hv, k, hv.t(), 0.0, &mut probs, pv);
            let p = &mut probs[pv.offset..pv.offset + t * t];
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in &mut row[..=i] {
                    *x = (*x - max).exp();
                    z += *x;
                }
                for x in &mut row[..=i] {
                    *x /= z;
                }
                row[i + 1..].fill(0.0);
            }
            gemm_view(t, t, hd, 1.0, &probs, pv, v, hv, 0.0, &mut out, hv);
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for rotated `q`, `k`.
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: &Dims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, hd) = (dims.t, dims.hd);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; dims.n * dims.d];
    let mut dk = vec![0.0; dims.n * dims.d];
    let mut dv = vec![0.0; dims.n * dims.d];
    let mut ds = vec![0.0; t * t];
    let sv = View::rows(0, t);
    for b in 0..dims.seqs {
        for h in 0..dims.heads {
            let hv = head_view(dims, b, h);
            let pv = View::rows((b * dims.heads + h) * t * t, t);
            gemm_view(t, hd, t, 1.0, dout, hv, v, hv.t(), 0.0, &mut ds, sv);
            gemm_view(t, t, hd, 1.0, probs, pv.t(), dout, hv, 0.0, &mut dv, hv);
            let p = &probs[pv.offset..pv.offset + t * t];
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let row = &mut ds[i * t..(i + 1) * t];
                let rowdot: f64 = prow[..=i].iter().zip(&row[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    row[j] = prow[j] * (row[j] - rowdot) * scale;
                }
                row[i + 1..].fill(0.0);
            }
            gemm_view(t, t, hd, 1.0, &ds, sv, k, hv, 0.0, &mut dq, hv);
            gemm_view(t, t, hd, 1.0, &ds, sv.t(), q, hv, 0.0, &mut dk, hv);
        }
    }
    (dq, dk, dv)
}

fn check_batch(model: &Model, batch: &Batch) -> Result<(), TrainError> {
    if batch.positions() > model.cfg.context {
        return Err(TrainError::SequenceTooLong {
            len: batch.positions(),
            context: model.cfg.context,
        });
    }
    if let Some(&tok) = batch.tokens.iter().find(|&&t| t as usize >= model.cfg.vocab) {
        return Err(TrainError::TokenOutOfRange {
            token: tok,
            vocab: model.cfg.vocab,
        });
    }
    Ok(())
}

fn forward(model: &Model, batch: &Batch) -> Result<(f64, Cache, Dims), TrainError> {
    check_batch(model, batch)?;
    let cfg = &model.cfg;
    let t = batch.positions();
    let dims = Dims {
        seqs: batch.seqs,
        t,
        n: batch.seqs * t,
        d: cfg.d_model,
        hidden: cfg.hidden(),
        heads: cfg.n_heads,
        hd: cfg.head_dim(),
        vocab: cfg.vocab,
    };
    let (n, d, hid) = (dims.n, dims.d, dims.hidden);
    let p = &model.params;
    let rope = Rope::new(t, dims.hd);

    let embed = p[Model::EMBED].values();
    let mut x = vec![0.0; n * d];
    for b in 0..dims.seqs {
        for i in 0..t {
            let tok = batch.input(b, i);
            x[(b * t + i) * d..][..d].copy_from_slice(&embed[tok * d..(tok + 1) * d]);
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let ix = model.block(l);
        let (a1, r1) = rmsnorm(&x, p[ix.att_norm].values(), d);
        let mut q = matmul(n, d, d, &a1, p[ix.q].values());
        let mut k = matmul(n, d, d, &a1, p[ix.k].values());
        let v = matmul(n, d, d, &a1, p[ix.v].values());
        rope.apply(&mut q, &dims, false);
        rope.apply(&mut k, &dims, false);
        let (att, probs) = attention(&q, &k, &v, &dims);
        let mut x_mid = x.clone();
        gemm(n, d, d, &att, false, p[ix.o].values(), false, &mut x_mid, 1.0);

        let (a2, r2) = rmsnorm(&x_mid, p[ix.ffn_norm].values(), d);
        let gate = matmul(n, d, hid, &a2, p[ix.gate].values());
        let up = matmul(n, d, hid, &a2, p[ix.up].values());
        let sig: Vec<f64> = gate.iter().map(|&g| sigmoid(g)).collect();
        let act: Vec<f64> = gate
            .iter()
            .zip(&up)
            .zip(&sig)
            .map(|((&g, &u), &sg)| g * sg * u)
            .collect();
        let mut x_out = x_mid.clone();
        gemm(n, hid, d, &act, false, p[ix.down].values(), false, &mut x_out, 1.0);

        blocks.push(BlockCache {
            x_in: std::mem::replace(&mut x, x_out),
            r1,
            a1,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            r2,
            a2,
            gate,
            up,
            sig,
            act,
        });
    }

    let (h_final, r_final) = rmsnorm(&x, p[model.final_norm()].values(), d);
    let mut logits = match model.head() {
        Some(hi) => matmul(n, d, dims.vocab, &h_final, p[hi].values()),
        None => matmul_bt(n, d, dims.vocab, &h_final, embed),
    };
    let mut loss = 0.0;
    for b in 0..dims.seqs {
        for i in 0..t {
            let row = &mut logits[(b * t + i) * dims.vocab..][..dims.vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            loss -= row[batch.target(b, i)].ln();
        }
    }
    loss /= n as f64;
    Ok((
        loss,
        Cache {
            blocks,
            x_final: x,
            r_final,
            h_final,
            probs: logits,
        },
        dims,
    ))
}

/// Mean next-token cross-entropy (nats).
pub fn forward_loss(model: &Model, batch: &Batch) -> Result<f64, TrainError> {
    forward(model, batch).map(|(loss, _, _)| loss)
}

/// Loss and exact gradients of `loss_scale · loss`.
pub fn loss_and_grads(model: &Model, batch: &Batch, loss_scale: f64) -> Result<(f64, Grads), TrainError> {
    let (loss, cache, dims) = forward(model, batch)?;
    let (n, d, hid, t) = (dims.n, dims.d, dims.hidden, dims.t);
    let p = &model.params;
    let mut grads: Grads = p.iter().map(|w| vec![0.0; w.len()]).collect();
    let rope = Rope::new(t, dims.hd);

    let mut dlogits = cache.probs;
    let inv_n = loss_scale / n as f64;
    for b in 0..dims.seqs {
        for i in 0..t {
            let row = &mut dlogits[(b * t + i) * dims.vocab..][..dims.vocab];
            row[batch.target(b, i)] -= 1.0;
            for v in row.iter_mut() {
                *v *= inv_n;
            }
        }
    }

    let mut dh = vec![0.0; n * d];
    match model.head() {
        Some(hi) => {
            add_at_b(d, n, dims.vocab, &cache.h_final, &dlogits, &mut grads[hi]);
            gemm(n, dims.vocab, d, &dlogits, false, p[hi].values(), true, &mut dh, 0.0);
        }
        None => {
            add_at_b(dims.vocab, n, d, &dlogits, &cache.h_final, &mut grads[Model::EMBED]);
            gemm(n, dims.vocab, d, &dlogits, false, p[Model::EMBED].values(), false, &mut dh, 0.0);
        }
    }
    let fnorm = model.final_norm();
    let mut dx = vec![0.0; n * d];
    rmsnorm_backward(
        &cache.x_final,
        &cache.r_final,
        p[fnorm].values(),
        &dh,
        d,
        &mut dx,
        &mut grads[fnorm],
    );

    for l in (0..model.cfg.n_layers).rev() {
        let ix = model.block(l);
        let c = &cache.blocks[l];

        // feed-forward
        add_at_b(hid, n, d, &c.act, &dx, &mut grads[ix.down]);
        let dact = matmul_bt(n, d, hid, &dx, p[ix.down].values());
        let mut dgate = vec![0.0; n * hid];
        let mut dup = vec![0.0; n * hid];
        for j in 0..n * hid {
            let (g, u) = (c.gate[j], c.up[j]);
            let sg = c.sig[j];
            dup[j] = dact[j] * g * sg;
            dgate[j] = dact[j] * u * sg * (1.0 + g * (1.0 - sg));
        }
        add_at_b(d, n, hid, &c.a2, &dgate, &mut grads[ix.gate]);
        add_at_b(d, n, hid, &c.a2, &dup, &mut grads[ix.up]);
        let mut da2 = matmul_bt(n, hid, d, &dgate, p[ix.gate].values());
        gemm(n, hid, d, &dup, false, p[ix.up].values(), true, &mut da2, 1.0);
        let mut dx_mid = dx;
        rmsnorm_backward(&c.x_mid, &c.r2, p[ix.ffn_norm].values(), &da2, d, &mut dx_mid, &mut grads[ix.ffn_norm]);

        // attention
        add_at_b(d, n, d, &c.att, &dx_mid, &mut grads[ix.o]);
        let datt = matmul_bt(n, d, d, &dx_mid, p[ix.o].values());
        let (mut dq, mut dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &datt, &dims);
        rope.apply(&mut dq, &dims, true);
        rope.apply(&mut dk, &dims, true);
        add_at_b(d, n, d, &c.a1, &dq, &mut grads[ix.q]);
        add_at_b(d, n, d, &c.a1, &dk, &mut grads[ix.k]);
        add_at_b(d, n, d, &c.a1, &dv, &mut grads[ix.v]);
        let mut da1 = matmul_bt(n, d, d, &dq, p[ix.q].values());
        gemm(n, d, d, &dk, false, p[ix.k].values(), true, &mut da1, 1.0);
        gemm(n, d, d, &dv, false, p[ix.v].values(), true, &mut da1, 1.0);
        let mut dx_in = dx_mid;
        rmsnorm_backward(&c.x_in, &c.r1, p[ix.att_norm].values(), &da1, d, &mut dx_in, &mut grads[ix.att_norm]);
        dx = dx_in;
    }

    let dembed = &mut grads[Model::EMBED];
    for b in 0..dims.seqs {
        for i in 0..t {
            let tok = batch.input(b, i);
            let src = &dx[(b * t + i) * d..][..d];
            for (g, s) in dembed[tok * d..(tok + 1) * d].iter_mut().zip(src) {
                *g += s;
            }
        }
    }
    Ok((loss, grads))
}

/// Gradients of the mean loss.
pub fn backward(model: &Model, batch: &Batch) -> Result<Grads, TrainError> {
    loss_and_grads(model, batch, 1.0).map(|(_, g)| g)
}
