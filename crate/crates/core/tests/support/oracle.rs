//! Scalar-loop transcription of the forward equations, written against
//! plain nested vectors with no shared code from the library. Vectors are
//! `Vec<f64>`, matrices are `Vec<Vec<f64>>` indexed `[row][col]`.
#![allow(dead_code, clippy::needless_range_loop)]

use tlsrec::model::{Model, Variant};
use tlsrec::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mv(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut s = 0.0;
            for j in 0..x.len() {
                s += row[j] * x[j];
            }
            s
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Session embedding from its item embeddings `e[j]`.
pub fn short_term(e: &[Vec<f64>], wq: &Mat, wk: &Mat, wv: &Mat) -> Vec<f64> {
    let d = e[0].len();
    let q: Vec<Vec<f64>> = e.iter().map(|x| mv(wq, x)).collect();
    let k: Vec<Vec<f64>> = e.iter().map(|x| mv(wk, x)).collect();
    let v: Vec<Vec<f64>> = e.iter().map(|x| mv(wv, x)).collect();
    let mut s = vec![0.0; d];
    for j in 0..e.len() {
        let scores: Vec<f64> = (0..e.len()).map(|l| dot(&q[j], &k[l]) / (d as f64).sqrt()).collect();
        let a = softmax(&scores);
        for l in 0..e.len() {
            for c in 0..d {
                s[c] += a[l] * v[l][c];
            }
        }
    }
    s
}

pub struct Head {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

pub struct Block {
    pub heads: Vec<Head>,
    pub wo: Mat,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub eps: f64,
}

/// Causal multi-head block over session vectors `x[i]`. Returns the block
/// output and the attention output before the residual.
pub fn block(x: &[Vec<f64>], b: &Block) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t = x.len();
    let d = x[0].len();
    let mut concat = vec![Vec::new(); t];
    for h in &b.heads {
        let width = h.q.len();
        for i in 0..t {
            let qi = mv(&h.q, &x[i]);
            // keys 0..=i only
            let scores: Vec<f64> = (0..=i)
                .map(|l| dot(&qi, &mv(&h.k, &x[l])) / (width as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            let mut out = vec![0.0; width];
            for l in 0..=i {
                let vl = mv(&h.v, &x[l]);
                for c in 0..width {
                    out[c] += a[l] * vl[c];
                }
            }
            concat[i].extend(out);
        }
    }
    let pre: Vec<Vec<f64>> = concat.iter().map(|c| mv(&b.wo, c)).collect();
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let r: Vec<f64> = (0..d).map(|c| pre[i][c] + x[i][c]).collect();
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let n: Vec<f64> = (0..d)
            .map(|c| b.alpha[c] * (r[c] - mean) / (var + b.eps).sqrt() + b.beta[c])
            .collect();
        let hidden: Vec<f64> = mv(&b.w1, &n).iter().zip(&b.b1).map(|(a, c)| (a + c).max(0.0)).collect();
        out.push(mv(&b.w2, &hidden).iter().zip(&b.b2).map(|(a, c)| a + c).collect());
    }
    (out, pre)
}

/// Returns `(z_long, weights)`.
pub fn pool(z: &[Vec<f64>], f_u: &[f64], wl: &Mat, bl: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = z
        .iter()
        .map(|zi| {
            let h: Vec<f64> = mv(wl, zi).iter().zip(bl).map(|(a, b)| (a + b).max(0.0)).collect();
            dot(f_u, &h)
        })
        .collect();
    let w = softmax(&scores);
    let d = z[0].len();
    let mut out = vec![0.0; d];
    for i in 0..z.len() {
        for c in 0..d {
            out[c] += w[i] * z[i][c];
        }
    }
    (out, w)
}

/// Returns `(g, z_u)`.
pub fn gate(long: &[f64], short: &[f64], y: &[f64], wl: &Mat, ws: &Mat, wd: &Mat, bg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = mv(wl, long);
    let b = mv(ws, short);
    let c = mv(wd, y);
    let g: Vec<f64> = (0..long.len()).map(|k| sigmoid(a[k] + b[k] + c[k] + bg[k])).collect();
    let z = (0..long.len())
        .map(|k| g[k] * short[k] + (1.0 - g[k]) * long[k])
        .collect();
    (g, z)
}

pub fn rating(z_u: &[f64], e_v: &[f64]) -> f64 {
    sigmoid(dot(z_u, e_v))
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    t.column(j)
}

/// End-to-end logits `z_u · e_v` for every item, for the full model and
/// every variant, read straight from the named parameters.
pub fn forward_logits(model: &Model, user: usize, sessions: &[Vec<usize>], delta: usize) -> Vec<f64> {
    let p = |name: &str| model.params().get(name).unwrap_or_else(|| panic!("missing {name}"));
    let c = model.config();
    let items = p("item_embedding");
    let variant = c.variant;
    let s: Vec<Vec<f64>> = sessions
        .iter()
        .map(|ids| {
            let e: Vec<Vec<f64>> = ids.iter().map(|&i| column(items, i)).collect();
            if variant == Variant::NoShortAttention {
                let mut m = vec![0.0; c.dim];
                for x in &e {
                    for k in 0..c.dim {
                        m[k] += x[k] / e.len() as f64;
                    }
                }
                m
            } else {
                short_term(&e, &mat(p("short.query")), &mat(p("short.key")), &mat(p("short.value")))
            }
        })
        .collect();
    let short = s.last().unwrap().clone();
    let z = if variant == Variant::NoLongAttention {
        s.clone()
    } else {
        let pos = p("position_embedding");
        let mut x: Vec<Vec<f64>> = s
            .iter()
            .enumerate()
            .map(|(i, si)| si.iter().zip(column(pos, i)).map(|(a, b)| a + b).collect())
            .collect();
        let heads = if variant == Variant::SingleHead { 1 } else { c.heads };
        for b in 0..c.blocks {
            let pre = format!("block{b}");
            let blk = Block {
                heads: (0..heads)
                    .map(|j| Head {
                        q: mat(p(&format!("{pre}.head{j}.query"))),
                        k: mat(p(&format!("{pre}.head{j}.key"))),
                        v: mat(p(&format!("{pre}.head{j}.value"))),
                    })
                    .collect(),
                wo: mat(p(&format!("{pre}.output"))),
                alpha: p(&format!("{pre}.norm.scale")).data().to_vec(),
                beta: p(&format!("{pre}.norm.shift")).data().to_vec(),
                w1: mat(p(&format!("{pre}.ffn.w1"))),
                b1: p(&format!("{pre}.ffn.b1")).data().to_vec(),
                w2: mat(p(&format!("{pre}.ffn.w2"))),
                b2: p(&format!("{pre}.ffn.b2")).data().to_vec(),
                eps: c.norm_epsilon,
            };
            x = block(&x, &blk).0;
        }
        x
    };
    let f_u = column(p("user_embedding"), user);
    let (long, _) = pool(&z, &f_u, &mat(p("long.weight")), p("long.bias").data());
    let z_u: Vec<f64> = match variant {
        Variant::GateAverage => (0..c.dim).map(|k| (long[k] + short[k]) / 2.0).collect(),
        Variant::GateSelfAttention | Variant::GateMultiHead => {
            let heads = if variant == Variant::GateSelfAttention {
                1
            } else {
                c.heads
            };
            let x = [long.clone(), short.clone()];
            let mut rows = vec![Vec::new(), Vec::new()];
            for j in 0..heads {
                let q = mat(p(&format!("fusion.head{j}.query")));
                let k = mat(p(&format!("fusion.head{j}.key")));
                let v = mat(p(&format!("fusion.head{j}.value")));
                let width = q.len();
                for i in 0..2 {
                    let qi = mv(&q, &x[i]);
                    let scores: Vec<f64> = (0..2)
                        .map(|l| dot(&qi, &mv(&k, &x[l])) / (width as f64).sqrt())
                        .collect();
                    let a = softmax(&scores);
                    let mut out = vec![0.0; width];
                    for l in 0..2 {
                        let vl = mv(&v, &x[l]);
                        for cc in 0..width {
                            out[cc] += a[l] * vl[cc];
                        }
                    }
                    rows[i].extend(out);
                }
            }
            if variant == Variant::GateMultiHead {
                let wo = mat(p("fusion.output"));
                rows = rows.iter().map(|r| mv(&wo, r)).collect();
            }
            (0..c.dim).map(|k| rows[0][k] + rows[1][k]).collect()
        }
        _ => {
            let y = column(p("gate.time_embedding"), delta - 1);
            gate(
                &long,
                &short,
                &y,
                &mat(p("gate.long")),
                &mat(p("gate.short")),
                &mat(p("gate.lag")),
                p("gate.bias").data(),
            )
            .1
        }
    };
    (0..model.item_count()).map(|v| dot(&z_u, &column(items, v))).collect()
}
