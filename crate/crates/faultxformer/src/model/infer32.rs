//! 32-bit inference path.
//!
//! A compiled, tape-free copy of the model used for latency benchmarking and
//! deployment-style inference. Training and the acceptance checks stay at
//! 64-bit; this path exists because per-sample latency is measured at the
//! precision an online deployment would use.

use super::{FaultXformer, LinearRef, ModelConfig};

pub struct Model32 {
    cfg: ModelConfig,
    tensors: Vec<Vec<f32>>,
    embed: Option<LinearRef>,
    layers: Vec<super::LayerRef>,
    head: Option<LinearRef>,
    pe: Vec<f32>,
}

fn matmul32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

impl Model32 {
    pub fn compile(model: &FaultXformer) -> Model32 {
        Model32 {
            cfg: model.cfg,
            tensors: model
                .param_tensors()
                .iter()
                .map(|t| t.data.iter().map(|&v| v as f32).collect())
                .collect(),
            embed: model.embed,
            layers: model.layers.clone(),
            head: model.head,
            pe: model.pe.iter().map(|&v| v as f32).collect(),
        }
    }

    fn linear(&self, x: &[f32], rows: usize, lin: LinearRef) -> Vec<f32> {
        let w = &self.tensors[lin.w];
        let b = &self.tensors[lin.b];
        let fan_in = x.len() / rows;
        let fan_out = b.len();
        let mut out = vec![0.0f32; rows * fan_out];
        matmul32(x, w, &mut out, rows, fan_in, fan_out);
        for orow in out.chunks_exact_mut(fan_out) {
            for (o, &bv) in orow.iter_mut().zip(b.iter()) {
                *o += bv;
            }
        }
        out
    }

    fn layer_norm(&self, x: &mut [f32], d: usize, gamma: usize, beta: usize) {
        let g = &self.tensors[gamma];
        let b = &self.tensors[beta];
        for row in x.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for ((v, &gv), &bv) in row.iter_mut().zip(g.iter()).zip(b.iter()) {
                *v = (*v - mean) * inv * gv + bv;
            }
        }
    }

    /// Eval-mode encoded sequence for a `[batch, L, F]` input (row-major, f32).
    pub fn forward_encoded(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let d = self.cfg.encoder.d_model;
        let l = self.cfg.encoder.max_len;
        let h = self.cfg.encoder.n_heads;
        let dk = d / h;
        let rows = batch * l;

        let mut cur = match self.embed {
            Some(e) => self.linear(x, rows, e),
            None => x.to_vec(),
        };
        if self.cfg.use_positional_encoding {
            for brow in cur.chunks_exact_mut(l * d) {
                for (v, &p) in brow.iter_mut().zip(self.pe.iter()) {
                    *v += p;
                }
            }
        }

        let scale = 1.0 / (dk as f32).sqrt();
        let mut q = vec![0.0f32; l * dk];
        let mut kt = vec![0.0f32; dk * l];
        let mut vbuf = vec![0.0f32; l * dk];
        let mut scores = vec![0.0f32; l * l];
        let mut ctx = vec![0.0f32; l * dk];

        for layer in &self.layers {
            let qkv = self.linear(&cur, rows, layer.qkv);
            let mut merged = vec![0.0f32; rows * d];
            for bi in 0..batch {
                for hi in 0..h {
                    // gather per-head q, k^T, v
                    for t in 0..l {
                        let base = (bi * l + t) * 3 * d + hi * dk;
                        for j in 0..dk {
                            q[t * dk + j] = qkv[base + j];
                            kt[j * l + t] = qkv[base + d + j];
                            vbuf[t * dk + j] = qkv[base + 2 * d + j];
                        }
                    }
                    matmul32(&q, &kt, &mut scores, l, dk, l);
                    for row in scores.chunks_exact_mut(l) {
                        let mut max = f32::NEG_INFINITY;
                        for &s in row.iter() {
                            max = max.max(s * scale);
                        }
                        let mut sum = 0.0;
                        for s in row.iter_mut() {
                            *s = (*s * scale - max).exp();
                            sum += *s;
                        }
                        let inv = 1.0 / sum;
                        row.iter_mut().for_each(|s| *s *= inv);
                    }
                    matmul32(&scores, &vbuf, &mut ctx, l, l, dk);
                    for t in 0..l {
                        let dst = (bi * l + t) * d + hi * dk;
                        merged[dst..dst + dk].copy_from_slice(&ctx[t * dk..(t + 1) * dk]);
                    }
                }
            }
            let attn_out = self.linear(&merged, rows, layer.out);
            for (c, a) in cur.iter_mut().zip(attn_out.iter()) {
                *c += a;
            }
            self.layer_norm(&mut cur, d, layer.ln1.0, layer.ln1.1);

            let mut ff = self.linear(&cur, rows, layer.ff1);
            ff.iter_mut().for_each(|v| *v = v.max(0.0));
            let ff_out = self.linear(&ff, rows, layer.ff2);
            for (c, f) in cur.iter_mut().zip(ff_out.iter()) {
                *c += f;
            }
            self.layer_norm(&mut cur, d, layer.ln2.0, layer.ln2.1);
        }
        cur
    }

    /// Eval-mode logits for a `[batch, L, F]` input (row-major, f32).
    pub fn forward_logits(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let d = self.cfg.encoder.d_model;
        let l = self.cfg.encoder.max_len;
        let cur = self.forward_encoded(x, batch);
        let head = self.head.expect("forward_logits requires a classification head");
        let mut pooled = vec![0.0f32; batch * d];
        for bi in 0..batch {
            let seq = &cur[bi * l * d..(bi + 1) * l * d];
            let prow = &mut pooled[bi * d..(bi + 1) * d];
            for trow in seq.chunks_exact(d) {
                for (p, &v) in prow.iter_mut().zip(trow.iter()) {
                    *p += v;
                }
            }
            prow.iter_mut().for_each(|v| *v /= l as f32);
        }
        self.linear(&pooled, batch, head)
    }
}
