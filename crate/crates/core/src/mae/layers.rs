//! Row-major `T×d` building blocks with hand-written backward passes.
//!
//! Every layer reads its weights from a flat parameter slice through a span
//! and accumulates gradients into a slice of the same layout.

use crate::numerics::{dot, gemm, gemm_nt, gemm_tn_acc};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Span {
    pub off: usize,
    pub len: usize,
}

impl Span {
    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len]
    }
}

/// Sequential allocator for parameter spans.
#[derive(Default)]
pub(crate) struct Alloc {
    pub len: usize,
}

impl Alloc {
    pub fn take(&mut self, len: usize) -> Span {
        let s = Span { off: self.len, len };
        self.len += len;
        s
    }

    pub fn linear(&mut self, din: usize, dout: usize, bias: bool) -> Linear {
        Linear {
            w: self.take(din * dout),
            b: bias.then(|| self.take(dout)),
            din,
            dout,
        }
    }

    pub fn layer_norm(&mut self, d: usize) -> LayerNorm {
        LayerNorm {
            g: self.take(d),
            b: self.take(d),
            d,
        }
    }

    pub fn block(&mut self, d: usize, heads: usize, hidden: usize) -> Block {
        Block {
            ln1: self.layer_norm(d),
            wq: self.linear(d, d, false),
            wk: self.linear(d, d, false),
            wv: self.linear(d, d, false),
            wo: self.linear(d, d, true),
            ln2: self.layer_norm(d),
            fc1: self.linear(d, hidden, true),
            fc2: self.linear(hidden, d, true),
            heads,
        }
    }
}

/// `x·W + b` with `W` stored `din×dout`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: Span,
    pub b: Option<Span>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward(&self, p: &[f64], x: &[f64], t: usize) -> Vec<f64> {
        let mut out = vec![0.0; t * self.dout];
        gemm(x, self.w.of(p), &mut out, t, self.din, self.dout);
        if let Some(b) = self.b {
            let b = b.of(p);
            for row in out.chunks_exact_mut(self.dout) {
                row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
            }
        }
        out
    }

    /// Accumulates weight gradients and returns `∂/∂x`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dout: &[f64], t: usize) -> Vec<f64> {
        gemm_tn_acc(x, dout, self.w.of_mut(g), t, self.din, self.dout);
        if let Some(b) = self.b {
            let db = b.of_mut(g);
            for row in dout.chunks_exact(self.dout) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
        let mut dx = vec![0.0; t * self.din];
        gemm_nt(dout, self.w.of(p), &mut dx, t, self.dout, self.din);
        dx
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub g: Span,
    pub b: Span,
    pub d: usize,
}

pub(crate) struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LnCache) {
        let d = self.d;
        let (gamma, beta) = (self.g.of(p), self.b.of(p));
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(x.len() / d);
        for ((row, o), xh) in x
            .chunks_exact(d)
            .zip(out.chunks_exact_mut(d))
            .zip(xhat.chunks_exact_mut(d))
        {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for j in 0..d {
                xh[j] = (row[j] - mu) * r;
                o[j] = gamma[j] * xh[j] + beta[j];
            }
        }
        (out, LnCache { xhat, rstd })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], c: &LnCache, dout: &[f64]) -> Vec<f64> {
        let d = self.d;
        let gamma = self.g.of(p);
        let mut dx = vec![0.0; dout.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for (i, (drow, xh)) in dout.chunks_exact(d).zip(c.xhat.chunks_exact(d)).enumerate() {
            for j in 0..d {
                dgamma[j] += drow[j] * xh[j];
                dbeta[j] += drow[j];
                dxhat[j] = drow[j] * gamma[j];
            }
            let mean = dxhat.iter().sum::<f64>() / d as f64;
            let mean_x = dot(&dxhat, xh) / d as f64;
            let r = c.rstd[i];
            for j in 0..d {
                dx[i * d + j] = r * (dxhat[j] - mean - xh[j] * mean_x);
            }
        }
        self.g.of_mut(g).iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
        self.b.of_mut(g).iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Pre-norm transformer block: `x + attn(ln1 x)`, then `+ mlp(ln2 ·)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

pub(crate) struct BlockCache {
    t: usize,
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// softmax weights, `heads × t × t`
    att: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    m: Vec<f64>,
    h: Vec<f64>,
    act: Vec<f64>,
}

impl Block {
    fn dim(&self) -> usize {
        self.ln1.d
    }

    pub fn forward(&self, p: &[f64], x: &[f64], t: usize) -> (Vec<f64>, BlockCache) {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (a, ln1) = self.ln1.forward(p, x);
        let q = self.wq.forward(p, &a, t);
        let k = self.wk.forward(p, &a, t);
        let v = self.wv.forward(p, &a, t);
        let mut att = vec![0.0; self.heads * t * t];
        let mut o = vec![0.0; t * d];
        for hd in 0..self.heads {
            let c0 = hd * dh;
            let w = &mut att[hd * t * t..(hd + 1) * t * t];
            for i in 0..t {
                let qi = &q[i * d + c0..i * d + c0 + dh];
                let row = &mut w[i * t..(i + 1) * t];
                for j in 0..t {
                    row[j] = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
                let oi = &mut o[i * d + c0..i * d + c0 + dh];
                for j in 0..t {
                    let vj = &v[j * d + c0..j * d + c0 + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, vv)| *o += row[j] * vv);
                }
            }
        }
        let mut x1 = self.wo.forward(p, &o, t);
        x1.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        let (m, ln2) = self.ln2.forward(p, &x1);
        let h = self.fc1.forward(p, &m, t);
        let act: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
        let mut out = self.fc2.forward(p, &act, t);
        out.iter_mut().zip(&x1).for_each(|(a, b)| *a += b);
        let cache = BlockCache {
            t,
            ln1,
            a,
            q,
            k,
            v,
            att,
            o,
            ln2,
            m,
            h,
            act,
        };
        (out, cache)
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], c: &BlockCache, dout: &[f64]) -> Vec<f64> {
        let t = c.t;
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dact = self.fc2.backward(p, g, &c.act, dout, t);
        let dh_: Vec<f64> = dact.iter().zip(&c.h).map(|(da, &hv)| da * gelu_grad(hv)).collect();
        let dm = self.fc1.backward(p, g, &c.m, &dh_, t);
        let mut dx1 = self.ln2.backward(p, g, &c.ln2, &dm);
        dx1.iter_mut().zip(dout).for_each(|(a, b)| *a += b);

        let do_ = self.wo.backward(p, g, &c.o, &dx1, t);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut da = vec![0.0; t];
        for hd in 0..self.heads {
            let c0 = hd * dh;
            let w = &c.att[hd * t * t..(hd + 1) * t * t];
            for i in 0..t {
                let doi = &do_[i * d + c0..i * d + c0 + dh];
                let row = &w[i * t..(i + 1) * t];
                for j in 0..t {
                    da[j] = dot(doi, &c.v[j * d + c0..j * d + c0 + dh]);
                    let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                    dvj.iter_mut().zip(doi).for_each(|(a, b)| *a += row[j] * b);
                }
                let s = dot(&da, row);
                for j in 0..t {
                    let ds = row[j] * (da[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for l in 0..dh {
                        dq[i * d + c0 + l] += ds * c.k[j * d + c0 + l];
                        dk[j * d + c0 + l] += ds * c.q[i * d + c0 + l];
                    }
                }
            }
        }
        let mut da_in = self.wq.backward(p, g, &c.a, &dq, t);
        for (lin, grad) in [(&self.wk, &dk), (&self.wv, &dv)] {
            let part = lin.backward(p, g, &c.a, grad, t);
            da_in.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        let mut dx = self.ln1.backward(p, g, &c.ln1, &da_in);
        dx.iter_mut().zip(&dx1).for_each(|(a, b)| *a += b);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn block_gradients() {
        let mut alloc = Alloc::default();
        let blk = alloc.block(8, 2, 16);
        let t = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p: Vec<f64> = (0..alloc.len).map(|_| rng.random_range(-0.5..0.5)).collect();
        // LN gains near 1 like a trained network
        for s in [blk.ln1.g, blk.ln2.g] {
            s.of_mut(&mut p).iter_mut().for_each(|v| *v += 1.0);
        }
        let x: Vec<f64> = (0..t * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..t * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| dot(&blk.forward(p, x, t).0, &w);

        let (_, cache) = blk.forward(&p, &x, t);
        let mut g = vec![0.0; p.len()];
        let dx = blk.backward(&p, &mut g, &cache, &w);
        let err = grad_check(|q| loss(q, &x), &g, &p, 1e-4, None).unwrap();
        assert!(err < 1e-6, "params {err}");
        let err = grad_check(|xx| loss(&p, xx), &dx, &x, 1e-4, None).unwrap();
        assert!(err < 1e-6, "input {err}");
    }

    #[test]
    fn layer_norm_rows_are_normalised() {
        let mut alloc = Alloc::default();
        let ln = alloc.layer_norm(4);
        let mut p = vec![0.0; alloc.len];
        ln.g.of_mut(&mut p).fill(1.0);
        let (out, _) = ln.forward(&p, &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 0.0]);
        for row in out.chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
