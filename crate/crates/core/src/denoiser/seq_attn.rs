use super::linalg::{add_into, gelu, gelu_grad, matvec, matvec_acc, matvec_t_acc, outer_acc};
use super::{timestep_embedding, DenoiserModel};
use crate::latentdata::CondSeq;
use crate::numerics::Mat;

pub(super) struct Cache {
    z: Mat,
    tokens: Mat,
    null: bool,
    temb: Vec<f64>,
    // T×h
    x: Vec<f64>,
    q: Vec<f64>,
    o: Vec<f64>,
    y: Vec<f64>,
    r: Vec<f64>,
    // L×h
    k: Vec<f64>,
    v: Vec<f64>,
    // T×L
    p: Vec<f64>,
    // T×ff
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(super) fn forward(m: &DenoiserModel, z: &Mat, step: usize, cond: &CondSeq) -> (Mat, Cache) {
    let d = m.dims;
    let (a, c, h, f) = (d.d_a, d.d_t, d.hidden, d.ff);
    let t_len = z.rows();
    let temb = timestep_embedding(step, d.d_time);

    let in_w = m.seg("in.w");
    let in_b = m.seg("in.b");
    let mut tproj = vec![0.0; h];
    matvec(m.seg("time.w"), h, d.d_time, &temb, &mut tproj);

    let mut x = vec![0.0; t_len * h];
    for t in 0..t_len {
        let xt = &mut x[t * h..(t + 1) * h];
        matvec(in_w, h, a, z.row(t), xt);
        for ((xv, b), tp) in xt.iter_mut().zip(in_b).zip(&tproj) {
            *xv += b + tp;
        }
    }

    let null = cond.is_null();
    let tokens = cond.tokens().clone();
    let l_len = tokens.rows();
    let mut y = x.clone();
    let (mut q, mut o, mut k, mut v, mut p) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    if !null {
        let (wq, wk, wv, wo) = (m.seg("attn.q"), m.seg("attn.k"), m.seg("attn.v"), m.seg("attn.o"));
        k = vec![0.0; l_len * h];
        v = vec![0.0; l_len * h];
        for l in 0..l_len {
            matvec(wk, h, c, tokens.row(l), &mut k[l * h..(l + 1) * h]);
            matvec(wv, h, c, tokens.row(l), &mut v[l * h..(l + 1) * h]);
        }
        q = vec![0.0; t_len * h];
        o = vec![0.0; t_len * h];
        p = vec![0.0; t_len * l_len];
        let inv_sqrt = 1.0 / (h as f64).sqrt();
        for t in 0..t_len {
            let qt = &mut q[t * h..(t + 1) * h];
            matvec(wq, h, h, &x[t * h..(t + 1) * h], qt);
            let pt = &mut p[t * l_len..(t + 1) * l_len];
            for (l, s) in pt.iter_mut().enumerate() {
                *s = inv_sqrt * qt.iter().zip(&k[l * h..(l + 1) * h]).map(|(a, b)| a * b).sum::<f64>();
            }
            let mx = pt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in pt.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            pt.iter_mut().for_each(|s| *s /= sum);
            let ot = &mut o[t * h..(t + 1) * h];
            for (l, &w) in pt.iter().enumerate() {
                for (ov, vv) in ot.iter_mut().zip(&v[l * h..(l + 1) * h]) {
                    *ov += w * vv;
                }
            }
            matvec_acc(wo, h, ot, &mut y[t * h..(t + 1) * h]);
        }
    }

    let (w1, b1, w2, b2) = (m.seg("ff1.w"), m.seg("ff1.b"), m.seg("ff2.w"), m.seg("ff2.b"));
    let (wout, bout) = (m.seg("out.w"), m.seg("out.b"));
    let mut u = vec![0.0; t_len * f];
    let mut g = vec![0.0; t_len * f];
    let mut r = y.clone();
    let mut out = Mat::zeros(t_len, a);
    for t in 0..t_len {
        let ut = &mut u[t * f..(t + 1) * f];
        matvec(w1, f, h, &y[t * h..(t + 1) * h], ut);
        add_into(ut, b1);
        let gt = &mut g[t * f..(t + 1) * f];
        for (gv, uv) in gt.iter_mut().zip(ut.iter()) {
            *gv = gelu(*uv);
        }
        let rt = &mut r[t * h..(t + 1) * h];
        matvec_acc(w2, f, gt, rt);
        add_into(rt, b2);
        let ot = out.row_mut(t);
        matvec(wout, a, h, rt, ot);
        add_into(ot, bout);
    }

    let cache = Cache {
        z: z.clone(),
        tokens,
        null,
        temb,
        x,
        q,
        o,
        y,
        r,
        k,
        v,
        p,
        u,
        g,
    };
    (out, cache)
}

/// Accumulates parameter gradients into `grad` and returns d/dz.
pub(super) fn backward(m: &DenoiserModel, cache: &Cache, dout: &Mat, grad: &mut [f64]) -> Mat {
    let d = m.dims;
    let (a, c, h, f) = (d.d_a, d.d_t, d.hidden, d.ff);
    let t_len = cache.z.rows();
    let lay = &m.layout;

    let mut dy = vec![0.0; t_len * h];
    {
        let (wout, w1, w2) = (m.seg("out.w"), m.seg("ff1.w"), m.seg("ff2.w"));
        let mut dr = vec![0.0; h];
        let mut dg = vec![0.0; f];
        for t in 0..t_len {
            let dot_ = dout.row(t);
            outer_acc(&mut grad[lay.range("out.w")], h, dot_, &cache.r[t * h..(t + 1) * h]);
            add_into(&mut grad[lay.range("out.b")], dot_);
            dr.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(wout, h, dot_, &mut dr);

            let dyt = &mut dy[t * h..(t + 1) * h];
            dyt.copy_from_slice(&dr);
            outer_acc(&mut grad[lay.range("ff2.w")], f, &dr, &cache.g[t * f..(t + 1) * f]);
            add_into(&mut grad[lay.range("ff2.b")], &dr);
            dg.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(w2, f, &dr, &mut dg);
            for (gv, uv) in dg.iter_mut().zip(&cache.u[t * f..(t + 1) * f]) {
                *gv *= gelu_grad(*uv);
            }
            outer_acc(&mut grad[lay.range("ff1.w")], h, &dg, &cache.y[t * h..(t + 1) * h]);
            add_into(&mut grad[lay.range("ff1.b")], &dg);
            matvec_t_acc(w1, h, &dg, dyt);
        }
    }

    // residual: dx starts as dy
    let mut dx = dy.clone();
    if !cache.null {
        let l_len = cache.tokens.rows();
        let (wq, wo) = (m.seg("attn.q"), m.seg("attn.o"));
        let inv_sqrt = 1.0 / (h as f64).sqrt();
        let mut dk = vec![0.0; l_len * h];
        let mut dv = vec![0.0; l_len * h];
        let mut d_o = vec![0.0; h];
        let mut dp = vec![0.0; l_len];
        let mut dq = vec![0.0; h];
        for t in 0..t_len {
            let dyt = &dy[t * h..(t + 1) * h];
            outer_acc(&mut grad[lay.range("attn.o")], h, dyt, &cache.o[t * h..(t + 1) * h]);
            d_o.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(wo, h, dyt, &mut d_o);

            let pt = &cache.p[t * l_len..(t + 1) * l_len];
            for l in 0..l_len {
                let vl = &cache.v[l * h..(l + 1) * h];
                dp[l] = d_o.iter().zip(vl).map(|(x, y)| x * y).sum();
                for (g, dov) in dv[l * h..(l + 1) * h].iter_mut().zip(&d_o) {
                    *g += pt[l] * dov;
                }
            }
            let mean: f64 = pt.iter().zip(&dp).map(|(p, d)| p * d).sum();
            dq.iter_mut().for_each(|v| *v = 0.0);
            let qt = &cache.q[t * h..(t + 1) * h];
            for l in 0..l_len {
                let ds = pt[l] * (dp[l] - mean) * inv_sqrt;
                if ds == 0.0 {
                    continue;
                }
                for (g, kv) in dq.iter_mut().zip(&cache.k[l * h..(l + 1) * h]) {
                    *g += ds * kv;
                }
                for (g, qv) in dk[l * h..(l + 1) * h].iter_mut().zip(qt) {
                    *g += ds * qv;
                }
            }
            outer_acc(&mut grad[lay.range("attn.q")], h, &dq, &cache.x[t * h..(t + 1) * h]);
            matvec_t_acc(wq, h, &dq, &mut dx[t * h..(t + 1) * h]);
        }
        for l in 0..l_len {
            let tok = cache.tokens.row(l);
            outer_acc(&mut grad[lay.range("attn.k")], c, &dk[l * h..(l + 1) * h], tok);
            outer_acc(&mut grad[lay.range("attn.v")], c, &dv[l * h..(l + 1) * h], tok);
        }
    }

    let in_w = m.seg("in.w");
    let mut dz = Mat::zeros(t_len, a);
    let mut dtproj = vec![0.0; h];
    for t in 0..t_len {
        let dxt = &dx[t * h..(t + 1) * h];
        outer_acc(&mut grad[lay.range("in.w")], a, dxt, cache.z.row(t));
        add_into(&mut dtproj, dxt);
        matvec_t_acc(in_w, a, dxt, dz.row_mut(t));
    }
    add_into(&mut grad[lay.range("in.b")], &dtproj);
    outer_acc(&mut grad[lay.range("time.w")], d.d_time, &dtproj, &cache.temb);
    dz
}
