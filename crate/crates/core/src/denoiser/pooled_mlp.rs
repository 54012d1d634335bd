use super::linalg::{add_into, gelu, gelu_grad, matvec, matvec_t_acc, outer_acc};
use super::{timestep_embedding, DenoiserModel};
use crate::latentdata::CondSeq;
use crate::numerics::Mat;

pub(super) struct Cache {
    frames: usize,
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// Input vector is pool(z) ⊕ e(τ) ⊕ pool(cond), the last block zero when null.
pub(super) fn forward(m: &DenoiserModel, z: &Mat, step: usize, cond: &CondSeq) -> (Mat, Cache) {
    let d = m.dims;
    let width = d.d_a + d.d_time + d.d_t;
    let mut input = Vec::with_capacity(width);
    input.extend(z.col_means());
    input.extend(timestep_embedding(step, d.d_time));
    if cond.is_null() {
        input.extend(std::iter::repeat_n(0.0, d.d_t));
    } else {
        input.extend(cond.tokens().col_means());
    }

    let mut pre = vec![0.0; d.hidden];
    matvec(m.seg("hidden.w"), d.hidden, width, &input, &mut pre);
    add_into(&mut pre, m.seg("hidden.b"));
    let hidden: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mut y = vec![0.0; d.d_a];
    matvec(m.seg("out.w"), d.d_a, d.hidden, &hidden, &mut y);
    add_into(&mut y, m.seg("out.b"));

    let mut out = Mat::zeros(z.rows(), d.d_a);
    for t in 0..z.rows() {
        out.row_mut(t).copy_from_slice(&y);
    }
    (
        out,
        Cache {
            frames: z.rows(),
            input,
            pre,
            hidden,
        },
    )
}

pub(super) fn backward(m: &DenoiserModel, cache: &Cache, dout: &Mat, grad: &mut [f64]) -> Mat {
    let d = m.dims;
    let width = d.d_a + d.d_time + d.d_t;
    let lay = &m.layout;
    // broadcast output: gradient is the sum over frames
    let mut dy = vec![0.0; d.d_a];
    for t in 0..cache.frames {
        add_into(&mut dy, dout.row(t));
    }
    outer_acc(&mut grad[lay.range("out.w")], d.hidden, &dy, &cache.hidden);
    add_into(&mut grad[lay.range("out.b")], &dy);
    let mut dh = vec![0.0; d.hidden];
    matvec_t_acc(m.seg("out.w"), d.hidden, &dy, &mut dh);
    for (g, p) in dh.iter_mut().zip(&cache.pre) {
        *g *= gelu_grad(*p);
    }
    outer_acc(&mut grad[lay.range("hidden.w")], width, &dh, &cache.input);
    add_into(&mut grad[lay.range("hidden.b")], &dh);
    let mut din = vec![0.0; width];
    matvec_t_acc(m.seg("hidden.w"), width, &dh, &mut din);

    let per_frame: Vec<f64> = din[..d.d_a].iter().map(|v| v / cache.frames as f64).collect();
    let mut dz = Mat::zeros(cache.frames, d.d_a);
    for t in 0..cache.frames {
        dz.row_mut(t).copy_from_slice(&per_frame);
    }
    dz
}
