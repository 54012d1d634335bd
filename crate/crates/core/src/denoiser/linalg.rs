//! Slice kernels for row-major weight blocks.

/// out = W·x for W of shape rows×cols.
#[inline]
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// out += W·x
#[inline]
pub(crate) fn matvec_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// dx += Wᵀ·dy
#[inline]
pub(crate) fn matvec_t_acc(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (d, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *d == 0.0 {
            continue;
        }
        for (x, a) in dx.iter_mut().zip(row) {
            *x += d * a;
        }
    }
}

/// dW += dy·xᵀ
#[inline]
pub(crate) fn outer_acc(dw: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (d, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if *d == 0.0 {
            continue;
        }
        for (g, xv) in row.iter_mut().zip(x) {
            *g += d * xv;
        }
    }
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GeLU, tanh approximation.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
