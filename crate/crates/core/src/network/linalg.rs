//! Dense kernels over row-major `(rows, cols)` slices.

/// `out += W x`.
pub fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), cols * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += W x` touching only the listed columns of `x`.
pub fn matvec_add_sparse(w: &[f64], x: &[f64], nz: &[usize], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), cols * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = 0.0;
        for &j in nz {
            acc += row[j] * x[j];
        }
        *o += acc;
    }
}

/// `dx += W^T dy`.
pub fn matvec_t_add(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    debug_assert_eq!(w.len(), cols * dy.len());
    for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *g == 0.0 {
            continue;
        }
        axpy(*g, row, dx);
    }
}

/// `dW += dy x^T`.
pub fn outer_add(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(dw.len(), cols * dy.len());
    for (g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if *g == 0.0 {
            continue;
        }
        axpy(*g, x, row);
    }
}

/// `dW += dy x^T` for the listed columns only.
pub fn outer_add_sparse(dw: &mut [f64], dy: &[f64], x: &[f64], nz: &[usize]) {
    let cols = x.len();
    debug_assert_eq!(dw.len(), cols * dy.len());
    for (g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if *g == 0.0 {
            continue;
        }
        for &j in nz {
            row[j] += g * x[j];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive() {
        let w: Vec<f64> = (0..15).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = [1.0, 0.0, -2.0, 0.5, 3.0];
        let mut out = vec![0.0; 3];
        matvec_add(&w, &x, &mut out);
        for (i, o) in out.iter().enumerate() {
            let naive: f64 = (0..5).map(|j| w[i * 5 + j] * x[j]).sum();
            assert!((o - naive).abs() < 1e-12);
        }
        let mut sparse = vec![0.0; 3];
        matvec_add_sparse(&w, &x, &[0, 2, 3, 4], &mut sparse);
        assert_eq!(sparse, out);

        let dy = [1.0, -1.0, 2.0];
        let mut dx = vec![0.0; 5];
        matvec_t_add(&w, &dy, &mut dx);
        for (j, d) in dx.iter().enumerate() {
            let naive: f64 = (0..3).map(|i| w[i * 5 + j] * dy[i]).sum();
            assert!((d - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let l = [0.3, -1.2, 2.0, 0.0];
        let a = softmax(&l);
        let shifted: Vec<f64> = l.iter().map(|v| v + 17.5).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_uniform() {
        let p = vec![1.0 / 9.0; 9];
        assert!((entropy(&p) - 9f64.ln()).abs() < 1e-12);
    }
}
