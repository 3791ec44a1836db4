//! Plain slice kernels shared by the tape's forward and backward passes.
//! All loops run in a fixed order so results are reproducible bit for bit.

use super::Real;

/// out[m×n] = a[m×k] · b[k×n]
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// out[m×k] = g[m×n] · b[k×n]ᵀ
pub fn matmul_bt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// out[k×n] = a[m×k]ᵀ · g[m×n]
pub fn matmul_at<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps every flat index of `out_shape` to the flat index of an operand of
/// `shape` broadcast into it.
pub fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n_out: usize = out_shape.iter().product();
    let n_in: usize = shape.iter().product();
    if shape == out_shape {
        return (0..n_out).collect();
    }
    if n_in == 1 {
        return vec![0; n_out];
    }
    // Suffix case: operand repeats along the leading axes.
    let off = out_shape.len() - shape.len();
    if out_shape[off..] == *shape {
        return (0..n_out).map(|i| i % n_in).collect();
    }
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        let dim = if i < off { 1 } else { shape[i - off] };
        strides[i] = if dim == 1 { 0 } else { s };
        s *= dim;
    }
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Sums a gradient of the broadcast output shape back onto the operand.
pub fn reduce_to<T: Real>(grad: &[T], map: &[usize], n_in: usize) -> Vec<T> {
    if map.len() == n_in {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); n_in];
    for (g, &j) in grad.iter().zip(map) {
        out[j] = out[j] + *g;
    }
    out
}

/// Shape decomposition around an axis: (outer, axis length, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn permute<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
