//! Selective-scan kernels.
//!
//! Per channel `c` and state slot `j`, token `k` updates
//! `x[c,j] <- exp(delta[k,c] * a[c,j]) * x[c,j] + delta[k,c] * b[k,j] * u[k,c]`
//! and emits `y[k,c] = sum_j cm[k,j] * x[c,j]`, reading the state after the
//! update. The direct `D ⊙ u` term is added by the caller.

use crate::diffcore::{CustomBackward, Real, Tape, Tensor, TensorError, Var};

/// How the linear recurrence is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanBackend {
    Sequential,
    /// Blocked tree evaluation of the associative pair operator.
    Parallel,
}

/// Sequences at or below this length are scanned sequentially by the
/// parallel backend; it is also the block size of the tree.
pub const SCAN_BLOCK: usize = 32;

/// Borrowed inputs of one sequence: `u`, `delta` are `len × d`, `a` is
/// `d × h`, `b`, `c` are `len × h`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: usize,
    pub h: usize,
}

impl<T: Real> ScanInputs<'_, T> {
    pub fn len(&self) -> usize {
        self.u.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn check(&self, x0: &[T]) -> Result<(), TensorError> {
        let n = self.len();
        let (d, h) = (self.d, self.h);
        if self.u.len() != n * d
            || self.delta.len() != n * d
            || self.a.len() != d * h
            || self.b.len() != n * h
            || self.c.len() != n * h
            || x0.len() != d * h
        {
            return Err(TensorError::Shape(format!(
                "scan inputs: u {} delta {} a {} b {} c {} x0 {} for len {n}, d {d}, h {h}",
                self.u.len(),
                self.delta.len(),
                self.a.len(),
                self.b.len(),
                self.c.len(),
                x0.len()
            )));
        }
        if self.delta.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "selective_scan.delta" });
        }
        Ok(())
    }

    fn readout(&self, k: usize, x: &[T], y: &mut [T]) {
        let (d, h) = (self.d, self.h);
        let ck = &self.c[k * h..(k + 1) * h];
        for ch in 0..d {
            let xs = &x[ch * h..(ch + 1) * h];
            let mut acc = T::zero();
            for j in 0..h {
                acc = acc + ck[j] * xs[j];
            }
            y[k * d + ch] = acc;
        }
    }
}

/// Output of a scan: `y` (`len × d`), every post-update state
/// (`len × d × h`, optional) and the final state (`d × h`).
pub struct ScanOutput<T> {
    pub y: Vec<T>,
    pub states: Vec<T>,
    pub last: Vec<T>,
}

/// Reference token-by-token recurrence.
pub fn scan_sequential<T: Real>(inp: &ScanInputs<T>, x0: &[T], keep_states: bool) -> Result<ScanOutput<T>, TensorError> {
    inp.check(x0)?;
    let (n, d, h) = (inp.len(), inp.d, inp.h);
    let mut x = x0.to_vec();
    let mut y = vec![T::zero(); n * d];
    let mut states = Vec::with_capacity(if keep_states { n * d * h } else { 0 });
    for k in 0..n {
        let bk = &inp.b[k * h..(k + 1) * h];
        for ch in 0..d {
            let dl = inp.delta[k * d + ch];
            let du = dl * inp.u[k * d + ch];
            let ac = &inp.a[ch * h..(ch + 1) * h];
            let xs = &mut x[ch * h..(ch + 1) * h];
            for j in 0..h {
                xs[j] = (dl * ac[j]).exp() * xs[j] + du * bk[j];
            }
        }
        inp.readout(k, &x, &mut y);
        if keep_states {
            states.extend_from_slice(&x);
        }
    }
    Ok(ScanOutput { y, states, last: x })
}

/// Inclusive prefix of the pair operator `(a1,b1)∘(a2,b2) = (a2*a1, a2*b1 + b2)`
/// over `n` elements of width `w`, evaluated as a tree of blocks.
fn compose_prefix<T: Real>(a: &mut [T], b: &mut [T], n: usize, w: usize, block: usize) {
    // local inclusive prefix inside each block
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        for k in start + 1..end {
            let (prev, cur) = a.split_at_mut(k * w);
            let (bprev, bcur) = b.split_at_mut(k * w);
            let ap = &prev[(k - 1) * w..];
            let bp = &bprev[(k - 1) * w..];
            for i in 0..w {
                let ak = cur[i];
                bcur[i] = ak * bp[i] + bcur[i];
                cur[i] = ak * ap[i];
            }
        }
    }
    let blocks = n.div_ceil(block);
    if blocks <= 1 {
        return;
    }
    // prefix over block aggregates, recursively
    let mut agg_a = Vec::with_capacity(blocks * w);
    let mut agg_b = Vec::with_capacity(blocks * w);
    for bi in 0..blocks {
        let last = ((bi + 1) * block).min(n) - 1;
        agg_a.extend_from_slice(&a[last * w..(last + 1) * w]);
        agg_b.extend_from_slice(&b[last * w..(last + 1) * w]);
    }
    compose_prefix(&mut agg_a, &mut agg_b, blocks, w, block);
    // fold the prefix of all earlier blocks into each later block
    for bi in 1..blocks {
        let pa = &agg_a[(bi - 1) * w..bi * w];
        let pb = &agg_b[(bi - 1) * w..bi * w];
        let end = ((bi + 1) * block).min(n);
        for k in bi * block..end {
            let ak = &mut a[k * w..(k + 1) * w];
            let bk = &mut b[k * w..(k + 1) * w];
            for i in 0..w {
                bk[i] = ak[i] * pb[i] + bk[i];
                ak[i] = ak[i] * pa[i];
            }
        }
    }
}

/// Associative-scan evaluation; equals [`scan_sequential`] up to rounding.
///
/// Reduce-then-scan: every block is folded into one pair, a tree prefix
/// over the block pairs yields each block's incoming state, and the blocks
/// then replay their tokens from that state. Blocks are independent in the
/// first and last phase.
pub fn scan_parallel<T: Real>(
    inp: &ScanInputs<T>,
    x0: &[T],
    keep_states: bool,
    block: usize,
) -> Result<ScanOutput<T>, TensorError> {
    inp.check(x0)?;
    let (n, d, h) = (inp.len(), inp.d, inp.h);
    if n <= block {
        return scan_sequential(inp, x0, keep_states);
    }
    let w = d * h;
    let blocks = n.div_ceil(block);
    let mut decay = vec![T::zero(); n * w];
    let mut agg_a = vec![T::one(); blocks * w];
    let mut agg_b = vec![T::zero(); blocks * w];
    for bi in 0..blocks {
        let ga = &mut agg_a[bi * w..(bi + 1) * w];
        let gb = &mut agg_b[bi * w..(bi + 1) * w];
        for k in bi * block..((bi + 1) * block).min(n) {
            let bk = &inp.b[k * h..(k + 1) * h];
            for ch in 0..d {
                let dl = inp.delta[k * d + ch];
                let du = dl * inp.u[k * d + ch];
                let ac = &inp.a[ch * h..(ch + 1) * h];
                let off = ch * h;
                for j in 0..h {
                    let e = (dl * ac[j]).exp();
                    decay[k * w + off + j] = e;
                    ga[off + j] = e * ga[off + j];
                    gb[off + j] = e * gb[off + j] + du * bk[j];
                }
            }
        }
    }
    compose_prefix(&mut agg_a, &mut agg_b, blocks, w, block);
    let mut y = vec![T::zero(); n * d];
    let mut states = Vec::with_capacity(if keep_states { n * w } else { 0 });
    let mut x = vec![T::zero(); w];
    for bi in 0..blocks {
        if bi == 0 {
            x.copy_from_slice(x0);
        } else {
            let (pa, pb) = (&agg_a[(bi - 1) * w..bi * w], &agg_b[(bi - 1) * w..bi * w]);
            for i in 0..w {
                x[i] = pa[i] * x0[i] + pb[i];
            }
        }
        for k in bi * block..((bi + 1) * block).min(n) {
            let bk = &inp.b[k * h..(k + 1) * h];
            let ek = &decay[k * w..(k + 1) * w];
            for ch in 0..d {
                let du = inp.delta[k * d + ch] * inp.u[k * d + ch];
                let off = ch * h;
                for j in 0..h {
                    x[off + j] = ek[off + j] * x[off + j] + du * bk[j];
                }
            }
            inp.readout(k, &x, &mut y);
            if keep_states {
                states.extend_from_slice(&x);
            }
        }
    }
    Ok(ScanOutput { y, states, last: x })
}

pub fn run_scan<T: Real>(
    inp: &ScanInputs<T>,
    x0: &[T],
    keep_states: bool,
    backend: ScanBackend,
) -> Result<ScanOutput<T>, TensorError> {
    match backend {
        ScanBackend::Sequential => scan_sequential(inp, x0, keep_states),
        ScanBackend::Parallel => scan_parallel(inp, x0, keep_states, SCAN_BLOCK),
    }
}

/// Adjoints of one sequence given the saved post-update states.
#[allow(clippy::type_complexity)]
fn scan_backward<T: Real>(
    inp: &ScanInputs<T>,
    x0: &[T],
    states: &[T],
    gy: &[T],
    ga: &mut [T],
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let (n, d, h) = (inp.len(), inp.d, inp.h);
    let w = d * h;
    let mut gu = vec![T::zero(); n * d];
    let mut gdelta = vec![T::zero(); n * d];
    let mut gb = vec![T::zero(); n * h];
    let mut gc = vec![T::zero(); n * h];
    let mut carry = vec![T::zero(); w];
    for k in (0..n).rev() {
        let xk = &states[k * w..(k + 1) * w];
        let xprev = if k == 0 { x0 } else { &states[(k - 1) * w..k * w] };
        let bk = &inp.b[k * h..(k + 1) * h];
        let ck = &inp.c[k * h..(k + 1) * h];
        for ch in 0..d {
            let gyk = gy[k * d + ch];
            let dl = inp.delta[k * d + ch];
            let uk = inp.u[k * d + ch];
            let mut gdl = T::zero();
            let mut gux = T::zero();
            for j in 0..h {
                let i = ch * h + j;
                let gx = gyk * ck[j] + carry[i];
                gc[k * h + j] = gc[k * h + j] + gyk * xk[i];
                let aj = inp.a[i];
                let abar = (dl * aj).exp();
                let g_abar = gx * xprev[i];
                gdl = gdl + g_abar * abar * aj + gx * bk[j] * uk;
                ga[i] = ga[i] + g_abar * abar * dl;
                gb[k * h + j] = gb[k * h + j] + gx * dl * uk;
                gux = gux + gx * dl * bk[j];
                carry[i] = gx * abar;
            }
            gdelta[k * d + ch] = gdl;
            gu[k * d + ch] = gux;
        }
    }
    (gu, gdelta, gb, gc, carry)
}

struct SelectiveScanRule<T> {
    states: Vec<T>,
    batch: usize,
    len: usize,
    d: usize,
    h: usize,
}

impl<T: Real> CustomBackward<T> for SelectiveScanRule<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, grad_out: &[T], inputs: &[&Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let [u, delta, a, b, c, x0] = inputs else {
            unreachable!("selective scan has six inputs")
        };
        let (n, d, h) = (self.len, self.d, self.h);
        let mut gu = Vec::with_capacity(u.len());
        let mut gdelta = Vec::with_capacity(u.len());
        let mut ga = vec![T::zero(); d * h];
        let mut gb = Vec::with_capacity(b.len());
        let mut gc = Vec::with_capacity(c.len());
        let mut gx0 = Vec::with_capacity(x0.len());
        for bi in 0..self.batch {
            let inp = ScanInputs {
                u: &u.data()[bi * n * d..(bi + 1) * n * d],
                delta: &delta.data()[bi * n * d..(bi + 1) * n * d],
                a: a.data(),
                b: &b.data()[bi * n * h..(bi + 1) * n * h],
                c: &c.data()[bi * n * h..(bi + 1) * n * h],
                d,
                h,
            };
            let (u_, dl_, b_, c_, x_) = scan_backward(
                &inp,
                &x0.data()[bi * d * h..(bi + 1) * d * h],
                &self.states[bi * n * d * h..(bi + 1) * n * d * h],
                &grad_out[bi * n * d..(bi + 1) * n * d],
                &mut ga,
            );
            gu.extend(u_);
            gdelta.extend(dl_);
            gb.extend(b_);
            gc.extend(c_);
            gx0.extend(x_);
        }
        vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gx0)]
    }
}

/// Records a batched selective scan on the tape.
///
/// Shapes: `u`, `delta` `[B, L, d]`; `a` `[d, h]`; `b`, `c` `[B, L, h]`;
/// `x0` `[B, d, h]`. Returns `y` `[B, L, d]` and the final states
/// `[B, d, h]` (a plain value; the carry is not differentiated across steps).
pub fn selective_scan<T: Real>(
    tape: &Tape<T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    x0: Var,
    backend: ScanBackend,
) -> Result<(Var, Tensor<T>), TensorError> {
    let (uv, dv, av, bv, cv, xv) = (
        tape.value(u),
        tape.value(delta),
        tape.value(a),
        tape.value(b),
        tape.value(c),
        tape.value(x0),
    );
    let us = uv.shape();
    if us.len() != 3 || av.rank() != 2 || dv.shape() != us {
        return Err(TensorError::Shape(format!(
            "selective_scan u {:?} delta {:?} a {:?}",
            us,
            dv.shape(),
            av.shape()
        )));
    }
    let (batch, n, d) = (us[0], us[1], us[2]);
    let h = av.shape()[1];
    if av.shape()[0] != d || bv.shape() != [batch, n, h] || cv.shape() != [batch, n, h] || xv.shape() != [batch, d, h] {
        return Err(TensorError::Shape(format!(
            "selective_scan a {:?} b {:?} c {:?} x0 {:?} for u {:?}",
            av.shape(),
            bv.shape(),
            cv.shape(),
            xv.shape(),
            us
        )));
    }
    let need_states = [u, delta, a, b, c, x0].iter().any(|&v| tape.requires_grad(v));
    let mut y = Vec::with_capacity(batch * n * d);
    let mut states = Vec::with_capacity(if need_states { batch * n * d * h } else { 0 });
    let mut last = Vec::with_capacity(batch * d * h);
    for bi in 0..batch {
        let inp = ScanInputs {
            u: &uv.data()[bi * n * d..(bi + 1) * n * d],
            delta: &dv.data()[bi * n * d..(bi + 1) * n * d],
            a: av.data(),
            b: &bv.data()[bi * n * h..(bi + 1) * n * h],
            c: &cv.data()[bi * n * h..(bi + 1) * n * h],
            d,
            h,
        };
        let out = run_scan(&inp, &xv.data()[bi * d * h..(bi + 1) * d * h], need_states, backend)?;
        y.extend(out.y);
        states.extend(out.states);
        last.extend(out.last);
    }
    let rule = SelectiveScanRule {
        states,
        batch,
        len: n,
        d,
        h,
    };
    let yv = tape.custom(
        &[u, delta, a, b, c, x0],
        Tensor::new(vec![batch, n, d], y)?,
        Box::new(rule),
    )?;
    Ok((yv, Tensor::new(vec![batch, d, h], last)?))
}
