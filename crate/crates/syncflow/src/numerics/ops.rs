//! Differentiable tensor primitives, generic over the scalar type.
//!
//! Each op validates shapes, computes its value eagerly, checks the output
//! for non-finite values, and records a backward closure on the tape when
//! any input requires gradients. Backward closures read parent values from
//! the tape's value slice, so large intermediates are never cloned into
//! captures.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{accumulate, BackFn, Tape, Var};
use crate::numerics::tensor::{ensure_finite, strides, GTensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

/// C += A*B with A (m x k), B (k x n), all row-major.
pub(crate) fn mm_accum<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * *bv;
            }
        }
    }
}

/// C += A*B^T with A (m x k), B (n x k): c[i,j] += dot(a_row_i, b_row_j).
pub(crate) fn mm_accum_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += *av * *bv;
            }
            c_row[j] += acc;
        }
    }
}

/// C += A^T*B with A (m x k), B (m x n), C (k x n).
pub(crate) fn mm_accum_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * *bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Shape of `a op b` under numpy-style broadcasting.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut p = vec![1usize; rank];
    p[rank - shape.len()..].copy_from_slice(shape);
    p
}

/// Expand `data` (of `from` shape) to `to` shape by repeating broadcast axes.
pub(crate) fn broadcast_to<T: Scalar>(data: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let rank = to.len();
    let fp = pad_left(from, rank);
    let fs = strides(&fp);
    let n: usize = to.iter().product();
    let mut out = vec![T::ZERO; n];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if fp[d] != 1 {
                src += fs[d];
            }
            if coords[d] < to[d] {
                break;
            }
            coords[d] = 0;
            if fp[d] != 1 {
                src -= fs[d] * to[d];
            }
        }
    }
    out
}

/// Sum `grad` (of `from` shape) down to `to` shape, inverting a broadcast.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let tp = pad_left(to, rank);
    let ts = strides(&tp);
    let n: usize = to.iter().product();
    let mut out = vec![T::ZERO; n];
    let mut coords = vec![0usize; rank];
    let mut dst = 0usize;
    for &g in grad.iter() {
        out[dst] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if tp[d] != 1 {
                dst += ts[d];
            }
            if coords[d] < from[d] {
                break;
            }
            coords[d] = 0;
            if tp[d] != 1 {
                dst -= ts[d] * from[d];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (a_shape, b_shape) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let out_shape = broadcast_shape(&a_shape, &b_shape)?;
        let av;
        let bv;
        {
            let at = self.value(a);
            let bt = self.value(b);
            av = if a_shape == out_shape {
                None
            } else {
                Some(broadcast_to(at.data(), &a_shape, &out_shape))
            };
            bv = if b_shape == out_shape {
                None
            } else {
                Some(broadcast_to(bt.data(), &b_shape, &out_shape))
            };
        }
        let n: usize = out_shape.iter().product();
        let mut data = vec![T::ZERO; n];
        {
            let ad: &[T] = av.as_deref().unwrap_or(self.value(a).data());
            let bd: &[T] = bv.as_deref().unwrap_or(self.value(b).data());
            match op {
                BinOp::Add => {
                    for i in 0..n {
                        data[i] = ad[i] + bd[i];
                    }
                }
                BinOp::Sub => {
                    for i in 0..n {
                        data[i] = ad[i] - bd[i];
                    }
                }
                BinOp::Mul => {
                    for i in 0..n {
                        data[i] = ad[i] * bd[i];
                    }
                }
            }
        }
        ensure_finite(&data, "binary op")?;
        let a_rq = self.requires_grad(a);
        let b_rq = self.requires_grad(b);
        let rq = a_rq || b_rq;
        let back: Option<BackFn<T>> = if rq {
            let (ash, bsh, osh) = (a_shape.clone(), b_shape.clone(), out_shape.clone());
            Some(Box::new(move |values, grad_out, grads| {
                match op {
                    BinOp::Add | BinOp::Sub => {
                        if a_rq {
                            let da = reduce_to(grad_out.data(), &osh, &ash);
                            accumulate(&mut grads[a.0], &ash, &da);
                        }
                        if b_rq {
                            let mut db = reduce_to(grad_out.data(), &osh, &bsh);
                            if matches!(op, BinOp::Sub) {
                                for v in db.iter_mut() {
                                    *v = -*v;
                                }
                            }
                            accumulate(&mut grads[b.0], &bsh, &db);
                        }
                    }
                    BinOp::Mul => {
                        if a_rq {
                            let bx = broadcast_to(values[b.0].data(), &bsh, &osh);
                            let prod: Vec<T> = grad_out
                                .data()
                                .iter()
                                .zip(&bx)
                                .map(|(g, v)| *g * *v)
                                .collect();
                            let da = reduce_to(&prod, &osh, &ash);
                            accumulate(&mut grads[a.0], &ash, &da);
                        }
                        if b_rq {
                            let ax = broadcast_to(values[a.0].data(), &ash, &osh);
                            let prod: Vec<T> = grad_out
                                .data()
                                .iter()
                                .zip(&ax)
                                .map(|(g, v)| *g * *v)
                                .collect();
                            let db = reduce_to(&prod, &osh, &bsh);
                            accumulate(&mut grads[b.0], &bsh, &db);
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(out_shape, data), rq, back))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shadow(a), self.shadow(b));
        let v = self.binary(BinOp::Add, a, b)?;
        if let (Some(x), Some(y)) = (sa, sb) {
            if self.value(v).numel() == 1 {
                self.set_shadow(v, x + y);
            }
        }
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let shadow_in = self.shadow(a);
        let cs = T::from_f32(c);
        let t = self.value(a);
        let data: Vec<T> = t.data().iter().map(|x| *x * cs).collect();
        ensure_finite(&data, "scale")?;
        let shape = t.shape().to_vec();
        let rq = self.requires_grad(a);
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |_values, grad_out, grads| {
                let da: Vec<T> = grad_out.data().iter().map(|g| *g * cs).collect();
                accumulate(&mut grads[a.0], &shape, &da);
            }))
        } else {
            None
        };
        let v = self.push(GTensor::from_parts(shape, data), rq, back);
        if let Some(sh) = shadow_in {
            self.set_shadow(v, sh * c as f64);
        }
        Ok(v)
    }

    /// Add a compile-time constant to every element.
    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let cs = T::from_f32(c);
        let t = self.value(a);
        let data: Vec<T> = t.data().iter().map(|x| *x + cs).collect();
        ensure_finite(&data, "add_scalar")?;
        let shape = t.shape().to_vec();
        let rq = self.requires_grad(a);
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |_values, grad_out, grads| {
                accumulate(&mut grads[a.0], &shape, grad_out.data());
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(shape, data), rq, back))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<T> = t.data().iter().map(|x| x.exp()).collect();
        ensure_finite(&data, "exp")?;
        let shape = t.shape().to_vec();
        let rq = self.requires_grad(a);
        let out_id = self.len();
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |values, grad_out, grads| {
                let y = values[out_id].data();
                let da: Vec<T> = grad_out
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(g, v)| *g * *v)
                    .collect();
                accumulate(&mut grads[a.0], &shape, &da);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(shape, data), rq, back))
    }

    // -----------------------------------------------------------------------
    // matmul
    // -----------------------------------------------------------------------

    /// Batched matrix product. `a` is `[..batch, m, k]`; `b` is either
    /// `[k, n]` (shared across the batch) or `[..batch, k, n]` with the same
    /// leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_shape = self.value(a).shape().to_vec();
        let b_shape = self.value(b).shape().to_vec();
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2, got {a_shape:?} x {b_shape:?}"
            )));
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (bk, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != bk {
            return Err(Error::shape(format!(
                "matmul inner dims disagree: {a_shape:?} x {b_shape:?}"
            )));
        }
        let a_batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        let b_shared = b_shape.len() == 2;
        if !b_shared && a_shape[..a_shape.len() - 2] != b_shape[..b_shape.len() - 2] {
            return Err(Error::shape(format!(
                "matmul batch dims disagree: {a_shape:?} x {b_shape:?}"
            )));
        }
        let mut out_shape = a_shape[..a_shape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![T::ZERO; a_batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..a_batch {
                let a_sl = &ad[bi * m * k..(bi + 1) * m * k];
                let b_sl = if b_shared {
                    bd
                } else {
                    &bd[bi * k * n..(bi + 1) * k * n]
                };
                mm_accum(&mut data[bi * m * n..(bi + 1) * m * n], a_sl, b_sl, m, k, n);
            }
        }
        ensure_finite(&data, "matmul")?;
        let a_rq = self.requires_grad(a);
        let b_rq = self.requires_grad(b);
        let rq = a_rq || b_rq;
        let back: Option<BackFn<T>> = if rq {
            let (ash, bsh) = (a_shape.clone(), b_shape.clone());
            Some(Box::new(move |values, grad_out, grads| {
                let g = grad_out.data();
                if a_rq {
                    // dA = dC * B^T
                    let bd = values[b.0].data();
                    let mut da = vec![T::ZERO; a_batch * m * k];
                    for bi in 0..a_batch {
                        let b_sl = if b_shared {
                            bd
                        } else {
                            &bd[bi * k * n..(bi + 1) * k * n]
                        };
                        mm_accum_nt(
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            b_sl,
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(&mut grads[a.0], &ash, &da);
                }
                if b_rq {
                    // dB = A^T * dC (summed over the batch when B is shared)
                    let ad = values[a.0].data();
                    let mut db = vec![T::ZERO; if b_shared { k * n } else { a_batch * k * n }];
                    for bi in 0..a_batch {
                        let db_sl = if b_shared {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        mm_accum_tn(
                            db_sl,
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(&mut grads[b.0], &bsh, &db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(out_shape, data), rq, back))
    }

    // -----------------------------------------------------------------------
    // shape ops
    // -----------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                t.shape()
            )));
        }
        let data = t.data().to_vec();
        let rq = self.requires_grad(a);
        let a_shape = t.shape().to_vec();
        let back: Option<BackFn<T>> = if rq {
            Some(Box::new(move |_values, grad_out, grads| {
                accumulate(&mut grads[a.0], &a_shape, grad_out.data());
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(shape, data), rq, back))
    }

    /// Permute axes. `perm[i]` names the source axis that lands at axis `i`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        if perm.len() != rank {
            return Err(Error::shape(format!(
                "permute {perm:?} does not match rank {rank}"
            )));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let in_shape = t.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides(&in_shape);
        let n = t.numel();
        let mut data = vec![T::ZERO; n];
        let src = t.data();
        let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut coords = vec![0usize; rank];
        let mut off = 0usize;
        for slot in data.iter_mut() {
            *slot = src[off];
            for d in (0..rank).rev() {
                coords[d] += 1;
                off += perm_strides[d];
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
                off -= perm_strides[d] * out_shape[d];
            }
        }
        let rq = self.requires_grad(a);
        let back: Option<BackFn<T>> = if rq {
            let mut inv = vec![0usize; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let out_strides = strides(&out_shape);
            let inv_strides: Vec<usize> = inv.iter().map(|&p| out_strides[p]).collect();
            let in_shape_c = in_shape.clone();
            Some(Box::new(move |_values, grad_out, grads| {
                let g = grad_out.data();
                let mut da = vec![T::ZERO; g.len()];
                let rank = in_shape_c.len();
                let mut coords = vec![0usize; rank];
                let mut off = 0usize;
                for slot in da.iter_mut() {
                    *slot = g[off];
                    for d in (0..rank).rev() {
                        coords[d] += 1;
                        off += inv_strides[d];
                        if coords[d] < in_shape_c[d] {
                            break;
                        }
                        coords[d] = 0;
                        off -= inv_strides[d] * in_shape_c[d];
                    }
                }
                accumulate(&mut grads[a.0], &in_shape_c, &da);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(out_shape, data), rq, back))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2".to_string()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Concatenate along an axis. All parts must agree on every other axis.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero parts".to_string()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank {
                return Err(Error::shape("concat rank mismatch".to_string()));
            }
            for d in 0..rank {
                if d != axis && s[d] != first[d] {
                    return Err(Error::shape(format!(
                        "concat shape mismatch on axis {d}: {s:?} vs {first:?}"
                    )));
                }
            }
            axis_lens.push(s[axis]);
        }
        let total: usize = axis_lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::ZERO; outer * total * inner];
        let mut offset = 0usize;
        for (&p, &len) in parts.iter().zip(&axis_lens) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_start = (o * total + offset) * inner;
                let src_start = o * len * inner;
                data[dst_start..dst_start + len * inner]
                    .copy_from_slice(&src[src_start..src_start + len * inner]);
            }
            offset += len;
        }
        let rqs: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let rq = rqs.iter().any(|&r| r);
        let back: Option<BackFn<T>> = if rq {
            let parts = parts.to_vec();
            let shapes: Vec<Vec<usize>> =
                parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            Some(Box::new(move |_values, grad_out, grads| {
                let g = grad_out.data();
                let mut offset = 0usize;
                for ((&p, len), (shape, rq)) in
                    parts.iter().zip(&axis_lens).zip(shapes.iter().zip(&rqs))
                {
                    if *rq {
                        let mut da = vec![T::ZERO; outer * len * inner];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            let dst_start = o * len * inner;
                            da[dst_start..dst_start + len * inner]
                                .copy_from_slice(&g[src_start..src_start + len * inner]);
                        }
                        accumulate(&mut grads[p.0], shape, &da);
                    }
                    offset += len;
                }
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(out_shape, data), rq, back))
    }

    /// Arbitrary element gather: `out[i] = a[map[i]]`, with `u32::MAX`
    /// meaning "structural zero" (used for convolution padding).
    pub fn gather(&mut self, a: Var, map: Rc<Vec<u32>>, out_shape: Vec<usize>) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != map.len() {
            return Err(Error::shape(format!(
                "gather map has {} entries for shape {out_shape:?}",
                map.len()
            )));
        }
        let t = self.value(a);
        let src = t.data();
        let src_len = src.len();
        let mut data = vec![T::ZERO; n];
        for (slot, &idx) in data.iter_mut().zip(map.iter()) {
            if idx != u32::MAX {
                debug_assert!((idx as usize) < src_len);
                *slot = src[idx as usize];
            }
        }
        let rq = self.requires_grad(a);
        let a_shape = t.shape().to_vec();
        let back: Option<BackFn<T>> = if rq {
            let map = Rc::clone(&map);
            Some(Box::new(move |_values, grad_out, grads| {
                let g = grad_out.data();
                let mut da = vec![T::ZERO; a_shape.iter().product()];
                for (gv, &idx) in g.iter().zip(map.iter()) {
                    if idx != u32::MAX {
                        da[idx as usize] += *gv;
                    }
                }
                accumulate(&mut grads[a.0], &a_shape, &da);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(out_shape, data), rq, back))
    }

    /// Row gather from an embedding table `[vocab, dim]` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_prefix: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding table must be rank 2".to_string()));
        }
        let vocab = t.shape()[0];
        let dim = t.shape()[1];
        let prefix: usize = out_prefix.iter().product();
        if prefix != ids.len() {
            return Err(Error::shape(format!(
                "embedding ids {} vs prefix {out_prefix:?}",
                ids.len()
            )));
        }
        for &id in ids {
            if id >= vocab {
                return Err(Error::config(format!("token id {id} >= vocab {vocab}")));
            }
        }
        let mut data = vec![T::ZERO; ids.len() * dim];
        let src = t.data();
        for (row, &id) in ids.iter().enumerate() {
            data[row * dim..(row + 1) * dim].copy_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let mut out_shape = out_prefix.to_vec();
        out_shape.push(dim);
        let rq = self.requires_grad(table);
        let back: Option<BackFn<T>> = if rq {
            let ids = ids.to_vec();
            let t_shape = t.shape().to_vec();
            Some(Box::new(move |_values, grad_out, grads| {
                let g = grad_out.data();
                let mut dt = vec![T::ZERO; vocab * dim];
                for (row, &id) in ids.iter().enumerate() {
                    for d in 0..dim {
                        dt[id * dim + d] += g[row * dim + d];
                    }
                }
                accumulate(&mut grads[table.0], &t_shape, &dt);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(out_shape, data), rq, back))
    }

    // -----------------------------------------------------------------------
    // reductions
    // -----------------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let acc: f64 = t.data().iter().map(|x| x.to_f64()).sum();
        let s = T::from_f64(acc);
        ensure_finite(&[s], "sum")?;
        let rq = self.requires_grad(a);
        let a_shape = t.shape().to_vec();
        let back: Option<BackFn<T>> = if rq {
            Some(Box::new(move |_values, grad_out, grads| {
                let g = grad_out.data()[0];
                let n: usize = a_shape.iter().product();
                let da = vec![g; n];
                accumulate(&mut grads[a.0], &a_shape, &da);
            }))
        } else {
            None
        };
        let v = self.push(GTensor::scalar(s), rq, back);
        self.set_shadow(v, acc);
        Ok(v)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Mean along one axis, keeping it as length 1 (so the result broadcasts
    /// back against the input).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("mean axis {axis} out of range")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut data = vec![T::ZERO; outer * inner];
        let src = t.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = T::from_f64(1.0 / len as f64);
        for v in data.iter_mut() {
            *v *= inv;
        }
        ensure_finite(&data, "mean_axis")?;
        let rq = self.requires_grad(a);
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |_values, grad_out, grads| {
                let g = grad_out.data();
                let mut da = vec![T::ZERO; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            da[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                accumulate(&mut grads[a.0], &shape, &da);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(out_shape, data), rq, back))
    }

    // -----------------------------------------------------------------------
    // nonlinearities and normalization
    // -----------------------------------------------------------------------

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut data = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = src[(o * len) * inner + i];
                for l in 1..len {
                    mx = mx.maximum(src[(o * len + l) * inner + i]);
                }
                let mut denom = T::ZERO;
                for l in 0..len {
                    let e = (src[(o * len + l) * inner + i] - mx).exp();
                    data[(o * len + l) * inner + i] = e;
                    denom += e;
                }
                let inv = denom.recip();
                for l in 0..len {
                    data[(o * len + l) * inner + i] *= inv;
                }
            }
        }
        ensure_finite(&data, "softmax")?;
        let rq = self.requires_grad(a);
        let out_id = self.len();
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |values, grad_out, grads| {
                let y = values[out_id].data();
                let g = grad_out.data();
                let mut da = vec![T::ZERO; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = T::ZERO;
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            dot += g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            da[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                accumulate(&mut grads[a.0], &shape, &da);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(shape, data), rq, back))
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    /// Zero-variance rows are handled by the epsilon, not an error.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm on rank-0".to_string()))?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let rows = t.numel() / d;
        let src = t.data();
        let gd = self.value(gain).data().to_vec();
        let bd = self.value(bias).data().to_vec();
        let mut data = vec![T::ZERO; src.len()];
        let mut xhat = vec![T::ZERO; src.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f32(LAYER_NORM_EPS);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &x in row {
                mean += x;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &x in row {
                var += (x - mean) * (x - mean);
            }
            var *= inv_d;
            let istd = (var + eps).sqrt().recip();
            inv_std[r] = istd;
            for i in 0..d {
                let xh = (row[i] - mean) * istd;
                xhat[r * d + i] = xh;
                data[r * d + i] = gd[i] * xh + bd[i];
            }
        }
        ensure_finite(&data, "layer_norm")?;
        let a_rq = self.requires_grad(a);
        let g_rq = self.requires_grad(gain);
        let b_rq = self.requires_grad(bias);
        let rq = a_rq || g_rq || b_rq;
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |values, grad_out, grads| {
                let g = grad_out.data();
                let gain_d = values[gain.0].data();
                if a_rq {
                    let mut da = vec![T::ZERO; g.len()];
                    for r in 0..rows {
                        let istd = inv_std[r];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for i in 0..d {
                            let dxh = gr[i] * gain_d[i];
                            s1 += dxh;
                            s2 += dxh * xh[i];
                        }
                        s1 *= inv_d;
                        s2 *= inv_d;
                        for i in 0..d {
                            let dxh = gr[i] * gain_d[i];
                            da[r * d + i] = istd * (dxh - s1 - xh[i] * s2);
                        }
                    }
                    accumulate(&mut grads[a.0], &shape, &da);
                }
                if g_rq {
                    let mut dgain = vec![T::ZERO; d];
                    for r in 0..rows {
                        for i in 0..d {
                            dgain[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                    accumulate(&mut grads[gain.0], &[d], &dgain);
                }
                if b_rq {
                    let mut dbias = vec![T::ZERO; d];
                    for r in 0..rows {
                        for i in 0..d {
                            dbias[i] += g[r * d + i];
                        }
                    }
                    accumulate(&mut grads[bias.0], &[d], &dbias);
                }
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(shape, data), rq, back))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::from_f32(0.797_884_56); // sqrt(2/pi)
        let kk = T::from_f32(0.044_715);
        let half = T::from_f32(0.5);
        let three = T::from_f32(3.0);
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data: Vec<T> = t
            .data()
            .iter()
            .map(|&x| {
                let inner = c * (x + kk * x * x * x);
                half * x * (T::ONE + inner.tanh())
            })
            .collect();
        ensure_finite(&data, "gelu")?;
        let rq = self.requires_grad(a);
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |values, grad_out, grads| {
                let x = values[a.0].data();
                let g = grad_out.data();
                let da: Vec<T> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let inner = c * (x + kk * x * x * x);
                        let th = inner.tanh();
                        let sech2 = T::ONE - th * th;
                        let d_inner = c * (T::ONE + three * kk * x * x);
                        g * (half * (T::ONE + th) + half * x * sech2 * d_inner)
                    })
                    .collect();
                accumulate(&mut grads[a.0], &shape, &da);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(shape, data), rq, back))
    }

    /// SiLU (x * sigmoid(x)).
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data: Vec<T> = t
            .data()
            .iter()
            .map(|&x| x * (T::ONE + (-x).exp()).recip())
            .collect();
        ensure_finite(&data, "silu")?;
        let rq = self.requires_grad(a);
        let back: Option<BackFn<T>> = if rq {
            let shape = shape.clone();
            Some(Box::new(move |values, grad_out, grads| {
                let x = values[a.0].data();
                let g = grad_out.data();
                let da: Vec<T> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let s = (T::ONE + (-x).exp()).recip();
                        g * (s * (T::ONE + x * (T::ONE - s)))
                    })
                    .collect();
                accumulate(&mut grads[a.0], &shape, &da);
            }))
        } else {
            None
        };
        Ok(self.push(GTensor::from_parts(shape, data), rq, back))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{SplitMix64, Tensor};

    fn leaf(tape: &mut Tape<f32>, shape: &[usize], rng: &mut SplitMix64) -> Var {
        tape.leaf(Tensor::randn(shape, 1.0, rng).with_grad())
    }

    /// Naive triple-loop product used as the independent matmul oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
                out[i * n + j] = s;
            }
        }
        Tensor::from_parts(vec![m, n], out.into_iter().map(|x| x as f32).collect())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let m =
            tape.constant(Tensor::new(vec![3, 3], (1..=9).map(|x| x as f32).collect()).unwrap());
        let out = tape.matmul(eye, m).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(m)));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let expect = matmul_oracle(&a, &b);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let out = tape.matmul(av, bv).unwrap();
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..5 {
            let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let c = Tensor::randn(&[5, 2], 1.0, &mut rng);
            let mut tape = Tape::new();
            let (av, bv, cv) = (tape.constant(a), tape.constant(b), tape.constant(c));
            let ab = tape.matmul(av, bv).unwrap();
            let ab_c = tape.matmul(ab, cv).unwrap();
            let bc = tape.matmul(bv, cv).unwrap();
            let a_bc = tape.matmul(av, bc).unwrap();
            assert!(tape.value(ab_c).max_abs_diff(tape.value(a_bc)) < 1e-5);
        }
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!(d[1] >= 0.0 && d[1] < 1e-6);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut rng = SplitMix64::new(17);
        let x = Tensor::randn(&[8], 2.0, &mut rng);
        let mx = x.data().iter().cloned().fold(f32::MIN, f32::max) as f64;
        let exps: Vec<f64> = x.data().iter().map(|&v| ((v as f64) - mx).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let expect: Vec<f32> = exps.iter().map(|e| (e / denom) as f32).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::new(23);
        let x = Tensor::randn(&[4, 7], 3.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1).unwrap();
        let d = tape.value(y).data();
        for r in 0..4 {
            let s: f32 = d[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for &v in &d[r * 7..(r + 1) * 7] {
                assert!(v > 0.0 && v <= 1.0);
            }
        }
    }

    #[test]
    fn layer_norm_zero_variance_uses_epsilon() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[4], 3.0));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-4);
        assert!((d[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_statistics_hold() {
        let mut rng = SplitMix64::new(31);
        let x = Tensor::randn(&[6, 16], 2.5, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = tape.layer_norm(xv, g, b).unwrap();
        let d = tape.value(y).data();
        for r in 0..6 {
            let row = &d[r * 16..(r + 1) * 16];
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn broadcast_add_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![10., 20., 30.]).unwrap());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn broadcast_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2, 2], vec![1.; 8]).unwrap());
        let s = tape.constant(Tensor::new(vec![2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = tape.mul(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 1., 2., 3., 4., 3., 4.]);
    }

    #[test]
    fn concat_and_grad_split() {
        let mut rng = SplitMix64::new(3);
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], &mut rng);
        let b = leaf(&mut tape, &[2, 3], &mut rng);
        let c = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 5]);
        let s = tape.sum_all(c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = SplitMix64::new(41);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = tape.permute(xv, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert!(tape.value(back).bit_eq(&x));
    }

    #[test]
    fn gather_with_padding_sentinel() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap().with_grad());
        let map = Rc::new(vec![2u32, u32::MAX, 0u32, 0u32]);
        let out = tape.gather(a, map, vec![4]).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, 0.0, 5.0, 5.0]);
        let s = tape.sum_all(out).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn determinism_same_seed_same_results() {
        let run = || {
            let mut rng = SplitMix64::new(99);
            let mut tape = Tape::new();
            let a = leaf(&mut tape, &[4, 4], &mut rng);
            let b = leaf(&mut tape, &[4, 4], &mut rng);
            let c = tape.matmul(a, b).unwrap();
            let d = tape.gelu(c).unwrap();
            let s = tape.mean_all(d).unwrap();
            tape.value(s).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1e30));
        let b = tape.constant(Tensor::full(&[2], 1e30));
        // 1e30 * 1e30 overflows f32
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn f64_instantiation_matches_f32_values_closely() {
        // the same ops at f64 stay within f32 rounding of the f32 results
        let mut rng32 = SplitMix64::new(7);
        let mut rng64 = SplitMix64::new(7);
        let a32 = Tensor::randn(&[4, 6], 1.0, &mut rng32);
        let b32 = Tensor::randn(&[6, 3], 1.0, &mut rng32);
        let a64: GTensor<f64> = GTensor::randn(&[4, 6], 1.0, &mut rng64);
        let b64: GTensor<f64> = GTensor::randn(&[6, 3], 1.0, &mut rng64);
        let mut t32 = Tape::<f32>::new();
        let mut t64 = Tape::<f64>::new();
        let (x32, y32) = (t32.constant(a32), t32.constant(b32));
        let (x64, y64) = (t64.constant(a64), t64.constant(b64));
        let m32 = t32.matmul(x32, y32).unwrap();
        let m64 = t64.matmul(x64, y64).unwrap();
        let g32 = t32.gelu(m32).unwrap();
        let g64 = t64.gelu(m64).unwrap();
        for (a, b) in t32.value(g32).data().iter().zip(t64.value(g64).data()) {
            assert!((a.to_f64() - b).abs() < 1e-5);
        }
    }
}
