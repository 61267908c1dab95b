//! Differentiable ops over 1-D/2-D tensors and scalars.
//!
//! Every op computes its value eagerly and registers a closure that maps
//! the upstream gradient to parent contributions. Shape violations panic
//! with the op name and both shapes. Attention and the soft review bridge
//! are composed entirely from these primitives, so the gradient check on
//! this file covers the whole model.

use rand::Rng;

use super::kernel;
use super::tensor::{shape_check, Elem, Tensor};

impl<E: Elem> Tensor<E> {
    fn rows(&self) -> usize {
        self.shape()[0]
    }

    fn cols(&self) -> usize {
        self.shape()[1]
    }

    fn assert_rank(&self, rank: usize, op: &str) {
        assert_eq!(
            self.shape().len(),
            rank,
            "{op}: expected rank {rank}, got shape {:?}",
            self.shape()
        );
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, rhs: &Tensor<E>) -> Tensor<E> {
        shape_check(self.shape() == rhs.shape(), "add", self.shape(), rhs.shape());
        let vals: Vec<E> = self
            .values()
            .iter()
            .zip(rhs.values().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone(), b.clone()], move |g| {
            a.accum_grad(g);
            b.accum_grad(g);
        })
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, rhs: &Tensor<E>) -> Tensor<E> {
        shape_check(self.shape() == rhs.shape(), "sub", self.shape(), rhs.shape());
        let vals: Vec<E> = self
            .values()
            .iter()
            .zip(rhs.values().iter())
            .map(|(a, b)| *a - *b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone(), b.clone()], move |g| {
            a.accum_grad(g);
            let neg: Vec<E> = g.iter().map(|v| -*v).collect();
            b.accum_grad(&neg);
        })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        shape_check(self.shape() == rhs.shape(), "mul", self.shape(), rhs.shape());
        let vals: Vec<E> = self
            .values()
            .iter()
            .zip(rhs.values().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone(), b.clone()], move |g| {
            let da: Vec<E> = g.iter().zip(b.values().iter()).map(|(g, b)| *g * *b).collect();
            a.accum_grad(&da);
            let db: Vec<E> = g.iter().zip(a.values().iter()).map(|(g, a)| *g * *a).collect();
            b.accum_grad(&db);
        })
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: E) -> Tensor<E> {
        let vals: Vec<E> = self.values().iter().map(|v| *v * c).collect();
        let a = self.clone();
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone()], move |g| {
            let da: Vec<E> = g.iter().map(|v| *v * c).collect();
            a.accum_grad(&da);
        })
    }

    /// `[t,d] + [d]`: adds `bias` to every row.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Tensor<E> {
        self.assert_rank(2, "add_bias");
        shape_check(
            bias.shape() == [self.cols()],
            "add_bias",
            self.shape(),
            bias.shape(),
        );
        let d = self.cols();
        let vals: Vec<E> = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bias.values()[i % d])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone(), b.clone()], move |g| {
            a.accum_grad(g);
            let mut db = vec![E::ZERO; d];
            for (i, v) in g.iter().enumerate() {
                db[i % d] += *v;
            }
            b.accum_grad(&db);
        })
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        self.assert_rank(2, "matmul");
        rhs.assert_rank(2, "matmul");
        shape_check(
            self.cols() == rhs.rows(),
            "matmul",
            self.shape(),
            rhs.shape(),
        );
        let (m, k, n) = (self.rows(), self.cols(), rhs.cols());
        let vals = kernel::matmul(&self.values(), &rhs.values(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::op(vec![m, n], vals, vec![a.clone(), b.clone()], move |g| {
            // Materializing the transposes and reusing the tiled kernel beats
            // transpose-free dot/axpy forms here: the O(mn) copy is cheap and
            // the kernel's broadcast-FMA pattern vectorizes far better.
            let bt = kernel::transpose(&b.values(), k, n);
            a.accum_grad(&kernel::matmul(g, &bt, m, n, k));
            let at = kernel::transpose(&a.values(), m, k);
            b.accum_grad(&kernel::matmul(&at, g, k, m, n));
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor<E> {
        self.assert_rank(2, "transpose");
        let (m, n) = (self.rows(), self.cols());
        let vals = kernel::transpose(&self.values(), m, n);
        let a = self.clone();
        Tensor::op(vec![n, m], vals, vec![a.clone()], move |g| {
            a.accum_grad(&kernel::transpose(g, n, m));
        })
    }

    /// Row-wise softmax of a `[t,s]` tensor, max-subtracted for stability.
    pub fn softmax_rows(&self) -> Tensor<E> {
        self.assert_rank(2, "softmax_rows");
        let (t, s) = (self.rows(), self.cols());
        let x = self.values();
        let mut vals = vec![E::ZERO; t * s];
        for i in 0..t {
            let row = &x[i * s..(i + 1) * s];
            let mut mx = row[0];
            for v in row {
                mx = mx.maximum(*v);
            }
            let mut denom = E::ZERO;
            for (j, v) in row.iter().enumerate() {
                let e = (*v - mx).exp();
                vals[i * s + j] = e;
                denom += e;
            }
            for j in 0..s {
                vals[i * s + j] = vals[i * s + j] / denom;
            }
        }
        drop(x);
        let y = vals.clone();
        let a = self.clone();
        Tensor::op(vec![t, s], vals, vec![a.clone()], move |g| {
            let mut dx = vec![E::ZERO; t * s];
            for i in 0..t {
                let mut dot = E::ZERO;
                for j in 0..s {
                    dot += g[i * s + j] * y[i * s + j];
                }
                for j in 0..s {
                    dx[i * s + j] = y[i * s + j] * (g[i * s + j] - dot);
                }
            }
            a.accum_grad(&dx);
        })
    }

    /// Scaled-dot-product attention over `n_heads` column blocks in one
    /// graph node: per head `softmax(q_h k_h^T * scale + mask) v_h`, heads
    /// written back to their column blocks. Equivalent to composing
    /// slice/matmul/scale/add/softmax/concat per head, but the per-head
    /// intermediates never become graph nodes; only the softmax outputs are
    /// kept for the backward pass.
    pub fn attention_heads(
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
        n_heads: usize,
        scale: E,
        mask: Option<&Tensor<E>>,
    ) -> Tensor<E> {
        q.assert_rank(2, "attention_heads");
        k.assert_rank(2, "attention_heads");
        v.assert_rank(2, "attention_heads");
        let (tq, d) = (q.rows(), q.cols());
        let tk = k.rows();
        shape_check(
            k.cols() == d && v.cols() == d && v.rows() == tk,
            "attention_heads",
            q.shape(),
            k.shape(),
        );
        assert!(
            n_heads > 0 && d % n_heads == 0,
            "attention_heads: width {d} not divisible into {n_heads} heads"
        );
        if let Some(m) = mask {
            shape_check(
                m.shape() == [tq, tk],
                "attention_heads",
                m.shape(),
                &[tq, tk],
            );
        }
        let dh = d / n_heads;

        let slice_block = move |x: &[E], rows: usize, h: usize| -> Vec<E> {
            let mut out = Vec::with_capacity(rows * dh);
            for i in 0..rows {
                out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
            }
            out
        };

        let qv = q.values();
        let kv = k.values();
        let vv = v.values();
        let mv = mask.map(|m| m.to_vec());
        let mut out = vec![E::ZERO; tq * d];
        let mut probs = vec![E::ZERO; n_heads * tq * tk];
        for h in 0..n_heads {
            let qh = slice_block(&qv, tq, h);
            let kh = slice_block(&kv, tk, h);
            let vh = slice_block(&vv, tk, h);
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            kernel::matmul_acc(&qh, &kernel::transpose(&kh, tk, dh), p, tq, dh, tk);
            for (i, row) in p.chunks_exact_mut(tk).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s = *s * scale;
                    if let Some(m) = &mv {
                        *s += m[i * tk + j];
                    }
                }
                let mut mx = row[0];
                for s in row.iter() {
                    mx = mx.maximum(*s);
                }
                let mut denom = E::ZERO;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    denom += *s;
                }
                for s in row.iter_mut() {
                    *s = *s / denom;
                }
            }
            let oh = kernel::matmul(p, &vh, tq, tk, dh);
            for i in 0..tq {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        drop(qv);
        drop(kv);
        drop(vv);

        let mut parents = vec![q.clone(), k.clone(), v.clone()];
        if let Some(m) = mask {
            parents.push(m.clone());
        }
        let (q, k, v) = (q.clone(), k.clone(), v.clone());
        let mask = mask.cloned();
        Tensor::op(vec![tq, d], out, parents, move |g| {
            let qv = q.values();
            let kv = k.values();
            let vv = v.values();
            let mut gq = vec![E::ZERO; tq * d];
            let mut gk = vec![E::ZERO; tk * d];
            let mut gv = vec![E::ZERO; tk * d];
            let want_gm = mask.as_ref().is_some_and(|m| m.requires_grad());
            let mut gm = if want_gm { vec![E::ZERO; tq * tk] } else { Vec::new() };
            for h in 0..n_heads {
                let qh = slice_block(&qv, tq, h);
                let kh = slice_block(&kv, tk, h);
                let vh = slice_block(&vv, tk, h);
                let goh = slice_block(g, tq, h);
                let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                // dL/dp, then softmax backward; the mask sits after the
                // scale, so it sees the gradient before the scale chain.
                let mut ds = kernel::matmul(&goh, &kernel::transpose(&vh, tk, dh), tq, dh, tk);
                for i in 0..tq {
                    let prow = &p[i * tk..(i + 1) * tk];
                    let drow = &mut ds[i * tk..(i + 1) * tk];
                    let mut dot = E::ZERO;
                    for (dj, pj) in drow.iter().zip(prow) {
                        dot += *dj * *pj;
                    }
                    for (dj, pj) in drow.iter_mut().zip(prow) {
                        *dj = *pj * (*dj - dot);
                    }
                }
                if want_gm {
                    for (a, b) in gm.iter_mut().zip(&ds) {
                        *a += *b;
                    }
                }
                for dj in ds.iter_mut() {
                    *dj = *dj * scale;
                }
                let gvh = kernel::matmul(&kernel::transpose(p, tq, tk), &goh, tk, tq, dh);
                let gqh = kernel::matmul(&ds, &kh, tq, tk, dh);
                let gkh = kernel::matmul(&kernel::transpose(&ds, tq, tk), &qh, tk, tq, dh);
                for i in 0..tq {
                    gq[i * d + h * dh..i * d + (h + 1) * dh]
                        .copy_from_slice(&gqh[i * dh..(i + 1) * dh]);
                }
                for i in 0..tk {
                    gk[i * d + h * dh..i * d + (h + 1) * dh]
                        .copy_from_slice(&gkh[i * dh..(i + 1) * dh]);
                    gv[i * d + h * dh..i * d + (h + 1) * dh]
                        .copy_from_slice(&gvh[i * dh..(i + 1) * dh]);
                }
            }
            drop(qv);
            drop(kv);
            drop(vv);
            q.accum_grad(&gq);
            k.accum_grad(&gk);
            v.accum_grad(&gv);
            if want_gm {
                mask.as_ref().unwrap().accum_grad(&gm);
            }
        })
    }

    /// `ln(max(x, floor))`; clamped positions get zero gradient. Returns
    /// the op and how many elements hit the floor.
    pub fn ln_clamped(&self, floor: E) -> (Tensor<E>, usize) {
        let x = self.to_vec();
        let clamped = x.iter().filter(|v| **v < floor).count();
        // Clamp only on a true comparison so non-finite inputs surface in
        // the output instead of being silently floored.
        let vals: Vec<E> = x
            .iter()
            .map(|v| if *v < floor { floor.ln() } else { v.ln() })
            .collect();
        let a = self.clone();
        let out = Tensor::op(self.shape().to_vec(), vals, vec![a.clone()], move |g| {
            let dx: Vec<E> = g
                .iter()
                .zip(x.iter())
                .map(|(g, v)| if *v < floor { E::ZERO } else { *g / *v })
                .collect();
            a.accum_grad(&dx);
        });
        (out, clamped)
    }

    /// Picks `x[t, idx[t]]` from a `[t,v]` tensor: `-> [t]`.
    pub fn gather_index(&self, idx: &[u32]) -> Tensor<E> {
        self.assert_rank(2, "gather_index");
        shape_check(
            idx.len() == self.rows(),
            "gather_index",
            self.shape(),
            &[idx.len()],
        );
        let v = self.cols();
        for (t, &i) in idx.iter().enumerate() {
            assert!(
                (i as usize) < v,
                "gather_index: index {i} at row {t} out of vocabulary {v}"
            );
        }
        let x = self.values();
        let vals: Vec<E> = idx
            .iter()
            .enumerate()
            .map(|(t, &i)| x[t * v + i as usize])
            .collect();
        drop(x);
        let idx = idx.to_vec();
        let a = self.clone();
        let rows = self.rows();
        Tensor::op(vec![rows], vals, vec![a.clone()], move |g| {
            let mut dx = vec![E::ZERO; rows * v];
            for (t, &i) in idx.iter().enumerate() {
                dx[t * v + i as usize] = g[t];
            }
            a.accum_grad(&dx);
        })
    }

    /// Mask-weighted mean of a vector: `sum(x * m) / sum(m)`.
    pub fn masked_mean(&self, mask: &[E]) -> Tensor<E> {
        self.assert_rank(1, "masked_mean");
        shape_check(
            mask.len() == self.len(),
            "masked_mean",
            self.shape(),
            &[mask.len()],
        );
        let mut denom = E::ZERO;
        for m in mask {
            denom += *m;
        }
        assert!(denom > E::ZERO, "masked_mean: mask selects no positions");
        let mut acc = E::ZERO;
        for (v, m) in self.values().iter().zip(mask) {
            acc += *v * *m;
        }
        let mask = mask.to_vec();
        let a = self.clone();
        Tensor::op(vec![1], vec![acc / denom], vec![a.clone()], move |g| {
            let dx: Vec<E> = mask.iter().map(|m| g[0] * *m / denom).collect();
            a.accum_grad(&dx);
        })
    }

    /// Mask-weighted mean over rows of `[t,d]`: `-> [d]`.
    pub fn masked_mean_rows(&self, mask: &[E]) -> Tensor<E> {
        self.assert_rank(2, "masked_mean_rows");
        shape_check(
            mask.len() == self.rows(),
            "masked_mean_rows",
            self.shape(),
            &[mask.len()],
        );
        let (t, d) = (self.rows(), self.cols());
        let mut denom = E::ZERO;
        for m in mask {
            denom += *m;
        }
        assert!(denom > E::ZERO, "masked_mean_rows: mask selects no rows");
        let x = self.values();
        let mut vals = vec![E::ZERO; d];
        for i in 0..t {
            for j in 0..d {
                vals[j] += x[i * d + j] * mask[i];
            }
        }
        for v in &mut vals {
            *v = *v / denom;
        }
        drop(x);
        let mask = mask.to_vec();
        let a = self.clone();
        Tensor::op(vec![d], vals, vec![a.clone()], move |g| {
            let mut dx = vec![E::ZERO; t * d];
            for i in 0..t {
                for j in 0..d {
                    dx[i * d + j] = g[j] * mask[i] / denom;
                }
            }
            a.accum_grad(&dx);
        })
    }

    /// Sum of all elements: `-> scalar`.
    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for v in self.values().iter() {
            acc += *v;
        }
        let n = self.len();
        let a = self.clone();
        Tensor::op(vec![1], vec![acc], vec![a.clone()], move |g| {
            a.accum_grad(&vec![g[0]; n]);
        })
    }

    /// Arithmetic mean of all elements: `-> scalar`.
    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.len() as f64);
        self.sum_all().scale(E::ONE / n)
    }

    /// Mean squared error against a same-shape tensor: `-> scalar`.
    pub fn mse(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let d = self.sub(rhs);
        d.mul(&d).mean_all()
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
        let a3 = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let x = self.to_vec();
        // The tanh values are kept for the backward pass; recomputing them
        // there costs more than carrying the extra buffer.
        let t: Vec<E> = x.iter().map(|&v| (c * (v + a3 * v * v * v)).tanh()).collect();
        let vals: Vec<E> = x
            .iter()
            .zip(&t)
            .map(|(&v, &t)| half * v * (E::ONE + t))
            .collect();
        let a = self.clone();
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone()], move |g| {
            let three = E::from_f64(3.0);
            let mut dx = vec![E::ZERO; x.len()];
            for ((d, g), (&v, &t)) in dx.iter_mut().zip(g).zip(x.iter().zip(&t)) {
                let du = c * (E::ONE + three * a3 * v * v);
                *d = *g * (half * (E::ONE + t) + half * v * (E::ONE - t * t) * du);
            }
            a.accum_grad(&dx);
        })
    }

    /// Rectified linear unit; gradient is zero at the kink.
    pub fn relu(&self) -> Tensor<E> {
        let x = self.to_vec();
        let vals: Vec<E> = x.iter().map(|&v| v.maximum(E::ZERO)).collect();
        let a = self.clone();
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone()], move |g| {
            let dx: Vec<E> = g
                .iter()
                .zip(x.iter())
                .map(|(g, &v)| if v > E::ZERO { *g } else { E::ZERO })
                .collect();
            a.accum_grad(&dx);
        })
    }

    /// Per-row layer norm of `[t,d]` with learned `gamma`/`beta` of `[d]`.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Tensor<E> {
        self.assert_rank(2, "layer_norm");
        shape_check(
            gamma.shape() == [self.cols()] && beta.shape() == [self.cols()],
            "layer_norm",
            self.shape(),
            gamma.shape(),
        );
        let (t, d) = (self.rows(), self.cols());
        let dn = E::from_f64(d as f64);
        let x = self.values();
        let gv = gamma.to_vec();
        let mut xhat = vec![E::ZERO; t * d];
        let mut inv_std = vec![E::ZERO; t];
        let mut vals = vec![E::ZERO; t * d];
        for i in 0..t {
            let row = &x[i * d..(i + 1) * d];
            let mut mu = E::ZERO;
            for v in row {
                mu += *v;
            }
            mu = mu / dn;
            let mut var = E::ZERO;
            for v in row {
                let c = *v - mu;
                var += c * c;
            }
            var = var / dn;
            let is = E::ONE / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                vals[i * d + j] = gv[j] * h + beta.values()[j];
            }
        }
        drop(x);
        let (a, gm, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::op(
            vec![t, d],
            vals,
            vec![a.clone(), gm.clone(), bt.clone()],
            move |g| {
                let mut dgamma = vec![E::ZERO; d];
                let mut dbeta = vec![E::ZERO; d];
                let mut dx = vec![E::ZERO; t * d];
                let gv = gm.to_vec();
                for i in 0..t {
                    // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat)
                    //         - xhat * mean(dxhat * xhat))
                    let mut mean_dh = E::ZERO;
                    let mut mean_dhh = E::ZERO;
                    for j in 0..d {
                        let gij = g[i * d + j];
                        let h = xhat[i * d + j];
                        dgamma[j] += gij * h;
                        dbeta[j] += gij;
                        let dh = gij * gv[j];
                        mean_dh += dh;
                        mean_dhh += dh * h;
                    }
                    mean_dh = mean_dh / dn;
                    mean_dhh = mean_dhh / dn;
                    for j in 0..d {
                        let h = xhat[i * d + j];
                        let dh = g[i * d + j] * gv[j];
                        dx[i * d + j] = inv_std[i] * (dh - mean_dh - h * mean_dhh);
                    }
                }
                a.accum_grad(&dx);
                gm.accum_grad(&dgamma);
                bt.accum_grad(&dbeta);
            },
        )
    }

    /// Inverted dropout: keeps with probability `1 - p` and rescales, so
    /// expectation is unchanged. `p = 0` is the identity.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Tensor<E> {
        assert!((0.0..1.0).contains(&p), "dropout: p = {p} outside [0, 1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.len())
            .map(|_| if rng.random::<f64>() < p { E::ZERO } else { keep })
            .collect();
        let vals: Vec<E> = self.values().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let a = self.clone();
        Tensor::op(self.shape().to_vec(), vals, vec![a.clone()], move |g| {
            let dx: Vec<E> = g.iter().zip(&mask).map(|(g, m)| *g * *m).collect();
            a.accum_grad(&dx);
        })
    }

    /// Columns `[start, start+len)` of a `[t,d]` tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<E> {
        self.assert_rank(2, "slice_cols");
        shape_check(
            start + len <= self.cols(),
            "slice_cols",
            self.shape(),
            &[start, len],
        );
        let (t, d) = (self.rows(), self.cols());
        let x = self.values();
        let mut vals = Vec::with_capacity(t * len);
        for i in 0..t {
            vals.extend_from_slice(&x[i * d + start..i * d + start + len]);
        }
        drop(x);
        let a = self.clone();
        Tensor::op(vec![t, len], vals, vec![a.clone()], move |g| {
            let mut dx = vec![E::ZERO; t * d];
            for i in 0..t {
                dx[i * d + start..i * d + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            a.accum_grad(&dx);
        })
    }

    /// Horizontal concatenation of same-height matrices.
    pub fn concat_cols(parts: &[Tensor<E>]) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let t = parts[0].rows();
        for p in parts {
            p.assert_rank(2, "concat_cols");
            shape_check(p.rows() == t, "concat_cols", parts[0].shape(), p.shape());
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let d: usize = widths.iter().sum();
        let mut vals = Vec::with_capacity(t * d);
        for i in 0..t {
            for p in parts {
                let w = p.cols();
                vals.extend_from_slice(&p.values()[i * w..(i + 1) * w]);
            }
        }
        let owned: Vec<Tensor<E>> = parts.to_vec();
        let handles = owned.clone();
        Tensor::op(vec![t, d], vals, owned, move |g| {
            let mut off = 0;
            for (p, &w) in handles.iter().zip(&widths) {
                let mut dp = vec![E::ZERO; t * w];
                for i in 0..t {
                    dp[i * w..(i + 1) * w].copy_from_slice(&g[i * d + off..i * d + off + w]);
                }
                p.accum_grad(&dp);
                off += w;
            }
        })
    }

    /// Vertical concatenation of same-width matrices.
    pub fn concat_rows(parts: &[Tensor<E>]) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let d = parts[0].cols();
        for p in parts {
            p.assert_rank(2, "concat_rows");
            shape_check(p.cols() == d, "concat_rows", parts[0].shape(), p.shape());
        }
        let heights: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        let t: usize = heights.iter().sum();
        let mut vals = Vec::with_capacity(t * d);
        for p in parts {
            vals.extend_from_slice(&p.values());
        }
        let owned: Vec<Tensor<E>> = parts.to_vec();
        let handles = owned.clone();
        Tensor::op(vec![t, d], vals, owned, move |g| {
            let mut off = 0;
            for (p, &h) in handles.iter().zip(&heights) {
                p.accum_grad(&g[off * d..(off + h) * d]);
                off += h;
            }
        })
    }

    /// Embedding lookup: `self` is the `[v,d]` table, `ids` select rows.
    pub fn embed(&self, ids: &[u32]) -> Tensor<E> {
        self.assert_rank(2, "embed");
        let (v, d) = (self.rows(), self.cols());
        for &i in ids {
            assert!((i as usize) < v, "embed: id {i} out of vocabulary {v}");
        }
        let x = self.values();
        let mut vals = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            vals.extend_from_slice(&x[i as usize * d..(i as usize + 1) * d]);
        }
        drop(x);
        let ids = ids.to_vec();
        let t = ids.len();
        let a = self.clone();
        Tensor::op(vec![t, d], vals, vec![a.clone()], move |g| {
            let mut dt = vec![E::ZERO; v * d];
            for (row, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[i as usize * d + j] += g[row * d + j];
                }
            }
            a.accum_grad(&dt);
        })
    }

    /// Multiplies row `i` of `[t,d]` by `scales[i]`.
    pub fn scale_rows(&self, scales: &[E]) -> Tensor<E> {
        self.assert_rank(2, "scale_rows");
        shape_check(
            scales.len() == self.rows(),
            "scale_rows",
            self.shape(),
            &[scales.len()],
        );
        let (t, d) = (self.rows(), self.cols());
        let vals: Vec<E> = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| *v * scales[i / d])
            .collect();
        let scales = scales.to_vec();
        let a = self.clone();
        Tensor::op(vec![t, d], vals, vec![a.clone()], move |g| {
            let dx: Vec<E> = g
                .iter()
                .enumerate()
                .map(|(i, v)| *v * scales[i / d])
                .collect();
            a.accum_grad(&dx);
        })
    }

    /// Row-wise argmax one-hot with a straight-through gradient: forward
    /// snaps each row of `[t,v]` to a hard one-hot (ties to the lowest
    /// index), backward passes the upstream gradient unchanged.
    pub fn hard_onehot_st(&self) -> Tensor<E> {
        self.assert_rank(2, "hard_onehot_st");
        let (t, v) = (self.rows(), self.cols());
        let x = self.values();
        let mut vals = vec![E::ZERO; t * v];
        for i in 0..t {
            let row = &x[i * v..(i + 1) * v];
            let mut best = 0;
            for (j, val) in row.iter().enumerate() {
                if *val > row[best] {
                    best = j;
                }
            }
            vals[i * v + best] = E::ONE;
        }
        drop(x);
        let a = self.clone();
        Tensor::op(vec![t, v], vals, vec![a.clone()], move |g| {
            a.accum_grad(g);
        })
    }

    /// Weighted sum of scalar tensors: `-> scalar`.
    pub fn linear_combination(terms: &[(E, Tensor<E>)]) -> Tensor<E> {
        assert!(!terms.is_empty(), "linear_combination: no terms");
        let mut acc = E::ZERO;
        for (w, t) in terms {
            assert_eq!(t.len(), 1, "linear_combination: non-scalar term {:?}", t.shape());
            acc += *w * t.value();
        }
        let weights: Vec<E> = terms.iter().map(|(w, _)| *w).collect();
        let parents: Vec<Tensor<E>> = terms.iter().map(|(_, t)| t.clone()).collect();
        let handles = parents.clone();
        Tensor::op(vec![1], vec![acc], parents, move |g| {
            for (p, w) in handles.iter().zip(&weights) {
                p.accum_grad(&[*w * g[0]]);
            }
        })
    }
}
