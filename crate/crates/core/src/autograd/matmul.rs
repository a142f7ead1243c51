use super::Var;
use crate::kernels;
use crate::par;
use crate::tensor::Tensor;

fn dims3(t: &Tensor, what: &str) -> (usize, usize, usize) {
    match t.shape() {
        &[a, b, c] => (a, b, c),
        s => panic!("{what} expects a rank-3 tensor, got {s:?}"),
    }
}

impl<'g> Var<'g> {
    /// Batched `op(A) @ op(B)` over the leading axis; `op` transposes the last two
    /// axes when the matching flag is set.
    pub fn bmm(self, other: Var<'g>, a_trans: bool, b_trans: bool) -> Var<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (ba, a0, a1) = dims3(&a, "bmm");
        let (bb, b0, b1) = dims3(&b, "bmm");
        assert_eq!(ba, bb, "bmm: batch mismatch");
        let (m, k) = if a_trans { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if b_trans { (b1, b0) } else { (b0, b1) };
        assert_eq!(k, kb, "bmm: inner dimension mismatch");
        let batch = ba;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..(i + 1) * m * k],
                a_trans,
                &b.data()[i * k * n..(i + 1) * k * n],
                b_trans,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(
            Tensor::from_parts(vec![batch, m, n], out),
            &[self, other],
            Box::new(move |g| {
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gy = &g.data()[i * m * n..(i + 1) * m * n];
                    let av = &a.data()[i * m * k..(i + 1) * m * k];
                    let bv = &b.data()[i * k * n..(i + 1) * k * n];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    if a_trans {
                        kernels::gemm(k, n, m, 1.0, bv, b_trans, gy, true, 0.0, ga_i);
                    } else {
                        kernels::gemm(m, n, k, 1.0, gy, false, bv, !b_trans, 0.0, ga_i);
                    }
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if b_trans {
                        kernels::gemm(n, m, k, 1.0, gy, true, av, a_trans, 0.0, gb_i);
                    } else {
                        kernels::gemm(k, m, n, 1.0, av, !a_trans, gy, false, 0.0, gb_i);
                    }
                }
                vec![
                    Some(Tensor::from_parts(a_shape.clone(), ga)),
                    Some(Tensor::from_parts(b_shape.clone(), gb)),
                ]
            }),
        )
    }

    /// Softmax of a rank-3 tensor along axis 1 or 2.
    pub fn softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (b, r, c) = dims3(&x, "softmax");
        assert!(axis == 1 || axis == 2, "softmax axis must be 1 or 2");
        // Walk each softmax group as (start, stride, len).
        let (groups, stride, len) = if axis == 2 { (b * r, 1, c) } else { (b * c, c, r) };
        let start = move |gi: usize| {
            if axis == 2 {
                gi * c
            } else {
                (gi / c) * r * c + gi % c
            }
        };
        let mut y = vec![0.0; x.len()];
        for gi in 0..groups {
            let s = start(gi);
            let max = (0..len).map(|j| x.data()[s + j * stride]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x.data()[s + j * stride] - max).exp();
                y[s + j * stride] = e;
                total += e;
            }
            for j in 0..len {
                y[s + j * stride] /= total;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let yv = out.clone();
        self.graph.record(
            out,
            &[self],
            Box::new(move |g| {
                let (gd, yd) = (g.data(), yv.data());
                let mut gx = vec![0.0; gd.len()];
                for gi in 0..groups {
                    let s = start(gi);
                    let dot: f64 = (0..len).map(|j| gd[s + j * stride] * yd[s + j * stride]).sum();
                    for j in 0..len {
                        let idx = s + j * stride;
                        gx[idx] = yd[idx] * (gd[idx] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(yv.shape().to_vec(), gx))]
            }),
        )
    }

    /// Divides each row of the last axis by `max(||row||, eps)`.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().expect("l2_normalize on a scalar");
        let rows = x.len() / n;
        let mut y = vec![0.0; x.len()];
        let mut norms = vec![0.0; rows];
        let xd = x.data();
        par::for_each_chunk2(&mut y, n, &mut norms, 1, |r, dst, norm| {
            let src = &xd[r * n..(r + 1) * n];
            let nv = src.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norm[0] = nv;
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v / nv;
            }
        });
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let yv = out.clone();
        self.graph.record(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                par::for_each_chunk(&mut gx, n, |r, dst| {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let yr = &yv.data()[r * n..(r + 1) * n];
                    let nv = norms[r];
                    let raw_norm: f64 = yr.iter().map(|v| v * v).sum::<f64>().sqrt() * nv;
                    if raw_norm > eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * dot) / nv;
                        }
                    } else {
                        for (d, gv) in dst.iter_mut().zip(gr) {
                            *d = gv / nv;
                        }
                    }
                });
                vec![Some(Tensor::from_parts(yv.shape().to_vec(), gx))]
            }),
        )
    }

    /// Scales slice `i` of the leading axis by `s[i]`.
    pub fn scale_batches(self, s: Var<'g>) -> Var<'g> {
        self.same_graph(&s);
        let (x, sv) = (self.value(), s.value());
        let b = x.shape()[0];
        assert_eq!(sv.len(), b, "scale_batches: one factor per leading slice");
        let per = x.len() / b;
        let mut y = x.data().to_vec();
        for (chunk, k) in y.chunks_mut(per).zip(sv.data()) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let s_shape = sv.shape().to_vec();
        self.graph.record(
            Tensor::from_parts(x.shape().to_vec(), y),
            &[self, s],
            Box::new(move |g| {
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; b];
                for i in 0..b {
                    let gr = &mut gx[i * per..(i + 1) * per];
                    let xr = &x.data()[i * per..(i + 1) * per];
                    gs[i] = gr.iter().zip(xr).map(|(a, c)| a * c).sum();
                    gr.iter_mut().for_each(|v| *v *= sv.data()[i]);
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(s_shape.clone(), gs)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check;
    use super::super::Graph;
    use crate::tensor::Tensor;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + seed) * 78.233).sin())
    }

    #[test]
    fn bmm_gradcheck_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rnd(&[2, 4, 3], 0.1) } else { rnd(&[2, 3, 4], 0.1) };
            let b = if tb { rnd(&[2, 5, 4], 0.7) } else { rnd(&[2, 4, 5], 0.7) };
            let err = check(&[a, b], |_, v| v[0].bmm(v[1], ta, tb));
            assert!(err < 1e-6, "ta={ta} tb={tb} err={err}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradcheck() {
        let x = rnd(&[2, 3, 4], 0.4).scale(3.0);
        for axis in [1, 2] {
            let g = Graph::new();
            let y = g.constant(x.clone()).softmax(axis).value();
            let (r, c) = (3, 4);
            if axis == 2 {
                for row in y.data().chunks(c) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            } else {
                for b in 0..2 {
                    for j in 0..c {
                        let s: f64 = (0..r).map(|i| y.data()[b * r * c + i * c + j]).sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
            assert!(check(std::slice::from_ref(&x), |_, v| v[0].softmax(axis)) < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_and_scale_gradcheck() {
        let x = rnd(&[2, 3, 5], 0.9);
        assert!(check(std::slice::from_ref(&x), |_, v| v[0].l2_normalize_rows(1e-12)) < 1e-6);
        let s = rnd(&[2], 3.3);
        assert!(check(&[x, s], |_, v| v[0].scale_batches(v[1])) < 1e-7);
    }
}
