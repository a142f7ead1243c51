use super::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Layer normalisation across channels at every pixel of a `[C, H, W]` tensor,
    /// followed by a per-channel affine map.
    pub fn layer_norm_channels(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        self.same_graph(&gamma);
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (c, h, w) = x.dims3().expect("layer_norm expects [C, H, W]");
        assert_eq!(gv.shape(), &[c], "layer_norm gamma shape");
        assert_eq!(bv.shape(), &[c], "layer_norm beta shape");
        let n = h * w;
        let xd = x.data();
        let mut mean = vec![0.0; n];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&xd[ch * n..(ch + 1) * n]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; n];
        for ch in 0..c {
            for ((s, v), m) in var.iter_mut().zip(&xd[ch * n..(ch + 1) * n]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / c as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; c * n];
        let mut y = vec![0.0; c * n];
        for ch in 0..c {
            let (gc, bc) = (gv.data()[ch], bv.data()[ch]);
            for i in 0..n {
                let xh = (xd[ch * n + i] - mean[i]) * inv_std[i];
                xhat[ch * n + i] = xh;
                y[ch * n + i] = gc * xh + bc;
            }
        }
        self.graph.record(
            Tensor::from_parts(vec![c, h, w], y),
            &[self, gamma, beta],
            Box::new(move |g| {
                let gd = g.data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                // mean over channels of dxhat and of dxhat * xhat, per pixel
                let mut m1 = vec![0.0; n];
                let mut m2 = vec![0.0; n];
                for ch in 0..c {
                    let gc = gv.data()[ch];
                    let (gs, xs) = (&gd[ch * n..(ch + 1) * n], &xhat[ch * n..(ch + 1) * n]);
                    let mut sg = 0.0;
                    let mut sb = 0.0;
                    for i in 0..n {
                        sg += gs[i] * xs[i];
                        sb += gs[i];
                        let dxh = gs[i] * gc;
                        m1[i] += dxh;
                        m2[i] += dxh * xs[i];
                    }
                    ggamma[ch] = sg;
                    gbeta[ch] = sb;
                }
                let inv_c = 1.0 / c as f64;
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    let gc = gv.data()[ch];
                    for i in 0..n {
                        let k = ch * n + i;
                        let dxh = gd[k] * gc;
                        gx[k] = inv_std[i] * (dxh - m1[i] * inv_c - xhat[k] * m2[i] * inv_c);
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![c, h, w], gx)),
                    Some(Tensor::from_parts(vec![c], ggamma)),
                    Some(Tensor::from_parts(vec![c], gbeta)),
                ]
            }),
        )
    }

    /// Scales the channel vector at every pixel to unit length: `x / (||x||_c + eps)`.
    pub fn unit_normalize_channels(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("unit_normalize_channels expects [C, H, W]");
        let n = h * w;
        let xd = x.data();
        let mut norm = vec![0.0; n];
        for ch in 0..c {
            for (s, v) in norm.iter_mut().zip(&xd[ch * n..(ch + 1) * n]) {
                *s += v * v;
            }
        }
        norm.iter_mut().for_each(|s| *s = s.sqrt());
        let mut y = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                y[ch * n + i] = xd[ch * n + i] / (norm[i] + eps);
            }
        }
        self.graph.record(
            Tensor::from_parts(vec![c, h, w], y),
            &[self],
            Box::new(move |g| {
                let gd = g.data();
                let xd = x.data();
                // y = x / (r + eps), r = ||x||: dy/dx = I/(r+eps) - x x^T / (r (r+eps)^2)
                let mut dot = vec![0.0; n];
                for ch in 0..c {
                    for i in 0..n {
                        dot[i] += gd[ch * n + i] * xd[ch * n + i];
                    }
                }
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    for i in 0..n {
                        let k = ch * n + i;
                        let d = norm[i] + eps;
                        let corr = if norm[i] > 0.0 { xd[k] * dot[i] / (norm[i] * d * d) } else { 0.0 };
                        gx[k] = gd[k] / d - corr;
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Cosine similarity between matching channels of two `[C, H, W]` tensors,
    /// `dot / max(||a|| * ||b||, eps)`, shape `[C]`.
    pub fn channel_cosine(self, other: Var<'g>, eps: f64) -> Var<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "channel_cosine: shape mismatch");
        let (c, _, _) = a.dims3().expect("channel_cosine expects [C, H, W]");
        let stats: Vec<(f64, f64, f64)> = (0..c)
            .map(|ch| {
                let (x, y) = (a.channel(ch), b.channel(ch));
                let dot = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
                let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                (dot, na, nb)
            })
            .collect();
        let cos: Vec<f64> = stats
            .iter()
            .map(|&(dot, na, nb)| dot / (na * nb).max(eps))
            .collect();
        let shape = a.shape().to_vec();
        self.graph.record(
            Tensor::from_parts(vec![c], cos.clone()),
            &[self, other],
            Box::new(move |g| {
                let plane = a.len() / c;
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                for ch in 0..c {
                    let (dot, na, nb) = stats[ch];
                    let gc = g.data()[ch];
                    let (x, y) = (a.channel(ch), b.channel(ch));
                    let den = na * nb;
                    let (ga_c, gb_c) = (
                        &mut ga[ch * plane..(ch + 1) * plane],
                        &mut gb[ch * plane..(ch + 1) * plane],
                    );
                    if den > eps {
                        let cs = cos[ch];
                        for i in 0..plane {
                            ga_c[i] = gc * (y[i] / den - cs * x[i] / (na * na));
                            gb_c[i] = gc * (x[i] / den - cs * y[i] / (nb * nb));
                        }
                    } else {
                        let _ = dot;
                        for i in 0..plane {
                            ga_c[i] = gc * y[i] / eps;
                            gb_c[i] = gc * x[i] / eps;
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), ga)),
                    Some(Tensor::from_parts(shape.clone(), gb)),
                ]
            }),
        )
    }
}
