use super::Var;
use crate::kernels;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Pointwise convolution: `[Ci, H, W]` with weight `[Co, Ci]` and optional bias `[Co]`.
    pub fn conv1x1(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
        self.same_graph(&weight);
        let x = self.value();
        let wt = weight.value();
        let (ci, h, w) = x.dims3().expect("conv1x1 expects [C, H, W]");
        let &[co, wci] = wt.shape() else {
            panic!("conv1x1 weight must be [Co, Ci], got {:?}", wt.shape())
        };
        assert_eq!(ci, wci, "conv1x1: input has {ci} channels, weight expects {wci}");
        let n = h * w;
        let mut out = vec![0.0; co * n];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.len(), co, "conv1x1 bias length");
            for (row, &bb) in out.chunks_mut(n).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v = bb);
            }
        }
        kernels::gemm(co, ci, n, 1.0, wt.data(), false, x.data(), false, 1.0, &mut out);

        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph.record(
            Tensor::from_parts(vec![co, h, w], out),
            &parents,
            Box::new(move |g| {
                let mut gx = vec![0.0; ci * n];
                kernels::gemm(ci, co, n, 1.0, wt.data(), true, g.data(), false, 0.0, &mut gx);
                let mut gw = vec![0.0; co * ci];
                kernels::gemm(co, n, ci, 1.0, g.data(), false, x.data(), true, 0.0, &mut gw);
                let mut grads = vec![
                    Some(Tensor::from_parts(vec![ci, h, w], gx)),
                    Some(Tensor::from_parts(vec![co, ci], gw)),
                ];
                if has_bias {
                    let gb = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                    grads.push(Some(Tensor::from_parts(vec![co], gb)));
                }
                grads
            }),
        )
    }

    /// Same-padded depthwise 3x3 convolution with weight `[C, 3, 3]` and bias `[C]`.
    pub fn dwconv3x3(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        self.same_graph(&weight);
        let x = self.value();
        let (wt, bv) = (weight.value(), bias.value());
        let (c, h, w) = x.dims3().expect("dwconv3x3 expects [C, H, W]");
        assert_eq!(wt.shape(), &[c, 3, 3], "dwconv3x3 weight shape");
        assert_eq!(bv.shape(), &[c], "dwconv3x3 bias shape");
        let out = kernels::dwconv3x3(x.data(), wt.data(), bv.data(), c, h, w);
        self.graph.record(
            Tensor::from_parts(vec![c, h, w], out),
            &[self, weight, bias],
            Box::new(move |g| {
                let gx = kernels::dwconv3x3_grad_input(g.data(), wt.data(), c, h, w);
                let (gw, gb) = kernels::dwconv3x3_grad_params(x.data(), g.data(), c, h, w);
                vec![
                    Some(Tensor::from_parts(vec![c, h, w], gx)),
                    Some(Tensor::from_parts(vec![c, 3, 3], gw)),
                    Some(Tensor::from_parts(vec![c], gb)),
                ]
            }),
        )
    }

    /// Same-padded dense 3x3 convolution with weight `[Co, Ci, 3, 3]` and bias `[Co]`.
    pub fn conv3x3(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        self.same_graph(&weight);
        let x = self.value();
        let (wt, bv) = (weight.value(), bias.value());
        let (ci, h, w) = x.dims3().expect("conv3x3 expects [C, H, W]");
        let co = wt.shape()[0];
        assert_eq!(wt.shape(), &[co, ci, 3, 3], "conv3x3 weight shape");
        assert_eq!(bv.shape(), &[co], "conv3x3 bias shape");
        let n = h * w;
        let cols = kernels::im2col3x3(x.data(), ci, h, w);
        let mut out = vec![0.0; co * n];
        for (row, &bb) in out.chunks_mut(n).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v = bb);
        }
        kernels::gemm(co, ci * 9, n, 1.0, wt.data(), false, &cols, false, 1.0, &mut out);
        self.graph.record(
            Tensor::from_parts(vec![co, h, w], out),
            &[self, weight, bias],
            Box::new(move |g| {
                let mut gcols = vec![0.0; ci * 9 * n];
                kernels::gemm(ci * 9, co, n, 1.0, wt.data(), true, g.data(), false, 0.0, &mut gcols);
                let gx = kernels::col2im3x3(&gcols, ci, h, w);
                let mut gw = vec![0.0; co * ci * 9];
                kernels::gemm(co, n, ci * 9, 1.0, g.data(), false, &cols, true, 0.0, &mut gw);
                let gb = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                vec![
                    Some(Tensor::from_parts(vec![ci, h, w], gx)),
                    Some(Tensor::from_parts(vec![co, ci, 3, 3], gw)),
                    Some(Tensor::from_parts(vec![co], gb)),
                ]
            }),
        )
    }

    /// Space-to-depth: `[C, H, W] -> [4C, H/2, W/2]`, output channel `4c + 2dy + dx`.
    pub fn pixel_unshuffle(self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("pixel_unshuffle expects [C, H, W]");
        assert!(h % 2 == 0 && w % 2 == 0, "pixel_unshuffle needs even sides, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let index = move |ch: usize, y: usize, xx: usize| {
            let oc = ch * 4 + (y % 2) * 2 + xx % 2;
            (oc * oh + y / 2) * ow + xx / 2
        };
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[index(ch, y, xx)] = x.data()[(ch * h + y) * w + xx];
                }
            }
        }
        self.graph.record(
            Tensor::from_parts(vec![4 * c, oh, ow], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] = g.data()[index(ch, y, xx)];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample_nearest2x(self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("upsample expects [C, H, W]");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let src = &x.data()[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for (xx, d) in dst.iter_mut().enumerate() {
                    *d = src[xx / 2];
                }
            }
        }
        self.graph.record(
            Tensor::from_parts(vec![c, oh, ow], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        let src = &g.data()[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                        let dst = &mut gx[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                        for (xx, v) in src.iter().enumerate() {
                            dst[xx / 2] += v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Non-overlapping `k x k` average pooling (area downsampling).
    pub fn avg_pool(self, k: usize) -> Var<'g> {
        if k == 1 {
            return self;
        }
        let x = self.value();
        let (c, h, w) = x.dims3().expect("avg_pool expects [C, H, W]");
        let out = x.area_downsample(k).expect("avg_pool: sides must divide by k");
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        self.graph.record(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        let src = &g.data()[(ch * oh + y / k) * ow..(ch * oh + y / k + 1) * ow];
                        let dst = &mut gx[(ch * h + y) * w..(ch * h + y + 1) * w];
                        for (xx, d) in dst.iter_mut().enumerate() {
                            *d = src[xx / k] * norm;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check;
    use crate::tensor::Tensor;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + seed) * 12.9898).sin() * 0.8)
    }

    #[test]
    fn conv1x1_gradcheck() {
        let x = rnd(&[3, 4, 5], 0.0);
        let w = rnd(&[2, 3], 1.0);
        let b = rnd(&[2], 2.0);
        assert!(check(&[x.clone(), w.clone(), b], |_, v| v[0].conv1x1(v[1], Some(v[2]))) < 1e-6);
        assert!(check(&[x, w], |_, v| v[0].conv1x1(v[1], None)) < 1e-6);
    }

    #[test]
    fn dwconv3x3_gradcheck() {
        let x = rnd(&[2, 4, 5], 0.3);
        let w = rnd(&[2, 3, 3], 1.1);
        let b = rnd(&[2], 2.2);
        assert!(check(&[x, w, b], |_, v| v[0].dwconv3x3(v[1], v[2])) < 1e-6);
    }

    #[test]
    fn conv3x3_gradcheck() {
        let x = rnd(&[2, 4, 3], 0.5);
        let w = rnd(&[3, 2, 3, 3], 1.7);
        let b = rnd(&[3], 2.9);
        let e = check(&[x, w, b], |_, v| v[0].conv3x3(v[1], v[2]));
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn resampling_gradcheck() {
        let x = rnd(&[2, 4, 6], 0.9);
        assert!(check(std::slice::from_ref(&x), |_, v| v[0].pixel_unshuffle()) < 1e-7);
        assert!(check(std::slice::from_ref(&x), |_, v| v[0].upsample_nearest2x()) < 1e-7);
        assert!(check(&[x], |_, v| v[0].avg_pool(2)) < 1e-7);
    }

    #[test]
    fn pixel_unshuffle_layout() {
        let g = super::super::Graph::new();
        let x = g.constant(Tensor::from_fn([1, 2, 2], |i| i as f64));
        let y = x.pixel_unshuffle().value();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }
}
