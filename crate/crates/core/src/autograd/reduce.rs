use super::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.record(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().mul_const(1.0 / n)
    }

    /// Per-channel spatial sum, `[C, H, W] -> [C]`.
    pub fn sum_spatial(self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("sum_spatial expects [C, H, W]");
        let plane = h * w;
        let sums: Vec<f64> = (0..c).map(|i| x.channel(i).iter().sum()).collect();
        self.graph.record(
            Tensor::from_parts(vec![c], sums),
            &[self],
            Box::new(move |g| {
                let mut out = Vec::with_capacity(c * plane);
                for &gv in g.data() {
                    out.extend(std::iter::repeat_n(gv, plane));
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], out))]
            }),
        )
    }

    /// Global average pooling, `[C, H, W] -> [C, 1, 1]`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let (c, h, w) = self.value().dims3().expect("global_avg_pool expects [C, H, W]");
        self.sum_spatial()
            .mul_const(1.0 / (h * w) as f64)
            .reshape([c, 1, 1])
    }

    /// Sum over the channel axis, `[C, H, W] -> [1, H, W]`.
    pub fn sum_channels(self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("sum_channels expects [C, H, W]");
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for i in 0..c {
            for (o, v) in out.iter_mut().zip(x.channel(i)) {
                *o += v;
            }
        }
        self.graph.record(
            Tensor::from_parts(vec![1, h, w], out),
            &[self],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(c * plane);
                for _ in 0..c {
                    gx.extend_from_slice(g.data());
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }
}
