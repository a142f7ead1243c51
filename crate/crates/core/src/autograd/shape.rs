use super::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = Tensor::clone(&x).reshape(shape).expect("reshape: element count");
        self.graph.record(
            out,
            &[self],
            Box::new(move |g| vec![Some(g.clone().reshape(old.clone()).unwrap())]),
        )
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (_, h, w) = values[0].dims3().expect("concat expects [C, H, W]");
        let mut channels = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for v in &values {
            let (c, vh, vw) = v.dims3().expect("concat expects [C, H, W]");
            assert_eq!((vh, vw), (h, w), "concat: spatial mismatch");
            channels.push(c);
            data.extend_from_slice(v.data());
        }
        let total: usize = channels.iter().sum();
        graph.record(
            Tensor::from_parts(vec![total, h, w], data),
            parts,
            Box::new(move |g| {
                let mut off = 0;
                channels
                    .iter()
                    .map(|&c| {
                        let n = c * h * w;
                        let piece = g.data()[off..off + n].to_vec();
                        off += n;
                        Some(Tensor::from_parts(vec![c, h, w], piece))
                    })
                    .collect()
            }),
        )
    }

    /// Channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn narrow_channels(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("narrow expects [C, H, W]");
        assert!(start + len <= c, "narrow: channel range out of bounds");
        let plane = h * w;
        let out = x.data()[start * plane..(start + len) * plane].to_vec();
        self.graph.record(
            Tensor::from_parts(vec![len, h, w], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * plane];
                gx[start * plane..(start + len) * plane].copy_from_slice(g.data());
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Top-left spatial crop of a `[C, H, W]` tensor.
    pub fn crop(self, h: usize, w: usize) -> Var<'g> {
        let x = self.value();
        let (c, sh, sw) = x.dims3().expect("crop expects [C, H, W]");
        let out = x.crop(h, w).expect("crop bounds");
        self.graph.record(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * sh * sw];
                for ch in 0..c {
                    for y in 0..h {
                        let src = &g.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                        let dst = (ch * sh + y) * sw;
                        gx[dst..dst + w].copy_from_slice(src);
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, sh, sw], gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check;
    use super::super::Var;
    use crate::tensor::Tensor;

    #[test]
    fn shape_ops_gradcheck() {
        let a = Tensor::from_fn([2, 3, 2], |i| i as f64 * 0.1);
        let b = Tensor::from_fn([1, 3, 2], |i| 1.0 - i as f64 * 0.2);
        assert!(check(&[a.clone(), b], |_, v| Var::concat_channels(&[v[0], v[1]])) < 1e-7);
        assert!(check(std::slice::from_ref(&a), |_, v| v[0].narrow_channels(1, 1)) < 1e-7);
        assert!(check(std::slice::from_ref(&a), |_, v| v[0].reshape([6, 2])) < 1e-7);
        assert!(check(&[a], |_, v| v[0].crop(2, 1)) < 1e-7);
    }
}
