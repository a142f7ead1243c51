use std::rc::Rc;

use super::Var;
use crate::tensor::Tensor;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044715;

impl<'g> Var<'g> {
    fn binary_same_shape(self, other: Var<'g>, what: &str) -> (Rc<Tensor>, Rc<Tensor>) {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        (a, b)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.binary_same_shape(other, "add");
        let out = a.zip_map(&b, |x, y| x + y).expect("checked shapes");
        self.graph.record(
            out,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.binary_same_shape(other, "sub");
        let out = a.zip_map(&b, |x, y| x - y).expect("checked shapes");
        self.graph.record(
            out,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.binary_same_shape(other, "mul");
        let out = a.zip_map(&b, |x, y| x * y).expect("checked shapes");
        self.graph.record(
            out,
            &[self, other],
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |g, y| g * y).unwrap()),
                    Some(g.zip_map(&a, |g, x| g * x).unwrap()),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.binary_same_shape(other, "div");
        let out = a.zip_map(&b, |x, y| x / y).expect("checked shapes");
        let q = out.clone();
        self.graph.record(
            out,
            &[self, other],
            Box::new(move |g| {
                let ga = g.zip_map(&b, |g, y| g / y).unwrap();
                let gb = Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(q.data())
                        .zip(b.data())
                        .map(|((g, q), y)| -g * q / y)
                        .collect(),
                );
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(self, s: Var<'g>) -> Var<'g> {
        self.same_graph(&s);
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "scale_by expects a one-element factor");
        let k = sv.item();
        let out = x.scale(k);
        let s_shape = sv.shape().to_vec();
        self.graph.record(
            out,
            &[self, s],
            Box::new(move |g| {
                let gs: f64 = g.data().iter().zip(x.data()).map(|(g, x)| g * x).sum();
                vec![Some(g.scale(k)), Some(Tensor::from_parts(s_shape.clone(), vec![gs]))]
            }),
        )
    }

    pub fn add_const(self, c: f64) -> Var<'g> {
        let out = self.value().map(|v| v + c);
        self.graph
            .record(out, &[self], Box::new(|g| vec![Some(g.clone())]))
    }

    pub fn mul_const(self, c: f64) -> Var<'g> {
        let out = self.value().scale(c);
        self.graph
            .record(out, &[self], Box::new(move |g| vec![Some(g.scale(c))]))
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_const(-1.0)
    }

    /// Elementwise map whose derivative is computed alongside the value.
    fn unary(self, f: impl Fn(f64) -> (f64, f64)) -> Var<'g> {
        let x = self.value();
        let (vals, derivs): (Vec<f64>, Vec<f64>) = x.data().iter().map(|&v| f(v)).unzip();
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), vals);
        self.graph.record(
            out,
            &[self],
            Box::new(move |g| {
                vec![Some(Tensor::from_parts(
                    shape.clone(),
                    g.data().iter().zip(&derivs).map(|(g, d)| g * d).collect(),
                ))]
            }),
        )
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(|v| {
            let s = sigmoid(v);
            (s, s * (1.0 - s))
        })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(|v| {
            let t = v.tanh();
            (t, 1.0 - t * t)
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        self.unary(|v| {
            let u = GELU_K * (v + GELU_C * v * v * v);
            let t = u.tanh();
            let du = GELU_K * (1.0 + 3.0 * GELU_C * v * v);
            (0.5 * v * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| (v * v, 2.0 * v))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(|v| (v.abs(), if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(|v| {
            let s = v.sqrt();
            (s, if s > 0.0 { 0.5 / s } else { 0.0 })
        })
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(|v| {
            let e = v.exp();
            (e, e)
        })
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(move |v| {
            if v < lo {
                (lo, 0.0)
            } else if v > hi {
                (hi, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
