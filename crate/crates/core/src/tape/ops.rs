//! Elementwise arithmetic, reductions and channel plumbing.

use super::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.map(|g| -g)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g / y)),
                    ctx.needs[1].then(|| {
                        // d(a/b)/db = -(a/b)/b
                        let q = ctx.output.zip_map(ctx.inputs[1], |o, y| -o / y);
                        ctx.grad.zip_map(&q, |g, q| g * q)
                    }),
                ]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(
            value,
            vec![a],
            Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| 2.0 * g * x))]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, vec![a], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, vec![a], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n;
                vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { slope * g }))]
            }),
        )
    }

    /// Clamps to `[-bound, bound]`; the gradient is zero where clamped.
    pub fn clamp_abs(&mut self, a: Var, bound: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(-bound, bound));
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| if x.abs() <= bound { g } else { 0.0 }))]
            }),
        )
    }

    /// Concatenates two grids along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.dims(), tb.dims(), "concat_channels: spatial dims differ");
        let (ca, cb) = (ta.channels(), tb.channels());
        let dims = ta.dims();
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::grid(ca + cb, dims, data);
        self.push(
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let n = ca * ctx.inputs[0].voxels();
                let g = ctx.grad.data();
                vec![
                    ctx.needs[0].then(|| Tensor::grid(ca, dims, g[..n].to_vec())),
                    ctx.needs[1].then(|| Tensor::grid(cb, dims, g[n..].to_vec())),
                ]
            }),
        )
    }

    /// Channels `start..start + len` of a grid.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (c, dims, n) = (t.channels(), t.dims(), t.voxels());
        assert!(start + len <= c, "narrow_channels out of range");
        let value = Tensor::grid(len, dims, t.data()[start * n..(start + len) * n].to_vec());
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut g = Tensor::grid_zeros(c, dims);
                g.data_mut()[start * n..(start + len) * n].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }
}
