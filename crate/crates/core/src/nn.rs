//! Parameter storage and the two layer types every network here is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeom, Graph, Gradients, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Place every parameter on the graph, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.input(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for the parameters of one [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, for callers that placed the parameters themselves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; parameters the loss never touched get zeros.
    pub fn collect(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    /// Kernel `[cout, cin, kd, kh, kw]` with He-uniform initialization.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        geom: ConvGeom,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * kernel.iter().product::<usize>()) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform(&[cout, cin, kernel[0], kernel[1], kernel[2]], bound, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, geom }
    }

    /// 2-D square-kernel convolution.
    pub fn planar(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let geom = ConvGeom::planar(stride, kernel / 2);
        Self::new(store, name, cin, cout, [1, kernel, kernel], geom, rng)
    }

    /// Apply to `[B, C, D, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv(x, p.var(self.w), p.var(self.b), self.geom)
    }

    /// Apply to `[B, C, H, W]` by lifting through a unit depth axis.
    pub fn forward2d(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let x5 = g.reshape(x, &[s[0], s[1], 1, s[2], s[3]]);
        let y = self.forward(g, p, x5);
        let ys = g.shape(y).to_vec();
        g.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / din as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(&[dout, din], bound, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}
