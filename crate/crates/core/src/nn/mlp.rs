use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer sizes and options of a fully connected network.
///
/// `dims` lists input, hidden and output widths. When `cond_dim > 0` every
/// hidden layer receives an additive projection of a conditioning vector
/// (the time embedding for denoisers). `gated_skip` adds `(cond · S) ⊙ x`
/// to the output with `S` zero-initialized; it needs equal input and output
/// widths and a conditioning vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub cond_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub zero_init_output: bool,
    #[serde(default)]
    pub gated_skip: bool,
}

#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    din: usize,
    dout: usize,
    w: usize,
    b: usize,
    u: Option<usize>,
}

/// Fully connected network whose parameters live in one flat vector.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Vec<LayerLayout>,
    skip: Option<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    cond: Option<Array2<f64>>,
}

fn layout_for(spec: &MlpSpec) -> (Vec<LayerLayout>, Option<usize>, usize) {
    let n_layers = spec.dims.len() - 1;
    let mut offset = 0;
    let mut layout = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (din, dout) = (spec.dims[l], spec.dims[l + 1]);
        let w = offset;
        offset += din * dout;
        let b = offset;
        offset += dout;
        let u = if spec.cond_dim > 0 && l + 1 < n_layers {
            let u = offset;
            offset += spec.cond_dim * dout;
            Some(u)
        } else {
            None
        };
        layout.push(LayerLayout { din, dout, w, b, u });
    }
    let skip = spec.gated_skip.then(|| {
        let s = offset;
        offset += spec.cond_dim * spec.dims[n_layers];
        s
    });
    (layout, skip, offset)
}

impl Mlp {
    /// Zero-parameter network of the given shape. Use [`Mlp::init`] for
    /// random weights.
    pub fn zeros(spec: MlpSpec) -> Self {
        assert!(spec.dims.len() >= 2, "an MLP needs at least input and output widths");
        assert!(
            !spec.gated_skip || (spec.cond_dim > 0 && spec.dims[0] == *spec.dims.last().unwrap()),
            "a gated skip needs conditioning and equal input and output widths"
        );
        let (layout, skip, n) = layout_for(&spec);
        Self { spec, layout, skip, params: vec![0.0; n] }
    }

    /// LeCun-normal weights, zero biases. The output layer is zeroed when
    /// `spec.zero_init_output` is set.
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Self {
        let mut mlp = Self::zeros(spec);
        let last = mlp.layout.len() - 1;
        for (l, lay) in mlp.layout.clone().iter().enumerate() {
            if l == last && mlp.spec.zero_init_output {
                continue;
            }
            let fan_in = lay.din + lay.u.map_or(0, |_| mlp.spec.cond_dim);
            let scale = (1.0 / fan_in as f64).sqrt();
            for p in &mut mlp.params[lay.w..lay.w + lay.din * lay.dout] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
            if let Some(u) = lay.u {
                for p in &mut mlp.params[u..u + mlp.spec.cond_dim * lay.dout] {
                    *p = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        mlp
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Option<Self> {
        if spec.dims.len() < 2
            || (spec.gated_skip && (spec.cond_dim == 0 || spec.dims[0] != *spec.dims.last().unwrap()))
        {
            return None;
        }
        let (layout, skip, n) = layout_for(&spec);
        (params.len() == n).then_some(Self { spec, layout, skip, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weight(&self, lay: &LayerLayout) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((lay.din, lay.dout), &self.params[lay.w..lay.w + lay.din * lay.dout])
            .unwrap()
    }

    fn bias(&self, lay: &LayerLayout) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[lay.b..lay.b + lay.dout])
    }

    fn cond_weight(&self, lay: &LayerLayout) -> Option<ArrayView2<'_, f64>> {
        let c = self.spec.cond_dim;
        lay.u.map(|u| {
            ArrayView2::from_shape((c, lay.dout), &self.params[u..u + c * lay.dout]).unwrap()
        })
    }

    fn affine(&self, lay: &LayerLayout, h: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Array2<f64> {
        let mut z = h.dot(&self.weight(lay));
        z += &self.bias(lay);
        if let (Some(uw), Some(c)) = (self.cond_weight(lay), cond) {
            general_mat_mul(1.0, &c, &uw, 1.0, &mut z);
        }
        z
    }

    fn skip_weight(&self) -> Option<ArrayView2<'_, f64>> {
        let (c, d) = (self.spec.cond_dim, self.output_dim());
        self.skip.map(|s| ArrayView2::from_shape((c, d), &self.params[s..s + c * d]).unwrap())
    }

    fn add_skip(&self, out: &mut Array2<f64>, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) {
        if let (Some(sw), Some(c)) = (self.skip_weight(), cond) {
            let gate = c.dot(&sw);
            ndarray::Zip::from(out).and(&gate).and(&x).for_each(|o, &g, &xv| *o += g * xv);
        }
    }

    /// Inference pass (dropout disabled).
    pub fn forward(&self, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Array2<f64> {
        self.forward_with_features(x, cond).1
    }

    /// Inference pass returning the last hidden activations alongside the output.
    pub fn forward_with_features(
        &self,
        x: ArrayView2<f64>,
        cond: Option<ArrayView2<f64>>,
    ) -> (Array2<f64>, Array2<f64>) {
        let act = self.spec.activation;
        let last = self.layout.len() - 1;
        let mut h = x.to_owned();
        for lay in &self.layout[..last] {
            let mut z = self.affine(lay, h.view(), cond);
            z.mapv_inplace(|v| act.apply(v));
            h = z;
        }
        let mut out = self.affine(&self.layout[last], h.view(), cond);
        self.add_skip(&mut out, x, cond);
        (h, out)
    }

    /// Training pass. Dropout is applied to hidden activations when a
    /// generator is supplied and `spec.dropout > 0`.
    pub fn forward_tape(
        &self,
        x: ArrayView2<f64>,
        cond: Option<ArrayView2<f64>>,
        mut dropout_rng: Option<&mut Rng>,
    ) -> (Array2<f64>, MlpTape) {
        let act = self.spec.activation;
        let last = self.layout.len() - 1;
        let p = self.spec.dropout;
        let mut inputs = Vec::with_capacity(self.layout.len());
        let mut pre = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for lay in &self.layout[..last] {
            let z = self.affine(lay, h.view(), cond);
            let mut a = z.mapv(|v| act.apply(v));
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let keep = 1.0 - p;
                    let m = Array2::from_shape_simple_fn(a.raw_dim(), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
            masks.push(mask);
        }
        let mut out = self.affine(&self.layout[last], h.view(), cond);
        self.add_skip(&mut out, x, cond);
        inputs.push(h);
        let tape = MlpTape { inputs, pre, masks, cond: cond.map(|c| c.to_owned()) };
        (out, tape)
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
    pub fn backward(&self, tape: &MlpTape, grad_out: ArrayView2<f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let act = self.spec.activation;
        if let (Some(s), Some(c)) = (self.skip, tape.cond.as_ref()) {
            let (cd, d) = (self.spec.cond_dim, self.output_dim());
            let mut gs = ArrayViewMut2::from_shape((cd, d), &mut grad[s..s + cd * d]).unwrap();
            let gx = &grad_out * &tape.inputs[0];
            general_mat_mul(1.0, &c.t(), &gx, 1.0, &mut gs);
        }
        let mut g = grad_out.to_owned();
        for l in (0..self.layout.len()).rev() {
            let lay = self.layout[l];
            let h = &tape.inputs[l];
            {
                let mut gw = ArrayViewMut2::from_shape(
                    (lay.din, lay.dout),
                    &mut grad[lay.w..lay.w + lay.din * lay.dout],
                )
                .unwrap();
                general_mat_mul(1.0, &h.t(), &g, 1.0, &mut gw);
            }
            {
                let mut gb = ArrayViewMut1::from(&mut grad[lay.b..lay.b + lay.dout]);
                gb += &g.sum_axis(Axis(0));
            }
            if let (Some(u), Some(c)) = (lay.u, tape.cond.as_ref()) {
                let cd = self.spec.cond_dim;
                let mut gu =
                    ArrayViewMut2::from_shape((cd, lay.dout), &mut grad[u..u + cd * lay.dout]).unwrap();
                general_mat_mul(1.0, &c.t(), &g, 1.0, &mut gu);
            }
            if l == 0 {
                break;
            }
            let mut gh = g.dot(&self.weight(&lay).t());
            if let Some(m) = &tape.masks[l - 1] {
                gh *= m;
            }
            ndarray::Zip::from(&mut gh)
                .and(&tape.pre[l - 1])
                .for_each(|gv, &z| *gv *= act.derivative(z));
            g = gh;
        }
    }
}
