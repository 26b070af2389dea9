use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_width(g: &Graph, x: Var, expected: usize, what: &str) -> Result<()> {
    let got = g.value(x).cols();
    if got != expected {
        return Err(Error::Config(format!("{what}: expected input width {expected}, got {got}")));
    }
    Ok(())
}

/// `y = x W + b` with `W` stored as `inputs × outputs`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.w"), vec![inputs, outputs], inputs)?;
        let bias = store.add_zeros(&format!("{name}.b"), vec![outputs])?;
        Ok(Linear { weight, bias, inputs, outputs })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        check_width(g, x, self.inputs, store.name(self.weight))?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        Ok(g.add_row(xw, b))
    }
}

/// Affine layer on a constant input; convenience for callers holding plain tensors.
pub fn affine_forward(store: &ParameterStore, layer: &Linear, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = layer.forward(&mut g, store, x)?;
    Ok(g.value(y).clone())
}

/// Stack of affine layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParameterStore, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit with reset gate applied to the recurrent candidate
/// term:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// u  = σ(x W_iu + b_iu + h W_hu + b_hu)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParameterStore, name: &str, inputs: usize, hidden: usize) -> Result<Self> {
        Ok(GruCell {
            w_input: store.add_uniform(&format!("{name}.w_input"), vec![inputs, 3 * hidden], hidden)?,
            w_hidden: store.add_uniform(&format!("{name}.w_hidden"), vec![hidden, 3 * hidden], hidden)?,
            b_input: store.add_zeros(&format!("{name}.b_input"), vec![3 * hidden])?,
            b_hidden: store.add_zeros(&format!("{name}.b_hidden"), vec![3 * hidden])?,
            inputs,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        check_width(g, x, self.inputs, "gru input")?;
        check_width(g, h, self.hidden, "gru hidden")?;
        if g.value(x).rows() != g.value(h).rows() {
            return Err(Error::Config("gru input and hidden batch sizes differ".into()));
        }
        let n = self.hidden;
        let wi = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let bi = g.param(store, self.b_input);
        let bh = g.param(store, self.b_hidden);
        let gi = g.matmul(x, wi);
        let gi = g.add_row(gi, bi);
        let gh = g.matmul(h, wh);
        let gh = g.add_row(gh, bh);

        let ir = g.slice_cols(gi, 0, n);
        let hr = g.slice_cols(gh, 0, n);
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);

        let iu = g.slice_cols(gi, n, n);
        let hu = g.slice_cols(gh, n, n);
        let u = g.add(iu, hu);
        let u = g.sigmoid(u);

        let inn = g.slice_cols(gi, 2 * n, n);
        let hn = g.slice_cols(gh, 2 * n, n);
        let rh = g.mul(r, hn);
        let cand = g.add(inn, rh);
        let cand = g.tanh(cand);

        let diff = g.sub(h, cand);
        let gated = g.mul(u, diff);
        Ok(g.add(cand, gated))
    }
}

/// Row standardization followed by a learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParameterStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(&format!("{name}.gain"), Tensor::filled(vec![width], 1.0))?,
            bias: store.add_zeros(&format!("{name}.bias"), vec![width])?,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        check_width(g, x, self.width, "layer norm")?;
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        Ok(g.add_row(y, bias))
    }
}

/// Validated entry to the scaled dot-product attention core.
///
/// Keys and values may be shared by all queries (`nk` rows) or given per
/// query (`nq · nk` rows, query-major).
pub fn attention_forward(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    key_mask: &[bool],
) -> Result<Var> {
    let (nq, d) = (g.value(queries).rows(), g.value(queries).cols());
    let (kr, kc) = (g.value(keys).rows(), g.value(keys).cols());
    let (vr, vc) = (g.value(values).rows(), g.value(values).cols());
    if (kr, kc) != (vr, vc) {
        return Err(Error::Config("key and value token counts differ".into()));
    }
    if kc != d {
        return Err(Error::Config("key width differs from query width".into()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let nk = key_mask.len();
    if kr != nk && kr != nq * nk {
        return Err(Error::Config(format!("{kr} key rows match neither {nk} keys nor {nq}x{nk} per-query keys")));
    }
    Ok(g.attention(queries, keys, values, heads, key_mask))
}
