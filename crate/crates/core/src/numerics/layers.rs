//! Layer library built on [`Graph`] operations.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::{NumericsError, Tensor};

type Res = Result<Var, NumericsError>;

/// Uniform bound used for recurrent networks.
pub const RECURRENT_INIT: Init = Init::Uniform(0.08);

/// Additive mask value for disallowed attention positions.
pub const MASKED: f64 = -1.0e9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.register(format!("{name}.weight"), input, output, init, rng);
        let bias = bias.then(|| {
            let b_init = match init {
                Init::ScaledNormal => Init::Zeros,
                other => other,
            };
            store.register(format!("{name}.bias"), 1, output, b_init, rng)
        });
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Res {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let table = store.register(format!("{name}.table"), count, dim, init, rng);
        Self { table, count, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Res {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Res {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Fully connected stack with an activation between layers and none after
/// the last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], activation: Activation, init: Init, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, init, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Res {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit with the reset gate applied to the projected hidden
/// state:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_ih: store.register(format!("{name}.w_ih"), input, 3 * hidden, RECURRENT_INIT, rng),
            w_hh: store.register(format!("{name}.w_hh"), hidden, 3 * hidden, RECURRENT_INIT, rng),
            b_ih: store.register(format!("{name}.b_ih"), 1, 3 * hidden, RECURRENT_INIT, rng),
            b_hh: store.register(format!("{name}.b_hh"), 1, 3 * hidden, RECURRENT_INIT, rng),
            input,
            hidden,
        }
    }

    /// Input projection for a whole `[n, input]` sequence at once.
    pub fn project_inputs(&self, g: &mut Graph, xs: Var) -> Res {
        if g.shape(xs)[1] != self.input {
            return Err(NumericsError::Shape(format!(
                "GRU expects input width {}, got {:?}",
                self.input,
                g.shape(xs)
            )));
        }
        let w = g.param(self.w_ih);
        let b = g.param(self.b_ih);
        let p = g.matmul(xs, w)?;
        g.add(p, b)
    }

    /// One step from a pre-projected `[1, 3h]` input row.
    pub fn step_projected(&self, g: &mut Graph, gi: Var, h: Var) -> Res {
        let hd = self.hidden;
        if g.shape(h) != [1, hd] {
            return Err(NumericsError::Shape(format!("GRU state must be [1, {hd}], got {:?}", g.shape(h))));
        }
        let w = g.param(self.w_hh);
        let b = g.param(self.b_hh);
        let gh = g.matmul(h, w)?;
        let gh = g.add(gh, b)?;

        let i_r = g.slice_cols(gi, 0, hd)?;
        let i_z = g.slice_cols(gi, hd, hd)?;
        let i_n = g.slice_cols(gi, 2 * hd, hd)?;
        let h_r = g.slice_cols(gh, 0, hd)?;
        let h_z = g.slice_cols(gh, hd, hd)?;
        let h_n = g.slice_cols(gh, 2 * hd, hd)?;

        let r = g.add(i_r, h_r)?;
        let r = g.sigmoid(r)?;
        let z = g.add(i_z, h_z)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, h_n)?;
        let n = g.add(i_n, rn)?;
        let n = g.tanh(n)?;
        // h' = n + z ⊙ (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Res {
        let gi = self.project_inputs(g, x)?;
        self.step_projected(g, gi, h)
    }

    /// Runs over every row of `xs`; returns the per-step states in order.
    pub fn run(&self, g: &mut Graph, xs: Var, h0: Var, reverse: bool) -> Result<Vec<Var>, NumericsError> {
        let n = g.shape(xs)[0];
        let proj = self.project_inputs(g, xs)?;
        let mut states = vec![h0; n];
        let mut h = h0;
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
        for t in order {
            let gi = g.row(proj, t)?;
            h = self.step_projected(g, gi, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}

/// Output of a bidirectional encoder.
#[derive(Debug, Clone, Copy)]
pub struct BiGruOutput {
    /// `[n, 2h]`: row `i` is `[→h_i, ←h_i]`.
    pub states: Var,
    /// `[1, 2h]`: forward state after the last token joined with the backward
    /// state after consuming the first token.
    pub last: Var,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            forward: GruCell::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: GruCell::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn encode(&self, g: &mut Graph, xs: Var) -> Result<BiGruOutput, NumericsError> {
        let n = g.shape(xs)[0];
        if n == 0 {
            return Err(NumericsError::Shape("cannot encode an empty sequence".into()));
        }
        let h0 = g.constant(Tensor::zeros(1, self.hidden()))?;
        let fwd = self.forward.run(g, xs, h0, false)?;
        let bwd = self.backward.run(g, xs, h0, true)?;
        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect::<Result<Vec<_>, _>>()?;
        let states = g.concat_rows(&rows)?;
        let last = g.concat_cols(&[fwd[n - 1], bwd[0]])?;
        Ok(BiGruOutput { states, last })
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), 1, dim, Init::Ones, rng),
            bias: store.register(format!("{name}.bias"), 1, dim, Init::Zeros, rng),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Res {
        let n = g.layer_norm_rows(x, self.eps)?;
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}

/// Scaled dot-product attention with several heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head weight matrices.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must split evenly over heads");
        let mut lin = |suffix: &str| Linear::new(store, &format!("{name}.{suffix}"), dim, dim, true, Init::ScaledNormal, rng);
        Self {
            query: lin("q"),
            key: lin("k"),
            value: lin("v"),
            out: lin("o"),
            heads,
            dim,
        }
    }

    /// `queries` is `[n, d]`, `memory` is `[m, d]`; `mask` is an optional
    /// additive `[n, m]` constant (0 where allowed, [`MASKED`] elsewhere).
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, mask: Option<&Tensor>) -> Result<AttentionOutput, NumericsError> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let [n, _] = g.shape(q);
        let [m, _] = g.shape(k);
        let mask = match mask {
            Some(t) => {
                if t.shape() != [n, m] {
                    return Err(NumericsError::Shape(format!(
                        "attention mask {:?} for {n} queries over {m} keys",
                        t.shape()
                    )));
                }
                Some(g.constant(t.clone())?)
            }
            None => None,
        };
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(mask) = mask {
                scores = g.add(scores, mask)?;
            }
            let w = g.softmax_rows(scores)?;
            heads.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let output = self.out.forward(g, joined)?;
        Ok(AttentionOutput { output, weights })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, hidden, true, Init::ScaledNormal, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, dim, true, Init::ScaledNormal, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Res {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, h)
    }
}

/// Post-norm encoder block: self-attention then feed-forward, each wrapped
/// in a residual connection and layer norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerEncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl TransformerEncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            ff: FeedForward::new(store, name, dim, ff_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Tensor>) -> Res {
        let a = self.attention.forward(g, x, x, mask)?;
        let x = g.add(x, a.output)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ff.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, x)
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention over the
/// encoder memory, feed-forward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerDecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl TransformerDecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            ff: FeedForward::new(store, name, dim, ff_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.ln3"), dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, self_mask: &Tensor, memory_mask: Option<&Tensor>) -> Res {
        let a = self.self_attention.forward(g, x, x, Some(self_mask))?;
        let x = g.add(x, a.output)?;
        let x = self.norm1.forward(g, x)?;
        let c = self.cross_attention.forward(g, x, memory, memory_mask)?;
        let x = g.add(x, c.output)?;
        let x = self.norm2.forward(g, x)?;
        let f = self.ff.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm3.forward(g, x)
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Additive mask letting query `t` see keys `0..=t` only.
pub fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            t.set(i, j, MASKED);
        }
    }
    t
}

/// Additive `[queries, keys]` mask hiding padded key positions.
pub fn key_padding_mask(queries: usize, key_is_pad: &[bool]) -> Tensor {
    let mut t = Tensor::zeros(queries, key_is_pad.len());
    for i in 0..queries {
        for (j, &pad) in key_is_pad.iter().enumerate() {
            if pad {
                t.set(i, j, MASKED);
            }
        }
    }
    t
}

/// Element-wise sum of two additive masks of equal shape.
pub fn combine_masks(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gru_zero_everything_stays_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(1, 3)).unwrap();
        let h = g.constant(Tensor::zeros(1, 4)).unwrap();
        let out = cell.step(&mut g, x, h).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bigru_length_one_directions_see_same_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = BiGru::new(&mut store, "enc", 3, 4, &mut rng);
        // Tie the backward weights to the forward ones.
        for (f, b) in [
            (enc.forward.w_ih, enc.backward.w_ih),
            (enc.forward.w_hh, enc.backward.w_hh),
            (enc.forward.b_ih, enc.backward.b_ih),
            (enc.forward.b_hh, enc.backward.b_hh),
        ] {
            let v = store.value(f).clone();
            *store.value_mut(b) = v;
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row(vec![0.3, -0.2, 0.9])).unwrap();
        let out = enc.encode(&mut g, x).unwrap();
        let last = g.value(out.last);
        assert_eq!(last.shape(), [1, 8]);
        assert_eq!(&last.data()[..4], &last.data()[4..]);
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(m.get(0, 1), MASKED);
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
    }
}
