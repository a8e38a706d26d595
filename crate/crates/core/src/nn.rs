//! Layers built on the autograd graph.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttentionLayout, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Dropout active, latent variables sampled.
    Train { dropout: f64 },
    /// Deterministic: no dropout, means instead of samples.
    Eval,
}

/// One forward pass: the graph being built, read-only parameters and the
/// random stream for dropout and latent noise.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode, rng: &'a mut ChaCha8Rng) -> Self {
        Session {
            graph: Graph::new(),
            params,
            mode,
            rng,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Var {
        let rate = match self.mode {
            Mode::Train { dropout } if dropout > 0.0 => dropout,
            _ => return x,
        };
        let (r, c) = self.graph.shape(x);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..r * c)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = self.graph.constant(Matrix::from_vec(r, c, mask));
        self.graph.mul(x, m)
    }
}

/// Parameter factory with a name prefix and a seeded initializer.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let m = Matrix::uniform(rows, cols, bound, self.rng);
        self.store.add(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Matrix::randn(rows, cols, std, self.rng);
        self.store.add(name, m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Matrix::filled(rows, cols, T::of(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Linear {
            weight: init.uniform(&format!("{name}.weight"), inp, out, bound),
            bias: init.uniform(&format!("{name}.bias"), 1, out, bound),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let y = s.graph.matmul(x, w);
        s.graph.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: init.constant(&format!("{name}.gain"), 1, dim, 1.0),
            shift: init.constant(&format!("{name}.shift"), 1, dim, 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let n = s.graph.layer_norm_rows(x, T::of(1e-8));
        let g = s.p(self.gain);
        let b = s.p(self.shift);
        let y = s.graph.mul(n, g);
        s.graph.add(y, b)
    }
}

/// Two-layer perceptron `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, inp: usize, hidden: usize, out: usize) -> Self {
        Mlp {
            hidden: Linear::new(init, &format!("{name}.0"), inp, hidden),
            out: Linear::new(init, &format!("{name}.1"), hidden, out),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.hidden.forward(s, x);
        let h = s.graph.relu(h);
        self.out.forward(s, h)
    }
}

/// Row layout of a padded batch as seen by attention layers.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub seqs: usize,
    pub steps: usize,
    /// `seqs*steps` flags, true at real items.
    pub valid: Rc<Vec<bool>>,
    /// `seqs*steps × 1` column of 0/1.
    pub mask_col: Var,
}

impl SeqLayout {
    pub fn new<T: Scalar>(g: &mut Graph<T>, valid: &[bool], seqs: usize, steps: usize) -> Self {
        assert_eq!(valid.len(), seqs * steps, "mask length");
        let col = Matrix::column(valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect());
        SeqLayout {
            seqs,
            steps,
            valid: Rc::new(valid.to_vec()),
            mask_col: g.constant(col),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, ffn_dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "hidden dim {dim} not divisible by {heads} heads");
        TransformerBlock {
            ln_attn: LayerNorm::new(init, &format!("{name}.ln_attn"), dim),
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), dim, dim),
            value: Linear::new(init, &format!("{name}.value"), dim, dim),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim),
            ln_ffn: LayerNorm::new(init, &format!("{name}.ln_ffn"), dim),
            ffn_in: Linear::new(init, &format!("{name}.ffn_in"), dim, ffn_dim),
            ffn_out: Linear::new(init, &format!("{name}.ffn_out"), ffn_dim, dim),
            heads,
        }
    }

    /// Pre-norm residual block; pad rows are zeroed on output.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, layout: &SeqLayout) -> Var {
        let h = self.ln_attn.forward(s, x);
        let q = self.query.forward(s, h);
        let k = self.key.forward(s, h);
        let v = self.value.forward(s, h);
        let a = s.graph.causal_attention(
            q,
            k,
            v,
            AttentionLayout {
                seqs: layout.seqs,
                steps: layout.steps,
                heads: self.heads,
            },
            layout.valid.clone(),
        );
        let a = self.proj.forward(s, a);
        let a = s.dropout(a);
        let x = s.graph.add(x, a);

        let h = self.ln_ffn.forward(s, x);
        let f = self.ffn_in.forward(s, h);
        let f = s.graph.relu(f);
        let f = self.ffn_out.forward(s, f);
        let f = s.dropout(f);
        let x = s.graph.add(x, f);
        s.graph.mul(x, layout.mask_col)
    }
}

/// Stack of causal blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
}

impl TransformerStack {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        depth: usize,
        dim: usize,
        ffn_dim: usize,
        heads: usize,
    ) -> Self {
        TransformerStack {
            blocks: (0..depth)
                .map(|i| TransformerBlock::new(init, &format!("{name}.block{i}"), dim, ffn_dim, heads))
                .collect(),
            ln_out: LayerNorm::new(init, &format!("{name}.ln_out"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, layout: &SeqLayout) -> Var {
        let mut x = s.graph.mul(x, layout.mask_col);
        for b in &self.blocks {
            x = b.forward(s, x, layout);
        }
        let x = self.ln_out.forward(s, x);
        s.graph.mul(x, layout.mask_col)
    }
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    dim: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, inp: usize, dim: usize) -> Self {
        GruCell {
            input: Linear::new(init, &format!("{name}.input"), inp, 3 * dim),
            hidden: Linear::new(init, &format!("{name}.hidden"), dim, 3 * dim),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `h' = (1 − z) ⊙ n + z ⊙ h` with reset gate applied inside the candidate.
    pub fn step<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, h: Var) -> Var {
        let gx = self.project_input(s, x);
        self.step_projected(s, gx, h)
    }

    /// Input half of the gate pre-activations, `n × 3·dim`. Can be computed once
    /// for a whole sequence and gathered per step.
    pub fn project_input<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        self.input.forward(s, x)
    }

    pub fn step_projected<T: Scalar>(&self, s: &mut Session<'_, T>, gx: Var, h: Var) -> Var {
        let d = self.dim;
        let gh = self.hidden.forward(s, h);
        let g = &mut s.graph;
        let xr = g.slice_cols(gx, 0, d);
        let xz = g.slice_cols(gx, d, d);
        let xn = g.slice_cols(gx, 2 * d, d);
        let hr = g.slice_cols(gh, 0, d);
        let hz = g.slice_cols(gh, d, d);
        let hn = g.slice_cols(gh, 2 * d, d);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let n = g.add(xn, rh);
        let n = g.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}
