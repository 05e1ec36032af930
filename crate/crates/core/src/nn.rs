//! Transformer building blocks on top of the autodiff graph.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Mask, Var};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), group, fan_in, fan_out, Init::FanIn, rng);
        let b = store.add(&format!("{name}.b"), group, 1, fan_out, Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: Group, d: usize, rng: &mut R) -> Self {
        let gain = store.add(&format!("{name}.gain"), group, 1, d, Init::Ones, rng);
        let bias = store.add(&format!("{name}.bias"), group, 1, d, Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gv = g.param(self.gain);
        let bv = g.param(self.bias);
        g.layer_norm(x, gv, bv)
    }
}

fn maybe_norm(norm: &Option<LayerNorm>, g: &mut Graph<'_>, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.forward(g, x),
        None => Ok(x),
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d, d, rng),
            out: Linear::new(store, &format!("{name}.o"), group, d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Var, mask: &Mask) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.out.forward(g, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Shape options shared by every transformer stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub d: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub pre_norm: bool,
    pub cross_attention: bool,
}

/// `X' = X + MSA(X); [X'' = X' + XA(X', M)]; X = X'' + MLP(X'')`, with
/// optional pre-normalisation in front of each sub-layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub norm_cross: Option<LayerNorm>,
    pub cross: Option<MultiHeadAttention>,
    pub norm2: Option<LayerNorm>,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        spec: BlockSpec,
        rng: &mut R,
    ) -> Self {
        let norm = |store: &mut ParamStore, n: &str, rng: &mut R| {
            spec.pre_norm
                .then(|| LayerNorm::new(store, &format!("{name}.{n}"), group, spec.d, rng))
        };
        let norm1 = norm(store, "norm1", rng);
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), group, spec.d, spec.heads, rng);
        let (norm_cross, cross) = if spec.cross_attention {
            (
                norm(store, "norm_cross", rng),
                Some(MultiHeadAttention::new(
                    store,
                    &format!("{name}.cross"),
                    group,
                    spec.d,
                    spec.heads,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        let norm2 = norm(store, "norm2", rng);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), group, spec.d, spec.mlp_hidden, rng);
        Self {
            norm1,
            attn,
            norm_cross,
            cross,
            norm2,
            mlp,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: &Mask, memory: Option<Var>) -> Result<Var> {
        let h = maybe_norm(&self.norm1, g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let mut x = g.add(x, a)?;
        if let (Some(cross), Some(mem)) = (&self.cross, memory) {
            let h = maybe_norm(&self.norm_cross, g, x)?;
            let a = cross.forward(g, h, mem, &Mask::None)?;
            x = g.add(x, a)?;
        }
        let h = maybe_norm(&self.norm2, g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }

    /// Output projections of every sub-layer, the weights that gate the
    /// residual branches.
    pub fn output_projections(&self) -> Vec<Linear> {
        let mut v = alloc::vec![self.attn.out, self.mlp.fc2];
        if let Some(c) = &self.cross {
            v.push(c.out);
        }
        v
    }
}

pub fn build_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    group: Group,
    spec: BlockSpec,
    count: usize,
    rng: &mut R,
) -> Vec<Block> {
    (0..count)
        .map(|i| Block::new(store, &format!("{prefix}.{i}"), group, spec, rng))
        .collect()
}

pub fn run_stack(
    blocks: &[Block],
    g: &mut Graph<'_>,
    mut x: Var,
    mask: &Mask,
    memory: Option<Var>,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x, mask, memory)?;
    }
    Ok(x)
}

/// Zero the weights and biases of every residual-branch output projection.
pub fn zero_output_projections(store: &mut ParamStore, blocks: &[Block]) {
    for b in blocks {
        for l in b.output_projections() {
            store.value_mut(l.w).data.iter_mut().for_each(|v| *v = 0.0);
            store.value_mut(l.b).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
