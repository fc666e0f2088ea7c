//! Transformer building blocks expressed over parameter indices.

use std::rc::Rc;

use rand::Rng;

use super::params::ParamBuilder;
use crate::autograd::{AttnShape, Graph, Var};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub(crate) fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = pb.normal(&format!("{name}.weight"), din, dout);
        let b = bias.then(|| pb.zeros(&format!("{name}.bias"), 1, dout));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub(crate) fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Self {
        Norm { gamma: pb.ones(&format!("{name}.gamma"), 1, d), beta: pb.zeros(&format!("{name}.beta"), 1, d) }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub(crate) fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Self {
        Attention {
            q: Linear::new(pb, &format!("{name}.q"), d, d, true),
            k: Linear::new(pb, &format!("{name}.k"), d, d, true),
            v: Linear::new(pb, &format!("{name}.v"), d, d, true),
            o: Linear::new(pb, &format!("{name}.o"), d, d, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub(crate) fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, hidden: usize) -> Self {
        Mlp { fc1: Linear::new(pb, &format!("{name}.fc1"), d, hidden, true), fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, d, true) }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Inverted dropout applied through a constant mask. Each call draws its
/// mask from a fresh child seed so masks are independent per site.
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
    pub site: u64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, seed, site: 0 }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        self.site += 1;
        let mut rng = seed::rng(seed::derive(self.seed, self.site));
        let (r, c) = g.value(x).shape();
        let keep = 1.0 / (1.0 - self.rate);
        let data = (0..r * c).map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep }).collect();
        let mask = g.constant(Tensor::from_vec(r, c, data));
        g.mul(x, mask)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub(crate) fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, hidden: usize) -> Self {
        Block {
            ln1: Norm::new(pb, &format!("{name}.ln1"), d),
            attn: Attention::new(pb, &format!("{name}.attn"), d),
            ln2: Norm::new(pb, &format!("{name}.ln2"), d),
            mlp: Mlp::new(pb, &format!("{name}.mlp"), d, hidden),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mask: Option<&[bool]>,
        dropout: &mut Option<Dropout>,
    ) -> Var {
        let h = self.ln1.forward(g, p, x);
        let a = self_attention(g, p, &self.attn, h, batch, seq, heads, mask);
        let a = drop(g, dropout, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, p, x);
        let m = self.mlp.forward(g, p, h);
        let m = drop(g, dropout, m);
        g.add(x, m)
    }
}

fn drop(g: &mut Graph, dropout: &mut Option<Dropout>, x: Var) -> Var {
    match dropout {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

#[allow(clippy::too_many_arguments)]
fn self_attention(
    g: &mut Graph,
    p: &[Var],
    attn: &Attention,
    h: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    mask: Option<&[bool]>,
) -> Var {
    let q = attn.q.forward(g, p, h);
    let k = attn.k.forward(g, p, h);
    let v = attn.v.forward(g, p, h);
    let o = g.attention(q, k, v, AttnShape { batch, q_len: seq, k_len: seq, heads }, mask);
    attn.o.forward(g, p, o)
}

/// Fusion block: text self-attention, cross-attention into image states, MLP.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub ln1: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

/// Image-side inputs to a fusion layer, shared by every pair in the batch.
pub struct CrossKv<'a> {
    /// `[n_images * image_seq, d]`
    pub image_states: Var,
    pub image_seq: usize,
    /// Image index for each fused pair.
    pub pair_images: &'a [usize],
    /// Scales the cross-attention residual; 0 removes the image pathway.
    pub gate: f64,
}

impl FusionBlock {
    pub(crate) fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, hidden: usize) -> Self {
        FusionBlock {
            ln1: Norm::new(pb, &format!("{name}.ln1"), d),
            self_attn: Attention::new(pb, &format!("{name}.self_attn"), d),
            ln_cross: Norm::new(pb, &format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(pb, &format!("{name}.cross_attn"), d),
            ln2: Norm::new(pb, &format!("{name}.ln2"), d),
            mlp: Mlp::new(pb, &format!("{name}.mlp"), d, hidden),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        pairs: usize,
        text_seq: usize,
        heads: usize,
        text_mask: &[bool],
        kv: &CrossKv<'_>,
    ) -> Var {
        let h = self.ln1.forward(g, p, x);
        let a = self_attention(g, p, &self.self_attn, h, pairs, text_seq, heads, Some(text_mask));
        let x = g.add(x, a);

        // keys/values are projected once per image, then gathered per pair
        let h = self.ln_cross.forward(g, p, x);
        let q = self.cross_attn.q.forward(g, p, h);
        let k_all = self.cross_attn.k.forward(g, p, kv.image_states);
        let v_all = self.cross_attn.v.forward(g, p, kv.image_states);
        let rows: Vec<usize> = kv
            .pair_images
            .iter()
            .flat_map(|&i| (i * kv.image_seq)..((i + 1) * kv.image_seq))
            .collect();
        let rows = Rc::new(rows);
        let k = g.gather_rows(k_all, rows.clone());
        let v = g.gather_rows(v_all, rows);
        let c = g.attention(q, k, v, AttnShape { batch: pairs, q_len: text_seq, k_len: kv.image_seq, heads }, None);
        let c = self.cross_attn.o.forward(g, p, c);
        let c = if kv.gate == 1.0 { c } else { g.scale(c, kv.gate) };
        let x = g.add(x, c);

        let h = self.ln2.forward(g, p, x);
        let m = self.mlp.forward(g, p, h);
        g.add(x, m)
    }
}
