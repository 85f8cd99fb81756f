//! Pre-LN transformer stacks and the volume encoder built from them.

use super::{ViTConfig, LN_EPS};
use crate::error::{Error, Result};
use crate::ndtensor::{Checkpoint, Graph, ParamId, Real, Rng, Tensor, Value};

pub(crate) fn xavier<T: Real>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.uniform_in(-a, a))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive fan")
}

pub(crate) fn normal<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(std * rng.normal())).collect()).expect("positive shape")
}

pub(crate) fn lookup<T: Real>(ck: &Checkpoint<T>, name: &str) -> Result<ParamId> {
    ck.id(name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))
}

#[derive(Clone, Debug)]
pub(crate) struct BlockLayout {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

fn init_block<T: Real>(ck: &mut Checkpoint<T>, p: &str, width: usize, mlp: usize, rng: &mut Rng) {
    ck.push(format!("{p}ln1.g"), Tensor::full(&[width], T::one()));
    ck.push(format!("{p}ln1.b"), Tensor::zeros(&[width]));
    ck.push(format!("{p}qkv.w"), xavier(rng, width, 3 * width));
    ck.push(format!("{p}qkv.b"), Tensor::zeros(&[3 * width]));
    ck.push(format!("{p}proj.w"), xavier(rng, width, width));
    ck.push(format!("{p}proj.b"), Tensor::zeros(&[width]));
    ck.push(format!("{p}ln2.g"), Tensor::full(&[width], T::one()));
    ck.push(format!("{p}ln2.b"), Tensor::zeros(&[width]));
    ck.push(format!("{p}fc1.w"), xavier(rng, width, mlp));
    ck.push(format!("{p}fc1.b"), Tensor::zeros(&[mlp]));
    ck.push(format!("{p}fc2.w"), xavier(rng, mlp, width));
    ck.push(format!("{p}fc2.b"), Tensor::zeros(&[width]));
}

fn pair<T: Real>(ck: &Checkpoint<T>, p: &str, what: &str, a: &str, b: &str) -> Result<(ParamId, ParamId)> {
    Ok((lookup(ck, &format!("{p}{what}.{a}"))?, lookup(ck, &format!("{p}{what}.{b}"))?))
}

impl BlockLayout {
    fn resolve<T: Real>(ck: &Checkpoint<T>, p: &str) -> Result<Self> {
        Ok(BlockLayout {
            ln1: pair(ck, p, "ln1", "g", "b")?,
            qkv: pair(ck, p, "qkv", "w", "b")?,
            proj: pair(ck, p, "proj", "w", "b")?,
            ln2: pair(ck, p, "ln2", "g", "b")?,
            fc1: pair(ck, p, "fc1", "w", "b")?,
            fc2: pair(ck, p, "fc2", "w", "b")?,
        })
    }
}

fn at(p: &[Value], id: ParamId) -> Value {
    p[id.0]
}

fn affine<T: Real>(g: &mut Graph<T>, p: &[Value], x: Value, (w, b): (ParamId, ParamId)) -> Result<Value> {
    g.linear(x, at(p, w), Some(at(p, b)))
}

fn norm<T: Real>(g: &mut Graph<T>, p: &[Value], x: Value, (w, b): (ParamId, ParamId)) -> Result<Value> {
    g.layer_norm(x, at(p, w), at(p, b), LN_EPS)
}

fn attention<T: Real>(g: &mut Graph<T>, p: &[Value], b: &BlockLayout, x: Value, heads: usize) -> Result<Value> {
    let width = g.shape(x)[1];
    let d = width / heads;
    let qkv = affine(g, p, x, b.qkv)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.narrow(qkv, 1, h * d, d)?;
        let k = g.narrow(qkv, 1, width + h * d, d)?;
        let v = g.narrow(qkv, 1, 2 * width + h * d, d)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        outs.push(g.matmul(a, v)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    affine(g, p, cat, b.proj)
}

fn block<T: Real>(g: &mut Graph<T>, p: &[Value], b: &BlockLayout, x: Value, heads: usize) -> Result<Value> {
    let h = norm(g, p, x, b.ln1)?;
    let h = attention(g, p, b, h, heads)?;
    let x = g.add(x, h)?;
    let h = norm(g, p, x, b.ln2)?;
    let h = affine(g, p, h, b.fc1)?;
    let h = g.gelu(h);
    let h = affine(g, p, h, b.fc2)?;
    g.add(x, h)
}

/// Blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub(crate) struct Stack {
    blocks: Vec<BlockLayout>,
    ln: (ParamId, ParamId),
    heads: usize,
}

impl Stack {
    pub(crate) fn init<T: Real>(ck: &mut Checkpoint<T>, p: &str, n: usize, width: usize, mlp: usize, rng: &mut Rng) {
        for i in 0..n {
            init_block(ck, &format!("{p}blk{i}."), width, mlp, rng);
        }
        ck.push(format!("{p}ln.g"), Tensor::full(&[width], T::one()));
        ck.push(format!("{p}ln.b"), Tensor::zeros(&[width]));
    }

    pub(crate) fn resolve<T: Real>(ck: &Checkpoint<T>, p: &str, n: usize, heads: usize) -> Result<Self> {
        let blocks = (0..n).map(|i| BlockLayout::resolve(ck, &format!("{p}blk{i}."))).collect::<Result<_>>()?;
        Ok(Stack { blocks, ln: pair(ck, p, "ln", "g", "b")?, heads })
    }

    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Value], mut x: Value) -> Result<Value> {
        for b in &self.blocks {
            x = block(g, p, b, x, self.heads)?;
        }
        norm(g, p, x, self.ln)
    }
}

/// Parameter handles of one volume encoder inside a checkpoint.
#[derive(Clone, Debug)]
pub struct EncoderLayout {
    patch: (ParamId, ParamId),
    summary: ParamId,
    pos: ParamId,
    stack: Stack,
    tokens: usize,
}

/// Adds encoder parameters under `prefix`: patch embedding, summary token,
/// positional embeddings for `tokens + 1` positions, and the block stack.
pub fn init_encoder<T: Real>(ck: &mut Checkpoint<T>, prefix: &str, cfg: &ViTConfig, tokens: usize, rng: &mut Rng) {
    let e = cfg.embed_dim;
    ck.push(format!("{prefix}patch.w"), xavier(rng, cfg.patch_len(), e));
    ck.push(format!("{prefix}patch.b"), Tensor::zeros(&[e]));
    ck.push(format!("{prefix}summary"), normal(rng, &[1, e], 0.02));
    ck.push(format!("{prefix}pos"), normal(rng, &[tokens + 1, e], 0.02));
    Stack::init(ck, prefix, cfg.blocks, e, cfg.mlp_dim(e), rng);
}

impl EncoderLayout {
    pub fn resolve<T: Real>(ck: &Checkpoint<T>, prefix: &str, cfg: &ViTConfig) -> Result<Self> {
        let pos = lookup(ck, &format!("{prefix}pos"))?;
        let tokens = ck.tensor(pos).shape()[0] - 1;
        Ok(EncoderLayout {
            patch: pair(ck, prefix, "patch", "w", "b")?,
            summary: lookup(ck, &format!("{prefix}summary"))?,
            pos,
            stack: Stack::resolve(ck, prefix, cfg.blocks, cfg.heads)?,
            tokens,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub(crate) fn pos_id(&self) -> ParamId {
        self.pos
    }
}

/// Encodes `tokens` (`[T, patch_len]`). With `visible = Some(idx)` only those
/// tokens are embedded; each keeps its own positional embedding. Output is
/// `[1 + |visible|, embed_dim]` with the summary token first.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &[Value],
    layout: &EncoderLayout,
    tokens: Value,
    visible: Option<&[usize]>,
) -> Result<Value> {
    let n = g.shape(tokens)[0];
    if n != layout.tokens {
        return Err(Error::Dimension(format!("encoder expects {} tokens, got {n}", layout.tokens)));
    }
    let (x, rows): (Value, Vec<usize>) = match visible {
        Some(idx) => (g.gather(tokens, idx)?, std::iter::once(0).chain(idx.iter().map(|&i| i + 1)).collect()),
        None => (tokens, (0..=n).collect()),
    };
    let x = affine(g, p, x, layout.patch)?;
    let x = g.concat(&[at(p, layout.summary), x], 0)?;
    let pos = if rows.len() == n + 1 { at(p, layout.pos) } else { g.gather(at(p, layout.pos), &rows)? };
    let x = g.add(x, pos)?;
    layout.stack.forward(g, p, x)
}
