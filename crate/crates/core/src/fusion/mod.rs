//! Human-AI fusion classifier: per-modality volume encoders, a rater-vote
//! encoder, concatenation in the order T1, T2, raters, and a linear
//! projection to two logits.

mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use train::{train_fusion, FusionEpochLog, FusionOutcome, FusionTrainConfig};

use crate::encoder3d::{encode, init_encoder, EncoderLayout, ViTConfig};
use crate::error::{Error, Result};
use crate::manifest::Modality;
use crate::ndtensor::{Checkpoint, Graph, ParamId, Real, Rng, Tensor, Value};

/// Which evidence a fusion variant consumes. `rater_subset` holds 1-based
/// rater indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub use_raters: bool,
    pub rater_subset: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl AblationSpec {
    pub fn full(k: usize) -> Self {
        AblationSpec { use_raters: true, rater_subset: (1..=k).collect(), modalities: vec![Modality::T1, Modality::T2] }
    }

    pub fn without_haic() -> Self {
        AblationSpec { use_raters: false, rater_subset: vec![], modalities: vec![Modality::T1, Modality::T2] }
    }

    pub fn raters(subset: &[usize]) -> Self {
        AblationSpec { rater_subset: subset.to_vec(), ..Self::full(0) }
    }

    pub fn single_modality(m: Modality, k: usize) -> Self {
        AblationSpec { modalities: vec![m], ..Self::full(k) }
    }

    /// Rows of the ablation table: w/o HAIC, each single rater, each rater
    /// pair, each single modality, and the full model last.
    pub fn grid(k: usize) -> Vec<Self> {
        let mut out = vec![Self::without_haic()];
        out.extend((1..=k).map(|j| Self::raters(&[j])));
        if k > 2 {
            for a in 1..=k {
                for b in a + 1..=k {
                    out.push(Self::raters(&[a, b]));
                }
            }
        }
        out.push(Self::single_modality(Modality::T1, k));
        out.push(Self::single_modality(Modality::T2, k));
        out.push(Self::full(k));
        out
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("an ablation needs at least one modality".into()));
        }
        let mut m = self.modalities.clone();
        m.sort();
        m.dedup();
        if m != self.modalities {
            return Err(Error::Config("modalities must be listed once each, T1 before T2".into()));
        }
        if self.use_raters {
            if self.rater_subset.is_empty() {
                return Err(Error::Config("use_raters needs a non-empty rater_subset".into()));
            }
            if self.rater_subset.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("rater_subset must be strictly increasing".into()));
            }
            if let Some(&j) = self.rater_subset.iter().find(|&&j| j == 0 || j > k) {
                return Err(Error::Config(format!("rater index {j} outside 1..={k}")));
            }
        }
        Ok(())
    }

    pub fn rater_width(&self) -> usize {
        if self.use_raters {
            self.rater_subset.len()
        } else {
            0
        }
    }

    pub fn is_full(&self, k: usize) -> bool {
        *self == Self::full(k)
    }

    pub fn name(&self, k: usize) -> String {
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        if !self.use_raters {
            return if mods.len() == 2 { "w/o HAIC".into() } else { format!("{} only w/o HAIC", mods[0]) };
        }
        let raters = self.rater_subset.iter().map(|j| format!("R{j}")).collect::<Vec<_>>().join("+");
        match (mods.len(), self.rater_subset.len() == k) {
            (2, true) => "HAICOMM".into(),
            (2, false) => format!("{raters} labels"),
            (_, true) => format!("{} only w/ HAIC", mods[0]),
            (_, false) => format!("{} only w/ {raters}", mods[0]),
        }
    }
}

/// One case as the classifier sees it: token sequences per modality and the
/// full K-rater vote vector.
#[derive(Clone, Debug)]
pub struct FusionInput<T> {
    pub t1: Option<Tensor<T>>,
    pub t2: Option<Tensor<T>>,
    pub raters: Vec<u8>,
}

impl<T: Real> FusionInput<T> {
    fn tokens(&self, m: Modality) -> Result<&Tensor<T>> {
        match m {
            Modality::T1 => self.t1.as_ref(),
            Modality::T2 => self.t2.as_ref(),
        }
        .ok_or_else(|| Error::Data(format!("case lacks a {} volume", m.name())))
    }
}

fn prefix(m: Modality) -> &'static str {
    match m {
        Modality::T1 => "t1.",
        Modality::T2 => "t2.",
    }
}

#[derive(Clone, Debug)]
struct HeadLayout {
    rater: Option<(ParamId, ParamId)>,
    proj: (ParamId, ParamId),
}

/// Encoders live in `encoders` (`t1.*`, `t2.*`); the rater encoder and the
/// projection live in `head` (`rater.*`, `proj.*`).
#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub cfg: ViTConfig,
    pub spec: AblationSpec,
    pub n_raters: usize,
    pub encoders: Checkpoint<T>,
    pub head: Checkpoint<T>,
    layouts: Vec<(Modality, EncoderLayout)>,
    head_layout: HeadLayout,
}

fn id<T: Real>(ck: &Checkpoint<T>, name: &str) -> Result<ParamId> {
    ck.id(name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))
}

/// Builds the variant described by `spec`, copying φ* (`enc.*` in `phi`)
/// into every selected modality encoder.
pub fn build_ablation<T: Real>(
    spec: &AblationSpec,
    phi: &Checkpoint<T>,
    cfg: &ViTConfig,
    tokens: usize,
    n_raters: usize,
    rng: &mut Rng,
) -> Result<FusionModel<T>> {
    spec.validate(n_raters)?;
    cfg.validate()?;
    let mut encoders = Checkpoint::new();
    for &m in &spec.modalities {
        let before = encoders.len();
        init_encoder(&mut encoders, prefix(m), cfg, tokens, rng);
        let expected = encoders.len() - before;
        let copied = encoders.load_prefixed(phi, crate::encoder3d::ENCODER_PREFIX, prefix(m))?;
        if copied != expected {
            return Err(Error::Format(format!(
                "pretrained encoder supplies {copied} of {expected} {} parameters",
                m.name()
            )));
        }
    }
    let e = cfg.embed_dim;
    let mut head = Checkpoint::new();
    if spec.use_raters {
        head.push("rater.w", crate::encoder3d::xavier(rng, spec.rater_width(), e));
        head.push("rater.b", Tensor::zeros(&[e]));
    }
    let blocks = spec.modalities.len() + spec.use_raters as usize;
    head.push("proj.w", crate::encoder3d::xavier(rng, blocks * e, 2));
    head.push("proj.b", Tensor::zeros(&[2]));
    FusionModel::from_parts(cfg.clone(), spec.clone(), n_raters, encoders, head)
}

impl<T: Real> FusionModel<T> {
    pub fn from_parts(
        cfg: ViTConfig,
        spec: AblationSpec,
        n_raters: usize,
        encoders: Checkpoint<T>,
        head: Checkpoint<T>,
    ) -> Result<Self> {
        spec.validate(n_raters)?;
        let layouts = spec
            .modalities
            .iter()
            .map(|&m| EncoderLayout::resolve(&encoders, prefix(m), &cfg).map(|l| (m, l)))
            .collect::<Result<Vec<_>>>()?;
        let rater = if spec.use_raters { Some((id(&head, "rater.w")?, id(&head, "rater.b")?)) } else { None };
        let head_layout = HeadLayout { rater, proj: (id(&head, "proj.w")?, id(&head, "proj.b")?) };
        let width = head.tensor(head_layout.proj.0).shape()[0];
        if width != cfg.embed_dim * (spec.modalities.len() + spec.use_raters as usize) {
            return Err(Error::Dimension(format!("projection input width {width} does not match the variant")));
        }
        Ok(FusionModel { cfg, spec, n_raters, encoders, head, layouts, head_layout })
    }

    /// Single checkpoint holding both parameter groups.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = self.encoders.clone();
        for (n, t) in self.head.iter() {
            ck.push(n, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(cfg: ViTConfig, spec: AblationSpec, n_raters: usize, ck: &Checkpoint<T>) -> Result<Self> {
        let mut encoders = Checkpoint::new();
        let mut head = Checkpoint::new();
        for (n, t) in ck.iter() {
            if n.starts_with("t1.") || n.starts_with("t2.") {
                encoders.push(n, t.clone());
            } else {
                head.push(n, t.clone());
            }
        }
        Self::from_parts(cfg, spec, n_raters, encoders, head)
    }

    pub fn projection_width(&self) -> usize {
        self.head.tensor(self.head_layout.proj.0).shape()[0]
    }

    pub fn rater_input_width(&self) -> usize {
        self.head_layout.rater.map_or(0, |(w, _)| self.head.tensor(w).shape()[0])
    }

    fn check_raters(&self, votes: &[u8]) -> Result<()> {
        if votes.len() != self.n_raters {
            return Err(Error::Config(format!(
                "model expects {} rater votes, got {}",
                self.n_raters,
                votes.len()
            )));
        }
        if votes.iter().any(|&v| v > 1) {
            return Err(Error::Data("rater votes must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Summary-token features `[1, E]` of each selected modality, in T1, T2
    /// order, built on `g` from bound encoder parameters.
    pub fn image_features(&self, g: &mut Graph<T>, enc: &[Value], input: &FusionInput<T>) -> Result<Vec<Value>> {
        let mut out = Vec::with_capacity(self.layouts.len());
        for (m, layout) in &self.layouts {
            let x = g.constant(input.tokens(*m)?.clone());
            let z = encode(g, enc, layout, x, None)?;
            out.push(g.narrow(z, 0, 0, 1)?);
        }
        Ok(out)
    }

    pub fn rater_feature(&self, g: &mut Graph<T>, head: &[Value], votes: &[u8]) -> Result<Option<Value>> {
        self.check_raters(votes)?;
        let Some((w, b)) = self.head_layout.rater else { return Ok(None) };
        let sel: Vec<T> = self.spec.rater_subset.iter().map(|&j| T::lit(votes[j - 1] as f64)).collect();
        let x = g.constant(Tensor::new(vec![1, sel.len()], sel)?);
        let h = g.linear(x, head[w.0], Some(head[b.0]))?;
        Ok(Some(g.gelu(h)))
    }

    /// Logits `[1, 2]` from the feature blocks in concatenation order.
    pub fn project(&self, g: &mut Graph<T>, head: &[Value], blocks: &[Value]) -> Result<Value> {
        let e = self.cfg.embed_dim;
        if let Some(&bad) = blocks.iter().find(|&&v| g.shape(v) != [1, e]) {
            return Err(Error::Dimension(format!("feature block {:?} is not [1, {e}]", g.shape(bad))));
        }
        let x = if blocks.len() == 1 { blocks[0] } else { g.concat(blocks, 1)? };
        let (w, b) = self.head_layout.proj;
        g.linear(x, head[w.0], Some(head[b.0]))
    }

    /// Logits from cached image features (`[1, E]` each) and raw votes.
    pub(crate) fn logits_from_cache(
        &self,
        g: &mut Graph<T>,
        head: &[Value],
        image: &[Tensor<T>],
        votes: &[u8],
    ) -> Result<Value> {
        let mut blocks: Vec<Value> = image.iter().map(|t| g.constant(t.clone())).collect();
        blocks.extend(self.rater_feature(g, head, votes)?);
        self.project(g, head, &blocks)
    }

    pub fn logits(&self, g: &mut Graph<T>, enc: &[Value], head: &[Value], input: &FusionInput<T>) -> Result<Value> {
        let mut blocks = self.image_features(g, enc, input)?;
        blocks.extend(self.rater_feature(g, head, &input.raters)?);
        self.project(g, head, &blocks)
    }

    /// Frozen-encoder image features for one case.
    pub fn cached_features(&self, input: &FusionInput<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let enc = self.encoders.bind(&mut g, |_| false);
        let f = self.image_features(&mut g, &enc, input)?;
        Ok(f.iter().map(|&v| g.value(v).clone()).collect())
    }
}

/// Feature triple of the unablated model: `(F_t1, F_t2, F_r)`, each of
/// length `embed_dim`. Missing pathways come back empty.
pub struct Features<T> {
    pub t1: Vec<T>,
    pub t2: Vec<T>,
    pub raters: Vec<T>,
}

pub fn encode_features<T: Real>(m: &FusionModel<T>, input: &FusionInput<T>) -> Result<Features<T>> {
    let mut g = Graph::new();
    let enc = m.encoders.bind(&mut g, |_| false);
    let head = m.head.bind(&mut g, |_| false);
    let img = m.image_features(&mut g, &enc, input)?;
    let r = m.rater_feature(&mut g, &head, &input.raters)?;
    let mut f = Features { t1: vec![], t2: vec![], raters: vec![] };
    for ((modality, _), v) in m.layouts.iter().zip(img) {
        let data = g.value(v).data().to_vec();
        match modality {
            Modality::T1 => f.t1 = data,
            Modality::T2 => f.t2 = data,
        }
    }
    if let Some(r) = r {
        f.raters = g.value(r).data().to_vec();
    }
    Ok(f)
}

fn softmax2(l: &[f64]) -> [f64; 2] {
    let mx = l[0].max(l[1]);
    let (a, b) = ((l[0] - mx).exp(), (l[1] - mx).exp());
    [a / (a + b), b / (a + b)]
}

/// `σ(π_η(F_t1 ⊕ F_t2 ⊕ F_r))` for precomputed feature blocks.
pub fn fuse_predict<T: Real>(m: &FusionModel<T>, blocks: &[Tensor<T>]) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let head = m.head.bind(&mut g, |_| false);
    let vals: Vec<Value> = blocks.iter().map(|t| g.constant(t.clone())).collect();
    let l = m.project(&mut g, &head, &vals)?;
    Ok(softmax2(&g.value(l).to_f64_vec()))
}

/// Class probabilities `(p_neg, p_pos)` for one case.
pub fn predict<T: Real>(m: &FusionModel<T>, input: &FusionInput<T>) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let enc = m.encoders.bind(&mut g, |_| false);
    let head = m.head.bind(&mut g, |_| false);
    let l = m.logits(&mut g, &enc, &head, input)?;
    Ok(softmax2(&g.value(l).to_f64_vec()))
}

pub fn predict_all<T: Real>(m: &FusionModel<T>, inputs: &[FusionInput<T>]) -> Result<Vec<[f64; 2]>> {
    inputs.par_iter().map(|x| predict(m, x)).collect()
}

pub(crate) fn predict_cached<T: Real>(m: &FusionModel<T>, image: &[Tensor<T>], votes: &[u8]) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let head = m.head.bind(&mut g, |_| false);
    let l = m.logits_from_cache(&mut g, &head, image, votes)?;
    Ok(softmax2(&g.value(l).to_f64_vec()))
}
