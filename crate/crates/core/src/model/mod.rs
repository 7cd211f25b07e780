//! Encoders for the real, generated and text modalities.
//!
//! The image side shares one backbone between two flows. The real flow runs
//! the backbone and the real projection head. The generated flow runs the same
//! backbone with low-rank adapters on every layer and its own projection head.
//! Only the generated flow's extra parameters train during alignment, so the
//! real flow keeps its pretrained behaviour.

mod graph;
mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use graph::{Graph, Trainable};
pub use layers::{
    Linear, LoraAdapter, LoraRank, MlpEncoder, Parameterized, ProjectionHead, RANK_REL_TOL,
};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Which weights the real flow uses at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RealFlowPolicy {
    /// Backbone without adapters, then the real projection head.
    #[default]
    FrozenBase,
    /// Backbone with the trained adapters, then the real projection head.
    LoraWithRealProj,
}

/// Architecture sizes; enough to rebuild a model skeleton from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub lora_rank: LoraRank,
    pub lora_alpha: f64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.lora_rank == LoraRank::Rank(0) {
            return Err(Error::Config("lora_rank must be >= 1 or \"full\"".into()));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// Image encoder with a real flow and a generated flow over a shared backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModalityEncoder {
    pub backbone: MlpEncoder,
    /// One per backbone layer; empty for full fine-tuning.
    pub adapters: Vec<LoraAdapter>,
    pub proj_real: ProjectionHead,
    pub proj_gen: ProjectionHead,
    /// Trainable copy of the backbone, present only for full fine-tuning.
    pub gen_backbone: Option<MlpEncoder>,
    pub real_flow_policy: RealFlowPolicy,
}

impl DualModalityEncoder {
    pub fn init<R: Rng + ?Sized>(dims: &ModelDims, policy: RealFlowPolicy, rng: &mut R) -> Self {
        let backbone = MlpEncoder::init(&[dims.image_dim, dims.hidden_dim, dims.hidden_dim], rng);
        let proj_real = ProjectionHead::init(dims.hidden_dim, dims.embed_dim, rng);
        let mut enc = Self {
            backbone,
            adapters: Vec::new(),
            proj_gen: proj_real.clone(),
            proj_real,
            gen_backbone: None,
            real_flow_policy: policy,
        };
        enc.reset_gen_flow(dims.lora_rank, dims.lora_alpha, rng);
        enc
    }

    /// Restarts the generated flow from the real one: zero-effect adapters
    /// (or a fresh backbone clone for full fine-tuning) and a copy of the real
    /// projection head.
    pub fn reset_gen_flow<R: Rng + ?Sized>(&mut self, rank: LoraRank, alpha: f64, rng: &mut R) {
        self.proj_gen = self.proj_real.clone();
        match rank {
            LoraRank::Rank(r) => {
                self.gen_backbone = None;
                self.adapters = self
                    .backbone
                    .layers
                    .iter()
                    .map(|l| LoraAdapter::init(l.in_dim(), l.out_dim(), r, alpha, rng))
                    .collect();
            }
            LoraRank::Full => {
                self.adapters.clear();
                self.gen_backbone = Some(self.backbone.clone());
            }
        }
    }

    fn adapted_backbone(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match &self.gen_backbone {
            Some(b) => b.forward(g, "image.gen_backbone", x, None),
            None => self
                .backbone
                .forward(g, "image.backbone", x, Some((&self.adapters, "image.adapter"))),
        }
    }

    /// Backbone without adapters and the real head, whatever the policy.
    /// Pretraining always runs this path.
    pub fn encode_base(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.backbone.forward(g, "image.backbone", x, None)?;
        self.proj_real.forward(g, "image.proj_real", h)
    }

    /// Real flow.
    pub fn encode_real(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = match self.real_flow_policy {
            RealFlowPolicy::FrozenBase => self.backbone.forward(g, "image.backbone", x, None)?,
            RealFlowPolicy::LoraWithRealProj => self.adapted_backbone(g, x)?,
        };
        self.proj_real.forward(g, "image.proj_real", h)
    }

    /// Generated flow: adapted backbone, then the generated projection head.
    pub fn encode_gen(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.adapted_backbone(g, x)?;
        self.proj_gen.forward(g, "image.proj_gen", h)
    }

    /// Largest numerical update rank over all adapters.
    pub fn max_update_rank(&self) -> usize {
        self.adapters
            .iter()
            .map(LoraAdapter::effective_update_rank)
            .max()
            .unwrap_or(0)
    }
}

impl Parameterized for DualModalityEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.visit(&format!("{prefix}.backbone"), out);
        for (i, a) in self.adapters.iter().enumerate() {
            a.visit(&format!("{prefix}.adapter.{i}"), out);
        }
        self.proj_real.visit(&format!("{prefix}.proj_real"), out);
        self.proj_gen.visit(&format!("{prefix}.proj_gen"), out);
        if let Some(b) = &self.gen_backbone {
            b.visit(&format!("{prefix}.gen_backbone"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.visit_mut(&format!("{prefix}.backbone"), out);
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.visit_mut(&format!("{prefix}.adapter.{i}"), out);
        }
        self.proj_real.visit_mut(&format!("{prefix}.proj_real"), out);
        self.proj_gen.visit_mut(&format!("{prefix}.proj_gen"), out);
        if let Some(b) = &mut self.gen_backbone {
            b.visit_mut(&format!("{prefix}.gen_backbone"), out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub backbone: MlpEncoder,
    pub proj: ProjectionHead,
}

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        Self {
            backbone: MlpEncoder::init(&[dims.text_dim, dims.hidden_dim, dims.hidden_dim], rng),
            proj: ProjectionHead::init(dims.hidden_dim, dims.embed_dim, rng),
        }
    }

    pub fn encode(&self, g: &mut Graph, t: Var) -> Result<Var> {
        let h = self.backbone.forward(g, "text.backbone", t, None)?;
        self.proj.forward(g, "text.proj", h)
    }
}

impl Parameterized for TextEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.visit(&format!("{prefix}.backbone"), out);
        self.proj.visit(&format!("{prefix}.proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.visit_mut(&format!("{prefix}.backbone"), out);
        self.proj.visit_mut(&format!("{prefix}.proj"), out);
    }
}

/// Linear classifier over embeddings (the downstream probe).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub linear: Linear,
}

impl LinearHead {
    pub fn init<R: Rng + ?Sized>(d_emb: usize, n_classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::init(d_emb, n_classes, rng),
        }
    }

    pub fn zeros(d_emb: usize, n_classes: usize) -> Self {
        Self {
            linear: Linear {
                weight: Tensor::zeros(vec![d_emb, n_classes]),
                bias: Tensor::zeros(vec![1, n_classes]),
            },
        }
    }

    pub fn n_classes(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn logits(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        self.linear.forward(g, "head", emb, None)
    }

    pub fn logits_of(&self, emb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let e = g.input(emb.clone());
        let l = self.logits(&mut g, e)?;
        Ok(g.value(l).clone())
    }
}

impl Parameterized for LinearHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.linear.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.linear.visit_mut(prefix, out);
    }
}

/// Every trainable piece of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct GmailModel {
    pub dims: ModelDims,
    pub image: DualModalityEncoder,
    pub text: TextEncoder,
    pub head: LinearHead,
}

impl GmailModel {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, policy: RealFlowPolicy, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let image = DualModalityEncoder::init(&dims, policy, rng);
        let text = TextEncoder::init(&dims, rng);
        let head = LinearHead::init(dims.embed_dim, dims.n_classes, rng);
        Ok(Self {
            dims,
            image,
            text,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.image.visit("image", &mut out);
        self.text.visit("text", &mut out);
        self.head.visit("head", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.image.visit_mut("image", &mut out);
        self.text.visit_mut("text", &mut out);
        self.head.visit_mut("head", &mut out);
        out
    }

    pub fn encode_real(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.image.encode_real(g, x)
    }

    pub fn encode_gen(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.image.encode_gen(g, x)
    }

    pub fn encode_base(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.image.encode_base(g, x)
    }

    pub fn encode_text(&self, g: &mut Graph, t: Var) -> Result<Var> {
        self.text.encode(g, t)
    }

    pub fn embed_real(&self, x: &Tensor) -> Result<Tensor> {
        self.embed_with(x, |m, g, v| m.encode_real(g, v))
    }

    pub fn embed_gen(&self, x: &Tensor) -> Result<Tensor> {
        self.embed_with(x, |m, g, v| m.encode_gen(g, v))
    }

    pub fn embed_text(&self, t: &Tensor) -> Result<Tensor> {
        self.embed_with(t, |m, g, v| m.encode_text(g, v))
    }

    fn embed_with(
        &self,
        x: &Tensor,
        f: impl Fn(&Self, &mut Graph, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut g = Graph::inference();
        let v = g.input(x.clone());
        let out = f(self, &mut g, v)?;
        Ok(g.value(out).clone())
    }
}
