//! The shared encoder, convertor and decoder backbone.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod window;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::prompt::PromptBank;
use crate::rng;
use crate::tensor::Tensor;
use crate::types::{Domain, Task};

pub use config::{ModelConfig, NUM_STAGES};
pub use decoder::{Decoder, PredictionVars};
pub use encoder::{Encoder, StagePrompts};
pub use layers::{Linear, Mlp, Norm, TransformerLayer};
pub use params::{Bound, GradBuffer, Init, ParamId, ParamStore};

/// Network input: a `(3, H, W)` RGB map and an optional `(1, H, W)`
/// auxiliary map.
#[derive(Clone, Copy, Debug)]
pub struct Input<'a> {
    pub rgb: &'a Tensor,
    pub aux: Option<&'a Tensor>,
}

/// Mask and boundary logits, each `(H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask_logits: Tensor,
    pub boundary_logits: Tensor,
}

impl Prediction {
    pub fn mask_probs(&self) -> Tensor {
        self.mask_logits.map(crate::autodiff::sigmoid)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub neck: Linear,
    pub neck_norm: Norm,
    pub fusion: Mlp,
    pub convertor: Vec<TransformerLayer>,
    pub decoder: Decoder,
    pub bank: PromptBank,
}

impl Model {
    /// Builds a freshly initialized model; weights depend only on the config
    /// (including its `init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::seeded(rng::mix_seed(&[config.init_seed, 0x1417]));
        let mut init = Init {
            store: &mut params,
            rng: &mut r,
        };
        let d = config.decoder_width;
        let c_last = config.stage_channels[NUM_STAGES - 1];
        let encoder = Encoder::new(&mut init, &config)?;
        let neck = Linear::new(&mut init, "neck.proj", c_last, d, true)?;
        let neck_norm = Norm::new(&mut init, "neck.norm", d)?;
        let fusion = Mlp::new(&mut init, "fusion", 2 * d, config.mlp_ratio * d, d)?;
        let convertor = (0..config.convertor_depth)
            .map(|k| TransformerLayer::new(&mut init, &format!("convertor.layer{k}"), d, config.decoder_heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&mut init, &config)?;
        let bank = PromptBank::new(&mut init, &config)?;
        Ok(Model {
            config,
            params,
            encoder,
            neck,
            neck_norm,
            fusion,
            convertor,
            decoder,
            bank,
        })
    }

    /// Number of scalars held by prompt tensors.
    pub fn prompt_param_count(&self) -> usize {
        self.params.numel_with_prefix(crate::prompt::PROMPT_PREFIX)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Projects final-stage encoder features to the decoder width.
    pub fn project<'t>(&self, p: &Bound<'t>, f: Var<'t>) -> Result<Var<'t>> {
        self.neck_norm.forward(p, self.neck.forward(p, f)?)
    }

    /// Channel concat of two `(l, d)` streams followed by the fusion MLP.
    pub fn fuse_modalities<'t>(&self, p: &Bound<'t>, rgb: Var<'t>, aux: Var<'t>) -> Result<Var<'t>> {
        if rgb.shape() != aux.shape() || rgb.shape().len() != 2 {
            return Err(Error::shape(
                "fuse_modalities",
                format!("streams {:?} and {:?} differ", rgb.shape(), aux.shape()),
            ));
        }
        self.fusion.forward(p, Var::concat(&[rgb, aux], 1)?)
    }

    /// Global transformer layers over `(l, d)` tokens.
    pub fn convertor_forward<'t>(&self, p: &Bound<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let shape = f.shape();
        if shape.len() != 2 || shape[1] != self.config.decoder_width {
            return Err(Error::shape(
                "convertor",
                format!("expected (l, {}), got {shape:?}", self.config.decoder_width),
            ));
        }
        let mut x = f.reshape(&[1, shape[0], shape[1]])?;
        for layer in &self.convertor {
            x = layer.forward(p, x, None)?;
        }
        x.reshape(&shape)
    }

    /// Full forward pass under the (domain, task) prompt composition.
    ///
    /// The RGB stream always carries the rgb domain prompts; the auxiliary
    /// stream, when the input has one, carries the selected domain's prompts.
    /// Both carry the selected task prompts. Streams are fused whenever an
    /// auxiliary map is present.
    pub fn forward<'t>(&self, p: &Bound<'t>, input: Input<'_>, domain: Domain, task: Task) -> Result<PredictionVars<'t>> {
        if domain.has_aux() && input.aux.is_none() {
            return Err(Error::MissingAux(domain.to_string()));
        }
        let tape = p.tape();
        let rgb_sel = self.bank.select(Domain::Rgb, task);
        let sel = self.bank.select(domain, task);

        let rgb = tape.constant(input.rgb.clone());
        let rgb_feats = self.encoder.forward(p, rgb, &rgb_sel.bind(p))?;
        let rgb_top = self.project(p, rgb_feats[NUM_STAGES - 1])?;

        let (top, skips) = match input.aux {
            Some(aux) => {
                let aux3 = replicate_channels(aux)?;
                let aux_feats = self.encoder.forward(p, tape.constant(aux3), &sel.bind(p))?;
                let aux_top = self.project(p, aux_feats[NUM_STAGES - 1])?;
                let fused = self.fuse_modalities(p, rgb_top, aux_top)?;
                let skips = rgb_feats
                    .iter()
                    .zip(&aux_feats)
                    .map(|(a, b)| a.add(*b))
                    .collect::<Result<Vec<_>>>()?;
                (fused, skips)
            }
            None => (rgb_top, rgb_feats),
        };
        let f = self.convertor_forward(p, top)?;
        let task_prompt = sel.decoder_task.map(|id| p.get(id));
        self.decoder.forward(p, f, &skips, task_prompt)
    }

    /// Forward pass on a throwaway tape.
    pub fn predict(&self, input: Input<'_>, domain: Domain, task: Task) -> Result<Prediction> {
        let tape = crate::autodiff::Tape::new();
        let p = Bound::new(&tape, &self.params);
        let out = self.forward(&p, input, domain, task)?;
        Ok(Prediction {
            mask_logits: (*out.mask_logits.value()).clone(),
            boundary_logits: (*out.boundary_logits.value()).clone(),
        })
    }
}

/// `(1, H, W)` to `(3, H, W)` by repeating the single channel.
fn replicate_channels(aux: &Tensor) -> Result<Tensor> {
    match aux.shape() {
        [1, h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(aux.data());
            }
            Tensor::new(&[3, *h, *w], data)
        }
        s => Err(Error::shape("model_forward", format!("aux map must be (1, H, W), got {s:?}"))),
    }
}
