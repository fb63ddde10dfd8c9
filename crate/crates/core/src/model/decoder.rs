//! Token decoder: a saliency token, a boundary token and shallow task
//! prompts travel with the patch tokens through global attention at
//! progressively finer resolutions.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{index, Linear, Norm, TransformerLayer};
use crate::model::params::{Bound, Init, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    /// Encoder stage whose resolution (and skip features) this level uses.
    pub stage: usize,
    pub side: usize,
    pub up_proj: Linear,
    pub skip_proj: Linear,
    pub block: TransformerLayer,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub saliency_token: ParamId,
    pub boundary_token: ParamId,
    pub levels: Vec<DecoderLevel>,
    pub out_norm: Norm,
    width: usize,
    image_size: usize,
}

/// Mask and boundary logits at input resolution, each `(H, W)`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars<'t> {
    pub mask_logits: Var<'t>,
    pub boundary_logits: Var<'t>,
}

/// Rows of a separable bilinear resize from `n_in` to `n_out` samples
/// (half-pixel centers, edge clamped).
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Tensor {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let w1 = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - w1;
        m[o * n_in + i1] += w1;
    }
    Tensor::new(&[n_out, n_in], m).expect("bilinear shape")
}

fn upsample_nearest_index(side: usize) -> Rc<Vec<Option<usize>>> {
    let out = 2 * side;
    index((0..out * out).map(|k| {
        let (r, c) = (k / out, k % out);
        (r / 2) * side + c / 2
    }))
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_width;
        let saliency_token = init.trunc_normal("decoder.saliency_token", &[1, d])?;
        let boundary_token = init.trunc_normal("decoder.boundary_token", &[1, d])?;
        let levels = cfg
            .decoder_levels()
            .into_iter()
            .map(|stage| {
                let name = format!("decoder.level{stage}");
                Ok(DecoderLevel {
                    stage,
                    side: cfg.stage_side(stage),
                    up_proj: Linear::new(init, &format!("{name}.up_proj"), d, d, true)?,
                    skip_proj: Linear::new(init, &format!("{name}.skip_proj"), cfg.stage_channels[stage], d, true)?,
                    block: TransformerLayer::new(init, &format!("{name}.block"), d, cfg.decoder_heads, cfg.mlp_ratio)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            saliency_token,
            boundary_token,
            levels,
            out_norm: Norm::new(init, "decoder.out_norm", d)?,
            width: d,
            image_size: cfg.image_size,
        })
    }

    /// Sequence length attended over at `level`: saliency and boundary
    /// tokens, `n_prompt` task prompts and the level's patch tokens.
    pub fn sequence_len(&self, level: usize, n_prompt: usize) -> usize {
        let side = self.levels[level].side;
        2 + n_prompt + side * side
    }

    /// `bottleneck` is `(l, d)` at the coarsest resolution; `skips[i]` is the
    /// encoder feature of stage `i`; `task_prompt` is `(N, d)` or absent.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        bottleneck: Var<'t>,
        skips: &[Var<'t>],
        task_prompt: Option<Var<'t>>,
    ) -> Result<PredictionVars<'t>> {
        let d = self.width;
        let mut sal = p.get(self.saliency_token);
        let mut bnd = p.get(self.boundary_token);
        let mut prompt = task_prompt;
        let n_prompt = prompt.map(|v| v.shape()[0]).unwrap_or(0);
        let mut f = bottleneck;
        for (j, level) in self.levels.iter().enumerate() {
            let skip = skips.get(level.stage).copied().ok_or_else(|| {
                Error::shape("decoder", format!("missing skip for stage {}", level.stage))
            })?;
            let coarse = level.side / 2;
            if f.shape() != [coarse * coarse, d] {
                return Err(Error::shape(
                    "decoder",
                    format!("level {} expects ({}, {d}) input, got {:?}", level.stage, coarse * coarse, f.shape()),
                ));
            }
            let up = f.gather(d, upsample_nearest_index(coarse), &[level.side * level.side, d])?;
            let up = level.up_proj.forward(p, up)?;
            f = up.add(level.skip_proj.forward(p, skip)?)?;

            let l = level.side * level.side;
            let mut parts = vec![sal, bnd];
            parts.extend(prompt);
            parts.push(f);
            let t = self.sequence_len(j, n_prompt);
            let x = Var::concat(&parts, 0)?.reshape(&[1, t, d])?;
            let y = level.block.forward(p, x, None)?.reshape(&[t, d])?;
            sal = y.slice(0, 0, 1)?;
            bnd = y.slice(0, 1, 1)?;
            if n_prompt > 0 {
                prompt = Some(y.slice(0, 2, n_prompt)?);
            }
            f = y.slice(0, 2 + n_prompt, l)?;
        }

        let side = self.levels.last().map(|l| l.side).unwrap_or(0);
        let feats = self.out_norm.forward(p, f)?;
        let tape = p.tape();
        let up = tape.constant(bilinear_matrix(side, self.image_size));
        let to_map = |token: Var<'t>| -> Result<Var<'t>> {
            let grid = feats.matmul_t(token)?.reshape(&[side, side])?;
            up.matmul(grid)?.matmul_t(up)
        };
        Ok(PredictionVars {
            mask_logits: to_map(sal)?,
            boundary_logits: to_map(bnd)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m = bilinear_matrix(16, 64);
        for row in m.data().chunks_exact(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // same size is the identity
        let id = bilinear_matrix(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(id.data()[i * 5 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
