//! Hierarchical windowed-attention encoder with deep prompt injection.
//!
//! At the start of every stage the selected domain and task prompts are
//! prepended (after replication) to the tokens of each window. Each layer
//! attends jointly over `[domain prompts; task prompts; window tokens]`, and
//! the prompt outputs are averaged over windows before feeding the next
//! layer. Prompts are dropped at the end of the stage; the next stage injects
//! its own.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, NUM_STAGES};
use crate::model::layers::{index, Linear, Norm, TransformerLayer};
use crate::model::params::{Bound, Init, ParamId};
use crate::model::window::{partition_shifted, reverse_shifted, shift_mask};
use crate::tensor::Tensor;

/// One windowed-attention layer plus its per-head positional bias over the
/// `m^2 x m^2` patch block.
#[derive(Clone, Debug)]
pub struct WindowLayer {
    pub block: TransformerLayer,
    pub rel_bias: ParamId,
    pub window: usize,
    pub shift: usize,
}

/// Prompt tokens travelling through one stage. Either set may be absent
/// (zero-length prompts).
#[derive(Clone, Copy, Debug)]
pub struct StagePrompts<'t> {
    pub domain: Option<Var<'t>>,
    pub task: Option<Var<'t>>,
}

impl<'t> StagePrompts<'t> {
    pub fn none() -> Self {
        StagePrompts {
            domain: None,
            task: None,
        }
    }

    fn lengths(&self) -> (usize, usize) {
        let n = |v: &Option<Var<'t>>| v.map(|v| v.shape()[0]).unwrap_or(0);
        (n(&self.domain), n(&self.task))
    }
}

/// Bias and mask added to attention scores for a batch of prompted windows:
/// `(windows, heads, n + m^2, n + m^2)`. Prompt rows and columns receive
/// neither positional bias nor mask.
fn window_score_bias<'t>(
    p: &Bound<'t>,
    layer: &WindowLayer,
    heads: usize,
    windows: usize,
    n_prompt: usize,
    mask: Option<&Tensor>,
) -> Result<Var<'t>> {
    let mm = layer.window * layer.window;
    let t = n_prompt + mm;
    let mut idx = Vec::with_capacity(windows * heads * t * t);
    let mut mask_full = mask.map(|_| vec![0.0; windows * heads * t * t]);
    for w in 0..windows {
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    if i < n_prompt || j < n_prompt {
                        idx.push(None);
                        continue;
                    }
                    let (pi, pj) = (i - n_prompt, j - n_prompt);
                    idx.push(Some((h * mm + pi) * mm + pj));
                    if let (Some(full), Some(m)) = (mask_full.as_mut(), mask) {
                        full[((w * heads + h) * t + i) * t + j] = m.data()[(w * mm + pi) * mm + pj];
                    }
                }
            }
        }
    }
    let shape = [windows, heads, t, t];
    let bias = p.get(layer.rel_bias).gather(1, Rc::new(idx), &shape)?;
    match mask_full {
        Some(m) => bias.add(p.tape().constant(Tensor::new(&shape, m)?)),
        None => Ok(bias),
    }
}

/// Joint attention over replicated prompts and window tokens.
///
/// `windows` is `(n_windows, m^2, c)`; prompts are `(n, c)`. Returns the
/// updated windows and the window-averaged prompts.
pub fn prompted_window_attention<'t>(
    p: &Bound<'t>,
    windows: Var<'t>,
    prompts: StagePrompts<'t>,
    layer: &WindowLayer,
    mask: Option<&Tensor>,
) -> Result<(Var<'t>, StagePrompts<'t>)> {
    let shape = windows.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "prompted_window_attention",
            format!("windows must be (n, m*m, c), got {shape:?}"),
        ));
    }
    let (nw, mm, c) = (shape[0], shape[1], shape[2]);
    if nw == 0 {
        return Err(Error::shape("prompted_window_attention", "zero windows"));
    }
    for v in [prompts.domain, prompts.task].into_iter().flatten() {
        let ps = v.shape();
        if ps.len() != 2 || ps[1] != c {
            return Err(Error::shape(
                "prompted_window_attention",
                format!("prompt {ps:?} does not match {c} channels"),
            ));
        }
    }
    let (nd, nt) = prompts.lengths();
    let n = nd + nt;
    let heads = layer.block.attn.heads;
    let bias = window_score_bias(p, layer, heads, nw, n, mask)?;

    if n == 0 {
        let out = layer.block.forward(p, windows, Some(bias))?;
        return Ok((out, prompts));
    }

    let parts: Vec<Var<'t>> = [prompts.domain, prompts.task].into_iter().flatten().collect();
    let joined = if parts.len() == 1 {
        parts[0]
    } else {
        Var::concat(&parts, 0)?
    };
    let replicated = joined.gather(c, index((0..nw).flat_map(|_| 0..n)), &[nw, n, c])?;
    let x = Var::concat(&[replicated, windows], 1)?;
    let y = layer.block.forward(p, x, Some(bias))?;
    let averaged = y.slice(1, 0, n)?.mean(0)?;
    let tokens = y.slice(1, n, mm)?;
    let next = StagePrompts {
        domain: if nd > 0 { Some(averaged.slice(0, 0, nd)?) } else { None },
        task: if nt > 0 { Some(averaged.slice(0, nd, nt)?) } else { None },
    };
    Ok((tokens, next))
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub layers: Vec<WindowLayer>,
    pub side: usize,
    pub channels: usize,
}

/// 2x2 neighbourhood concat, normalization and projection to twice the
/// channels.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: Norm,
    pub reduction: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub patch_norm: Norm,
    pub stages: Vec<Stage>,
    pub merges: Vec<PatchMerge>,
    image_size: usize,
    patch_size: usize,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        let patch_embed = Linear::new(init, "encoder.patch_embed", 3 * p * p, cfg.stage_channels[0], true)?;
        let patch_norm = Norm::new(init, "encoder.patch_norm", cfg.stage_channels[0])?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut merges = Vec::with_capacity(NUM_STAGES - 1);
        for s in 0..NUM_STAGES {
            let c = cfg.stage_channels[s];
            let side = cfg.stage_side(s);
            let m = cfg.stage_window(s);
            let heads = cfg.stage_heads[s];
            let mut layers = Vec::with_capacity(cfg.stage_depths[s]);
            for k in 0..cfg.stage_depths[s] {
                let name = format!("encoder.stage{s}.layer{k}");
                let block = TransformerLayer::new(init, &name, c, heads, cfg.mlp_ratio)?;
                let rel_bias = init.trunc_normal(&format!("{name}.rel_bias"), &[heads, m * m, m * m])?;
                let shift = if k % 2 == 1 && side > m { m / 2 } else { 0 };
                layers.push(WindowLayer {
                    block,
                    rel_bias,
                    window: m,
                    shift,
                });
            }
            stages.push(Stage {
                layers,
                side,
                channels: c,
            });
            if s + 1 < NUM_STAGES {
                let name = format!("encoder.merge{s}");
                merges.push(PatchMerge {
                    norm: Norm::new(init, &format!("{name}.norm"), 4 * c)?,
                    reduction: Linear::new(init, &format!("{name}.reduction"), 4 * c, 2 * c, false)?,
                });
            }
        }
        Ok(Encoder {
            patch_embed,
            patch_norm,
            stages,
            merges,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
        })
    }

    /// `(3, H, W)` image to `(tokens, 3 p^2)` patch rows, channel-major within
    /// a patch.
    fn patchify<'t>(&self, image: Var<'t>) -> Result<Var<'t>> {
        let s = self.image_size;
        let p = self.patch_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(
                "encoder",
                format!("expected image (3, {s}, {s}), got {:?}", image.shape()),
            ));
        }
        let side = s / p;
        let mut idx = Vec::with_capacity(3 * s * s);
        for pr in 0..side {
            for pc in 0..side {
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            idx.push((ch * s + pr * p + y) * s + pc * p + x);
                        }
                    }
                }
            }
        }
        image.gather(1, index(idx), &[side * side, 3 * p * p])
    }

    fn merge<'t>(&self, p: &Bound<'t>, stage: usize, f: Var<'t>) -> Result<Var<'t>> {
        let side = self.stages[stage].side;
        let c = self.stages[stage].channels;
        let half = side / 2;
        let mut idx = Vec::with_capacity(side * side);
        for r in 0..half {
            for col in 0..half {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push((2 * r + dr) * side + 2 * col + dc);
                }
            }
        }
        let grouped = f.gather(c, index(idx), &[half * half, 4 * c])?;
        let m = &self.merges[stage];
        m.reduction.forward(p, m.norm.forward(p, grouped)?)
    }

    /// Runs all stages and returns each stage's output `(l_i, c_i)`.
    /// `prompts[i]` are injected at the start of stage `i`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        image: Var<'t>,
        prompts: &[StagePrompts<'t>; NUM_STAGES],
    ) -> Result<Vec<Var<'t>>> {
        let tokens = self.patchify(image)?;
        let mut f = self
            .patch_norm
            .forward(p, self.patch_embed.forward(p, tokens)?)?;
        let mut outputs = Vec::with_capacity(NUM_STAGES);
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                f = self.merge(p, s - 1, f)?;
            }
            let mut carried = prompts[s];
            for layer in &stage.layers {
                let mask = (layer.shift > 0).then(|| shift_mask(stage.side, layer.window, layer.shift));
                let w = partition_shifted(f, layer.window, layer.shift)?;
                let (w, next) = prompted_window_attention(p, w, carried, layer, mask.as_ref())?;
                carried = next;
                f = reverse_shifted(w, stage.side, layer.shift)?;
            }
            outputs.push(f);
        }
        Ok(outputs)
    }
}
