use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::TransformerLayer;

pub const NUM_STAGES: usize = 4;

/// Architecture and prompt layout of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Window side in tokens. Stages whose side is smaller than this use a
    /// single window covering the whole stage.
    pub window_size: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_depths: [usize; NUM_STAGES],
    pub stage_heads: [usize; NUM_STAGES],
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub convertor_depth: usize,
    pub mlp_ratio: usize,
    pub domain_prompt_lengths: [usize; NUM_STAGES],
    pub task_prompt_lengths: [usize; NUM_STAGES],
    pub decoder_task_prompt_length: usize,
    /// Share one aggregation projection per stage between the domain and
    /// encoder-task families instead of one per family.
    pub share_agg_linear: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 4,
            window_size: 4,
            stage_channels: [16, 32, 64, 128],
            stage_depths: [1, 1, 2, 1],
            stage_heads: [1, 2, 4, 8],
            decoder_width: 32,
            decoder_depth: 3,
            decoder_heads: 2,
            convertor_depth: 2,
            mlp_ratio: 4,
            domain_prompt_lengths: [1, 1, 1, 1],
            task_prompt_lengths: [1, 1, 5, 10],
            decoder_task_prompt_length: 10,
            share_agg_linear: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A tiny configuration (8x8 tokens at the first stage) for gradient
    /// checks and fast tests.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 2,
            window_size: 4,
            stage_channels: [4, 8, 16, 32],
            stage_depths: [2, 1, 2, 1],
            stage_heads: [1, 2, 2, 4],
            decoder_width: 8,
            decoder_depth: 3,
            decoder_heads: 2,
            convertor_depth: 1,
            mlp_ratio: 2,
            domain_prompt_lengths: [1, 1, 1, 1],
            task_prompt_lengths: [1, 1, 2, 3],
            decoder_task_prompt_length: 3,
            share_agg_linear: false,
            init_seed: 0,
        }
    }

    /// Token grid side at `stage`.
    pub fn stage_side(&self, stage: usize) -> usize {
        self.image_size / self.patch_size >> stage
    }

    pub fn stage_tokens(&self, stage: usize) -> usize {
        self.stage_side(stage).pow(2)
    }

    /// Effective window side at `stage`.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window_size.min(self.stage_side(stage))
    }

    /// Decoder levels, coarsest first; each level runs at the resolution of
    /// the named encoder stage.
    pub fn decoder_levels(&self) -> Vec<usize> {
        (NUM_STAGES - 1 - self.decoder_depth..NUM_STAGES - 1).rev().collect()
    }

    pub fn with_prompt_lengths(mut self, domain: usize, task: usize, decoder: usize) -> Self {
        self.domain_prompt_lengths = [domain; NUM_STAGES];
        self.task_prompt_lengths = [task; NUM_STAGES];
        self.decoder_task_prompt_length = decoder;
        self
    }

    /// `4 * sum_i Nd_i c_i + 2 * sum_i Nt_i c_i + 2 * N d`.
    pub fn prompt_param_count(&self) -> usize {
        let dom: usize = (0..NUM_STAGES)
            .map(|i| self.domain_prompt_lengths[i] * self.stage_channels[i])
            .sum();
        let task: usize = (0..NUM_STAGES)
            .map(|i| self.task_prompt_lengths[i] * self.stage_channels[i])
            .sum();
        4 * dom + 2 * task + 2 * self.decoder_task_prompt_length * self.decoder_width
    }

    /// Closed-form count of every learnable scalar in a model built from
    /// this config, prompts and prompt aggregation included.
    pub fn total_param_count(&self) -> usize {
        let r = self.mlp_ratio;
        let d = self.decoder_width;
        let lin = |i: usize, o: usize| i * o + o;
        let layer = |c: usize| TransformerLayer::param_count(c, r);
        let p = self.patch_size;
        let c = &self.stage_channels;

        let mut enc = lin(3 * p * p, c[0]) + 2 * c[0];
        for s in 0..NUM_STAGES {
            let m = self.stage_window(s);
            enc += self.stage_depths[s] * (layer(c[s]) + self.stage_heads[s] * m.pow(4));
            if s + 1 < NUM_STAGES {
                enc += 2 * 4 * c[s] + 4 * c[s] * 2 * c[s];
            }
        }
        let neck = lin(c[NUM_STAGES - 1], d) + 2 * d + lin(2 * d, r * d) + lin(r * d, d);
        let convertor = self.convertor_depth * layer(d);
        let decoder = 2 * d
            + self
                .decoder_levels()
                .into_iter()
                .map(|j| lin(d, d) + lin(c[j], d) + layer(d))
                .sum::<usize>()
            + 2 * d;

        let mut agg = 0;
        let (mut k_dom, mut k_task) = (0, 0);
        for s in 0..NUM_STAGES {
            let dom = self.domain_prompt_lengths[s] > 0;
            let task = self.task_prompt_lengths[s] > 0;
            k_dom += dom as usize;
            k_task += task as usize;
            let maps = if self.share_agg_linear {
                (dom || task) as usize
            } else {
                dom as usize + task as usize
            };
            agg += maps * lin(c[s], d);
        }
        for k in [k_dom, k_task] {
            if k > 0 {
                agg += lin(k * d, r * d) + lin(r * d, d);
            }
        }
        enc + neck + convertor + decoder + self.prompt_param_count() + agg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.window_size == 0 {
            return bad("window_size must be positive".into());
        }
        let side0 = self.image_size / self.patch_size;
        if side0 % (1 << (NUM_STAGES - 1)) != 0 {
            return bad(format!(
                "token side {side0} cannot be halved {} times",
                NUM_STAGES - 1
            ));
        }
        for s in 0..NUM_STAGES {
            let side = self.stage_side(s);
            let m = self.stage_window(s);
            if side % m != 0 {
                return bad(format!(
                    "stage {s}: side {side} not divisible by window {m}"
                ));
            }
            let c = self.stage_channels[s];
            let h = self.stage_heads[s];
            if h == 0 || c % h != 0 {
                return bad(format!("stage {s}: {c} channels not divisible by {h} heads"));
            }
            if self.stage_depths[s] == 0 {
                return bad(format!("stage {s}: depth must be positive"));
            }
            if s > 0 && self.stage_channels[s] != 2 * self.stage_channels[s - 1] {
                return bad(format!(
                    "stage channels must double between stages, got {:?}",
                    self.stage_channels
                ));
            }
        }
        if self.decoder_depth == 0 || self.decoder_depth > NUM_STAGES - 1 {
            return bad(format!(
                "decoder_depth must be in 1..={}, got {}",
                NUM_STAGES - 1,
                self.decoder_depth
            ));
        }
        if self.decoder_heads == 0 || self.decoder_width % self.decoder_heads != 0 {
            return bad(format!(
                "decoder width {} not divisible by {} heads",
                self.decoder_width, self.decoder_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}
