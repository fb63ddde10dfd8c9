//! Learnable 2D prompts: one set per domain, one per task.
//!
//! The bank owns every prompt tensor plus the small aggregation network used
//! by the discrimination loss. Aggregation reduces each prompt family member
//! to one `d`-wide vector: average the tokens of every stage prompt, project
//! each stage to `d`, concatenate the stages and pass them through an MLP.
//! Decoder task prompts are only token-averaged. The discrimination loss is
//! `sum_m ln(1 + |cos_m|)` over the fixed pair set.

use std::fmt::Write as _;

use crate::autodiff::Var;
use crate::error::Result;
use crate::model::config::{ModelConfig, NUM_STAGES};
use crate::model::encoder::StagePrompts;
use crate::model::layers::{Linear, Mlp};
use crate::model::params::{Bound, Init, ParamId, ParamStore};
use crate::types::{Domain, Task};

/// Name prefix of every prompt tensor in a [`ParamStore`].
pub const PROMPT_PREFIX: &str = "prompt.";

#[derive(Clone, Debug)]
struct Aggregator {
    /// `domain_proj[i]` maps stage `i` to `d`; `None` for stages without
    /// domain prompts.
    domain_proj: Vec<Option<Linear>>,
    task_proj: Vec<Option<Linear>>,
    domain_mlp: Option<Mlp>,
    task_mlp: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct PromptBank {
    /// `[domain][stage]`, `(N_i^d, c_i)`.
    pub domain: [[Option<ParamId>; NUM_STAGES]; 4],
    /// `[task][stage]`, `(N_i^te, c_i)`.
    pub task_enc: [[Option<ParamId>; NUM_STAGES]; 2],
    /// `[task]`, `(N, d)`.
    pub task_dec: [Option<ParamId>; 2],
    agg: Aggregator,
}

/// Prompt parameters chosen for one (domain, task) composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptSelection {
    pub domain: Domain,
    pub task: Task,
    pub encoder_domain: [Option<ParamId>; NUM_STAGES],
    pub encoder_task: [Option<ParamId>; NUM_STAGES],
    pub decoder_task: Option<ParamId>,
}

impl PromptSelection {
    pub fn bind<'t>(&self, p: &Bound<'t>) -> [StagePrompts<'t>; NUM_STAGES] {
        std::array::from_fn(|i| StagePrompts {
            domain: self.encoder_domain[i].map(|id| p.get(id)),
            task: self.encoder_task[i].map(|id| p.get(id)),
        })
    }
}

/// One monitored prompt pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pair {
    Domains(Domain, Domain),
    EncoderTasks,
    DecoderTasks,
}

impl Pair {
    /// The eight pairs in reporting order: `RD, RT, RF, DF, DT, TF, SC_EN, SC_DE`.
    pub const ALL: [Pair; 8] = [
        Pair::Domains(Domain::Rgb, Domain::Depth),
        Pair::Domains(Domain::Rgb, Domain::Thermal),
        Pair::Domains(Domain::Rgb, Domain::Flow),
        Pair::Domains(Domain::Depth, Domain::Flow),
        Pair::Domains(Domain::Depth, Domain::Thermal),
        Pair::Domains(Domain::Thermal, Domain::Flow),
        Pair::EncoderTasks,
        Pair::DecoderTasks,
    ];

    pub fn name(self) -> String {
        match self {
            Pair::Domains(a, b) => format!("{}{}", a.letter(), b.letter()),
            Pair::EncoderTasks => "SC_EN".into(),
            Pair::DecoderTasks => "SC_DE".into(),
        }
    }
}

/// Number of monitored pairs for a grid with `domains` domains: every
/// domain pair plus one encoder and one decoder task pair.
pub fn pair_count(domains: usize) -> usize {
    domains * domains.saturating_sub(1) / 2 + 2
}

/// Aggregated `(d,)` embeddings per family member; `None` where the family
/// has no prompts.
pub struct Aggregates<'t> {
    pub domain: Option<[Var<'t>; 4]>,
    pub task_enc: Option<[Var<'t>; 2]>,
    pub task_dec: Option<[Var<'t>; 2]>,
}

/// The discrimination loss together with the pair cosines that produced it.
pub struct Discrimination<'t> {
    pub loss: Var<'t>,
    pub cosines: Vec<(Pair, f64)>,
}

impl PromptBank {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_width;
        let mut domain = [[None; NUM_STAGES]; 4];
        for dom in Domain::ALL {
            for s in 0..NUM_STAGES {
                let n = cfg.domain_prompt_lengths[s];
                if n > 0 {
                    let name = format!("{PROMPT_PREFIX}domain.{dom}.stage{s}");
                    domain[dom.index()][s] = Some(init.trunc_normal(&name, &[n, cfg.stage_channels[s]])?);
                }
            }
        }
        let mut task_enc = [[None; NUM_STAGES]; 2];
        for task in Task::ALL {
            for s in 0..NUM_STAGES {
                let n = cfg.task_prompt_lengths[s];
                if n > 0 {
                    let name = format!("{PROMPT_PREFIX}task_enc.{task}.stage{s}");
                    task_enc[task.index()][s] = Some(init.trunc_normal(&name, &[n, cfg.stage_channels[s]])?);
                }
            }
        }
        let mut task_dec = [None; 2];
        if cfg.decoder_task_prompt_length > 0 {
            for task in Task::ALL {
                let name = format!("{PROMPT_PREFIX}task_dec.{task}");
                task_dec[task.index()] = Some(init.trunc_normal(&name, &[cfg.decoder_task_prompt_length, d])?);
            }
        }

        let mut domain_proj = vec![None; NUM_STAGES];
        let mut task_proj = vec![None; NUM_STAGES];
        for s in 0..NUM_STAGES {
            let c = cfg.stage_channels[s];
            let has_dom = cfg.domain_prompt_lengths[s] > 0;
            let has_task = cfg.task_prompt_lengths[s] > 0;
            if cfg.share_agg_linear && (has_dom || has_task) {
                let shared = Linear::new(init, &format!("prompt_agg.shared.stage{s}"), c, d, true)?;
                domain_proj[s] = has_dom.then(|| shared.clone());
                task_proj[s] = has_task.then_some(shared);
            } else {
                if has_dom {
                    domain_proj[s] = Some(Linear::new(init, &format!("prompt_agg.domain.stage{s}"), c, d, true)?);
                }
                if has_task {
                    task_proj[s] = Some(Linear::new(init, &format!("prompt_agg.task.stage{s}"), c, d, true)?);
                }
            }
        }
        let width = |proj: &[Option<Linear>]| proj.iter().flatten().count() * d;
        let domain_mlp = match width(&domain_proj) {
            0 => None,
            w => Some(Mlp::new(init, "prompt_agg.domain.mlp", w, cfg.mlp_ratio * d, d)?),
        };
        let task_mlp = match width(&task_proj) {
            0 => None,
            w => Some(Mlp::new(init, "prompt_agg.task.mlp", w, cfg.mlp_ratio * d, d)?),
        };
        Ok(PromptBank {
            domain,
            task_enc,
            task_dec,
            agg: Aggregator {
                domain_proj,
                task_proj,
                domain_mlp,
                task_mlp,
            },
        })
    }

    /// Picks the prompts for a (domain, task) composition. Every one of the
    /// eight compositions is valid, including ones never trained together.
    pub fn select(&self, domain: Domain, task: Task) -> PromptSelection {
        PromptSelection {
            domain,
            task,
            encoder_domain: self.domain[domain.index()],
            encoder_task: self.task_enc[task.index()],
            decoder_task: self.task_dec[task.index()],
        }
    }

    fn aggregate_family<'t>(
        p: &Bound<'t>,
        stages: &[Option<ParamId>; NUM_STAGES],
        proj: &[Option<Linear>],
        mlp: &Mlp,
    ) -> Result<Var<'t>> {
        let mut parts = Vec::with_capacity(NUM_STAGES);
        for (id, lin) in stages.iter().zip(proj) {
            if let (Some(id), Some(lin)) = (id, lin) {
                let avg = p.get(*id).mean(0)?;
                let c = avg.shape()[0];
                parts.push(lin.forward(p, avg.reshape(&[1, c])?)?);
            }
        }
        let joined = Var::concat(&parts, 1)?;
        let out = mlp.forward(p, joined)?;
        let d = out.shape()[1];
        out.reshape(&[d])
    }

    pub fn aggregate<'t>(&self, p: &Bound<'t>) -> Result<Aggregates<'t>> {
        let domain = match &self.agg.domain_mlp {
            Some(mlp) => {
                let v: Vec<Var<'t>> = Domain::ALL
                    .iter()
                    .map(|d| Self::aggregate_family(p, &self.domain[d.index()], &self.agg.domain_proj, mlp))
                    .collect::<Result<_>>()?;
                Some([v[0], v[1], v[2], v[3]])
            }
            None => None,
        };
        let task_enc = match &self.agg.task_mlp {
            Some(mlp) => {
                let a = Self::aggregate_family(p, &self.task_enc[0], &self.agg.task_proj, mlp)?;
                let b = Self::aggregate_family(p, &self.task_enc[1], &self.agg.task_proj, mlp)?;
                Some([a, b])
            }
            None => None,
        };
        let task_dec = match self.task_dec {
            [Some(a), Some(b)] => Some([p.get(a).mean(0)?, p.get(b).mean(0)?]),
            _ => None,
        };
        Ok(Aggregates {
            domain,
            task_enc,
            task_dec,
        })
    }

    /// Cosines of the pairs the discrimination loss sees, evaluated on the
    /// aggregated vectors. Empty when no family has prompts.
    pub fn pair_cosines(&self, store: &ParamStore) -> Result<Vec<(Pair, f64)>> {
        let tape = crate::autodiff::Tape::new();
        let p = Bound::new(&tape, store);
        Ok(discrimination_loss(&self.aggregate(&p)?)?
            .map(|d| d.cosines)
            .unwrap_or_default())
    }

    /// Ids of every prompt tensor in the bank (not the aggregation network).
    pub fn prompt_ids(&self) -> Vec<ParamId> {
        self.domain
            .iter()
            .flatten()
            .chain(self.task_enc.iter().flatten())
            .chain(self.task_dec.iter())
            .flatten()
            .copied()
            .collect()
    }

    /// Domain prompt ids of one domain across stages.
    pub fn domain_ids(&self, domain: Domain) -> Vec<ParamId> {
        self.domain[domain.index()].iter().flatten().copied().collect()
    }

    /// Per-stage cosine similarities between raw token-averaged prompts.
    pub fn correlation_report(&self, store: &ParamStore) -> CorrelationReport {
        let avg = |id: ParamId| -> Vec<f64> {
            let t = store.get(id);
            let c = t.shape()[1];
            let n = t.shape()[0] as f64;
            let mut out = vec![0.0; c];
            for row in t.data().chunks_exact(c) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x / n;
                }
            }
            out
        };
        let mut rows = Vec::new();
        for s in 0..NUM_STAGES {
            for pair in Pair::ALL {
                let ids = match pair {
                    Pair::Domains(a, b) => (self.domain[a.index()][s], self.domain[b.index()][s]),
                    Pair::EncoderTasks => (self.task_enc[0][s], self.task_enc[1][s]),
                    Pair::DecoderTasks => continue,
                };
                if let (Some(a), Some(b)) = ids {
                    rows.push(CorrelationRow {
                        stage: StageLabel::Encoder(s),
                        pair,
                        cosine: cosine(&avg(a), &avg(b)),
                    });
                }
            }
        }
        if let [Some(a), Some(b)] = self.task_dec {
            rows.push(CorrelationRow {
                stage: StageLabel::Decoder,
                pair: Pair::DecoderTasks,
                cosine: cosine(&avg(a), &avg(b)),
            });
        }
        CorrelationReport { rows }
    }
}

/// Sum of `ln(1 + |cos|)` over every pair whose family is present.
pub fn discrimination_loss<'t>(agg: &Aggregates<'t>) -> Result<Option<Discrimination<'t>>> {
    let mut terms = Vec::new();
    let mut cosines = Vec::new();
    for pair in Pair::ALL {
        let (a, b) = match pair {
            Pair::Domains(x, y) => match &agg.domain {
                Some(v) => (v[x.index()], v[y.index()]),
                None => continue,
            },
            Pair::EncoderTasks => match &agg.task_enc {
                Some(v) => (v[0], v[1]),
                None => continue,
            },
            Pair::DecoderTasks => match &agg.task_dec {
                Some(v) => (v[0], v[1]),
                None => continue,
            },
        };
        let cos = a.cosine(b)?;
        cosines.push((pair, cos.value().data()[0]));
        terms.push(cos.abs().add_scalar(1.0).log()?);
    }
    let Some((first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut loss = *first;
    for t in rest {
        loss = loss.add(*t)?;
    }
    Ok(Some(Discrimination { loss, cosines }))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>();
    (dot / (na * nb).sqrt().max(crate::autodiff::COSINE_EPS)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageLabel {
    Encoder(usize),
    Decoder,
}

#[derive(Clone, Debug)]
pub struct CorrelationRow {
    pub stage: StageLabel,
    pub pair: Pair,
    pub cosine: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
}

impl CorrelationReport {
    pub fn get(&self, stage: StageLabel, pair: Pair) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.stage == stage && r.pair == pair)
            .map(|r| r.cosine)
    }

    /// `stage,pair,cosine` with encoder stages numbered from 0 and the
    /// decoder pair on stage `decoder`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,pair,cosine\n");
        for r in &self.rows {
            let stage = match r.stage {
                StageLabel::Encoder(s) => s.to_string(),
                StageLabel::Decoder => "decoder".to_string(),
            };
            let _ = writeln!(out, "{stage},{},{:.12}", r.pair.name(), r.cosine);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng;
    use crate::tensor::Tensor;

    fn make_bank(cfg: &ModelConfig) -> (ParamStore, PromptBank) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(5);
        let bank = PromptBank::new(&mut Init { store: &mut store, rng: &mut r }, cfg).unwrap();
        (store, bank)
    }

    #[test]
    fn bank_layout_matches_config() {
        let cfg = ModelConfig::default();
        let (store, bank) = make_bank(&cfg);
        assert_eq!(store.numel_with_prefix(PROMPT_PREFIX), cfg.prompt_param_count());
        assert_eq!(bank.prompt_ids().len(), 4 * 4 + 2 * 4 + 2);
        let id = bank.domain[Domain::Flow.index()][2].unwrap();
        assert_eq!(store.get(id).shape(), &[1, 64]);
        let id = bank.task_enc[Task::Cod.index()][3].unwrap();
        assert_eq!(store.get(id).shape(), &[10, 128]);
    }

    #[test]
    fn selection_composes_any_pair() {
        let (_, bank) = make_bank(&ModelConfig::default());
        let s = bank.select(Domain::Rgb, Task::Sod);
        assert_eq!(s.encoder_domain, bank.domain[0]);
        assert_eq!(s.encoder_task, bank.task_enc[0]);
        let z = bank.select(Domain::Depth, Task::Cod);
        assert_eq!(z.encoder_domain, bank.domain[1]);
        assert_eq!(z.decoder_task, bank.task_dec[1]);
    }

    #[test]
    fn aggregates_have_decoder_width() {
        let cfg = ModelConfig::default();
        let (store, bank) = make_bank(&cfg);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let agg = bank.aggregate(&p).unwrap();
        for v in agg.domain.unwrap() {
            assert_eq!(v.shape(), vec![32]);
        }
        for v in agg.task_enc.unwrap().iter().chain(agg.task_dec.unwrap().iter()) {
            assert_eq!(v.shape(), vec![32]);
        }
    }

    #[test]
    fn zero_bank_aggregates_to_zero() {
        let cfg = ModelConfig::default();
        let (mut store, bank) = make_bank(&cfg);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let is_prompt = store.name(id).starts_with(PROMPT_PREFIX);
            let is_bias = store.name(id).ends_with(".bias");
            if is_prompt || is_bias {
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let agg = bank.aggregate(&p).unwrap();
        for v in agg.domain.unwrap().iter().chain(agg.task_enc.unwrap().iter()) {
            assert!(v.value().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn correlation_report_identical_and_negated() {
        let cfg = ModelConfig::default();
        let (mut store, bank) = make_bank(&cfg);
        let r = bank.domain[Domain::Rgb.index()][0].unwrap();
        let d = bank.domain[Domain::Depth.index()][0].unwrap();
        let t = bank.domain[Domain::Thermal.index()][0].unwrap();
        let v = store.get(r).clone();
        store.set(d, v.clone()).unwrap();
        store.set(t, v.map(|x| -x)).unwrap();
        let rep = bank.correlation_report(&store);
        let rd = rep.get(StageLabel::Encoder(0), Pair::Domains(Domain::Rgb, Domain::Depth)).unwrap();
        let rt = rep.get(StageLabel::Encoder(0), Pair::Domains(Domain::Rgb, Domain::Thermal)).unwrap();
        assert!((rd - 1.0).abs() < 1e-12);
        assert!((rt + 1.0).abs() < 1e-12);
        assert!(rep.rows.iter().all(|r| (-1.0..=1.0).contains(&r.cosine)));
        // 4 stages x 7 encoder pairs + the decoder pair
        assert_eq!(rep.rows.len(), 4 * 7 + 1);
        let csv = rep.to_csv();
        assert!(csv.starts_with("stage,pair,cosine\n"));
        assert!(csv.contains("\ndecoder,SC_DE,"));
    }

    #[test]
    fn pair_set_has_eight_members() {
        assert_eq!(Pair::ALL.len(), 8);
        assert_eq!(pair_count(4), 8);
        assert_eq!(pair_count(5), 12);
        assert_eq!(pair_count(3), 5);
        let names: Vec<String> = Pair::ALL.iter().map(|p| p.name()).collect();
        assert_eq!(names, ["RD", "RT", "RF", "DF", "DT", "TF", "SC_EN", "SC_DE"]);
    }

    #[test]
    fn missing_families_drop_their_pairs() {
        let cfg = ModelConfig::default().with_prompt_lengths(1, 0, 0);
        let (store, bank) = make_bank(&cfg);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let agg = bank.aggregate(&p).unwrap();
        assert!(agg.task_enc.is_none() && agg.task_dec.is_none());
        let dis = discrimination_loss(&agg).unwrap().unwrap();
        assert_eq!(dis.cosines.len(), 6);
        let cfg = ModelConfig::default().with_prompt_lengths(0, 0, 0);
        let (store, bank) = make_bank(&cfg);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        assert!(discrimination_loss(&bank.aggregate(&p).unwrap()).unwrap().is_none());
    }
}
