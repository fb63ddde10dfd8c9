use std::str::FromStr;

use duoprompt_core::model::{Bound, GradBuffer, Model, ModelConfig};
use duoprompt_core::prompt::{discrimination_loss, pair_count, Aggregates, Pair, StageLabel};
use duoprompt_core::train::Adam;
use duoprompt_core::{rng, Domain, Error, Tape, Task, Tensor};

const D: usize = 8;

fn randv(seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(&[D], |_| rng::normal(&mut r))
}

fn basis(i: usize) -> Tensor {
    Tensor::from_fn(&[D], |k| (k == i) as u8 as f64)
}

fn aggregates<'t>(tape: &'t Tape, v: &[Tensor; 8]) -> Aggregates<'t> {
    let c = |i: usize| tape.constant(v[i].clone());
    Aggregates {
        domain: Some([c(0), c(1), c(2), c(3)]),
        task_enc: Some([c(4), c(5)]),
        task_dec: Some([c(6), c(7)]),
    }
}

/// Direct evaluation of the pairwise log-cosine sum on plain slices.
fn oracle(v: &[Tensor; 8]) -> f64 {
    let cos = |a: &Tensor, b: &Tensor| {
        let (a, b) = (a.data(), b.data());
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-8)
    };
    let pairs = [(0, 1), (0, 2), (0, 3), (1, 3), (1, 2), (2, 3), (4, 5), (6, 7)];
    pairs.iter().map(|&(i, j)| (1.0 + cos(&v[i], &v[j]).abs()).ln()).sum()
}

fn loss_of(v: &[Tensor; 8]) -> f64 {
    let tape = Tape::new();
    let dis = discrimination_loss(&aggregates(&tape, v)).unwrap().unwrap();
    assert_eq!(dis.cosines.len(), 8);
    dis.loss.value().item().unwrap()
}

#[test]
fn orthogonal_aggregates_cost_nothing() {
    let v = [basis(0), basis(1), basis(2), basis(3), basis(4), basis(5), basis(6), basis(7)];
    assert_eq!(loss_of(&v), 0.0);
}

#[test]
fn identical_aggregates_cost_eight_ln2() {
    let x = randv(1);
    let v: [Tensor; 8] = std::array::from_fn(|_| x.clone());
    assert!((loss_of(&v) - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((loss_of(&v) - 5.545177444479562).abs() < 1e-12);
}

#[test]
fn graph_value_matches_direct_formula() {
    for seed in 0..20 {
        let v: [Tensor; 8] = std::array::from_fn(|i| randv(100 * seed + i as u64));
        let got = loss_of(&v);
        assert!(got >= 0.0);
        assert!((got - oracle(&v)).abs() < 1e-12, "seed {seed}: {got} vs {}", oracle(&v));
    }
}

#[test]
fn loss_ignores_positive_rescaling() {
    let v: [Tensor; 8] = std::array::from_fn(|i| randv(7 + i as u64));
    let base = loss_of(&v);
    for (k, s) in [(0, 3.5), (4, 1e-3), (7, 250.0)] {
        let mut w = v.clone();
        w[k] = w[k].map(|x| x * s);
        assert!((loss_of(&w) - base).abs() < 1e-9);
    }
}

#[test]
fn pair_set_follows_combinatorial_rule() {
    assert_eq!(Pair::ALL.len(), 8);
    assert_eq!(pair_count(4), 8);
    assert_eq!(pair_count(3), 5);
    assert_eq!(pair_count(5), 12);
    let names: Vec<String> = Pair::ALL.iter().map(|p| p.name()).collect();
    assert_eq!(names, ["RD", "RT", "RF", "DF", "DT", "TF", "SC_EN", "SC_DE"]);
}

#[test]
fn unknown_domain_name_is_rejected() {
    assert!(matches!(Domain::from_str("sonar"), Err(Error::UnknownDomain(_))));
    assert_eq!(Domain::from_str("depth").unwrap(), Domain::Depth);
    assert!(Task::from_str("xod").is_err());
}

#[test]
fn aggregates_are_decoder_width_and_reach_every_prompt() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let agg = model.bank.aggregate(&p).unwrap();
    for v in agg.domain.unwrap().iter().chain(&agg.task_enc.unwrap()).chain(&agg.task_dec.unwrap()) {
        assert_eq!(v.shape(), vec![cfg.decoder_width]);
    }
}

#[test]
fn report_values_are_cosines() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let report = model.bank.correlation_report(&model.params);
    assert_eq!(report.rows.len(), 4 * 7 + 1);
    assert!(report.rows.iter().all(|r| (-1.0..=1.0).contains(&r.cosine)));
    let csv = report.to_csv();
    assert!(csv.starts_with("stage,pair,cosine\n"));
    assert!(csv.contains("decoder,SC_DE,"));
}

/// Magnitudes of the eight pair cosines the discrimination loss sees.
fn pair_magnitudes(model: &Model) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let d = discrimination_loss(&model.bank.aggregate(&p).unwrap()).unwrap().unwrap();
    (d.loss.value().item().unwrap(), d.cosines.iter().map(|(_, c)| c.abs()).collect())
}

#[test]
fn discrimination_training_decorrelates_prompts() {
    let mut model = Model::new(ModelConfig::default()).unwrap();
    let (first, before) = pair_magnitudes(&model);
    let decoder_before = model.bank.correlation_report(&model.params).get(StageLabel::Decoder, Pair::DecoderTasks).unwrap();
    let mut adam = Adam::new(&model.params);
    for _ in 0..400 {
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.params);
        let d = discrimination_loss(&model.bank.aggregate(&p).unwrap()).unwrap().unwrap();
        let mut g = tape.backward(d.loss).unwrap();
        let mut buf = GradBuffer::new(&model.params);
        buf.absorb(p.collect(&mut g), 1.0).unwrap();
        adam.step(&mut model.params, &buf, 1e-4).unwrap();
    }
    let (last, after) = pair_magnitudes(&model);
    assert!(last < 0.1 * first, "{first} -> {last}");
    assert_eq!(before.len(), 8);
    for (pair, (b, a)) in Pair::ALL.iter().zip(before.iter().zip(&after)) {
        assert!(a < b, "{}: {b} -> {a}", pair.name());
    }
    // the decoder pair is a plain token average on both sides
    let decoder_after = model.bank.correlation_report(&model.params).get(StageLabel::Decoder, Pair::DecoderTasks).unwrap();
    assert!(decoder_after.abs() < decoder_before.abs());
}

#[test]
fn missing_families_drop_out_of_the_loss() {
    let tape = Tape::new();
    let v: [Tensor; 8] = std::array::from_fn(|i| randv(50 + i as u64));
    let c = |i: usize| tape.constant(v[i].clone());
    let agg = Aggregates {
        domain: None,
        task_enc: Some([c(4), c(5)]),
        task_dec: None,
    };
    let d = discrimination_loss(&agg).unwrap().unwrap();
    assert_eq!(d.cosines.len(), 1);
    let none = Aggregates::<'_> {
        domain: None,
        task_enc: None,
        task_dec: None,
    };
    assert!(discrimination_loss(&none).unwrap().is_none());
}
