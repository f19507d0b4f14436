use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{Group, ModelConfig, Transformer};
use super::tokenizer::Tokenizer;
use crate::corpus::TrainingPair;
use crate::error::{Error, Result};
use crate::id_registry::IdRegistry;
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 5e-4,
            batch_size: 64,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("train.beta1", "betas must be in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// Merges are learned on the training inputs; registry ids contribute
/// their characters and extension tokens.
pub fn fit_tokenizer(pairs: &[TrainingPair], registry: &IdRegistry, base_vocab_size: usize) -> Result<Tokenizer> {
    let mut texts: Vec<&str> = Vec::new();
    let mut last = None;
    for p in pairs {
        if last != Some(p.query_index) {
            texts.push(&p.input);
            last = Some(p.query_index);
        }
    }
    let ids: Vec<&str> = registry.forward().iter().map(|(_, id)| id.as_str()).collect();
    Tokenizer::fit(&texts, &ids, registry.extra_vocab(), base_vocab_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub query_index: usize,
}

/// Sources longer than the input limit are truncated; targets longer than
/// the target limit are an error.
pub fn encode_pairs(pairs: &[TrainingPair], tokenizer: &Tokenizer, cfg: &ModelConfig) -> Result<Vec<EncodedPair>> {
    let mut out: Vec<EncodedPair> = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let source = match out.last() {
            Some(prev) if prev.query_index == p.query_index && i > 0 && pairs[i - 1].input == p.input => prev.source.clone(),
            _ => {
                let mut s = tokenizer.encode(&p.input);
                if s.len() > cfg.max_input_len {
                    log::warn!("input of pair {i} truncated from {} to {} tokens", s.len(), cfg.max_input_len);
                    s.truncate(cfg.max_input_len);
                }
                if s.is_empty() {
                    return Err(Error::InvalidInput(format!("pair {i} has an empty input")));
                }
                s
            }
        };
        let target = tokenizer.encode(&p.target);
        if target.len() > cfg.max_target_len {
            return Err(Error::TargetOverflow {
                index: i,
                target: p.target.clone(),
                len: target.len(),
                max: cfg.max_target_len,
            });
        }
        out.push(EncodedPair {
            source,
            target,
            query_index: p.query_index,
        });
    }
    Ok(out)
}

/// Consecutive pairs that share a source form one group.
fn group_runs(pairs: &[EncodedPair]) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if pairs[r[0]].query_index == p.query_index && pairs[r[0]].source == p.source => r.push(i),
            _ => runs.push(vec![i]),
        }
    }
    runs
}

fn make_batch(pairs: &[EncodedPair], idx: &[usize]) -> Vec<Group> {
    let mut out: Vec<Group> = Vec::new();
    let mut last_q = None;
    for &i in idx {
        let p = &pairs[i];
        if last_q == Some(p.query_index) {
            out.last_mut().expect("started").targets.push(p.target.clone());
        } else {
            out.push(Group {
                source: p.source.clone(),
                targets: vec![p.target.clone()],
            });
            last_q = Some(p.query_index);
        }
    }
    out
}

struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], decay: &[bool], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let wd = cfg.weight_decay as f32;
        let eps = cfg.adam_eps as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
            let decay_term = if decay[i] { wd * params[i] } else { 0.0 };
            params[i] -= lr * (update + decay_term);
        }
    }
}

/// Teacher-forced training with AdamW, global-norm clipping and a linear
/// learning-rate decay to zero. Single-threaded and deterministic.
pub fn train(
    pairs: &[TrainingPair],
    tokenizer: &Tokenizer,
    registry: &IdRegistry,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Checkpoint> {
    mcfg.validate()?;
    tcfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    let encoded = encode_pairs(pairs, tokenizer, mcfg)?;
    let mut model: Transformer<f32> = Transformer::new(mcfg.clone(), tokenizer.vocab_size())?;
    let n = model.params().len();
    let mut decay = vec![false; n];
    for t in model.layout().tensors() {
        if t.decay {
            decay[t.range()].iter_mut().for_each(|d| *d = true);
        }
    }
    let runs = group_runs(&encoded);
    let steps_per_epoch = encoded.len().div_ceil(tcfg.batch_size);
    let total_steps = (steps_per_epoch * tcfg.epochs) as f64;
    let mut shuffle_rng = util::rng(tcfg.seed, "train-shuffle");
    let mut dropout_rng = util::rng(tcfg.seed, "train-dropout");
    let mut opt = AdamW::new(n);
    let mut grads = vec![0.0f32; n];
    let mut order: Vec<usize> = (0..runs.len()).collect();
    let mut loss_trace = Vec::with_capacity(tcfg.epochs);
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let flat: Vec<usize> = order.iter().flat_map(|&r| runs[r].iter().copied()).collect();
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in flat.chunks(tcfg.batch_size) {
            let batch = make_batch(&encoded, chunk);
            grads.iter_mut().for_each(|g| *g = 0.0);
            let (loss, tokens) = model.loss_and_grad(&batch, Some(&mut dropout_rng), &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            epoch_loss += loss;
            epoch_tokens += tokens;
            let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > tcfg.grad_clip {
                let s = (tcfg.grad_clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            let lr = tcfg.learning_rate * (1.0 - step as f64 / total_steps);
            opt.step(model.params_mut(), &grads, &decay, lr, tcfg);
            step += 1;
        }
        let mean = epoch_loss / epoch_tokens as f64;
        log::info!("epoch {}/{}: loss {mean:.4}", epoch + 1, tcfg.epochs);
        loss_trace.push(mean);
    }
    Ok(Checkpoint {
        tokenizer: tokenizer.clone(),
        model,
        train: tcfg.clone(),
        registry_fingerprint: registry.fingerprint().to_string(),
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::tiny;

    fn toy_pairs() -> Vec<TrainingPair> {
        let moods = ["sunny", "rainy", "night", "gym", "focus", "party", "chill", "road", "winter", "dawn"];
        moods
            .iter()
            .enumerate()
            .map(|(i, m)| TrainingPair {
                input: format!("{m} songs"),
                target: format!("{}", 1000 + i * 7),
                query_index: i,
            })
            .collect()
    }

    fn toy_setup() -> (Vec<TrainingPair>, Tokenizer, IdRegistry) {
        let pairs = toy_pairs();
        let reg = IdRegistry::build_track_int(&tiny(), 1000, 0);
        let tok = Tokenizer::fit(&pairs.iter().map(|p| p.input.clone()).collect::<Vec<_>>(), &["0123456789".to_string()], &[], 200).unwrap();
        (pairs, tok, reg)
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            width: 32,
            ff_width: 64,
            dropout: 0.0,
            max_input_len: 16,
            max_target_len: 6,
            seed: 1,
        }
    }

    #[test]
    fn memorizes_ten_pairs() {
        let (pairs, tok, reg) = toy_setup();
        let tcfg = TrainConfig {
            epochs: 200,
            learning_rate: 3e-3,
            batch_size: 10,
            ..Default::default()
        };
        let ck = train(&pairs, &tok, &reg, &small_model(), &tcfg).unwrap();
        let hits = pairs
            .iter()
            .filter(|p| tok.decode(&ck.model.greedy(&tok.encode(&p.input)).unwrap()) == p.target)
            .count();
        assert!(hits >= 9, "{hits}/10");
        assert!(ck.loss_trace.last().unwrap() < &ck.loss_trace[0]);
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let (pairs, tok, reg) = toy_setup();
        let mcfg = ModelConfig { dropout: 0.1, ..small_model() };
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let a = train(&pairs, &tok, &reg, &mcfg, &tcfg).unwrap();
        let b = train(&pairs, &tok, &reg, &mcfg, &tcfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn target_overflow_names_the_pair() {
        let (mut pairs, tok, reg) = toy_setup();
        pairs[3].target = "1234567".into();
        match train(&pairs, &tok, &reg, &small_model(), &TrainConfig::default()) {
            Err(Error::TargetOverflow { index, .. }) => assert_eq!(index, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_share_sources_within_a_query() {
        let p = |q: usize, t: u32| EncodedPair {
            source: vec![q as u32 + 5],
            target: vec![t],
            query_index: q,
        };
        let pairs = vec![p(0, 1), p(0, 2), p(1, 3)];
        let b = make_batch(&pairs, &[0, 1, 2]);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].targets.len(), 2);
        assert_eq!(group_runs(&pairs), vec![vec![0, 1], vec![2]]);
    }
}
