//! Teacher-forced loss, module-selective gradient descent, gradient checks
//! and greedy decoding.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lora::AdapterSet;
use crate::model::{teacher_forced_input, Element, Graph, Module, ToyMllm, ToySample};
use crate::tensor::Mat;
use crate::{LoraError, Result, BOS, EOS};

/// Denominator floor of the relative error in [`grad_check`], so that
/// coordinates with a vanishing gradient are judged on absolute error.
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    /// Modules whose adapters are updated.
    pub modules: BTreeSet<Module>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            modules: [Module::Llm].into(),
            learning_rate: 0.003,
            epochs: 500,
            batch_size: 2,
            seed: 2024,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(LoraError::Config("trainable module set is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(LoraError::Config("batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(LoraError::Config(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Gradients of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub b: Mat,
    pub d: Mat,
}

fn check_sample(sample: &ToySample) -> Result<()> {
    if sample.target.is_empty() {
        return Err(LoraError::EmptyTarget);
    }
    Ok(())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `-log P(target_j | prompt, target_<j)` for each j.
pub fn sft_loss_terms(model: &ToyMllm, adapters: Option<&AdapterSet>, sample: &ToySample) -> Result<Vec<f64>> {
    check_sample(sample)?;
    let (seq, prompt_len) = teacher_forced_input(sample);
    let logits = model.logits(adapters, &seq)?;
    Ok(sample
        .target
        .iter()
        .enumerate()
        .map(|(j, &t)| -log_softmax(logits.row(prompt_len - 1 + j))[t])
        .collect())
}

/// Summed negative log-likelihood of the target under teacher forcing.
pub fn sft_loss(model: &ToyMllm, adapters: Option<&AdapterSet>, sample: &ToySample) -> Result<f64> {
    Ok(sft_loss_terms(model, adapters, sample)?.iter().sum())
}

/// Loss and the gradient with respect to every adapter. Adapters the sample
/// does not reach get exact zeros.
pub fn adapter_grads(
    model: &ToyMllm,
    adapters: &AdapterSet,
    sample: &ToySample,
) -> Result<(f64, BTreeMap<String, AdapterGrad>)> {
    check_sample(sample)?;
    for t in sample.target.iter() {
        if *t >= model.config.vocab {
            return Err(LoraError::TokenOutOfRange {
                token: *t,
                vocab: model.config.vocab,
            });
        }
    }
    let (seq, prompt_len) = teacher_forced_input(sample);
    let mut g = Graph::new(model, Some(adapters));
    let logits = g.logits(&seq)?;
    let targets = sample
        .target
        .iter()
        .enumerate()
        .map(|(j, &t)| (prompt_len - 1 + j, t))
        .collect();
    let loss = g.tape.cross_entropy(logits, targets);
    let grads = g.tape.backward(loss);
    let mut out = BTreeMap::new();
    for a in adapters.iter() {
        let ag = match g.lora.get(a.target.as_str()) {
            Some((b, d)) => AdapterGrad {
                b: grads.get(*b),
                d: grads.get(*d),
            },
            None => AdapterGrad {
                b: Mat::zeros(a.b.rows, a.b.cols),
                d: Mat::zeros(a.d.rows, a.d.cols),
            },
        };
        out.insert(a.target.clone(), ag);
    }
    Ok((g.tape.value(loss).get(0, 0), out))
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    /// Mean batch loss before the update.
    pub loss: f64,
    pub grad_norms: BTreeMap<Module, f64>,
}

/// One gradient-descent step on the mean batch loss, `B -= lr * dB` and
/// `D -= lr * dD`, for adapters whose module is trainable.
pub fn sft_step(
    model: &ToyMllm,
    adapters: &mut AdapterSet,
    config: &SftConfig,
    batch: &[ToySample],
) -> Result<(f64, BTreeMap<Module, f64>)> {
    config.validate()?;
    for m in &config.modules {
        if !adapters.has_module(*m) {
            return Err(LoraError::MissingAdapters(*m));
        }
    }
    if batch.is_empty() {
        return Err(LoraError::Config("empty batch".into()));
    }
    let mut loss = 0.0;
    let mut total: BTreeMap<String, AdapterGrad> = BTreeMap::new();
    for sample in batch {
        let (l, grads) = adapter_grads(model, adapters, sample)?;
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => {
                    acc.b.add_assign(&g.b);
                    acc.d.add_assign(&g.d);
                }
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut sq: BTreeMap<Module, f64> = Module::ALL.iter().map(|m| (*m, 0.0)).collect();
    for a in adapters.iter_mut() {
        let g = &total[&a.target];
        let (gb, gd) = (g.b.scale(1.0 / n), g.d.scale(1.0 / n));
        *sq.entry(a.module).or_default() += gb.norm().powi(2) + gd.norm().powi(2);
        if config.modules.contains(&a.module) {
            a.b.add_assign(&gb.scale(-config.learning_rate));
            a.d.add_assign(&gd.scale(-config.learning_rate));
        }
    }
    Ok((loss / n, sq.into_iter().map(|(m, s)| (m, s.sqrt())).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean corpus loss after the last step.
    pub final_loss: f64,
}

/// Full training run. Batches are drawn from a per-run seeded shuffle;
/// `on_step` receives every log record.
pub fn train(
    model: &ToyMllm,
    adapters: &mut AdapterSet,
    config: &SftConfig,
    corpus: &[ToySample],
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainSummary> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(LoraError::Config("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ToySample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let (loss, grad_norms) = sft_step(model, adapters, config, &batch)?;
            step += 1;
            sum += loss;
            batches += 1;
            on_step(&LogEntry {
                step,
                epoch,
                loss,
                grad_norms,
            });
        }
        epoch_losses.push(sum / batches as f64);
    }
    let mut final_loss = 0.0;
    for s in corpus {
        final_loss += sft_loss(model, Some(adapters), s)?;
    }
    Ok(TrainSummary {
        steps: step,
        epoch_losses,
        final_loss: final_loss / corpus.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub per_adapter: BTreeMap<String, f64>,
    pub coordinates: usize,
}

/// Compares analytic adapter gradients with central differences at up to
/// `coords` randomly chosen coordinates of each adapter.
pub fn grad_check(
    model: &ToyMllm,
    adapters: &AdapterSet,
    sample: &ToySample,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let (_, analytic) = adapter_grads(model, adapters, sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_adapter = BTreeMap::new();
    let mut coordinates = 0;
    let mut max_rel_err: f64 = 0.0;
    for a in adapters.iter() {
        let nb = a.b.data.len();
        let total = nb + a.d.data.len();
        let picked = rand::seq::index::sample(&mut rng, total, coords.min(total)).into_vec();
        let g = &analytic[&a.target];
        let mut worst: f64 = 0.0;
        for idx in picked {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = adapters.clone();
                let p = probe.adapters.get_mut(&a.target).expect("adapter exists");
                if idx < nb {
                    p.b.data[idx] += delta;
                } else {
                    p.d.data[idx - nb] += delta;
                }
                sft_loss(model, Some(&probe), sample)
            };
            let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
            let exact = if idx < nb { g.b.data[idx] } else { g.d.data[idx - nb] };
            let denom = exact.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((exact - numeric).abs() / denom);
            coordinates += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_adapter.insert(a.target.clone(), worst);
    }
    Ok(GradCheck {
        epsilon,
        max_rel_err,
        per_adapter,
        coordinates,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated tokens, including EOS when it was produced.
    pub tokens: Vec<usize>,
    /// Stopped by the length cap rather than EOS.
    pub hit_cap: bool,
}

/// Argmax decoding until EOS, `max_new` tokens, or the positional table is
/// full. An empty prompt starts from BOS.
pub fn greedy_generate(
    model: &ToyMllm,
    adapters: Option<&AdapterSet>,
    prompt: &[Element],
    max_new: usize,
) -> Result<Generation> {
    let mut seq = if prompt.is_empty() {
        vec![Element::Token(BOS)]
    } else {
        prompt.to_vec()
    };
    let mut tokens = Vec::new();
    loop {
        if tokens.len() >= max_new || ToyMllm::encoded_len(&seq) >= model.config.max_len {
            return Ok(Generation { tokens, hit_cap: true });
        }
        let logits = model.logits(adapters, &seq)?;
        let next = logits.argmax_row(logits.rows - 1);
        tokens.push(next);
        if next == EOS {
            return Ok(Generation { tokens, hit_cap: false });
        }
        seq.push(Element::Token(next));
    }
}
