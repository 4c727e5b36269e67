//! Toy fine-tuning runs and gradient checks.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};

use dgrade_lora::{
    grad_check, greedy_generate, save_checkpoint, toy_corpus, train, AdapterSet, Element, ModelConfig, Module,
    SftConfig, ToyMllm, ToySample, CORPUS_VOCAB,
};
use serde_json::json;

use crate::args::{GradecheckArgs, TrainToyArgs};
use crate::failure::{Failure, Result};
use crate::session::Session;
use crate::Output;

/// Loss below which a corpus counts as learned.
const LEARNED_LOSS: f64 = 0.05;

fn module_set(names: &[String]) -> Result<BTreeSet<Module>> {
    let mut set = BTreeSet::new();
    for n in names {
        set.insert(n.parse::<Module>().map_err(Failure::config)?);
    }
    if set.is_empty() {
        return Err(Failure::config("at least one trainable module is required"));
    }
    Ok(set)
}

fn run_name(modules: &BTreeSet<Module>) -> String {
    modules.iter().map(|m| m.as_str()).collect::<Vec<_>>().join("+")
}

pub fn train_toy(s: &Session, a: &TrainToyArgs) -> Result<Output> {
    let lc = &s.cfg().lora;
    let names = if a.modules.is_empty() { &lc.modules } else { &a.modules };
    let modules = module_set(names)?;
    let epochs = a.epochs.unwrap_or(lc.epochs);
    let samples = a.samples.unwrap_or(lc.samples);
    let rank = a.rank.unwrap_or(lc.rank);
    let seed = s.cfg().seed;
    let cfg = SftConfig {
        modules: modules.clone(),
        learning_rate: a.learning_rate.unwrap_or(lc.learning_rate),
        epochs,
        batch_size: a.batch_size.unwrap_or(lc.batch_size),
        seed,
    };
    cfg.validate()?;
    if lc.vocab < CORPUS_VOCAB {
        return Err(Failure::config(format!(
            "lora.vocab {} is smaller than the corpus vocabulary of {CORPUS_VOCAB}",
            lc.vocab
        )));
    }
    if samples == 0 {
        return Err(Failure::config("the corpus needs at least one sample"));
    }
    let name = run_name(&modules);
    let out = a.out.clone().unwrap_or_else(|| s.path(&s.cfg().paths.toy).join(&name));
    if s.dry_run {
        return Ok(Output::plan(vec![
            format!(
                "build the toy model (d_llm {}, {} layers, vocab {})",
                lc.d_llm, lc.layers, lc.vocab
            ),
            format!("attach rank-{rank} adapters and train {name} for {epochs} epochs on {samples} samples"),
            format!(
                "write train.jsonl, checkpoint.json and summary.json to {}",
                out.display()
            ),
        ]));
    }
    let model = ToyMllm::new(ModelConfig {
        d_llm: lc.d_llm,
        layers: lc.layers,
        heads: lc.heads,
        vocab: lc.vocab,
        seed,
        ..ModelConfig::default()
    })?;
    let corpus = toy_corpus(samples, seed);
    let mut adapters = AdapterSet::new(&model, &AdapterSet::default_targets(&model), rank, lc.alpha, seed)?;
    fs::create_dir_all(&out)?;
    let mut log = BufWriter::new(File::create(out.join("train.jsonl"))?);
    let mut write_err = None;
    let summary = train(&model, &mut adapters, &cfg, &corpus.samples, |entry| {
        if write_err.is_none() {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log.flush()?;
    let exact = corpus
        .samples
        .iter()
        .map(|x| greedy_generate(&model, Some(&adapters), &x.input, x.target.len() + 4).map(|g| g.tokens == x.target))
        .collect::<std::result::Result<Vec<bool>, _>>()?
        .into_iter()
        .filter(|ok| *ok)
        .count();
    let learned_at = summary.epoch_losses.iter().position(|l| *l < LEARNED_LOSS);
    save_checkpoint(&out.join("checkpoint.json"), &model, &adapters)?;
    let record = json!({
        "modules": name,
        "config": cfg,
        "rank": rank,
        "alpha": lc.alpha,
        "samples": samples,
        "steps": summary.steps,
        "final_loss": summary.final_loss,
        "epoch_losses": summary.epoch_losses,
        "first_epoch_below": learned_at,
        "exact_matches": exact,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    let text = format!(
        "{name}: final loss {:.4}, below {LEARNED_LOSS} from epoch {}, {exact}/{samples} targets reproduced\nrun written to {}",
        summary.final_loss,
        learned_at.map_or("-".to_string(), |e| (e + 1).to_string()),
        out.display()
    );
    Ok(Output::new(text, record))
}

/// Gradient-check sample for the tiny configuration: every token id is
/// below its vocabulary of 16.
fn check_sample(seed: u64) -> ToySample {
    let base = toy_corpus(1, seed).samples.remove(0);
    let image = base
        .input
        .iter()
        .find(|e| matches!(e, Element::Image(_)))
        .cloned()
        .expect("corpus samples carry an image");
    ToySample {
        input: vec![Element::Token(0), Element::Token(2), image, Element::Token(4)],
        target: vec![5, 12, 6, 11, 14, dgrade_lora::EOS],
    }
}

pub fn gradecheck(s: &Session, a: &GradecheckArgs) -> Result<Output> {
    if a.epsilon.is_nan() || a.epsilon <= 0.0 {
        return Err(Failure::config("--epsilon must be positive"));
    }
    let seed = s.cfg().seed;
    let config = ModelConfig {
        seed,
        ..ModelConfig::tiny()
    };
    if s.dry_run {
        return Ok(Output::plan(vec![format!(
            "check {} coordinates per adapter of the tiny model (d_llm {}, vocab {}, rank 2) at epsilon {:e}",
            a.coords, config.d_llm, config.vocab, a.epsilon
        )]));
    }
    let model = ToyMllm::new(config)?;
    let mut adapters = AdapterSet::new(&model, &AdapterSet::default_targets(&model), 2, 4.0, seed)?;
    adapters.randomize_b(seed.wrapping_add(1), 0.3);
    let report = grad_check(&model, &adapters, &check_sample(seed), a.epsilon, a.coords, seed)?;
    let pass = report.max_rel_err < a.tolerance;
    let mut text = format!(
        "max relative error {:.3e} over {} coordinates at epsilon {:e}: {}\n",
        report.max_rel_err,
        report.coordinates,
        a.epsilon,
        if pass { "ok" } else { "FAILED" }
    );
    for (target, err) in &report.per_adapter {
        text.push_str(&format!("  {target:<12} {err:.3e}\n"));
    }
    if !pass {
        eprint!("{text}");
        return Err(Failure::runtime(format!(
            "gradient check exceeded the tolerance {:e}",
            a.tolerance
        )));
    }
    Ok(Output::new(
        text.trim_end(),
        json!({"report": report, "tolerance": a.tolerance, "pass": pass}),
    ))
}
