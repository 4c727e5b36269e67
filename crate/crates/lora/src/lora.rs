//! Low-rank adapters `W + (alpha / r) B D` and merging.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Module, ToyMllm};
use crate::tensor::Mat;
use crate::{LoraError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// Name of the adapted weight, e.g. `llm.l0.wq`.
    pub target: String,
    pub module: Module,
    pub rank: usize,
    pub alpha: f64,
    /// d x r, zero at initialisation.
    pub b: Mat,
    /// r x k, small random values at initialisation.
    pub d: Mat,
}

impl LoraAdapter {
    pub fn new(model: &ToyMllm, target: &str, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = model.weight(target)?;
        if !ToyMllm::is_projection(target) {
            return Err(LoraError::NotAdaptable { target: target.into() });
        }
        let (d, k) = w.value.shape();
        let max = d.min(k) / 2;
        if rank == 0 || rank > max {
            return Err(LoraError::RankTooLarge {
                target: target.into(),
                rank,
                max,
            });
        }
        let bound = 1.0 / (rank as f64).sqrt();
        Ok(LoraAdapter {
            target: target.into(),
            module: w.module,
            rank,
            alpha,
            b: Mat::zeros(d, rank),
            d: Mat::from_fn(rank, k, |_, _| rng.random_range(-bound..bound)),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) B D`.
    pub fn delta(&self) -> Mat {
        self.b.matmul(&self.d).scale(self.scale())
    }
}

/// Adapters keyed by target weight name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl AdapterSet {
    /// Adapters on `targets`, seeded deterministically.
    pub fn new(model: &ToyMllm, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = BTreeMap::new();
        for t in targets {
            adapters.insert(t.clone(), LoraAdapter::new(model, t, rank, alpha, &mut rng)?);
        }
        Ok(AdapterSet { adapters })
    }

    /// The default placement: every projection of the visual encoder and
    /// aligner, and the attention, feed-forward and output projections of
    /// the decoder.
    pub fn default_targets(model: &ToyMllm) -> Vec<String> {
        Module::ALL.iter().flat_map(|m| model.projections(*m)).collect()
    }

    /// Replaces every B with uniform values in `[-bound, bound)`, so that
    /// gradients reach both factors.
    pub fn randomize_b(&mut self, seed: u64, bound: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in self.adapters.values_mut() {
            a.b = Mat::from_fn(a.b.rows, a.b.cols, |_, _| rng.random_range(-bound..bound));
        }
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn has_module(&self, module: Module) -> bool {
        self.adapters.values().any(|a| a.module == module)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.adapters.values_mut()
    }
}

/// Folds every adapter into its weight, `W' = W + (alpha / r) B D`.
pub fn lora_merge(model: &ToyMllm, adapters: &AdapterSet) -> Result<ToyMllm> {
    let mut merged = model.clone();
    for a in adapters.iter() {
        let w = merged
            .weights
            .get_mut(&a.target)
            .ok_or_else(|| LoraError::UnknownTarget(a.target.clone()))?;
        let delta = a.delta();
        if delta.shape() != w.value.shape() {
            return Err(LoraError::Dimension {
                what: "adapter delta rows",
                expected: w.value.rows,
                got: delta.rows,
            });
        }
        w.value.add_assign(&delta);
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn rank_bound_is_half_the_smaller_side() {
        let model = ToyMllm::new(ModelConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // llm.head is 8 x 16.
        assert!(LoraAdapter::new(&model, "llm.head", 4, 8.0, &mut rng).is_ok());
        assert!(matches!(
            LoraAdapter::new(&model, "llm.head", 5, 8.0, &mut rng),
            Err(LoraError::RankTooLarge { max: 4, .. })
        ));
        assert!(matches!(
            LoraAdapter::new(&model, "llm.l9.wq", 2, 8.0, &mut rng),
            Err(LoraError::UnknownTarget(_))
        ));
        assert!(matches!(
            LoraAdapter::new(&model, "llm.embed", 2, 8.0, &mut rng),
            Err(LoraError::NotAdaptable { .. })
        ));
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let model = ToyMllm::new(ModelConfig::tiny()).unwrap();
        let set = AdapterSet::new(&model, &AdapterSet::default_targets(&model), 2, 8.0, 1).unwrap();
        assert!(set.iter().all(|a| a.delta().data.iter().all(|v| *v == 0.0)));
        assert!(set.iter().all(|a| a.d.norm() > 0.0));
        assert!(Module::ALL.iter().all(|m| set.has_module(*m)));
    }
}
