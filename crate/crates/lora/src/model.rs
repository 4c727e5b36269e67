//! The toy model: patch encoder (VE), aligner (MMA) and causal decoder (LLM).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lora::AdapterSet;
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::{LoraError, Result, BOS};

/// Side of the square grayscale image grid.
pub const IMAGE_SIDE: usize = 8;
const PATCH_SIDE: usize = 4;
/// Patches per image.
pub const PATCHES: usize = (IMAGE_SIDE / PATCH_SIDE) * (IMAGE_SIDE / PATCH_SIDE);
/// Pixels per patch.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    #[serde(rename = "VE")]
    Ve,
    #[serde(rename = "MMA")]
    Mma,
    #[serde(rename = "LLM")]
    Llm,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Ve, Module::Mma, Module::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::Ve => "VE",
            Module::Mma => "MMA",
            Module::Llm => "LLM",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Module {
    type Err = LoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "VE" => Ok(Module::Ve),
            "MMA" => Ok(Module::Mma),
            "LLM" => Ok(Module::Llm),
            other => Err(LoraError::Config(format!(
                "unknown module {other:?}, expected VE, MMA or LLM"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_llm: usize,
    /// Width of the patch features produced by the visual encoder.
    pub d_vis: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Rows of the positional table, i.e. the longest sequence.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_llm: 16,
            d_vis: 8,
            layers: 1,
            heads: 2,
            vocab: 24,
            max_len: 32,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_llm: 8,
            d_vis: 8,
            layers: 1,
            heads: 2,
            vocab: 16,
            max_len: 24,
            seed: 11,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_llm", self.d_llm),
            ("d_vis", self.d_vis),
            ("layers", self.layers),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LoraError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_llm.is_multiple_of(self.heads) {
            return Err(LoraError::Config(format!(
                "d_llm {} is not divisible by {} heads",
                self.d_llm, self.heads
            )));
        }
        if self.vocab <= crate::EOS {
            return Err(LoraError::Config("vocab must hold BOS and EOS".into()));
        }
        Ok(())
    }
}

/// Grayscale `IMAGE_SIDE` x `IMAGE_SIDE` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != IMAGE_SIDE * IMAGE_SIDE {
            return Err(LoraError::Dimension {
                what: "image pixels",
                expected: IMAGE_SIDE * IMAGE_SIDE,
                got: pixels.len(),
            });
        }
        Ok(ImageGrid { pixels })
    }

    /// One row per patch, patches in raster order.
    pub fn patches(&self) -> Result<Mat> {
        if self.pixels.len() != IMAGE_SIDE * IMAGE_SIDE {
            return Err(LoraError::Dimension {
                what: "image pixels",
                expected: IMAGE_SIDE * IMAGE_SIDE,
                got: self.pixels.len(),
            });
        }
        let per_row = IMAGE_SIDE / PATCH_SIDE;
        Ok(Mat::from_fn(PATCHES, PATCH_DIM, |p, k| {
            let (py, px) = (p / per_row, p % per_row);
            let (y, x) = (k / PATCH_SIDE, k % PATCH_SIDE);
            self.pixels[(py * PATCH_SIDE + y) * IMAGE_SIDE + px * PATCH_SIDE + x]
        }))
    }
}

/// One element of an interleaved input, in relative order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Element {
    Token(usize),
    Image(ImageGrid),
}

impl Element {
    /// Positions the element occupies after encoding.
    pub fn width(&self) -> usize {
        match self {
            Element::Token(_) => 1,
            Element::Image(_) => PATCHES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub input: Vec<Element>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub module: Module,
    pub value: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMllm {
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Weight>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl ToyMllm {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v, dv) = (config.d_llm, config.vocab, config.d_vis);
        let mut weights = BTreeMap::new();
        let mut put = |name: String, module: Module, value: Mat| {
            weights.insert(name, Weight { module, value });
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        put(
            "ve.proj".into(),
            Module::Ve,
            uniform(&mut rng, PATCH_DIM, dv, fan(PATCH_DIM)),
        );
        put("ve.bias".into(), Module::Ve, uniform(&mut rng, 1, dv, 0.1));
        put("mma.proj".into(), Module::Mma, uniform(&mut rng, dv, d, fan(dv)));
        put("llm.embed".into(), Module::Llm, uniform(&mut rng, v, d, 1.0));
        put("llm.pos".into(), Module::Llm, uniform(&mut rng, config.max_len, d, 0.1));
        for l in 0..config.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                put(format!("llm.l{l}.{name}"), Module::Llm, uniform(&mut rng, d, d, fan(d)));
            }
            put(format!("llm.l{l}.w1"), Module::Llm, uniform(&mut rng, d, 2 * d, fan(d)));
            put(
                format!("llm.l{l}.w2"),
                Module::Llm,
                uniform(&mut rng, 2 * d, d, fan(2 * d)),
            );
        }
        put("llm.head".into(), Module::Llm, uniform(&mut rng, d, v, fan(d)));
        Ok(ToyMllm { config, weights })
    }

    pub fn weight(&self, name: &str) -> Result<&Weight> {
        self.weights
            .get(name)
            .ok_or_else(|| LoraError::UnknownTarget(name.into()))
    }

    /// Weights used as right-hand operands of a projection.
    pub fn is_projection(name: &str) -> bool {
        !(name.ends_with(".bias") || name == "llm.embed" || name == "llm.pos")
    }

    /// Projection weights of one module, in name order.
    pub fn projections(&self, module: Module) -> Vec<String> {
        self.weights
            .iter()
            .filter(|(n, w)| w.module == module && Self::is_projection(n))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Positions `input` occupies after encoding.
    pub fn encoded_len(input: &[Element]) -> usize {
        input.iter().map(Element::width).sum()
    }

    /// Joint embedding of an interleaved input, shape (L, d_llm).
    pub fn encode(&self, input: &[Element]) -> Result<Mat> {
        let mut g = Graph::new(self, None);
        let h = g.encode(input)?;
        Ok(g.tape.value(h).clone())
    }

    /// Next-token logits at every position, shape (L, vocab).
    pub fn logits(&self, adapters: Option<&AdapterSet>, input: &[Element]) -> Result<Mat> {
        let mut g = Graph::new(self, adapters);
        let out = g.logits(input)?;
        Ok(g.tape.value(out).clone())
    }
}

/// The decoder input for a sample: prompt (or BOS when empty) followed by
/// every target token but the last.
pub(crate) fn teacher_forced_input(sample: &ToySample) -> (Vec<Element>, usize) {
    let mut seq = if sample.input.is_empty() {
        vec![Element::Token(BOS)]
    } else {
        sample.input.clone()
    };
    let prompt_len = ToyMllm::encoded_len(&seq);
    let t = sample.target.len();
    seq.extend(
        sample.target[..t.saturating_sub(1)]
            .iter()
            .map(|&id| Element::Token(id)),
    );
    (seq, prompt_len)
}

/// Forward pass recorded on a tape. Weight and adapter leaves are created
/// on first use, so anything the input does not reach has no leaf.
pub(crate) struct Graph<'a> {
    pub tape: Tape,
    model: &'a ToyMllm,
    adapters: Option<&'a AdapterSet>,
    weights: BTreeMap<&'a str, Var>,
    pub lora: BTreeMap<&'a str, (Var, Var)>,
}

impl<'a> Graph<'a> {
    pub fn new(model: &'a ToyMllm, adapters: Option<&'a AdapterSet>) -> Self {
        Graph {
            tape: Tape::new(),
            model,
            adapters,
            weights: BTreeMap::new(),
            lora: BTreeMap::new(),
        }
    }

    fn weight(&mut self, name: &str) -> Var {
        let (key, w) = self
            .model
            .weights
            .get_key_value(name)
            .unwrap_or_else(|| panic!("model has no weight {name}"));
        if let Some(v) = self.weights.get(key.as_str()) {
            return *v;
        }
        let v = self.tape.leaf(w.value.clone());
        self.weights.insert(key.as_str(), v);
        v
    }

    /// `x W`, plus `(alpha / r) x B D` when an adapter targets `name`.
    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.weight(name);
        let y = self.tape.matmul(x, w);
        let Some(adapter) = self.adapters.and_then(|a| a.get(name)) else {
            return y;
        };
        let (b, d) = match self.lora.get(adapter.target.as_str()) {
            Some(bd) => *bd,
            None => {
                let bd = (self.tape.leaf(adapter.b.clone()), self.tape.leaf(adapter.d.clone()));
                self.lora.insert(adapter.target.as_str(), bd);
                bd
            }
        };
        let xb = self.tape.matmul(x, b);
        let delta = self.tape.matmul(xb, d);
        let delta = self.tape.scale(delta, adapter.scale());
        self.tape.add(y, delta)
    }

    pub fn encode(&mut self, input: &[Element]) -> Result<Var> {
        let cfg = &self.model.config;
        if input.is_empty() {
            return Err(LoraError::Config("cannot encode an empty input".into()));
        }
        let len = ToyMllm::encoded_len(input);
        if len > cfg.max_len {
            return Err(LoraError::SequenceTooLong { len, max: cfg.max_len });
        }
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for el in input {
            match el {
                Element::Token(id) => {
                    if *id >= cfg.vocab {
                        return Err(LoraError::TokenOutOfRange {
                            token: *id,
                            vocab: cfg.vocab,
                        });
                    }
                    run.push(*id);
                }
                Element::Image(img) => {
                    if !run.is_empty() {
                        let table = self.weight("llm.embed");
                        parts.push(self.tape.gather(table, std::mem::take(&mut run)));
                    }
                    let patches = self.tape.leaf(img.patches()?);
                    let feats = self.linear(patches, "ve.proj");
                    let bias = self.weight("ve.bias");
                    let feats = self.tape.add_row(feats, bias);
                    let feats = self.tape.tanh(feats);
                    parts.push(self.linear(feats, "mma.proj"));
                }
            }
        }
        if !run.is_empty() {
            let table = self.weight("llm.embed");
            parts.push(self.tape.gather(table, run));
        }
        let h = if parts.len() == 1 {
            parts[0]
        } else {
            self.tape.concat_rows(parts)
        };
        let pos_table = self.weight("llm.pos");
        let pos = self.tape.gather(pos_table, (0..len).collect());
        Ok(self.tape.add(h, pos))
    }

    pub fn logits(&mut self, input: &[Element]) -> Result<Var> {
        let h = self.encode(input)?;
        Ok(self.decode(h))
    }

    fn decode(&mut self, h: Var) -> Var {
        let cfg = self.model.config.clone();
        let dh = cfg.d_llm / cfg.heads;
        let mut x = h;
        for l in 0..cfg.layers {
            let n = self.tape.rms_norm(x, NORM_EPS);
            let q = self.linear(n, &format!("llm.l{l}.wq"));
            let k = self.linear(n, &format!("llm.l{l}.wk"));
            let v = self.linear(n, &format!("llm.l{l}.wv"));
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = self.tape.slice_cols(q, hd * dh, dh);
                let kh = self.tape.slice_cols(k, hd * dh, dh);
                let vh = self.tape.slice_cols(v, hd * dh, dh);
                let kt = self.tape.transpose(kh);
                let s = self.tape.matmul(qh, kt);
                let s = self.tape.scale(s, 1.0 / (dh as f64).sqrt());
                let a = self.tape.causal_softmax(s);
                heads.push(self.tape.matmul(a, vh));
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                self.tape.concat_cols(heads)
            };
            let o = self.linear(cat, &format!("llm.l{l}.wo"));
            x = self.tape.add(x, o);
            let n = self.tape.rms_norm(x, NORM_EPS);
            let f = self.linear(n, &format!("llm.l{l}.w1"));
            let f = self.tape.tanh(f);
            let f = self.linear(f, &format!("llm.l{l}.w2"));
            x = self.tape.add(x, f);
        }
        let n = self.tape.rms_norm(x, NORM_EPS);
        self.linear(n, "llm.head")
    }
}
