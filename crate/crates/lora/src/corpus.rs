//! Toy grading corpus: each image encodes one root-to-leaf path of a
//! four-level inspection tree and the target is that path's reasoning
//! trace followed by the grade.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Element, ImageGrid, ToySample, IMAGE_SIDE};

/// Vocabulary size the corpus needs.
pub const CORPUS_VOCAB: usize = 24;

/// Token ids of the corpus vocabulary.
pub mod vocab {
    pub const BOS: usize = crate::BOS;
    pub const EOS: usize = crate::EOS;
    pub const TASK: usize = 2;
    pub const CHECK: usize = 3;
    pub const QUESTION: usize = 4;
    pub const N1: usize = 5;
    pub const N2: usize = 6;
    pub const N3: usize = 7;
    pub const N4A: usize = 8;
    pub const N4B: usize = 9;
    pub const YES: usize = 10;
    pub const NO: usize = 11;
    pub const EXISTS: usize = 12;
    pub const NOT_EXISTS: usize = 13;
    pub const ELSE: usize = 14;
    pub const KIND: usize = 15;
    pub const MAJOR: usize = 16;
    pub const URGENT: usize = 17;
}

/// One root-to-leaf path: visited (node, answer) pairs and the grade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPath {
    pub steps: Vec<(usize, usize)>,
    pub grade: usize,
}

impl CorpusPath {
    pub fn all() -> Vec<CorpusPath> {
        use vocab::*;
        let p = |steps: &[(usize, usize)], grade| CorpusPath {
            steps: steps.to_vec(),
            grade,
        };
        vec![
            p(&[(N1, NOT_EXISTS)], ELSE),
            p(&[(N1, EXISTS), (N2, NO)], ELSE),
            p(&[(N1, EXISTS), (N2, YES), (N3, NO), (N4A, NO)], KIND),
            p(&[(N1, EXISTS), (N2, YES), (N3, NO), (N4A, YES)], MAJOR),
            p(&[(N1, EXISTS), (N2, YES), (N3, YES), (N4B, NO)], MAJOR),
            p(&[(N1, EXISTS), (N2, YES), (N3, YES), (N4B, YES)], URGENT),
        ]
    }

    pub fn target(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.steps.iter().flat_map(|&(n, a)| [n, a]).collect();
        t.push(self.grade);
        t.push(vocab::EOS);
        t
    }

    /// Per-quadrant intensity: quadrant k is bright when the answer at
    /// depth k is affirmative, dim when negative, mid-grey when the path
    /// ends before depth k.
    fn levels(&self) -> [f64; 4] {
        let mut lv = [0.0; 4];
        for (k, slot) in lv.iter_mut().enumerate() {
            *slot = match self.steps.get(k) {
                Some(&(_, a)) if a == vocab::YES || a == vocab::EXISTS => 1.0,
                Some(_) => -1.0,
                None => 0.0,
            };
        }
        lv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<ToySample>,
    /// Index into [`CorpusPath::all`] for each sample.
    pub paths: Vec<usize>,
}

/// `n` samples cycling through the six paths; pixel noise is seeded.
pub fn toy_corpus(n: usize, seed: u64) -> Corpus {
    let all = CorpusPath::all();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = IMAGE_SIDE / 2;
    let mut samples = Vec::with_capacity(n);
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let p = i % all.len();
        let lv = all[p].levels();
        let pixels = (0..IMAGE_SIDE * IMAGE_SIDE)
            .map(|k| {
                let (y, x) = (k / IMAGE_SIDE, k % IMAGE_SIDE);
                let quadrant = (y / half) * 2 + x / half;
                lv[quadrant] + rng.random_range(-0.1..0.1)
            })
            .collect();
        let image = ImageGrid::new(pixels).expect("grid has IMAGE_SIDE^2 pixels");
        samples.push(ToySample {
            input: vec![
                Element::Token(vocab::BOS),
                Element::Token(vocab::TASK),
                Element::Token(vocab::CHECK),
                Element::Image(image),
                Element::Token(vocab::QUESTION),
            ],
            target: all[p].target(),
        });
        paths.push(p);
    }
    Corpus { samples, paths }
}
