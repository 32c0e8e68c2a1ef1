//! Synthetic graph worlds: viewpoints with landmarks, templated route
//! instructions, oracle paths and node-local observations.

mod episode;
mod world;

pub use episode::{
    make_episode, observe, Action, EpisodeSpec, Percept, Walker, DEFAULT_MAX_LEGS,
    DEFAULT_SUCCESS_RADIUS,
};
pub use world::{generate_world, Node, World, MIN_SPACING};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_APPEARANCE_SEED: u64 = 0x1a4d_3a2c;
/// Scale of the encoder's initial embedding rows relative to the
/// appearance table.
pub const EMBEDDING_INIT_SCALE: f64 = 0.1;

/// Words used by the instruction template.
pub const TEMPLATE_WORDS: [&str; 6] = ["walk", "to", "the", "then", "and", "stop"];

const LANDMARKS: [&str; 52] = [
    "sofa", "lamp", "table", "door", "stairs", "bed", "sink", "plant", "window", "rug",
    "fridge", "oven", "mirror", "shelf", "desk", "chair", "piano", "fireplace", "bathtub",
    "toilet", "closet", "painting", "clock", "counter", "stove", "dresser", "bench", "railing",
    "archway", "hallway", "balcony", "couch", "cabinet", "television", "vase", "curtain",
    "washer", "dryer", "pillar", "fountain", "statue", "doorway", "kitchen", "pantry",
    "garage", "porch", "patio", "stool", "bookcase", "wardrobe", "ottoman", "bin",
];

/// The first `n` built-in landmark names.
pub fn landmark_words(n: usize) -> Result<Vec<String>> {
    if n == 0 || n > LANDMARKS.len() {
        return Err(Error::Config(format!(
            "landmark count must be in 1..={}",
            LANDMARKS.len()
        )));
    }
    Ok(LANDMARKS[..n].iter().map(|s| s.to_string()).collect())
}

/// Template words followed by the landmark names.
pub fn build_vocabulary(landmarks: &[String]) -> Vocabulary {
    Vocabulary::new(TEMPLATE_WORDS.iter().map(|s| s.to_string()).chain(landmarks.iter().cloned()))
}

/// Leading feature columns kept free of appearance: columns 0 and 1 carry
/// the egocentric direction of a candidate, column 2 marks the current
/// node's own landmark rows (`-1`) apart from candidate rows (`+1`).
pub const GEOMETRY_DIMS: usize = 3;

/// Fixed per-landmark appearance vectors, uniform in `[-1, 1]` outside the
/// geometry columns (which are zero whenever `dim` leaves room for them).
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub table: Tensor,
}

impl Appearance {
    pub fn new(n_landmarks: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Tensor::uniform(n_landmarks, dim, 1.0, &mut rng);
        if dim > GEOMETRY_DIMS {
            for l in 0..n_landmarks {
                table.row_mut(l)[..GEOMETRY_DIMS].fill(0.0);
            }
        }
        Self { table }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn feature(&self, landmark: usize) -> &[f64] {
        self.table.row(landmark)
    }

    /// Initial word-embedding table: landmark words start at a scaled copy
    /// of their appearance vector, other rows are uniform in `[-0.1, 0.1]`.
    pub fn embedding_init<R: Rng + ?Sized>(
        &self,
        vocab: &Vocabulary,
        landmarks: &[String],
        rng: &mut R,
    ) -> Tensor {
        let mut t = Tensor::uniform(vocab.len(), self.dim(), EMBEDDING_INIT_SCALE, rng);
        for (l, w) in landmarks.iter().enumerate() {
            if vocab.contains(w) {
                let row: Vec<f64> = self
                    .feature(l)
                    .iter()
                    .map(|v| v * EMBEDDING_INIT_SCALE)
                    .collect();
                t.row_mut(vocab.id(w)).copy_from_slice(&row);
            }
        }
        t
    }
}
