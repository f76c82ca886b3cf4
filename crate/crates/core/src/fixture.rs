//! Seeded synthetic knowledge bases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, PairEntry, Schema};

/// The three-entry fixture used throughout the tests and docs.
///
/// | id | audio      | text       | caption                   |
/// |----|------------|------------|---------------------------|
/// | 1  | (1, 0)     | (1, 0)     | dog barking               |
/// | 2  | (0, 1)     | (0, 1)     | rain falling              |
/// | 3  | (0.8, 0.6) | (0.6, 0.8) | dog barking in the rain   |
pub fn toy_kb() -> KnowledgeBase {
    let rows: [(u64, [f32; 2], [f32; 2], &str); 3] = [
        (1, [1.0, 0.0], [1.0, 0.0], "dog barking"),
        (2, [0.0, 1.0], [0.0, 1.0], "rain falling"),
        (3, [0.8, 0.6], [0.6, 0.8], "dog barking in the rain"),
    ];
    let entries = rows
        .into_iter()
        .map(|(id, a, t, caption)| {
            PairEntry::new(
                id,
                Embedding::new(a.to_vec()).unwrap(),
                Embedding::new(t.to_vec()).unwrap(),
                caption,
                format!("clip-{id}"),
                "toy",
            )
        })
        .collect();
    KnowledgeBase::new("toy", Schema::new(2, 2), entries).expect("toy fixture is valid")
}

/// A standard-normal direction, normalized.
pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Embedding {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        if let Ok(e) = Embedding::unit(v) {
            return e;
        }
    }
}

/// Random unit audio and text embeddings with no correlation between them.
pub fn random_kb(n: usize, d_audio: usize, d_text: usize, seed: u64) -> KnowledgeBase {
    gen_fixture(&FixtureSpec {
        n,
        d_audio,
        d_text,
        seed,
        correlation: 0.0,
    })
    .expect("valid random fixture")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub n: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub seed: u64,
    /// Mixing weight of the (lifted) audio embedding in each text embedding.
    pub correlation: f32,
}

const ADJECTIVES: &[&str] = &[
    "loud", "distant", "soft", "sharp", "muffled", "rhythmic", "steady", "brief",
];
const SUBJECTS: &[&str] = &[
    "dog", "engine", "crowd", "bird", "rain", "bell", "train", "water", "wind", "door",
];
const ACTIONS: &[&str] = &[
    "barking", "humming", "chattering", "chirping", "falling", "ringing", "passing", "splashing",
];

/// Copies the first `min(d_a, d_t)` coordinates of `audio` into a `d_t` vector.
fn lift(audio: &[f32], d_text: usize) -> Vec<f32> {
    let mut out = vec![0.0; d_text];
    let m = audio.len().min(d_text);
    out[..m].copy_from_slice(&audio[..m]);
    out
}

/// Generates `n` pairs where `text = normalize(c·lift(audio) + (1 − c)·noise)`.
pub fn gen_fixture(spec: &FixtureSpec) -> Result<KnowledgeBase> {
    if spec.n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if spec.d_audio == 0 || spec.d_text == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.correlation) {
        return Err(Error::InvalidArgument(format!(
            "correlation {} outside [0, 1]",
            spec.correlation
        )));
    }
    let c = spec.correlation;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let id = i as u64 + 1;
        let audio = random_unit(&mut rng, spec.d_audio);
        let noise = random_unit(&mut rng, spec.d_text);
        let lifted = lift(audio.as_slice(), spec.d_text);
        let mixed: Vec<f32> = lifted
            .iter()
            .zip(noise.as_slice())
            .map(|(&a, &z)| c * a + (1.0 - c) * z)
            .collect();
        // A degenerate mix (lift truncated to zero with c = 1) falls back to noise.
        let text = Embedding::unit(mixed).unwrap_or(noise);
        let caption = format!(
            "{} {} {} #{id}",
            ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
            SUBJECTS[rng.random_range(0..SUBJECTS.len())],
            ACTIONS[rng.random_range(0..ACTIONS.len())],
        );
        entries.push(PairEntry::new(
            id,
            audio,
            text,
            caption,
            format!("synthetic://clip-{id}"),
            "synthetic",
        ));
    }
    KnowledgeBase::new("synthetic", Schema::new(spec.d_audio, spec.d_text), entries)
}
