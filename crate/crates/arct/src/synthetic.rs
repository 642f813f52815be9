//! Deterministic synthetic corpora for smoke tests: a warrant-selection task
//! whose correct warrant always carries a cue token, and an inference task
//! whose labels ride the same cue vocabulary so a pretrained encoder has
//! something to transfer.

use crate::corpus::{ArctInstance, NliInstance, Sentence};
use crate::error::Result;
use crate::tensor::{Rng, Tensor};

const FILLERS: [&str; 10] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
];

/// Cue token that marks a correct warrant (and drives entailment below).
pub const CUE: &str = "indeed";
/// Token that marks a contradiction in the inference corpus.
pub const ANTI_CUE: &str = "never";

fn phrase(rng: &mut Rng, lo: usize, hi: usize) -> Vec<&'static str> {
    let len = lo + rng.below(hi - lo + 1);
    (0..len).map(|_| FILLERS[rng.below(FILLERS.len())]).collect()
}

fn sentence_from(tokens: &[&str]) -> Sentence {
    Sentence::new(&tokens.join(" ")).expect("synthetic sentences are non-empty")
}

/// Warrant-selection instances where the correct warrant always contains the
/// cue token and the distractor never does. Learnable from warrant text
/// alone, so every model variant can solve it.
pub fn cue_corpus(n: usize, seed: u64) -> Vec<ArctInstance> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let claim = phrase(&mut rng, 2, 3);
            let reason = phrase(&mut rng, 2, 3);
            let mut good = phrase(&mut rng, 1, 2);
            good.insert(rng.below(good.len() + 1), CUE);
            let bad = phrase(&mut rng, 2, 3);
            let label = rng.below(2);
            let (w0, w1) = if label == 0 {
                (&good, &bad)
            } else {
                (&bad, &good)
            };
            ArctInstance {
                id: format!("synth-{i}"),
                warrant0: sentence_from(w0),
                warrant1: sentence_from(w1),
                label,
                reason: sentence_from(&reason),
                claim: sentence_from(&claim),
                debate_title: "synthetic".to_string(),
                debate_info: "cue corpus".to_string(),
            }
        })
        .collect()
}

/// Word vectors covering the entire synthetic vocabulary, drawn once from
/// the seed. Feeding these to two runs — say pretraining and fine-tuning —
/// gives every shared token the same embedding in both, which is what lets
/// an encoder trained on one corpus carry over to the other.
pub fn shared_vectors(dim: usize, seed: u64) -> Result<(Vec<String>, Tensor)> {
    let mut tokens: Vec<String> = FILLERS.iter().map(|s| s.to_string()).collect();
    tokens.push(CUE.to_string());
    tokens.push(ANTI_CUE.to_string());
    let mut rng = Rng::new(seed);
    let mut data = vec![0.0; tokens.len() * dim];
    for v in &mut data {
        *v = rng.normal(0.0, 0.1);
    }
    let matrix = Tensor::new(vec![tokens.len(), dim], data)?;
    Ok((tokens, matrix))
}

/// Three-way inference instances over the same vocabulary: entailment pairs
/// carry the cue token on both sides, contradiction pairs carry the anti-cue
/// in the hypothesis, neutral pairs are filler only. Pretraining on this
/// teaches the encoder to surface exactly the cue the warrant task needs.
pub fn nli_corpus(n: usize, seed: u64) -> Vec<NliInstance> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let label = rng.below(3);
            let mut premise = phrase(&mut rng, 2, 3);
            let mut hypothesis = phrase(&mut rng, 2, 3);
            match label {
                0 => {
                    premise.insert(rng.below(premise.len() + 1), CUE);
                    hypothesis.insert(rng.below(hypothesis.len() + 1), CUE);
                }
                2 => {
                    hypothesis.insert(rng.below(hypothesis.len() + 1), ANTI_CUE);
                }
                _ => {}
            }
            NliInstance {
                premise: sentence_from(&premise),
                hypothesis: sentence_from(&hypothesis),
                label,
            }
        })
        .collect()
}
