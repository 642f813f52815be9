//! Text handling: tokenization, vocabulary, dataset loading, pretrained
//! vectors, negation statistics, and deterministic dataset perturbations.
//!
//! Argument instances arrive as tab-separated files with a `#id ...` header;
//! inference pairs and pretrained vectors use their conventional plain-text
//! layouts. All loaders fail with the offending line or column named rather
//! than silently skipping records.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Default surface forms treated as negation markers.
pub const NEGATION_LEXICON: &[&str] = &[
    "not", "n't", "no", "never", "none", "nothing", "nobody", "nowhere", "neither", "nor",
    "cannot",
];

/// Lowercase and split into word and punctuation tokens.
///
/// Rules: whitespace separates tokens; punctuation characters split off as
/// single-character tokens; the contraction suffix `n't` becomes its own
/// token; hyphens inside a word stay put (`self-evident` is one token).
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for word in lower.split_whitespace() {
        split_word(word, &mut tokens);
    }
    tokens
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '-' && c != '\''
}

fn split_word(word: &str, out: &mut Vec<String>) {
    // Peel punctuation into single-character tokens, keep maximal runs of
    // word characters, then split a trailing n't off the word runs.
    let mut run = String::new();
    for c in word.chars() {
        if is_punct(c) {
            flush_run(&mut run, out);
            out.push(c.to_string());
        } else {
            run.push(c);
        }
    }
    flush_run(&mut run, out);
}

fn flush_run(run: &mut String, out: &mut Vec<String>) {
    if run.is_empty() {
        return;
    }
    if let Some(stem) = run.strip_suffix("n't") {
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
        out.push("n't".to_string());
    } else {
        out.push(std::mem::take(run));
    }
    run.clear();
}

/// A sentence kept both as raw text (for exact file round trips) and as its
/// token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    raw: String,
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(raw: &str) -> Result<Sentence> {
        let tokens = tokenize(raw);
        if tokens.is_empty() {
            return Err(Error::Empty(format!("sentence with no tokens: {raw:?}")));
        }
        Ok(Sentence {
            raw: raw.to_string(),
            tokens,
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One warrant-selection instance: a claim/reason pair and two candidate
/// warrants, exactly one of which (`label`) completes the argument.
#[derive(Clone, Debug, PartialEq)]
pub struct ArctInstance {
    pub id: String,
    pub warrant0: Sentence,
    pub warrant1: Sentence,
    pub label: usize,
    pub reason: Sentence,
    pub claim: Sentence,
    pub debate_title: String,
    pub debate_info: String,
}

/// One premise/hypothesis inference pair with a three-way label:
/// 0 entailment, 1 neutral, 2 contradiction.
#[derive(Clone, Debug, PartialEq)]
pub struct NliInstance {
    pub premise: Sentence,
    pub hypothesis: Sentence,
    pub label: usize,
}

const ARCT_COLUMNS: [&str; 8] = [
    "#id",
    "warrant0",
    "warrant1",
    "correctLabelW0orW1",
    "reason",
    "claim",
    "debateTitle",
    "debateInfo",
];

/// Load a tab-separated warrant-selection file. The header row fixes column
/// positions; all eight canonical columns must be present.
pub fn load_arct_tsv(path: &Path) -> Result<Vec<ArctInstance>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let names: Vec<&str> = header.split('\t').collect();
    let mut col = [0usize; 8];
    for (slot, want) in ARCT_COLUMNS.iter().enumerate() {
        col[slot] = names
            .iter()
            .position(|n| n == want)
            .ok_or_else(|| {
                Error::Format(format!("{}: missing column {want}", path.display()))
            })?;
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |slot: usize| -> Result<&str> {
            fields.get(col[slot]).copied().ok_or_else(|| {
                Error::Format(format!(
                    "{} line {}: missing column {}",
                    path.display(),
                    lineno + 2,
                    ARCT_COLUMNS[slot]
                ))
            })
        };
        let id = get(0)?.to_string();
        let label_text = get(3)?;
        let label: usize = label_text.parse().map_err(|_| {
            Error::Value(format!(
                "instance {id}: label {label_text:?} is not an integer"
            ))
        })?;
        if label > 1 {
            return Err(Error::Value(format!(
                "instance {id}: label {label} outside {{0, 1}}"
            )));
        }
        out.push(ArctInstance {
            id,
            warrant0: Sentence::new(get(1)?)?,
            warrant1: Sentence::new(get(2)?)?,
            label,
            reason: Sentence::new(get(4)?)?,
            claim: Sentence::new(get(5)?)?,
            debate_title: get(6)?.to_string(),
            debate_info: get(7)?.to_string(),
        });
    }
    Ok(out)
}

/// Write instances back out in the canonical eight-column layout.
pub fn save_arct_tsv(path: &Path, instances: &[ArctInstance]) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut write = |line: &str| -> Result<()> {
        writeln!(f, "{line}").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    };
    write(&ARCT_COLUMNS.join("\t"))?;
    for inst in instances {
        write(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            inst.id,
            inst.warrant0.raw(),
            inst.warrant1.raw(),
            inst.label,
            inst.reason.raw(),
            inst.claim.raw(),
            inst.debate_title,
            inst.debate_info,
        ))?;
    }
    Ok(())
}

pub fn save_nli_tsv(path: &Path, instances: &[NliInstance]) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut write = |line: &str| -> Result<()> {
        writeln!(f, "{line}").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    };
    write("premise\thypothesis\tlabel")?;
    for inst in instances {
        let label = match inst.label {
            0 => "entailment",
            1 => "neutral",
            2 => "contradiction",
            other => {
                return Err(Error::Value(format!("inference label {other} out of range")));
            }
        };
        write(&format!(
            "{}\t{}\t{}",
            inst.premise.raw(),
            inst.hypothesis.raw(),
            label
        ))?;
    }
    Ok(())
}

/// Load a premise/hypothesis/label file. Labels map entailment -> 0,
/// neutral -> 1, contradiction -> 2.
pub fn load_nli_tsv(path: &Path) -> Result<Vec<NliInstance>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || (lineno == 0 && line.starts_with("premise\t")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "{} line {}: expected 3 tab-separated fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let label = match fields[2] {
            "entailment" => 0,
            "neutral" => 1,
            "contradiction" => 2,
            other => {
                return Err(Error::Value(format!(
                    "{} line {}: unknown label {other:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        out.push(NliInstance {
            premise: Sentence::new(fields[0])?,
            hypothesis: Sentence::new(fields[1])?,
            label,
        });
    }
    Ok(out)
}

/// Token-to-index map. Index 0 is always the unknown token.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl Vocab {
    /// Build from token iterables; first occurrence fixes the index.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> Vocab {
        let mut v = Vocab {
            tokens: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for sent in sentences {
            for tok in sent {
                v.intern(tok);
            }
        }
        v
    }

    /// Rebuild from an explicit token list (e.g. a checkpoint). The first
    /// token must be the unknown token and entries must be distinct.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Value(format!(
                "vocabulary must start with {UNK:?}, found {:?}",
                tokens.first()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Value(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    fn intern(&mut self, tok: &str) -> usize {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), i);
        i
    }

    /// Index of a token, or the unknown index 0.
    pub fn lookup(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(0)
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the unknown token is always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Order-sensitive FNV-1a hash of the token list, for checkpoint
    /// compatibility checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in &self.tokens {
            for b in tok.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x1_0000_01b3);
            }
            h ^= 0xff; // separator so ["ab","c"] != ["a","bc"]
            h = h.wrapping_mul(0x1_0000_01b3);
        }
        h
    }

    pub fn indices(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Collect every sentence of every instance for vocabulary building.
pub fn arct_token_lists(instances: &[ArctInstance]) -> Vec<&[String]> {
    let mut out = Vec::with_capacity(instances.len() * 4);
    for inst in instances {
        out.push(inst.claim.tokens());
        out.push(inst.reason.tokens());
        out.push(inst.warrant0.tokens());
        out.push(inst.warrant1.tokens());
    }
    out
}

pub fn nli_token_lists(instances: &[NliInstance]) -> Vec<&[String]> {
    let mut out = Vec::with_capacity(instances.len() * 2);
    for inst in instances {
        out.push(inst.premise.tokens());
        out.push(inst.hypothesis.tokens());
    }
    out
}

/// Load pretrained vectors in the plain-text format `token v1 ... vDIM`.
/// Every line must carry exactly `dim` values. Returns the token order of the
/// file plus one embedding matrix row per token.
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<(Vec<String>, Tensor)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut tokens = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tok = parts
            .next()
            .ok_or_else(|| Error::Format(format!("{} line {}: blank entry", path.display(), lineno + 1)))?;
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "{} line {}: bad number {p:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "{} line {}: expected {dim} values, found {}",
                path.display(),
                lineno + 1,
                values.len()
            )));
        }
        tokens.push(tok.to_string());
        data.extend_from_slice(&values);
    }
    if tokens.is_empty() {
        return Err(Error::Empty(format!("{}: no vectors", path.display())));
    }
    let rows = tokens.len();
    Ok((tokens, Tensor::new(vec![rows, dim], data)?))
}

/// Build the embedding matrix for a vocabulary from pretrained vectors.
/// Known tokens copy their pretrained row; unknown tokens (including the
/// unknown token itself) draw from N(0, 0.1) deterministically by seed.
pub fn embeddings_for_vocab(
    vocab: &Vocab,
    pretrained_tokens: &[String],
    pretrained: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let dim = pretrained.cols();
    let by_token: HashMap<&str, usize> = pretrained_tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut rng = Rng::new(seed);
    let mut data = vec![0.0; vocab.len() * dim];
    for (i, tok) in vocab.tokens().iter().enumerate() {
        match by_token.get(tok.as_str()) {
            Some(&row) => {
                data[i * dim..(i + 1) * dim]
                    .copy_from_slice(&pretrained.data()[row * dim..(row + 1) * dim]);
            }
            None => {
                for v in &mut data[i * dim..(i + 1) * dim] {
                    *v = rng.normal(0.0, 0.1);
                }
            }
        }
    }
    Tensor::new(vec![vocab.len(), dim], data)
}

/// An embedding matrix with every row drawn from N(0, 0.1), for runs without
/// pretrained vectors. Matches the unknown-token draws of
/// [`embeddings_for_vocab`] row for row.
pub fn random_embeddings(vocab: &Vocab, dim: usize, seed: u64) -> Result<Tensor> {
    let mut rng = Rng::new(seed);
    let mut data = vec![0.0; vocab.len() * dim];
    for v in &mut data {
        *v = rng.normal(0.0, 0.1);
    }
    Tensor::new(vec![vocab.len(), dim], data)
}

/// True when any token of the sentence is in the negation lexicon.
pub fn detect_negation(sentence: &Sentence, lexicon: &[String]) -> bool {
    sentence
        .tokens()
        .iter()
        .any(|t| lexicon.iter().any(|n| n == t))
}

pub fn default_negation_lexicon() -> Vec<String> {
    NEGATION_LEXICON.iter().map(|s| s.to_string()).collect()
}

/// Negation counts over a corpus, from the warrants' point of view.
#[derive(Clone, Debug, PartialEq)]
pub struct NegationStats {
    pub total: usize,
    /// Instances where at least one warrant carries a negation.
    pub any_warrant: usize,
    /// Instances where exactly one warrant carries a negation.
    pub exactly_one: usize,
    /// Of the `exactly_one` instances, how many times the negated warrant is
    /// the correct one.
    pub negated_is_correct: usize,
    /// Instances whose slot-0 warrant carries a negation and is correct.
    pub negated_correct_at_0: usize,
    /// Instances whose slot-1 warrant carries a negation and is correct.
    pub negated_correct_at_1: usize,
}

impl NegationStats {
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.any_warrant as f64 / self.total as f64
        }
    }

    /// Fraction of discriminating instances won by the negated warrant.
    pub fn negated_correct_rate(&self) -> f64 {
        if self.exactly_one == 0 {
            0.0
        } else {
            self.negated_is_correct as f64 / self.exactly_one as f64
        }
    }

    /// Fraction of all instances whose slot-0 warrant carries a negation and
    /// is the correct one.
    pub fn p_correct_at_0(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.negated_correct_at_0 as f64 / self.total as f64
        }
    }

    /// Fraction of all instances whose slot-1 warrant carries a negation and
    /// is the correct one.
    pub fn p_correct_at_1(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.negated_correct_at_1 as f64 / self.total as f64
        }
    }
}

pub fn corpus_negation_stats(
    instances: &[ArctInstance],
    lexicon: &[String],
) -> Result<NegationStats> {
    if instances.is_empty() {
        return Err(Error::Empty("negation statistics of an empty corpus".into()));
    }
    let mut s = NegationStats {
        total: instances.len(),
        any_warrant: 0,
        exactly_one: 0,
        negated_is_correct: 0,
        negated_correct_at_0: 0,
        negated_correct_at_1: 0,
    };
    for inst in instances {
        let n0 = detect_negation(&inst.warrant0, lexicon);
        let n1 = detect_negation(&inst.warrant1, lexicon);
        if n0 || n1 {
            s.any_warrant += 1;
        }
        if n0 != n1 {
            s.exactly_one += 1;
            let negated = usize::from(n1);
            if negated == inst.label {
                s.negated_is_correct += 1;
            }
        }
        if n0 && inst.label == 0 {
            s.negated_correct_at_0 += 1;
        }
        if n1 && inst.label == 1 {
            s.negated_correct_at_1 += 1;
        }
    }
    Ok(s)
}

/// Keep a random half of the instances (floor(n/2) of them), preserving the
/// original order of the survivors. Deterministic in the seed.
pub fn make_half_split(instances: &[ArctInstance], seed: u64) -> Vec<ArctInstance> {
    let n = instances.len();
    let keep = n / 2;
    let mut rng = Rng::new(seed);
    let chosen = rng.sample_indices(n, keep);
    chosen.into_iter().map(|i| instances[i].clone()).collect()
}

/// Swap the two warrants of an instance and flip its label, preserving the
/// claim/reason context. The transformed instance asks the same question with
/// the candidates in the other order.
pub fn swap_flip(inst: &ArctInstance) -> ArctInstance {
    let mut out = inst.clone();
    std::mem::swap(&mut out.warrant0, &mut out.warrant1);
    out.label = 1 - out.label;
    out
}

/// Outcome of `make_unbalanced`.
#[derive(Clone, Debug)]
pub struct UnbalancedOutcome {
    pub instances: Vec<ArctInstance>,
    /// Step-1 swap-flips: negation-bearing correct warrants moved from slot 0
    /// to slot 1.
    pub negation_swaps: usize,
    /// Step-2 swap-flips: non-negation correct warrants moved from slot 1 to
    /// slot 0 to restore the label balance.
    pub rebalance_swaps: usize,
    /// Rebalance swaps that could not be performed for lack of eligible
    /// instances (0 when the corpus is large enough).
    pub shortfall: usize,
}

/// Build a deliberately position-biased set in two steps. Step 1: every
/// instance whose correct warrant carries a negation and sits at slot 0 is
/// swap-flipped, so after it all negation-bearing correct warrants sit at
/// slot 1. Step 2: the same number of instances whose correct warrant lacks
/// negation and sits at slot 1 are chosen uniformly and swap-flipped to
/// slot 0, keeping per-class label counts within one of the original. If too
/// few are eligible, all of them are swapped and the shortfall reported.
/// Sentence text is never altered.
pub fn make_unbalanced(
    instances: &[ArctInstance],
    lexicon: &[String],
    seed: u64,
) -> UnbalancedOutcome {
    let mut out: Vec<ArctInstance> = instances.to_vec();
    let mut negation_swaps = 0;
    for inst in &mut out {
        if inst.label == 0 && detect_negation(&inst.warrant0, lexicon) {
            let swapped = swap_flip(inst);
            *inst = swapped;
            negation_swaps += 1;
        }
    }
    let eligible: Vec<usize> = out
        .iter()
        .enumerate()
        .filter(|(_, inst)| inst.label == 1 && !detect_negation(&inst.warrant1, lexicon))
        .map(|(i, _)| i)
        .collect();
    let take = negation_swaps.min(eligible.len());
    let mut rng = Rng::new(seed);
    for c in rng.sample_indices(eligible.len(), take) {
        let i = eligible[c];
        let swapped = swap_flip(&out[i]);
        out[i] = swapped;
    }
    UnbalancedOutcome {
        instances: out,
        negation_swaps,
        rebalance_swaps: take,
        shortfall: negation_swaps - take,
    }
}
