//! Corpora: synthetic domain-shift generation with planted spurious tokens,
//! external JSONL ingestion, the fixed-vocabulary tokenizer, and split
//! discipline (the diagnostic held-out set is carved out before splitting).

mod generate;
mod jsonl;
mod tokenizer;

pub use generate::{default_suite, generate_domain, generate_suite, validate_suite, GeneratedSuite};
pub use jsonl::{ingest_jsonl, read_jsonl, write_jsonl, JsonlRecord};
pub use tokenizer::{Tokenizer, Vocab};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One labeled, tokenized text with a domain tag. `tokens[0]` is always the
/// CLS id.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub label: u8,
    pub domain: String,
}

impl Example {
    /// All-ones attention mask (generated examples carry no padding).
    pub fn mask(&self) -> Vec<bool> {
        vec![true; self.tokens.len()]
    }
}

/// Synthetic domain description. Invariant sentiment tokens are shared by
/// every domain; spurious tokens are private to one domain and correlate
/// with the label at strength `spurious_strength` (0.5 = label-independent).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// (token, label it signals) pairs, shared across domains.
    pub invariant_tokens: Vec<(String, u8)>,
    /// (token, label it signals) pairs, private to this domain.
    pub spurious_tokens: Vec<(String, u8)>,
    /// Probability that the planted spurious token agrees with the label.
    pub spurious_strength: f64,
    /// Content-token count range, inclusive, excluding CLS.
    pub length_range: (usize, usize),
    /// Per-filler-slot probability of drawing a noise token instead.
    pub noise_rate: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.spurious_strength) {
            return Err(Error::config(format!(
                "domain {}: spurious_strength {} outside [0.5, 1]",
                self.name, self.spurious_strength
            )));
        }
        if self.length_range.0 < 2 || self.length_range.0 > self.length_range.1 {
            return Err(Error::config(format!(
                "domain {}: bad length_range {:?} (need 2 <= min <= max)",
                self.name, self.length_range
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config(format!(
                "domain {}: noise_rate {} outside [0, 1]",
                self.name, self.noise_rate
            )));
        }
        if self.invariant_tokens.is_empty() || self.spurious_tokens.is_empty() {
            return Err(Error::config(format!(
                "domain {}: token lists must be non-empty",
                self.name
            )));
        }
        for need in [0u8, 1u8] {
            if !self.spurious_tokens.iter().any(|(_, d)| *d == need) {
                return Err(Error::config(format!(
                    "domain {}: no spurious token signalling label {need}",
                    self.name
                )));
            }
            if !self.invariant_tokens.iter().any(|(_, d)| *d == need) {
                return Err(Error::config(format!(
                    "domain {}: no invariant token signalling label {need}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Per-domain split sizes. The diagnostic held-out slice (`ads_heldout`) is
/// carved out before the train/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub ads_heldout: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test + self.ads_heldout
    }

    /// The reference shape scaled down tenfold: 1000/200/300/50 per domain.
    pub fn desk_default() -> Self {
        Self {
            train: 1000,
            validation: 200,
            test: 300,
            ads_heldout: 50,
        }
    }
}

/// One domain's examples partitioned into disjoint splits.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub ads_heldout: Vec<Example>,
}

impl SplitBundle {
    pub fn splits(&self) -> [(&'static str, &[Example]); 4] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
            ("ads", &self.ads_heldout),
        ]
    }
}

/// Carve out the diagnostic slice first, then shuffle-and-partition the
/// rest, stratified by label so every split is balanced to within one
/// example. Split membership is disjoint by example id.
pub fn make_splits(examples: &[Example], spec: &SplitSpec, seed: u64) -> Result<SplitBundle> {
    if examples.len() < spec.total() {
        return Err(Error::invalid(format!(
            "{} examples cannot fill splits totalling {}",
            examples.len(),
            spec.total()
        )));
    }
    let mut rng = rng::stream(seed, "splits");
    let mut pos: Vec<&Example> = examples.iter().filter(|e| e.label == 1).collect();
    let mut neg: Vec<&Example> = examples.iter().filter(|e| e.label == 0).collect();
    shuffle(&mut pos, &mut rng);
    shuffle(&mut neg, &mut rng);

    // Odd split sizes alternate which class supplies the extra example so a
    // run of odd splits cannot drain one class.
    let mut extra_from_pos = true;
    let mut take = |count: usize| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(count);
        let half = count / 2;
        let mut pos_take = half;
        let mut neg_take = half;
        if count % 2 == 1 {
            if extra_from_pos {
                pos_take += 1;
            } else {
                neg_take += 1;
            }
            extra_from_pos = !extra_from_pos;
        }
        for _ in 0..pos_take {
            out.push(
                pos.pop()
                    .ok_or_else(|| Error::invalid("ran out of positive examples"))?
                    .clone(),
            );
        }
        for _ in 0..neg_take {
            out.push(
                neg.pop()
                    .ok_or_else(|| Error::invalid("ran out of negative examples"))?
                    .clone(),
            );
        }
        Ok(out)
    };

    // Diagnostic slice first, then the ordinary partition.
    let ads_heldout = take(spec.ads_heldout)?;
    let train = take(spec.train)?;
    let validation = take(spec.validation)?;
    let test = take(spec.test)?;

    let bundle = SplitBundle {
        train,
        validation,
        test,
        ads_heldout,
    };
    check_disjoint(&bundle)?;
    Ok(bundle)
}

fn check_disjoint(bundle: &SplitBundle) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (name, split) in bundle.splits() {
        for e in split {
            if !seen.insert(e.id.clone()) {
                return Err(Error::invalid(format!(
                    "example id {} appears in more than one split (second: {name})",
                    e.id
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
