//! Synthetic domain-shift suite with planted spurious tokens.
//!
//! Four domains mirror the styles of the usual sentiment corpora:
//! long/structured, mid-length, focused-topic, and short/noisy. Invariant
//! sentiment tokens are shared everywhere; each domain additionally plants
//! its own private spurious tokens whose direction agrees with the label
//! with probability `spurious_strength`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_splits, DomainSpec, Example, SplitBundle, SplitSpec, Tokenizer, Vocab};
use crate::error::{Error, Result};
use crate::rng;

const INVARIANT_POS: [&str; 10] = [
    "good",
    "great",
    "excellent",
    "wonderful",
    "love",
    "amazing",
    "enjoyable",
    "pleasant",
    "fantastic",
    "superb",
];
const INVARIANT_NEG: [&str; 10] = [
    "bad",
    "terrible",
    "awful",
    "horrible",
    "hate",
    "disappointing",
    "poor",
    "unpleasant",
    "dreadful",
    "mediocre",
];

const NOISE_TOKENS: [&str; 16] = [
    "hmm", "heh", "pfft", "grr", "tsk", "brr", "uhh", "ehh", "umm", "aah", "oof", "zzz", "psst",
    "shh", "tut", "bah",
];

const FUNCTION_WORDS: [&str; 40] = [
    "the", "a", "an", "it", "is", "was", "were", "this", "that", "with", "for", "and", "but",
    "or", "so", "very", "quite", "really", "just", "then", "there", "here", "some", "many",
    "few", "more", "most", "also", "again", "still", "even", "much", "such", "both", "each",
    "about", "after", "before", "over", "under",
];

const SYLLABLES: [&str; 24] = [
    "ba", "da", "ka", "la", "ma", "na", "pa", "ra", "sa", "ta", "be", "de", "ke", "le", "me",
    "ne", "pe", "re", "se", "te", "bo", "ko", "lo", "mo",
];

/// A generation recipe: domains, split sizes, vocabulary budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub domains: Vec<DomainSpec>,
    pub split: SplitSpec,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

/// Everything produced for one suite: per-domain split bundles plus the
/// shared tokenizer.
pub struct GeneratedSuite {
    pub spec: SuiteSpec,
    pub tokenizer: Tokenizer,
    pub domains: Vec<(String, SplitBundle)>,
}

impl GeneratedSuite {
    pub fn bundle(&self, domain: &str) -> Option<&SplitBundle> {
        self.domains
            .iter()
            .find(|(name, _)| name == domain)
            .map(|(_, b)| b)
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|(n, _)| n.clone()).collect()
    }
}

fn invariant_lexicon() -> Vec<(String, u8)> {
    INVARIANT_POS
        .iter()
        .map(|t| (t.to_string(), 1u8))
        .chain(INVARIANT_NEG.iter().map(|t| (t.to_string(), 0u8)))
        .collect()
}

fn domain(
    name: &str,
    spurious_pos: [&str; 3],
    spurious_neg: [&str; 3],
    rho: f64,
    length_range: (usize, usize),
    noise_rate: f64,
) -> DomainSpec {
    DomainSpec {
        name: name.to_string(),
        invariant_tokens: invariant_lexicon(),
        spurious_tokens: spurious_pos
            .iter()
            .map(|t| (t.to_string(), 1u8))
            .chain(spurious_neg.iter().map(|t| (t.to_string(), 0u8)))
            .collect(),
        spurious_strength: rho,
        length_range,
        noise_rate,
    }
}

/// The default four-domain suite. `rho` is the spurious-token strength used
/// for every domain (0.9 unless an experiment overrides it).
pub fn default_suite(split: SplitSpec, rho: f64) -> SuiteSpec {
    SuiteSpec {
        domains: vec![
            domain(
                "longform",
                ["montage", "screenplay", "auteur"],
                ["matinee", "subplot", "reel"],
                rho,
                (18, 30),
                0.0,
            ),
            domain(
                "midlength",
                ["bargain", "warranty", "shipping"],
                ["refund", "checkout", "retailer"],
                rho,
                (10, 22),
                0.0,
            ),
            domain(
                "topical",
                ["concierge", "penthouse", "lobby"],
                ["valet", "motel", "housekeeping"],
                rho,
                (8, 18),
                0.05,
            ),
            domain(
                "shortnoisy",
                ["lol", "yay", "omg"],
                ["ugh", "meh", "smh"],
                rho,
                (4, 12),
                0.2,
            ),
        ],
        split,
        vocab_size: 1000,
        max_seq_len: 64,
    }
}

/// Suite-level checks: per-domain validity plus pairwise-disjoint spurious
/// token sets.
pub fn validate_suite(spec: &SuiteSpec) -> Result<()> {
    if spec.domains.is_empty() {
        return Err(Error::config("suite has no domains"));
    }
    for d in &spec.domains {
        d.validate()?;
        if d.length_range.1 + 1 > spec.max_seq_len {
            return Err(Error::config(format!(
                "domain {}: max length {} plus CLS exceeds max_seq_len {}",
                d.name, d.length_range.1, spec.max_seq_len
            )));
        }
    }
    let mut seen: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    for d in &spec.domains {
        for (tok, _) in &d.spurious_tokens {
            if let Some(other) = seen.insert(tok.as_str(), d.name.as_str()) {
                return Err(Error::config(format!(
                    "spurious token {tok:?} appears in both {other} and {}",
                    d.name
                )));
            }
        }
    }
    Ok(())
}

/// Assemble the fixed vocabulary for a suite: invariant lexicon, planted
/// spurious tokens, noise tokens, function words, then syllable filler
/// words up to the vocabulary budget.
pub fn build_vocab(spec: &SuiteSpec) -> Result<Vocab> {
    let budget = spec
        .vocab_size
        .checked_sub(crate::model::NUM_SPECIAL_TOKENS as usize)
        .ok_or_else(|| Error::config("vocab_size smaller than the reserved specials"))?;
    let mut tokens: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |t: String, tokens: &mut Vec<String>| {
        if seen.insert(t.clone()) {
            tokens.push(t);
        }
    };
    for (t, _) in invariant_lexicon() {
        push(t, &mut tokens);
    }
    for d in &spec.domains {
        for (t, _) in &d.spurious_tokens {
            push(t.clone(), &mut tokens);
        }
    }
    for t in NOISE_TOKENS {
        push(t.to_string(), &mut tokens);
    }
    for t in FUNCTION_WORDS {
        push(t.to_string(), &mut tokens);
    }
    'fill: for a in SYLLABLES {
        for b in SYLLABLES {
            for c in SYLLABLES {
                if tokens.len() >= budget {
                    break 'fill;
                }
                push(format!("{a}{b}{c}"), &mut tokens);
            }
        }
    }
    if tokens.len() > budget {
        return Err(Error::config(format!(
            "suite lexicon ({}) exceeds vocabulary budget ({budget})",
            tokens.len()
        )));
    }
    Vocab::new(tokens)
}

/// How many syllable words join the filler pool. The pool is kept small and
/// deliberately includes the invariant sentiment lexicon: random fillers
/// then sprinkle conflicting sentiment words through each text, so the
/// invariant channel is a noisy margin signal rather than a clean lookup,
/// and the planted spurious token stays the most reliable in-domain cue.
const FILLER_SYLLABLE_WORDS: usize = 24;

/// Filler pool: function words, the invariant sentiment lexicon, and a
/// slice of syllable words. Spurious and noise tokens never appear here.
fn filler_pool(vocab: &Vocab, spec: &SuiteSpec) -> Vec<String> {
    let mut excluded: std::collections::HashSet<String> = NOISE_TOKENS
        .iter()
        .map(|t| t.to_string())
        .collect();
    for d in &spec.domains {
        for (t, _) in &d.spurious_tokens {
            excluded.insert(t.clone());
        }
    }
    let allowed: std::collections::HashSet<String> = FUNCTION_WORDS
        .iter()
        .map(|t| t.to_string())
        .chain(invariant_lexicon().into_iter().map(|(t, _)| t))
        .chain(
            SYLLABLES
                .iter()
                .flat_map(|a| SYLLABLES.iter().map(move |b| format!("{a}{b}{a}")))
                .take(FILLER_SYLLABLE_WORDS),
        )
        .collect();
    vocab
        .content_tokens()
        .iter()
        .filter(|t| allowed.contains(t.as_str()) && !excluded.contains(t.as_str()))
        .cloned()
        .collect()
}

/// Generate `n` examples for one domain. Labels are balanced; every example
/// carries at least one invariant token agreeing with its label and exactly
/// one planted spurious token whose direction follows the `spurious_strength`
/// coin. Deterministic per (spec, seed).
pub fn generate_domain(
    spec: &DomainSpec,
    n: usize,
    seed: u64,
    tokenizer: &Tokenizer,
    fillers: &[String],
) -> Result<Vec<Example>> {
    spec.validate()?;
    if fillers.is_empty() {
        return Err(Error::config("empty filler pool"));
    }
    let mut rng = rng::stream(seed, &format!("generate:{}", spec.name));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2 == 1) as u8;
        let words = sample_words(spec, label, &mut rng, fillers);
        let text = words.join(" ");
        let tokens = tokenizer.encode(&text);
        out.push(Example {
            id: format!("{}-{:06}", spec.name, i),
            text,
            tokens,
            label,
            domain: spec.name.clone(),
        });
    }
    Ok(out)
}

fn sample_words(
    spec: &DomainSpec,
    label: u8,
    rng: &mut ChaCha8Rng,
    fillers: &[String],
) -> Vec<String> {
    let len = rng.random_range(spec.length_range.0..=spec.length_range.1);

    // Fillers first, with occasional noise in noisy domains.
    let mut words: Vec<String> = (0..len)
        .map(|_| {
            if spec.noise_rate > 0.0 && rng.random::<f64>() < spec.noise_rate {
                NOISE_TOKENS[rng.random_range(0..NOISE_TOKENS.len())].to_string()
            } else {
                fillers[rng.random_range(0..fillers.len())].clone()
            }
        })
        .collect();

    // One or two invariant tokens agreeing with the label.
    let agreeing: Vec<&String> = spec
        .invariant_tokens
        .iter()
        .filter(|(_, d)| *d == label)
        .map(|(t, _)| t)
        .collect();
    let n_inv = if len >= 3 && rng.random::<f64>() < 0.35 {
        2
    } else {
        1
    };

    // The planted spurious token: agrees with the label with probability
    // rho, otherwise signals the opposite label.
    let spur_dir = if rng.random::<f64>() < spec.spurious_strength {
        label
    } else {
        1 - label
    };
    let spurious: Vec<&String> = spec
        .spurious_tokens
        .iter()
        .filter(|(_, d)| *d == spur_dir)
        .map(|(t, _)| t)
        .collect();

    // Place invariants and the spurious token at distinct random slots;
    // lengths of at least 2 always leave room for one of each.
    let n_inv = n_inv.min(len - 1);
    let mut slots: Vec<usize> = (0..len).collect();
    crate::data::shuffle(&mut slots, rng);
    for &s in slots.iter().take(n_inv) {
        words[s] = agreeing[rng.random_range(0..agreeing.len())].clone();
    }
    words[slots[n_inv]] = spurious[rng.random_range(0..spurious.len())].clone();
    words
}

/// Generate every domain of a suite and partition it. Uses one derived seed
/// per domain for generation and another for splitting.
pub fn generate_suite(spec: &SuiteSpec, seed: u64) -> Result<GeneratedSuite> {
    validate_suite(spec)?;
    let vocab = build_vocab(spec)?;
    let tokenizer = Tokenizer::new(vocab, spec.max_seq_len);
    let fillers = filler_pool(tokenizer.vocab(), spec);
    let mut domains = Vec::new();
    for d in &spec.domains {
        let examples = generate_domain(d, spec.split.total(), seed, &tokenizer, &fillers)?;
        let bundle = make_splits(&examples, &spec.split, seed ^ fnv(&d.name))?;
        domains.push((d.name.clone(), bundle));
    }
    Ok(GeneratedSuite {
        spec: spec.clone(),
        tokenizer,
        domains,
    })
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
