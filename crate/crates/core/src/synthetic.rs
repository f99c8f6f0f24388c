//! Synthetic corpora with a planted, heavily duplicated secret string.
//!
//! Background text is sampled from a fixed order-2 Markov chain, so the
//! model has genuine shared structure to learn and validation perplexity
//! improves over several epochs. One group of samples embeds a shared
//! secret sequence between chain-walk flanks; further groups embed shorter
//! "stock phrases" at decreasing duplication counts, so memorisation
//! arrives in staggered waves the way repeated phrases do in real corpora.
//! Planted strings are drawn uniformly, not from the chain: like PII in
//! domain text they are atypical, so the model can only reproduce them by
//! memorising them. Everything is deterministic per seed.

use crate::corpus::{Corpus, Split, TokenSeq};
use crate::rng::{mix, Rng};

const SECRET_TAG: u64 = 0x5ec7;
const PHRASE_TAG: u64 = 0xf4a5e;
const SAMPLE_TAG: u64 = 0x5a3b;
const VAL_TAG: u64 = 0x7a1;
const PRETRAIN_TAG: u64 = 0x93e;
const CHAIN_TAG: u64 = 0xc4a1;

#[derive(Clone, Debug)]
pub struct SecretCorpusConfig {
    /// Total number of training samples.
    pub samples: usize,
    /// How many of them contain the secret.
    pub secret_samples: usize,
    /// Length of the shared secret in tokens.
    pub secret_len: usize,
    /// Sample count of each stock-phrase group (after the secret samples).
    pub phrase_groups: Vec<usize>,
    /// Length of each stock phrase in tokens.
    pub phrase_len: usize,
    /// Vocabulary size; generated ids lie in 1..vocab (0 is padding).
    pub vocab: u32,
    /// Inclusive range of flank lengths around planted strings.
    pub min_flank: usize,
    pub max_flank: usize,
    /// Probability mass the chain puts on its two preferred successors.
    pub chain_peak: f64,
    pub seed: u64,
}

impl Default for SecretCorpusConfig {
    fn default() -> Self {
        SecretCorpusConfig {
            samples: 200,
            secret_samples: 50,
            secret_len: 40,
            phrase_groups: vec![26, 14, 8],
            phrase_len: 20,
            vocab: 64,
            min_flank: 1,
            max_flank: 3,
            chain_peak: 0.8,
            seed: 0,
        }
    }
}

/// What one sample embeds.
enum Planted<'a> {
    Nothing,
    Tokens(&'a [u32]),
}

impl SecretCorpusConfig {
    fn symbols(&self) -> usize {
        self.vocab as usize - 1
    }

    /// The two preferred successors of symbol `b`. First order keeps the
    /// transition table small enough for the model to genuinely learn it,
    /// so held-out perplexity improves instead of memorising walks.
    fn preferred(&self, b: u32) -> (u32, u32) {
        let s = self.symbols() as u64;
        let p1 = 1 + (mix(&[self.seed, CHAIN_TAG, b as u64, 1]) % s) as u32;
        let p2 = 1 + (mix(&[self.seed, CHAIN_TAG, b as u64, 2]) % s) as u32;
        (p1, p2)
    }

    fn uniform_symbol(&self, rng: &mut Rng) -> u32 {
        1 + rng.below(self.symbols()) as u32
    }

    fn uniform_tokens(&self, rng: &mut Rng, len: usize) -> Vec<u32> {
        (0..len).map(|_| self.uniform_symbol(rng)).collect()
    }

    /// First-order Markov walk: each step takes one of the last symbol's
    /// two preferred successors with probability `chain_peak`, otherwise a
    /// uniform symbol.
    fn walk(&self, rng: &mut Rng, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        if len > 0 {
            out.push(self.uniform_symbol(rng));
        }
        while out.len() < len {
            let (p1, p2) = self.preferred(out[out.len() - 1]);
            let r = rng.next_f64();
            let next = if r < self.chain_peak / 2.0 {
                p1
            } else if r < self.chain_peak {
                p2
            } else {
                self.uniform_symbol(rng)
            };
            out.push(next);
        }
        out
    }

    /// The shared secret sequence for this config's seed.
    pub fn secret(&self) -> TokenSeq {
        let mut rng = Rng::from_seed(mix(&[self.seed, SECRET_TAG]));
        TokenSeq::new(self.uniform_tokens(&mut rng, self.secret_len))
    }

    /// Stock phrase of group `g`: a near-duplicate of a secret window with
    /// every sixth token mutated. Decoding locks onto the more duplicated
    /// secret before a group's own occurrences teach the mutations, which
    /// is what makes partial scores precede verbatim transitions. The
    /// mutation spacing stays below the context window so every mutant
    /// after the first is conditioned on a context that already contains
    /// one, keeping the phrase distinguishable from the secret.
    pub fn phrase(&self, g: usize) -> TokenSeq {
        let mut rng = Rng::from_seed(mix(&[self.seed, PHRASE_TAG, g as u64]));
        let secret = self.secret();
        let tokens = (0..self.phrase_len)
            .map(|i| {
                let base = secret[(g * 5 + i) % secret.len()];
                if i % 6 == 1 {
                    // mutate away from the base token
                    let mut t = self.uniform_symbol(&mut rng);
                    while t == base {
                        t = self.uniform_symbol(&mut rng);
                    }
                    t
                } else {
                    base
                }
            })
            .collect();
        TokenSeq::new(tokens)
    }

    fn flank_len(&self, rng: &mut Rng) -> usize {
        self.min_flank + rng.below(self.max_flank - self.min_flank + 1)
    }

    fn sample(&self, rng: &mut Rng, planted: Planted<'_>) -> TokenSeq {
        let left = self.flank_len(rng);
        let right = self.flank_len(rng);
        let tokens = match planted {
            Planted::Tokens(p) => {
                let mut t = self.walk(rng, left);
                t.extend_from_slice(p);
                t.extend(self.walk(rng, right));
                t
            }
            Planted::Nothing => self.walk(rng, left + self.secret_len + right),
        };
        TokenSeq::new(tokens)
    }

    /// What training sample `i` embeds: 0 = the secret, g >= 1 = phrase
    /// group g - 1, None = plain chain walk.
    fn plant_index(&self, i: usize) -> Option<usize> {
        // 0 = secret, 1.. = phrase group index + 1
        if i < self.secret_samples {
            return Some(0);
        }
        let mut start = self.secret_samples;
        for (g, &count) in self.phrase_groups.iter().enumerate() {
            if i < start + count {
                return Some(g + 1);
            }
            start += count;
        }
        None
    }

    /// Training corpus: the first `secret_samples` samples embed the
    /// secret, the next groups embed their stock phrases, the rest are
    /// chain walks of comparable length.
    pub fn build_train(&self) -> Corpus {
        let secret = self.secret();
        let phrases: Vec<TokenSeq> =
            (0..self.phrase_groups.len()).map(|g| self.phrase(g)).collect();
        let seqs = (0..self.samples)
            .map(|i| {
                let mut rng = Rng::from_seed(mix(&[self.seed, SAMPLE_TAG, i as u64]));
                let planted = match self.plant_index(i) {
                    Some(0) => Planted::Tokens(&secret),
                    Some(g) => Planted::Tokens(&phrases[g - 1]),
                    None => Planted::Nothing,
                };
                self.sample(&mut rng, planted)
            })
            .collect();
        Corpus::from_token_seqs("secret-train", Split::Train, seqs)
    }

    /// Pretraining corpus: `n` plain chain walks, no planted strings. A
    /// model trained on this knows the domain's background statistics but
    /// none of the secrets, which is what the gram penalty's reference
    /// snapshot needs.
    pub fn build_pretrain(&self, n: usize) -> Corpus {
        let seqs = (0..n)
            .map(|i| {
                let mut rng =
                    Rng::from_seed(mix(&[self.seed, SAMPLE_TAG, PRETRAIN_TAG, i as u64]));
                self.sample(&mut rng, Planted::Nothing)
            })
            .collect();
        Corpus::from_token_seqs("chain-pretrain", Split::Train, seqs)
    }

    /// Held-out corpus: `secret_fraction` of `n` samples embed the secret,
    /// `phrase_fraction` embed the first stock phrase (fresh flanks), the
    /// rest are fresh chain walks.
    pub fn build_val(&self, n: usize, secret_fraction: f64, phrase_fraction: f64) -> Corpus {
        let secret = self.secret();
        let phrase = self.phrase(0);
        let with_secret = (n as f64 * secret_fraction).round() as usize;
        let with_phrase = (n as f64 * phrase_fraction).round() as usize;
        let seqs = (0..n)
            .map(|i| {
                let mut rng = Rng::from_seed(mix(&[self.seed, SAMPLE_TAG, VAL_TAG, i as u64]));
                let planted = if i < with_secret {
                    Planted::Tokens(&secret)
                } else if i < with_secret + with_phrase {
                    Planted::Tokens(&phrase)
                } else {
                    Planted::Nothing
                };
                self.sample(&mut rng, planted)
            })
            .collect();
        Corpus::from_token_seqs("secret-val", Split::Validation, seqs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::contains_subsequence;

    #[test]
    fn train_corpus_embeds_planted_strings_by_group() {
        let cfg = SecretCorpusConfig {
            samples: 40,
            secret_samples: 8,
            phrase_groups: vec![6, 4],
            ..Default::default()
        };
        let corpus = cfg.build_train();
        let secret = cfg.secret();
        let p0 = cfg.phrase(0);
        let p1 = cfg.phrase(1);
        assert_eq!(corpus.len(), 40);
        for (i, sample) in corpus.samples.iter().enumerate() {
            assert_eq!(contains_subsequence(sample, &secret), i < 8, "secret in sample {i}");
            assert_eq!(contains_subsequence(sample, &p0), (8..14).contains(&i), "p0 in {i}");
            assert_eq!(contains_subsequence(sample, &p1), (14..18).contains(&i), "p1 in {i}");
            assert!(sample.iter().all(|&t| t >= 1 && t < cfg.vocab));
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SecretCorpusConfig { seed: 9, ..Default::default() };
        assert_eq!(cfg.build_train().samples, cfg.build_train().samples);
        assert_eq!(cfg.build_val(40, 0.3, 0.2).samples, cfg.build_val(40, 0.3, 0.2).samples);
        let other = SecretCorpusConfig { seed: 10, ..Default::default() };
        assert_ne!(cfg.build_train().samples, other.build_train().samples);
    }

    #[test]
    fn chain_walks_prefer_their_successors() {
        let cfg = SecretCorpusConfig::default();
        let mut rng = Rng::from_seed(3);
        let walk = cfg.walk(&mut rng, 5000);
        let mut preferred_hits = 0usize;
        for w in walk.windows(2) {
            let (p1, p2) = cfg.preferred(w[0]);
            if w[1] == p1 || w[1] == p2 {
                preferred_hits += 1;
            }
        }
        let rate = preferred_hits as f64 / (walk.len() - 1) as f64;
        assert!(rate > 0.75 && rate < 0.9, "preferred-successor rate {rate}");
    }
}
