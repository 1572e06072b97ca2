//! Token sources: the embedded character corpus and a synthetic teacher.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_seed, forward_model, CacheMode, ModelConfig, ModelWeights};

/// Public-domain Latin prose bundled with the crate.
pub const EMBEDDED_CORPUS: &str = include_str!("../../data/corpus.txt");

/// Characters with their own token; everything else maps to token 0.
pub const ALPHABET: &str = "\n !\"'()*,-.0123456789:;?abcdefghijklmnopqrstuvwxyz";

pub fn char_vocab_size() -> usize {
    ALPHABET.chars().count() + 1
}

/// Case-folds and maps characters to token ids.
pub fn encode(text: &str) -> Vec<usize> {
    text.chars()
        .flat_map(char::to_lowercase)
        .map(|c| ALPHABET.chars().position(|a| a == c).map_or(0, |i| i + 1))
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| if t == 0 { '~' } else { ALPHABET.chars().nth(t - 1).unwrap_or('~') })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Character-level text; the embedded corpus unless `path` is given.
    Corpus {
        #[serde(default)]
        path: Option<String>,
        /// Deal the text to ranks in blocks of this many characters, round
        /// robin. Without it each rank gets one contiguous slice.
        #[serde(default)]
        block: Option<usize>,
    },
    /// Sequences sampled from a frozen random one-layer model.
    SyntheticTeacher {
        tokens_per_rank: usize,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

fn default_temperature() -> f64 {
    0.05
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Corpus { path: None, block: None }
    }
}

/// One contiguous token shard per DP rank.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedDataset {
    shards: Vec<Vec<usize>>,
    seq_len: usize,
    seed: u64,
}

/// Inputs and next-token targets for one rank, `sequences × seq_len` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl ShardedDataset {
    pub fn load(cfg: &DatasetConfig, model: &ModelConfig, ranks: usize, seed: u64) -> Result<Self> {
        let shards = match cfg {
            DatasetConfig::Corpus { path, block } => {
                if model.vocab < char_vocab_size() {
                    return Err(Error::Config(format!(
                        "character corpus needs vocab >= {}, got {}",
                        char_vocab_size(),
                        model.vocab
                    )));
                }
                let text = match path {
                    Some(p) => std::fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read corpus {p}: {e}")))?,
                    None => EMBEDDED_CORPUS.to_string(),
                };
                let tokens = encode(&text);
                let per = tokens.len() / ranks;
                if per < model.seq_len + 1 {
                    return Err(Error::Config(format!(
                        "corpus of {} tokens is too small for {ranks} shards of sequences of {}",
                        tokens.len(),
                        model.seq_len
                    )));
                }
                match block {
                    None => tokens.chunks_exact(per).take(ranks).map(<[usize]>::to_vec).collect(),
                    Some(0) => return Err(Error::Config("corpus block must be at least 1".into())),
                    Some(k) => {
                        let mut shards = vec![Vec::with_capacity(per); ranks];
                        for (i, chunk) in tokens.chunks(*k).enumerate() {
                            shards[i % ranks].extend_from_slice(chunk);
                        }
                        shards
                    }
                }
            }
            DatasetConfig::SyntheticTeacher {
                tokens_per_rank,
                temperature,
            } => {
                if *tokens_per_rank < model.seq_len + 1 || *temperature <= 0.0 {
                    return Err(Error::Config("synthetic teacher needs a longer shard and temperature > 0".into()));
                }
                let teacher = Teacher::new(model, derive_seed(seed, 0x7eac), *temperature)?;
                (0..ranks)
                    .map(|r| teacher.sample(*tokens_per_rank, derive_seed(seed, 0x5a3d_0000 + r as u64)))
                    .collect::<Result<_>>()?
            }
        };
        Ok(ShardedDataset {
            shards,
            seq_len: model.seq_len,
            seed,
        })
    }

    pub fn ranks(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, rank: usize) -> &[usize] {
        &self.shards[rank]
    }

    /// Training batch for `rank` at `iteration`: windows at start offsets
    /// drawn from a stream keyed by seed, iteration and rank.
    pub fn batch(&self, rank: usize, iteration: u64, sequences: usize) -> Batch {
        let shard = &self.shards[rank];
        let stream = derive_seed(derive_seed(self.seed, iteration), rank as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let starts: Vec<usize> = (0..sequences)
            .map(|_| rng.gen_range(0..shard.len() - self.seq_len))
            .collect();
        self.windows(rank, &starts)
    }

    /// Fixed evaluation batch spread evenly over the shard.
    pub fn eval_batch(&self, rank: usize, sequences: usize) -> Batch {
        let span = self.shards[rank].len() - self.seq_len;
        let starts: Vec<usize> = (0..sequences).map(|i| i * span / sequences.max(1)).collect();
        self.windows(rank, &starts)
    }

    fn windows(&self, rank: usize, starts: &[usize]) -> Batch {
        let shard = &self.shards[rank];
        let mut inputs = Vec::with_capacity(starts.len() * self.seq_len);
        let mut targets = Vec::with_capacity(starts.len() * self.seq_len);
        for &s in starts {
            inputs.extend_from_slice(&shard[s..s + self.seq_len]);
            targets.extend_from_slice(&shard[s + 1..s + self.seq_len + 1]);
        }
        Batch { inputs, targets }
    }
}

/// Frozen one-layer model with sharpened output weights, sampled
/// autoregressively one window at a time.
struct Teacher {
    cfg: ModelConfig,
    weights: ModelWeights,
    temperature: f64,
}

impl Teacher {
    fn new(model: &ModelConfig, seed: u64, temperature: f64) -> Result<Self> {
        let cfg = ModelConfig {
            layers: 1,
            ..model.clone()
        };
        let weights = ModelWeights::init(&cfg, seed)?;
        Ok(Teacher {
            cfg,
            weights,
            temperature,
        })
    }

    fn sample(&self, len: usize, seed: u64) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.cfg.seq_len;
        let mut out = vec![rng.gen_range(0..self.cfg.vocab)];
        let mut window = vec![0usize; s];
        while out.len() < len {
            // Condition on the last (at most seq_len) tokens, padded at the end.
            let ctx = &out[out.len().saturating_sub(s)..];
            window[..ctx.len()].copy_from_slice(ctx);
            window[ctx.len()..].fill(0);
            let (logits, _) = forward_model(&self.weights, &self.cfg, &window, &[CacheMode::FfnInputOnly])?;
            let row = logits.row(ctx.len() - 1);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|&z| ((z - max) / self.temperature).exp()).collect();
            let dist = WeightedIndex::new(&w).map_err(|e| Error::NonFinite {
                what: format!("teacher distribution: {e}"),
            })?;
            out.push(dist.sample(&mut rng));
        }
        Ok(out)
    }
}
