//! Synthetic token streams standing in for a text corpus.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::forward::Batch;
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Order-2 Markov chain over the vocabulary.
    #[default]
    MarkovChars,
    /// `[offset, block, block + offset mod vocab]` segments.
    ModularCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: CorpusKind,
    /// Seed of the sampled stream.
    pub seed: u64,
    /// Seed of the chain's transition table; fixed across runs.
    pub chain_seed: u64,
    pub length: usize,
    pub vocab: usize,
    /// Peakedness of the transition rows (log-weight standard deviation).
    pub temperature: f64,
    /// ModularCopy block length.
    pub copy_block: usize,
    pub batch_size: usize,
    /// Number of held-out windows used for the evaluation loss.
    pub eval_windows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::MarkovChars,
            seed: 0,
            chain_seed: 0,
            length: 1_000_000,
            vocab: 64,
            temperature: 2.0,
            copy_block: 8,
            batch_size: 16,
            eval_windows: 64,
        }
    }
}

/// Order-2 chain: the next token depends on the previous two.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    vocab: usize,
    /// Row `a·vocab + b` holds `P(next | a, b)`.
    probs: Vec<f64>,
}

impl MarkovChain {
    pub fn new(vocab: usize, temperature: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(vocab * vocab * vocab);
        for _ in 0..vocab * vocab {
            let w: Vec<f64> = (0..vocab)
                .map(|_| (temperature * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let z: f64 = w.iter().sum();
            probs.extend(w.iter().map(|x| x / z));
        }
        Self { vocab, probs }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        let i = (a * self.vocab + b) * self.vocab;
        &self.probs[i..i + self.vocab]
    }

    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let v = self.vocab;
        let tables: Vec<WeightedIndex<f64>> = (0..v * v)
            .map(|s| WeightedIndex::new(self.row(s / v, s % v)).expect("positive weights"))
            .collect();
        let mut out = Vec::with_capacity(len);
        let (mut a, mut b) = (rng.random_range(0..v), rng.random_range(0..v));
        for _ in 0..len {
            let c = tables[a * v + b].sample(rng);
            out.push(c as u32);
            (a, b) = (b, c);
        }
        out
    }
}

fn modular_copy(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let v = cfg.vocab as u32;
    let m = cfg.copy_block;
    let mut out = Vec::with_capacity(cfg.length + 2 * m + 1);
    while out.len() < cfg.length {
        let offset = rng.random_range(0..v);
        let block: Vec<u32> = (0..m).map(|_| rng.random_range(0..v)).collect();
        out.push(offset);
        out.extend(&block);
        out.extend(block.iter().map(|x| (x + offset) % v));
    }
    out.truncate(cfg.length);
    out
}

/// Deterministic token stream of `cfg.length` tokens.
pub fn gen_corpus(cfg: &DataConfig) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.kind {
        CorpusKind::MarkovChars => {
            MarkovChain::new(cfg.vocab, cfg.temperature, cfg.chain_seed).sample(cfg.length, &mut rng)
        }
        CorpusKind::ModularCopy => modular_copy(cfg, &mut rng),
    }
}

/// Draws random training windows from a stream and holds out a fixed evaluation set.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    train: Vec<u32>,
    eval: Vec<Vec<u32>>,
    window: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// Windows hold `context + 1` tokens. The stream's tail supplies the evaluation set.
    pub fn new(cfg: &DataConfig, context: usize) -> Result<Self, TrainError> {
        let window = context + 1;
        let eval_len = cfg.eval_windows * window;
        if cfg.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if cfg.length < eval_len + window {
            return Err(TrainError::InvalidConfig(format!(
                "corpus length {} too short for {} evaluation windows of {window}",
                cfg.length, cfg.eval_windows
            )));
        }
        let mut stream = gen_corpus(cfg);
        let eval = stream.split_off(stream.len() - eval_len).chunks(window).map(<[u32]>::to_vec).collect();
        Ok(Self {
            train: stream,
            eval,
            window,
            batch_size: cfg.batch_size,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let hi = self.train.len() - self.window;
        let rows: Vec<Vec<u32>> = (0..self.batch_size)
            .map(|_| {
                let s = self.rng.random_range(0..=hi);
                self.train[s..s + self.window].to_vec()
            })
            .collect();
        Batch::new(&rows).expect("equal windows")
    }

    /// Held-out batches of at most `batch_size` windows.
    pub fn eval_batches(&self) -> Vec<Batch> {
        self.eval
            .chunks(self.batch_size)
            .map(|c| Batch::new(c).expect("equal windows"))
            .collect()
    }
}
