//! Byte-level tokens, corpora and batch sampling.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Byte values plus one padding id.
pub const BYTE_VOCAB: usize = 257;
pub const PAD_ID: usize = 256;

pub fn byte_tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn byte_decode(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter().map(|&id| u8::try_from(id).map_err(|_| Error::Vocabulary { id, vocab: 256 })).collect()
}

/// Raw bytes with a contiguous validation block held out at a seeded offset.
/// Training windows never cross into the validation block.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    valid: Range<usize>,
}

impl Corpus {
    /// Holds out `valid_fraction` of `bytes` (at least one byte when the
    /// fraction is positive) starting at an offset drawn from `seed`.
    pub fn new(bytes: Vec<u8>, valid_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::Config(format!("validation fraction {valid_fraction} outside [0, 1)")));
        }
        let len = bytes.len();
        let mut n_valid = (len as f64 * valid_fraction).round() as usize;
        if valid_fraction > 0.0 {
            n_valid = n_valid.max(1);
        }
        let start = if n_valid == 0 { 0 } else { Rng::new(seed).below(len - n_valid + 1) };
        Ok(Corpus { bytes, valid: start..start + n_valid })
    }

    pub fn from_file(path: &Path, valid_fraction: f64, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() {
            return Err(Error::Data(format!("{} is empty", path.display())));
        }
        Self::new(bytes, valid_fraction, seed)
    }

    /// Deterministic English-like text of exactly `len` bytes.
    pub fn synthetic_text(seed: u64, len: usize) -> Vec<u8> {
        const SUBJECTS: [&str; 12] = [
            "the cat",
            "a dog",
            "the old man",
            "my sister",
            "the farmer",
            "a small bird",
            "the teacher",
            "our neighbour",
            "the river",
            "a young girl",
            "the king",
            "every child",
        ];
        const VERBS: [&str; 12] = [
            "sees",
            "likes",
            "carries",
            "finds",
            "watches",
            "follows",
            "remembers",
            "builds",
            "paints",
            "opens",
            "hears",
            "keeps",
        ];
        const OBJECTS: [&str; 12] = [
            "the red house",
            "a long road",
            "the quiet garden",
            "an apple",
            "the blue door",
            "a heavy stone",
            "the morning light",
            "a wooden boat",
            "the open window",
            "a letter",
            "the green hill",
            "some bread",
        ];
        const TAILS: [&str; 8] = [
            "",
            " in the evening",
            " near the water",
            " after the rain",
            " with great care",
            " every day",
            " again",
            " before dinner",
        ];
        let mut rng = Rng::new(seed);
        let mut out = Vec::with_capacity(len + 128);
        let mut in_paragraph = 0;
        while out.len() < len {
            let mut sentence = format!(
                "{} {} {}{}",
                SUBJECTS[rng.below(SUBJECTS.len())],
                VERBS[rng.below(VERBS.len())],
                OBJECTS[rng.below(OBJECTS.len())],
                TAILS[rng.below(TAILS.len())]
            );
            if let Some(first) = sentence.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            sentence.push(if rng.below(6) == 0 { '?' } else { '.' });
            out.extend_from_slice(sentence.as_bytes());
            in_paragraph += 1;
            if in_paragraph >= 3 + rng.below(4) {
                out.push(b'\n');
                in_paragraph = 0;
            } else {
                out.push(b' ');
            }
        }
        out.truncate(len);
        out
    }

    pub fn synthetic(seed: u64, len: usize, valid_fraction: f64) -> Result<Self> {
        Self::new(Self::synthetic_text(seed, len), valid_fraction, seed)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn validation(&self) -> &[u8] {
        &self.bytes[self.valid.clone()]
    }

    pub fn validation_range(&self) -> Range<usize> {
        self.valid.clone()
    }

    /// Training bytes as the (up to two) runs around the validation block.
    pub fn train_segments(&self) -> Vec<&[u8]> {
        [&self.bytes[..self.valid.start], &self.bytes[self.valid.end..]].into_iter().filter(|s| !s.is_empty()).collect()
    }
}

/// Input and target rows for one batch; `targets[i][t]` is the byte after `inputs[i][t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// `batch_size` windows of `seq_len + 1` bytes drawn uniformly from the
/// training segments.
pub fn batch_sample(corpus: &Corpus, rng: &mut Rng, batch_size: usize, seq_len: usize) -> Result<Batch> {
    sample_from(&corpus.train_segments(), rng, batch_size, seq_len)
}

pub fn sample_from(segments: &[&[u8]], rng: &mut Rng, batch_size: usize, seq_len: usize) -> Result<Batch> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Config("batch size and sequence length must be positive".into()));
    }
    let starts: Vec<usize> = segments.iter().map(|s| (s.len()).saturating_sub(seq_len)).collect();
    let total: usize = starts.iter().sum();
    if total == 0 {
        let longest = segments.iter().map(|s| s.len()).max().unwrap_or(0);
        return Err(Error::Data(format!(
            "corpus too small: longest training run is {longest} bytes, need more than {seq_len}"
        )));
    }
    let mut batch = Batch { inputs: Vec::with_capacity(batch_size), targets: Vec::with_capacity(batch_size) };
    for _ in 0..batch_size {
        let mut pick = rng.below(total);
        let mut seg = 0;
        while pick >= starts[seg] {
            pick -= starts[seg];
            seg += 1;
        }
        let window = &segments[seg][pick..pick + seq_len + 1];
        batch.inputs.push(byte_tokenize(&window[..seq_len]));
        batch.targets.push(byte_tokenize(&window[1..]));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        assert_eq!(byte_tokenize(b"ab"), vec![97, 98]);
        assert!(byte_tokenize(b"").is_empty());
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(byte_decode(&byte_tokenize(&all)).unwrap(), all);
        assert!(matches!(byte_decode(&[PAD_ID]), Err(Error::Vocabulary { id: 256, .. })));
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let text = Corpus::synthetic_text(1, 10_000);
        let a = Corpus::new(text.clone(), 0.1, 5).unwrap();
        let b = Corpus::new(text.clone(), 0.1, 5).unwrap();
        assert_eq!(a.validation_range(), b.validation_range());
        assert_eq!(a.validation().len(), 1000);
        let train: usize = a.train_segments().iter().map(|s| s.len()).sum();
        assert_eq!(train + a.validation().len(), 10_000);
        assert!(Corpus::new(text, 1.0, 5).is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = Corpus::synthetic_text(3, 5000);
        assert_eq!(a, Corpus::synthetic_text(3, 5000));
        assert_ne!(a, Corpus::synthetic_text(4, 5000));
        assert_eq!(a.len(), 5000);
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn targets_are_shifted_inputs() {
        // Random bytes, so every 16-byte window occurs once.
        let mut rng = Rng::new(2);
        let text: Vec<u8> = (0..4096).map(|_| rng.below(256) as u8).collect();
        let corpus = Corpus::new(text, 0.1, 2).unwrap();
        let batch = batch_sample(&corpus, &mut Rng::new(9), 4, 16).unwrap();
        let bytes = corpus.bytes();
        let v = corpus.validation_range();
        for (x, y) in batch.inputs.iter().zip(&batch.targets) {
            assert_eq!(&x[1..], &y[..15]);
            let ids: Vec<u8> = byte_decode(x).unwrap();
            let at = bytes.windows(16).position(|w| w == ids.as_slice()).unwrap();
            assert_eq!(y[15], bytes[at + 16] as usize);
            assert!(at + 16 < v.start || at >= v.end);
        }
        assert_eq!(batch, batch_sample(&corpus, &mut Rng::new(9), 4, 16).unwrap());
        assert!(batch.inputs.iter().flatten().all(|&id| id < 256));
    }

    #[test]
    fn tiny_corpus_is_a_data_error() {
        let corpus = Corpus::new(b"short".to_vec(), 0.0, 0).unwrap();
        assert!(matches!(batch_sample(&corpus, &mut Rng::new(1), 1, 5), Err(Error::Data(_))));
        assert!(batch_sample(&corpus, &mut Rng::new(1), 1, 4).is_ok());
    }
}
