//! Vocabulary construction and word-embedding tables.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Token table with reserved padding and unknown entries. Non-reserved
/// tokens are stored in sorted order so rebuilding from the same corpus
/// assigns identical indices.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Build from a corpus of token sequences. Distinct tokens are
    /// inserted lexicographically after the reserved entries.
    pub fn build(corpus: impl IntoIterator<Item = impl IntoIterator<Item = impl AsRef<str>>>) -> Self {
        let mut distinct: Vec<String> = corpus
            .into_iter()
            .flat_map(|seq| seq.into_iter().map(|t| t.as_ref().to_lowercase()))
            .collect();
        distinct.sort();
        distinct.dedup();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(distinct.into_iter().filter(|t| t != PAD_TOKEN && t != UNK_TOKEN));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a token; unknown tokens map to the unk entry.
    pub fn lookup(&self, token: &str) -> usize {
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK_INDEX)
    }

    /// Index of a token that must exist (answer labels).
    pub fn require(&self, token: &str) -> Result<usize> {
        self.index
            .get(&token.to_lowercase())
            .copied()
            .ok_or_else(|| Error::Data(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    /// Persist as a JSON array of tokens.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::from(self.tokens.clone())
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let arr = value
            .as_array()
            .ok_or_else(|| Error::Data("vocabulary JSON must be an array".into()))?;
        let mut tokens = Vec::with_capacity(arr.len());
        for v in arr {
            tokens.push(
                v.as_str()
                    .ok_or_else(|| Error::Data("vocabulary entries must be strings".into()))?
                    .to_string(),
            );
        }
        if tokens.len() < 2 || tokens[PAD_INDEX] != PAD_TOKEN || tokens[UNK_INDEX] != UNK_TOKEN {
            return Err(Error::Data("vocabulary missing reserved entries".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { index, tokens })
    }
}

/// An embedding matrix `[|V|, width]` plus its freeze flag. The tensor is
/// registered into the parameter store by the model builder; `trainable`
/// decides whether it is.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub width: usize,
    pub trainable: bool,
}

/// Build an embedding table: tokens found in the GloVe-style text file
/// take the file vectors, everything else is seeded random. The padding
/// row is zero.
pub fn load_or_init_embeddings(
    vocab: &Vocabulary,
    width: usize,
    source: Option<&Path>,
    seed: u64,
) -> Result<EmbeddingTable> {
    if width == 0 {
        return Err(Error::Config("embedding width must be >= 1".into()));
    }
    let file_vectors = match source {
        Some(path) => parse_text_vectors(path, width)?,
        None => HashMap::new(),
    };
    let mut matrix = Tensor::zeros(&[vocab.len(), width]);
    for (i, token) in vocab.tokens().iter().enumerate() {
        if i == PAD_INDEX {
            continue; // padding row stays zero
        }
        let row = matrix.row_mut(i);
        if let Some(v) = file_vectors.get(token) {
            row.copy_from_slice(v);
        } else {
            let mut rng = token_rng(seed, token);
            let scale = 1.0 / (width as f64).sqrt();
            for x in row.iter_mut() {
                *x = ((rng.random::<f64>() * 2.0 - 1.0) * scale) as Scalar;
            }
        }
    }
    Ok(EmbeddingTable {
        matrix,
        width,
        trainable: true,
    })
}

/// Parse a whitespace-separated "token v1 v2 ... v_width" file.
fn parse_text_vectors(path: &Path, width: usize) -> Result<HashMap<String, Vec<Scalar>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: "empty row".into(),
            })?
            .to_lowercase();
        let values: Vec<Scalar> = parts
            .map(|p| {
                p.parse::<f64>().map(|v| v as Scalar).map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad float {p:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != width {
            return Err(Error::dimension(
                "load_or_init_embeddings",
                format!(
                    "line {}: expected {} values, got {}",
                    lineno + 1,
                    width,
                    values.len()
                ),
            ));
        }
        out.insert(token, values);
    }
    Ok(out)
}

fn token_rng(seed: u64, token: &str) -> ChaCha20Rng {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"embed");
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn build_enumerates_sorted_after_reserved() {
        let vocab = Vocabulary::build(vec![vec!["a", "b"], vec!["b", "c"]]);
        assert_eq!(vocab.tokens(), &["<pad>", "<unk>", "a", "b", "c"]);
        assert_eq!(vocab.lookup("a"), 2);
        assert_eq!(vocab.lookup("zzz"), UNK_INDEX);
    }

    #[test]
    fn empty_corpus_has_reserved_only() {
        let vocab = Vocabulary::build(Vec::<Vec<&str>>::new());
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.token(PAD_INDEX), PAD_TOKEN);
        assert_eq!(vocab.token(UNK_INDEX), UNK_TOKEN);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let corpus = vec![vec!["dog", "ball"], vec!["cat"]];
        let a = Vocabulary::build(corpus.clone());
        let b = Vocabulary::build(corpus);
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn vocab_json_round_trip() {
        let vocab = Vocabulary::build(vec![vec!["x", "y"]]);
        let json = vocab.to_json();
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(vocab.tokens(), back.tokens());
    }

    #[test]
    fn embeddings_seeded_reproducible_and_pad_zero() {
        let vocab = Vocabulary::build(vec![vec!["dog", "cat"]]);
        let a = load_or_init_embeddings(&vocab, 8, None, 3).unwrap();
        let b = load_or_init_embeddings(&vocab, 8, None, 3).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert!(a.matrix.row(PAD_INDEX).iter().all(|&v| v == 0.0));
        assert!(a.matrix.row(vocab.lookup("dog")).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn file_vectors_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        writeln!(File::create(&path).unwrap(), "dog 1.0 0.0").unwrap();
        let vocab = Vocabulary::build(vec![vec!["dog", "cat"]]);
        let table = load_or_init_embeddings(&vocab, 2, Some(&path), 3).unwrap();
        assert_eq!(table.matrix.row(vocab.lookup("dog")), &[1.0, 0.0]);
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "dog 1.0 0.0").unwrap();
        writeln!(f, "cat 1.0 oops").unwrap();
        let vocab = Vocabulary::build(vec![vec!["dog", "cat"]]);
        let err = load_or_init_embeddings(&vocab, 2, Some(&path), 3).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        writeln!(File::create(&path).unwrap(), "dog 1.0 0.0 3.0").unwrap();
        let vocab = Vocabulary::build(vec![vec!["dog"]]);
        let err = load_or_init_embeddings(&vocab, 2, Some(&path), 3).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
