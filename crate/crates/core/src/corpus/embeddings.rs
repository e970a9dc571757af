use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;

use super::vocab::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::math::{xavier_fill, DenseMatrix, Rng};
use crate::scalar::Scalar;

/// Vocabulary plus one `dim`-sized row per word.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    vocab: Vocabulary,
    matrix: DenseMatrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(vocab: Vocabulary, matrix: DenseMatrix<T>) -> Result<Self> {
        if matrix.rows() != vocab.len() {
            return Err(Error::dims("EmbeddingTable::new", vocab.len(), matrix.rows()));
        }
        if matrix.cols() == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingTable { vocab, matrix })
    }

    /// Every row drawn Xavier-uniform over a `1×dim` fan; the `<pad>` row is zero.
    pub fn random(vocab: Vocabulary, dim: usize, rng: &mut Rng) -> Self {
        let mut matrix = DenseMatrix::zeros(vocab.len(), dim);
        let bound = row_bound(dim);
        for r in 0..vocab.len() {
            if r as u32 != PAD {
                xavier_fill(matrix.row_mut(r), bound, rng);
            }
        }
        EmbeddingTable { vocab, matrix }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &DenseMatrix<T> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix<T> {
        &mut self.matrix
    }

    pub fn row(&self, id: u32) -> &[T] {
        self.matrix.row(id as usize)
    }

    pub fn into_parts(self) -> (Vocabulary, DenseMatrix<T>) {
        (self.vocab, self.matrix)
    }
}

fn row_bound(dim: usize) -> f64 {
    (6.0 / (1 + dim) as f64).sqrt()
}

/// Outcome of a word2vec text load.
#[derive(Debug)]
pub struct LoadReport {
    /// Vocabulary words whose vector came from the file.
    pub found: usize,
    /// Vocabulary words that were randomly initialized.
    pub missing: usize,
    pub warnings: Vec<String>,
}

/// Loads word2vec text-format vectors for the words of `vocab`.
///
/// The header line is `count dim`; each following line is a word followed by
/// `dim` numbers. File words outside `vocab` are skipped; vocabulary words
/// absent from the file get a random row. A word repeated in the file keeps
/// its last vector and produces a warning.
pub fn load_word2vec_text<T: Scalar>(
    path: &Path,
    vocab: Vocabulary,
    dim: usize,
    rng: &mut Rng,
) -> Result<(EmbeddingTable<T>, LoadReport)> {
    let reader = BufReader::new(File::open(path)?);
    read_word2vec_text(reader, path, vocab, dim, rng)
}

pub fn read_word2vec_text<T: Scalar, R: BufRead>(
    reader: R,
    path: &Path,
    vocab: Vocabulary,
    dim: usize,
    rng: &mut Rng,
) -> Result<(EmbeddingTable<T>, LoadReport)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let mut fields = header.split_whitespace();
    let (count, file_dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(c), Some(d), None) => (
            c.parse::<usize>()
                .map_err(|_| Error::parse(path, 1, format!("bad word count {c:?}")))?,
            d.parse::<usize>()
                .map_err(|_| Error::parse(path, 1, format!("bad dimension {d:?}")))?,
        ),
        _ => return Err(Error::parse(path, 1, "header must be \"count dim\"")),
    };
    if file_dim != dim {
        return Err(Error::parse(
            path,
            1,
            format!("file dimension {file_dim} does not match configured {dim}"),
        ));
    }

    let mut vectors: HashMap<u32, Vec<T>> = HashMap::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-empty line has a first field");
        let values: Vec<T> = parts
            .map(|x| {
                x.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::of)
                    .ok_or_else(|| Error::parse(path, lineno, format!("bad number {x:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if let Some(prev) = first_line.insert(word.to_string(), lineno) {
            let msg = format!("{}:{lineno}: duplicate word {word:?} (first at line {prev}); last occurrence wins", path.display());
            warn!("{msg}");
            warnings.push(msg);
        }
        if let Some(id) = vocab.id(word) {
            if id != PAD {
                vectors.insert(id, values);
            }
        }
    }
    if rows != count {
        let msg = format!("{}: header declares {count} words, file has {rows}", path.display());
        warn!("{msg}");
        warnings.push(msg);
    }

    let mut matrix = DenseMatrix::zeros(vocab.len(), dim);
    let bound = row_bound(dim);
    let mut found = 0;
    let mut missing = 0;
    for id in 0..vocab.len() as u32 {
        if id == PAD {
            continue;
        }
        match vectors.get(&id) {
            Some(v) => {
                matrix.row_mut(id as usize).copy_from_slice(v);
                found += 1;
            }
            None => {
                xavier_fill(matrix.row_mut(id as usize), bound, rng);
                missing += 1;
            }
        }
    }
    let table = EmbeddingTable::new(vocab, matrix)?;
    Ok((table, LoadReport { found, missing, warnings }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build_from_lines(["cat dog cat"], 10).unwrap()
    }

    fn load(text: &str, dim: usize) -> Result<(EmbeddingTable<f64>, LoadReport)> {
        read_word2vec_text(text.as_bytes(), Path::new("emb.txt"), vocab(), dim, &mut Rng::new(1))
    }

    #[test]
    fn accepts_matching_dimension() {
        let mut text = String::from("2 192\n");
        for w in ["cat", "fish"] {
            text.push_str(w);
            for j in 0..192 {
                text.push_str(&format!(" {}", j as f64 * 0.01));
            }
            text.push('\n');
        }
        let (table, report) = load(&text, 192).unwrap();
        assert_eq!(table.dim(), 192);
        assert_eq!(table.row(vocab().id("cat").unwrap())[5], 0.05);
        assert_eq!(report.found, 1);
        // <unk>, <s>, </s>, dog
        assert_eq!(report.missing, 4);
        assert!(table.row(PAD).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let err = load("1 100\ncat 1\n", 192).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load("2 2\ncat 1 2\ndog 1 x\n", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = load("2 2\ncat 1 2\ndog 1\n", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_word_last_wins_with_warning() {
        let (table, report) = load("2 2\ncat 1 2\ncat 3 4\n", 2).unwrap();
        assert_eq!(table.row(vocab().id("cat").unwrap()), &[3.0, 4.0]);
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("duplicate"));
    }
}
