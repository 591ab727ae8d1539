//! Pretrained word vectors: text-format I/O, vocabulary alignment and
//! dimensionality reduction.
//!
//! All arithmetic here is 64-bit; matrices are cast to model precision only
//! when they seed a network's embedding layer.

mod pca;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;

use crate::corpus::{Vocabulary, NUM_SPECIALS};
use crate::seed;

pub use pca::{pca_fit, pca_reduce, pp_pca_pp, ppa, PcaBasis};

/// Threshold for the number of dominant directions removed by post-processing.
pub const DEFAULT_PPA_D: usize = 7;

/// Half-width of the uniform range used for rows without a pretrained vector.
pub const FILL_RANGE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty embedding file: {0}")]
    EmptyFile(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular value decomposition did not converge")]
    SvdFailed,
}

type Result<T> = std::result::Result<T, EmbeddingError>;

/// Word vectors keyed by token, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(tokens: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if tokens.len() != vectors.nrows() {
            return Err(EmbeddingError::InvalidArgument(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                vectors.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(EmbeddingError::InvalidArgument(format!(
                    "duplicate token {t:?}"
                )));
            }
        }
        Ok(EmbeddingTable {
            tokens,
            index,
            vectors,
        })
    }

    /// An empty table of the given dimension.
    pub fn empty(dim: usize) -> Self {
        EmbeddingTable {
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Array2::zeros((0, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }
}

/// Reads the whitespace-separated `token v1 .. vd` text format (no header).
/// The dimension is taken from the first line.
pub fn load_embedding_table(path: &Path) -> Result<EmbeddingTable> {
    let io = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parse = |line: usize, message: String| EmbeddingError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut tokens = Vec::new();
    let mut index = HashMap::new();
    let mut values: Vec<f64> = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-blank line has a field");
        let start = values.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse(lineno, format!("non-numeric field {f:?}")))?;
            if !v.is_finite() {
                return Err(parse(lineno, format!("non-finite value {f:?}")));
            }
            values.push(v);
        }
        let n = values.len() - start;
        match dim {
            None if n == 0 => return Err(parse(lineno, "entry has no vector components".into())),
            None => dim = Some(n),
            Some(d) if d != n => {
                return Err(parse(lineno, format!("expected {d} components, found {n}")))
            }
            Some(_) => {}
        }
        if index.insert(token.to_string(), tokens.len()).is_some() {
            return Err(parse(lineno, format!("duplicate token {token:?}")));
        }
        tokens.push(token.to_string());
    }
    let dim = dim.ok_or_else(|| EmbeddingError::EmptyFile(path.to_path_buf()))?;
    let vectors = Array2::from_shape_vec((tokens.len(), dim), values).expect("row-major fill");
    Ok(EmbeddingTable {
        tokens,
        index,
        vectors,
    })
}

/// Writes `rows` in the text format, one token per row.
pub fn write_embedding_text<'a, I>(path: &Path, tokens: I, rows: &Array2<f64>) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = String::with_capacity(rows.len() * 12);
    let mut written = 0;
    for (token, row) in tokens.into_iter().zip(rows.rows()) {
        out.push_str(token);
        for v in row {
            write!(out, " {v}").expect("write to String");
        }
        out.push('\n');
        written += 1;
    }
    if written != rows.nrows() {
        return Err(EmbeddingError::InvalidArgument(format!(
            "{written} tokens for {} rows",
            rows.nrows()
        )));
    }
    fs::write(path, out).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// V×d word-vector matrix whose row `i` belongs to vocabulary id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::InvalidArgument(
                "embedding matrix has non-finite entries".into(),
            ));
        }
        Ok(EmbeddingMatrix(values.as_standard_layout().into_owned()))
    }

    pub fn vocab_size(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Writes every row, labelled with the vocabulary's surface forms
    /// (special rows included).
    pub fn write_text(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.vocab_size() {
            return Err(EmbeddingError::InvalidArgument(format!(
                "vocabulary has {} entries, matrix has {} rows",
                vocab.len(),
                self.vocab_size()
            )));
        }
        let tokens = (0..vocab.len()).map(|i| vocab.word(i).expect("id in range"));
        write_embedding_text(path, tokens, &self.0)
    }
}

/// A vocabulary-aligned matrix plus the fraction of real words found in the table.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedEmbeddings {
    pub matrix: EmbeddingMatrix,
    pub coverage: f64,
}

/// Looks up every real vocabulary word in `table`; special rows and misses are
/// drawn i.i.d. from uniform [-0.05, 0.05].
pub fn build_embedding_matrix(
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    dim: usize,
    rng_seed: u64,
) -> Result<AlignedEmbeddings> {
    if table.dim() != dim && !table.is_empty() {
        return Err(EmbeddingError::InvalidArgument(format!(
            "table dimension {} does not match requested {dim}",
            table.dim()
        )));
    }
    let mut rng = seed::stream(rng_seed, "embedding-fill", &[]);
    let mut values = Array2::zeros((vocab.len(), dim));
    let mut hits = 0usize;
    for (id, mut row) in values.rows_mut().into_iter().enumerate() {
        let found = if id >= NUM_SPECIALS {
            table.get(vocab.word(id).expect("id in range"))
        } else {
            None
        };
        match found {
            Some(v) => {
                row.assign(&v);
                hits += 1;
            }
            None => row.mapv_inplace(|_| rng.gen_range(-FILL_RANGE..=FILL_RANGE)),
        }
    }
    let coverage = if vocab.num_words() == 0 {
        0.0
    } else {
        hits as f64 / vocab.num_words() as f64
    };
    Ok(AlignedEmbeddings {
        matrix: EmbeddingMatrix(values),
        coverage,
    })
}

/// The three reduction methods the driver exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionMethod {
    /// Plain PCA projection to `dim` components.
    Pca,
    /// Post-processing only; dimension unchanged.
    Ppa,
    /// Post-process, project, post-process.
    PpPcaPp,
}

impl std::str::FromStr for ReductionMethod {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ReductionMethod::Pca),
            "ppa" => Ok(ReductionMethod::Ppa),
            "pp_pca_pp" => Ok(ReductionMethod::PpPcaPp),
            other => Err(EmbeddingError::InvalidArgument(format!(
                "unknown reduction method {other:?}"
            ))),
        }
    }
}

/// Applies `method`; `dim` is ignored by `Ppa`.
pub fn reduce(
    x: &EmbeddingMatrix,
    method: ReductionMethod,
    dim: usize,
    ppa_d: usize,
) -> Result<EmbeddingMatrix> {
    match method {
        ReductionMethod::Pca => pca_reduce(x, dim),
        ReductionMethod::Ppa => ppa(x, ppa_d),
        ReductionMethod::PpPcaPp => pp_pca_pp(x, dim, ppa_d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let p = dir.path().join("emb.txt");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_text_table() {
        let dir = tempfile::tempdir().unwrap();
        let t = load_embedding_table(&write(&dir, "a 1.0 2.0\nb 3.0 4.0")).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("a").unwrap().to_vec(), vec![1.0, 2.0]);
        assert_eq!(t.get("b").unwrap().to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn rejects_ragged_rows_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_embedding_table(&write(&dir, "a 1 2\nb 3 4\nc 5\n")).unwrap_err();
        assert!(
            matches!(err, EmbeddingError::Parse { line: 3, .. }),
            "{err}"
        );
    }

    #[test]
    fn rejects_non_numeric_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_embedding_table(&write(&dir, "a 1 x\n")).unwrap_err();
        assert!(matches!(err, EmbeddingError::Parse { line: 1, .. }));
        let err = load_embedding_table(&write(&dir, "")).unwrap_err();
        assert!(matches!(err, EmbeddingError::EmptyFile(_)));
        assert!(err.to_string().contains("empty embedding file"));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rows = array![[0.1, -1.0 / 3.0], [1e-300, 12345.678]];
        let p = dir.path().join("out.txt");
        write_embedding_text(&p, ["x", "y"], &rows).unwrap();
        let t = load_embedding_table(&p).unwrap();
        assert_eq!(t.vectors(), &rows);
    }

    #[test]
    fn aligns_rows_and_fills_misses() {
        let vocab = Vocabulary::from_words(["x", "q"]).unwrap();
        let table = EmbeddingTable::new(
            vec!["x".into(), "zz".into()],
            array![[1.0, 2.0], [5.0, 5.0]],
        )
        .unwrap();
        let aligned = build_embedding_matrix(&vocab, &table, 2, 9).unwrap();
        let m = aligned.matrix.values();
        assert_eq!(m.row(4).to_vec(), vec![1.0, 2.0]);
        for id in [0, 1, 2, 3, 5] {
            assert!(m.row(id).iter().all(|v| v.abs() <= FILL_RANGE));
        }
        assert_eq!(aligned.coverage, 0.5);
        assert_eq!(
            aligned,
            build_embedding_matrix(&vocab, &table, 2, 9).unwrap()
        );
    }

    #[test]
    fn special_rows_never_looked_up() {
        let vocab = Vocabulary::from_words(["x"]).unwrap();
        let table = EmbeddingTable::new(vec!["<pad>".into()], array![[9.0, 9.0]]).unwrap();
        let aligned = build_embedding_matrix(&vocab, &table, 2, 0).unwrap();
        assert!(aligned
            .matrix
            .values()
            .row(0)
            .iter()
            .all(|v| v.abs() <= FILL_RANGE));
        assert_eq!(aligned.coverage, 0.0);
    }

    #[test]
    fn empty_table_fills_everything() {
        let vocab = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let aligned = build_embedding_matrix(&vocab, &EmbeddingTable::empty(4), 4, 3).unwrap();
        assert_eq!(aligned.coverage, 0.0);
        assert_eq!(aligned.matrix.values().dim(), (7, 4));
        assert!(aligned
            .matrix
            .values()
            .iter()
            .all(|v| v.abs() <= FILL_RANGE));
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let table = EmbeddingTable::new(vec!["a".into()], array![[1.0, 2.0]]).unwrap();
        assert!(build_embedding_matrix(&vocab, &table, 3, 0).is_err());
    }

    #[test]
    fn method_names_parse() {
        assert_eq!(
            "pca".parse::<ReductionMethod>().unwrap(),
            ReductionMethod::Pca
        );
        assert_eq!(
            "pp_pca_pp".parse::<ReductionMethod>().unwrap(),
            ReductionMethod::PpPcaPp
        );
        assert!("svd".parse::<ReductionMethod>().is_err());
    }
}
