use thiserror::Error;

/// Reason a TDM1/TCM1 byte stream was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    InvalidUtf8,
    UnsupportedDtype(u8),
    UnknownMode(u8),
    UnknownStorage(u8),
    InvalidShape,
    DuplicateName(String),
    NonFinite,
    InvalidCodebook(String),
    IndexOutOfRange { index: u8, codebook_len: usize },
    TrailingBytes(usize),
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic"),
            ParseErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::Truncated => write!(f, "truncated stream"),
            ParseErrorKind::InvalidUtf8 => write!(f, "tensor name is not valid UTF-8"),
            ParseErrorKind::UnsupportedDtype(d) => write!(f, "unsupported dtype {d}"),
            ParseErrorKind::UnknownMode(m) => write!(f, "unknown clustering mode {m}"),
            ParseErrorKind::UnknownStorage(s) => write!(f, "unknown storage kind {s}"),
            ParseErrorKind::InvalidShape => write!(f, "invalid tensor shape"),
            ParseErrorKind::DuplicateName(n) => write!(f, "duplicate tensor name {n:?}"),
            ParseErrorKind::NonFinite => write!(f, "non-finite value"),
            ParseErrorKind::InvalidCodebook(msg) => write!(f, "invalid codebook: {msg}"),
            ParseErrorKind::IndexOutOfRange { index, codebook_len } => {
                write!(f, "index {index} out of range for codebook of {codebook_len}")
            }
            ParseErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes after last tensor"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible: requested {requested} clusters but only {distinct} distinct values")]
    Infeasible { requested: usize, distinct: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("corrupt clustered tensor: {0}")]
    Corrupt(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },

    #[error("{file}:{line}: {message}")]
    Syntax {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(offset: usize, kind: ParseErrorKind) -> Self {
        Error::Parse { offset, kind }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
