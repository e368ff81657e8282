//! Shared symbol inventory with reserved pad and blank ids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{RederError, Result};

pub const PAD: usize = 0;
pub const BLANK: usize = 1;
pub const PAD_SYMBOL: &str = "<pad>";
pub const BLANK_SYMBOL: &str = "<blank>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Pad and blank only.
    pub fn new() -> Self {
        Self::from_symbols(Vec::<String>::new()).expect("reserved symbols only")
    }

    /// Ids from 2 upward in the given order.
    pub fn from_symbols<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut v = Self {
            symbols: vec![PAD_SYMBOL.into(), BLANK_SYMBOL.into()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_SYMBOL.into(), PAD);
        v.index.insert(BLANK_SYMBOL.into(), BLANK);
        for s in symbols {
            let s = s.into();
            if v.index.contains_key(&s) {
                return Err(RederError::Corpus(format!("duplicate vocabulary symbol {s:?}")));
            }
            v.push(s)?;
        }
        Ok(v)
    }

    fn push(&mut self, s: String) -> Result<usize> {
        if s.is_empty() || s.chars().any(char::is_whitespace) {
            return Err(RederError::Corpus(format!("symbol {s:?} is empty or contains whitespace")));
        }
        let id = self.symbols.len();
        self.index.insert(s.clone(), id);
        self.symbols.push(s);
        Ok(id)
    }

    /// Ids 2+ in first-occurrence order over `sequences`; fails if more
    /// than `max_symbols` distinct symbols appear or a reserved symbol is
    /// used as data.
    pub fn build<'a, I, S>(sequences: I, max_symbols: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut v = Self::new();
        for seq in sequences {
            for s in seq {
                let s = s.as_ref();
                if s == PAD_SYMBOL || s == BLANK_SYMBOL {
                    return Err(RederError::Corpus(format!("reserved symbol {s} in corpus")));
                }
                if !v.index.contains_key(s) {
                    if v.symbols.len() - 2 >= max_symbols {
                        return Err(RederError::Corpus(format!("more than {max_symbols} distinct symbols")));
                    }
                    v.push(s.to_string())?;
                }
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Whitespace-separated surface tokens to ids. Unknown and reserved
    /// symbols are errors.
    pub fn encode(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace()
            .map(|s| match self.id(s) {
                Some(id) if id > BLANK => Ok(id),
                Some(_) => Err(RederError::Corpus(format!("reserved symbol {s} in input"))),
                None => Err(RederError::Corpus(format!("unknown symbol {s:?}"))),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match self.symbol(id) {
                Some(s) => out.push_str(s),
                None => {
                    let _ = write!(out, "<unk:{id}>");
                }
            }
        }
        out
    }

    /// One symbol per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(PAD_SYMBOL) || lines.next() != Some(BLANK_SYMBOL) {
            return Err(RederError::Corpus(format!(
                "vocabulary must start with {PAD_SYMBOL} and {BLANK_SYMBOL}"
            )));
        }
        Self::from_symbols(lines.filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}
