use super::{LmError, Result};

pub type TokenId = usize;

/// Character vocabulary. Ids are positions in the symbol list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    lookup: [Option<TokenId>; 128],
}

impl Vocab {
    pub const PAD: char = '_';
    pub const BOS: char = '^';
    pub const EOS: char = '$';
    /// Separates instruction from response.
    pub const SEP: char = '|';
    /// Separates few-shot exemplars.
    pub const SHOT_SEP: char = ';';
    /// Ends a few-shot prompt; the model writes a new instruction after it.
    pub const CUE: char = '>';

    pub const MAX_SYMBOLS: usize = 64;

    pub fn new(symbols: Vec<char>) -> Result<Self> {
        if symbols.len() > Self::MAX_SYMBOLS {
            return Err(LmError::Vocab(format!(
                "{} symbols exceeds the limit of {}",
                symbols.len(),
                Self::MAX_SYMBOLS
            )));
        }
        let mut lookup = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            if !c.is_ascii() {
                return Err(LmError::Vocab(format!("non-ascii symbol {c:?}")));
            }
            if lookup[c as usize].replace(i).is_some() {
                return Err(LmError::Vocab(format!("duplicate symbol {c:?}")));
            }
        }
        for special in [Self::PAD, Self::BOS, Self::EOS, Self::SEP] {
            if lookup[special as usize].is_none() {
                return Err(LmError::Vocab(format!("missing special symbol {special:?}")));
            }
        }
        Ok(Self { symbols, lookup })
    }

    /// The default 44-symbol alphabet: specials, punctuation, space, a-z, 0-9.
    pub fn toy() -> Self {
        let mut s = vec![
            Self::PAD,
            Self::BOS,
            Self::EOS,
            Self::SEP,
            Self::SHOT_SEP,
            Self::CUE,
            ':',
            ' ',
        ];
        s.extend('a'..='z');
        s.extend('0'..='9');
        Self::new(s).expect("toy vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        if c.is_ascii() {
            self.lookup[c as usize]
        } else {
            None
        }
    }

    fn special(&self, c: char) -> TokenId {
        self.lookup[c as usize].expect("special symbols are validated at construction")
    }

    pub fn pad(&self) -> TokenId {
        self.special(Self::PAD)
    }

    pub fn bos(&self) -> TokenId {
        self.special(Self::BOS)
    }

    pub fn eos(&self) -> TokenId {
        self.special(Self::EOS)
    }

    pub fn sep(&self) -> TokenId {
        self.special(Self::SEP)
    }

    pub fn symbol(&self, id: TokenId) -> Option<char> {
        self.symbols.get(id).copied()
    }

    /// Encodes text. The padding glyph is never valid content.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| match self.id(c) {
                Some(id) if c != Self::PAD => Ok(id),
                _ => Err(LmError::Encoding(c)),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        ids.iter()
            .map(|&id| self.symbol(id).ok_or(LmError::UnknownToken(id)))
            .collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::toy()
    }
}
