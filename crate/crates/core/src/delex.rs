//! Delexicalization and the shared token vocabulary.

use std::collections::HashMap;

use thiserror::Error;

use crate::ontology::{DialogueAct, Ontology, SlotId};

pub const BOS: &str = "BOS";
pub const EOS: &str = "EOS";
pub const UNK: &str = "UNK";

pub type TokenId = usize;

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;

/// Lowercases, pads punctuation with spaces and splits on whitespace.
/// Idempotent on already tokenized text.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut padded = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if matches!(c, '.' | ',' | '?' | '!' | ';' | ':' | '(' | ')') {
            padded.push(' ');
            padded.push(c);
            padded.push(' ');
        } else {
            padded.push(c);
        }
    }
    padded.split_whitespace().map(str::to_string).collect()
}

pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// A delexicalized utterance wrapped in `BOS ... EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelexUtterance {
    pub tokens: Vec<String>,
    /// (position in `tokens`, surface text the slot token replaced)
    pub lex_map: Vec<(usize, String)>,
}

impl DelexUtterance {
    /// Wraps bare interior tokens with BOS/EOS; no lexicalization record.
    pub fn from_interior<S: AsRef<str>>(interior: &[S]) -> Self {
        let mut tokens = Vec::with_capacity(interior.len() + 2);
        tokens.push(BOS.to_string());
        tokens.extend(interior.iter().map(|s| s.as_ref().to_string()));
        tokens.push(EOS.to_string());
        DelexUtterance { tokens, lex_map: Vec::new() }
    }

    pub fn parse(text: &str) -> Self {
        let interior: Vec<&str> = text
            .split_whitespace()
            .filter(|t| *t != BOS && *t != EOS)
            .collect();
        Self::from_interior(&interior)
    }

    pub fn interior(&self) -> &[String] {
        let n = self.tokens.len();
        if n >= 2 {
            &self.tokens[1..n - 1]
        } else {
            &[]
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

enum Piece {
    Word(String),
    Slot(SlotId, String),
}

/// Replaces every occurrence of each categorical value with its slot token,
/// longest value first. Special and unvalued pairs replace nothing.
pub fn delexicalize(ont: &Ontology, text: &str, da: &DialogueAct) -> DelexUtterance {
    let mut pieces: Vec<Piece> = tokenize(text).into_iter().map(Piece::Word).collect();

    let mut values: Vec<(SlotId, Vec<String>)> = da
        .pairs
        .iter()
        .filter(|(slot, _)| !ont.is_binary(*slot))
        .filter_map(|(slot, v)| v.text().map(|t| (*slot, tokenize(t))))
        .filter(|(_, toks)| !toks.is_empty())
        .collect();
    // stable: ties keep act order
    values.sort_by(|a, b| {
        b.1.len()
            .cmp(&a.1.len())
            .then_with(|| b.1.iter().map(String::len).sum::<usize>().cmp(&a.1.iter().map(String::len).sum()))
    });

    for (slot, value) in &values {
        let mut out = Vec::with_capacity(pieces.len());
        let mut i = 0;
        while i < pieces.len() {
            let matches = i + value.len() <= pieces.len()
                && value.iter().enumerate().all(|(k, v)| match &pieces[i + k] {
                    Piece::Word(w) => w == v,
                    Piece::Slot(..) => false,
                });
            if matches {
                out.push(Piece::Slot(*slot, value.join(" ")));
                i += value.len();
            } else {
                out.push(std::mem::replace(&mut pieces[i], Piece::Word(String::new())));
                i += 1;
            }
        }
        pieces = out;
    }

    let mut tokens = Vec::with_capacity(pieces.len() + 2);
    let mut lex_map = Vec::new();
    tokens.push(BOS.to_string());
    for piece in pieces {
        match piece {
            Piece::Word(w) => tokens.push(w),
            Piece::Slot(slot, surface) => {
                lex_map.push((tokens.len(), surface));
                tokens.push(ont.slot_token(slot).expect("categorical slots have tokens"));
            }
        }
    }
    tokens.push(EOS.to_string());
    DelexUtterance { tokens, lex_map }
}

/// Slots whose categorical value left no slot token behind.
pub fn unmatched_values(ont: &Ontology, delex: &DelexUtterance, da: &DialogueAct) -> Vec<SlotId> {
    da.pairs
        .iter()
        .filter(|(slot, v)| v.text().is_some() && !ont.is_binary(*slot))
        .map(|(slot, _)| *slot)
        .filter(|slot| {
            let tok = ont.slot_token(*slot);
            !delex.tokens.iter().any(|t| Some(t) == tok.as_ref())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DelexError {
    #[error("slot token {token} has no value in the dialogue act")]
    DanglingSlot { token: String },
    #[error("token `{token}` is not in the vocabulary")]
    OutOfVocabulary { token: String },
}

/// Substitutes slot tokens with the act's values.
pub fn relexicalize<S: AsRef<str>>(
    ont: &Ontology,
    tokens: &[S],
    da: &DialogueAct,
) -> Result<String, DelexError> {
    let (text, dangling) = relex_inner(ont, tokens, da);
    match dangling.into_iter().next() {
        Some(token) => Err(DelexError::DanglingSlot { token }),
        None => Ok(text),
    }
}

/// Like [`relexicalize`] but leaves dangling slot tokens in place and
/// reports how many there were.
pub fn relexicalize_lossy<S: AsRef<str>>(
    ont: &Ontology,
    tokens: &[S],
    da: &DialogueAct,
) -> (String, usize) {
    let (text, dangling) = relex_inner(ont, tokens, da);
    (text, dangling.len())
}

fn relex_inner<S: AsRef<str>>(ont: &Ontology, tokens: &[S], da: &DialogueAct) -> (String, Vec<String>) {
    let mut words: Vec<String> = Vec::with_capacity(tokens.len());
    let mut dangling = Vec::new();
    for tok in tokens {
        let tok = tok.as_ref();
        if tok == BOS || tok == EOS {
            continue;
        }
        match ont.slot_for_token(tok) {
            Some(slot) => match da.value_of(slot) {
                Some(v) => words.push(normalize(v)),
                None => {
                    dangling.push(tok.to_string());
                    words.push(tok.to_string());
                }
            },
            None => words.push(tok.to_string()),
        }
    }
    (words.join(" "), dangling)
}

/// Dense token index shared by all networks.
///
/// Layout: BOS, EOS, UNK, one token per delexicalizable slot (ontology
/// order), then corpus words in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    token_slot: Vec<Option<SlotId>>,
    value_bit: Vec<Option<usize>>,
    slot_token: Vec<Option<TokenId>>,
}

impl Vocabulary {
    pub fn reserved(ont: &Ontology) -> Vec<String> {
        let mut out = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        out.extend(ont.slot_ids().filter_map(|s| ont.slot_token(s)));
        out
    }

    /// Rebuilds a vocabulary from its token list, checking the reserved prefix.
    pub fn from_tokens(ont: &Ontology, tokens: Vec<String>) -> Result<Self, String> {
        let reserved = Self::reserved(ont);
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err("vocabulary does not start with the reserved tokens".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token `{t}`"));
            }
        }
        let token_slot: Vec<Option<SlotId>> = tokens.iter().map(|t| ont.slot_for_token(t)).collect();
        let value_bit = token_slot
            .iter()
            .map(|s| s.map(|s| ont.slot_bit(s, crate::ontology::Category::Value)))
            .collect();
        let slot_token = ont
            .slot_ids()
            .map(|s| ont.slot_token(s).and_then(|t| index.get(&t).copied()))
            .collect();
        Ok(Vocabulary { tokens, index, token_slot, value_bit, slot_token })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn slot_of(&self, id: TokenId) -> Option<SlotId> {
        self.token_slot.get(id).copied().flatten()
    }

    /// Control-vector index of the "value" bit gated by this slot token.
    pub fn value_bit(&self, id: TokenId) -> Option<usize> {
        self.value_bit.get(id).copied().flatten()
    }

    pub fn slot_token_id(&self, slot: SlotId) -> Option<TokenId> {
        self.slot_token.get(slot.0).copied().flatten()
    }

    pub fn encode(&self, delex: &DelexUtterance) -> Result<Vec<TokenId>, DelexError> {
        delex
            .tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| DelexError::OutOfVocabulary { token: t.clone() }))
            .collect()
    }

    pub fn encode_lossy(&self, delex: &DelexUtterance) -> Vec<TokenId> {
        delex.tokens.iter().map(|t| self.id(t).unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

pub fn build_vocab(ont: &Ontology, corpus: &[DelexUtterance]) -> Vocabulary {
    let reserved = Vocabulary::reserved(ont);
    let mut words: Vec<&str> = corpus
        .iter()
        .flat_map(|d| d.tokens.iter())
        .map(String::as_str)
        .filter(|t| !reserved.iter().any(|r| r == t))
        .collect();
    words.sort_unstable();
    words.dedup();
    let mut tokens = reserved;
    tokens.extend(words.into_iter().map(str::to_string));
    Vocabulary::from_tokens(ont, tokens).expect("reserved prefix is built in")
}
