//! Dialogue-act ontology, the act string grammar and control-vector encoding.
//!
//! An act is written `act(slot=value, ...)`. Values are either quoted strings
//! or barewords; the bareword `dontcare` (or `dont_care`) marks a don't-care
//! value and binary slots accept `yes`/`no`/`true`/`false`. A slot without
//! `=` is unvalued, as in `request(near)`.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Category bits per slot block: `[value, dontcare, yes, no]`.
pub const CATEGORIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActType(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotId(pub usize);

/// Which bit of a slot block a value lights up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Value,
    DontCare,
    Yes,
    No,
}

impl Category {
    pub const ALL: [Category; CATEGORIES] =
        [Category::Value, Category::DontCare, Category::Yes, Category::No];

    pub fn index(self) -> usize {
        match self {
            Category::Value => 0,
            Category::DontCare => 1,
            Category::Yes => 2,
            Category::No => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Value => "value",
            Category::DontCare => "dontcare",
            Category::Yes => "yes",
            Category::No => "no",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Special values have no surface string to delexicalize.
    pub fn is_special(self) -> bool {
        self != Category::Value
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SlotValue {
    Categorical(String),
    DontCare,
    Yes,
    No,
    Unvalued,
}

impl SlotValue {
    pub fn category(&self) -> Category {
        match self {
            SlotValue::Categorical(_) | SlotValue::Unvalued => Category::Value,
            SlotValue::DontCare => Category::DontCare,
            SlotValue::Yes => Category::Yes,
            SlotValue::No => Category::No,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            SlotValue::Categorical(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    #[serde(default)]
    pub binary: bool,
}

/// Act types and slots of a domain. Order fixes the control-vector layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub acts: Vec<String>,
    pub slots: Vec<SlotSpec>,
    /// Acts whose slots never carry values (requests, closings).
    #[serde(default)]
    pub valueless_acts: Vec<String>,
}

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("cannot read ontology file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ontology: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid ontology: {0}")]
    Invalid(String),
}

impl Default for Ontology {
    fn default() -> Self {
        Self::restaurant()
    }
}

impl Ontology {
    /// The San Francisco restaurant domain: 8 system acts and 12 slots.
    pub fn restaurant() -> Self {
        let acts = [
            "inform",
            "reject",
            "informonly",
            "confirm",
            "request",
            "reqmore",
            "select",
            "goodbye",
        ];
        let slots = [
            "name",
            "count",
            "food",
            "near",
            "price",
            "pricerange",
            "postcode",
            "phone",
            "address",
            "area",
            "goodformeal",
            "kidsallowed",
        ];
        Ontology {
            acts: acts.iter().map(|s| s.to_string()).collect(),
            slots: slots
                .iter()
                .map(|s| SlotSpec {
                    name: s.to_string(),
                    binary: *s == "kidsallowed",
                })
                .collect(),
            valueless_acts: ["request", "reqmore", "goodbye"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let text = fs::read_to_string(path)?;
        let ont: Ontology = serde_json::from_str(&text)?;
        ont.validate()?;
        Ok(ont)
    }

    pub fn validate(&self) -> Result<(), OntologyError> {
        if self.acts.is_empty() || self.slots.is_empty() {
            return Err(OntologyError::Invalid("needs at least one act and one slot".into()));
        }
        let mut names: Vec<&str> = self.acts.iter().map(String::as_str).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.acts.len() {
            return Err(OntologyError::Invalid("duplicate act type".into()));
        }
        let mut slots: Vec<&str> = self.slots.iter().map(|s| s.name.as_str()).collect();
        slots.sort_unstable();
        slots.dedup();
        if slots.len() != self.slots.len() {
            return Err(OntologyError::Invalid("duplicate slot".into()));
        }
        for a in &self.valueless_acts {
            if self.act(a).is_none() {
                return Err(OntologyError::Invalid(format!("unknown valueless act {a}")));
            }
        }
        Ok(())
    }

    pub fn num_acts(&self) -> usize {
        self.acts.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn act(&self, name: &str) -> Option<ActType> {
        self.acts.iter().position(|a| a == name).map(ActType)
    }

    pub fn slot(&self, name: &str) -> Option<SlotId> {
        self.slots.iter().position(|s| s.name == name).map(SlotId)
    }

    pub fn act_name(&self, act: ActType) -> &str {
        &self.acts[act.0]
    }

    pub fn slot_name(&self, slot: SlotId) -> &str {
        &self.slots[slot.0].name
    }

    pub fn is_binary(&self, slot: SlotId) -> bool {
        self.slots[slot.0].binary
    }

    pub fn is_valueless(&self, act: ActType) -> bool {
        self.valueless_acts.iter().any(|a| a == self.act_name(act))
    }

    /// Width of the control vector: one act block plus a 4-bit block per slot.
    pub fn control_dim(&self) -> usize {
        self.num_acts() + CATEGORIES * self.num_slots()
    }

    /// Width of the slot part of the control vector.
    pub fn slot_bits(&self) -> usize {
        CATEGORIES * self.num_slots()
    }

    pub fn slot_bit(&self, slot: SlotId, cat: Category) -> usize {
        self.num_acts() + CATEGORIES * slot.0 + cat.index()
    }

    /// Placeholder token for a delexicalizable slot; binary slots have none.
    pub fn slot_token(&self, slot: SlotId) -> Option<String> {
        if self.is_binary(slot) {
            None
        } else {
            Some(format!("SLOT_{}", self.slot_name(slot).to_uppercase()))
        }
    }

    pub fn slot_for_token(&self, token: &str) -> Option<SlotId> {
        let name = token.strip_prefix("SLOT_")?;
        (0..self.num_slots())
            .map(SlotId)
            .find(|&s| !self.is_binary(s) && self.slot_name(s).eq_ignore_ascii_case(name))
    }

    pub fn slot_ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.num_slots()).map(SlotId)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DialogueAct {
    pub act: ActType,
    pub pairs: Vec<(SlotId, SlotValue)>,
}

impl DialogueAct {
    pub fn new(act: ActType) -> Self {
        DialogueAct { act, pairs: Vec::new() }
    }

    pub fn with(mut self, slot: SlotId, value: SlotValue) -> Self {
        self.pairs.push((slot, value));
        self
    }

    /// First categorical value given for `slot`.
    pub fn value_of(&self, slot: SlotId) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(s, v)| *s == slot && matches!(v, SlotValue::Categorical(_)))
            .and_then(|(_, v)| v.text())
    }

    pub fn key(&self) -> DaKey {
        DaKey::of(self)
    }

    pub fn has_special_value(&self) -> bool {
        self.pairs.iter().any(|(_, v)| v.category().is_special())
    }

    pub fn render(&self, ont: &Ontology) -> String {
        let mut out = String::new();
        out.push_str(ont.act_name(self.act));
        out.push('(');
        for (i, (slot, value)) in self.pairs.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(ont.slot_name(*slot));
            match value {
                SlotValue::Unvalued => {}
                SlotValue::DontCare => out.push_str("=dontcare"),
                SlotValue::Yes => out.push_str("=yes"),
                SlotValue::No => out.push_str("=no"),
                SlotValue::Categorical(text) => {
                    out.push('=');
                    if is_plain_bareword(text) {
                        out.push_str(text);
                    } else {
                        out.push('"');
                        for c in text.chars() {
                            if c == '"' || c == '\\' {
                                out.push('\\');
                            }
                            out.push(c);
                        }
                        out.push('"');
                    }
                }
            }
        }
        out.push(')');
        out
    }
}

/// Value-free identity of an act: act type plus slot categories.
///
/// Two acts with the same key share delexicalized templates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DaKey {
    pub act: ActType,
    pub pairs: Vec<(SlotId, Category)>,
}

impl DaKey {
    pub fn of(da: &DialogueAct) -> Self {
        let canon = canonicalize_da(da);
        DaKey {
            act: canon.act,
            pairs: canon.pairs.iter().map(|(s, v)| (*s, v.category())).collect(),
        }
    }

    pub fn display<'a>(&'a self, ont: &'a Ontology) -> impl fmt::Display + 'a {
        KeyDisplay { key: self, ont }
    }
}

struct KeyDisplay<'a> {
    key: &'a DaKey,
    ont: &'a Ontology,
}

impl fmt::Display for KeyDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.ont.act_name(self.key.act))?;
        for (i, (slot, cat)) in self.key.pairs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(self.ont.slot_name(*slot))?;
            if *cat != Category::Value {
                write!(f, "={}", cat.name())?;
            }
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown act type `{name}` at {pos}")]
    UnknownAct { name: String, pos: usize },
    #[error("unknown slot `{name}` at {pos}")]
    UnknownSlot { name: String, pos: usize },
    #[error("invalid value `{value}` for slot `{slot}` at {pos}")]
    InvalidValue { slot: String, value: String, pos: usize },
    #[error("syntax error at {pos}: expected {expected}")]
    Syntax { pos: usize, expected: &'static str },
}

fn is_bareword_char(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '(' | ')' | ',' | '=' | '"')
}

fn is_plain_bareword(text: &str) -> bool {
    !text.is_empty()
        && text.chars().all(is_bareword_char)
        && !matches!(text, "dontcare" | "dont_care" | "yes" | "no" | "true" | "false")
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char, expected: &'static str) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(ParseError::Syntax { pos: self.pos, expected })
        }
    }

    fn ident(&mut self, expected: &'static str) -> Result<(&'a str, usize), ParseError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(ParseError::Syntax { pos: start, expected });
        }
        self.pos += len;
        Ok((&rest[..len], start))
    }

    fn quoted(&mut self) -> Result<String, ParseError> {
        let mut out = String::new();
        let mut chars = self.src[self.pos..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, e)) => out.push(e),
                    None => break,
                },
                _ => out.push(c),
            }
        }
        Err(ParseError::Syntax { pos: self.src.len(), expected: "closing quote" })
    }

    fn bareword(&mut self) -> Result<&'a str, ParseError> {
        let rest = &self.src[self.pos..];
        let len = rest.find(|c: char| !is_bareword_char(c)).unwrap_or(rest.len());
        if len == 0 {
            return Err(ParseError::Syntax { pos: self.pos, expected: "value" });
        }
        self.pos += len;
        Ok(&rest[..len])
    }
}

/// Parses `act(slot=value, ...)`. Pairs keep their written order.
pub fn parse_da(ont: &Ontology, text: &str) -> Result<DialogueAct, ParseError> {
    let mut cur = Cursor { src: text, pos: 0 };
    let (name, pos) = cur.ident("act type")?;
    let act = ont
        .act(name)
        .ok_or_else(|| ParseError::UnknownAct { name: name.to_string(), pos })?;
    let mut da = DialogueAct::new(act);
    cur.expect('(', "`(`")?;
    if !cur.eat(')') {
        loop {
            let (slot_name, slot_pos) = cur.ident("slot name")?;
            let slot = ont
                .slot(slot_name)
                .ok_or_else(|| ParseError::UnknownSlot { name: slot_name.to_string(), pos: slot_pos })?;
            let value = if cur.eat('=') {
                cur.skip_ws();
                let value_pos = cur.pos;
                let invalid = |v: &str| ParseError::InvalidValue {
                    slot: slot_name.to_string(),
                    value: v.to_string(),
                    pos: value_pos,
                };
                let value = if cur.eat('"') {
                    let s = cur.quoted()?;
                    if s.is_empty() || ont.is_binary(slot) {
                        return Err(invalid(&s));
                    }
                    SlotValue::Categorical(s)
                } else {
                    let word = cur.bareword()?;
                    match word {
                        "dontcare" | "dont_care" => SlotValue::DontCare,
                        "yes" | "true" if ont.is_binary(slot) => SlotValue::Yes,
                        "no" | "false" if ont.is_binary(slot) => SlotValue::No,
                        _ if ont.is_binary(slot) => return Err(invalid(word)),
                        _ => SlotValue::Categorical(word.to_string()),
                    }
                };
                if ont.is_valueless(act) {
                    return Err(match &value {
                        SlotValue::Categorical(s) => invalid(s),
                        other => invalid(other.category().name()),
                    });
                }
                value
            } else {
                SlotValue::Unvalued
            };
            da.pairs.push((slot, value));
            if cur.eat(')') {
                break;
            }
            cur.expect(',', "`,` or `)`")?;
        }
    }
    cur.skip_ws();
    if cur.pos != text.len() {
        return Err(ParseError::Syntax { pos: cur.pos, expected: "end of input" });
    }
    Ok(da)
}

/// Collapses repeated (slot, category) pairs, keeping the first value, and
/// orders pairs by slot then category.
pub fn canonicalize_da(da: &DialogueAct) -> DialogueAct {
    let mut pairs: Vec<(SlotId, SlotValue)> = Vec::with_capacity(da.pairs.len());
    for (slot, value) in &da.pairs {
        let cat = value.category();
        if !pairs.iter().any(|(s, v)| s == slot && v.category() == cat) {
            pairs.push((*slot, value.clone()));
        }
    }
    pairs.sort_by_key(|(s, v)| (*s, v.category()));
    DialogueAct { act: da.act, pairs }
}

/// Ungated 1-hot control features of an act.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    values: Vec<f64>,
    num_acts: usize,
}

impl ControlVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_acts(&self) -> usize {
        self.num_acts
    }

    pub fn act_block(&self) -> &[f64] {
        &self.values[..self.num_acts]
    }

    pub fn slot_block(&self) -> &[f64] {
        &self.values[self.num_acts..]
    }

    pub fn act_index(&self) -> usize {
        self.act_block().iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }
}

pub fn encode_control(ont: &Ontology, da: &DialogueAct) -> ControlVector {
    let mut values = vec![0.0; ont.control_dim()];
    values[da.act.0] = 1.0;
    for (slot, value) in &da.pairs {
        values[ont.slot_bit(*slot, value.category())] = 1.0;
    }
    ControlVector { values, num_acts: ont.num_acts() }
}
