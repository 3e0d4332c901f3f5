//! Closed symbolic vocabulary shared by trajectories, agents and the policy.
//!
//! Control tags and system markers occupy fixed ids at the start of every
//! vocabulary, followed by action-type names, answer tokens and payload
//! literals (one per task feature).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Token(pub u32);

impl Token {
    pub const ACTION_OPEN: Token = Token(0);
    pub const ACTION_CLOSE: Token = Token(1);
    pub const ANS_OPEN: Token = Token(2);
    pub const ANS_CLOSE: Token = Token(3);
    /// System marker for a successful agent call.
    pub const AGENT_OK: Token = Token(4);
    /// System marker for a failed agent call.
    pub const AGENT_FAIL: Token = Token(5);
    /// Filler an agent emits outside its answer span.
    pub const NOISE: Token = Token(6);
    /// Answer returned by an agent that failed; never a ground truth.
    pub const WRONG: Token = Token(7);

    pub fn is_control(self) -> bool {
        self.0 <= Self::ANS_CLOSE.0
    }
}

const RESERVED: [&str; 8] = [
    "<action>",
    "</action>",
    "<ans>",
    "</ans>",
    "agent_ok",
    "agent_fail",
    "noise",
    "wrong",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("symbol `{0}` appears more than once in the vocabulary")]
    DuplicateSymbol(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("token id {0} is outside the vocabulary")]
    OutOfRange(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: BTreeMap<String, Token>,
    action_types: Vec<Token>,
    answers: Vec<Token>,
    payloads: Vec<Token>,
}

impl Vocabulary {
    /// Builds the vocabulary. `payload_literals` feature markers named `f0`,
    /// `f1`, ... are appended after the answers.
    pub fn new<A, B>(
        action_types: A,
        answers: B,
        payload_literals: usize,
    ) -> Result<Self, VocabError>
    where
        A: IntoIterator,
        A::Item: Into<String>,
        B: IntoIterator,
        B::Item: Into<String>,
    {
        let mut vocab = Vocabulary {
            symbols: Vec::new(),
            index: BTreeMap::new(),
            action_types: Vec::new(),
            answers: Vec::new(),
            payloads: Vec::new(),
        };
        for name in RESERVED {
            vocab.push(name.to_string())?;
        }
        for name in action_types {
            let t = vocab.push(name.into())?;
            vocab.action_types.push(t);
        }
        for name in answers {
            let t = vocab.push(name.into())?;
            vocab.answers.push(t);
        }
        for i in 0..payload_literals {
            let t = vocab.push(format!("f{i}"))?;
            vocab.payloads.push(t);
        }
        Ok(vocab)
    }

    fn push(&mut self, name: String) -> Result<Token, VocabError> {
        if self.index.contains_key(&name) {
            return Err(VocabError::DuplicateSymbol(name));
        }
        let t = Token(self.symbols.len() as u32);
        self.index.insert(name.clone(), t);
        self.symbols.push(name);
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn token(&self, name: &str) -> Result<Token, VocabError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| VocabError::UnknownSymbol(name.to_string()))
    }

    pub fn name(&self, token: Token) -> Result<&str, VocabError> {
        self.symbols
            .get(token.0 as usize)
            .map(String::as_str)
            .ok_or(VocabError::OutOfRange(token.0))
    }

    pub fn contains(&self, token: Token) -> bool {
        (token.0 as usize) < self.symbols.len()
    }

    pub fn is_action_type(&self, token: Token) -> bool {
        self.action_types.contains(&token)
    }

    pub fn is_answer(&self, token: Token) -> bool {
        self.answers.contains(&token)
    }

    pub fn action_types(&self) -> &[Token] {
        &self.action_types
    }

    pub fn answers(&self) -> &[Token] {
        &self.answers
    }

    pub fn payload(&self, feature: usize) -> Option<Token> {
        self.payloads.get(feature).copied()
    }

    pub fn names(&self, tokens: &[Token]) -> Result<Vec<String>, VocabError> {
        tokens
            .iter()
            .map(|&t| self.name(t).map(str::to_string))
            .collect()
    }

    pub fn tokens<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<Token>, VocabError> {
        names.iter().map(|n| self.token(n.as_ref())).collect()
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}
