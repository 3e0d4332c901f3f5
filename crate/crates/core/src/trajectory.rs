//! Episode token streams with source attribution and loss masks.
//!
//! Core segments carry the decision-maker's own tokens and are the only ones
//! that contribute to the loss. Agent segments hold the filtered informative
//! span of an agent response; system segments hold orchestrator markers.

use serde::{Deserialize, Serialize};

use crate::vocab::{Token, VocabError, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", content = "card_id", rename_all = "snake_case")]
pub enum Source {
    Core,
    Agent(String),
    System,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    tokens: Vec<Token>,
    source: Source,
}

impl Segment {
    pub fn new(source: Source, tokens: Vec<Token>) -> Self {
        Segment { tokens, source }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    /// Only core segments are included in the loss.
    pub fn loss_included(&self) -> bool {
        matches!(self.source, Source::Core)
    }

    pub fn is_agent(&self) -> bool {
        matches!(self.source, Source::Agent(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Terminal {
    #[default]
    Open,
    Answered(Token),
    Truncated,
    Failed(FailureKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Control tags out of order, nested, unbalanced or misplaced.
    IndicatorDisorder,
    NoAgentForAction,
    MalformedAgentResponse,
    /// The routed agent could not be invoked by the environment.
    InvocationError,
    /// A final answer to a delegation task that no successful agent call
    /// backed.
    UngroundedAnswer,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::IndicatorDisorder => "indicator_disorder",
            FailureKind::NoAgentForAction => "no_agent_for_action",
            FailureKind::MalformedAgentResponse => "malformed_agent_response",
            FailureKind::InvocationError => "invocation_error",
            FailureKind::UngroundedAnswer => "ungrounded_answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureReport {
    pub kind: FailureKind,
    /// Token position (over the whole trajectory) where the failure was
    /// detected, when it is positional.
    pub position: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    WellFormed,
    Failure(FailureReport),
}

impl Validation {
    pub fn is_well_formed(&self) -> bool {
        matches!(self, Validation::WellFormed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionInvocation {
    pub action_type: String,
    pub goal_tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("episode is closed")]
    EpisodeClosed,
    #[error("malformed agent response: {0}")]
    MalformedAgentResponse(&'static str),
    #[error("segment is not a single action invocation")]
    NotAnAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trajectory {
    segments: Vec<Segment>,
    terminal: Terminal,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn terminal(&self) -> &Terminal {
        &self.terminal
    }

    pub fn is_open(&self) -> bool {
        self.terminal == Terminal::Open
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }

    fn ensure_open(&self) -> Result<(), TrajectoryError> {
        if self.is_open() {
            Ok(())
        } else {
            Err(TrajectoryError::EpisodeClosed)
        }
    }

    /// Appends a loss-included core segment. Empty token lists are ignored.
    pub fn append_core(&mut self, tokens: Vec<Token>) -> Result<(), TrajectoryError> {
        self.ensure_open()?;
        if !tokens.is_empty() {
            self.segments.push(Segment::new(Source::Core, tokens));
        }
        Ok(())
    }

    pub fn append_system(&mut self, tokens: Vec<Token>) -> Result<(), TrajectoryError> {
        self.ensure_open()?;
        if !tokens.is_empty() {
            self.segments.push(Segment::new(Source::System, tokens));
        }
        Ok(())
    }

    /// Keeps only the tokens strictly inside the single `<ans>...</ans>` span
    /// of `raw` and appends them as a masked agent segment.
    pub fn insert_agent_response(
        &mut self,
        card_id: &str,
        raw: &[Token],
    ) -> Result<(), TrajectoryError> {
        self.ensure_open()?;
        let span = informative_span(raw)?;
        self.segments
            .push(Segment::new(Source::Agent(card_id.to_string()), span.to_vec()));
        Ok(())
    }

    /// Closes the episode. Closing an already closed trajectory fails.
    pub fn close(&mut self, terminal: Terminal) -> Result<(), TrajectoryError> {
        self.ensure_open()?;
        self.terminal = terminal;
        Ok(())
    }

    /// One flag per token in segment order; true exactly for core tokens.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.loss_included(), s.tokens.len()))
            .collect()
    }

    /// Rewrites agent spans in place; `f` gets the card id and the tokens.
    /// Core and system segments are untouched.
    pub fn map_agent_tokens(&mut self, mut f: impl FnMut(&str, &mut Vec<Token>)) {
        for seg in &mut self.segments {
            if let Source::Agent(card) = &seg.source {
                f(card, &mut seg.tokens);
            }
        }
    }

    /// Structural check of control tags in core segments.
    pub fn validate(&self, vocab: &Vocabulary) -> Validation {
        let mut offset = 0;
        for seg in &self.segments {
            if seg.loss_included() {
                if let Err(report) = check_core_segment(&seg.tokens, offset, vocab) {
                    return Validation::Failure(report);
                }
            }
            offset += seg.tokens.len();
        }
        Validation::WellFormed
    }
}

fn disorder(position: usize, detail: impl Into<String>) -> FailureReport {
    FailureReport {
        kind: FailureKind::IndicatorDisorder,
        position: Some(position),
        detail: detail.into(),
    }
}

fn check_core_segment(
    tokens: &[Token],
    offset: usize,
    vocab: &Vocabulary,
) -> Result<(), FailureReport> {
    let mut open_at: Option<usize> = None;
    for (i, &t) in tokens.iter().enumerate() {
        let pos = offset + i;
        match t {
            Token::ACTION_OPEN => {
                if open_at.is_some() {
                    return Err(disorder(pos, "nested <action>"));
                }
                open_at = Some(i);
            }
            Token::ACTION_CLOSE => {
                let Some(start) = open_at.take() else {
                    return Err(disorder(pos, "</action> without matching <action>"));
                };
                match tokens.get(start + 1) {
                    Some(&first) if first != Token::ACTION_CLOSE && vocab.is_action_type(first) => {}
                    _ => {
                        return Err(disorder(
                            offset + start,
                            "action span does not start with a registered action type",
                        ))
                    }
                }
            }
            Token::ANS_OPEN | Token::ANS_CLOSE => {
                return Err(disorder(pos, "answer delimiter in core segment"));
            }
            _ => {}
        }
    }
    match open_at {
        Some(start) => Err(disorder(offset + start, "unclosed <action>")),
        None => Ok(()),
    }
}

fn informative_span(raw: &[Token]) -> Result<&[Token], TrajectoryError> {
    let opens: Vec<usize> = positions(raw, Token::ANS_OPEN);
    let closes: Vec<usize> = positions(raw, Token::ANS_CLOSE);
    match (opens.as_slice(), closes.as_slice()) {
        ([open], [close]) if open < close => {
            let span = &raw[open + 1..*close];
            if span.is_empty() {
                Err(TrajectoryError::MalformedAgentResponse("empty answer span"))
            } else {
                Ok(span)
            }
        }
        ([open], [close]) if open > close => Err(TrajectoryError::MalformedAgentResponse(
            "</ans> precedes <ans>",
        )),
        ([], []) => Err(TrajectoryError::MalformedAgentResponse("no answer span")),
        _ => Err(TrajectoryError::MalformedAgentResponse(
            "expected exactly one answer span",
        )),
    }
}

fn positions(raw: &[Token], needle: Token) -> Vec<usize> {
    raw.iter()
        .enumerate()
        .filter(|(_, &t)| t == needle)
        .map(|(i, _)| i)
        .collect()
}

/// Reads a single action span `<action> type goal... </action>` from a core
/// segment.
pub fn parse_action(segment: &Segment, vocab: &Vocabulary) -> Result<ActionInvocation, TrajectoryError> {
    if !segment.loss_included() {
        return Err(TrajectoryError::NotAnAction);
    }
    let tokens = segment.tokens();
    let interior = match tokens {
        [Token::ACTION_OPEN, inner @ .., Token::ACTION_CLOSE] => inner,
        _ => return Err(TrajectoryError::NotAnAction),
    };
    if interior.iter().any(|t| t.is_control()) {
        return Err(TrajectoryError::NotAnAction);
    }
    let (&first, goal) = interior.split_first().ok_or(TrajectoryError::NotAnAction)?;
    if !vocab.is_action_type(first) {
        return Err(TrajectoryError::NotAnAction);
    }
    let action_type = vocab
        .name(first)
        .map_err(|_| TrajectoryError::NotAnAction)?
        .to_string();
    Ok(ActionInvocation {
        action_type,
        goal_tokens: goal.to_vec(),
    })
}

/// One JSON line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLogLine {
    pub episode_id: String,
    pub segments: Vec<SegmentRecord>,
    pub terminal: TerminalRecord,
    pub reward_vector: crate::rewards::RewardVector,
    pub scalar_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub card_id: Option<String>,
    pub tokens: Vec<String>,
    pub loss_included: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalRecord {
    Open,
    Answered { token: String },
    Truncated,
    Failed { reason: FailureKind },
}

impl Trajectory {
    pub fn segment_records(&self, vocab: &Vocabulary) -> Result<Vec<SegmentRecord>, VocabError> {
        self.segments
            .iter()
            .map(|s| {
                let (source, card_id) = match &s.source {
                    Source::Core => ("core", None),
                    Source::Agent(id) => ("agent", Some(id.clone())),
                    Source::System => ("system", None),
                };
                Ok(SegmentRecord {
                    source: source.to_string(),
                    card_id,
                    tokens: vocab.names(&s.tokens)?,
                    loss_included: s.loss_included(),
                })
            })
            .collect()
    }

    pub fn terminal_record(&self, vocab: &Vocabulary) -> Result<TerminalRecord, VocabError> {
        Ok(match &self.terminal {
            Terminal::Open => TerminalRecord::Open,
            Terminal::Answered(t) => TerminalRecord::Answered {
                token: vocab.name(*t)?.to_string(),
            },
            Terminal::Truncated => TerminalRecord::Truncated,
            Terminal::Failed(kind) => TerminalRecord::Failed { reason: *kind },
        })
    }
}
