//! scLTL front end: parsing, translation to complete DFAs, and a finite-word
//! semantics oracle.

mod automaton;
pub mod export;
mod formula;
mod semantics;

pub use automaton::{determinize, minimize, translate_spec, Dfa, Letter, Nfa};
pub use formula::{parse_scltl, Expr, Formula};
pub use semantics::word_satisfies;

/// Letters are enumerated explicitly per DFA state, so the AP count is capped.
pub const MAX_APS: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("syntax error at offset {position}: found {found}, expected one of {}", expected.join(", "))]
    Syntax { position: usize, found: String, expected: Vec<String> },
    #[error("formula is not syntactically co-safe: {0}")]
    NotCosafe(String),
    #[error("unknown atomic proposition '{name}' at offset {position}")]
    UnknownPropositionAt { name: String, position: usize },
    #[error("unknown atomic proposition {0}")]
    UnknownProposition(String),
    #[error("{0} atomic propositions exceed the supported maximum")]
    TooManyPropositions(usize),
    #[error("invalid automaton: {0}")]
    InvalidDfa(String),
}
