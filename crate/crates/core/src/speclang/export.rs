use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::automaton::Dfa;
use super::SpecError;

/// JSON form: per-state transition maps keyed by the decimal letter bitmask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfaJson {
    pub aps: Vec<String>,
    pub states: usize,
    pub q0: usize,
    pub accepting: Vec<usize>,
    pub transitions: Vec<BTreeMap<String, usize>>,
}

impl From<&Dfa> for DfaJson {
    fn from(d: &Dfa) -> Self {
        let transitions = d
            .transitions
            .iter()
            .map(|row| row.iter().enumerate().map(|(a, &t)| (a.to_string(), t)).collect())
            .collect();
        DfaJson {
            aps: d.aps.clone(),
            states: d.num_states,
            q0: d.initial,
            accepting: d.accepting.clone(),
            transitions,
        }
    }
}

impl TryFrom<DfaJson> for Dfa {
    type Error = SpecError;

    fn try_from(j: DfaJson) -> Result<Self, Self::Error> {
        let letters = 1usize << j.aps.len();
        let mut rows = Vec::with_capacity(j.transitions.len());
        for (q, map) in j.transitions.iter().enumerate() {
            let mut row = vec![usize::MAX; letters];
            for (k, &t) in map {
                let a: usize = k
                    .parse()
                    .map_err(|_| SpecError::InvalidDfa(format!("state {q}: letter key '{k}' is not a bitmask")))?;
                if a >= letters {
                    return Err(SpecError::InvalidDfa(format!("state {q}: letter {a} out of range")));
                }
                row[a] = t;
            }
            if row.contains(&usize::MAX) {
                return Err(SpecError::InvalidDfa(format!("state {q}: transition function is not total")));
            }
            rows.push(row);
        }
        if rows.len() != j.states {
            return Err(SpecError::InvalidDfa(format!("{} rows for {} states", rows.len(), j.states)));
        }
        Dfa::from_parts(j.aps, rows, j.q0, j.accepting)
    }
}

pub fn to_json(d: &Dfa) -> String {
    serde_json::to_string_pretty(&DfaJson::from(d)).expect("DFA json")
}

pub fn from_json(text: &str) -> Result<Dfa, SpecError> {
    let j: DfaJson = serde_json::from_str(text).map_err(|e| SpecError::InvalidDfa(e.to_string()))?;
    Dfa::try_from(j)
}

fn letter_label(aps: &[String], a: usize) -> String {
    let on: Vec<&str> = aps.iter().enumerate().filter(|(i, _)| a & (1 << i) != 0).map(|(_, s)| s.as_str()).collect();
    format!("{{{}}}", on.join(","))
}

/// Graphviz text; parallel edges are merged into one edge with all letters.
pub fn to_dot(d: &Dfa) -> String {
    let mut s = String::from("digraph dfa {\n  rankdir=LR;\n  init [shape=point];\n");
    for q in 0..d.num_states {
        let shape = if d.is_accepting(q) { "doublecircle" } else { "circle" };
        let _ = writeln!(s, "  q{q} [shape={shape}];");
    }
    let _ = writeln!(s, "  init -> q{};", d.initial);
    for q in 0..d.num_states {
        let mut by_target: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (a, &t) in d.transitions[q].iter().enumerate() {
            by_target.entry(t).or_default().push(letter_label(&d.aps, a));
        }
        for (t, labels) in by_target {
            let _ = writeln!(s, "  q{q} -> q{t} [label=\"{}\"];", labels.join(" "));
        }
    }
    s.push_str("}\n");
    s
}
