use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::formula::{Expr, Formula};
use super::SpecError;

/// Letter = AP valuation encoded as a bitmask (bit i set ⇔ AP i true).
pub type Letter = u32;

type Obligations = BTreeSet<Expr>;

/// Nondeterministic automaton whose states are sets of pending obligations.
///
/// The state with no obligations is the unique accepting state; it loops on
/// every letter.
#[derive(Debug, Clone)]
pub struct Nfa {
    pub num_letters: usize,
    pub states: Vec<Obligations>,
    /// `delta[state][letter]` = successor states.
    pub delta: Vec<Vec<Vec<usize>>>,
    pub initial: usize,
    pub accepting: usize,
}

fn product(a: &[Obligations], b: &[Obligations]) -> Vec<Obligations> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            let mut z = x.clone();
            z.extend(y.iter().cloned());
            out.push(z);
        }
    }
    out
}

/// Ways to discharge `e` at the current position given `letter`, each as the
/// set of obligations carried to the next position.
fn alternatives(e: &Expr, letter: Letter) -> Vec<Obligations> {
    let holds = |i: usize| letter & (1 << i) != 0;
    match e {
        Expr::True => vec![Obligations::new()],
        Expr::False => vec![],
        Expr::Ap(i) => {
            if holds(*i) {
                vec![Obligations::new()]
            } else {
                vec![]
            }
        }
        Expr::Not(i) => {
            if holds(*i) {
                vec![]
            } else {
                vec![Obligations::new()]
            }
        }
        Expr::And(a, b) => product(&alternatives(a, letter), &alternatives(b, letter)),
        Expr::Or(a, b) => {
            let mut v = alternatives(a, letter);
            v.extend(alternatives(b, letter));
            v
        }
        Expr::Next(a) => vec![std::iter::once((**a).clone()).collect()],
        Expr::Until(a, b) => {
            let mut v = alternatives(b, letter);
            let keep: Obligations = std::iter::once(e.clone()).collect();
            v.extend(product(&alternatives(a, letter), &[keep]));
            v
        }
        Expr::Eventually(a) => {
            let mut v = alternatives(a, letter);
            v.push(std::iter::once(e.clone()).collect());
            v
        }
    }
}

/// Drops duplicate and subsumed obligation sets; a superset accepts a subset
/// of the words its subset accepts, so the union language is unchanged.
fn minimal_sets(mut sets: Vec<Obligations>) -> Vec<Obligations> {
    sets.sort_by_key(|s| s.len());
    let mut out: Vec<Obligations> = Vec::new();
    for s in sets {
        if !out.iter().any(|k| k.is_subset(&s)) {
            out.push(s);
        }
    }
    out
}

impl Nfa {
    pub fn from_formula(f: &Formula) -> Nfa {
        let num_letters = f.num_letters();
        let mut index: HashMap<Obligations, usize> = HashMap::new();
        let mut states: Vec<Obligations> = Vec::new();
        let mut delta: Vec<Vec<Vec<usize>>> = Vec::new();
        let mut queue = VecDeque::new();

        let mut intern = |s: Obligations, states: &mut Vec<Obligations>, queue: &mut VecDeque<usize>| -> usize {
            if let Some(&id) = index.get(&s) {
                return id;
            }
            let id = states.len();
            index.insert(s.clone(), id);
            states.push(s);
            queue.push_back(id);
            id
        };

        let accepting = intern(Obligations::new(), &mut states, &mut queue);
        let initial = intern(std::iter::once(f.root.clone()).collect(), &mut states, &mut queue);

        while let Some(id) = queue.pop_front() {
            if delta.len() <= id {
                delta.resize(id + 1, Vec::new());
            }
            let current = states[id].clone();
            let mut row = Vec::with_capacity(num_letters);
            for letter in 0..num_letters as Letter {
                let mut combos = vec![Obligations::new()];
                for e in &current {
                    combos = product(&combos, &alternatives(e, letter));
                    if combos.is_empty() {
                        break;
                    }
                }
                let mut succ: Vec<usize> = minimal_sets(combos)
                    .into_iter()
                    .map(|s| intern(s, &mut states, &mut queue))
                    .collect();
                succ.sort_unstable();
                succ.dedup();
                row.push(succ);
            }
            delta[id] = row;
        }
        delta.resize(states.len(), Vec::new());
        Nfa { num_letters, states, delta, initial, accepting }
    }

    pub fn accepts(&self, word: &[Letter]) -> bool {
        let mut current: BTreeSet<usize> = std::iter::once(self.initial).collect();
        for &a in word {
            if current.contains(&self.accepting) {
                return true;
            }
            current = current.iter().flat_map(|&s| self.delta[s][a as usize].iter().copied()).collect();
            if current.is_empty() {
                return false;
            }
        }
        current.contains(&self.accepting)
    }
}

/// Complete deterministic automaton over AP valuations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dfa {
    pub aps: Vec<String>,
    pub num_states: usize,
    /// `transitions[q][letter]`.
    pub transitions: Vec<Vec<usize>>,
    pub initial: usize,
    pub accepting: Vec<usize>,
    /// Rejecting absorbing state, when one is reachable.
    pub sink_trap: Option<usize>,
}

impl Dfa {
    pub fn num_letters(&self) -> usize {
        1 << self.aps.len()
    }

    pub fn step(&self, q: usize, letter: Letter) -> usize {
        self.transitions[q][letter as usize]
    }

    pub fn is_accepting(&self, q: usize) -> bool {
        self.accepting.contains(&q)
    }

    pub fn run(&self, word: &[Letter]) -> usize {
        word.iter().fold(self.initial, |q, &a| self.step(q, a))
    }

    /// True iff the word drives the automaton into an accepting state.
    pub fn accepts(&self, word: &[Letter]) -> bool {
        let mut q = self.initial;
        for &a in word {
            q = self.step(q, a);
            if self.is_accepting(q) {
                return true;
            }
        }
        self.is_accepting(q)
    }

    /// States from which no accepting state is reachable.
    pub fn dead_states(&self) -> Vec<bool> {
        let mut live = vec![false; self.num_states];
        for &q in &self.accepting {
            live[q] = true;
        }
        let mut changed = true;
        while changed {
            changed = false;
            for q in 0..self.num_states {
                if !live[q] && self.transitions[q].iter().any(|&t| live[t]) {
                    live[q] = true;
                    changed = true;
                }
            }
        }
        live.into_iter().map(|l| !l).collect()
    }

    /// Builds a DFA from explicit parts, checking totality and acceptance absorption.
    pub fn from_parts(
        aps: Vec<String>,
        transitions: Vec<Vec<usize>>,
        initial: usize,
        accepting: Vec<usize>,
    ) -> Result<Dfa, SpecError> {
        let num_states = transitions.len();
        let num_letters = 1usize << aps.len();
        if initial >= num_states {
            return Err(SpecError::InvalidDfa(format!("initial state {initial} out of range")));
        }
        for (q, row) in transitions.iter().enumerate() {
            if row.len() != num_letters {
                return Err(SpecError::InvalidDfa(format!("state {q} has {} letters, expected {num_letters}", row.len())));
            }
            if let Some(t) = row.iter().find(|&&t| t >= num_states) {
                return Err(SpecError::InvalidDfa(format!("state {q} targets missing state {t}")));
            }
        }
        for &q in &accepting {
            if q >= num_states {
                return Err(SpecError::InvalidDfa(format!("accepting state {q} out of range")));
            }
            if transitions[q].iter().any(|t| !accepting.contains(t)) {
                return Err(SpecError::InvalidDfa(format!("accepting state {q} is not absorbing")));
            }
        }
        let mut dfa = Dfa { aps, num_states, transitions, initial, accepting, sink_trap: None };
        dfa.sink_trap = dfa.find_trap();
        Ok(dfa)
    }

    fn find_trap(&self) -> Option<usize> {
        (0..self.num_states).find(|&q| !self.is_accepting(q) && self.transitions[q].iter().all(|&t| t == q))
    }
}

/// Subset construction from the obligation NFA. Reachable subsets only; the
/// empty subset becomes the rejecting trap when reachable.
pub fn determinize(nfa: &Nfa, aps: &[String]) -> Dfa {
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    let mut transitions: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();

    let start = vec![nfa.initial];
    index.insert(start.clone(), 0);
    subsets.push(start);
    queue.push_back(0usize);

    while let Some(id) = queue.pop_front() {
        let current = subsets[id].clone();
        let mut row = Vec::with_capacity(nfa.num_letters);
        for a in 0..nfa.num_letters {
            let mut next: Vec<usize> = current.iter().flat_map(|&s| nfa.delta[s][a].iter().copied()).collect();
            next.sort_unstable();
            next.dedup();
            let target = match index.get(&next) {
                Some(&t) => t,
                None => {
                    let t = subsets.len();
                    index.insert(next.clone(), t);
                    subsets.push(next);
                    queue.push_back(t);
                    t
                }
            };
            row.push(target);
        }
        if transitions.len() <= id {
            transitions.resize(id + 1, Vec::new());
        }
        transitions[id] = row;
    }
    transitions.resize(subsets.len(), Vec::new());
    let accepting: Vec<usize> =
        (0..subsets.len()).filter(|&i| subsets[i].contains(&nfa.accepting)).collect();
    let mut dfa = Dfa {
        aps: aps.to_vec(),
        num_states: subsets.len(),
        transitions,
        initial: 0,
        accepting,
        sink_trap: None,
    };
    dfa.sink_trap = dfa.find_trap();
    dfa
}

/// Hopcroft partition refinement followed by breadth-first renumbering from
/// the initial state (unreachable states are dropped).
pub fn minimize(dfa: &Dfa) -> Dfa {
    let n = dfa.num_states;
    let k = dfa.num_letters();

    // Inverse transitions: inv[letter][target] = sources.
    let mut inv = vec![vec![Vec::new(); n]; k];
    for q in 0..n {
        for a in 0..k {
            inv[a][dfa.transitions[q][a]].push(q);
        }
    }

    let acc: Vec<usize> = (0..n).filter(|&q| dfa.is_accepting(q)).collect();
    let rej: Vec<usize> = (0..n).filter(|&q| !dfa.is_accepting(q)).collect();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut block_of = vec![0usize; n];
    for part in [acc, rej] {
        if !part.is_empty() {
            let b = blocks.len();
            for &q in &part {
                block_of[q] = b;
            }
            blocks.push(part);
        }
    }

    let mut worklist: VecDeque<(usize, usize)> = VecDeque::new();
    let mut in_work = vec![vec![false; k]; 2 * n + 2];
    if blocks.len() == 2 {
        let smaller = if blocks[0].len() <= blocks[1].len() { 0 } else { 1 };
        for a in 0..k {
            worklist.push_back((smaller, a));
            in_work[smaller][a] = true;
        }
    }

    while let Some((splitter, a)) = worklist.pop_front() {
        in_work[splitter][a] = false;
        let mut pre = vec![false; n];
        for &t in &blocks[splitter] {
            for &s in &inv[a][t] {
                pre[s] = true;
            }
        }
        let touched: BTreeSet<usize> = (0..n).filter(|&s| pre[s]).map(|s| block_of[s]).collect();
        for b in touched {
            let (inside, outside): (Vec<usize>, Vec<usize>) = blocks[b].iter().partition(|&&s| pre[s]);
            if inside.is_empty() || outside.is_empty() {
                continue;
            }
            let nb = blocks.len();
            blocks[b] = inside;
            blocks.push(outside);
            for &s in &blocks[nb] {
                block_of[s] = nb;
            }
            for c in 0..k {
                if in_work[b][c] {
                    worklist.push_back((nb, c));
                    in_work[nb][c] = true;
                } else {
                    let pick = if blocks[b].len() <= blocks[nb].len() { b } else { nb };
                    worklist.push_back((pick, c));
                    in_work[pick][c] = true;
                }
            }
        }
    }

    // Renumber blocks in BFS order from the initial block.
    let mut order = vec![usize::MAX; blocks.len()];
    let mut queue = VecDeque::new();
    let start = block_of[dfa.initial];
    order[start] = 0;
    queue.push_back(start);
    let mut count = 1;
    let mut seq = vec![start];
    while let Some(b) = queue.pop_front() {
        let rep = blocks[b][0];
        for a in 0..k {
            let t = block_of[dfa.transitions[rep][a]];
            if order[t] == usize::MAX {
                order[t] = count;
                count += 1;
                queue.push_back(t);
                seq.push(t);
            }
        }
    }
    let transitions: Vec<Vec<usize>> = seq
        .iter()
        .map(|&b| {
            let rep = blocks[b][0];
            (0..k).map(|a| order[block_of[dfa.transitions[rep][a]]]).collect()
        })
        .collect();
    let accepting: Vec<usize> = seq
        .iter()
        .enumerate()
        .filter(|(_, &b)| dfa.is_accepting(blocks[b][0]))
        .map(|(i, _)| i)
        .collect();
    let mut out = Dfa {
        aps: dfa.aps.clone(),
        num_states: seq.len(),
        transitions,
        initial: 0,
        accepting,
        sink_trap: None,
    };
    out.sink_trap = out.find_trap();
    out
}

/// Full translation: obligation NFA, subset construction, minimization.
pub fn translate_spec(f: &Formula) -> Dfa {
    let nfa = Nfa::from_formula(f);
    minimize(&determinize(&nfa, &f.aps))
}
