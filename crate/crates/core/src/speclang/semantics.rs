use super::automaton::Letter;
use super::formula::{Expr, Formula};

/// Finite-word semantics used as an independent oracle for the translation.
///
/// Positions past the end of the word satisfy nothing, so a word satisfies
/// `f` iff it already contains a witness for every eventuality.
pub fn word_satisfies(f: &Formula, word: &[Letter]) -> bool {
    holds(&f.root, word, 0)
}

fn holds(e: &Expr, w: &[Letter], i: usize) -> bool {
    let n = w.len();
    match e {
        Expr::True => i < n,
        Expr::False => false,
        Expr::Ap(p) => i < n && w[i] & (1 << p) != 0,
        Expr::Not(p) => i < n && w[i] & (1 << p) == 0,
        Expr::And(a, b) => holds(a, w, i) && holds(b, w, i),
        Expr::Or(a, b) => holds(a, w, i) || holds(b, w, i),
        Expr::Next(a) => holds(a, w, i + 1),
        Expr::Until(a, b) => {
            for j in i..n {
                if holds(b, w, j) {
                    return true;
                }
                if !holds(a, w, j) {
                    return false;
                }
            }
            false
        }
        Expr::Eventually(a) => (i..n).any(|j| holds(a, w, j)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speclang::parse_scltl;

    #[test]
    fn reach_avoid_words() {
        let f = parse_scltl("(!p2 U p1)", &["p1", "p2"]).unwrap();
        assert!(word_satisfies(&f, &[0b00, 0b01]));
        assert!(!word_satisfies(&f, &[0b10, 0b01]));
        assert!(!word_satisfies(&f, &[]));
    }

    #[test]
    fn empty_word_fails_eventualities() {
        let f = parse_scltl("F p1", &["p1"]).unwrap();
        assert!(!word_satisfies(&f, &[]));
        let g = parse_scltl("p1 U p2", &["p1", "p2"]).unwrap();
        assert!(!word_satisfies(&g, &[]));
    }
}
