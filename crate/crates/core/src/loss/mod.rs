//! Alignment losses in log space with exact gradients, plus
//! exhaustive-enumeration oracles sized for testing.

mod attention;
mod ctc;
mod transducer;

pub use attention::{attention_loss, attention_loss_on_tape, AttentionLossResult};
pub use ctc::{ctc_lattice, ctc_loss, ctc_loss_on_tape, ctc_loss_oracle, CtcLattice, CtcLossResult};
pub use transducer::{
    transducer_lattice, transducer_loss, transducer_loss_on_tape, transducer_loss_oracle,
    TransducerLattice, TransducerLossResult,
};

use crate::vocab::{TokenSequence, BLANK_ID};

/// An alignment path over vocab plus blank (CTC framing: one id per frame).
pub type AlignmentPath = Vec<usize>;

/// The CTC collapse mapping: merge runs of equal symbols, then drop blanks.
pub fn collapse(path: &[usize]) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &id in path {
        if Some(id) != prev && id != BLANK_ID {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // vocab for tests: 0 = blank, 1 = 'a', 2 = 'b'
    const A: usize = 1;
    const B: usize = 2;

    #[test]
    fn collapse_drops_blanks_and_repeats() {
        assert_eq!(collapse(&[A, A, BLANK_ID, B]), vec![A, B]);
    }

    #[test]
    fn collapse_of_all_blanks_is_empty() {
        assert_eq!(collapse(&[BLANK_ID; 5]), Vec::<usize>::new());
    }

    #[test]
    fn blank_separates_repeats() {
        assert_eq!(collapse(&[A, BLANK_ID, A]), vec![A, A]);
    }
}
