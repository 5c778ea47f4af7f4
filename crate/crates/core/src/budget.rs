//! Cumulative Backward Passes: declared budgets, i.i.d. epoch equivalence,
//! parity checks and the runtime ledger of examples entering backward.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a training minibatch is made of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `b = b_s`
    Stream,
    /// `b = b_r`
    Replay,
    /// `b = b_s + b_r`
    StreamPlusReplay,
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Composition::Stream => "b=b_s",
            Composition::Replay => "b=b_r",
            Composition::StreamPlusReplay => "b=b_s+b_r",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Views per sample entering backward.
    pub n_v: u64,
    /// Training minibatch size.
    pub b: u64,
    pub b_s: u64,
    pub b_r: u64,
    pub n_p: u64,
    /// Training-split size.
    pub n: u64,
    pub composition: Composition,
}

impl BudgetSpec {
    /// Spec whose `b` follows from the composition.
    pub fn composed(
        n_v: u64,
        b_s: u64,
        b_r: u64,
        n_p: u64,
        n: u64,
        composition: Composition,
    ) -> Result<Self> {
        let b = match composition {
            Composition::Stream => b_s,
            Composition::Replay => b_r,
            Composition::StreamPlusReplay => b_s + b_r,
        };
        let s = Self {
            n_v,
            b,
            b_s,
            b_r,
            n_p,
            n,
            composition,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.n_v, self.b, self.b_s, self.n_p, self.n].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "budget fields must be positive: {self:?}"
            )));
        }
        let expected = match self.composition {
            Composition::Stream => self.b_s,
            Composition::Replay => self.b_r,
            Composition::StreamPlusReplay => self.b_s + self.b_r,
        };
        if self.b != expected {
            return Err(Error::InvalidArgument(format!(
                "b = {} does not match composition {} (expected {expected})",
                self.b, self.composition
            )));
        }
        Ok(())
    }

    /// `n_v × b`: the backward examples of one training step.
    pub fn granule(&self) -> u64 {
        self.n_v * self.b
    }

    /// True when `b_s` divides `N`, so the declared budget is met exactly.
    pub fn is_exact(&self) -> bool {
        self.n.is_multiple_of(self.b_s)
    }
}

/// `n_v × n_p × N/b_s × b`, floored when `b_s` does not divide `N`.
pub fn cbp(spec: &BudgetSpec) -> u64 {
    let num = u128::from(spec.n_v) * u128::from(spec.n_p) * u128::from(spec.n) * u128::from(spec.b);
    (num / u128::from(spec.b_s)) as u64
}

/// Training steps `n_p × ⌈N/b_s⌉` of a stream run (the final short
/// minibatch is kept).
pub fn n_steps(spec: &BudgetSpec) -> u64 {
    spec.n_p * spec.n.div_ceil(spec.b_s)
}

/// `⌈n_p × b / b_s⌉`.
pub fn iid_epochs(spec: &BudgetSpec) -> u64 {
    (spec.n_p * spec.b).div_ceil(spec.b_s)
}

/// Backward examples of `iid_epochs` full passes over the training split,
/// minus the declared budget; zero exactly when `n_p·b/b_s` is integral.
pub fn iid_slack(spec: &BudgetSpec) -> u64 {
    let full = u128::from(iid_epochs(spec)) * u128::from(spec.n) * u128::from(spec.n_v);
    (full - u128::from(cbp(spec))) as u64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityEntry {
    pub label: String,
    pub cbp: u64,
    pub composition: Composition,
    pub b: u64,
    pub n_p: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityReport {
    pub cbp: u64,
    pub entries: Vec<ParityEntry>,
}

/// Passes iff all labeled specs declare the same CBP.
pub fn assert_parity(specs: &[(String, BudgetSpec)]) -> Result<ParityReport> {
    if specs.len() < 2 {
        return Err(Error::InvalidArgument(
            "parity needs at least two specs".into(),
        ));
    }
    let entries: Vec<ParityEntry> = specs
        .iter()
        .map(|(label, s)| ParityEntry {
            label: label.clone(),
            cbp: cbp(s),
            composition: s.composition,
            b: s.b,
            n_p: s.n_p,
        })
        .collect();
    let reference = entries[0].cbp;
    if entries.iter().any(|e| e.cbp != reference) {
        let listing: Vec<String> = entries
            .iter()
            .map(|e| {
                format!(
                    "{}: cbp={} ({}, b={}, n_p={})",
                    e.label, e.cbp, e.composition, e.b, e.n_p
                )
            })
            .collect();
        return Err(Error::Parity(listing.join("; ")));
    }
    Ok(ParityReport {
        cbp: reference,
        entries,
    })
}

/// Running count of examples entering backward.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BudgetLedger {
    backward_examples: u64,
    backward_calls: u64,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(backward_examples: u64, backward_calls: u64) -> Self {
        Self {
            backward_examples,
            backward_calls,
        }
    }

    /// Counts one backward call over `rows` samples with `n_v` views each.
    pub fn record(&mut self, n_v: u64, rows: u64) {
        self.backward_examples += n_v * rows;
        self.backward_calls += 1;
    }

    pub fn backward_examples(&self) -> u64 {
        self.backward_examples
    }

    pub fn backward_calls(&self) -> u64 {
        self.backward_calls
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LedgerReport {
    pub counted: u64,
    pub declared: u64,
    pub tolerance: u64,
}

/// Compares a finished run's ledger with its declared CBP: exact equality
/// when `b_s | N`, otherwise within one granule `n_v × b`.
pub fn ledger_check(ledger: &BudgetLedger, spec: &BudgetSpec) -> Result<LedgerReport> {
    let tolerance = if spec.is_exact() { 0 } else { spec.granule() };
    ledger_check_within(ledger, cbp(spec), tolerance)
}

pub fn ledger_check_within(
    ledger: &BudgetLedger,
    declared: u64,
    tolerance: u64,
) -> Result<LedgerReport> {
    let counted = ledger.backward_examples();
    if counted > declared + tolerance {
        return Err(Error::BudgetBreach {
            counted,
            declared,
            tolerance,
        });
    }
    if counted + tolerance < declared {
        return Err(Error::BudgetShortfall {
            counted,
            declared,
            tolerance,
        });
    }
    Ok(LedgerReport {
        counted,
        declared,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_p: u64, b_s: u64, b_r: u64, n: u64, c: Composition) -> BudgetSpec {
        BudgetSpec::composed(2, b_s, b_r, n_p, n, c).unwrap()
    }

    #[test]
    fn published_budgets() {
        assert_eq!(
            cbp(&spec(3, 10, 128, 45_000, Composition::StreamPlusReplay)),
            3_726_000
        );
        assert_eq!(
            cbp(&spec(1, 10, 20, 45_000, Composition::StreamPlusReplay)),
            270_000
        );
        assert_eq!(cbp(&spec(3, 10, 0, 45_000, Composition::Stream)), 270_000);
    }

    #[test]
    fn iid_epoch_counts() {
        assert_eq!(
            iid_epochs(&spec(3, 10, 128, 45_000, Composition::StreamPlusReplay)),
            42
        );
        assert_eq!(
            iid_epochs(&spec(1, 10, 20, 45_000, Composition::StreamPlusReplay)),
            3
        );
        assert_eq!(iid_epochs(&spec(3, 10, 0, 45_000, Composition::Stream)), 3);
    }

    #[test]
    fn iid_slack_is_zero_only_when_integral() {
        assert_eq!(iid_slack(&spec(3, 10, 0, 1000, Composition::Stream)), 0);
        let s = spec(3, 10, 128, 1000, Composition::StreamPlusReplay);
        assert_eq!(iid_slack(&s), 42 * 1000 * 2 - cbp(&s));
        assert!(iid_slack(&s) > 0);
    }

    #[test]
    fn parity() {
        let low_a = (
            "er".to_string(),
            spec(1, 10, 20, 45_000, Composition::StreamPlusReplay),
        );
        let low_b = (
            "finetune".to_string(),
            spec(3, 10, 0, 45_000, Composition::Stream),
        );
        let high = (
            "cla_e".to_string(),
            spec(3, 10, 128, 45_000, Composition::StreamPlusReplay),
        );
        assert_eq!(assert_parity(&[low_a.clone(), low_b]).unwrap().cbp, 270_000);
        let err = assert_parity(&[high.clone(), low_a]).unwrap_err();
        assert!(err.to_string().contains("3726000") && err.to_string().contains("270000"));
        assert!(assert_parity(&[high.clone(), high.clone()]).is_ok());
        assert!(assert_parity(&[high]).is_err());
    }

    #[test]
    fn composition_must_match_b() {
        let mut s = spec(3, 10, 128, 100, Composition::StreamPlusReplay);
        s.b = 10;
        assert!(s.validate().is_err());
    }

    #[test]
    fn ledger_exact_and_breach() {
        let s = spec(3, 10, 0, 100, Composition::Stream);
        let mut l = BudgetLedger::new();
        for _ in 0..30 {
            l.record(2, 10);
        }
        assert_eq!(ledger_check(&l, &s).unwrap().counted, 600);
        l.record(2, 10);
        assert!(matches!(
            ledger_check(&l, &s),
            Err(Error::BudgetBreach { .. })
        ));
        let short = BudgetLedger::from_counts(580, 29);
        assert!(matches!(
            ledger_check(&short, &s),
            Err(Error::BudgetShortfall { .. })
        ));
    }
}
