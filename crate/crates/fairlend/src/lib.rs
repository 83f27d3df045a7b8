//! Measuring funding disparities in installment lending.

pub mod cox;
pub mod data;
pub mod di;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod spline;
pub mod stats;
pub mod stream;
pub mod synthetic;
pub mod threshold;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::data::{Gender, LoanRecord, PaymentStatus};

    /// Payment history: `paid` leading paid months, then a default run or
    /// unobserved tail.
    pub fn history(paid: usize, default: bool) -> [PaymentStatus; 12] {
        let mut p = [PaymentStatus::Unobserved; 12];
        for s in p.iter_mut().take(paid) {
            *s = PaymentStatus::Paid;
        }
        if default {
            for s in p.iter_mut().skip(paid) {
                *s = PaymentStatus::Defaulted;
            }
        }
        p
    }

    pub fn full_term() -> [PaymentStatus; 12] {
        [PaymentStatus::Paid; 12]
    }

    /// Minimal loan; `payments = None` means unfunded.
    pub fn loan(
        id: u64,
        gender: Gender,
        rate: f64,
        payments: Option<[PaymentStatus; 12]>,
    ) -> LoanRecord {
        LoanRecord {
            id,
            gender,
            married: false,
            age: 30.0,
            repeated: false,
            employment: 0,
            education: 0,
            past_failed: 0.0,
            past_aborted: 0.0,
            past_ontime: 0.0,
            past_late: 0.0,
            amount: 5.0,
            rate,
            app: false,
            express: false,
            province: 0,
            funded: payments.is_some(),
            payments,
        }
    }
}
