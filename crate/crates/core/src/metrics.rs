//! Change-map evaluation: FP, FN, OE, PCC and Cohen's kappa.
//!
//! "Positive" is the changed class, so a false positive is a false alarm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub oe: u64,
    pub pcc: f64,
    pub kc: f64,
    /// Chance agreement was 1, so kappa fell back to the degenerate rule.
    pub kc_degenerate: bool,
}

impl MetricReport {
    /// Builds a report from confusion counts and checks its invariants.
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Result<Self> {
        let total = tp + tn + fp + fn_;
        if total == 0 {
            return Err(Error::data("cannot evaluate an empty change map"));
        }
        let t = total as f64;
        let pcc = (tp + tn) as f64 / t;
        let pe = ((tp + fp) as f64 * (tp + fn_) as f64 + (tn + fn_) as f64 * (tn + fp) as f64) / (t * t);
        let (kc, kc_degenerate) = if pe >= 1.0 {
            (if fp + fn_ == 0 { 1.0 } else { 0.0 }, true)
        } else if fp + fn_ == 0 {
            // exact agreement; avoids 0.999.. from rounding
            (1.0, false)
        } else {
            ((pcc - pe) / (1.0 - pe), false)
        };
        let report = MetricReport { tp, tn, fp, fn_, oe: fp + fn_, pcc, kc, kc_degenerate };
        report.check()?;
        Ok(report)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Asserts OE = FP + FN and the value ranges.
    pub fn check(&self) -> Result<()> {
        if self.oe != self.fp + self.fn_ {
            return Err(Error::Numeric(format!(
                "overall error {} != FP {} + FN {}",
                self.oe, self.fp, self.fn_
            )));
        }
        if !(0.0..=1.0).contains(&self.pcc) || !(-1.0..=1.0).contains(&self.kc) {
            return Err(Error::Numeric(format!("metric out of range: pcc {} kc {}", self.pcc, self.kc)));
        }
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "fp,fn,oe,pcc,kc,tp,tn";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.6},{:.6},{},{}", self.fp, self.fn_, self.oe, self.pcc, self.kc, self.tp, self.tn)
    }

    /// Human-readable block in FP, FN, OE, PCC%, KC% order.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8} {:>8} {:>8} {:>8.2} {:>8.2}\n",
            "FP",
            "FN",
            "OE",
            "PCC(%)",
            "KC(%)",
            self.fp,
            self.fn_,
            self.oe,
            self.pcc * 100.0,
            self.kc * 100.0
        );
        if self.kc_degenerate {
            s.push_str("note: single-class maps, kappa uses the degenerate convention\n");
        }
        s
    }
}

/// Compares a predicted change map to ground truth.
pub fn evaluate(pred: &Mask, truth: &Mask) -> Result<MetricReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::data(format!(
            "prediction {:?} and ground truth {:?} differ in extent",
            pred.dims(),
            truth.dims()
        )));
    }
    let mut counts = [0u64; 4]; // indexed by pred * 2 + truth
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        if p > 1 || t > 1 {
            return Err(Error::data(format!("non-binary values {p}/{t} in change map")));
        }
        counts[(p * 2 + t) as usize] += 1;
    }
    let [tn, fn_, fp, tp] = counts;
    MetricReport::from_counts(tp, tn, fp, fn_)
}
