//! Evaluation metrics: classification error, foreground/background Dice,
//! pooled pixel confusion and predicted region sizes. All percentages are in
//! `[0, 100]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::BinaryMask;

/// `100 · #misclassified / #samples`.
pub fn classification_error(preds: &[usize], truths: &[usize]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    let wrong = preds.iter().zip(truths).filter(|(p, t)| p != t).count();
    Ok(100.0 * wrong as f64 / preds.len() as f64)
}

fn dice(inter: u64, a: u64, b: u64) -> f64 {
    if a + b == 0 {
        100.0
    } else {
        100.0 * 2.0 * inter as f64 / (a + b) as f64
    }
}

fn check_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// `(F1⁺, F1⁻)` of one mask pair; an empty prediction on an empty truth
/// scores 100.
pub fn f1_scores(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    let c = Confusion::of(pred, gt)?;
    Ok((c.f1_plus(), c.f1_minus()))
}

/// Pixel counts; rows are truth (fg, bg), columns prediction (fg, bg).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
        check_pair(pred, gt)?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            match (g, p) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn as_matrix(&self) -> [[u64; 2]; 2] {
        [[self.tp, self.fn_], [self.fp, self.tn]]
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn f1_plus(&self) -> f64 {
        dice(self.tp, self.tp + self.fn_, self.tp + self.fp)
    }

    /// `2TN / (2TN + FN + FP)`.
    pub fn f1_minus(&self) -> f64 {
        dice(self.tn, self.tn + self.fp, self.tn + self.fn_)
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.tn += o.tn;
    }

    pub fn to_csv(&self) -> String {
        format!(
            "truth,pred_fg,pred_bg\nfg,{},{}\nbg,{},{}\n",
            self.tp, self.fn_, self.fp, self.tn
        )
    }
}

fn check_lists(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted masks for {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Confusion pooled over every pixel of every sample.
pub fn pixel_confusion(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Confusion> {
    check_lists(pred, gt)?;
    let mut total = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        total.add(&Confusion::of(p, g)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRecord {
    pub true_fraction: f64,
    pub pred_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub records: Vec<SizeRecord>,
    pub mean_abs_gap: f64,
    pub mean_pred_fraction: f64,
}

impl SizeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,true_fraction,pred_fraction\n");
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", r.true_fraction, r.pred_fraction);
        }
        s
    }
}

/// Foreground fractions per sample, normalized by the pixel count.
pub fn size_report(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<SizeReport> {
    check_lists(pred, gt)?;
    let mut records = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        check_pair(p, g)?;
        records.push(SizeRecord {
            true_fraction: g.fraction(),
            pred_fraction: p.fraction(),
        });
    }
    let n = records.len().max(1) as f64;
    Ok(SizeReport {
        mean_abs_gap: records
            .iter()
            .map(|r| (r.pred_fraction - r.true_fraction).abs())
            .sum::<f64>()
            / n,
        mean_pred_fraction: records.iter().map(|r| r.pred_fraction).sum::<f64>() / n,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cl_error: f64,
    pub f1_plus: f64,
    pub f1_minus: f64,
    pub confusion: Confusion,
    pub sizes: SizeReport,
}

impl MetricsReport {
    /// Scores a split from predicted labels and binarized masks.
    pub fn compute(
        preds: &[usize],
        truths: &[usize],
        pred_masks: &[BinaryMask],
        gt_masks: &[BinaryMask],
    ) -> Result<MetricsReport> {
        let confusion = pixel_confusion(pred_masks, gt_masks)?;
        Ok(MetricsReport {
            cl_error: classification_error(preds, truths)?,
            f1_plus: confusion.f1_plus(),
            f1_minus: confusion.f1_minus(),
            confusion,
            sizes: size_report(pred_masks, gt_masks)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}
