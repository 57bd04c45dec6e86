//! Pearson correlation and mean absolute error.

use crate::error::{Error, Result};

fn check_lengths(y: &[f64], yhat: &[f64], min: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(format!(
            "length mismatch: {} targets vs {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    if y.len() < min {
        return Err(Error::Contract(format!("need at least {min} values, got {}", y.len())));
    }
    Ok(())
}

/// Pearson correlation with `1/n` normalization throughout.
///
/// Zero variance in either input is a [`Error::Degenerate`] error.
pub fn pcc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 2)?;
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = yhat.iter().sum::<f64>() / n;
    let (mut cov, mut vy, mut vp) = (0.0, 0.0, 0.0);
    for (&a, &b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mp);
        cov += da * db;
        vy += da * da;
        vp += db * db;
    }
    if vy == 0.0 || vp == 0.0 {
        let which = if vy == 0.0 { "targets" } else { "predictions" };
        return Err(Error::Degenerate(format!("{which} have zero variance")));
    }
    let r = (cov / n) / ((vy / n).sqrt() * (vp / n).sqrt());
    Ok(r.clamp(-1.0, 1.0))
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 1)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}
