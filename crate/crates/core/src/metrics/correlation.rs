use crate::error::{Error, Result};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimMismatch(format!(
            "{} xs vs {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 pairs, got {}",
            xs.len()
        )));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Point-biserial correlation between a dichotomous and a continuous
/// variable: `(M1 - M0) / s_n * sqrt(p q)` with `s_n` the population
/// standard deviation of `ys`.
pub fn point_biserial(bins: &[bool], ys: &[f64]) -> Result<f64> {
    if bins.len() != ys.len() {
        return Err(Error::DimMismatch(format!(
            "{} bins vs {} ys",
            bins.len(),
            ys.len()
        )));
    }
    let n = ys.len();
    let n1 = bins.iter().filter(|&&b| b).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::UndefinedCorrelation("only one class present".into()));
    }
    let (mut s1, mut s0) = (0.0, 0.0);
    for (&b, &y) in bins.iter().zip(ys) {
        if b {
            s1 += y;
        } else {
            s0 += y;
        }
    }
    let (m1, m0) = (s1 / n1 as f64, s0 / n0 as f64);
    let m = mean(ys);
    let var = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Err(Error::UndefinedCorrelation("constant continuous variable".into()));
    }
    let (p, q) = (n1 as f64 / n as f64, n0 as f64 / n as f64);
    Ok(((m1 - m0) / var.sqrt() * (p * q).sqrt()).clamp(-1.0, 1.0))
}
