//! Pure functions over logged series.

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `(mean, population std)`; `(NaN, NaN)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (mean(xs), std_pop(xs))
}

/// std / mean over the last `window` values. `None` when the mean is zero
/// relative to the values' magnitude.
pub fn coefficient_of_variation(series: &[f64], window: usize) -> Result<Option<f64>, HarnessError> {
    if window == 0 || series.len() < window {
        return Err(HarnessError::Analytics(format!(
            "window {window} needs at least that many values, got {}",
            series.len()
        )));
    }
    let tail = &series[series.len() - window..];
    let m = mean(tail);
    let scale = tail.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m.abs() <= 1e-12 * scale || m == 0.0 {
        return Ok(None);
    }
    Ok(Some(std_pop(tail) / m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub window: usize,
    pub cov_value_loss: Option<f64>,
    pub cov_advantage: Option<f64>,
}

pub fn stability_stats(value_loss: &[f64], advantage: &[f64], window: usize) -> Result<StabilityStats, HarnessError> {
    Ok(StabilityStats {
        window,
        cov_value_loss: coefficient_of_variation(value_loss, window)?,
        cov_advantage: coefficient_of_variation(advantage, window)?,
    })
}

/// Least-squares slope of `ys` against `0, 1, 2, …`. Zero for one point.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
    ls_slope_xy(&xs, ys)
}

pub fn ls_slope_xy(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ls_slope_xy(&lx, &ly)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyStats {
    pub window: usize,
    /// Mean of the last `window` epochs.
    pub final_reward: f64,
    /// Least-squares gain per epoch over the first `window` epochs.
    pub early_slope: f64,
    /// `(final − first) / epochs`
    pub learning_efficiency: f64,
    /// Mean of the whole series.
    pub auc_per_epoch: f64,
}

pub fn efficiency_stats(returns: &[f64], early_window: usize) -> Result<EfficiencyStats, HarnessError> {
    if early_window == 0 || returns.len() <= early_window {
        return Err(HarnessError::Analytics(format!(
            "efficiency window {early_window} needs a longer series than {}",
            returns.len()
        )));
    }
    let final_reward = mean(&returns[returns.len() - early_window..]);
    Ok(EfficiencyStats {
        window: early_window,
        final_reward,
        early_slope: ls_slope(&returns[..early_window]),
        learning_efficiency: (final_reward - returns[0]) / returns.len() as f64,
        auc_per_epoch: mean(returns),
    })
}

/// Per-iteration mean return of the episodes that finished in it. An
/// iteration without a finished episode repeats the previous value; the
/// leading ones take the first observed value. `None` if nothing finished.
pub fn return_series(finished: &[(usize, f64)], iterations: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; iterations];
    let mut count = vec![0usize; iterations];
    for &(it, r) in finished {
        if it < iterations {
            sum[it] += r;
            count[it] += 1;
        }
    }
    let first = (0..iterations).find(|&i| count[i] > 0)?;
    let mut out = Vec::with_capacity(iterations);
    let mut last = sum[first] / count[first] as f64;
    for i in 0..iterations {
        if count[i] > 0 {
            last = sum[i] / count[i] as f64;
        }
        out.push(last);
    }
    Some(out)
}
