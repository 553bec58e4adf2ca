//! Forecast quality metrics: MAE, RMSE and MAPE, overall and at selected
//! horizons, plus the evaluation-report CSV writer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Targets with magnitude below this are excluded from MAPE (a vanishing
/// denominator says nothing about forecast quality).
pub const MAPE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Mean absolute percentage error ×100. NaN when every target in scope
    /// sits below [`MAPE_EPS`].
    pub mape_percent: f64,
}

/// Metrics at each requested horizon plus the average over all horizons.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub per_horizon: Vec<(usize, HorizonMetrics)>,
    pub overall: HorizonMetrics,
}

fn accumulate(
    pred: &Tensor<f64>,
    target: &Tensor<f64>,
    mask: Option<&Tensor<f64>>,
    horizon: Option<usize>,
) -> Result<HorizonMetrics> {
    let s = pred.shape();
    let (w_n, t_out, m_n) = (s[0], s[1], s[2]);
    let hs = match horizon {
        Some(h) => h..h + 1,
        None => 0..t_out,
    };
    let (mut n, mut abs_sum, mut sq_sum) = (0u64, 0.0f64, 0.0f64);
    let (mut mape_n, mut mape_sum) = (0u64, 0.0f64);
    for w in 0..w_n {
        for h in hs.clone() {
            for m in 0..m_n {
                let idx = (w * t_out + h) * m_n + m;
                if let Some(mk) = mask {
                    if mk.data()[idx] == 0.0 {
                        continue;
                    }
                }
                let (p, t) = (pred.data()[idx], target.data()[idx]);
                let err = (p - t).abs();
                n += 1;
                abs_sum += err;
                sq_sum += (p - t) * (p - t);
                if t.abs() >= MAPE_EPS {
                    mape_n += 1;
                    mape_sum += err / t.abs();
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Data(match horizon {
            Some(h) => format!("horizon {} has no unmasked elements", h + 1),
            None => "every element is masked; nothing to evaluate".into(),
        }));
    }
    Ok(HorizonMetrics {
        mae: abs_sum / n as f64,
        rmse: (sq_sum / n as f64).sqrt(),
        mape_percent: if mape_n == 0 {
            f64::NAN
        } else {
            100.0 * mape_sum / mape_n as f64
        },
    })
}

/// Compare raw-unit predictions against targets, both shaped
/// (windows, T_out, M). `horizons` are 1-based single steps (e.g. 3, 6, 12);
/// the overall block always averages across every horizon. A mask entry of 0
/// excludes that element everywhere.
pub fn compute_metrics(
    pred: &Tensor<f64>,
    target: &Tensor<f64>,
    horizons: &[usize],
    mask: Option<&Tensor<f64>>,
) -> Result<MetricsReport> {
    if pred.rank() != 3 {
        return Err(Error::Data(format!(
            "metrics expect (windows, T_out, M) tensors, got rank {}",
            pred.rank()
        )));
    }
    if pred.shape() != target.shape() {
        return Err(Error::Data(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(mk) = mask {
        if mk.shape() != pred.shape() {
            return Err(Error::Data(format!(
                "mask shape {:?} does not match predictions {:?}",
                mk.shape(),
                pred.shape()
            )));
        }
    }
    let t_out = pred.shape()[1];
    let mut per_horizon = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 || h > t_out {
            return Err(Error::Config(format!(
                "evaluation horizon {h} is outside 1..={t_out}"
            )));
        }
        per_horizon.push((h, accumulate(pred, target, mask, Some(h - 1))?));
    }
    let overall = accumulate(pred, target, mask, None)?;
    Ok(MetricsReport {
        per_horizon,
        overall,
    })
}

/// Render the report as `horizon,mae,rmse,mape_percent` rows — one per
/// requested horizon plus a final `overall` row — with fixed six-decimal
/// formatting.
pub fn format_report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("horizon,mae,rmse,mape_percent\n");
    let row = |label: &str, m: &HorizonMetrics| {
        format!(
            "{label},{:.6},{:.6},{:.6}\n",
            m.mae, m.rmse, m.mape_percent
        )
    };
    for (h, m) in &report.per_horizon {
        out.push_str(&row(&h.to_string(), m));
    }
    out.push_str(&row("overall", &report.overall));
    out
}

pub fn write_report_csv(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_report_csv(report))
        .map_err(|e| Error::io(path.display().to_string(), e))
}
