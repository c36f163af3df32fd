use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_GROWTH_POINTS: usize = 4;
/// Linear wins when its R² reaches this...
pub const LINEAR_R2: f64 = 0.9;
/// ...and slope / mean exceeds this.
pub const LINEAR_REL_SLOPE: f64 = 0.05;
/// Superlinear needs the log-fit R² to beat the linear R² by this margin...
pub const SUPERLINEAR_R2_MARGIN: f64 = 0.05;
/// ...and a slope of ln(variance) per layer above this.
pub const SUPERLINEAR_LOG_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthShape {
    Constant,
    Linear,
    Superlinear,
}

impl std::fmt::Display for GrowthShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::Superlinear => "superlinear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub shape: GrowthShape,
    pub mean: f64,
    pub slope: f64,
    pub r2_linear: f64,
    /// `None` when some value is not positive.
    pub log_slope: Option<f64>,
    pub r2_log: Option<f64>,
}

/// Least squares `y = a + b x` over `x = 0, 1, ...`; returns `(b, R²)`.
/// A flat series fits perfectly.
fn fit_line(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, &v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        let dy = v - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

/// Classifies how variance grows with depth.
///
/// Superlinear is tested first, then linear; anything else is constant.
/// Every criterion is invariant to scaling the series by a positive factor.
pub fn growth_shape(variances: &[f64]) -> Result<GrowthFit> {
    if variances.len() < MIN_GROWTH_POINTS {
        return Err(Error::TooFewPoints {
            need: MIN_GROWTH_POINTS,
            got: variances.len(),
        });
    }
    if variances.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("variances must be finite".into()));
    }
    let mean = variances.iter().sum::<f64>() / variances.len() as f64;
    let (slope, r2_linear) = fit_line(variances);
    let log_fit = variances
        .iter()
        .all(|&v| v > 0.0)
        .then(|| fit_line(&variances.iter().map(|v| v.ln()).collect::<Vec<_>>()));
    let superlinear =
        log_fit.is_some_and(|(ls, r2)| r2 - r2_linear >= SUPERLINEAR_R2_MARGIN && ls > SUPERLINEAR_LOG_SLOPE);
    let linear = r2_linear >= LINEAR_R2 && mean > 0.0 && slope / mean > LINEAR_REL_SLOPE;
    let shape = if superlinear {
        GrowthShape::Superlinear
    } else if linear {
        GrowthShape::Linear
    } else {
        GrowthShape::Constant
    };
    Ok(GrowthFit {
        shape,
        mean,
        slope,
        r2_linear,
        log_slope: log_fit.map(|f| f.0),
        r2_log: log_fit.map(|f| f.1),
    })
}
