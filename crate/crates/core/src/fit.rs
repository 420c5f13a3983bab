//! Least-squares line fits and sample statistics used by the scaling and
//! profile analyses.

/// Result of an ordinary least-squares line fit `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; `NaN` with fewer than three points.
    pub slope_stderr: f64,
}

/// Ordinary least squares. Panics if the inputs differ in length or hold
/// fewer than two points.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    weighted_linear_fit(xs, ys, &vec![1.0; xs.len()])
}

/// Weighted least squares with weights `ws` (inverse variances).
pub fn weighted_linear_fit(xs: &[f64], ys: &[f64], ws: &[f64]) -> LinearFit {
    assert!(xs.len() == ys.len() && xs.len() == ws.len(), "fit inputs differ in length");
    assert!(xs.len() >= 2, "a line fit needs two points");
    let n = xs.len() as f64;
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(ws).map(|(x, w)| w * (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).zip(ws).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if xs.len() > 2 {
        let sse: f64 = xs
            .iter()
            .zip(ys)
            .zip(ws)
            .map(|((x, y), w)| {
                let r = y - intercept - slope * x;
                w * r * r
            })
            .sum();
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    LinearFit {
        slope,
        intercept,
        slope_stderr,
    }
}

/// Fit of `ln y` against `ln x`; the slope is the power-law exponent.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let f = linear_fit(&xs, &ys);
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!(f.slope_stderr.abs() < 1e-12);
    }

    #[test]
    fn weights_pick_out_the_heavy_points() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.0, 1.0, 2.0, 10.0];
        let f = weighted_linear_fit(&xs, &ys, &[1e9, 1e9, 1e9, 1e-9]);
        assert!((f.slope - 1.0).abs() < 1e-6);
        assert_eq!(weighted_linear_fit(&xs, &ys, &[2.0; 4]), linear_fit(&xs, &ys));
    }

    #[test]
    fn power_law() {
        let xs = [250.0, 500.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_fit(&xs, &ys).slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn spread_needs_two_values() {
        assert!(mean_std(&[1.0]).is_none());
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
