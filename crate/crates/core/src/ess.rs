//! Effective sample size of scalar chains.
//!
//! Geyer's initial positive sequence estimator with the initial monotone
//! adjustment, on autocovariances computed by FFT.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Normalized autocovariance (biased, divided by the trace length) for lags `0..len`.
pub fn autocovariance(trace: &[f64]) -> Vec<f64> {
    let n = trace.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = trace.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = trace
        .iter()
        .map(|x| Complex::new(x - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    // rustfft does not normalize; divide by the FFT size and by n.
    let scale = 1.0 / (size as f64 * n as f64);
    buf.iter().take(n).map(|c| c.re * scale).collect()
}

/// Effective sample size of one trace, in `[1, len]`.
///
/// A trace with zero variance has ESS equal to its length.
pub fn ess(trace: &[f64]) -> f64 {
    let n = trace.len();
    if n < 2 {
        return n as f64;
    }
    let acov = autocovariance(trace);
    let var = acov[0];
    if var <= f64::EPSILON * f64::EPSILON || !var.is_finite() {
        return n as f64;
    }
    let rho = |k: usize| if k < n { acov[k] / var } else { 0.0 };

    // Sum of consecutive-pair autocorrelations; the first pair always counts.
    let mut pair_sum = rho(0) + rho(1);
    let mut total = pair_sum;
    let mut m = 1;
    while 2 * m + 1 < n {
        let next = (rho(2 * m) + rho(2 * m + 1)).min(pair_sum);
        if next <= 0.0 {
            break;
        }
        total += next;
        pair_sum = next;
        m += 1;
    }
    let tau = 2.0 * total - 1.0;
    if tau <= 0.0 {
        return n as f64;
    }
    (n as f64 / tau).clamp(1.0, n as f64)
}

/// Minimum ESS over a set of equally long binary traces.
pub fn min_ess<T: AsRef<[bool]>>(traces: &[T]) -> f64 {
    traces
        .iter()
        .map(|t| {
            let values: Vec<f64> = t.as_ref().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            ess(&values)
        })
        .fold(f64::INFINITY, f64::min)
}
