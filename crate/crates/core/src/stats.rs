//! Sample statistics with a fixed summation order.

/// Mean and standard error `s / sqrt(n)` of i.i.d. samples.
///
/// The standard error is 0 for fewer than two samples.
pub fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = samples.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

/// Batch length used for a serially correlated series of `len` values with
/// decorrelation window `window`: `10 * window`, shortened so at least two
/// batches fit.
pub fn batch_length(len: usize, window: usize) -> usize {
    (10 * window.max(1)).min(len / 2).max(1)
}

/// Accumulates per-step contributions of several components into
/// consecutive batches of fixed length.
#[derive(Debug, Clone)]
pub struct BatchMeans {
    components: usize,
    batch_len: usize,
    first: usize,
    len: usize,
    sums: Vec<f64>,
}

impl BatchMeans {
    /// Batches over steps `first..first + len`.
    pub fn new(components: usize, first: usize, len: usize, batch_len: usize) -> Self {
        let n_batches = len / batch_len;
        Self {
            components,
            batch_len,
            first,
            len,
            sums: vec![0.0; (n_batches + 1) * components],
        }
    }

    pub fn add(&mut self, step: usize, component: usize, value: f64) {
        let b = (step - self.first) / self.batch_len;
        self.sums[b * self.components + component] += value;
    }

    pub fn full_batches(&self) -> usize {
        self.len / self.batch_len
    }

    /// Batch means of full batches for one component, in step order.
    pub fn means(&self, component: usize) -> Vec<f64> {
        (0..self.full_batches())
            .map(|b| self.sums[b * self.components + component] / self.batch_len as f64)
            .collect()
    }

    /// Overall mean over all `len` steps (partial tail batch included) and the
    /// batch-means standard error from full batches.
    pub fn estimate(&self, component: usize) -> (f64, f64) {
        let total: f64 = self
            .sums
            .chunks(self.components)
            .map(|c| c[component])
            .sum();
        let (_, se) = mean_and_stderr(&self.means(component));
        (total / self.len as f64, se)
    }
}

/// Windowed sums `S_k = sum_{m=1}^{W} (Phi_{k+m} - Phi_avg)` over an
/// observable trace `Phi_0..Phi_N`, truncated at `N`.
#[derive(Debug, Clone)]
pub struct WindowSums {
    prefix: Vec<f64>,
    window: usize,
}

impl WindowSums {
    pub fn new(trace: &[f64], phi_avg: f64, window: usize) -> Self {
        let mut prefix = Vec::with_capacity(trace.len() + 1);
        let mut acc = 0.0;
        prefix.push(acc);
        for phi in trace {
            acc += phi - phi_avg;
            prefix.push(acc);
        }
        Self { prefix, window }
    }

    pub fn get(&self, k: usize) -> f64 {
        let last = (k + self.window).min(self.prefix.len() - 2);
        if last <= k {
            return 0.0;
        }
        self.prefix[last + 1] - self.prefix[k + 1]
    }
}

/// Time average of `trace[from..]` with its batch-means standard error.
pub fn time_average(trace: &[f64], from: usize, window: usize) -> (f64, f64) {
    let tail = &trace[from.min(trace.len())..];
    if tail.is_empty() {
        return (f64::NAN, 0.0);
    }
    let bl = batch_length(tail.len(), window);
    let mut bm = BatchMeans::new(1, 0, tail.len(), bl);
    for (k, v) in tail.iter().enumerate() {
        bm.add(k, 0, *v);
    }
    bm.estimate(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_of_known_samples() {
        let (m, se) = mean_and_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // s^2 = 5/3, se = sqrt(5/12)
        assert!((se - (5.0_f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_stderr(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn batches_split_a_series() {
        let mut bm = BatchMeans::new(1, 10, 7, 3);
        for k in 10..17 {
            bm.add(k, 0, (k - 10) as f64);
        }
        assert_eq!(bm.full_batches(), 2);
        assert_eq!(bm.means(0), vec![1.0, 4.0]);
        let (mean, se) = bm.estimate(0);
        assert_eq!(mean, 3.0);
        assert!((se - 1.5).abs() < 1e-15);
    }

    #[test]
    fn window_sums_match_direct_sums() {
        let trace = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let avg = 3.0;
        let ws = WindowSums::new(&trace, avg, 2);
        for k in 0..trace.len() {
            let direct: f64 = (1..=2)
                .filter(|m| k + m < trace.len())
                .map(|m| trace[k + m] - avg)
                .sum();
            assert!((ws.get(k) - direct).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn batch_length_keeps_two_batches() {
        assert_eq!(batch_length(1_000_000, 1000), 10_000);
        assert_eq!(batch_length(30, 5), 15);
        assert_eq!(batch_length(1, 5), 1);
    }
}
