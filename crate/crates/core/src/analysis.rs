//! Quantization-error statistics, activation clamp trajectories and the
//! ablation table.
//!
//! Every table is tab-separated with one header line:
//!
//! ```text
//! bin_lo  bin_hi  count  density                     (error_histogram_tsv)
//! epoch   c_a:<site> ...                             (trajectories_tsv)
//! site    initial  final  shrinkage                  (ClampReport::summary_tsv)
//! noise_gradual  clamp_learning  metric  epochs      (AblationTable::to_tsv)
//! ```

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::metrics::MetricsLog;
use crate::model::Model;
use crate::quant;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.01;

/// Histogram of `(w - Q(w)) / delta` over `[-1/2, 1/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorHistogram {
    pub bits: u32,
    /// `bins + 1` edges in units of the bin size.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n: u64,
}

impl ErrorHistogram {
    /// Bins errors already expressed in units of the bin size.
    pub fn from_errors(bits: u32, errors: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Parameter("histogram needs at least one bin".into()));
        }
        if errors.is_empty() {
            return Err(Error::Parameter("no unsaturated weights to histogram".into()));
        }
        let edges: Vec<f64> = (0..=bins).map(|i| -0.5 + i as f64 / bins as f64).collect();
        let mut counts = vec![0u64; bins];
        for &e in errors {
            if !(-0.5 - 1e-9..=0.5 + 1e-9).contains(&e) {
                return Err(Error::Parameter(format!("normalized error {e} outside [-1/2, 1/2]")));
            }
            let i = (((e + 0.5) * bins as f64).floor() as isize).clamp(0, bins as isize - 1);
            counts[i as usize] += 1;
        }
        Ok(Self { bits, edges, counts, n: errors.len() as u64 })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Counts scaled so the histogram integrates to one.
    pub fn density(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(&c, e)| c as f64 / (self.n as f64 * (e[1] - e[0])))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_lo\tbin_hi\tcount\tdensity\n");
        for ((c, e), d) in self.counts.iter().zip(self.edges.windows(2)).zip(self.density()) {
            let _ = writeln!(s, "{:?}\t{:?}\t{c}\t{d:?}", e[0], e[1]);
        }
        s
    }
}

/// Normalized quantization errors of the weights inside `[-c_w, c_w]`.
/// Saturated weights carry clamp error rather than rounding error and are
/// left out.
pub fn normalized_errors(w: &[f64], c_w: f64, bits_w: u32) -> Result<Vec<f64>> {
    let delta = quant::weight_delta(c_w, bits_w)?;
    Ok(w.iter()
        .filter(|v| v.abs() <= c_w)
        .map(|&v| (v - quant::quantize_sym_value(v, c_w, delta)) / delta)
        .collect())
}

pub fn error_histogram(w: &Tensor, c_w: f64, bits_w: u32, bins: usize) -> Result<ErrorHistogram> {
    ErrorHistogram::from_errors(bits_w, &normalized_errors(w.data(), c_w, bits_w)?, bins)
}

/// Errors pooled over every layer of a model, each layer using the clamp
/// `mean + beta * std` of its own weights.
pub fn model_error_histogram(model: &Model, bits_w: u32, beta: f64, bins: usize) -> Result<ErrorHistogram> {
    let mut errors = Vec::new();
    for l in &model.layers {
        let c_w = quant::init_weight_clamp(&l.weight, beta)?;
        errors.extend(normalized_errors(l.weight.data(), c_w, bits_w)?);
    }
    ErrorHistogram::from_errors(bits_w, &errors, bins)
}

/// `n` draws from N(0, 1), reproducible from `seed`.
pub fn gaussian_weights(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_vec((0..n).map(|_| d.sample(&mut rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniformity {
    pub statistic: f64,
    pub df: usize,
    pub critical: f64,
    pub reject: bool,
}

/// Pearson chi-square of the histogram against the uniform distribution.
pub fn uniformity_test(h: &ErrorHistogram, significance: f64) -> Result<Uniformity> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::Test(format!("significance {significance} outside (0, 1)")));
    }
    let k = h.bins();
    if k < 2 {
        return Err(Error::Test("chi-square needs at least two bins".into()));
    }
    let expected = h.n as f64 / k as f64;
    if expected < 5.0 {
        return Err(Error::Test(format!("expected count {expected} per bin is below 5")));
    }
    let statistic = h.counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let df = k - 1;
    let critical = ChiSquared::new(df as f64)
        .map_err(|e| Error::Test(e.to_string()))?
        .inverse_cdf(1.0 - significance);
    Ok(Uniformity { statistic, df, critical, reject: statistic > critical })
}

/// `c_a` of one activation site over training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampTrajectory {
    pub site: usize,
    pub initial: f64,
    /// One value per trained epoch.
    pub values: Vec<f64>,
}

impl ClampTrajectory {
    pub fn final_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(self.initial)
    }

    /// Relative decrease from the initial value; 0.5 when the clamp halves.
    pub fn shrinkage(&self) -> f64 {
        1.0 - self.final_value() / self.initial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClampReport {
    pub trajectories: Vec<ClampTrajectory>,
    pub mean_initial: f64,
    pub mean_final: f64,
}

impl ClampReport {
    pub fn mean_shrinkage(&self) -> f64 {
        let n = self.trajectories.len() as f64;
        self.trajectories.iter().map(|t| t.shrinkage()).sum::<f64>() / n
    }

    pub fn trajectories_tsv(&self) -> String {
        let mut s = String::from("epoch");
        for t in &self.trajectories {
            let _ = write!(s, "\tc_a:{}", t.site);
        }
        s.push('\n');
        let epochs = self.trajectories.first().map_or(0, |t| t.values.len());
        for e in 0..=epochs {
            let _ = write!(s, "{e}");
            for t in &self.trajectories {
                let v = if e == 0 { t.initial } else { t.values[e - 1] };
                let _ = write!(s, "\t{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("site\tinitial\tfinal\tshrinkage\n");
        for t in &self.trajectories {
            let _ = writeln!(s, "{}\t{:?}\t{:?}\t{:?}", t.site, t.initial, t.final_value(), t.shrinkage());
        }
        let _ = writeln!(s, "mean\t{:?}\t{:?}\t{:?}", self.mean_initial, self.mean_final, self.mean_shrinkage());
        s
    }
}

/// Trajectories of every clamped site. Row 0 of the log is the initial
/// value; sites without a clamp (all `NaN`) are skipped.
pub fn clamp_report(log: &MetricsLog) -> Result<ClampReport> {
    if log.rows.len() < 2 {
        return Err(Error::Parse { line: 0, msg: "log has no trained epochs".into() });
    }
    let mut trajectories = Vec::new();
    for (col, &site) in log.sites.iter().enumerate() {
        let initial = log.rows[0].c_a[col];
        let values: Vec<f64> = log.rows[1..].iter().map(|r| r.c_a[col]).collect();
        if initial.is_nan() && values.iter().all(|v| v.is_nan()) {
            continue;
        }
        if std::iter::once(&initial).chain(&values).any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Parse { line: 0, msg: format!("site {site} has a non-positive or missing clamp") });
        }
        trajectories.push(ClampTrajectory { site, initial, values });
    }
    if trajectories.is_empty() {
        return Err(Error::Parse { line: 0, msg: "log has no clamp columns".into() });
    }
    let n = trajectories.len() as f64;
    let mean_initial = trajectories.iter().map(|t| t.initial).sum::<f64>() / n;
    let mean_final = trajectories.iter().map(|t| t.final_value()).sum::<f64>() / n;
    Ok(ClampReport { trajectories, mean_initial, mean_final })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub noise_gradual: bool,
    pub clamp_learning: bool,
    /// `None` when no run had this combination.
    pub metric: Option<f64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub metric_name: String,
    pub rows: Vec<AblationRow>,
}

/// Flag combinations in table order.
pub const ABLATION_GRID: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

impl AblationTable {
    pub fn get(&self, noise_gradual: bool, clamp_learning: bool) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.noise_gradual == noise_gradual && r.clamp_learning == clamp_learning)
            .and_then(|r| r.metric)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("noise_gradual\tclamp_learning\t{}\tepochs\n", self.metric_name);
        let mark = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            let m = r.metric.map_or("absent".to_string(), |m| format!("{m:?}"));
            let e = r.epochs.map_or("-".to_string(), |e| e.to_string());
            let _ = writeln!(s, "{}\t{}\t{m}\t{e}", mark(r.noise_gradual), mark(r.clamp_learning));
        }
        s
    }
}

/// Final metric of each run on the 2x2 grid of (noise + gradual, clamp
/// learning).
pub fn ablation_report(runs: &[MetricsLog]) -> Result<AblationTable> {
    let task = runs.first().map(|r| r.task);
    if runs.iter().any(|r| Some(r.task) != task) {
        return Err(Error::Config("ablation runs mix tasks".into()));
    }
    let mut rows = Vec::with_capacity(4);
    for (ng, cl) in ABLATION_GRID {
        let mut hits = runs.iter().filter(|r| r.noise_gradual == ng && r.clamp_learning == cl);
        let hit = hits.next();
        if hits.next().is_some() {
            return Err(Error::Config(format!(
                "duplicate run for noise_gradual={ng} clamp_learning={cl}"
            )));
        }
        rows.push(AblationRow {
            noise_gradual: ng,
            clamp_learning: cl,
            metric: hit.and_then(|r| r.final_metric()),
            epochs: hit.map(|r| r.rows.len().saturating_sub(1)),
        });
    }
    let metric_name = task.map_or("metric", crate::qat::metric_name).to_string();
    Ok(AblationTable { metric_name, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsRow;
    use crate::model::Task;
    use proptest::prelude::{prop, prop_assert, proptest};

    #[test]
    fn grid_weights_have_zero_error() {
        let w = Tensor::from_vec((-7..=7).map(f64::from).collect());
        let h = error_histogram(&w, 7.0, 4, 16).unwrap();
        assert_eq!(h.counts[8], 15);
        assert_eq!(h.counts.iter().sum::<u64>(), h.n);
    }

    #[test]
    fn saturated_only_is_error() {
        let w = Tensor::from_vec(vec![5.0, -6.0]);
        assert!(error_histogram(&w, 1.0, 4, 16).is_err());
    }

    #[test]
    fn gaussian_five_bits_is_flat() {
        let w = gaussian_weights(12345, 100_000);
        let h = error_histogram(&w, 3.0, 5, 16).unwrap();
        let expected = h.n as f64 / 16.0;
        let worst = h.counts.iter().map(|&c| (c as f64 - expected).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05 * expected, "{worst} vs {expected}");
        assert!(!uniformity_test(&h, 0.01).unwrap().reject);
    }

    /// Exact bin probabilities of the normalized error of N(0, 1) weights.
    fn gaussian_bin_probs(c: f64, bits: u32, bins: usize) -> Vec<f64> {
        use statrs::distribution::Normal as StdNormal;
        let n = StdNormal::new(0.0, 1.0).unwrap();
        let levels = quant::weight_levels(bits) as i64;
        let d = c / levels as f64;
        let mut p = vec![0.0; bins];
        for k in -levels..=levels {
            for (i, pi) in p.iter_mut().enumerate() {
                let lo = ((k as f64 - 0.5 + i as f64 / bins as f64) * d).max(-c);
                let hi = ((k as f64 - 0.5 + (i + 1) as f64 / bins as f64) * d).min(c);
                if hi > lo {
                    *pi += n.cdf(hi) - n.cdf(lo);
                }
            }
        }
        let total: f64 = p.iter().sum();
        p.iter().map(|v| v / total).collect()
    }

    #[test]
    fn expected_non_uniformity_falls_with_bits() {
        // noncentrality per sample of the chi-square statistic
        let lambda = |b| {
            let p = gaussian_bin_probs(3.0, b, 16);
            p.iter().map(|v| (v - 1.0 / 16.0).powi(2) * 16.0).sum::<f64>()
        };
        let (l2, l3, l4, l5) = (lambda(2), lambda(3), lambda(4), lambda(5));
        assert!(l2 > l3 && l3 > l4 && l4 > l5, "{l2} {l3} {l4} {l5}");
        // at 10^5 samples the 3-bit signal is far below the chi-square noise
        assert!(l3 * 1e5 < 1.0);
    }

    #[test]
    fn chi_square_closed_forms() {
        let flat = ErrorHistogram::from_errors(4, &(0..1600).map(|i| -0.5 + (i % 16) as f64 / 16.0 + 1e-3).collect::<Vec<_>>(), 16).unwrap();
        let u = uniformity_test(&flat, 0.01).unwrap();
        assert_eq!(u.statistic, 0.0);
        assert!(!u.reject);
        let spike = ErrorHistogram::from_errors(4, &vec![0.0; 1600], 16).unwrap();
        let u = uniformity_test(&spike, 0.01).unwrap();
        assert_eq!(u.statistic, 24000.0);
        assert_eq!(u.df, 15);
        assert!(u.reject);
        // chi-square 0.99 quantile, 15 degrees of freedom
        assert!((u.critical - 30.5779).abs() < 1e-3);
    }

    #[test]
    fn small_expected_count_is_test_error() {
        let h = ErrorHistogram::from_errors(4, &[0.0; 40], 16).unwrap();
        assert!(matches!(uniformity_test(&h, 0.01), Err(Error::Test(_))));
    }

    fn log(rows: &[[f64; 2]], ng: bool, cl: bool, metric: f64) -> MetricsLog {
        MetricsLog {
            task: Task::Classification,
            noise_gradual: ng,
            clamp_learning: cl,
            bits_w: 4,
            bits_a: 4,
            sites: vec![1, 2],
            rows: rows
                .iter()
                .enumerate()
                .map(|(e, c)| MetricsRow {
                    epoch: e,
                    stage: 0,
                    modes: "QQ".into(),
                    loss: if e == 0 { f64::NAN } else { 1.0 },
                    metric,
                    c_a: c.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn constant_clamps_do_not_shrink() {
        let r = clamp_report(&log(&[[2.0, 3.0]; 4], true, true, 50.0)).unwrap();
        assert_eq!(r.trajectories.len(), 2);
        assert_eq!(r.trajectories[0].values.len(), 3);
        assert_eq!(r.mean_shrinkage(), 0.0);
    }

    #[test]
    fn halving_clamps_shrink_by_half() {
        let r = clamp_report(&log(&[[4.0, 2.0], [3.0, 1.5], [2.0, 1.0]], true, true, 50.0)).unwrap();
        assert_eq!(r.mean_shrinkage(), 0.5);
        assert_eq!(r.mean_final, 1.5);
        assert!(r.trajectories_tsv().lines().count() == 4);
    }

    #[test]
    fn malformed_log_reports_line() {
        let text = "# nice-metrics v1 task=classification\n# flags noise_gradual=true clamp_learning=true bits_w=4 bits_a=4\nepoch\tstage\tmodes\tloss\tmetric\tc_a:1\n0\t0\tQ\tNaN\t1.0\tbad\n";
        match MetricsLog::parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ablation_grid() {
        let rows = [[1.0, 1.0]; 2];
        let runs: Vec<_> = ABLATION_GRID.iter().enumerate().map(|(i, &(a, b))| log(&rows, a, b, i as f64)).collect();
        let t = ablation_report(&runs).unwrap();
        let combos: Vec<_> = t.rows.iter().map(|r| (r.noise_gradual, r.clamp_learning)).collect();
        assert_eq!(combos, ABLATION_GRID.to_vec());
        assert_eq!(t.get(true, true), Some(3.0));
        assert_eq!(t.to_tsv().lines().count(), 5);

        let t = ablation_report(&runs[..3]).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.get(true, true), None);
        assert!(t.to_tsv().contains("absent"));

        let mut dup = runs.clone();
        dup.push(runs[0].clone());
        assert!(ablation_report(&dup).is_err());
    }

    proptest! {
        #[test]
        fn density_integrates_to_one(errs in prop::collection::vec(-0.5f64..=0.5, 1..400), bins in 1usize..40) {
            let h = ErrorHistogram::from_errors(4, &errs, bins).unwrap();
            let total: f64 = h.density().iter().zip(h.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(h.counts.iter().sum::<u64>() == h.n);
            prop_assert!(h.edges.windows(2).all(|e| e[0] < e[1]));
        }

        #[test]
        fn chi_square_ignores_bin_order(counts in prop::collection::vec(5u64..200, 4..20), rot in 0usize..20) {
            let bins = counts.len();
            let n: u64 = counts.iter().sum();
            let edges: Vec<f64> = (0..=bins).map(|i| -0.5 + i as f64 / bins as f64).collect();
            let a = ErrorHistogram { bits: 4, edges: edges.clone(), counts: counts.clone(), n };
            let mut c2 = counts.clone();
            c2.rotate_left(rot % bins);
            c2.reverse();
            let b = ErrorHistogram { bits: 4, edges, counts: c2, n };
            let (sa, sb) = (uniformity_test(&a, 0.01), uniformity_test(&b, 0.01));
            if let (Ok(sa), Ok(sb)) = (sa, sb) {
                prop_assert!((sa.statistic - sb.statistic).abs() <= 1e-9 * sa.statistic.max(1.0));
            }
        }

        #[test]
        fn errors_stay_in_half_bin(w in prop::collection::vec(-2.0f64..2.0, 1..200), bits in 2u32..9) {
            for e in normalized_errors(&w, 1.5, bits).unwrap() {
                prop_assert!(e.abs() <= 0.5 + 1e-9);
            }
        }
    }
}
