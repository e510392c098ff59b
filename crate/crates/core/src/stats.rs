//! Welch's unequal-variance t-test and the ablation runner.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fewshot::LossMode;
use crate::report::Metrics;
use crate::train::{mean_std, run_repeats, TrainConfig};

/// Convergence tolerance of the incomplete-beta continued fraction.
const BETA_CF_TOL: f64 = 1e-12;
const BETA_CF_MAX_ITER: usize = 10_000;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos approximation with reflection below 0.5).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < BETA_CF_TOL {
            return Ok(h);
        }
    }
    Err(Error::Numeric(format!("incomplete beta did not converge for a={a} b={b} x={x}")))
}

/// Regularised incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain {
            op: "incomplete_beta",
            detail: format!("a={a} b={b} x={x}"),
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `dof`
/// degrees of freedom.
// negated comparisons so that NaN is rejected too
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn t_two_sided_p(t: f64, dof: f64) -> Result<f64> {
    if !(dof > 0.0) {
        return Err(Error::Domain {
            op: "t_two_sided_p",
            detail: format!("dof {dof}"),
        });
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let p = incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))?;
    Ok(p.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WelchResult {
    /// Positive when `mean_a > mean_b`.
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub dof: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// Both groups had zero variance, so the statistic is a convention.
    pub degenerate: bool,
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's two-sample t-test.
///
/// When both groups are constant the standard error is zero: equal means
/// give `t = 0, p = 1`; different means give `t = ±inf, p = 0`. Both cases
/// are flagged `degenerate`, with `dof = n_a + n_b - 2`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    for (name, g) in [("a", a), ("b", b)] {
        if g.len() < 2 {
            return Err(Error::Config(format!("welch_t_test: group {name} needs at least 2 values, got {}", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "welch_t_test" });
        }
    }
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let mut r = WelchResult {
        t: 0.0,
        dof: na + nb - 2.0,
        p: 1.0,
        mean_a: ma,
        mean_b: mb,
        n_a: a.len(),
        n_b: b.len(),
        degenerate: false,
    };
    if se2 == 0.0 {
        r.degenerate = true;
        if ma != mb {
            r.t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
            r.p = 0.0;
        }
        return Ok(r);
    }
    r.t = (ma - mb) / se2.sqrt();
    r.dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p = t_two_sided_p(r.t, r.dof)?;
    Ok(r)
}

/// The quantity varied across ablation cells.
#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    Loss(Vec<LossMode>),
    /// Fixed (non-trainable) curvature values.
    Curvature(Vec<f64>),
    /// Angular-loss weights for the combined loss.
    Lambda(Vec<f64>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Loss(_) => "loss",
            AblationAxis::Curvature(_) => "curvature",
            AblationAxis::Lambda(_) => "lambda",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AblationAxis::Loss(v) => v.len(),
            AblationAxis::Curvature(v) | AblationAxis::Lambda(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<String> {
        match self {
            AblationAxis::Loss(v) => v.iter().map(|m| m.to_string()).collect(),
            AblationAxis::Curvature(v) | AblationAxis::Lambda(v) => v.iter().map(|x| x.to_string()).collect(),
        }
    }

    /// Base configuration with cell `i` applied.
    fn cell_config(&self, base: &TrainConfig, i: usize) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationAxis::Loss(v) => cfg.loss.mode = v[i],
            AblationAxis::Curvature(v) => {
                cfg.alpha_init = v[i];
                cfg.alpha_trainable = false;
            }
            AblationAxis::Lambda(v) => {
                cfg.loss.mode = LossMode::Combined;
                cfg.loss.lambda = v[i];
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub base: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub failures: usize,
    /// Worst exit status among failed repeats, 0 if none failed.
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub result: WelchResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub axis: String,
    pub rows: Vec<AblationRow>,
    pub tests: Vec<PairwiseTest>,
    /// Curvature cells pin alpha instead of training it.
    pub curvature_fixed: bool,
}

/// Run every cell of `grid` on `dataset` (same data and seeds for every
/// cell) and compare all pairs of cells with Welch's t-test. No
/// multiple-comparison correction is applied.
pub fn run_ablation(dataset: &Dataset, grid: &AblationGrid, threads: usize) -> Result<AblationReport> {
    if grid.axis.is_empty() {
        return Err(Error::Config("ablation axis has no values".into()));
    }
    let labels = grid.axis.labels();
    let mut rows = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let cfg = grid.axis.cell_config(&grid.base, i);
        log::info!("ablation {} = {label}", grid.axis.name());
        let run = run_repeats(dataset, &cfg, threads)?;
        rows.push(AblationRow {
            label: label.clone(),
            mean: run.mean,
            std: run.std,
            failures: run.failures.len(),
            exit_code: run.failures.iter().map(|f| f.exit_code).max().unwrap_or(0),
            accuracies: run.accuracies,
        });
    }
    let mut tests = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i].accuracies.len() < 2 || rows[j].accuracies.len() < 2 {
                log::warn!("skipping Welch test {} vs {}: fewer than 2 runs", rows[i].label, rows[j].label);
                continue;
            }
            tests.push(PairwiseTest {
                a: rows[i].label.clone(),
                b: rows[j].label.clone(),
                result: welch_t_test(&rows[i].accuracies, &rows[j].accuracies)?,
            });
        }
    }
    Ok(AblationReport {
        axis: grid.axis.name().to_string(),
        rows,
        tests,
        curvature_fixed: matches!(grid.axis, AblationAxis::Curvature(_)),
    })
}

impl AblationReport {
    pub fn to_metrics(&self) -> Metrics {
        let mut m = Metrics::new();
        m.set("kind", "ablation")
            .set("axis", &self.axis)
            .set("curvature_fixed", self.curvature_fixed)
            .set("multiple_comparison_correction", "none")
            .set("rows", self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            m.set(format!("row.{i}.label"), &r.label)
                .set_list(format!("row.{i}.accuracies"), &r.accuracies)
                .set(format!("row.{i}.mean"), r.mean)
                .set(format!("row.{i}.std"), r.std)
                .set(format!("row.{i}.failures"), r.failures)
                .set(format!("row.{i}.exit_code"), r.exit_code);
        }
        m.set("tests", self.tests.len());
        for (i, t) in self.tests.iter().enumerate() {
            let w = &t.result;
            m.set(format!("test.{i}.a"), &t.a)
                .set(format!("test.{i}.b"), &t.b)
                .set(format!("test.{i}.t"), w.t)
                .set(format!("test.{i}.dof"), w.dof)
                .set(format!("test.{i}.p"), w.p)
                .set(format!("test.{i}.mean_a"), w.mean_a)
                .set(format!("test.{i}.mean_b"), w.mean_b)
                .set(format!("test.{i}.n_a"), w.n_a)
                .set(format!("test.{i}.n_b"), w.n_b)
                .set(format!("test.{i}.degenerate"), w.degenerate);
        }
        m
    }

    pub fn from_metrics(m: &Metrics) -> Result<Self> {
        if m.require("kind")? != "ablation" {
            return Err(Error::Format("not an ablation report".into()));
        }
        let rows = (0..m.parse_value::<usize>("rows")?)
            .map(|i| {
                Ok(AblationRow {
                    label: m.require(&format!("row.{i}.label"))?.to_string(),
                    accuracies: m.parse_list(&format!("row.{i}.accuracies"))?,
                    mean: m.parse_value(&format!("row.{i}.mean"))?,
                    std: m.parse_value(&format!("row.{i}.std"))?,
                    failures: m.parse_value(&format!("row.{i}.failures"))?,
                    exit_code: m.parse_value(&format!("row.{i}.exit_code"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tests = (0..m.parse_value::<usize>("tests")?)
            .map(|i| {
                let key = |f: &str| format!("test.{i}.{f}");
                Ok(PairwiseTest {
                    a: m.require(&key("a"))?.to_string(),
                    b: m.require(&key("b"))?.to_string(),
                    result: WelchResult {
                        t: m.parse_value(&key("t"))?,
                        dof: m.parse_value(&key("dof"))?,
                        p: m.parse_value(&key("p"))?,
                        mean_a: m.parse_value(&key("mean_a"))?,
                        mean_b: m.parse_value(&key("mean_b"))?,
                        n_a: m.parse_value(&key("n_a"))?,
                        n_b: m.parse_value(&key("n_b"))?,
                        degenerate: m.parse_value(&key("degenerate"))?,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            axis: m.require("axis")?.to_string(),
            curvature_fixed: m.parse_value("curvature_fixed")?,
            rows,
            tests,
        })
    }

    /// Row means, for quick inspection.
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| mean_std(&r.accuracies).0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use proptest::prelude::*;

    /// `Γ(n/2)` from `Γ(1) = 1`, `Γ(1/2) = √π` and `Γ(x + 1) = x Γ(x)`.
    fn gamma_half(n: u32) -> f64 {
        let (mut x, mut g) = if n.is_multiple_of(2) { (1.0, 1.0) } else { (0.5, std::f64::consts::PI.sqrt()) };
        while x < n as f64 / 2.0 {
            g *= x;
            x += 1.0;
        }
        g
    }

    /// Two-sided tail by composite Simpson integration of the t density over
    /// `[0, |t|]`. Independent of the incomplete beta path.
    fn integrated_p(t: f64, dof: u32) -> f64 {
        let nu = dof as f64;
        let c = gamma_half(dof + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half(dof));
        let f = |s: f64| c * (1.0 + s * s / nu).powf(-(nu + 1.0) / 2.0);
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut acc = f(0.0) + f(t.abs());
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        1.0 - 2.0 * acc * h / 3.0
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn t_tail_matches_integration_oracle() {
        for dof in [1u32, 8, 30] {
            for i in 0..=50 {
                let t = -5.0 + 0.2 * i as f64;
                let p = t_two_sided_p(t, dof as f64).unwrap();
                let o = integrated_p(t, dof);
                assert!((p - o).abs() < 1e-6, "dof {dof} t {t}: {p} vs {o}");
            }
        }
    }

    #[test]
    fn shifted_groups_example() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = welch_t_test(&a, &b).unwrap();
        assert!((r.t + 1.0).abs() < 1e-12);
        assert!((r.dof - 8.0).abs() < 1e-12);
        assert!((r.p - 0.3466).abs() < 1e-4);
        assert!((r.p - integrated_p(-1.0, 8)).abs() < 1e-9);
        assert!(!r.degenerate);
    }

    #[test]
    fn identical_groups() {
        let a = [0.7, 0.9, 0.8];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = welch_t_test(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = welch_t_test(&[0.5, 0.5], &[0.6, 0.6]).unwrap();
        assert!(r.degenerate && r.p == 0.0 && r.t < 0.0);
    }

    #[test]
    fn small_groups_are_rejected() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn swap_negates_t_and_keeps_p(
            a in proptest::collection::vec(0.0f64..1.0, 2..8),
            b in proptest::collection::vec(0.0f64..1.0, 2..8),
        ) {
            let ab = welch_t_test(&a, &b).unwrap();
            let ba = welch_t_test(&b, &a).unwrap();
            prop_assert_eq!(ab.t, -ba.t);
            prop_assert!((ab.p - ba.p).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab.p));
            prop_assert!(ab.dof > 0.0);
        }
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let ds = generate_synthetic(&SynthSpec {
            n_per_class: 20,
            seq_len: 8,
            modalities: vec![("a".into(), 2)],
            ..SynthSpec::default()
        })
        .unwrap();
        let mut cfg = TrainConfig {
            epochs: 1,
            episodes_per_epoch: 2,
            b: 2,
            repeats: 2,
            eval_episodes: 5,
            ..TrainConfig::default()
        };
        cfg.encoder.embed_dim = 4;
        cfg.encoder.heads = 2;
        (ds, cfg)
    }

    #[test]
    fn ablation_report_shape_and_round_trip() {
        let (ds, base) = tiny();
        let grid = AblationGrid {
            axis: AblationAxis::Loss(vec![LossMode::Proto, LossMode::Angular, LossMode::Combined]),
            base,
        };
        let report = run_ablation(&ds, &grid, 1).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.tests.len(), 3);
        assert!(!report.curvature_fixed);
        let text = report.to_metrics().render();
        let back = AblationReport::from_metrics(&Metrics::parse(&text).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn single_value_axis_has_no_tests() {
        let (ds, base) = tiny();
        let grid = AblationGrid {
            axis: AblationAxis::Curvature(vec![1.0]),
            base,
        };
        let report = run_ablation(&ds, &grid, 1).unwrap();
        assert_eq!((report.rows.len(), report.tests.len()), (1, 0));
        assert!(report.curvature_fixed);
    }

    #[test]
    fn repeated_axis_value_gives_identical_rows() {
        let (ds, base) = tiny();
        let grid = AblationGrid {
            axis: AblationAxis::Lambda(vec![0.25, 0.25]),
            base,
        };
        let report = run_ablation(&ds, &grid, 1).unwrap();
        assert_eq!(report.rows[0], report.rows[1]);
        let grid = AblationGrid {
            axis: AblationAxis::Lambda(vec![0.25, 1.0]),
            base: grid.base,
        };
        assert_eq!(run_ablation(&ds, &grid, 1).unwrap().tests.len(), 1);
    }

    #[test]
    fn curvature_cells_freeze_alpha() {
        let axis = AblationAxis::Curvature(vec![0.5, 2.0]);
        let cfg = axis.cell_config(&TrainConfig::default(), 1);
        assert_eq!(cfg.alpha_init, 2.0);
        assert!(!cfg.alpha_trainable);
    }
}
