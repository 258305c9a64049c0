//! Gradient verification suite: analytic gradients against central differences,
//! structural reductions between variants, and the decomposition contract.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::methods::{
    asymmetric_directional_loss, asymmetric_grad, barlow_grad, barlow_loss, contrastive_grad, infonce_directional,
    simclr_batch_loss, simclr_target_term, unified_grad, unigrad_directional_loss, unigrad_grad,
    vicreg_directional_loss, vicreg_full_terms, vicreg_grad, AsymmetricVariant, BarlowVariant, BatchViews,
    ContrastiveVariant, GradState, GradientDecomposition, MemoryBank, Method, MethodConfig, Negatives, NormMode,
    TargetKind, VicregVariant, VicregWeights,
};
use crate::numerics::{col_std, DenseMatrix, FeatureBatch};
use crate::oracle::{grad_check_with_h, numeric_grad, DEFAULT_H, DEFAULT_REL_FLOOR};
use crate::predictor::{compute_predictor, CorrelationState, DenominatorForm};

pub const DEFAULT_TOL: f64 = 1e-4;
const TAU: f64 = 0.2;
const ORACLE_BANK_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seeds: u64,
    /// `(N, C)` shapes to probe
    pub sizes: Vec<(usize, usize)>,
    pub h: f64,
    pub tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let mut sizes = Vec::new();
        for n in [2, 4, 8] {
            for c in [4, 8, 16] {
                sizes.push((n, c));
            }
        }
        Self {
            seeds: 20,
            sizes,
            h: DEFAULT_H,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// probe too close to a hinge kink for central differences to be meaningful
    Skipped,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "true",
            CheckStatus::Fail => "false",
            CheckStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub method: String,
    pub variant: String,
    pub n: usize,
    pub c: usize,
    pub seed: u64,
    pub max_rel_err: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub elapsed_secs: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &VerifyRow> {
        self.rows.iter().filter(|r| r.status == CheckStatus::Fail)
    }

    pub fn count(&self, status: CheckStatus) -> usize {
        self.rows.iter().filter(|r| r.status == status).count()
    }

    /// 0 when nothing failed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            0
        } else {
            1
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "variant", "N", "C", "seed", "max_rel_err", "pass"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.variant.clone(),
                r.n.to_string(),
                r.c.to_string(),
                r.seed.to_string(),
                format!("{:e}", r.max_rel_err),
                r.status.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One line per (method, variant): counts and worst error.
    pub fn summary_table(&self) -> String {
        let mut groups: Vec<(String, String, usize, usize, usize, f64)> = Vec::new();
        for r in &self.rows {
            let idx = match groups.iter().position(|g| g.0 == r.method && g.1 == r.variant) {
                Some(i) => i,
                None => {
                    groups.push((r.method.clone(), r.variant.clone(), 0, 0, 0, 0.0));
                    groups.len() - 1
                }
            };
            let g = &mut groups[idx];
            match r.status {
                CheckStatus::Pass => g.2 += 1,
                CheckStatus::Fail => g.3 += 1,
                CheckStatus::Skipped => g.4 += 1,
            }
            if r.status != CheckStatus::Skipped {
                g.5 = if r.max_rel_err.is_nan() { f64::NAN } else { g.5.max(r.max_rel_err) };
            }
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<26} {:<32} {:>5} {:>5} {:>5} {:>12}  result",
            "method", "variant", "pass", "fail", "skip", "worst"
        );
        for (m, v, p, f, k, worst) in groups {
            let _ = writeln!(
                s,
                "{m:<26} {v:<32} {p:>5} {f:>5} {k:>5} {worst:>12.3e}  {}",
                if f == 0 { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} checks, {} failed, {} skipped, {:.2}s",
            self.rows.len(),
            self.count(CheckStatus::Fail),
            self.count(CheckStatus::Skipped),
            self.elapsed_secs
        );
        s
    }
}

/// A pure loss of the online representation plus its analytic gradient at `x`.
pub struct Probe {
    pub x: FeatureBatch,
    pub loss: Box<dyn Fn(&FeatureBatch) -> Result<f64>>,
    pub analytic: DenseMatrix,
    pub near_kink: bool,
}

/// One (loss, analytic gradient) pair, instantiated per shape and seed.
pub struct OracleCase {
    pub method: &'static str,
    pub variant: &'static str,
    pub build: Box<dyn Fn(usize, usize, u64, f64) -> Result<Probe>>,
}

fn case_rng(seed: u64, n: usize, c: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((n * 1000 + c) as u64);
    r
}

fn gaussian(n: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(n, c, |_, _| StandardNormal.sample(rng))
}

fn unit(n: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureBatch {
    FeatureBatch::l2_normalized(gaussian(n, c, rng))
}

/// Correlation state after a few random batch updates (a frozen snapshot).
fn random_correlation(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<CorrelationState> {
    let mut corr = CorrelationState::new(c, 0.9)?;
    for _ in 0..3 {
        corr.update(&unit(n.max(c), c, rng), &unit(n.max(c), c, rng))?;
    }
    Ok(corr)
}

fn views(u1: &FeatureBatch, u2: &FeatureBatch) -> Result<BatchViews> {
    BatchViews::new(u1.clone(), u2.clone(), TargetKind::StopGradient)
}

/// The six oracle pairs.
pub fn oracle_cases() -> Vec<OracleCase> {
    vec![
        OracleCase {
            method: "moco",
            variant: "infonce_bank",
            build: Box::new(|n, c, seed, _h| {
                let mut rng = case_rng(seed, n, c);
                let (u1, u2) = (unit(n, c, &mut rng), unit(n, c, &mut rng));
                let bank = MemoryBank::random(ORACLE_BANK_SIZE, c, &mut rng)?;
                let analytic = contrastive_grad(&views(&u1, &u2)?, ContrastiveVariant::Moco(&bank), TAU)?.into_total();
                let target = u2.into_matrix();
                Ok(Probe {
                    x: u1,
                    loss: Box::new(move |x| infonce_directional(x.matrix(), &target, Negatives::Bank(&bank), TAU)),
                    analytic,
                    near_kink: false,
                })
            }),
        },
        OracleCase {
            method: "simclr",
            variant: "full_batch",
            build: Box::new(|n, c, seed, _h| {
                let mut rng = case_rng(seed, n, c);
                let (u1, u2) = (unit(n, c, &mut rng), unit(n, c, &mut rng));
                let analytic = contrastive_grad(&views(&u1, &u2)?, ContrastiveVariant::SimclrFull, TAU)?.into_total();
                let target = u2.into_matrix();
                Ok(Probe {
                    x: u1,
                    loss: Box::new(move |x| simclr_batch_loss(x.matrix(), &target, TAU)),
                    analytic,
                    near_kink: false,
                })
            }),
        },
        OracleCase {
            method: "byol_directpred",
            variant: "full",
            build: Box::new(|n, c, seed, _h| {
                let mut rng = case_rng(seed, n, c);
                let (u1, u2) = (unit(n, c, &mut rng), unit(n, c, &mut rng));
                let corr = random_correlation(n, c, &mut rng)?;
                let pred = compute_predictor(&corr, 0.1)?;
                let analytic = asymmetric_grad(
                    &views(&u1, &u2)?,
                    &corr,
                    &pred,
                    AsymmetricVariant::Full,
                    DenominatorForm::RelativeEps,
                )?
                .into_total();
                let (target, wh) = (u2.into_matrix(), pred.wh);
                Ok(Probe {
                    x: u1,
                    loss: Box::new(move |x| asymmetric_directional_loss(x.matrix(), &target, &wh)),
                    analytic,
                    near_kink: false,
                })
            }),
        },
        OracleCase {
            method: "barlow",
            variant: "full",
            build: Box::new(|n, c, seed, _h| {
                let mut rng = case_rng(seed, n, c);
                let (u1, u2) = (unit(n, c, &mut rng), unit(n, c, &mut rng));
                let lambda = 0.5;
                let analytic =
                    barlow_grad(&views(&u1, &u2)?, lambda, BarlowVariant::Full, NormMode::None)?.into_total();
                Ok(Probe {
                    x: u1,
                    loss: Box::new(move |x| barlow_loss(&views(x, &u2)?, lambda, NormMode::None)),
                    analytic,
                    near_kink: false,
                })
            }),
        },
        OracleCase {
            method: "vicreg",
            variant: "full",
            build: Box::new(|n, c, seed, h| {
                let mut rng = case_rng(seed, n, c);
                let (u1, u2) = (unit(n, c, &mut rng), unit(n, c, &mut rng));
                let w = VicregWeights {
                    lambda1: 1.0,
                    lambda2: 1.0,
                    gamma: 1.0,
                };
                let near_kink = col_std(&u1)?.iter().any(|s| (s - w.gamma).abs() < 10.0 * h);
                let analytic = vicreg_grad(&views(&u1, &u2)?, VicregVariant::Full(w))?.into_total();
                let target = u2.into_matrix();
                Ok(Probe {
                    x: u1,
                    loss: Box::new(move |x| vicreg_directional_loss(x.matrix(), &target, w)),
                    analytic,
                    near_kink,
                })
            }),
        },
        OracleCase {
            method: "unigrad",
            variant: "frozen_f",
            build: Box::new(|n, c, seed, _h| {
                let mut rng = case_rng(seed, n, c);
                let (u1, u2) = (unit(n, c, &mut rng), unit(n, c, &mut rng));
                let corr = random_correlation(n, c, &mut rng)?;
                let lambda = 100.0;
                let analytic = unigrad_grad(&views(&u1, &u2)?, &corr, lambda)?.into_total();
                let (target, f) = (u2.into_matrix(), corr.f().clone());
                Ok(Probe {
                    x: u1,
                    loss: Box::new(move |x| unigrad_directional_loss(x.matrix(), &target, &f, lambda)),
                    analytic,
                    near_kink: false,
                })
            }),
        },
    ]
}

pub fn run_oracle_case(case: &OracleCase, n: usize, c: usize, seed: u64, cfg: &VerifyConfig) -> VerifyRow {
    let outcome = (|| -> Result<(f64, bool)> {
        let probe = (case.build)(n, c, seed, cfg.h)?;
        let numeric = numeric_grad(&probe.loss, &probe.x, cfg.h)?;
        let report = grad_check_with_h(&probe.analytic, &numeric, DEFAULT_REL_FLOOR, cfg.h)?;
        Ok((report.max_rel_err, probe.near_kink))
    })();
    let (err, status) = match outcome {
        Ok((_, true)) => (f64::NAN, CheckStatus::Skipped),
        Ok((e, false)) if e < cfg.tol => (e, CheckStatus::Pass),
        Ok((e, false)) => (e, CheckStatus::Fail),
        Err(_) => (f64::NAN, CheckStatus::Fail),
    };
    VerifyRow {
        method: case.method.to_string(),
        variant: case.variant.to_string(),
        n,
        c,
        seed,
        max_rel_err: err,
        status,
    }
}

pub fn run_oracle_suite(cases: &[OracleCase], cfg: &VerifyConfig) -> Vec<VerifyRow> {
    let mut rows = Vec::new();
    for case in cases {
        for &(n, c) in &cfg.sizes {
            for seed in 0..cfg.seeds {
                rows.push(run_oracle_case(case, n, c, seed, cfg));
            }
        }
    }
    rows
}

fn structural_row(method: &str, variant: &str, n: usize, c: usize, seed: u64, measured: Result<f64>, tol: f64) -> VerifyRow {
    let (err, status) = match measured {
        Ok(e) if e <= tol => (e, CheckStatus::Pass),
        Ok(e) => (e, CheckStatus::Fail),
        Err(_) => (f64::NAN, CheckStatus::Fail),
    };
    VerifyRow {
        method: method.into(),
        variant: variant.into(),
        n,
        c,
        seed,
        max_rel_err: err,
        status,
    }
}

/// `max |total − scale·(g_pos + λ g_neg)|`, relative to the largest term.
pub fn decomposition_residual(d: &GradientDecomposition) -> f64 {
    let mut worst = 0.0f64;
    let mut mag = 1.0f64;
    for i in 0..d.rows() {
        let (s, l) = (d.scale()[i], d.balance()[i]);
        for ((t, p), q) in d.total().row(i).iter().zip(d.g_pos().row(i)).zip(d.g_neg().row(i)) {
            let expect = s * (p + l * q);
            worst = worst.max((t - expect).abs());
            mag = mag.max(t.abs()).max((s * p).abs()).max((s * l * q).abs());
        }
    }
    worst / mag
}

/// Centered, ℓ₂-normalized rows: each sample is paired with its negation.
fn centered_unit(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<FeatureBatch> {
    let half = unit(n.div_ceil(2), c, rng);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n / 2 {
        rows.push(half.row(i).to_vec());
        rows.push(half.row(i).iter().map(|v| -v).collect());
    }
    Ok(FeatureBatch::l2_normalized(DenseMatrix::from_rows(&rows)?))
}

/// Exact algebraic relations between variants plus the decomposition contract for every method.
pub fn structural_checks(cfg: &VerifyConfig) -> Vec<VerifyRow> {
    let mut rows = Vec::new();
    for &(n, c) in &cfg.sizes {
        for seed in 0..cfg.seeds {
            let mut rng = case_rng(seed ^ 0x5eed, n, c);
            let (u1, u2) = (unit(n, c, &mut rng), unit(n, c, &mut rng));

            let simclr = (|| {
                let bv = views(&u1, &u2)?;
                let full = contrastive_grad(&bv, ContrastiveVariant::SimclrFull, TAU)?;
                let simple = contrastive_grad(&bv, ContrastiveVariant::SimclrSimplified, TAU)?;
                let second = simclr_target_term(&bv, TAU)?;
                Ok(full.total().sub(&second)?.max_abs_diff(simple.total()))
            })();
            rows.push(structural_row("simclr", "full_minus_target_eq_simplified", n, c, seed, simclr, 1e-12));

            let directpred = (|| {
                let corr = random_correlation(n, c, &mut rng.clone())?;
                let pred = compute_predictor(&corr, 0.0)?;
                let bv = views(&u1, &u2)?;
                let full = asymmetric_grad(&bv, &corr, &pred, AsymmetricVariant::Full, DenominatorForm::RelativeEps)?;
                let simple =
                    asymmetric_grad(&bv, &corr, &pred, AsymmetricVariant::Simplified, DenominatorForm::RelativeEps)?;
                Ok(full.total().max_abs_diff(simple.total()))
            })();
            rows.push(structural_row("byol_directpred", "full_eq_simplified_at_eps0", n, c, seed, directpred, 1e-10));

            let barlow = (|| {
                let bv = views(&u1, &u2)?;
                let full = barlow_grad(&bv, 5e-3, BarlowVariant::Full, NormMode::L2)?;
                let diag = barlow_grad(&bv, 5e-3, BarlowVariant::DiagSubstituted(0.1), NormMode::L2)?;
                let same_neg = full.g_neg() == diag.g_neg() && full.balance() == diag.balance() && full.scale() == diag.scale();
                Ok(if same_neg { 0.0 } else { f64::INFINITY })
            })();
            rows.push(structural_row("barlow", "diag_differs_only_in_g_pos", n, c, seed, barlow, 0.0));

            if n % 2 == 0 {
                let vicreg = (|| {
                    let v1 = centered_unit(n, c, &mut rng.clone())?;
                    let bv = views(&v1, &u2)?;
                    let w = VicregWeights {
                        lambda1: 0.04,
                        lambda2: 1.0,
                        gamma: 1.0,
                    };
                    let full = vicreg_full_terms(&bv, w)?;
                    let simple = vicreg_grad(&bv, VicregVariant::Simplified { balance: full.balance })?;
                    Ok(full.decorrelation.max_abs_diff(simple.g_neg()))
                })();
                rows.push(structural_row("vicreg", "simplified_eq_full_first_term", n, c, seed, vicreg, 1e-10));
            }

            for method in Method::ALL {
                let contract = (|| {
                    let mut r = rng.clone();
                    let corr = random_correlation(n, c, &mut r)?;
                    let pred = compute_predictor(&corr, 0.1)?;
                    let bank = MemoryBank::random(ORACLE_BANK_SIZE, c, &mut r)?;
                    let state = GradState {
                        bank: Some(&bank),
                        corr: Some(&corr),
                        predictor: Some(&pred),
                    };
                    let d = unified_grad(method, &views(&u1, &u2)?, &MethodConfig::default(), state)?;
                    Ok(decomposition_residual(&d))
                })();
                rows.push(structural_row(method.id(), "decomposition_contract", n, c, seed, contract, 1e-12));
            }
        }
    }
    rows
}

/// Full suite: oracle pairs followed by structural checks.
pub fn run_verify(cfg: &VerifyConfig) -> VerifyReport {
    let start = Instant::now();
    let mut rows = run_oracle_suite(&oracle_cases(), cfg);
    rows.extend(structural_checks(cfg));
    VerifyReport {
        rows,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            seeds: 2,
            sizes: vec![(2, 4), (4, 8)],
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn small_suite_passes() {
        let report = run_verify(&small());
        assert!(report.all_passed(), "{}", report.summary_table());
        assert_eq!(report.exit_code(), 0);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("method,variant,N,C,seed,max_rel_err,pass\n"));
        assert_eq!(text.lines().count(), report.rows.len() + 1);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut cases = oracle_cases();
        let inner = cases.remove(5).build;
        let corrupted = OracleCase {
            method: "unigrad",
            variant: "corrupted",
            build: Box::new(move |n, c, seed, h| {
                let mut p = inner(n, c, seed, h)?;
                p.analytic = p.analytic.scale(1.01);
                Ok(p)
            }),
        };
        let report = VerifyReport {
            rows: run_oracle_suite(&[corrupted], &small()),
            elapsed_secs: 0.0,
        };
        assert!(!report.all_passed());
        assert_eq!(report.exit_code(), 1);
        assert!(report.summary_table().contains("FAIL"));
    }

    #[test]
    fn residual_detects_broken_total() {
        let g = DenseMatrix::identity(2);
        let d = GradientDecomposition::uniform(g.clone(), g, 2.0, 0.5).unwrap();
        assert_eq!(decomposition_residual(&d), 0.0);
    }
}
