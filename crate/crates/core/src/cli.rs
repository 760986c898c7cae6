//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::chaos::{self, BaseLaw, ChaosCoeffs, ChaosCoupling, ChaosError};
use crate::graphs::{self, GraphCoupling, GraphError, GraphModel};
use crate::matlite::{self, MatError, Square, SymMatrix};
use crate::mc::{self, AbcOptions, Coupling, McConfig, McError, Moments4, TestFunction, Welford};
use crate::report::{BoundRecord, Check, Provenance, Report, Rule};
use crate::stein::{self, AbcStats, DerivBounds, NonSmoothInputs, SteinError};
use crate::ustats::{self, Kernel, UstatError};

pub const SEED_ENV: &str = "STEIN_EMBED_SEED";
pub const DEFAULT_SEED: u64 = 42;

/// Exchangeable-pair normal approximation: identities, bounds and Monte
/// Carlo checks.
#[derive(Debug, Parser)]
#[command(name = "stein-embed", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Base seed; overrides STEIN_EMBED_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for Monte Carlo (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Leave the wall-clock time out of the report.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form moments of (T, V, U) in G(n, p).
    GraphMoments {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: f64,
        /// Compare against exhaustive enumeration (n <= 6).
        #[arg(long)]
        enumerate: bool,
    },
    /// Coupling identities for the edge-resampling pair.
    GraphVerify {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
    /// Smooth-function bounds against the empirical discrepancy.
    GraphBound {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        h: String,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
    /// Drift identity, Λ⁻¹ and Σ for a U-statistic kernel.
    UstatVerify {
        /// `rademacher-mean`, `sample-variance`, or a kernel table file.
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
    /// U-statistic bound against the empirical discrepancy.
    UstatBound {
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        h: String,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
    /// Chaos drift identity, covariance and smooth bound.
    ChaosVerify {
        #[arg(long)]
        coeffs: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        /// `rademacher`, `uniform` or `normal`.
        #[arg(long, default_value = "rademacher")]
        base: String,
        /// Test function; defaults to the cosine of the coordinate sum.
        #[arg(long)]
        h: Option<String>,
    },
    /// Evaluate the generic bounds from given statistics.
    SteinEval {
        #[arg(long, num_args = 3, value_names = ["A", "B", "C"], allow_negative_numbers = true)]
        abc: Vec<f64>,
        #[arg(long)]
        h1: f64,
        #[arg(long)]
        h2: f64,
        #[arg(long)]
        h3: f64,
        #[arg(long)]
        d: usize,
        /// ‖Σ‖ (supremum norm).
        #[arg(long)]
        signorm: f64,
        #[arg(long, num_args = 5, value_names = ["A'", "B'", "C'", "a", "gamma"], allow_negative_numbers = true)]
        nonsmooth: Option<Vec<f64>>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ustat(#[from] UstatError),
    #[error(transparent)]
    Chaos(#[from] ChaosError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error(transparent)]
    Stein(#[from] SteinError),
    #[error(transparent)]
    Mat(#[from] MatError),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Flag, then environment, then the default.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Parses `args`, runs the command and writes the report. Returns the
/// process exit code: 0 when every check passes, 1 on a failed check, 2 on
/// usage errors.
pub fn main_with_args<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match run(&cli) {
        Ok(report) => {
            let text = match cli.common.format {
                Format::Json => report.to_json() + "\n",
                Format::Csv => report.to_csv(),
            };
            let _ = out.write_all(text.as_bytes());
            exit_code(&report)
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

/// 0 when every check in `report` passed, 1 otherwise.
pub fn exit_code(report: &Report) -> i32 {
    if report.pass {
        0
    } else {
        1
    }
}

pub fn run(cli: &Cli) -> Result<Report, CliError> {
    let started = Instant::now();
    let seed = resolve_seed(cli.common.seed)?;
    let mut cfg = McConfig::new(seed);
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        cfg = cfg.with_threads(t);
    }
    let mut report = match &cli.command {
        Command::GraphMoments { n, p, enumerate } => graph_moments(*n, *p, *enumerate, seed)?,
        Command::GraphVerify { n, p, samples } => graph_verify(*n, *p, *samples, &cfg)?,
        Command::GraphBound { n, p, h, samples } => graph_bound(*n, *p, h, *samples, &cfg)?,
        Command::UstatVerify { kernel, n, samples } => ustat_verify(kernel, *n, *samples, &cfg)?,
        Command::UstatBound { kernel, n, h, samples } => ustat_bound(kernel, *n, h, *samples, &cfg)?,
        Command::ChaosVerify {
            coeffs,
            d,
            samples,
            base,
            h,
        } => chaos_verify(coeffs, *d, *samples, base, h.as_deref(), &cfg)?,
        Command::SteinEval {
            abc,
            h1,
            h2,
            h3,
            d,
            signorm,
            nonsmooth,
        } => stein_eval(abc, DerivBounds::new(*h1, *h2, *h3), *d, *signorm, nonsmooth.as_deref(), seed)?,
    };
    if !cli.common.no_timestamp {
        report.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    Ok(report)
}

fn need_samples(samples: u64) -> Result<(), CliError> {
    if samples < 2 {
        Err(usage("--samples must be at least 2"))
    } else {
        Ok(())
    }
}

fn rows(m: &Square) -> Vec<Vec<f64>> {
    m.rows()
}

fn test_function(name: &str, d: usize) -> Result<TestFunction, CliError> {
    let h = TestFunction::parse(name)?;
    if h.dim() != d {
        return Err(usage(format!("test function {name} has {} coefficients, need {d}", h.dim())));
    }
    Ok(h)
}

fn push_commute_check(report: &mut Report, name: &str, lambda: &matlite::LowerMatrix, sigma: &SymMatrix) -> Result<(), CliError> {
    let r = stein::consistency_check(lambda, sigma)?;
    let scale = lambda.as_square().supnorm() * sigma.supnorm();
    report.check(Check::new(name, r, 0.0, 1e-12 * scale, Rule::Abs, Provenance::Exact));
    Ok(())
}

fn push_second_moment_checks(report: &mut Report, prefix: &str, chk: &stein::SecondMomentCheck) {
    let d = chk.target.dim();
    for i in 0..d {
        for j in i..d {
            let e = &chk.estimate[i * d + j];
            report.check(Check::sigma(&format!("{prefix}[{i}][{j}]"), e, chk.target.get(i, j), mc::SIGMA_TOL));
        }
    }
}

fn graph_moments(n: usize, p: f64, enumerate: bool, seed: u64) -> Result<Report, CliError> {
    let model = GraphModel::new(n, p)?;
    let em = graphs::exact_moments(&model);
    let lambda = graphs::lambda_graph(&model);
    let mut r = Report::new("graph-moments", seed);
    r.param("n", n).param("p", p).param("enumerate", enumerate);
    r.value("means", em.means)
        .value("cov", em.cov)
        .value("sigma1", rows(em.sigma1.as_square()))
        .value("sigma0", rows(em.sigma0.as_square()))
        .value("lambda", rows(lambda.as_square()));

    push_commute_check(&mut r, "lambda_sigma1_commute", &lambda, &em.sigma1)?;
    let ev = matlite::psd_eigencheck(&em.sigma0)?;
    let v2 = 1.0 + 4.0 * p * p + p.powi(4);
    r.check(Check::new("sigma0_top_eigenvalue", ev[2], 0.5 * p * (1.0 - p) * v2, 1e-12, Rule::Abs, Provenance::Exact));
    r.check(Check::new("sigma0_null_eigenvalues", ev[0].abs().max(ev[1].abs()), 0.0, 1e-12, Rule::Abs, Provenance::Exact));

    if enumerate {
        let en = graphs::enumerate_exact(&model)?;
        r.value("enumerated_graphs", en.graphs);
        let names = ["t", "v", "u"];
        for k in 0..3 {
            r.check(Check::new(&format!("mean_{}", names[k]), en.means[k], em.means[k], 1e-10, Rule::Rel, Provenance::Exact));
        }
        for k in 0..3 {
            for l in k..3 {
                let tag = format!("{}{}", names[k], names[l]);
                r.check(Check::new(&format!("cov_{tag}"), en.cov[k][l], em.cov[k][l], 1e-10, Rule::Rel, Provenance::Exact));
                r.check(Check::new(
                    &format!("sigma1_{tag}"),
                    en.sigma1.get(k, l),
                    em.sigma1.get(k, l),
                    1e-10,
                    Rule::Rel,
                    Provenance::Exact,
                ));
            }
        }
    }
    Ok(r)
}

fn graph_verify(n: usize, p: f64, samples: u64, cfg: &McConfig) -> Result<Report, CliError> {
    need_samples(samples)?;
    let model = GraphModel::new(n, p)?;
    let sigma1 = graphs::sigma1(&model);
    let lambda = graphs::lambda_graph(&model);
    let mut r = Report::new("graph-verify", cfg.seed);
    r.param("n", n).param("p", p).param("samples", samples);

    let trials = samples.min(1000);
    let stage = cfg.stage(1);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let g = graphs::sample(&model, &mut mc::stream_rng(stage.seed, t));
        let (res, scale) = graphs::drift_residual(&g, &model);
        for k in 0..3 {
            worst = worst.max(res[k].abs() / scale[k].max(f64::MIN_POSITIVE));
        }
    }
    r.value("drift_identity_graphs", trials);
    r.check(Check::new("drift_identity_relative_residual", worst, 0.0, 1e-12, Rule::Abs, Provenance::Exact));

    push_commute_check(&mut r, "lambda_sigma1_commute", &lambda, &sigma1)?;

    let coupling = GraphCoupling::new(model);
    let chk = stein::pair_second_moment_check(&coupling, &lambda, &sigma1, samples, &cfg.stage(2))?;
    push_second_moment_checks(&mut r, "pair_second_moment", &chk);

    let exact3 = graphs::third_moments_exact(&model);
    let mc3 = graphs::third_moments_mc(&model, samples, &cfg.stage(3))?;
    for (k, name) in ["t", "v", "u"].iter().enumerate() {
        r.check(Check::sigma(&format!("third_abs_moment_{name}"), &mc3[k], exact3[k], mc::SIGMA_TOL));
    }
    if n <= graphs::ENUMERATION_MAX_N {
        let en3 = graphs::third_moments_enumerated(&model)?;
        for (k, name) in ["t", "v", "u"].iter().enumerate() {
            r.check(Check::new(&format!("third_abs_moment_{name}_enumerated"), en3[k], exact3[k], 1e-10, Rule::Rel, Provenance::Exact));
        }
    }
    let single = graphs::third_moments_single_arrangement(&model);
    r.value("third_abs_moments_exact", exact3)
        .value("third_abs_moments_single_arrangement", single);
    r.note(
        "third absolute moments of V and U are checked against the expansion that counts all three \
         arrangements of a repeated neighbour index; the single-arrangement values are recorded for comparison",
    );

    // conditional products of one fixed graph against inner sampling
    let g = graphs::sample(&model, &mut mc::stream_rng(cfg.stage(4).seed, u64::MAX));
    let exact = graphs::cond_products(&g, &model);
    let inner = mc::map_reduce(
        &cfg.stage(5),
        samples,
        || vec![Welford::default(); 9],
        |rng, acc| {
            let (i, j) = graphs::random_pair(n, rng);
            let on = rand::Rng::random::<f64>(rng) < p;
            let d = graphs::edge_delta(&g, i, j, on).as_f64();
            for k in 0..3 {
                for l in 0..3 {
                    acc[k * 3 + l].push(d[k] * d[l]);
                }
            }
        },
    )?;
    for k in 0..3 {
        for l in k..3 {
            let e = inner[k * 3 + l].estimate(cfg.stage(5).seed);
            r.check(Check::sigma(&format!("cond_products[{k}][{l}]"), &e, exact[k][l], mc::SIGMA_TOL));
        }
    }

    // variance over graphs of the conditional products
    let var = mc::map_reduce(
        &cfg.stage(6),
        samples,
        || vec![Moments4::default(); 3],
        |rng, acc| {
            let g = graphs::sample(&model, rng);
            let cp = graphs::cond_products(&g, &model);
            acc[0].push(cp[0][0]);
            acc[1].push(cp[0][1]);
            acc[2].push(cp[0][2]);
        },
    )?;
    let targets = [
        ("cond_var_tt", graphs::cond_tt_variance(&model)),
        ("cond_var_tv", graphs::cond_tv_variance(&model)),
        ("cond_var_tu", graphs::cond_tu_variance(&model)),
    ];
    for (k, (name, target)) in targets.iter().enumerate() {
        let mut c = Check::sigma_raw(name, var[k].variance(), var[k].variance_stderr(), *target, mc::SIGMA_TOL);
        c.provenance = Provenance::Mc;
        r.check(c);
    }
    Ok(r)
}

fn graph_bound(n: usize, p: f64, h: &str, samples: u64, cfg: &McConfig) -> Result<Report, CliError> {
    need_samples(samples)?;
    let model = GraphModel::new(n, p)?;
    let h = test_function(h, 3)?;
    let db = h.bounds();
    let sigma1 = graphs::sigma1(&model);
    let sigma0 = graphs::sigma0(p);
    let mut r = Report::new("graph-bound", cfg.seed);
    r.param("n", n).param("p", p).param("h", &h.name).param("samples", samples);

    let prop = graphs::prop_bound(n, &db);
    let cor = graphs::corollary_bound(n, &db);
    r.bound(
        BoundRecord::new("prop_bound", prop, Provenance::PaperFormula)
            .part("h1", db.h1)
            .part("h2", db.h2)
            .part("h3", db.h3),
    );
    r.bound(BoundRecord::new("corollary_bound", cor, Provenance::PaperFormula));

    let sampler = |rng: &mut mc::StreamRng| graphs::sample_scaled(&model, rng);
    let half1 = matlite::sym_sqrt(&sigma1)?;
    let half0 = matlite::sym_sqrt(&sigma0)?;
    let d1 = mc::discrepancy(&h, sampler, &half1, samples, &cfg.stage(1))?;
    let d0 = mc::discrepancy(&h, sampler, &half0, samples, &cfg.stage(2))?;
    r.value("discrepancy_sigma1", d1).value("discrepancy_sigma0", d0);
    r.check(Check::dominated("discrepancy_sigma1_vs_prop_bound", d1.mean.abs(), d1.stderr, prop, mc::SIGMA_TOL, Provenance::Mc));
    r.check(Check::dominated("discrepancy_sigma0_vs_corollary_bound", d0.mean.abs(), d0.stderr, cor, mc::SIGMA_TOL, Provenance::Mc));

    let gap = stein::cov_perturbation_bound(&sigma1, &sigma0, db.h2)?;
    let gap_bound = 0.5 * db.h2 * graphs::sigma_gap_bound(n);
    r.check(Check::new("cov_perturbation_within_bound", gap, gap_bound, 0.0, Rule::AtMost, Provenance::Exact));

    let coupling = GraphCoupling::new(model);
    let lambda = graphs::lambda_graph(&model);
    let weights = matlite::lambda_colsums(matlite::lower_inverse(&lambda)?.as_square());
    let abc = mc::abc_from_pairs(&coupling, &weights, &AbcOptions::exact(samples.min(100_000)), &cfg.stage(3))?;
    let (lo, hi) = stein::smooth_bound_interval(&abc.stats, &db, 3, sigma1.supnorm(), mc::SIGMA_TOL);
    let point = stein::smooth_bound(&abc.stats, &db, 3, sigma1.supnorm());
    r.bound(
        BoundRecord::new("smooth_bound", point, Provenance::Mc)
            .part("A", abc.stats.a)
            .part("B", abc.stats.b)
            .part("C", abc.stats.c)
            .part("stats", abc.stats)
            .part("lambda_weights", &weights)
            .part("interval", [lo, hi]),
    );
    r.check(Check::dominated("discrepancy_sigma1_vs_smooth_bound", d1.mean.abs(), d1.stderr, hi, mc::SIGMA_TOL, Provenance::Mc));
    Ok(r)
}

/// Number of random samples whose subset sums fit in the work budget.
fn affordable(work_per_trial: f64, wanted: u64) -> u64 {
    let cap = (ustats::SUBSET_BUDGET / work_per_trial.max(1.0)).floor() as u64;
    wanted.min(cap.max(1))
}

fn ustat_verify(kernel: &str, n: usize, samples: u64, cfg: &McConfig) -> Result<Report, CliError> {
    need_samples(samples)?;
    let k = ustats::load_kernel(kernel)?;
    let k: &dyn Kernel = k.as_ref();
    let d = k.order();
    if n < d.max(2) {
        return Err(usage(format!("n must be at least {}", d.max(2))));
    }
    let mut r = Report::new("ustat-verify", cfg.seed);
    r.param("kernel", k.name()).param("n", n).param("samples", samples);

    let work: f64 = (1..=d).map(|j| j as f64 * graphs::choose(n, j)).sum();
    let trials = affordable(work, samples.min(1000));
    let stage = cfg.stage(1);
    let mut worst = 0.0f64;
    let mut worst_direct = 0.0f64;
    for t in 0..trials {
        let x = ustats::sample_points(k, n, &mut mc::stream_rng(stage.seed, t));
        let res = ustats::cond_identity_residual(&x, k)?;
        worst = worst.max(res.max_relative());
        if k.redraw_rule().is_some() {
            let direct = ustats::cond_mean_by_redraw(&x, k)?;
            for ((a, b), s) in direct.iter().zip(&res.rhs).zip(&res.scale) {
                worst_direct = worst_direct.max((a - b).abs() / s);
            }
        }
    }
    r.value("drift_identity_samples", trials);
    r.check(Check::new("drift_identity_relative_residual", worst, 0.0, 1e-12, Rule::Abs, Provenance::Exact));
    if k.redraw_rule().is_some() {
        r.check(Check::new("drift_by_redraw_relative_residual", worst_direct, 0.0, 1e-12, Rule::Abs, Provenance::Exact));
    }

    let lambda = ustats::lambda_ustat(n, d);
    let inv = matlite::lower_inverse(&lambda)?;
    let closed = ustats::lambda_ustat_inverse(n, d);
    let diff = (inv.as_square() - closed.as_square()).supnorm();
    r.check(Check::new("lambda_inverse_closed_form", diff, 0.0, 1e-12 * n as f64, Rule::Abs, Provenance::Exact));
    let cs = matlite::lambda_colsums(closed.as_square());
    for (l, c) in cs.iter().enumerate() {
        let lf = (l + 1) as f64;
        let want = (d as f64 - lf + 1.0) * n as f64 / lf;
        r.check(Check::new(&format!("lambda_weight[{l}]"), *c, want, 1e-12, Rule::Rel, Provenance::Exact));
        r.check(Check::new(&format!("lambda_weight[{l}]_at_most_dn"), *c, (d * n) as f64, 0.0, Rule::AtMost, Provenance::Exact));
    }
    r.value("lambda_weights", &cs);

    let closed_u = k.closed_form_u(&vec![0.0; n]).is_some();
    let per_sample: f64 = if closed_u {
        n as f64
    } else {
        (1..=d).map(|j| graphs::choose(n, j)).sum()
    };
    let sigma_samples = affordable(per_sample / 1e3, samples).max(2);
    let est = ustats::estimate_sigma(k, n, sigma_samples, &cfg.stage(2))?;
    r.value("sigma_samples", sigma_samples)
        .value("sigma_mc", rows(est.sigma.as_square()))
        .value("sigma_mc_stderr", rows(&est.stderr));
    if let Some(exact) = ustats::exact_sigma(k, n) {
        r.value("sigma_exact", rows(exact.as_square()));
        for i in 0..d {
            for j in i..d {
                r.check(Check::sigma_raw(
                    &format!("sigma[{i}][{j}]"),
                    est.sigma.get(i, j),
                    est.stderr.get(i, j),
                    exact.get(i, j),
                    mc::SIGMA_TOL,
                ));
            }
        }
        push_commute_check(&mut r, "lambda_sigma_commute", &lambda, &exact)?;
    }
    let res = stein::consistency_residual(&lambda, &est.sigma)?;
    let se = stein::consistency_stderr(&lambda, &est.stderr)?;
    for i in 0..d {
        for j in (i + 1)..d {
            r.check(Check::sigma_raw(&format!("lambda_sigma_mc_commute[{i}][{j}]"), res.get(i, j), se.get(i, j), 0.0, mc::SIGMA_TOL));
        }
    }
    if let Some(lim) = ustats::limit_sigma(k) {
        r.value("sigma_limit", rows(lim.as_square()))
            .value("sigma_limit_z", est.z_scores(&lim));
        r.note(
            "the large-n covariance has entries k*l*Var psi_1 (rank one); it does not have all entries equal \
             to Var psi_1 as sometimes stated",
        );
    }

    if let Some(rho) = k.rho_exact() {
        let e = ustats::estimate_rho(k, samples, &cfg.stage(3))?;
        r.value("rho_exact", rho);
        r.check(Check::sigma("rho_mc", &e, rho, mc::SIGMA_TOL));
    }
    Ok(r)
}

fn ustat_bound(kernel: &str, n: usize, h: &str, samples: u64, cfg: &McConfig) -> Result<Report, CliError> {
    need_samples(samples)?;
    let k = ustats::load_kernel(kernel)?;
    let k: &dyn Kernel = k.as_ref();
    let d = k.order();
    if n < d {
        return Err(usage(format!("n must be at least {d}")));
    }
    let h = test_function(h, d)?;
    let db = h.bounds();
    let mut r = Report::new("ustat-bound", cfg.seed);
    r.param("kernel", k.name()).param("n", n).param("h", &h.name).param("samples", samples);

    if !k.closed_form_u(&vec![0.0; n]).is_some() {
        let work: f64 = (1..=d).map(|j| graphs::choose(n, j)).sum::<f64>() * samples as f64;
        if work > 1e3 * ustats::SUBSET_BUDGET {
            return Err(UstatError::BudgetExceeded(work).into());
        }
    }
    let (bound, rho_prov) = match k.rho_exact() {
        Some(rho) => {
            r.value("rho", rho);
            (ustats::thm_bound(n, d, rho, &db), Provenance::Exact)
        }
        None => {
            let e = ustats::estimate_rho(k, samples, &cfg.stage(1))?;
            let (lo, hi) = ustats::thm_bound_interval(n, d, &e, &db, mc::SIGMA_TOL);
            r.value("rho", e).value("bound_interval", [lo, hi]);
            (hi, Provenance::Mc)
        }
    };
    r.bound(
        BoundRecord::new("thm_bound", bound, rho_prov)
            .part("h2", db.h2)
            .part("h3", db.h3)
            .part("d", d),
    );

    let sigma = match ustats::exact_sigma(k, n) {
        Some(s) => s,
        None => ustats::estimate_sigma(k, n, samples, &cfg.stage(2))?.sigma,
    };
    let half = matlite::sym_sqrt(&sigma)?;
    let disc = mc::discrepancy(
        &h,
        |rng| ustats::compute_u(&ustats::sample_points(k, n, rng), k).expect("checked").w,
        &half,
        samples,
        &cfg.stage(3),
    )?;
    r.value("discrepancy", disc).value("sigma", rows(sigma.as_square()));
    r.check(Check::dominated("discrepancy_vs_thm_bound", disc.mean.abs(), disc.stderr, bound, mc::SIGMA_TOL, Provenance::Mc));
    Ok(r)
}

fn chaos_verify(path: &Path, d: usize, samples: u64, base: &str, h: Option<&str>, cfg: &McConfig) -> Result<Report, CliError> {
    need_samples(samples)?;
    if d == 0 {
        return Err(usage("--d must be at least 1"));
    }
    let coeffs = ChaosCoeffs::load(path, d)?;
    let base = BaseLaw::parse(base)?;
    let h = match h {
        Some(name) => test_function(name, d)?,
        None => TestFunction::cosine(vec![1.0; d]),
    };
    let mut r = Report::new("chaos-verify", cfg.seed);
    r.param("coeffs", path.display().to_string())
        .param("d", d)
        .param("samples", samples)
        .param("base", base)
        .param("h", &h.name)
        .param("terms", coeffs.len());

    let trials = samples.min(1000);
    let stage = cfg.stage(1);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let x = base.sample_vec(d, &mut mc::stream_rng(stage.seed, t));
        worst = worst.max(chaos::cond_identity_residual(&x, &coeffs, base).max_relative());
    }
    r.check(Check::new("drift_identity_relative_residual", worst, 0.0, 1e-12, Rule::Abs, Provenance::Exact));

    let lambda = chaos::lambda_chaos(d);
    r.value("lambda_diagonal", (0..d).map(|i| lambda.get(i, i)).collect::<Vec<_>>());
    let sigma = chaos::exact_sigma(&coeffs, base);
    r.value("sigma_exact_diagonal", (0..d).map(|i| sigma.get(i, i)).collect::<Vec<_>>());

    let est = mc::estimate_many(&cfg.stage(2), samples, d + d * d, |rng, out| {
        let j = chaos::eval_j(&base.sample_vec(d, rng), &coeffs);
        out[..d].copy_from_slice(&j);
        for a in 0..d {
            for b in 0..d {
                out[d + a * d + b] = j[a] * j[b];
            }
        }
    })?;
    for a in 0..d {
        r.check(Check::sigma(&format!("mean_j[{a}]"), &est[a], 0.0, mc::SIGMA_TOL));
        for b in a..d {
            r.check(Check::sigma(&format!("sigma[{a}][{b}]"), &est[d + a * d + b], sigma.get(a, b), mc::SIGMA_TOL));
        }
    }

    let coupling = ChaosCoupling::new(coeffs, base);
    let chk = stein::pair_second_moment_check(&coupling, &lambda, &sigma, samples, &cfg.stage(3))?;
    push_second_moment_checks(&mut r, "pair_second_moment", &chk);

    let weights = matlite::lambda_colsums(matlite::lower_inverse(&lambda)?.as_square());
    let abc = mc::abc_from_pairs(&coupling, &weights, &AbcOptions::exact(samples), &cfg.stage(4))?;
    let db = h.bounds();
    let signorm = sigma.supnorm();
    let point = stein::smooth_bound(&abc.stats, &db, d, signorm);
    let (lo, hi) = stein::smooth_bound_interval(&abc.stats, &db, d, signorm, mc::SIGMA_TOL);
    r.bound(
        BoundRecord::new("smooth_bound", point, Provenance::Mc)
            .part("stats", abc.stats)
            .part("lambda_weights", &weights)
            .part("interval", [lo, hi]),
    );
    let half = matlite::sym_sqrt(&sigma)?;
    let disc = mc::discrepancy(
        &h,
        |rng| coupling.embed(&coupling.draw_state(rng)),
        &half,
        samples,
        &cfg.stage(5),
    )?;
    r.value("discrepancy", disc);
    r.check(Check::dominated("discrepancy_vs_smooth_bound", disc.mean.abs(), disc.stderr, hi, mc::SIGMA_TOL, Provenance::Mc));
    Ok(r)
}

fn stein_eval(abc: &[f64], db: DerivBounds, d: usize, signorm: f64, nonsmooth: Option<&[f64]>, seed: u64) -> Result<Report, CliError> {
    db.validate()?;
    if abc.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(usage("A, B and C must be non-negative"));
    }
    if signorm.is_nan() || signorm < 0.0 {
        return Err(usage("--signorm must be non-negative"));
    }
    if d == 0 {
        return Err(usage("--d must be at least 1"));
    }
    let stats = AbcStats::exact(abc[0], abc[1], abc[2]);
    let mut r = Report::new("stein-eval", seed);
    r.param("abc", abc).param("h", db).param("d", d).param("signorm", signorm);
    r.bound(
        BoundRecord::new("smooth_bound", stein::smooth_bound(&stats, &db, d, signorm), Provenance::Exact)
            .part("A", abc[0])
            .part("B", abc[1])
            .part("C", abc[2]),
    );
    if let Some(ns) = nonsmooth {
        let mut inp = NonSmoothInputs::new(ns[0], ns[1], ns[2], d);
        inp.a = ns[3];
        inp.gamma = ns[4];
        r.param("nonsmooth", ns);
        let b = stein::nonsmooth_bound(&inp)?;
        r.bound(
            BoundRecord::new("nonsmooth_bound", b.value, Provenance::Exact)
                .part("D'", b.d_prime)
                .part("T'", b.t_prime)
                .part("gamma", inp.gamma),
        );
        r.note("the non-smooth bound holds up to the unspecified constant gamma(d)^2");
    }
    Ok(r)
}
