//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the summary is always printed; exits nonzero on any unexpected failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gom_core::conditional::{change_basis_first, change_basis_second, reconstruct_beta, select_anchors, solve_cell};
use gom_core::estimator::{fit, fit_sample, main_system_residual, refine_joint_ls, FitConfig, FittedModel};
use gom_core::linalg::{determinant, Matrix};
use gom_core::moment_matrix::{build_moment_matrix, estimate_rank, BasisSelection, RankSearch};
use gom_core::oracle::{
    coordinates_in_basis, exact_ell_moments, random_model, sample, summary_from_coordinates, three_point_model,
};
use gom_core::tables::{check_summation, tabulate, to_frequencies, MomentTable};
use gom_core::verify::{verify_example, ALPHA_TABLE, BETA_TABLE, TABLE_TOL};
use gom_core::oracle::DiscreteLatentModel;
use gom_core::{CellIndex, Rational, Scalar, Scheme};

struct Verdict {
    passed: bool,
    /// Fails only on a value that cannot be met; documented, not fatal.
    unattainable: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            unattainable: false,
            detail: detail.into(),
        }
    }
}

fn q(p: i64, d: i64) -> Rational {
    Rational::ratio(p, d)
}

fn cell(v: &[u16]) -> CellIndex {
    CellIndex(v.to_vec())
}

fn example_config() -> FitConfig {
    FitConfig {
        basis: BasisSelection::Columns(vec![cell(&[0, 0, 0]), cell(&[0, 0, 2])]),
        ..FitConfig::default()
    }
}

fn criterion_1() -> Verdict {
    let report = verify_example().expect("example pipeline runs");
    let wanted = |n: &str| {
        n.starts_with("M[")
            || n.starts_with("fill ")
            || n.starts_with("alpha1[")
            || n.starts_with("alpha2[")
            || n == "x"
            || n == "y"
            || n == "leading matrix columns"
    };
    let checks: Vec<_> = report.checks.iter().filter(|c| wanted(&c.name)).collect();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    // the two entries called out explicitly
    let mt = exact_ell_moments(&three_point_model(), 3);
    let spot = mt.get(&cell(&[1, 1, 0])).unwrap() == &q(89, 405) && mt.get(&cell(&[1, 0, 2])).unwrap() == &q(197, 1080);
    Verdict::new(
        failed.is_empty() && spot && checks.len() >= 45,
        format!("{} exact checks, failures {:?}", checks.len(), failed),
    )
}

fn criterion_2() -> Verdict {
    let report = verify_example().expect("example pipeline runs");
    let get = |n: &str| report.find(n).unwrap_or_else(|| panic!("check {n}")).computed.clone();
    let expected = [
        ("h(1,0) at (1,0,0)", "131/99"),
        ("h(0,1) at (1,0,0)", "-76/99"),
        ("E(G1 | (1,0,0))", "131/55"),
        ("E(G2 | (1,0,0))", "-76/55"),
        ("h(2,0) at (1,0,0)", "3323/726"),
        ("h(1,1) at (1,0,0)", "-7087/2178"),
        ("h(0,2) at (1,0,0)", "1895/726"),
        ("E(G1^2 | (1,0,0))", "9969/1210"),
        ("E(G2^2 | (1,0,0))", "1083/242"),
        ("Var(G1 | (1,0,0))", "15523/6050"),
        ("Var(G2 | (1,0,0))", "15523/6050"),
    ];
    let mismatches: Vec<String> = expected
        .iter()
        .filter(|(n, want)| get(n) != *want)
        .map(|(n, want)| format!("{n}: stated {want}, computed {}", get(n)))
        .collect();
    // The stated h^(0,2) contradicts the stated E(G^(0,2)) = 1083/242:
    // h = M_(1,0,0) · E = (5/9)(1083/242) = 1805/726.
    let implied = q(5, 9) * q(1083, 242);
    let only_h02 = mismatches.len() == 1 && mismatches[0].starts_with("h(0,2)") && implied == q(1805, 726);
    let mut v = Verdict::new(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} exact values", expected.len())
        } else {
            format!(
                "{} of {} values differ: {}; the stated value is inconsistent with its own E(G^(0,2)) = 1083/242, \
                 since M(1,0,0)·1083/242 = {}",
                mismatches.len(),
                expected.len(),
                mismatches.join("; "),
                implied.to_repr()
            )
        },
    );
    v.unattainable = only_h02;
    v
}

fn criterion_3() -> Verdict {
    let report = verify_example().expect("example pipeline runs");
    let table: Vec<_> = report
        .checks
        .iter()
        .filter(|c| c.name.starts_with("alpha E") || c.name.starts_with("alpha sd") || c.name.starts_with("beta E") || c.name.starts_with("beta sd"))
        .collect();
    let failed: Vec<_> = table.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    let worst = table
        .iter()
        .map(|c| (c.expected.parse::<f64>().unwrap() - c.computed.parse::<f64>().unwrap()).abs())
        .fold(0.0, f64::max);
    Verdict::new(
        table.len() == 2 * 4 * ALPHA_TABLE.len() && table.len() == 2 * 4 * BETA_TABLE.len() && failed.is_empty(),
        format!("{} entries, max deviation {worst:.2e} (tol {TABLE_TOL:e}), failures {failed:?}", table.len()),
    )
}

/// A random model with its rational and float fits.
struct Fixture {
    model: DiscreteLatentModel<Rational>,
    mt: MomentTable<Rational>,
    fitted: FittedModel<Rational>,
    float_fit: Result<FittedModel<f64>, String>,
}

const MODELS: usize = 50;

/// Seeded random configurations with `J ∈ 3..=5`, `L_j ∈ 2..=3`,
/// `K ∈ 1..=3`; configurations whose model draw or fit fails are skipped
/// and counted.
fn fixtures() -> &'static (Vec<Fixture>, usize) {
    static CELL: OnceLock<(Vec<Fixture>, usize)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut out = Vec::new();
        let mut skipped = 0;
        let mut seed = 0u64;
        while out.len() < MODELS && seed < 500 {
            seed += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = rng.gen_range(3..=5);
            let outcomes: Vec<usize> = (0..j).map(|_| rng.gen_range(2..=3)).collect();
            let k = rng.gen_range(1..=3);
            let scheme = Scheme::new(outcomes).unwrap();
            let Ok(model) = random_model::<Rational>(&scheme, k, seed, true) else {
                skipped += 1;
                continue;
            };
            let mt = exact_ell_moments(&model, 3);
            let Ok(fitted) = fit(&mt, &FitConfig::default()) else {
                skipped += 1;
                continue;
            };
            let float_fit = fit(&mt.convert::<f64>(), &FitConfig::float()).map_err(|e| e.to_string());
            out.push(Fixture {
                model,
                mt,
                fitted,
                float_fit,
            });
        }
        (out, skipped)
    })
}

fn criterion_4() -> Verdict {
    let (fx, skipped) = fixtures();
    let mut exact_cells = 0;
    let mut float_cells = 0;
    let mut worst_float = 0.0f64;
    let mut problems = Vec::new();
    for (i, f) in fx.iter().enumerate() {
        let coords = coordinates_in_basis(&f.model, &f.fitted.basis).unwrap();
        for (c, cond) in &f.fitted.conditionals {
            let (mean, var) = summary_from_coordinates(&f.model, &f.fitted.basis, &coords, c).unwrap();
            exact_cells += 1;
            if cond.expectation != mean {
                problems.push(format!("model {i} cell {c}: rational expectation differs"));
            }
            if let Some(v) = &cond.variance {
                if v.values != var {
                    problems.push(format!("model {i} cell {c}: rational variance differs"));
                }
            }
        }
        match &f.float_fit {
            Ok(ff) => {
                let fm = f.model.convert::<f64>();
                let coords = coordinates_in_basis(&fm, &ff.basis).unwrap();
                for (c, cond) in &ff.conditionals {
                    let (mean, _) = summary_from_coordinates(&fm, &ff.basis, &coords, c).unwrap();
                    float_cells += 1;
                    let err = cond.expectation.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    worst_float = worst_float.max(err);
                }
            }
            Err(e) => problems.push(format!("model {i}: float fit failed: {e}")),
        }
    }
    Verdict::new(
        fx.len() >= MODELS && problems.is_empty() && worst_float <= 1e-10,
        format!(
            "{} models ({} configurations skipped), {exact_cells} rational cells exact, {float_cells} float cells, \
             max float error {worst_float:.2e}{}",
            fx.len(),
            skipped,
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn criterion_5() -> Verdict {
    let (fx, _) = fixtures();
    let mut bad = Vec::new();
    for (i, f) in fx.iter().enumerate() {
        let j = f.model.scheme.num_measurements();
        let m = build_moment_matrix(&f.mt, 2.min(j - 1)).unwrap();
        for search in [RankSearch::Greedy, RankSearch::Exhaustive] {
            let r = estimate_rank(&m, 0.0, 8, search);
            if r != f.model.k() {
                bad.push(format!("model {i} ({search:?}): rank {r}, K {}", f.model.k()));
            }
        }
    }
    // without the general-position filter the bound still holds
    let mut loose = 0;
    for seed in 0..20u64 {
        let scheme = Scheme::new(vec![2, 3, 2, 2]).unwrap();
        let k = 1 + (seed as usize % 3);
        let model = random_model::<Rational>(&scheme, k, 1000 + seed, false).unwrap();
        let mt = exact_ell_moments(&model, 3);
        let m = build_moment_matrix(&mt, 2).unwrap();
        let r = estimate_rank(&m, 0.0, 8, RankSearch::Greedy);
        loose += 1;
        if r > k {
            bad.push(format!("unfiltered seed {seed}: rank {r} > K {k}"));
        }
    }
    Verdict::new(
        bad.is_empty(),
        format!("{} general-position models rank = K, {loose} unfiltered models rank ≤ K {bad:?}", fx.len()),
    )
}

fn criterion_6() -> Verdict {
    let (fx, _) = fixtures();
    let mut bad = Vec::new();
    let mut oracle_checked = 0;
    let mut empirical_checked = 0;
    let mut cv_checked = 0;
    let mut tables: Vec<(String, MomentTable<Rational>)> = vec![("example".into(), exact_ell_moments(&three_point_model(), 3))];
    for (i, f) in fx.iter().enumerate() {
        tables.push((format!("model {i}"), f.mt.clone()));
    }
    for (name, mt) in &tables {
        let r = check_summation(mt, 0.0);
        oracle_checked += r.checked;
        if !r.is_clean() {
            bad.push(format!("{name}: {} oracle violations", r.violations.len()));
        }
    }
    for (i, f) in fx.iter().enumerate() {
        let s = sample(&f.model, 400, 7 + i as u64).unwrap();
        let mt = to_frequencies::<Rational>(&tabulate(&s, 3).unwrap());
        let r = check_summation(&mt, 0.0);
        empirical_checked += r.checked;
        if !r.is_clean() {
            bad.push(format!("model {i}: {} empirical violations", r.violations.len()));
        }
        // Σ_v C_v 𝓔(G^v | ℓ) = 𝓔((Σ_k G_k)^n | ℓ) = 1 for n = 1, 2
        for (c, cond) in &f.fitted.conditionals {
            let s1: Rational = cond.expectation.iter().cloned().sum();
            let s2: Option<Rational> = cond.second.as_ref().map(|m| {
                let k = m.rows();
                (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).map(|(a, b)| m[(a, b)].clone()).sum()
            });
            cv_checked += 1;
            if s1 != q(1, 1) || s2.is_some_and(|s| s != q(1, 1)) {
                bad.push(format!("model {i} cell {c}: C_v identity fails"));
            }
        }
    }
    Verdict::new(
        bad.is_empty(),
        format!(
            "{oracle_checked} oracle and {empirical_checked} empirical identities at tol 0, \
             {cv_checked} conditional C_v identities {bad:?}"
        ),
    )
}

/// Column sums one, integer entries, nonsingular.
fn random_transform(k: usize, rng: &mut ChaCha8Rng) -> Matrix<Rational> {
    loop {
        let mut rows: Vec<Vec<Rational>> = (0..k.saturating_sub(1))
            .map(|_| (0..k).map(|_| q(rng.gen_range(-3..=3), rng.gen_range(1..=3))).collect())
            .collect();
        let last: Vec<Rational> = (0..k)
            .map(|c| q(1, 1) - rows.iter().map(|r| r[c].clone()).sum::<Rational>())
            .collect();
        rows.push(last);
        let a = Matrix::from_rows(rows);
        if !determinant(&a).is_zero() {
            return a;
        }
    }
}

fn criterion_7() -> Verdict {
    let (fx, _) = fixtures();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = Vec::new();
    let mut checked = 0;
    let mut transforms = 0;
    for (i, f) in fx.iter().enumerate() {
        let b = &f.fitted.basis;
        for _ in 0..10 {
            let a = random_transform(b.k(), &mut rng);
            transforms += 1;
            let b2 = b.transform(&a);
            let anchors = select_anchors(&b2, 0.0).unwrap();
            for (c, cond) in f.fitted.conditionals.iter().filter(|(c, _)| c.order() <= 1) {
                let solved = solve_cell(&b2, &anchors, &f.mt, c, true, 0.0).unwrap();
                let e2 = change_basis_first(&cond.expectation, &a, 0.0).unwrap();
                let mut ok = solved.expectation == e2
                    && reconstruct_beta(b, &cond.expectation).unwrap() == reconstruct_beta(&b2, &solved.expectation).unwrap();
                if let (Some(s), Some(s2)) = (&cond.second, &solved.second) {
                    ok &= &change_basis_second(s, &a, 0.0).unwrap() == s2;
                }
                checked += 1;
                if !ok {
                    bad.push(format!("model {i} cell {c}"));
                }
            }
        }
    }
    Verdict::new(
        bad.is_empty() && transforms == 10 * fx.len(),
        format!("{transforms} transforms, {checked} cell checks exact {bad:?}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn criterion_8() -> Verdict {
    let model = three_point_model();
    let exact = exact_ell_moments(&model, 3);
    let truth = fit(&exact, &example_config()).unwrap();
    let cells: Vec<CellIndex> = truth.conditionals.keys().filter(|c| c.order() <= 1).cloned().collect();
    let order1: Vec<CellIndex> = cells.iter().filter(|c| c.order() == 1).cloned().collect();
    let cfg = FitConfig {
        k_override: Some(2),
        ..FitConfig { arithmetic: gom_core::Arithmetic::Float, ..example_config() }
    };
    let bound = 3.0 * (0.25f64 / 1e5).sqrt();
    let mut medians = Vec::new();
    let mut within = 0;
    let mut failed_fits = 0;
    for (ni, n) in [1_000usize, 10_000, 100_000].into_iter().enumerate() {
        let mut errs = Vec::new();
        for seed in 0..20u64 {
            let s = sample(&model, n, 10_000 * ni as u64 + seed).unwrap();
            let err = match fit_sample::<f64>(&s, &cfg) {
                Ok(m) => cells
                    .iter()
                    .map(|c| {
                        let want = &truth.conditionals[c].expectation;
                        match m.conditionals.get(c) {
                            Some(got) => got
                                .expectation
                                .iter()
                                .zip(want)
                                .map(|(g, w)| (g - w.to_f64()).abs())
                                .fold(0.0, f64::max),
                            None => f64::INFINITY,
                        }
                    })
                    .fold(0.0, f64::max),
                Err(_) => {
                    failed_fits += 1;
                    f64::INFINITY
                }
            };
            errs.push(err);
            if n == 100_000 {
                let freq = to_frequencies::<f64>(&tabulate(&s, 1).unwrap());
                let dev = order1
                    .iter()
                    .map(|c| (freq.get(c).unwrap() - exact.get(c).unwrap().to_f64()).abs())
                    .fold(0.0, f64::max);
                if dev < bound {
                    within += 1;
                }
            }
        }
        medians.push(median(errs));
    }
    let monotone = medians.windows(2).all(|w| w[1] < w[0]);
    Verdict::new(
        monotone && within >= 18,
        format!(
            "median max error {:.3e} → {:.3e} → {:.3e}, {within}/20 seeds with max|f−M| < {bound:.2e}, {failed_fits} failed fits",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn criterion_9() -> Verdict {
    let mut bad = Vec::new();
    let mut fits = 0;
    let mut improved = 0;
    let scheme = Scheme::new(vec![3, 2, 3, 2, 3]).unwrap();
    let cfg = FitConfig {
        k_override: Some(2),
        refine: false,
        ..FitConfig::float()
    };
    let mut seed = 0u64;
    while fits < 10 && seed < 40 {
        seed += 1;
        let model = random_model::<Rational>(&scheme, 2, 500 + seed, true).unwrap();
        let s = sample(&model, 3_000, seed).unwrap();
        let Ok(fitted) = fit_sample::<f64>(&s, &cfg) else {
            continue;
        };
        fits += 1;
        let mt = fitted.moments.clone();
        let before = main_system_residual(&fitted.basis, &mt, cfg.max_order);
        let refined = refine_joint_ls(&fitted, &mt, &cfg).unwrap();
        let after = main_system_residual(&refined.basis, &mt, cfg.max_order);
        if after > before {
            bad.push(format!("seed {seed}: {before:e} → {after:e}"));
        }
        if after < before {
            improved += 1;
        }
    }
    let mut fixed = 0;
    let exact_cfg = FitConfig { k_override: Some(2), ..FitConfig { arithmetic: gom_core::Arithmetic::Float, ..example_config() } };
    let mut exact_inputs: Vec<(MomentTable<f64>, FitConfig)> =
        vec![(exact_ell_moments(&three_point_model(), 3).convert::<f64>(), exact_cfg)];
    for seed in 1..=3 {
        let model = random_model::<Rational>(&scheme, 2, 900 + seed, true).unwrap();
        exact_inputs.push((exact_ell_moments(&model, 3).convert::<f64>(), cfg.clone()));
    }
    let inputs = exact_inputs.len();
    for (mt, c) in exact_inputs {
        let fitted = fit(&mt, &c).unwrap();
        let refined = refine_joint_ls(&fitted, &mt, &c).unwrap();
        let report = refined.diagnostics.refinement.clone().unwrap();
        if report.iterations == 1 && refined.basis == fitted.basis {
            fixed += 1;
        } else {
            bad.push(format!("exact input moved: {report:?}"));
        }
    }
    Verdict::new(
        fits == 10 && bad.is_empty(),
        format!("{fits} noisy fits never worse ({improved} improved), {fixed}/{inputs} exact inputs fixed after one iteration {bad:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict, Duration); 9] = [
        ("worked example, exact matrix, completion and basis", criterion_1, Duration::from_secs(1)),
        ("worked example, exact conditional moments", criterion_2, Duration::from_secs(1)),
        ("conditional tables in both bases", criterion_3, Duration::from_secs(1)),
        ("oracle equivalence on random models", criterion_4, Duration::from_secs(60)),
        ("rank bound", criterion_5, Duration::from_secs(60)),
        ("summation invariants", criterion_6, Duration::from_secs(60)),
        ("basis equivariance", criterion_7, Duration::from_secs(60)),
        ("consistency under sampling", criterion_8, Duration::from_secs(300)),
        ("refinement monotonicity", criterion_9, Duration::from_secs(60)),
    ];
    let mut fatal = 0;
    let mut documented = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let elapsed = t.elapsed();
        // shared fixtures are built once, inside criterion 4
        let over = elapsed > *budget;
        let passed = verdict.passed && !over;
        let tag = if passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {} [{name}]: {tag} in {:.2}s (budget {}s) — {}{}",
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            verdict.detail,
            if over { " — over time budget" } else { "" }
        );
        if !passed {
            if verdict.unattainable && !over {
                documented += 1;
            } else {
                fatal += 1;
            }
        }
    }
    println!("acceptance: {fatal} failing, {documented} failing on an inconsistent stated value");
    if fatal > 0 {
        std::process::exit(1);
    }
}
