//! Acceptance criteria. Each test prints one PASS/FAIL line.

use std::time::Instant;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cara::bonds::{
    bond_curve, bond_yield, hetero_gamma_limit, monte_carlo_price, yield_bounds, IncrementLaw,
    RandomWalkEconomy,
};
use cara::complete::{constrained_consumption, AgentSpec};
use cara::equilibrium::{
    candidate_spd, default_starts, demands, nonuniqueness_scan, solve_equilibrium,
    vanishing_endowment_family, verify_equilibrium, EconomySpec, TwoAgentExample,
};
use cara::incomplete::{one_period_closed_form, solve_kkt, verify_kkt, KktOptions};
use cara::instances::{random_agent, random_span_market, random_spd, random_tree, random_type_c};
use cara::oracle::{oracle_complete, oracle_incomplete};
use cara::probtree::{AdaptedProcess, Tree};
use cara::savings::{
    c0_derivative, default_grid, monotonicity_report, regime_threshold, solve_c0_curve,
    SavingsInstance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, pass: bool, detail: String) {
    println!(
        "criterion {n:>2} [{name}]: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_closed_form_vs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut clipped = 0;
    for _ in 0..50 {
        let horizon = rng.random_range(1..=3);
        let tree = random_tree(&mut rng, horizon, 3);
        let xi = random_spd(&mut rng, &tree);
        let a = random_agent(&mut rng, &tree, 1.0, 0.3);
        let closed = constrained_consumption(&tree, &a, &xi).unwrap();
        let brute = oracle_complete(&tree, &a, &xi, false).unwrap();
        worst = worst.max(closed.consumption.sup_distance(&brute.consumption));
        if closed.consumption.min_value() == 0.0 {
            clipped += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "closed form vs oracle",
        worst <= 1e-7 && secs < 10.0,
        format!("max gap {worst:.2e}, {clipped}/50 with binding constraints, {secs:.2}s"),
    );
}

#[test]
fn criterion_02_kkt_certification() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_kkt: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut failures = Vec::new();
    for i in 0..20 {
        let horizon = rng.random_range(1..=2);
        let tree = random_tree(&mut rng, horizon, 3);
        let n_assets = rng.random_range(0..=1);
        let m = random_span_market(&mut rng, &tree, n_assets).unwrap();
        let a = random_agent(&mut rng, &tree, 1.0, 0.4);
        let sol = match solve_kkt(&a, &m, &KktOptions::default()) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("instance {i}: {e}"));
                continue;
            }
        };
        let rep = verify_kkt(&sol, &a, &m, 1e-8).unwrap();
        let r = rep
            .projection
            .iter()
            .cloned()
            .fold(0.0, f64::max)
            .max(rep.complementary)
            .max(-rep.min_multiplier)
            .max(rep.budget)
            .max(rep.wealth_form);
        worst_kkt = worst_kkt.max(r);
        let o = oracle_incomplete(&a, &m).unwrap();
        worst_gap = worst_gap.max((o.value - sol.utility).abs());
    }
    report(
        2,
        "KKT certification",
        failures.is_empty() && worst_kkt <= 1e-8 && worst_gap <= 1e-8,
        format!("max KKT residual {worst_kkt:.2e}, max utility gap {worst_gap:.2e}, failures {failures:?}"),
    );
}

#[test]
fn criterion_03_one_period_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    let mut with_essinf = 0;
    for i in 0..20 {
        let n_states = rng.random_range(3..=6);
        let n_blocks = rng.random_range(1..=n_states.min(3));
        let m = random_type_c(&mut rng, n_states, n_blocks).unwrap();
        let tree = m.tree().clone();
        // Half the instances start poor, which pushes blocks into the essinf branch.
        let e0 = if i % 2 == 0 {
            0.0
        } else {
            rng.random_range(0.0..1.0)
        };
        let e1: Vec<f64> = (0..n_states)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..2.0)
                }
            })
            .collect();
        let e = AdaptedProcess::new(&tree, vec![vec![e0], e1]).unwrap();
        let a = AgentSpec::new(
            &tree,
            rng.random_range(0.5..2.5),
            rng.random_range(0.0..0.1),
            e,
        )
        .unwrap();
        let cf = one_period_closed_form(&a, &m).unwrap();
        if cf.essinf_branch.iter().any(|&b| b) {
            with_essinf += 1;
        }
        let s = solve_kkt(&a, &m, &KktOptions::default()).unwrap();
        let mut gap = (cf.c0 - s.consumption.get(0, 0)).abs();
        for v in 0..n_states {
            gap = gap.max((cf.c1[v] - s.consumption.get(1, v)).abs());
        }
        worst = worst.max(gap);
    }
    report(
        3,
        "one-period closed form",
        worst <= 1e-8 && with_essinf > 0,
        format!("max gap {worst:.2e}, essinf branch active in {with_essinf}/20"),
    );
}

/// Sup over nodes of `|Σ_i c^i - ε|`.
fn clearing_gap(econ: &EconomySpec, cs: &[AdaptedProcess]) -> f64 {
    econ.aggregate()
        .iter()
        .map(|(k, v, e)| (cs.iter().map(|c| c.get(k, v)).sum::<f64>() - e).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_04_equilibrium_certification() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut clearing, mut budget, mut identity, mut autarky): (f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0);
    let mut solutions = 0;
    let mut failures = Vec::new();
    for i in 0..15 {
        let n = rng.random_range(2..=4);
        let horizon = rng.random_range(1..=2);
        let tree = random_tree(&mut rng, horizon, 3);
        let agents: Vec<AgentSpec> = loop {
            let a: Vec<AgentSpec> = (0..n)
                .map(|_| random_agent(&mut rng, &tree, 1.5, 0.25))
                .collect();
            let positive = (0..=tree.horizon()).all(|k| {
                (0..tree.width(k))
                    .all(|v| a.iter().map(|x| x.endowment.get(k, v)).sum::<f64>() > 0.0)
            });
            if positive {
                break a;
            }
        };
        let econ = EconomySpec::new(tree, agents).unwrap();
        match solve_equilibrium(&econ, &default_starts(&econ, 8, i)) {
            Ok(sols) => {
                for s in &sols {
                    solutions += 1;
                    let rep =
                        verify_equilibrium(&econ, s.spd.process(), &s.consumptions, 1e-8).unwrap();
                    clearing = clearing.max(rep.clearing);
                    budget = rep.budgets.iter().cloned().fold(budget, f64::max);
                    if !rep.pass {
                        failures.push(format!("economy {i}: {rep:?}"));
                    }
                    // The candidate density clears the market for any weights, in
                    // particular the equilibrium ones and perturbations of them.
                    for scale in [1.0f64, 0.5, 3.0] {
                        let w: Vec<f64> = s
                            .weights
                            .iter()
                            .enumerate()
                            .map(|(j, x)| x * scale.powi(j as i32))
                            .collect();
                        let xi = candidate_spd(&w, &econ).unwrap();
                        identity =
                            identity.max(clearing_gap(&econ, &demands(&w, &econ, &xi).unwrap()));
                    }
                }
            }
            Err(e) => failures.push(format!("economy {i}: {e}")),
        }
    }
    // Homogeneous economies: one agent, or several identical agents.
    for i in 0..10 {
        let horizon = rng.random_range(1..=2);
        let tree = random_tree(&mut rng, horizon, 3);
        let e = AdaptedProcess::from_fn(&tree, |_, _| rng.random_range(0.05..2.0));
        let a = AgentSpec::new(
            &tree,
            rng.random_range(0.5..3.0),
            rng.random_range(0.0..0.2),
            e,
        )
        .unwrap();
        let n = 1 + i % 4;
        let econ = EconomySpec::new(tree, vec![a; n]).unwrap();
        match solve_equilibrium(&econ, &default_starts(&econ, 4, 100 + i as u64)) {
            Ok(sols) => {
                for s in &sols {
                    for (c, a) in s.consumptions.iter().zip(econ.agents()) {
                        autarky = autarky.max(c.sup_distance(&a.endowment));
                    }
                }
            }
            Err(e) => failures.push(format!("homogeneous economy {i}: {e}")),
        }
    }
    report(
        4,
        "equilibrium certification",
        failures.is_empty() && clearing <= 1e-8 && budget <= 1e-8 && identity <= 1e-10 && autarky <= 1e-10,
        format!(
            "{solutions} solutions, clearing {clearing:.2e}, budgets {budget:.2e}, identity {identity:.2e}, \
             autarky {autarky:.2e}, failures {failures:?}"
        ),
    );
}

#[test]
fn criterion_05_nonuniqueness() {
    let ex = TwoAgentExample::construct(0.3, 0.005).unwrap();
    // ε¹₁ < 1/e and e^{2ε¹₁ - 1} > ε¹₁.
    let hyp =
        ex.e1_1 < (-1.0f64).exp() && (2.0 * ex.e1_1 - 1.0).exp() > ex.e1_1 && ex.hypotheses_hold();
    let scan = nonuniqueness_scan(&ex, 24).unwrap();
    let good: Vec<_> = scan
        .equilibria
        .iter()
        .filter(|r| r.budget_max() <= 1e-9)
        .collect();
    let pairs: Vec<String> = scan
        .recipe_pairs
        .iter()
        .map(|r| {
            format!(
                "({:.6}, {:.6}) budget residual {:.3e}",
                r.x,
                r.y,
                r.budget_max()
            )
        })
        .collect();
    let found: Vec<String> = good
        .iter()
        .map(|r| format!("({:.8}, {:.8})", r.x, r.y))
        .collect();
    report(
        5,
        "non-uniqueness",
        hyp && good.len() >= 2,
        format!(
            "hypotheses {hyp}, ε¹₀ = {:.6}, ε²₀ = {:.6}; {} equilibria {found:?}; constructed pairs {pairs:?}",
            ex.e1_0,
            ex.e2_0,
            good.len()
        ),
    );
}

#[test]
fn criterion_06_vanishing_endowment_families() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let tol = 1e-10;
    let mut worst_formula: f64 = 0.0;
    let mut failures = Vec::new();
    // (i) ε_0 = 0, positive ε_1: ξ_1 = e^{-ε_1}/λ for every λ ≥ 1.
    let tree = Tree::from_conditional(&[vec![vec![0.3, 0.45, 0.25]]]).unwrap();
    let e1 = vec![0.4, 1.3, 0.9];
    let econ = EconomySpec::new(
        tree.clone(),
        vec![AgentSpec::new(
            &tree,
            1.0,
            0.0,
            AdaptedProcess::new(&tree, vec![vec![0.0], e1.clone()]).unwrap(),
        )
        .unwrap()],
    )
    .unwrap();
    let x = AdaptedProcess::constant(&tree, 1.0);
    for j in 0..10 {
        let lambda = if j == 0 {
            1.0
        } else {
            rng.random_range(0.0f64..3.0).exp()
        };
        match vanishing_endowment_family(&econ, &x, Some(lambda)) {
            Ok(sol) => {
                for (v, e) in e1.iter().enumerate() {
                    worst_formula =
                        worst_formula.max((sol.spd.get(1, v) - (-e).exp() / lambda).abs());
                }
                let rep =
                    verify_equilibrium(&econ, sol.spd.process(), &sol.consumptions, tol).unwrap();
                if !rep.pass {
                    failures.push(format!("(i) λ = {lambda}: {rep:?}"));
                }
            }
            Err(e) => failures.push(format!("(i) λ = {lambda}: {e}")),
        }
    }
    // (ii) ε_1 vanishes on the second state: ξ_1 = e^{ε_0 - ε_1} off it and y on it.
    let tree = Tree::from_conditional(&[vec![vec![0.6, 0.4]]]).unwrap();
    let (e0, e1a) = (0.7, 1.1);
    let econ = EconomySpec::new(
        tree.clone(),
        vec![AgentSpec::new(
            &tree,
            1.0,
            0.0,
            AdaptedProcess::new(&tree, vec![vec![e0], vec![e1a, 0.0]]).unwrap(),
        )
        .unwrap()],
    )
    .unwrap();
    for j in 0..10 {
        let y = e0_exp_plus(e0, j, &mut rng);
        let x = AdaptedProcess::new(&tree, vec![vec![1.0], vec![0.0, y]]).unwrap();
        match vanishing_endowment_family(&econ, &x, None) {
            Ok(sol) => {
                worst_formula = worst_formula.max((sol.spd.get(1, 0) - (e0 - e1a).exp()).abs());
                worst_formula = worst_formula.max((sol.spd.get(1, 1) - y).abs());
                let rep =
                    verify_equilibrium(&econ, sol.spd.process(), &sol.consumptions, tol).unwrap();
                if !rep.pass {
                    failures.push(format!("(ii) y = {y}: {rep:?}"));
                }
            }
            Err(e) => failures.push(format!("(ii) y = {y}: {e}")),
        }
    }
    report(
        6,
        "vanishing-endowment families",
        failures.is_empty() && worst_formula <= tol,
        format!("20 members, max distance to the explicit densities {worst_formula:.2e}, failures {failures:?}"),
    );
}

/// `y` strictly above `e^{ε_0}`; the first draw sits just above the boundary.
fn e0_exp_plus(e0: f64, j: usize, rng: &mut ChaCha8Rng) -> f64 {
    let base = f64::exp(e0);
    if j == 0 {
        base * (1.0 + 1e-9)
    } else {
        base * rng.random_range(0.0f64..2.0).exp()
    }
}

#[test]
fn criterion_07_yield_limit() {
    let law = IncrementLaw::uniform(vec![0.0, 2.0]).unwrap();
    let econ = RandomWalkEconomy::new(vec![1.0, 2.0], vec![0.05, 0.05], None, law.clone()).unwrap();
    // ρ - log E[e^{-X/1.5}], with 1/1 + 1/2 = 1.5.
    let expected = 0.05 - (0.5 * (1.0 + (-2.0f64 / 1.5).exp())).ln();
    let limit = hetero_gamma_limit(&[1.0, 2.0], 0.05, &law);
    let g200 = (bond_yield(&econ, 200).unwrap() - expected).abs();
    let g400 = (bond_yield(&econ, 400).unwrap() - expected).abs();
    let mut zs = Vec::new();
    for (t, seed) in [(50usize, 7u64), (100, 8)] {
        let mc = monte_carlo_price(&econ, t, 1_000_000, seed, true).unwrap();
        let exact = bond_curve(&econ, &[t]).unwrap()[0].log_price;
        zs.push(mc.z_score(exact));
    }
    report(
        7,
        "yield limit",
        (limit - expected).abs() < 1e-15
            && g200 < 0.01
            && g400 < g200
            && zs.iter().all(|z| *z <= 3.0),
        format!(
            "limit {expected:.6}, gap(200) {g200:.3e}, gap(400) {g400:.3e}, MC z-scores {zs:.2?}"
        ),
    );
}

#[test]
fn criterion_08_yield_bounds() {
    let law = IncrementLaw::uniform(vec![0.0, 1.0]).unwrap();
    let econ = RandomWalkEconomy::new(vec![1.0, 1.0], vec![0.2, 0.1], None, law).unwrap();
    let b = yield_bounds(&econ).unwrap();
    let min = |xs: &[cara::bonds::Extended]| {
        xs.iter().fold(f64::INFINITY, |m, x| {
            m.min(x.finite().unwrap_or(f64::INFINITY))
        })
    };
    let (lo, hi) = (min(&b.a), min(&b.b));
    let ts: Vec<usize> = (200..=400).collect();
    let curve = bond_curve(&econ, &ts).unwrap();
    let outside = curve
        .iter()
        .map(|p| (lo - 0.005 - p.yield_).max(p.yield_ - hi - 0.005))
        .fold(f64::NEG_INFINITY, f64::max);
    let (ymin, ymax) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), p| {
            (a.min(p.yield_), c.max(p.yield_))
        });
    report(
        8,
        "yield bounds",
        lo.is_finite() && hi.is_finite() && outside <= 0.0,
        format!("bounds [{lo:.6}, {hi:.6}], yields on t ∈ [200, 400] span [{ymin:.6}, {ymax:.6}]"),
    );
}

#[test]
fn criterion_09_precautionary_savings() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut violation: f64 = f64::NEG_INFINITY;
    let mut var_drop: f64 = 0.0;
    let mut flat: f64 = 0.0;
    let mut failures = Vec::new();
    for i in 0..10 {
        let n_states = rng.random_range(3..=7);
        let n_blocks = rng.random_range(1..=n_states.min(3));
        let m = random_type_c(&mut rng, n_states, n_blocks).unwrap();
        let x: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.0..3.0)).collect();
        let gamma = rng.random_range(0.5..2.5);
        let rho = rng.random_range(0.0..0.1);
        let probe =
            SavingsInstance::new(m.clone(), gamma, rho, 0.0, x.clone(), default_grid()).unwrap();
        let e0 = regime_threshold(&probe).unwrap() + rng.random_range(0.1..1.0);
        let inst =
            SavingsInstance::new(m.clone(), gamma, rho, e0, x.clone(), default_grid()).unwrap();
        let curve = solve_c0_curve(&inst).unwrap();
        match monotonicity_report(&inst, &curve) {
            Ok(rep) => {
                violation = violation.max(rep.max_violation);
                var_drop = var_drop.max(rep.variance_drop);
            }
            Err(e) => failures.push(format!("instance {i}: {e}")),
        }
        // ε = 0 makes the endowment riskless whatever X is.
        flat = flat.max(c0_derivative(&inst, 0.0).unwrap().abs());
        let other: Vec<f64> = x.iter().map(|v| v * 0.5 + 1.0).collect();
        let riskless = SavingsInstance::new(m.clone(), gamma, rho, e0, other, vec![0.0]).unwrap();
        flat = flat.max((solve_c0_curve(&riskless).unwrap()[0].c0 - curve[0].c0).abs());
        // An H-measurable X is insurable: the curve does not move.
        let h = match m.wealth_space(1) {
            cara::market::WealthSpace::Blocks(h) => h.clone(),
            _ => unreachable!(),
        };
        let xh: Vec<f64> = (0..n_states)
            .map(|v| 0.7 * h.block_of(v) as f64 + 0.2)
            .collect();
        let meas = SavingsInstance::new(m, gamma, rho, e0, xh, default_grid()).unwrap();
        let mc = solve_c0_curve(&meas).unwrap();
        flat = mc
            .iter()
            .map(|p| (p.c0 - mc[0].c0).abs())
            .fold(flat, f64::max);
    }
    report(
        9,
        "precautionary savings",
        failures.is_empty() && violation <= 1e-9 && var_drop <= 1e-9 && flat <= 1e-12,
        format!(
            "largest increase of c0 {violation:.2e}, largest variance drop {var_drop:.2e}, \
             degenerate cases move c0 by {flat:.2e}, failures {failures:?}"
        ),
    );
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

/// Subcommand for each bundled config.
pub fn bundled() -> Vec<(&'static str, &'static str)> {
    vec![
        ("optimize-complete", "trivial_complete.json"),
        ("optimize-complete", "complete_two_period.json"),
        ("optimize-incomplete", "incomplete_trinomial.json"),
        ("optimize-incomplete", "incomplete_type_c.json"),
        ("equilibrium", "equilibrium_three_agents.json"),
        ("equilibrium", "equilibrium_vanishing.json"),
        ("equilibria-scan", "nonuniqueness.json"),
        ("bond-yields", "bond_limit.json"),
        ("bond-yields", "bond_bounds.json"),
        ("precautionary", "precautionary.json"),
        ("oracle-check", "oracle_check.json"),
    ]
}

#[test]
fn criterion_10_determinism() {
    let bin = env!("CARGO_BIN_EXE_cara");
    let listed: Vec<&str> = bundled().iter().map(|(_, f)| *f).collect();
    let mut on_disk: Vec<String> = fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    on_disk.sort();
    let unlisted: Vec<&String> = on_disk
        .iter()
        .filter(|n| !listed.contains(&n.as_str()))
        .collect();
    let mut differing = Vec::new();
    let mut files = 0;
    for (cmd, cfg) in bundled() {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut codes = Vec::new();
        for d in &dirs {
            let out = Command::new(bin)
                .args([
                    cmd,
                    configs_dir().join(cfg).to_str().unwrap(),
                    "--out-dir",
                    d.path().to_str().unwrap(),
                ])
                .output()
                .unwrap();
            codes.push((out.status.code(), out.stdout));
        }
        if codes[0] != codes[1] {
            differing.push(format!("{cfg}: exit status or table"));
        }
        let mut names: Vec<_> = fs::read_dir(dirs[0].path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        if names.is_empty() {
            differing.push(format!("{cfg}: no output"));
        }
        for n in names {
            files += 1;
            let a = fs::read(dirs[0].path().join(&n)).unwrap();
            let b = fs::read(dirs[1].path().join(&n)).unwrap_or_default();
            if a != b {
                differing.push(format!("{cfg}: {}", n.to_string_lossy()));
            }
        }
    }
    report(
        10,
        "determinism",
        differing.is_empty() && unlisted.is_empty(),
        format!(
            "{} configs, {files} files compared, differing {differing:?}, unlisted {unlisted:?}",
            bundled().len()
        ),
    );
}
