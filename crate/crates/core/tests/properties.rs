//! Property-based checks of the module invariants on seeded random instances.

use cara::bonds::{bond_yield, legendre, IncrementLaw, RandomWalkEconomy, RateFunction};
use cara::complete::{constrained_consumption, psi, solve_lambda_star, utility, AgentSpec};
use cara::equilibrium::{
    betas, candidate_spd, default_starts, demands, etas, solve_equilibrium, verify_equilibrium,
    EconomySpec,
};
use cara::incomplete::{one_period_closed_form, solve_kkt, verify_kkt, KktOptions, TradingMap};
use cara::instances::{random_agent, random_span_market, random_spd, random_tree, random_type_c};
use cara::market::{
    aggregate_spd, implied_rates, verify_spd, wealth_space_residual, MarketSpec, WealthSpace,
};
use cara::oracle::{oracle_complete, oracle_incomplete};
use cara::probtree::{AdaptedProcess, SubAlgebra, Tree};
use cara::savings::{
    endowment_eps, savings_fkg_slack, solve_c0_curve, variance_fkg_slack, SavingsInstance,
};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random partition of level `k` into at most three blocks.
fn random_partition(r: &mut ChaCha8Rng, tree: &Tree, k: usize) -> SubAlgebra {
    let n = tree.width(k);
    let blocks = r.random_range(1..=n.min(3));
    let mut labels: Vec<usize> = (0..n).map(|v| v % blocks).collect();
    labels.shuffle(r);
    SubAlgebra::new(tree, k, labels).unwrap()
}

fn random_values(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-3.0..3.0)).collect()
}

fn positive_economy(r: &mut ChaCha8Rng, n: usize) -> EconomySpec {
    let horizon = r.random_range(1..=2);
    let tree = random_tree(r, horizon, 3);
    let agents = (0..n)
        .map(|_| {
            let e = AdaptedProcess::from_fn(&tree, |_, _| r.random_range(0.05..1.5));
            AgentSpec::new(&tree, r.random_range(0.5..3.0), r.random_range(0.0..0.2), e).unwrap()
        })
        .collect();
    EconomySpec::new(tree, agents).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conditional_expectation_is_a_projection(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 3, 3);
        let k = r.random_range(1..=3);
        let g = random_partition(&mut r, &tree, k);
        let x = random_values(&mut r, tree.width(k));
        let ce = tree.cond_expect(k, &x, &g).unwrap();
        prop_assert!((tree.expect(k, &ce) - tree.expect(k, &x)).abs() < 1e-12);
        let twice = tree.cond_expect(k, &ce, &g).unwrap();
        for (a, b) in ce.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let inf = tree.ess_inf(k, &x, &g).unwrap();
        prop_assert!(inf.iter().zip(&x).all(|(i, v)| i <= v));
        prop_assert!(g.is_measurable(&inf, 0.0));
        prop_assert!(g.is_measurable(&ce, 1e-12));
    }

    #[test]
    fn aggregate_spd_prices_and_lies_in_wealth_space(seed in any::<u64>()) {
        let mut r = rng(seed);
        let horizon = r.random_range(1..=2);
        let tree = random_tree(&mut r, horizon, 3);
        let n_assets = r.random_range(0..=2);
        let m = random_span_market(&mut r, &tree, n_assets).unwrap();
        // Random asset prices can admit arbitrage; those markets have no density.
        let agg = aggregate_spd(&m);
        prop_assume!(agg.is_ok());
        let agg = agg.unwrap();
        prop_assert!(verify_spd(&m, agg.process(), 1e-10).unwrap().pass);
        for k in 1..=tree.horizon() {
            let ratio: Vec<f64> = (0..tree.width(k))
                .map(|v| agg.get(k, v) / agg.get(k - 1, tree.parent(k, v)))
                .collect();
            prop_assert!(wealth_space_residual(&m, k, &ratio) <= 1e-10);
            // F_{k-1}-measurable payoffs are always in the wealth space.
            let pred: Vec<f64> = (0..tree.width(k)).map(|v| (tree.parent(k, v) as f64).sin()).collect();
            prop_assert!(wealth_space_residual(&m, k, &pred) <= 1e-10);
        }
    }

    #[test]
    fn complete_market_aggregate_is_the_given_density(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 2, 3);
        let xi = random_spd(&mut r, &tree);
        let m = MarketSpec::complete_under(tree, xi.process()).unwrap();
        prop_assert!(aggregate_spd(&m).unwrap().process().sup_distance(xi.process()) < 1e-12);
    }

    #[test]
    fn complete_first_order_conditions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let horizon = r.random_range(1..=3);
        let tree = random_tree(&mut r, horizon, 3);
        let xi = random_spd(&mut r, &tree);
        let a = random_agent(&mut r, &tree, 1.0, 0.3);
        let sol = constrained_consumption(&tree, &a, &xi).unwrap();
        let l = sol.multiplier;
        for (k, v, c) in sol.consumption.iter() {
            let marginal = a.gamma * (-a.rho * k as f64).exp();
            let price = l * xi.get(k, v);
            if c > 0.0 {
                prop_assert!((marginal * (-a.gamma * c).exp() - price).abs() <= 1e-9 * price.max(1.0));
            } else {
                prop_assert!(marginal <= price * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn richer_agents_consume_more(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 2, 3);
        let xi = random_spd(&mut r, &tree);
        let a = random_agent(&mut r, &tree, 1.0, 0.3);
        let bump = AdaptedProcess::from_fn(&tree, |_, _| if r.random_bool(0.5) { r.random_range(0.0..0.5) } else { 0.0 });
        let b = AgentSpec::new(&tree, a.gamma, a.rho, a.endowment.zip_with(&bump, |x, y| x + y)).unwrap();
        prop_assert!(solve_lambda_star(&tree, &b, &xi).unwrap() <= solve_lambda_star(&tree, &a, &xi).unwrap() * (1.0 + 1e-12));
        let (ca, cb) = (constrained_consumption(&tree, &a, &xi).unwrap(), constrained_consumption(&tree, &b, &xi).unwrap());
        for ((_, _, x), (_, _, y)) in ca.consumption.iter().zip(cb.consumption.iter()) {
            prop_assert!(y >= x - 1e-12);
        }
    }

    #[test]
    fn psi_is_nonincreasing_with_limits(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 2, 3);
        let xi = random_spd(&mut r, &tree);
        let a = random_agent(&mut r, &tree, 1.0, 0.3);
        let grid: Vec<f64> = (-40..=40).map(|i| (i as f64 * 0.25).exp()).collect();
        let vals: Vec<f64> = grid.iter().map(|&l| psi(&tree, &a, &xi, l).unwrap()).collect();
        for w in vals.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
            // Lipschitz in log λ with constant Σ E[ξ]/γ, so no jumps.
            prop_assert!(w[0] - w[1] <= 0.25 * 4.0 / a.gamma * (tree.horizon() + 1) as f64 * 10.0);
        }
        prop_assert_eq!(psi(&tree, &a, &xi, 1e12).unwrap(), 0.0);
        prop_assert!(psi(&tree, &a, &xi, 1e-12).unwrap() > psi(&tree, &a, &xi, 1e-6).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn closed_form_beats_feasible_perturbations(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 2, 3);
        let xi = random_spd(&mut r, &tree);
        let a = random_agent(&mut r, &tree, 1.0, 0.3);
        let sol = constrained_consumption(&tree, &a, &xi).unwrap();
        let c: Vec<f64> = sol.consumption.levels().iter().flatten().copied().collect();
        let q: Vec<f64> = (0..=tree.horizon())
            .flat_map(|k| (0..tree.width(k)).map(move |v| (k, v)))
            .map(|(k, v)| tree.prob(k, v) * xi.get(k, v))
            .collect();
        let qq: f64 = q.iter().map(|x| x * x).sum();
        for _ in 0..1000 {
            // Random direction with zero present value.
            let mut d: Vec<f64> = (0..c.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let dq: f64 = d.iter().zip(&q).map(|(x, y)| x * y).sum();
            d.iter_mut().zip(&q).for_each(|(x, y)| *x -= dq / qq * y);
            let tmax = c.iter().zip(&d).filter(|(_, dv)| **dv < 0.0).map(|(cv, dv)| -cv / dv).fold(1.0, f64::min);
            let t = r.random_range(0.0..=tmax);
            let mut it = c.iter().zip(&d).map(|(cv, dv)| (cv + t * dv).max(0.0));
            let p = AdaptedProcess::from_fn(&tree, |_, _| it.next().unwrap());
            prop_assert!(utility(&tree, a.gamma, a.rho, &p) <= sol.utility + 1e-12);
        }
    }

    #[test]
    fn kkt_density_and_dominance(seed in any::<u64>()) {
        let mut r = rng(seed);
        let horizon = r.random_range(1..=2);
        let tree = random_tree(&mut r, horizon, 3);
        let n_assets = r.random_range(0..=1);
        let m = random_span_market(&mut r, &tree, n_assets).unwrap();
        prop_assume!(aggregate_spd(&m).is_ok());
        let a = random_agent(&mut r, &tree, 1.0, 0.4);
        let sol = solve_kkt(&a, &m, &KktOptions::default()).unwrap();
        let rep = verify_kkt(&sol, &a, &m, 1e-8).unwrap();
        prop_assert!(rep.spd <= 1e-8, "{rep:?}");
        let map = TradingMap::new(&m);
        let eps = map.flatten(&a.endowment);
        for _ in 0..1000 {
            let d = DVector::from_fn(map.dim(), |_, _| r.random_range(-1.0..1.0));
            let ad = &map.a * &d;
            let tmax = eps.iter().zip(ad.iter()).filter(|(_, x)| **x < 0.0).map(|(e, x)| -e / x).fold(2.0, f64::min);
            let t = r.random_range(0.0..=tmax);
            let c = map.unflatten(&tree, &(&eps + t * ad).map(|x| x.max(0.0)));
            prop_assert!(utility(&tree, a.gamma, a.rho, &c) <= sol.utility + 1e-10);
        }
    }

    #[test]
    fn indicator_split_covers_every_block(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n_states = r.random_range(3..=6);
        let n_blocks = r.random_range(1..=n_states.min(3));
        let m = random_type_c(&mut r, n_states, n_blocks).unwrap();
        let tree = m.tree().clone();
        let e1: Vec<f64> = (0..n_states).map(|_| if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..2.0) }).collect();
        let a = AgentSpec::new(&tree, r.random_range(0.5..2.5), 0.0, AdaptedProcess::new(&tree, vec![vec![r.random_range(0.0..0.5)], e1.clone()]).unwrap()).unwrap();
        let cf = one_period_closed_form(&a, &m).unwrap();
        let WealthSpace::Blocks(h) = m.wealth_space(1) else { unreachable!() };
        prop_assert_eq!(cf.essinf_branch.len(), h.n_blocks());
        let inf = tree.ess_inf(1, &e1, h).unwrap();
        for v in 0..n_states {
            // Exactly one branch applies on every node.
            let pinned = cf.essinf_branch[h.block_of(v)];
            if pinned {
                prop_assert!((cf.c1[v] - (e1[v] - inf[v])).abs() < 1e-12);
            } else {
                prop_assert!(cf.c1[v] > 0.0 || e1[v] == inf[v]);
            }
        }
    }

    #[test]
    fn oracle_certifies_closed_form(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, 2, 3);
        let xi = random_spd(&mut r, &tree);
        let a = random_agent(&mut r, &tree, 1.0, 0.3);
        let closed = constrained_consumption(&tree, &a, &xi).unwrap();
        let o = oracle_complete(&tree, &a, &xi, false).unwrap();
        prop_assert!(o.value <= closed.utility + 1e-8);
        // The penalty route through the incomplete oracle agrees on a complete market.
        let m = MarketSpec::complete_under(tree.clone(), xi.process()).unwrap();
        let p = oracle_incomplete(&a, &m).unwrap();
        prop_assert!((p.value - o.value).abs() <= 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clearing_identity_and_regimes(seed in any::<u64>(), n in 1usize..=4) {
        let mut r = rng(seed);
        let econ = positive_economy(&mut r, n);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-2.0f64..2.0).exp()).collect();
        let xi = candidate_spd(&w, &econ).unwrap();
        let c = demands(&w, &econ, &xi).unwrap();
        let tree = econ.tree();
        for k in 0..=tree.horizon() {
            let (b, order) = betas(&w, econ.agents(), k).unwrap();
            let eta = etas(&w, econ.agents(), k).unwrap();
            for v in 0..tree.width(k) {
                let e = econ.aggregate().get(k, v);
                let sum: f64 = c.iter().map(|x| x.get(k, v)).sum();
                prop_assert!((sum - e).abs() <= 1e-10);
                for j in 1..=n {
                    let lhs = xi.get(k, v) <= b[order[j - 1]] * (1.0 + 1e-12);
                    let rhs = e >= eta[j] - 1e-12;
                    prop_assert_eq!(lhs, rhs);
                }
            }
        }
    }

    #[test]
    fn equilibria_price_the_bond_and_match_individual_optima(seed in any::<u64>(), n in 2usize..=3) {
        let mut r = rng(seed);
        let econ = positive_economy(&mut r, n);
        let sols = solve_equilibrium(&econ, &default_starts(&econ, 6, seed)).unwrap();
        for s in &sols {
            let rep = verify_equilibrium(&econ, s.spd.process(), &s.consumptions, 1e-8).unwrap();
            prop_assert!(rep.pass, "{rep:?}");
            let rates = implied_rates(econ.tree(), s.spd.process()).unwrap();
            if rates.iter().flatten().all(|r| *r >= 0.0) {
                prop_assert!(rep.pricing.is_some_and(|p| p <= 1e-8));
            }
            for (c, a) in s.consumptions.iter().zip(econ.agents()) {
                let own = constrained_consumption(econ.tree(), a, &s.spd).unwrap();
                prop_assert!(own.consumption.sup_distance(c) <= 1e-8);
            }
        }
    }

    #[test]
    fn log_mgf_convex_and_rate_function_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=4);
        let mut support: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 + r.random_range(0.0..0.2)).collect();
        support.dedup();
        let raw: Vec<f64> = support.iter().map(|_| r.random_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / s).collect();
        let Ok(law) = IncrementLaw::new(support.clone(), probs) else { return Ok(()) };
        let h = 1e-3;
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            let d2 = (law.log_mgf(x + h) - 2.0 * law.log_mgf(x) + law.log_mgf(x - h)) / (h * h);
            prop_assert!(d2 >= -1e-9 * (1.0 + x.abs()).powi(2) - 1e-6);
        }
        let rf = RateFunction::new(law.clone());
        prop_assert!(legendre(&rf, law.mean()).finite().unwrap().abs() < 1e-10);
        for i in 0..=20 {
            let y = law.min() + (law.max() - law.min()) * i as f64 / 20.0;
            prop_assert!(legendre(&rf, y).finite().unwrap() >= -1e-12);
        }
    }

    #[test]
    fn savings_identities(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n_states = r.random_range(3..=6);
        let n_blocks = r.random_range(1..=n_states.min(3));
        let m = random_type_c(&mut r, n_states, n_blocks).unwrap();
        let x: Vec<f64> = (0..n_states).map(|_| r.random_range(0.0..3.0)).collect();
        let inst = SavingsInstance::new(m, r.random_range(0.5..2.0), r.random_range(0.0..0.1), r.random_range(3.0..6.0), x, vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        let h = inst.h1().unwrap();
        for &eps in &inst.eps_grid {
            let e = endowment_eps(inst.tree(), &inst.x, eps, h).unwrap();
            for mean in inst.tree().cond_expect(1, &e, h).unwrap() {
                prop_assert!((mean - 1.0).abs() <= 1e-12);
            }
            prop_assert!(variance_fkg_slack(&inst, eps).unwrap().iter().all(|s| *s >= -1e-12));
            prop_assert!(savings_fkg_slack(&inst, eps).unwrap().iter().all(|s| *s >= -1e-12));
        }
        for p in solve_c0_curve(&inst).unwrap() {
            prop_assert!(p.budget_residual <= 1e-10);
            prop_assert!(p.solver_gap <= 1e-7);
        }
    }
}

#[test]
fn limit_does_not_depend_on_weights() {
    let law = IncrementLaw::uniform(vec![0.0, 2.0]).unwrap();
    let a = RandomWalkEconomy::new(vec![1.0, 2.0], vec![0.05, 0.05], None, law.clone()).unwrap();
    let b = RandomWalkEconomy::new(vec![1.0, 2.0], vec![0.05, 0.05], Some(vec![0.2, 5.0]), law)
        .unwrap();
    let (ya, yb) = (bond_yield(&a, 200).unwrap(), bond_yield(&b, 200).unwrap());
    assert!((ya - yb).abs() < 0.005, "{ya} vs {yb}");
}

#[test]
fn yield_gap_shrinks_after_burn_in() {
    let law = IncrementLaw::uniform(vec![0.0, 2.0]).unwrap();
    let econ = RandomWalkEconomy::new(vec![1.0, 2.0], vec![0.05, 0.05], None, law).unwrap();
    let gaps =
        cara::bonds::gap_to_limit(&econ, &(1..=20).map(|i| 20 * i).collect::<Vec<_>>()).unwrap();
    for w in gaps.windows(2) {
        assert!(w[1].1.abs() < w[0].1.abs());
    }
}
