//! Seeded random instances for experiments, oracle checks and tests.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::complete::AgentSpec;
use crate::error::Result;
use crate::market::{MarketSpec, Spd};
use crate::probtree::{AdaptedProcess, SubAlgebra, Tree};

fn random_probs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // Absorb round-off so that each list sums to one exactly in floating point.
    let rest: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - rest;
    p
}

/// A tree with `horizon` periods and between 1 and `max_branch` children per node.
/// At least one node per level branches, so the tree is never a single path.
pub fn random_tree(rng: &mut impl Rng, horizon: usize, max_branch: usize) -> Tree {
    let mut conditional = Vec::with_capacity(horizon);
    let mut width = 1;
    for _ in 0..horizon {
        let mut level: Vec<Vec<f64>> = (0..width)
            .map(|_| {
                let b = rng.random_range(1..=max_branch);
                random_probs(rng, b)
            })
            .collect();
        if max_branch >= 2 && level.iter().all(|c| c.len() == 1) {
            let u = rng.random_range(0..width);
            level[u] = random_probs(rng, 2);
        }
        width = level.iter().map(Vec::len).sum();
        conditional.push(level);
    }
    Tree::from_conditional(&conditional).expect("generated probabilities are valid")
}

/// A positive SPD whose implied interest rates are non-negative.
pub fn random_spd(rng: &mut impl Rng, tree: &Tree) -> Spd {
    let mut levels = vec![vec![1.0]];
    for k in 0..tree.horizon() {
        let mut next = vec![0.0; tree.width(k + 1)];
        for u in 0..tree.width(k) {
            let ch = tree.children(k, u);
            let z: Vec<f64> = ch
                .clone()
                .map(|_| rng.random_range(-1.2f64..1.2).exp())
                .collect();
            let mean: f64 = ch
                .clone()
                .zip(&z)
                .map(|(c, x)| tree.cond_prob(k + 1, c) * x)
                .sum();
            let discount = rng.random_range(0.9..1.0);
            for (c, x) in ch.zip(&z) {
                next[c] = levels[k][u] * discount * x / mean;
            }
        }
        levels.push(next);
    }
    Spd::new(tree, AdaptedProcess::new(tree, levels).expect("shape")).expect("positive")
}

/// Endowment uniform on `[0, scale]`, zero on each node with probability `zero_prob`.
pub fn random_endowment(
    rng: &mut impl Rng,
    tree: &Tree,
    scale: f64,
    zero_prob: f64,
) -> AdaptedProcess {
    let mut e = AdaptedProcess::from_fn(tree, |_, _| {
        if rng.random_bool(zero_prob) {
            0.0
        } else {
            rng.random_range(0.0..scale)
        }
    });
    if e.iter().all(|(_, _, x)| x == 0.0) {
        e.set(0, 0, scale * 0.5);
    }
    e
}

pub fn random_agent(rng: &mut impl Rng, tree: &Tree, scale: f64, zero_prob: f64) -> AgentSpec {
    let gamma = rng.random_range(0.5..3.0);
    let rho = rng.random_range(0.0..0.2);
    let e = random_endowment(rng, tree, scale, zero_prob);
    AgentSpec::new(tree, gamma, rho, e).expect("valid agent")
}

/// Incomplete market: bond plus `n_assets` terminal claims priced under a random SPD.
pub fn random_span_market(rng: &mut impl Rng, tree: &Tree, n_assets: usize) -> Result<MarketSpec> {
    let xi = random_spd(rng, tree);
    let leaves = tree.width(tree.horizon());
    let payoffs: Vec<Vec<f64>> = (0..n_assets)
        .map(|_| (0..leaves).map(|_| rng.random_range(0.0..2.0)).collect())
        .collect();
    MarketSpec::priced_under(tree.clone(), xi.process(), &payoffs)
}

/// One-period market of type C with `n_states` states grouped into `n_blocks`
/// blocks, a random block kernel and a random rate.
pub fn random_type_c(rng: &mut impl Rng, n_states: usize, n_blocks: usize) -> Result<MarketSpec> {
    let tree = Tree::from_conditional(&[vec![random_probs(rng, n_states)]])?;
    let mut labels: Vec<usize> = (0..n_states).map(|v| v % n_blocks).collect();
    labels.shuffle(rng);
    let h = SubAlgebra::new(&tree, 1, labels)?;
    let per_block: Vec<f64> = (0..n_blocks)
        .map(|_| rng.random_range(-0.7f64..0.7).exp())
        .collect();
    let kernel: Vec<f64> = (0..n_states).map(|v| per_block[h.block_of(v)]).collect();
    let rate = rng.random_range(0.0..0.05);
    MarketSpec::type_c_one_period(tree, h, &kernel, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{implied_rates, verify_spd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_objects_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let tree = random_tree(&mut rng, 3, 3);
            assert!(tree.width(3) <= 27);
            let xi = random_spd(&mut rng, &tree);
            let rates = implied_rates(&tree, xi.process()).unwrap();
            assert!(rates.iter().flatten().all(|&r| r >= -1e-12));
            let m = random_span_market(&mut rng, &tree, 1).unwrap();
            let agg = crate::market::aggregate_spd(&m).unwrap();
            assert!(verify_spd(&m, agg.process(), 1e-10).unwrap().pass);
        }
    }

    #[test]
    fn type_c_generator_covers_all_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_type_c(&mut rng, 5, 2).unwrap();
        match m.wealth_space(1) {
            crate::market::WealthSpace::Blocks(h) => assert_eq!(h.n_blocks(), 2),
            _ => panic!("expected blocks"),
        }
    }
}
