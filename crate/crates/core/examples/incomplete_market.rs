//! Kuhn–Tucker solution with one stock on a trinomial tree, and the
//! one-period closed form for a market whose wealth space is `L²(H)`.

use cara::complete::AgentSpec;
use cara::incomplete::{one_period_closed_form, solve_kkt, verify_kkt, KktOptions};
use cara::market::{aggregate_spd, MarketConfig, MarketSpec};
use cara::probtree::{AdaptedProcess, SubAlgebra, Tree};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let doc: serde_json::Value =
        serde_json::from_str(include_str!("../configs/incomplete_trinomial.json"))?;
    let cfg: MarketConfig = serde_json::from_value(doc["market"].clone())?;
    let m = cfg.build()?;
    let tree = m.tree();
    let e = AdaptedProcess::new(
        tree,
        vec![
            vec![0.1],
            vec![1.5, 0.0, 0.4],
            vec![0.0, 2.0, 0.3, 0.3, 1.0, 0.0],
        ],
    )?;
    let agent = AgentSpec::new(tree, 1.0, 0.02, e)?;
    let sol = solve_kkt(&agent, &m, &KktOptions::default())?;
    let rep = verify_kkt(&sol, &agent, &m, 1e-8)?;
    println!(
        "utility {:.8}, {} iterations, KKT pass {}",
        sol.utility, sol.iterations, rep.pass
    );
    for k in 0..=tree.horizon() {
        println!("  c_{k} = {:?}", sol.consumption.level(k));
        println!("  multipliers_{k} = {:?}", sol.multipliers.level(k));
    }
    println!("aggregate SPD level 1: {:?}", aggregate_spd(&m)?.level(1));

    // Type-C: blocks {0,1} and {2,3} are insurable, the split within a block is not.
    let tree = Tree::from_conditional(&[vec![vec![0.2, 0.3, 0.35, 0.15]]])?;
    let h = SubAlgebra::new(&tree, 1, vec![0, 0, 1, 1])?;
    let m = MarketSpec::type_c_one_period(tree.clone(), h, &[1.1, 1.1, 0.85, 0.85], 0.01)?;
    let agent = AgentSpec::new(
        &tree,
        1.5,
        0.03,
        AdaptedProcess::new(&tree, vec![vec![0.0], vec![0.0, 1.8, 0.6, 1.2]])?,
    )?;
    let cf = one_period_closed_form(&agent, &m)?;
    let kkt = solve_kkt(&agent, &m, &KktOptions::default())?;
    println!(
        "closed form c0 {:.8}, c1 {:?}, essinf branch {:?}",
        cf.c0, cf.c1, cf.essinf_branch
    );
    println!(
        "active-set c0 {:.8}, c1 {:?}",
        kkt.consumption.get(0, 0),
        kkt.consumption.level(1)
    );
    Ok(())
}
