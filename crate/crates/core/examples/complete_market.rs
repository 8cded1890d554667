//! Optimal consumption in a complete market: the unconstrained solution can
//! go negative, the constrained one clips at zero and re-solves the multiplier.

use cara::complete::{
    constrained_consumption, positivity_certificate, present_value, solve_lambda_star,
    solve_unconstrained, AgentSpec,
};
use cara::market::Spd;
use cara::oracle::oracle_complete;
use cara::probtree::{AdaptedProcess, Tree};

fn main() -> cara::Result<()> {
    let tree = Tree::uniform(&[0.5, 0.5], 2)?;
    let xi = Spd::new(
        &tree,
        AdaptedProcess::new(
            &tree,
            vec![vec![1.0], vec![0.6, 1.4], vec![0.3, 0.9, 1.1, 2.4]],
        )?,
    )?;
    let endowment = AdaptedProcess::new(
        &tree,
        vec![vec![0.1], vec![0.0, 1.0], vec![2.0, 0.0, 0.5, 0.0]],
    )?;
    let agent = AgentSpec::new(&tree, 1.5, 0.03, endowment)?;
    println!(
        "present value of endowment: {:.6}",
        present_value(&tree, &xi, &agent.endowment)
    );

    let free = solve_unconstrained(&tree, &agent, &xi)?;
    println!(
        "unconstrained: min consumption {:.4}",
        free.consumption.min_value()
    );

    let lambda = solve_lambda_star(&tree, &agent, &xi)?;
    let c = constrained_consumption(&tree, &agent, &xi)?;
    println!(
        "λ* = {lambda:.6}, utility {:.6}, budget residual {:.1e}",
        c.utility, c.budget_residual
    );
    for k in 0..=tree.horizon() {
        println!("  c_{k} = {:?}", c.consumption.level(k));
    }

    let brute = oracle_complete(&tree, &agent, &xi, false)?;
    println!(
        "oracle gap: {:.2e}",
        c.consumption.sup_distance(&brute.consumption)
    );

    // A rich agent facing a bounded density never hits zero.
    let rich = AgentSpec::new(&tree, 1.5, 0.03, AdaptedProcess::constant(&tree, 5.0))?;
    let cert = positivity_certificate(&tree, &rich, &xi, 2.5)?;
    println!("positivity certificate for the rich agent: {}", cert.holds);
    Ok(())
}
