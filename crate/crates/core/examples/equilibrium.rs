//! Heterogeneous-agent equilibrium: Negishi weights by multi-start Newton,
//! the closed-form SPD and a full certification of the result.

use cara::complete::AgentSpec;
use cara::equilibrium::{
    betas, default_starts, etas, solve_equilibrium, verify_equilibrium, EconomySpec,
};
use cara::probtree::{AdaptedProcess, Tree};

fn main() -> cara::Result<()> {
    let tree =
        Tree::from_conditional(&[vec![vec![0.5, 0.5]], vec![vec![0.3, 0.7], vec![0.6, 0.4]]])?;
    let agent = |g: f64, r: f64, v: Vec<Vec<f64>>| {
        AgentSpec::new(&tree, g, r, AdaptedProcess::new(&tree, v)?)
    };
    let agents = vec![
        agent(
            1.0,
            0.02,
            vec![vec![1.0], vec![0.0, 2.0], vec![0.5, 0.0, 1.5, 3.0]],
        )?,
        agent(
            2.0,
            0.05,
            vec![vec![0.5], vec![1.0, 0.0], vec![0.0, 1.0, 0.2, 0.0]],
        )?,
        agent(
            0.5,
            0.0,
            vec![vec![0.0], vec![0.4, 0.4], vec![1.0, 1.0, 0.0, 0.5]],
        )?,
    ];
    let econ = EconomySpec::new(tree, agents)?;
    let sols = solve_equilibrium(&econ, &default_starts(&econ, 8, 0))?;
    println!("{} distinct equilibrium(s)", sols.len());
    for sol in &sols {
        println!(
            "weights {:?} after {} Newton steps",
            sol.weights, sol.iterations
        );
        let (b, order) = betas(&sol.weights, econ.agents(), 2)?;
        println!("  β at t = 2: {b:?}, order {order:?}");
        println!("  η at t = 2: {:?}", etas(&sol.weights, econ.agents(), 2)?);
        for k in 0..=econ.tree().horizon() {
            println!("  ξ_{k} = {:?}", sol.spd.level(k));
        }
        for (i, c) in sol.consumptions.iter().enumerate() {
            println!("  agent {i}: c_2 = {:?}", c.level(2));
        }
        let rep = verify_equilibrium(&econ, sol.spd.process(), &sol.consumptions, 1e-8)?;
        println!(
            "  clearing {:.1e}, budgets {:?}, pass {}",
            rep.clearing, rep.budgets, rep.pass
        );
    }
    Ok(())
}
