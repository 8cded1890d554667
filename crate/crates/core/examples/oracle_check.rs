//! Closed forms and the active-set solver against brute-force optimizers on
//! random instances.

use cara::complete::constrained_consumption;
use cara::incomplete::{solve_kkt, KktOptions};
use cara::instances::{random_agent, random_span_market, random_spd, random_tree};
use cara::oracle::{oracle_complete, oracle_incomplete};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cara::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..5 {
        let tree = random_tree(&mut rng, 2, 3);
        let xi = random_spd(&mut rng, &tree);
        let a = random_agent(&mut rng, &tree, 1.0, 0.3);
        let closed = constrained_consumption(&tree, &a, &xi)?;
        let o = oracle_complete(&tree, &a, &xi, false)?;
        println!(
            "complete {i}: {} nodes, gap {:.2e} ({:?}, {} iterations)",
            tree.total_nodes(),
            closed.consumption.sup_distance(&o.consumption),
            o.method,
            o.iterations
        );
    }
    for i in 0..3 {
        let tree = random_tree(&mut rng, 2, 3);
        let m = random_span_market(&mut rng, &tree, 1)?;
        let a = random_agent(&mut rng, &tree, 1.0, 0.4);
        let s = solve_kkt(&a, &m, &KktOptions::default())?;
        let o = oracle_incomplete(&a, &m)?;
        println!(
            "incomplete {i}: utility {:.10} vs oracle {:.10}",
            s.utility, o.value
        );
    }
    Ok(())
}
