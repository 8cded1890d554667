//! Building a tree, adapted processes, conditional expectations and the
//! essential infimum over a coarser sigma-algebra.

use cara::probtree::{AdaptedProcess, SubAlgebra, Tree};

fn main() -> cara::Result<()> {
    // Two periods: a fair coin, then a biased three-way branch after each outcome.
    let tree = Tree::from_conditional(&[
        vec![vec![0.5, 0.5]],
        vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.3, 0.1]],
    ])?;
    println!("horizon {}, {} nodes", tree.horizon(), tree.total_nodes());
    for k in 0..=tree.horizon() {
        println!("level {k}: probabilities {:?}", tree.probs(k));
    }

    let x = AdaptedProcess::from_fn(&tree, |k, v| (k * 10 + v) as f64);
    let leaves = x.level(2);
    println!("E[X_2] = {:.4}", tree.expect(2, leaves));
    println!("E[X_2 | F_1] = {:?}", tree.cond_expect_next(1, leaves));

    // H groups the leaves by their middle branch, ignoring the coin.
    let h = SubAlgebra::new(&tree, 2, vec![0, 1, 2, 0, 1, 2])?;
    println!("E[X_2 | H] = {:?}", tree.cond_expect(2, leaves, &h)?);
    println!("essinf(X_2 | H) = {:?}", tree.ess_inf(2, leaves, &h)?);

    let coin = SubAlgebra::from_ancestors(&tree, 2, 1);
    println!(
        "E[X_2 | F_1] via ancestors = {:?}",
        tree.cond_expect(2, leaves, &coin)?
    );
    Ok(())
}
