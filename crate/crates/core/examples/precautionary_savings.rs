//! Present consumption falls as un-insurable income risk grows at a fixed
//! conditional mean.

use cara::market::MarketSpec;
use cara::probtree::{SubAlgebra, Tree};
use cara::savings::{
    default_grid, monotonicity_report, regime_threshold, solve_c0_curve, SavingsInstance,
};

fn main() -> cara::Result<()> {
    let tree = Tree::from_conditional(&[vec![vec![0.2, 0.3, 0.35, 0.15]]])?;
    let h = SubAlgebra::new(&tree, 1, vec![0, 0, 1, 1])?;
    let market = MarketSpec::type_c_one_period(tree, h, &[1.1, 1.1, 0.85, 0.85], 0.01)?;
    let inst = SavingsInstance::new(
        market,
        1.0,
        0.02,
        5.0,
        vec![0.0, 2.0, 0.5, 1.5],
        default_grid(),
    )?;
    println!("interior for ε_0 ≥ {:.6}", regime_threshold(&inst)?);
    let curve = solve_c0_curve(&inst)?;
    let rep = monotonicity_report(&inst, &curve)?;
    println!("{:>5} {:>12} {:>12} {:>12}", "ε", "c0", "dc0/dε", "Var max");
    for (p, d) in curve.iter().zip(&rep.derivative) {
        let v = p.variance.iter().cloned().fold(0.0, f64::max);
        println!("{:>5.2} {:>12.8} {:>12.3e} {:>12.6}", p.eps, p.c0, d, v);
    }
    println!(
        "nonincreasing: {} (largest increase {:.1e})",
        rep.pass, rep.max_violation
    );
    Ok(())
}
