//! The two-agent one-period example built to admit several equilibria,
//! scanned for roots of both the budget system and its reduced form.

use cara::equilibrium::{nonuniqueness_scan, TwoAgentExample};

fn main() -> cara::Result<()> {
    let ex = TwoAgentExample::construct(0.3, 0.005)?;
    println!(
        "endowments: agent 1 ({:.6}, {:.6}), agent 2 ({:.6}, {:.6})",
        ex.e1_0, ex.e1_1, ex.e2_0, ex.e2_1
    );
    println!("hypotheses hold: {}", ex.hypotheses_hold());
    println!(
        "h peaks at x = {:.6} with value {:.6}",
        ex.x_max(),
        ex.h_max()
    );

    for (x, y) in ex.recipe_pairs()? {
        let r = ex.recipe_residuals(x, y);
        let b = ex.budget_residuals(x, y);
        println!(
            "constructed pair ({x:.6}, {y:.6}): reduced residuals ({:.1e}, {:.1e}), budget residuals ({:.3e}, {:.3e})",
            r[0], r[1], b[0], b[1]
        );
    }

    let scan = nonuniqueness_scan(&ex, 24)?;
    println!(
        "{} equilibrium(s) of the budget system:",
        scan.equilibria.len()
    );
    for r in &scan.equilibria {
        println!(
            "  x = {:.8}, y = {:.8}, ξ_1 = {:.8}, budgets {:.1e}",
            r.x,
            r.y,
            ex.xi_1(r.x, r.y),
            r.budget_max()
        );
    }
    println!("{} root(s) of the reduced system", scan.recipe_roots.len());
    for r in &scan.recipe_roots {
        println!(
            "  x = {:.8}, y = {:.8}, budgets off by {:.3e}",
            r.x,
            r.y,
            r.budget_max()
        );
    }
    Ok(())
}
