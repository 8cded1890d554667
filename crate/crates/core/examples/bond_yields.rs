//! Zero-coupon yields when aggregate endowment is a random walk: exact
//! lattice pricing, the long-run limit, yield bounds and a Monte Carlo check.

use cara::bonds::{
    bond_curve, bond_price, gap_to_limit, hetero_gamma_limit, legendre, monte_carlo_price,
    ordering_threshold, yield_bounds, IncrementLaw, RandomWalkEconomy, RateFunction,
};

fn main() -> cara::Result<()> {
    let law = IncrementLaw::uniform(vec![0.0, 2.0])?;
    let econ = RandomWalkEconomy::new(vec![1.0, 2.0], vec![0.05, 0.05], None, law.clone())?;
    let limit = hetero_gamma_limit(&econ.gammas, 0.05, &law);
    println!("limit yield {limit:.6}");
    let ts = [10, 50, 100, 200, 400];
    for (p, (_, gap)) in bond_curve(&econ, &ts)?
        .iter()
        .zip(gap_to_limit(&econ, &ts)?)
    {
        println!("  t = {:>3}: Y = {:.6}, gap {gap:+.3e}", p.t, p.yield_);
    }
    for t in [50, 100] {
        let mc = monte_carlo_price(&econ, t, 200_000, 7, true)?;
        let exact = bond_price(&econ, t)?.ln();
        println!(
            "  MC at t = {t}: log B = {:.6} vs exact {exact:.6}, z = {:.2}",
            mc.log_price,
            mc.z_score(exact)
        );
    }

    let rf = RateFunction::new(IncrementLaw::uniform(vec![0.0, 1.0])?);
    println!(
        "Λ*(0.25) = {:?}, Λ*(1.5) = {:?}",
        legendre(&rf, 0.25),
        legendre(&rf, 1.5)
    );

    let het = RandomWalkEconomy::new(
        vec![1.0, 1.0],
        vec![0.2, 0.1],
        None,
        IncrementLaw::uniform(vec![0.0, 1.0])?,
    )?;
    let b = yield_bounds(&het)?;
    println!("ordering settles after t = {}", ordering_threshold(&het)?);
    println!("bounds: lower {:?}, upper {:?}", b.lower, b.upper);
    for p in bond_curve(&het, &[200, 300, 400])? {
        println!("  t = {}: Y = {:.6}", p.t, p.yield_);
    }
    Ok(())
}
