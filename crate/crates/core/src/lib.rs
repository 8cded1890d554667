//! Optimal consumption for exponential-utility agents whose consumption must stay
//! non-negative, on finite probability trees.
//!
//! The crate covers complete markets (closed forms with a scalar multiplier),
//! incomplete markets (a Kuhn–Tucker active-set solver and the one-period
//! closed form for markets whose wealth space is `L²(H)`), heterogeneous-agent
//! equilibria, long-run bond yields and the precautionary savings experiment.

pub mod bonds;
pub mod cli;
pub mod complete;
pub mod equilibrium;
pub mod error;
pub mod incomplete;
pub mod instances;
pub mod market;
pub mod numeric;
pub mod oracle;
pub mod probtree;
pub mod savings;

pub use error::{Error, Result};
