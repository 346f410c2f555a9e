//! Mixed Crouzeix-Raviart finite element / upwind finite volume solver for the
//! compressible isentropic Navier-Stokes equations with inflow/outflow data.
//!
//! Density lives in the piecewise-constant space [`spaces::QField`], velocity
//! in the Crouzeix-Raviart space [`spaces::CrField`]. One implicit time step
//! is computed by [`scheme::step`]; [`diagnostics`] evaluates the discrete
//! balance laws the scheme satisfies.

pub mod mesh;
pub mod quadrature;
pub mod spaces;
pub mod flux;
pub mod physics;
pub mod linalg;
pub mod scheme;
pub mod diagnostics;
pub mod manufactured;
pub mod identities;
pub mod config;
pub mod output;
pub mod run;
