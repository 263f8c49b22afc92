//! Sparse matrix factorization of random deep linear chains.
//!
//! A chain `Y = X_1 X_2 ... X_s (1/sqrt(d))^s` of random d-sparse integer
//! factors is factorized layer by layer: the off-diagonal of `d * Y Y^T`
//! rounds to `X_1 X_1^T`, the correlation graph of `X_1` is clustered into
//! its columns, and `X_1` is solved out of `Y` to expose the rest of the
//! chain. Recovered factors are equal to the truth up to column permutation
//! and per-column sign.
//!
//! Modules:
//! - [`genmodel`]: seeded generation of chains and the forward product
//! - [`gram`]: rounded Gram graph and margin reports
//! - [`recovery`]: factor reconstruction from the correlation graph
//! - [`reconcile`]: column selection against the Gram residual
//! - [`peeling`]: layer solves and whole-chain factorization
//! - [`reversal`]: recovering a layer input from its output
//! - [`equiv`]: matching up to permutation and sign
//! - [`diagnostics`]: empirical concentration measurements

pub mod diagnostics;
pub mod equiv;
pub mod genmodel;
pub mod gram;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod peeling;
pub mod reconcile;
pub mod recovery;
pub mod reversal;
pub mod rng;

pub use genmodel::{forward_product, gen_factor_chain, gen_sparse_column, ModelParams};
pub use gram::{rounded_gram, GramGraph};
pub use matrix::{DenseMatrix, MatrixError, SparseIntMatrix};
pub use peeling::{factorize_chain, FactorizationReport, LayerStatus};
pub use recovery::{recover_factor, RecoveryConfig, RecoveryError};
