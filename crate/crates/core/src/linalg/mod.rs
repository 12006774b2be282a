//! Dense and compressed-sparse-row matrix primitives.

mod dense;
mod eigen;
mod sparse;

pub use dense::{dense_matmul, dense_matmul_nt, dense_matmul_tn, DenseMatrix};
pub use eigen::{jacobi_eigh, SymmetricEigen};
pub use sparse::{sparsify, spmm, spmm_transposed, transpose_sparse, SparseMatrix};
