//! Solve a symmetric positive-definite system through a matrix-free operator.

use recunlearn::influence::{cg_solve, SolverConfig};

fn main() -> recunlearn::Result<()> {
    // Tridiagonal 1-D Laplacian plus a shift, never stored as a matrix.
    let n = 200;
    let shift = 0.01;
    let op = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let left = if i > 0 { v[i - 1] } else { 0.0 };
                let right = if i + 1 < n { v[i + 1] } else { 0.0 };
                (2.0 + shift) * v[i] - left - right
            })
            .collect()
    };
    let rhs = vec![1.0; n];
    let cfg = SolverConfig { cg_tol: 1e-10, cg_max_iter: 500, ..Default::default() };
    let out = cg_solve(op, &rhs, &cfg)?;
    println!("iterations {}, relative residual {:.2e}, converged {}", out.iters, out.residual, out.converged);
    println!("x[0] = {:.6}, x[n/2] = {:.6}", out.solution[0], out.solution[n / 2]);
    Ok(())
}
