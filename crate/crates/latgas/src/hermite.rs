//! Orthonormal Hermite functions, their ladder identities, and the dual
//! Sobolev-type norms built on the eigenvalues `lambda_z = 2z + 1` of
//! `u^2 - Laplacian`.
//!
//! The orthonormal convention `h_0(u) = pi^{-1/4} e^{-u^2/2}` is used
//! throughout so that `<h_i, h_j> = delta_ij` holds exactly; orthonormality
//! is load-bearing for the `H_{-k}` norms.

use nalgebra::DMatrix;

/// Eigenvalue of `u^2 - d^2/du^2` on `h_z`.
#[inline]
pub fn eigenvalue(z: usize) -> f64 {
    2.0 * z as f64 + 1.0
}

/// Evaluates `h_0..=h_zmax` at `u` by the stable three-term recurrence
/// `h_{z+1} = u sqrt(2/(z+1)) h_z - sqrt(z/(z+1)) h_{z-1}`.
pub fn eval_all(zmax: usize, u: f64) -> Vec<f64> {
    let mut out = vec![0.0; zmax + 1];
    // below the double-precision floor everything in the table is zero
    if u * u / 2.0 > 700.0 {
        return out;
    }
    let h0 = std::f64::consts::PI.powf(-0.25) * (-u * u / 2.0).exp();
    out[0] = h0;
    if zmax >= 1 {
        out[1] = std::f64::consts::SQRT_2 * u * h0;
    }
    for z in 1..zmax {
        let zf = z as f64;
        out[z + 1] = u * (2.0 / (zf + 1.0)).sqrt() * out[z] - (zf / (zf + 1.0)).sqrt() * out[z - 1];
    }
    out
}

pub fn eval(z: usize, u: f64) -> f64 {
    eval_all(z, u)[z]
}

/// `d^k/du^k h_z` via repeated application of the ladder
/// `h_z' = sqrt(z/2) h_{z-1} - sqrt((z+1)/2) h_{z+1}`.
pub fn deriv(z: usize, order: u32, u: f64) -> f64 {
    // coefficients over the basis h_{z-order ..= z+order}
    let mut coeff = vec![0.0; z + order as usize + 2];
    coeff[z] = 1.0;
    for _ in 0..order {
        let mut next = vec![0.0; coeff.len()];
        for (j, &c) in coeff.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let jf = j as f64;
            if j >= 1 {
                next[j - 1] += c * (jf / 2.0).sqrt();
            }
            next[j + 1] -= c * ((jf + 1.0) / 2.0).sqrt();
        }
        coeff = next;
        coeff.push(0.0);
    }
    let table = eval_all(coeff.len() - 1, u);
    coeff.iter().zip(&table).map(|(c, h)| c * h).sum()
}

/// Gauss-Hermite nodes and weights (weight `e^{-x^2}`): nodes from the
/// Golub-Welsch Jacobi matrix, weights from the Christoffel function
/// `w_k = 1 / sum_{z<n} P_z(x_k)^2` with orthonormal polynomials, which
/// stays accurate for the astronomically small tail weights.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(j);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let weights = nodes
        .iter()
        .map(|&x| {
            let p = eval_all_polynomial(n - 1, x);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    (nodes, weights)
}

/// The Gaussian-stripped polynomials `P_z = h_z e^{u^2/2}`; same recurrence,
/// numerically safe at the far quadrature nodes.
fn eval_all_polynomial(zmax: usize, u: f64) -> Vec<f64> {
    let mut out = vec![0.0; zmax + 1];
    out[0] = std::f64::consts::PI.powf(-0.25);
    if zmax >= 1 {
        out[1] = std::f64::consts::SQRT_2 * u * out[0];
    }
    for z in 1..zmax {
        let zf = z as f64;
        out[z + 1] = u * (2.0 / (zf + 1.0)).sqrt() * out[z] - (zf / (zf + 1.0)).sqrt() * out[z - 1];
    }
    out
}

/// `<h_i, h_j>` by Gauss-Hermite quadrature; exact (up to rounding) for
/// `i + j <= 2 nodes - 1` since `h_i h_j e^{u^2}` is a polynomial.
pub fn inner_product(i: usize, j: usize, nodes: &[f64], weights: &[f64]) -> f64 {
    let zmax = i.max(j);
    let mut acc = 0.0;
    for (&x, &w) in nodes.iter().zip(weights) {
        let p = eval_all_polynomial(zmax, x);
        acc += w * p[i] * p[j];
    }
    acc
}

/// Composite-Simpson `L^1` norm on the effective support, with a doubling
/// check; returns `(norm, resolved)` where `resolved` is false if the
/// refinement still moves the value by more than 1e-8 relative.
pub fn l1_norm(z: usize) -> (f64, bool) {
    let half = (2.0 * z as f64 + 1.0).sqrt() + 12.0;
    let coarse = simpson_abs(z, half, 1 << 15);
    let fine = simpson_abs(z, half, 1 << 16);
    let resolved = (coarse - fine).abs() <= 1e-8 * fine.abs().max(1.0);
    (fine, resolved)
}

fn simpson_abs(z: usize, half: f64, intervals: usize) -> f64 {
    let n = intervals;
    let hstep = 2.0 * half / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let u = -half + i as f64 * hstep;
        let v = eval(z, u).abs();
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * v;
    }
    acc * hstep / 3.0
}

/// `H_{-k}` norm of a coefficient vector: `sqrt(sum c_z^2 (2z+1)^{-k})`.
pub fn h_minus_k_norm(coeffs: &[f64], k: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(z, &c)| c * c * eigenvalue(z).powf(-k))
        .sum::<f64>()
        .sqrt()
}

/// `<f, h_z>` for a function on a finite support, by composite Simpson.
pub fn project(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, z: usize) -> f64 {
    let n = 1 << 14;
    let hstep = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let u = lo + i as f64 * hstep;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * f(u) * eval(z, u);
    }
    acc * hstep / 3.0
}
