//! Legendre-Gauss-Lobatto spectral machinery.
//!
//! The N+1 LGL nodes are the endpoints ±1 together with the roots of
//! L̇_N, the derivative of the Nth Legendre polynomial. On these nodes we
//! build Gauss-Lobatto quadrature weights (exact for polynomials of degree
//! ≤ 2N−1), the dense differentiation matrix, and barycentric Lagrange
//! interpolation, all on arbitrary affine-mapped intervals.

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Scalar types the spectral core is generic over.
pub trait Real: Float + FromPrimitive + std::fmt::Debug + Send + Sync + 'static {
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("polynomial order {0} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("order must be at least 1")]
    OrderTooSmall,
    #[error("evaluation point {0} lies outside [-1, 1]")]
    OutOfDomain(f64),
    #[error("evaluation point {0} lies outside the mapped interval [{1}, {2}]")]
    OutOfInterval(f64, f64, f64),
    #[error("expected {expected} node values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("node iteration failed to converge for order {0}")]
    NodeIterationDiverged(usize),
    #[error("interval end {1} must exceed start {0}")]
    EmptyInterval(f64, f64),
}

/// Largest supported polynomial order.
pub const MAX_ORDER: usize = 256;

/// Evaluate the Legendre polynomial L_N and its derivative L̇_N at `t`.
///
/// Uses the three-term recurrence; exact at the endpoints
/// (L_N(1) = 1, L_N(-1) = (-1)^N).
pub fn legendre_eval<S: Real>(order: usize, t: S) -> Result<(S, S), SpectralError> {
    let slack = S::c(1.0 + 1e-12);
    if t.abs() > slack {
        return Err(SpectralError::OutOfDomain(t.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(legendre_unchecked(order, t))
}

fn legendre_unchecked<S: Real>(order: usize, t: S) -> (S, S) {
    if order == 0 {
        return (S::one(), S::zero());
    }
    let mut p_prev = S::one(); // L_0
    let mut p = t; // L_1
    let mut d_prev = S::zero(); // L̇_0
    let mut d = S::one(); // L̇_1
    for k in 1..order {
        let kf = S::from_usize(k).unwrap();
        let two_k1 = kf + kf + S::one();
        let k1 = kf + S::one();
        let p_next = (two_k1 * t * p - kf * p_prev) / k1;
        // L̇_{k+1} = L̇_{k-1} + (2k+1) L_k
        let d_next = d_prev + two_k1 * p;
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
    }
    (p, d)
}

/// LGL collocation grid of polynomial order N (N+1 nodes on [-1, 1]).
#[derive(Debug, Clone)]
pub struct LglGrid<S> {
    order: usize,
    nodes: Vec<S>,
    weights: Vec<S>,
    /// Row-major (N+1)×(N+1) differentiation matrix.
    diff: Vec<S>,
    /// Barycentric interpolation weights.
    bary: Vec<S>,
}

impl<S: Real> LglGrid<S> {
    pub fn new(order: usize) -> Result<Self, SpectralError> {
        if order < 1 {
            return Err(SpectralError::OrderTooSmall);
        }
        if order > MAX_ORDER {
            return Err(SpectralError::OrderTooLarge(order));
        }
        let nodes = lgl_nodes(order)?;
        let n1 = order + 1;

        // w_k = 2 / (N (N+1) L_N(t_k)^2)
        let nn1 = S::from_usize(order * (order + 1)).unwrap();
        let two = S::c(2.0);
        let ln: Vec<S> = nodes
            .iter()
            .map(|&t| legendre_unchecked(order, t).0)
            .collect();
        let weights: Vec<S> = ln.iter().map(|&l| two / (nn1 * l * l)).collect();

        // D_jk = L_N(t_j) / (L_N(t_k) (t_j - t_k)) off the diagonal; the
        // diagonal is set by the negative-sum trick so each row sums to zero.
        let mut diff = vec![S::zero(); n1 * n1];
        for j in 0..n1 {
            // Kahan-compensated row sum keeps the enforced zero row sum
            // accurate for large N.
            let mut row_sum = S::zero();
            let mut comp = S::zero();
            for k in 0..n1 {
                if k == j {
                    continue;
                }
                let d = ln[j] / (ln[k] * (nodes[j] - nodes[k]));
                diff[j * n1 + k] = d;
                let y = d - comp;
                let t = row_sum + y;
                comp = (t - row_sum) - y;
                row_sum = t;
            }
            diff[j * n1 + j] = -row_sum;
        }

        // Barycentric weights from node products, normalized for range.
        let mut bary = vec![S::one(); n1];
        for k in 0..n1 {
            let mut w = S::one();
            for i in 0..n1 {
                if i != k {
                    w = w * (nodes[k] - nodes[i]);
                }
            }
            bary[k] = w.recip();
        }
        let max = bary
            .iter()
            .fold(S::zero(), |acc, &b| if b.abs() > acc { b.abs() } else { acc });
        for b in bary.iter_mut() {
            *b = *b / max;
        }

        Ok(Self {
            order,
            nodes,
            weights,
            diff,
            bary,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_nodes(&self) -> usize {
        self.order + 1
    }

    pub fn nodes(&self) -> &[S] {
        &self.nodes
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn diff_entry(&self, j: usize, k: usize) -> S {
        self.diff[j * (self.order + 1) + k]
    }

    pub fn diff_row(&self, j: usize) -> &[S] {
        let n1 = self.order + 1;
        &self.diff[j * n1..(j + 1) * n1]
    }
}

/// Interior LGL nodes by Newton iteration on L̇_N, endpoints pinned,
/// result symmetrized so nodes[k] = -nodes[N-k] exactly.
fn lgl_nodes<S: Real>(order: usize) -> Result<Vec<S>, SpectralError> {
    let n = order;
    let mut nodes = vec![S::zero(); n + 1];
    nodes[0] = -S::one();
    nodes[n] = S::one();
    let tol = S::c(1e-14).max(S::epsilon() * S::c(4.0));
    let pi = S::c(std::f64::consts::PI);
    let nf = S::from_usize(n).unwrap();
    for j in 1..n {
        // Chebyshev-Gauss-Lobatto initial guess.
        let mut t = -(pi * S::from_usize(j).unwrap() / nf).cos();
        let mut converged = false;
        for _ in 0..100 {
            let (l, dl) = legendre_unchecked(n, t);
            // L̈_N = (2 t L̇_N − N(N+1) L_N) / (1 − t²)
            let one_mt2 = S::one() - t * t;
            let ddl = (S::c(2.0) * t * dl - S::from_usize(n * (n + 1)).unwrap() * l) / one_mt2;
            let step = dl / ddl;
            t = t - step;
            if step.abs() <= tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SpectralError::NodeIterationDiverged(n));
        }
        nodes[j] = t;
    }
    // Enforce exact symmetry.
    let half = S::c(0.5);
    for j in 1..n {
        let sym = half * (nodes[j] - nodes[n - j]);
        nodes[j] = sym;
    }
    for j in 1..n {
        nodes[n - j] = -nodes[j];
    }
    if n % 2 == 0 {
        nodes[n / 2] = S::zero();
    }
    Ok(nodes)
}

/// Convenience constructor mirroring the free-function surface.
pub fn lgl_grid<S: Real>(order: usize) -> Result<LglGrid<S>, SpectralError> {
    LglGrid::new(order)
}

/// Affine bijection between the reference interval [-1, 1] and [a, b].
#[derive(Debug, Clone, Copy)]
pub struct AffineMap<S> {
    a: S,
    b: S,
}

impl<S: Real> AffineMap<S> {
    pub fn new(a: S, b: S) -> Result<Self, SpectralError> {
        if !(b > a) {
            return Err(SpectralError::EmptyInterval(
                a.to_f64().unwrap_or(f64::NAN),
                b.to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(Self { a, b })
    }

    pub fn reference() -> Self {
        Self {
            a: -S::one(),
            b: S::one(),
        }
    }

    pub fn start(&self) -> S {
        self.a
    }

    pub fn end(&self) -> S {
        self.b
    }

    /// Map τ ∈ [-1, 1] to t ∈ [a, b].
    pub fn to_interval(&self, tau: S) -> S {
        self.a + (tau + S::one()) * self.half_length()
    }

    /// Map t ∈ [a, b] back to τ ∈ [-1, 1].
    pub fn to_reference(&self, t: S) -> S {
        (t - self.a) / self.half_length() - S::one()
    }

    /// Quadrature weights scale by this factor, (b-a)/2.
    pub fn half_length(&self) -> S {
        (self.b - self.a) * S::c(0.5)
    }
}

/// Gauss-Lobatto quadrature of node samples over the mapped interval.
pub fn quadrature<S: Real>(
    values: &[S],
    grid: &LglGrid<S>,
    map: &AffineMap<S>,
) -> Result<S, SpectralError> {
    check_len(values, grid)?;
    let mut acc = S::zero();
    for (v, w) in values.iter().zip(grid.weights.iter()) {
        acc = acc + *v * *w;
    }
    Ok(acc * map.half_length())
}

/// Spectral derivative of node samples: (2/(b-a)) D v.
pub fn differentiate<S: Real>(
    values: &[S],
    grid: &LglGrid<S>,
    map: &AffineMap<S>,
) -> Result<Vec<S>, SpectralError> {
    check_len(values, grid)?;
    let n1 = grid.num_nodes();
    let scale = map.half_length().recip();
    let mut out = vec![S::zero(); n1];
    for j in 0..n1 {
        let row = grid.diff_row(j);
        let mut acc = S::zero();
        for k in 0..n1 {
            acc = acc + row[k] * values[k];
        }
        out[j] = acc * scale;
    }
    Ok(out)
}

/// Barycentric Lagrange evaluation of the interpolant through the node
/// samples at a point t of the mapped interval.
pub fn interpolate<S: Real>(
    values: &[S],
    grid: &LglGrid<S>,
    map: &AffineMap<S>,
    t: S,
) -> Result<S, SpectralError> {
    check_len(values, grid)?;
    let slack = S::c(1e-9);
    if t < map.a - slack || t > map.b + slack {
        return Err(SpectralError::OutOfInterval(
            t.to_f64().unwrap_or(f64::NAN),
            map.a.to_f64().unwrap_or(f64::NAN),
            map.b.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let tau = map.to_reference(t);
    Ok(barycentric(values, grid, tau))
}

/// Barycentric evaluation on the reference interval; exact at nodes.
pub fn barycentric<S: Real>(values: &[S], grid: &LglGrid<S>, tau: S) -> S {
    let mut num = S::zero();
    let mut den = S::zero();
    for k in 0..grid.num_nodes() {
        let d = tau - grid.nodes[k];
        if d == S::zero() {
            return values[k];
        }
        let c = grid.bary[k] / d;
        num = num + c * values[k];
        den = den + c;
    }
    num / den
}

fn check_len<S: Real>(values: &[S], grid: &LglGrid<S>) -> Result<(), SpectralError> {
    if values.len() != grid.num_nodes() {
        return Err(SpectralError::LengthMismatch {
            expected: grid.num_nodes(),
            got: values.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn legendre_low_orders() {
        let (v, d) = legendre_eval::<f64>(0, 0.37).unwrap();
        assert_eq!((v, d), (1.0, 0.0));
        let (v, d) = legendre_eval::<f64>(1, -0.5).unwrap();
        assert_eq!((v, d), (-0.5, 1.0));
        // L_2(t) = (3t² - 1)/2, L̇_2 = 3t
        let (v, d) = legendre_eval::<f64>(2, 0.5).unwrap();
        assert_abs_diff_eq!(v, -0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(d, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn legendre_endpoints_exact() {
        for n in 0..40 {
            let (v, _) = legendre_eval::<f64>(n, 1.0).unwrap();
            assert_eq!(v, 1.0);
            let (v, _) = legendre_eval::<f64>(n, -1.0).unwrap();
            assert_eq!(v, if n % 2 == 0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn legendre_domain_error() {
        assert!(legendre_eval::<f64>(3, 1.1).is_err());
        assert!(legendre_eval::<f64>(3, 1.0 + 5e-13).is_ok());
    }

    #[test]
    fn grid_small_orders() {
        let g = LglGrid::<f64>::new(1).unwrap();
        assert_eq!(g.nodes(), &[-1.0, 1.0]);
        assert_eq!(g.weights(), &[1.0, 1.0]);

        let g = LglGrid::<f64>::new(2).unwrap();
        assert_eq!(g.nodes(), &[-1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(g.weights()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.weights()[1], 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.weights()[2], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn grid_order_four_interior_nodes() {
        // Interior nodes of order 4 are the roots of L̇_4: ±sqrt(3/7), 0.
        let g = LglGrid::<f64>::new(4).unwrap();
        let r = (3.0f64 / 7.0).sqrt();
        assert_abs_diff_eq!(g.nodes()[1], -r, epsilon = 1e-14);
        assert_abs_diff_eq!(g.nodes()[2], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.nodes()[3], r, epsilon = 1e-14);
    }

    #[test]
    fn grid_invariants() {
        for n in [1usize, 2, 3, 5, 8, 16, 33, 64, 128, 256] {
            let g = LglGrid::<f64>::new(n).unwrap();
            let sum: f64 = g.weights().iter().sum();
            assert_abs_diff_eq!(sum, 2.0, epsilon = 1e-13);
            assert!(g.weights().iter().all(|&w| w > 0.0));
            for k in 0..=n {
                assert_eq!(g.nodes()[k], -g.nodes()[n - k], "symmetry at n={n} k={k}");
                if k > 0 {
                    assert!(g.nodes()[k] > g.nodes()[k - 1]);
                }
            }
            // Naive summation of a row reintroduces rounding of order
            // N² · eps, so scale the tolerance with the entry magnitude.
            let tol = 1e-12 * (1.0 + (n * n) as f64 / 4096.0);
            for j in 0..=n {
                let row_sum: f64 = g.diff_row(j).iter().sum();
                assert!(row_sum.abs() <= tol, "row sum {row_sum} at n={n} j={j}");
            }
        }
    }

    #[test]
    fn grid_order_bounds() {
        assert!(LglGrid::<f64>::new(0).is_err());
        assert!(LglGrid::<f64>::new(257).is_err());
    }

    #[test]
    fn diff_matrix_monomial_exactness() {
        for n in [2usize, 4, 8, 12] {
            let g = LglGrid::<f64>::new(n).unwrap();
            let map = AffineMap::reference();
            for p in 0..=n {
                let vals: Vec<f64> = g.nodes().iter().map(|t| t.powi(p as i32)).collect();
                let d = differentiate(&vals, &g, &map).unwrap();
                for (k, &t) in g.nodes().iter().enumerate() {
                    let exact = if p == 0 {
                        0.0
                    } else {
                        p as f64 * t.powi(p as i32 - 1)
                    };
                    assert_abs_diff_eq!(d[k], exact, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn quadrature_examples() {
        let g = LglGrid::<f64>::new(2).unwrap();
        let map = AffineMap::reference();
        let ones = vec![1.0; 3];
        assert_abs_diff_eq!(quadrature(&ones, &g, &map).unwrap(), 2.0, epsilon = 1e-14);
        let sq: Vec<f64> = g.nodes().iter().map(|t| t * t).collect();
        assert_abs_diff_eq!(
            quadrature(&sq, &g, &map).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-14
        );

        // f(t) = t on [0, 2] with the affine map: ∫ = 2.
        let g1 = LglGrid::<f64>::new(1).unwrap();
        let m = AffineMap::new(0.0, 2.0).unwrap();
        let vals: Vec<f64> = g1.nodes().iter().map(|&tau| m.to_interval(tau)).collect();
        assert_abs_diff_eq!(quadrature(&vals, &g1, &m).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn differentiate_examples() {
        let g = LglGrid::<f64>::new(3).unwrap();
        let map = AffineMap::reference();
        let c = vec![4.2; 4];
        for d in differentiate(&c, &g, &map).unwrap() {
            assert_abs_diff_eq!(d, 0.0, epsilon = 1e-12);
        }
        let lin: Vec<f64> = g.nodes().to_vec();
        for d in differentiate(&lin, &g, &map).unwrap() {
            assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        }
        let cub: Vec<f64> = g.nodes().iter().map(|t| t.powi(3)).collect();
        let d = differentiate(&cub, &g, &map).unwrap();
        for (k, &t) in g.nodes().iter().enumerate() {
            assert_abs_diff_eq!(d[k], 3.0 * t * t, epsilon = 1e-11);
        }
    }

    #[test]
    fn interpolation_examples() {
        let g = LglGrid::<f64>::new(2).unwrap();
        let map = AffineMap::reference();
        let sq: Vec<f64> = g.nodes().iter().map(|t| t * t).collect();
        // Exact at nodes.
        for (j, &t) in g.nodes().iter().enumerate() {
            assert_eq!(interpolate(&sq, &g, &map, t).unwrap(), sq[j]);
        }
        assert_abs_diff_eq!(
            interpolate(&sq, &g, &map, 0.5).unwrap(),
            0.25,
            epsilon = 1e-14
        );

        let g = LglGrid::<f64>::new(12).unwrap();
        let ex: Vec<f64> = g.nodes().iter().map(|t| t.exp()).collect();
        assert_abs_diff_eq!(
            interpolate(&ex, &g, &map, 0.3).unwrap(),
            0.3f64.exp(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn interpolation_domain_slack() {
        let g = LglGrid::<f64>::new(4).unwrap();
        let map = AffineMap::new(0.0, 1.0).unwrap();
        let vals = vec![1.0; 5];
        assert!(interpolate(&vals, &g, &map, 1.0 + 5e-10).is_ok());
        assert!(interpolate(&vals, &g, &map, 1.0 + 1e-8).is_err());
    }

    #[test]
    fn length_mismatch() {
        let g = LglGrid::<f64>::new(3).unwrap();
        let map = AffineMap::reference();
        assert!(quadrature(&[1.0, 2.0], &g, &map).is_err());
        assert!(differentiate(&[1.0, 2.0], &g, &map).is_err());
    }

    #[test]
    fn spectral_decay_of_interpolation_error() {
        // f(t) = 1/(2+t) is analytic on [-1,1]; interpolation max-error on a
        // fine grid should drop by 10x or more each time N doubles.
        let f = |t: f64| 1.0 / (2.0 + t);
        let map = AffineMap::<f64>::reference();
        let mut errs = Vec::new();
        for n in [8usize, 16, 32] {
            let g = LglGrid::<f64>::new(n).unwrap();
            let vals: Vec<f64> = g.nodes().iter().map(|&t| f(t)).collect();
            let mut max_err: f64 = 0.0;
            for i in 0..=1000 {
                let t = -1.0 + 2.0 * i as f64 / 1000.0;
                let e = (interpolate(&vals, &g, &map, t).unwrap() - f(t)).abs();
                max_err = max_err.max(e);
            }
            errs.push(max_err);
        }
        assert!(errs[1] <= errs[0] / 10.0, "errors {errs:?}");
        assert!(errs[2] <= errs[1] / 10.0, "errors {errs:?}");
    }

    #[test]
    fn works_at_f32() {
        let g = LglGrid::<f32>::new(6).unwrap();
        let sum: f32 = g.weights().iter().sum();
        assert!((sum - 2.0).abs() < 1e-5);
    }
}
