//! Interpolation of lane x-positions as a function of the row coordinate:
//! natural cubic splines for four or more knots, degrading to quadratic or
//! linear interpolation for three or two.

use super::{EvalError, Result};

enum Form {
    /// Per-segment cubic: x(y) = a + b s + c s^2 + d s^3 with s = y - knot_y.
    Cubic { b: Vec<f64>, c: Vec<f64>, d: Vec<f64> },
    /// Single quadratic through three points (Lagrange coefficients).
    Quadratic { c0: f64, c1: f64, c2: f64 },
    Linear,
}

/// Interpolant through (x, y) knots with strictly increasing y.
pub struct Spline {
    ys: Vec<f64>,
    xs: Vec<f64>,
    form: Form,
}

/// Fit an interpolating curve x(y). Natural boundary conditions (zero second
/// derivative at both ends) for the cubic case.
pub fn fit_spline(points: &[(f64, f64)]) -> Result<Spline> {
    if points.len() < 2 {
        return Err(EvalError::Spline(format!("need at least 2 points, got {}", points.len())));
    }
    for pair in points.windows(2) {
        if pair[1].1 <= pair[0].1 {
            return Err(EvalError::Spline(format!(
                "y values must be strictly increasing ({} then {})",
                pair[0].1, pair[1].1
            )));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let n = points.len();

    let form = match n {
        2 => Form::Linear,
        3 => {
            // Unique quadratic through the three points.
            let (y0, y1, y2) = (ys[0], ys[1], ys[2]);
            let (x0, x1, x2) = (xs[0], xs[1], xs[2]);
            let d0 = (y0 - y1) * (y0 - y2);
            let d1 = (y1 - y0) * (y1 - y2);
            let d2 = (y2 - y0) * (y2 - y1);
            // x(y) = sum_i x_i * prod_{j!=i} (y - y_j) / d_i, expanded to
            // monomial coefficients c0 + c1 y + c2 y^2.
            let c2 = x0 / d0 + x1 / d1 + x2 / d2;
            let c1 = -(x0 * (y1 + y2) / d0 + x1 * (y0 + y2) / d1 + x2 * (y0 + y1) / d2);
            let c0 = x0 * y1 * y2 / d0 + x1 * y0 * y2 / d1 + x2 * y0 * y1 / d2;
            Form::Quadratic { c0, c1, c2 }
        }
        _ => {
            // Natural cubic spline: solve the tridiagonal system for the
            // second derivatives m_i (m_0 = m_{n-1} = 0).
            let h: Vec<f64> = ys.windows(2).map(|w| w[1] - w[0]).collect();
            let m = {
                let rows = n - 2;
                let mut diag = vec![0.0; rows];
                let mut upper = vec![0.0; rows];
                let mut lower = vec![0.0; rows];
                let mut rhs = vec![0.0; rows];
                for i in 0..rows {
                    diag[i] = 2.0 * (h[i] + h[i + 1]);
                    lower[i] = h[i];
                    upper[i] = h[i + 1];
                    rhs[i] = 6.0
                        * ((xs[i + 2] - xs[i + 1]) / h[i + 1] - (xs[i + 1] - xs[i]) / h[i]);
                }
                // Thomas algorithm.
                for i in 1..rows {
                    let w = lower[i] / diag[i - 1];
                    diag[i] -= w * upper[i - 1];
                    rhs[i] -= w * rhs[i - 1];
                }
                let mut sol = vec![0.0; rows];
                if rows > 0 {
                    sol[rows - 1] = rhs[rows - 1] / diag[rows - 1];
                    for i in (0..rows - 1).rev() {
                        sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
                    }
                }
                let mut m = vec![0.0; n];
                m[1..n - 1].copy_from_slice(&sol);
                m
            };
            let mut b = Vec::with_capacity(n - 1);
            let mut c = Vec::with_capacity(n - 1);
            let mut d = Vec::with_capacity(n - 1);
            for i in 0..n - 1 {
                let hi = h[i];
                b.push((xs[i + 1] - xs[i]) / hi - hi * (2.0 * m[i] + m[i + 1]) / 6.0);
                c.push(m[i] / 2.0);
                d.push((m[i + 1] - m[i]) / (6.0 * hi));
            }
            Form::Cubic { b, c, d }
        }
    };
    Ok(Spline { ys, xs, form })
}

impl Spline {
    pub fn y_range(&self) -> (f64, f64) {
        (self.ys[0], *self.ys.last().unwrap())
    }

    /// Evaluate x(y). Knot queries return the stored x exactly; queries
    /// outside the knot range clamp to the nearest endpoint.
    pub fn eval(&self, y: f64) -> f64 {
        if y <= self.ys[0] {
            return self.xs[0];
        }
        if y >= *self.ys.last().unwrap() {
            return *self.xs.last().unwrap();
        }
        // Segment index: largest i with ys[i] <= y.
        let i = match self.ys.binary_search_by(|probe| probe.partial_cmp(&y).unwrap()) {
            Ok(exact) => return self.xs[exact],
            Err(ins) => ins - 1,
        };
        match &self.form {
            Form::Linear => {
                let t = (y - self.ys[0]) / (self.ys[1] - self.ys[0]);
                self.xs[0] + t * (self.xs[1] - self.xs[0])
            }
            Form::Quadratic { c0, c1, c2 } => c0 + y * (c1 + y * c2),
            Form::Cubic { b, c, d } => {
                let s = y - self.ys[i];
                self.xs[i] + s * (b[i] + s * (c[i] + s * d[i]))
            }
        }
    }

    /// One (x, y) sample per integer row spanned by the knots.
    pub fn dense_rows(&self) -> Vec<(f64, f64)> {
        let (y0, y1) = self.y_range();
        let lo = y0.ceil() as i64;
        let hi = y1.floor() as i64;
        (lo..=hi).map(|row| (self.eval(row as f64), row as f64)).collect()
    }
}
