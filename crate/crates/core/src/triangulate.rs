//! Least-squares multiview triangulation and its gradient.
//!
//! For a tracked detector point `x` in a view `(R, t)`, the projection
//! equation rearranges to the linear constraint
//!
//! ```text
//! D(x) R X = c x - D(x) t,     D(x) = [[d, 0, x.x], [0, d, x.y]]
//! ```
//!
//! Stacking two rows per view gives `A X = b`, solved in the least-squares
//! sense (equal to the pseudoinverse solution at full rank). The gradient of the solution with respect to the tracked
//! points comes from implicit differentiation of the normal equations.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::geometry::{ImagingGeometry, Vec2, Vec3, ViewPose};

/// Relative singular-value gate for rank detection.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Triangulation weight `w` of the joint loss.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w: 0.01 }
    }
}

/// The stacked system `A X = b` plus the observations it was built from.
#[derive(Clone, Debug)]
pub struct TriSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    points_mm: Vec<Vec2>,
    rotations: Vec<Matrix3<f64>>,
    translations: Vec<Vec3>,
    c_mm: f64,
}

impl TriSystem {
    pub fn views(&self) -> usize {
        self.points_mm.len()
    }
}

pub fn build_system(
    pois_mm: &[Vec2],
    views: &[ViewPose],
    geom: &ImagingGeometry,
) -> Result<TriSystem> {
    if pois_mm.len() != views.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points for {} views",
            pois_mm.len(),
            views.len()
        )));
    }
    if views.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "triangulation needs >= 2 views, got {}",
            views.len()
        )));
    }
    let n = views.len();
    let (d, c) = (geom.d_mm, geom.c_mm);
    let mut a = DMatrix::zeros(2 * n, 3);
    let mut b = DVector::zeros(2 * n);
    let mut rotations = Vec::with_capacity(n);
    let mut translations = Vec::with_capacity(n);
    for (i, (x, view)) in pois_mm.iter().zip(views).enumerate() {
        let tf = view.to_transform();
        let (r, t) = (tf.rotation, tf.translation);
        for (k, xk) in [x.x, x.y].into_iter().enumerate() {
            let row = d * r.row(k) + xk * r.row(2);
            a.row_mut(2 * i + k).copy_from(&row);
            b[2 * i + k] = c * xk - (d * t[k] + xk * t.z);
        }
        rotations.push(r);
        translations.push(t);
    }
    Ok(TriSystem {
        a,
        b,
        points_mm: pois_mm.to_vec(),
        rotations,
        translations,
        c_mm: c,
    })
}

/// Least-squares factorization of a full-rank `A`.
///
/// The rank gate uses the singular values; the solves use Householder QR,
/// which is noticeably more accurate than the SVD solve for these small,
/// badly scaled systems.
struct Factored {
    q: DMatrix<f64>,
    r: Matrix3<f64>,
}

fn factor(a: &DMatrix<f64>) -> Result<Factored> {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio > RANK_TOLERANCE) {
        return Err(Error::RankDeficient(ratio));
    }
    let qr = a.clone().qr();
    let r = qr.r();
    Ok(Factored {
        q: qr.q(),
        r: Matrix3::from_fn(|i, j| r[(i, j)]),
    })
}

fn solve(f: &Factored, b: &DVector<f64>) -> Result<Vec3> {
    let qtb = f.q.transpose() * b;
    f.r
        .solve_upper_triangular(&Vec3::new(qtb[0], qtb[1], qtb[2]))
        .ok_or(Error::RankDeficient(0.0))
}

/// `X̂ = A⁺ b`.
pub fn triangulate(sys: &TriSystem) -> Result<Vec3> {
    solve(&factor(&sys.a)?, &sys.b)
}

/// `(AᵀA)⁻¹ g = R⁻¹ R⁻ᵀ g`.
fn normal_solve(f: &Factored, g: &Vec3) -> Result<Vec3> {
    let y = f
        .r
        .tr_solve_upper_triangular(g)
        .ok_or(Error::RankDeficient(0.0))?;
    f.r.solve_upper_triangular(&y).ok_or(Error::RankDeficient(0.0))
}

/// Gradient of a scalar loss with respect to every view's tracked point (mm),
/// given `upstream = dL/dX̂`.
pub fn triangulate_grad(sys: &TriSystem, upstream: &Vec3) -> Result<Vec<Vec2>> {
    let f = factor(&sys.a)?;
    let x_hat = solve(&f, &sys.b)?;
    let lambda = normal_solve(&f, upstream)?;
    let a_lambda = &sys.a * DVector::from_column_slice(lambda.as_slice());
    let residual = &sys.b - &sys.a * DVector::from_column_slice(x_hat.as_slice());
    let grads = (0..sys.views())
        .map(|i| {
            let r = &sys.rotations[i];
            let depth_row = r.row(2).transpose();
            let db = sys.c_mm - sys.translations[i].z;
            let g = |k: usize| {
                let row = 2 * i + k;
                residual[row] * depth_row.dot(&lambda)
                    + a_lambda[row] * (db - depth_row.dot(&x_hat))
            };
            Vec2::new(g(0), g(1))
        })
        .collect();
    Ok(grads)
}
