//! Manifold mathematics: origin-based projections onto the Poincaré ball and
//! the Lorentz hyperboloid, stabilized hyperbolic functions, distances,
//! origin norms and constraint maintenance.
//!
//! Curvature is exposed as `c > 0` with sectional curvature `K = -1/c`; the
//! ball radius is `√c`. The plain functions here work on coordinate slices;
//! [`diff`] builds the same quantities on a [`Tape`](crate::autograd::Tape).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points are kept at `‖e‖ ≤ √c·(1 - BALL_EPS)` inside the Poincaré ball.
pub const BALL_EPS: f64 = 1e-5;

/// Below this `|z|`, cosh/sinh use their truncated Maclaurin series.
pub const MACLAURIN_THRESHOLD: f64 = 1e-3;

/// Lorentz norm scaling clamps coordinates into `[-LORENTZ_CLAMP, LORENTZ_CLAMP]`.
pub const LORENTZ_CLAMP: f64 = 8.0;

/// Lower bound re-imposed on the curvature parameter after every update.
pub const MIN_CURVATURE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    Euclidean,
    Poincare,
    Lorentz,
}

impl ManifoldKind {
    pub fn is_hyperbolic(self) -> bool {
        !matches!(self, ManifoldKind::Euclidean)
    }

    /// Number of coordinates of an embedding of a `d`-dimensional vector.
    pub fn point_dim(self, d: usize) -> usize {
        match self {
            ManifoldKind::Lorentz => d + 1,
            _ => d,
        }
    }
}

impl fmt::Display for ManifoldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ManifoldKind::Euclidean => "euclidean",
            ManifoldKind::Poincare => "poincare",
            ManifoldKind::Lorentz => "lorentz",
        })
    }
}

impl FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(ManifoldKind::Euclidean),
            "poincare" | "poincaré" => Ok(ManifoldKind::Poincare),
            "lorentz" => Ok(ManifoldKind::Lorentz),
            other => Err(Error::invalid(format!("unknown manifold {other:?}"))),
        }
    }
}

/// Geometry of the projection head: which manifold, the initial curvature
/// and scale, and whether each is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub kind: ManifoldKind,
    pub c: f64,
    pub gamma: f64,
    pub learn_curvature: bool,
    pub learn_scale: bool,
}

impl ManifoldConfig {
    pub fn new(kind: ManifoldKind) -> Self {
        let hyperbolic = kind.is_hyperbolic();
        Self {
            kind,
            c: 1.0,
            gamma: 0.01,
            learn_curvature: hyperbolic,
            learn_scale: hyperbolic,
        }
    }

    /// Fixed curvature `K < 0`, i.e. `c = -1/K`, not trained.
    pub fn with_fixed_curvature(mut self, k: f64) -> Result<Self> {
        if !(k < 0.0 && k.is_finite()) {
            return Err(Error::invalid(format!("curvature must be negative, got {k}")));
        }
        self.c = -1.0 / k;
        self.learn_curvature = false;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid(format!("c must be positive, got {}", self.c)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        if !self.kind.is_hyperbolic() && (self.learn_curvature || self.learn_scale) {
            return Err(Error::invalid("euclidean mode has no curvature or scale to learn"));
        }
        Ok(())
    }
}

/// Curvature `K = -1/c` for a positive `c`.
pub fn curvature_of(c: f64) -> f64 {
    -1.0 / c
}

/// A point strictly inside the ball of radius `√c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoincarePoint(Vec<f64>);

impl PoincarePoint {
    pub fn new(coords: Vec<f64>, c: f64) -> Result<Self> {
        let n = norm(&coords);
        if !(n < c.sqrt()) {
            return Err(Error::Domain(format!(
                "‖x‖ = {n} is not inside the ball of radius {}",
                c.sqrt()
            )));
        }
        Ok(Self(coords))
    }

    pub fn origin(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A point on the hyperboloid `⟨x, x⟩_M = -c`, `x₀ > 0`; `coords[0]` is time-like.
#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint(Vec<f64>);

impl LorentzPoint {
    pub fn new(coords: Vec<f64>, c: f64, tol: f64) -> Result<Self> {
        if !check_on_manifold(&coords, c, ManifoldKind::Lorentz, tol) {
            return Err(Error::Domain(format!("not on the hyperboloid with c = {c}")));
        }
        Ok(Self(coords))
    }

    /// The apex `(√c, 0, …, 0)` for `d` space-like coordinates.
    pub fn origin(d: usize, c: f64) -> Self {
        let mut v = vec![0.0; d + 1];
        v[0] = c.sqrt();
        Self(v)
    }

    pub fn time(&self) -> f64 {
        self.0[0]
    }

    pub fn space(&self) -> &[f64] {
        &self.0[1..]
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn norm(x: &[f64]) -> f64 {
    norm_sq(x).sqrt()
}

fn check_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("{} vs {} coordinates", x.len(), y.len())));
    }
    Ok(())
}

/// `-x₀y₀ + Σᵢ xᵢyᵢ`.
pub fn minkowski_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    if x.len() < 2 {
        return Err(Error::dim("Minkowski vectors need at least 2 coordinates"));
    }
    let space: f64 = x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
    Ok(-x[0] * y[0] + space)
}

/// `arcosh(max(v, 1))`.
pub fn arcosh_clamped(v: f64) -> f64 {
    v.max(1.0).acosh()
}

/// Geodesic distance in the ball of radius `√c`:
/// `√c · arcosh(1 + 2‖x−y‖² / (c (1 − ‖x‖²/c)(1 − ‖y‖²/c)))`.
pub fn poincare_distance(x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    check_len(x, y)?;
    let (nx, ny) = (norm_sq(x), norm_sq(y));
    if !(nx < c && ny < c) {
        return Err(Error::Domain(format!(
            "points must lie inside the ball of radius {}",
            c.sqrt()
        )));
    }
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let den = (1.0 - nx / c) * (1.0 - ny / c);
    Ok(c.sqrt() * arcosh_clamped(1.0 + 2.0 * diff / (c * den)))
}

/// Geodesic distance on the hyperboloid, `√c · arcosh(-⟨x, y⟩_M / c)`.
///
/// Evaluated as `2√c · asinh(‖x − y‖_M / 2√c)`, which is the same quantity on
/// the manifold but does not lose half the digits to `arcosh` near 1.
pub fn lorentz_distance(x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    check_len(x, y)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let q = minkowski_inner(&d, &d)?.max(0.0);
    let r = c.sqrt();
    Ok(2.0 * r * (q.sqrt() / (2.0 * r)).asinh())
}

pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Distance on the given manifold.
pub fn distance(kind: ManifoldKind, x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    match kind {
        ManifoldKind::Euclidean => euclidean_distance(x, y),
        ManifoldKind::Poincare => poincare_distance(x, y, c),
        ManifoldKind::Lorentz => lorentz_distance(x, y, c),
    }
}

/// Output of [`squash_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Squashed {
    pub u: Vec<f64>,
    /// `tanh(s)` was the zero vector, so `u` is zero rather than unit length.
    pub degenerate: bool,
}

/// `normalize(tanh(s))`. A zero vector passes through as zero.
pub fn squash_normalize(s: &[f64]) -> Squashed {
    let t: Vec<f64> = s.iter().map(|v| v.tanh()).collect();
    let n = norm(&t);
    if n == 0.0 {
        return Squashed { u: t, degenerate: true };
    }
    Squashed {
        u: t.iter().map(|v| v / n).collect(),
        degenerate: false,
    }
}

/// Poincaré: `γ·u`; Lorentz: `γ·clamp(u, -8, 8)`; Euclidean: `u`.
pub fn norm_scale(u: &[f64], gamma: f64, kind: ManifoldKind) -> Vec<f64> {
    match kind {
        ManifoldKind::Euclidean => u.to_vec(),
        ManifoldKind::Poincare => u.iter().map(|v| gamma * v).collect(),
        ManifoldKind::Lorentz => u
            .iter()
            .map(|v| gamma * v.clamp(-LORENTZ_CLAMP, LORENTZ_CLAMP))
            .collect(),
    }
}

pub fn stable_cosh(z: f64) -> f64 {
    if z.abs() < MACLAURIN_THRESHOLD {
        let z2 = z * z;
        1.0 + z2 / 2.0 + z2 * z2 / 24.0
    } else {
        z.cosh()
    }
}

pub fn stable_sinh(z: f64) -> f64 {
    if z.abs() < MACLAURIN_THRESHOLD {
        let z2 = z * z;
        z + z * z2 / 6.0 + z * z2 * z2 / 120.0
    } else {
        z.sinh()
    }
}

/// `(cosh z, sinh z)`, using the series `1 + z²/2 + z⁴/24` and
/// `z + z³/6 + z⁵/120` for `|z| < 1e-3`.
pub fn stable_cosh_sinh(z: f64) -> (f64, f64) {
    (stable_cosh(z), stable_sinh(z))
}

/// `√c · tanh(‖h‖/√c) · h/‖h‖`, with the radial factor capped at `1 - BALL_EPS`
/// so the point stays strictly inside. `h = 0` maps to the origin.
pub fn project_poincare(h: &[f64], c: f64) -> PoincarePoint {
    let n = norm(h);
    if n == 0.0 {
        return PoincarePoint::origin(h.len());
    }
    let r = c.sqrt();
    let t = (n / r).tanh().min(1.0 - BALL_EPS);
    PoincarePoint(h.iter().map(|v| r * t * v / n).collect())
}

/// `(√c cosh z, √c sinh z · h/‖h‖)` with `z = ‖h‖/√c`; `h = 0` maps to the apex.
pub fn project_lorentz(h: &[f64], c: f64) -> LorentzPoint {
    let n = norm(h);
    let r = c.sqrt();
    if n == 0.0 {
        return LorentzPoint::origin(h.len(), c);
    }
    let (ch, sh) = stable_cosh_sinh(n / r);
    let mut out = Vec::with_capacity(h.len() + 1);
    out.push(r * ch);
    out.extend(h.iter().map(|v| r * sh * v / n));
    LorentzPoint(out)
}

/// Projection onto the manifold as a flat coordinate vector.
pub fn project(kind: ManifoldKind, h: &[f64], c: f64) -> Vec<f64> {
    match kind {
        ManifoldKind::Euclidean => h.to_vec(),
        ManifoldKind::Poincare => project_poincare(h, c).into_inner(),
        ManifoldKind::Lorentz => project_lorentz(h, c).into_inner(),
    }
}

/// Distance from the manifold origin.
pub fn h_norm(e: &[f64], c: f64, kind: ManifoldKind) -> Result<f64> {
    match kind {
        ManifoldKind::Euclidean => Ok(norm(e)),
        ManifoldKind::Poincare => poincare_distance(&vec![0.0; e.len()], e, c),
        ManifoldKind::Lorentz => {
            if e.len() < 2 || !(e[0] > 0.0) {
                return Err(Error::Domain("Lorentz point needs a positive time coordinate".into()));
            }
            lorentz_distance(LorentzPoint::origin(e.len() - 1, c).coords(), e, c)
        }
    }
}

/// Poincaré: `‖e‖ ≤ √c·(1 - BALL_EPS)`; Lorentz: `|⟨e,e⟩_M + c| ≤ tol` and
/// `e₀ > 0`; Euclidean: always.
pub fn check_on_manifold(e: &[f64], c: f64, kind: ManifoldKind, tol: f64) -> bool {
    if e.iter().any(|v| !v.is_finite()) {
        return false;
    }
    match kind {
        ManifoldKind::Euclidean => true,
        ManifoldKind::Poincare => norm(e) <= c.sqrt() * (1.0 - BALL_EPS) * (1.0 + 1e-12),
        ManifoldKind::Lorentz => match minkowski_inner(e, e) {
            Ok(ip) => (ip + c).abs() <= tol && e[0] > 0.0,
            Err(_) => false,
        },
    }
}

/// Pull a drifted point back onto the manifold. Lorentz recomputes the
/// time-like coordinate from the space-like part; Poincaré rescales radially
/// into the admissible ball.
pub fn stabilize_point(e: &[f64], c: f64, kind: ManifoldKind) -> Vec<f64> {
    match kind {
        ManifoldKind::Euclidean => e.to_vec(),
        ManifoldKind::Poincare => {
            let n = norm(e);
            let bound = c.sqrt() * (1.0 - BALL_EPS);
            if n > bound {
                e.iter().map(|v| v * bound / n).collect()
            } else {
                e.to_vec()
            }
        }
        ManifoldKind::Lorentz => {
            let mut out = e.to_vec();
            if out.is_empty() {
                return out;
            }
            out[0] = (c + norm_sq(&e[1..])).sqrt();
            out
        }
    }
}

/// The same geometry recorded on a tape, batched over rows.
pub mod diff {
    use crate::autograd::{Tape, Var};
    use crate::error::Result;

    use super::{ManifoldKind, BALL_EPS, LORENTZ_CLAMP};

    fn stable_cosh_v(t: &mut Tape, z: Var) -> Var {
        t.map(z, super::stable_cosh, super::stable_sinh)
    }

    fn stable_sinh_v(t: &mut Tape, z: Var) -> Var {
        t.map(z, super::stable_sinh, super::stable_cosh)
    }

    /// Row norms with a floor so they can be divided by.
    fn safe_row_norm(t: &mut Tape, h: Var) -> Var {
        let n = t.row_norm(h);
        t.map(n, |v| v.max(1e-15), |v| if v > 1e-15 { 1.0 } else { 0.0 })
    }

    /// Squash the pooled rows with tanh.
    pub fn squash(t: &mut Tape, s: Var) -> Var {
        t.tanh(s)
    }

    /// Row-wise `normalize(tanh(s))`; zero rows stay zero.
    pub fn squash_normalize(t: &mut Tape, s: Var) -> Result<Var> {
        let th = t.tanh(s);
        let n = safe_row_norm(t, th);
        let inv = t.recip(n);
        t.mul_col(th, inv)
    }

    pub fn norm_scale(t: &mut Tape, kind: ManifoldKind, u: Var, gamma: Var) -> Result<Var> {
        match kind {
            ManifoldKind::Euclidean => Ok(u),
            ManifoldKind::Poincare => t.mul_scalar(u, gamma),
            ManifoldKind::Lorentz => {
                let cl = t.clamp(u, -LORENTZ_CLAMP, LORENTZ_CLAMP);
                t.mul_scalar(cl, gamma)
            }
        }
    }

    /// Rows of `h [B, D]` onto the manifold: `[B, D]`, or `[B, D+1]` for Lorentz.
    pub fn project(t: &mut Tape, kind: ManifoldKind, h: Var, c: Var) -> Result<Var> {
        match kind {
            ManifoldKind::Euclidean => Ok(h),
            ManifoldKind::Poincare => {
                let n = safe_row_norm(t, h);
                let r = t.sqrt(c);
                let inv_r = t.recip(r);
                let z = t.mul_scalar(n, inv_r)?;
                let th = t.tanh(z);
                let th = t.clamp(th, 0.0, 1.0 - BALL_EPS);
                let scaled = t.mul_scalar(th, r)?;
                let factor = t.div(scaled, n)?;
                t.mul_col(h, factor)
            }
            ManifoldKind::Lorentz => {
                let rows = t.value(h).rows();
                let n = safe_row_norm(t, h);
                let r = t.sqrt(c);
                let inv_r = t.recip(r);
                let z = t.mul_scalar(n, inv_r)?;
                let ch = stable_cosh_v(t, z);
                let sh = stable_sinh_v(t, z);
                let time = t.mul_scalar(ch, r)?;
                let time = t.reshape(time, vec![rows, 1])?;
                let rs = t.mul_scalar(sh, r)?;
                let factor = t.div(rs, n)?;
                let space = t.mul_col(h, factor)?;
                t.concat(&[time, space])
            }
        }
    }

    fn minkowski_rows(t: &mut Tape, x: Var, y: Var) -> Result<Var> {
        let prod = t.mul(x, y)?;
        let all = t.sum_last(prod);
        let x0 = t.slice_cols(x, 0, 1)?;
        let y0 = t.slice_cols(y, 0, 1)?;
        let p0 = t.mul(x0, y0)?;
        let rows = t.value(p0).len();
        let p0 = t.reshape(p0, vec![rows])?;
        let twice = t.scale(p0, 2.0);
        t.sub(all, twice)
    }

    /// Row-wise distances `[B]` between `x` and `y`.
    pub fn distance(t: &mut Tape, kind: ManifoldKind, x: Var, y: Var, c: Var) -> Result<Var> {
        match kind {
            ManifoldKind::Euclidean => {
                let d = t.sub(x, y)?;
                Ok(t.row_norm(d))
            }
            ManifoldKind::Poincare => {
                let d = t.sub(x, y)?;
                let d2 = t.square(d);
                let num = t.sum_last(d2);
                let inv_c = t.recip(c);
                let x2 = t.square(x);
                let nx = t.sum_last(x2);
                let y2 = t.square(y);
                let ny = t.sum_last(y2);
                let nxc = t.mul_scalar(nx, inv_c)?;
                let ax = t.affine(nxc, -1.0, 1.0);
                let nyc = t.mul_scalar(ny, inv_c)?;
                let ay = t.affine(nyc, -1.0, 1.0);
                let den = t.mul(ax, ay)?;
                let q = t.div(num, den)?;
                let q = t.mul_scalar(q, inv_c)?;
                let arg = t.affine(q, 2.0, 1.0);
                let ac = t.arcosh(arg);
                let r = t.sqrt(c);
                t.mul_scalar(ac, r)
            }
            ManifoldKind::Lorentz => {
                let ip = minkowski_rows(t, x, y)?;
                let inv_c = t.recip(c);
                let q = t.mul_scalar(ip, inv_c)?;
                let arg = t.neg(q);
                let ac = t.arcosh(arg);
                let r = t.sqrt(c);
                t.mul_scalar(ac, r)
            }
        }
    }

    /// Row-wise distance from the manifold origin `[B]`.
    pub fn h_norm(t: &mut Tape, kind: ManifoldKind, e: Var, c: Var) -> Result<Var> {
        match kind {
            ManifoldKind::Euclidean => Ok(t.row_norm(e)),
            ManifoldKind::Poincare => {
                let e2 = t.square(e);
                let n2 = t.sum_last(e2);
                let inv_c = t.recip(c);
                let nc = t.mul_scalar(n2, inv_c)?;
                let den = t.affine(nc, -1.0, 1.0);
                let q = t.div(nc, den)?;
                let arg = t.affine(q, 2.0, 1.0);
                let ac = t.arcosh(arg);
                let r = t.sqrt(c);
                t.mul_scalar(ac, r)
            }
            ManifoldKind::Lorentz => {
                let rows = t.value(e).rows();
                let e0 = t.slice_cols(e, 0, 1)?;
                let e0 = t.reshape(e0, vec![rows])?;
                let r = t.sqrt(c);
                let inv_r = t.recip(r);
                let arg = t.mul_scalar(e0, inv_r)?;
                let ac = t.arcosh(arg);
                t.mul_scalar(ac, r)
            }
        }
    }
}
