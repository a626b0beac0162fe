//! Exact double-precision machinery for so(n), SO(n) and the action of
//! SO(n) on the unit sphere.
//!
//! Coordinates of so(n) follow the row-major upper triangle: for `n = 3`
//! the coordinates `[a, b, c]` embed as
//!
//! ```text
//! [  0  a  b ]
//! [ -a  0  c ]
//! [ -b -c  0 ]
//! ```
//!
//! The covariate map sends two normalized covariate values `(c_i, c_j)` to
//! `map(κ (c_i − c_j) A₀)` where `A₀` is the skew matrix whose coordinates
//! are all ones and `map` is either the matrix exponential or the Cayley
//! transform.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance used by the [`Rotation`] and [`LatentPoint`] constructors.
pub const GROUP_TOL: f64 = 1e-9;

/// Number of so(n) coordinates, `n(n−1)/2`.
pub const fn so_dim(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// A point of so(n) in upper-triangle coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewCoords {
    n: usize,
    coords: Vec<f64>,
}

impl SkewCoords {
    pub fn new(n: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != so_dim(n) {
            return Err(Error::dim("SkewCoords::new", so_dim(n), coords.len()));
        }
        Ok(SkewCoords { n, coords })
    }

    /// The all-ones coordinate vector `1_m`.
    pub fn ones(n: usize) -> Self {
        SkewCoords {
            n,
            coords: vec![1.0; so_dim(n)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn scaled(&self, s: f64) -> Self {
        SkewCoords {
            n: self.n,
            coords: self.coords.iter().map(|c| c * s).collect(),
        }
    }
}

/// Embeds coordinates as an antisymmetric `n×n` matrix.
pub fn skew_embed(a: &SkewCoords) -> Tensor {
    skew_from_slice(a.n, &a.coords)
}

pub(crate) fn skew_from_slice(n: usize, coords: &[f64]) -> Tensor {
    debug_assert_eq!(coords.len(), so_dim(n));
    let mut out = Tensor::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            out.set(i, j, coords[k]);
            out.set(j, i, -coords[k]);
            k += 1;
        }
    }
    out
}

/// Inverse of [`skew_embed`]; rejects matrices that are not antisymmetric.
pub fn skew_coords(a: &Tensor) -> Result<SkewCoords> {
    check_antisymmetric(a, "skew_coords")?;
    let n = a.rows();
    let mut coords = Vec::with_capacity(so_dim(n));
    for i in 0..n {
        for j in i + 1..n {
            coords.push(a.get(i, j));
        }
    }
    Ok(SkewCoords { n, coords })
}

fn check_antisymmetric(a: &Tensor, op: &'static str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::dim(op, "square matrix", format!("{:?}", a.shape())));
    }
    let n = a.rows();
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in i..n {
            let asym = (a.get(i, j) + a.get(j, i)).abs();
            if asym > 1e-12 * scale {
                return Err(Error::Contract(format!(
                    "{op}: input is not antisymmetric (|A[{i},{j}] + A[{j},{i}]| = {asym:.3e})"
                )));
            }
        }
    }
    Ok(())
}

/// An element of SO(n).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    matrix: Tensor,
}

impl Rotation {
    /// Validates orthogonality and unit determinant at [`GROUP_TOL`].
    pub fn new(matrix: Tensor) -> Result<Self> {
        Self::with_tolerance(matrix, GROUP_TOL)
    }

    pub fn with_tolerance(matrix: Tensor, tol: f64) -> Result<Self> {
        let r = Rotation { matrix };
        if !r.matrix.is_square() {
            return Err(Error::dim(
                "Rotation::new",
                "square matrix",
                format!("{:?}", r.matrix.shape()),
            ));
        }
        let orth = r.orthogonality_error();
        let det = r.matrix.determinant()?;
        if orth > tol || (det - 1.0).abs() > tol {
            return Err(Error::Contract(format!(
                "not a rotation: |RᵀR − I|_F = {orth:.3e}, det = {det}"
            )));
        }
        Ok(r)
    }

    pub(crate) fn from_matrix_unchecked(matrix: Tensor) -> Self {
        Rotation { matrix }
    }

    pub fn identity(n: usize) -> Self {
        Rotation {
            matrix: Tensor::identity(n),
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    /// `‖RᵀR − I‖_F`
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = self
            .matrix
            .t_matmul(&self.matrix)
            .expect("square matrix");
        rtr.sub(&Tensor::identity(self.n()))
            .expect("same shape")
            .frobenius_norm()
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant().expect("square matrix")
    }

    /// `self · other`
    pub fn compose(&self, other: &Rotation) -> Result<Rotation> {
        Ok(Rotation {
            matrix: self.matrix.matmul(&other.matrix)?,
        })
    }

    /// The inverse, computed exactly as the transpose.
    pub fn inverse(&self) -> Rotation {
        Rotation {
            matrix: self.matrix.transpose(),
        }
    }
}

/// A unit vector on `S^{n−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    vec: Vec<f64>,
}

impl LatentPoint {
    /// Wraps a vector that must already have unit norm (within [`GROUP_TOL`]).
    pub fn new(vec: Vec<f64>) -> Result<Self> {
        let norm = l2(&vec);
        if (norm - 1.0).abs() > GROUP_TOL {
            return Err(Error::Contract(format!(
                "latent point must be unit norm, got {norm}"
            )));
        }
        Ok(LatentPoint { vec })
    }

    /// Projects a nonzero vector onto the sphere.
    pub fn normalize(vec: Vec<f64>) -> Result<Self> {
        let norm = l2(&vec);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Contract(format!(
                "cannot normalize a vector of norm {norm}"
            )));
        }
        Ok(LatentPoint {
            vec: vec.into_iter().map(|x| x / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cayley transform `(I − A)(I + A)⁻¹`.
pub fn cayley(a: &Tensor) -> Result<Rotation> {
    check_antisymmetric(a, "cayley")?;
    let n = a.rows();
    let eye = Tensor::identity(n);
    let inv = eye.add(a)?.inverse()?;
    let r = eye.sub(a)?.matmul(&inv)?;
    Ok(Rotation::from_matrix_unchecked(r))
}

/// Matrix exponential restricted to so(n), by scaling and squaring a
/// truncated Taylor series.
pub fn expm_so(a: &Tensor) -> Result<Rotation> {
    check_antisymmetric(a, "expm_so")?;
    Ok(Rotation::from_matrix_unchecked(expm(a)))
}

/// General dense matrix exponential; scales until `‖A‖_F ≤ 0.5`.
pub(crate) fn expm(a: &Tensor) -> Tensor {
    let n = a.rows();
    let norm = a.frobenius_norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a.scale(0.5f64.powi(squarings));
    let mut result = Tensor::identity(n);
    let mut term = Tensor::identity(n);
    for k in 1..=30 {
        term = term.matmul(&scaled).expect("square").scale(1.0 / k as f64);
        result.axpy(1.0, &term);
        if term.max_abs() < 1e-20 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result).expect("square");
    }
    result
}

/// Which exponential-like map sends so(n) into SO(n).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupParam {
    /// Preserves `G(i,k) = G(i,j)·G(j,k)`.
    #[default]
    Expm,
    /// Cheaper, but not additive in its argument.
    Cayley,
}

impl std::str::FromStr for GroupParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expm" => Ok(GroupParam::Expm),
            "cayley" => Ok(GroupParam::Cayley),
            other => Err(Error::Config(format!(
                "unknown group parameterization `{other}` (expected expm or cayley)"
            ))),
        }
    }
}

/// The fixed generator `A₀ = skew_embed(1_m)`.
pub fn generator(n: usize) -> Tensor {
    skew_embed(&SkewCoords::ones(n))
}

/// `param(κ·d·A₀)`, evaluated at `|d|` and transposed for negative `d`
/// (both maps send −A to the transpose), so that swapping the covariates
/// yields exactly the inverse.
fn covariate_map(n: usize, kappa: f64, d: f64, param: GroupParam) -> Result<Rotation> {
    let a = generator(n).scale(kappa * d.abs());
    let r = match param {
        GroupParam::Expm => expm_so(&a)?,
        GroupParam::Cayley => cayley(&a)?,
    };
    Ok(if d < 0.0 { r.inverse() } else { r })
}

/// The group element relating covariates `c_i` and `c_j`:
/// `param(κ (c_i − c_j) A₀)`.
pub fn group_elem(n: usize, c_i: f64, c_j: f64, kappa: f64, param: GroupParam) -> Result<Rotation> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
    }
    covariate_map(n, kappa, c_i - c_j, param)
}

/// Memoized [`group_elem`] for one `(n, κ, param)` triple.
///
/// Entries are keyed by the bit pattern of `c_i − c_j`, which is all the
/// map depends on.
#[derive(Debug)]
pub struct GroupLookup {
    n: usize,
    kappa: f64,
    param: GroupParam,
    cache: HashMap<u64, Rotation>,
}

impl GroupLookup {
    pub fn new(n: usize, kappa: f64, param: GroupParam) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        Ok(GroupLookup {
            n,
            kappa,
            param,
            cache: HashMap::new(),
        })
    }

    pub fn get(&mut self, c_i: f64, c_j: f64) -> Result<&Rotation> {
        let diff = c_i - c_j;
        let key = diff.to_bits();
        if !self.cache.contains_key(&key) {
            let r = covariate_map(self.n, self.kappa, diff, self.param)?;
            self.cache.insert(key, r);
        }
        Ok(&self.cache[&key])
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Group action `g·ℓ = gℓ`, renormalized onto the sphere.
pub fn act(g: &Rotation, l: &LatentPoint) -> Result<LatentPoint> {
    if g.n() != l.dim() {
        return Err(Error::dim("act", g.n(), l.dim()));
    }
    let m = g.matrix();
    let out: Vec<f64> = (0..g.n())
        .map(|i| m.row_slice(i).iter().zip(l.as_slice()).map(|(a, b)| a * b).sum())
        .collect();
    LatentPoint::normalize(out)
}

/// A point on the one-parameter orbit `exp(tA₀)·ℓ₀` together with the
/// group element that produced it.
///
/// Setting `τ*(exp(tA₀)ℓ₀) := exp(tA₀)` gives a map that is exactly
/// equivariant for every `g = exp(sA₀)`.
pub fn orbit_tau(l0: &LatentPoint, t: f64) -> Result<(LatentPoint, Rotation)> {
    let g = expm_so(&generator(l0.dim()).scale(t))?;
    let l = act(&g, l0)?;
    Ok((l, g))
}
