//! Factorized bilinear coding.
//!
//! Two per-location feature vectors `x ∈ Rᵖ`, `y ∈ R^q` are encoded into a
//! sparse code over `k` rank-`r` dictionary atoms:
//!
//! ```text
//! c' = P (Ũᵀx ∘ Ṽᵀy)
//! c  = sign(c') ∘ max(|c'| − λ/2, 0)
//! ```
//!
//! where `P` sums each consecutive block of `r` entries. The codes of all
//! locations are reduced by a coordinatewise max into the global
//! representation that feeds the classifier.
//!
//! `Ũ` and `Ṽ` are learned directly. [`derive_transforms`] builds them from
//! an explicit factorized dictionary and is used to check that the closed
//! form agrees with least squares on the reconstruction objective.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{pair_locations, FeatureMap, LocationPairSet};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Fixed binary `k × rk` operator whose row `l` has ones at columns
/// `l·r .. (l+1)·r`. Never materialized; applied as block sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionMatrix {
    k: usize,
    r: usize,
}

pub fn build_projection(k: usize, r: usize) -> Result<ProjectionMatrix> {
    if k == 0 || r == 0 {
        return Err(Error::Config(format!("projection needs k, r >= 1 (k={k}, r={r})")));
    }
    Ok(ProjectionMatrix { k, r })
}

impl ProjectionMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// `P · v` for `v` of length `rk`.
    pub fn apply<F: Real>(&self, v: &[F]) -> Vec<F> {
        assert_eq!(v.len(), self.k * self.r, "projection input length");
        v.chunks_exact(self.r).map(|b| b.iter().copied().sum()).collect()
    }

    /// `Pᵀ · g` for `g` of length `k`: each entry repeated `r` times.
    pub fn apply_transpose<F: Real>(&self, g: &[F]) -> Vec<F> {
        assert_eq!(g.len(), self.k, "projection gradient length");
        g.iter()
            .flat_map(|&v| std::iter::repeat(v).take(self.r))
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k * self.r, |row, col| {
            if col / self.r == row {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Optional normalization of the aggregated representation. Off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    L2,
    SignedSqrtL2,
}

const NORM_EPS: f64 = 1e-12;

/// Learnable transforms plus the fixed hyperparameters of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FbcParams<F> {
    /// `p × rk`.
    pub u: Matrix<F>,
    /// `q × rk`.
    pub v: Matrix<F>,
    pub lambda: F,
    pub k: usize,
    pub r: usize,
}

impl<F: Real> FbcParams<F> {
    pub fn new(u: Matrix<F>, v: Matrix<F>, lambda: F, k: usize, r: usize) -> Result<Self> {
        let params = Self { u, v, lambda, k, r };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros(p: usize, q: usize, k: usize, r: usize, lambda: F) -> Self {
        Self {
            u: Matrix::zeros(p, k * r),
            v: Matrix::zeros(q, k * r),
            lambda,
            k,
            r,
        }
    }

    /// Gaussian init with std `1/sqrt(p)` and `1/sqrt(q)`.
    pub fn init<R: Rng>(p: usize, q: usize, k: usize, r: usize, lambda: F, rng: &mut R) -> Self {
        let mut params = Self::zeros(p, q, k, r, lambda);
        let nu = Normal::new(0.0, 1.0 / (p as f64).sqrt()).expect("valid std");
        params.u.data.iter_mut().for_each(|w| *w = F::of(nu.sample(rng)));
        let nv = Normal::new(0.0, 1.0 / (q as f64).sqrt()).expect("valid std");
        params.v.data.iter_mut().for_each(|w| *w = F::of(nv.sample(rng)));
        params
    }

    pub fn validate(&self) -> Result<()> {
        build_projection(self.k, self.r)?;
        let rk = self.k * self.r;
        if self.u.cols != rk || self.v.cols != rk {
            return Err(Error::ShapeMismatch(format!(
                "transforms need {rk} columns, got U {} and V {}",
                self.u.cols, self.v.cols
            )));
        }
        if !(self.lambda >= F::zero()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !self.u.data.iter().chain(&self.v.data).all(|w| w.is_finite()) {
            return Err(Error::NonFinite("FBC transforms".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.u.rows
    }

    pub fn q(&self) -> usize {
        self.v.rows
    }

    pub fn projection(&self) -> ProjectionMatrix {
        ProjectionMatrix { k: self.k, r: self.r }
    }

    pub fn cast<G: Real>(&self) -> FbcParams<G> {
        FbcParams {
            u: self.u.cast(),
            v: self.v.cast(),
            lambda: G::of(self.lambda.as_f64()),
            k: self.k,
            r: self.r,
        }
    }
}

/// Sum of per-location outer products, `Σ_v x_v y_vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearDescriptor<F> {
    pub z: Matrix<F>,
}

pub fn bilinear_pool<F: Real>(set: &LocationPairSet<F>) -> Result<BilinearDescriptor<F>> {
    let first = set.pairs.first().ok_or(Error::Empty("location pair set"))?;
    let (p, q) = (first.x.len(), first.y.len());
    let mut z = Matrix::zeros(p, q);
    for pair in &set.pairs {
        if pair.x.len() != p || pair.y.len() != q {
            return Err(Error::ShapeMismatch("inconsistent pair dimensions".into()));
        }
        for (i, &xi) in pair.x.iter().enumerate() {
            let row = &mut z.data[i * q..(i + 1) * q];
            for (zij, &yj) in row.iter_mut().zip(&pair.y) {
                *zij = *zij + xi * yj;
            }
        }
    }
    Ok(BilinearDescriptor { z })
}

#[inline]
pub fn soft_threshold<F: Real>(x: F, t: F) -> F {
    let m = x.abs() - t;
    if m > F::zero() {
        x.signum() * m
    } else {
        F::zero()
    }
}

/// Code of one location together with the intermediates its backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode<F> {
    /// Thresholded code `c`.
    pub code: Vec<F>,
    /// Pre-threshold code `c'`.
    pub pre: Vec<F>,
    /// `Ũᵀx`.
    pub ux: Vec<F>,
    /// `Ṽᵀy`.
    pub vy: Vec<F>,
}

impl<F: Real> SparseCode<F> {
    pub fn nnz(&self) -> usize {
        self.code.iter().filter(|c| **c != F::zero()).count()
    }
}

pub fn fbc_encode<F: Real>(x: &[F], y: &[F], params: &FbcParams<F>) -> Result<SparseCode<F>> {
    if x.len() != params.p() || y.len() != params.q() {
        return Err(Error::ShapeMismatch(format!(
            "encode expects x in R^{} and y in R^{}, got {} and {}",
            params.p(),
            params.q(),
            x.len(),
            y.len()
        )));
    }
    let ux = params.u.t_mul_vec(x);
    let vy = params.v.t_mul_vec(y);
    let prod: Vec<F> = ux.iter().zip(&vy).map(|(&a, &b)| a * b).collect();
    let pre = params.projection().apply(&prod);
    let half = params.lambda / F::of(2.0);
    let code = pre.iter().map(|&c| soft_threshold(c, half)).collect();
    Ok(SparseCode { code, pre, ux, vy })
}

/// Coordinatewise max over locations with the winning location per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRepresentation<F> {
    pub z: Vec<F>,
    pub argmax: Vec<usize>,
}

pub fn max_aggregate<F: Real, C: AsRef<[F]>>(codes: &[C]) -> Result<GlobalRepresentation<F>> {
    let first = codes.first().ok_or(Error::Empty("code list"))?.as_ref();
    let k = first.len();
    let mut z = first.to_vec();
    let mut argmax = vec![0; k];
    for (v, code) in codes.iter().enumerate().skip(1) {
        let code = code.as_ref();
        if code.len() != k {
            return Err(Error::ShapeMismatch("codes differ in length".into()));
        }
        for l in 0..k {
            // Strict comparison keeps the smallest location index on ties.
            if code[l] > z[l] {
                z[l] = code[l];
                argmax[l] = v;
            }
        }
    }
    Ok(GlobalRepresentation { z, argmax })
}

impl<F> AsRef<[F]> for SparseCode<F> {
    fn as_ref(&self) -> &[F] {
        &self.code
    }
}

/// Forward state retained for [`fbc_backward`].
#[derive(Debug, Clone)]
pub struct FbcCache<F> {
    pub pairs: LocationPairSet<F>,
    pub codes: Vec<SparseCode<F>>,
    pub global: GlobalRepresentation<F>,
}

impl<F: Real> FbcCache<F> {
    /// Sign pattern of every pre-threshold coordinate relative to `±λ/2`,
    /// followed by the max routing. Changes iff a probe crosses a kink.
    pub fn pattern(&self, lambda: F) -> Vec<u64> {
        let half = lambda / F::of(2.0);
        let mut sig: Vec<u64> = self.global.argmax.iter().map(|&a| a as u64).collect();
        for code in &self.codes {
            let mut word = 0u64;
            for (l, &c) in code.pre.iter().enumerate() {
                let state = if c > half {
                    1u64
                } else if c < -half {
                    2
                } else {
                    3
                };
                word = word.wrapping_mul(31).wrapping_add(state * (l as u64 + 1));
            }
            sig.push(word);
        }
        sig
    }

    /// Smallest distance of any pre-threshold coordinate to the kinks at `±λ/2`.
    pub fn kink_margin(&self, lambda: F) -> f64 {
        let half = lambda.as_f64() / 2.0;
        self.codes
            .iter()
            .flat_map(|c| c.pre.iter())
            .map(|c| (c.as_f64().abs() - half).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Pairs the two maps, encodes every location and max-aggregates.
pub fn fbc_forward<F: Real>(
    fa: &FeatureMap<F>,
    fb: &FeatureMap<F>,
    params: &FbcParams<F>,
) -> Result<FbcCache<F>> {
    let pairs = pair_locations(fa, fb)?;
    let codes = pairs
        .pairs
        .iter()
        .map(|pair| fbc_encode(&pair.x, &pair.y, params))
        .collect::<Result<Vec<_>>>()?;
    let global = max_aggregate(&codes)?;
    Ok(FbcCache { pairs, codes, global })
}

/// Gradients produced by [`fbc_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct FbcGrads<F> {
    pub d_u: Matrix<F>,
    pub d_v: Matrix<F>,
    /// One gradient per location, matching the pair order.
    pub d_x: Vec<Vec<F>>,
    pub d_y: Vec<Vec<F>>,
}

/// Reverse pass: the max routes each coordinate's gradient to its first
/// argmax location, and the soft threshold passes it only where
/// `|c'| > λ/2` (zero at the kink itself).
pub fn fbc_backward<F: Real>(upstream: &[F], cache: &FbcCache<F>, params: &FbcParams<F>) -> Result<FbcGrads<F>> {
    let (p, q, k, r) = (params.p(), params.q(), params.k, params.r);
    if upstream.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} entries, expected {k}",
            upstream.len()
        )));
    }
    let n = cache.codes.len();
    let half = params.lambda / F::of(2.0);
    let mut grads = FbcGrads {
        d_u: Matrix::zeros(p, k * r),
        d_v: Matrix::zeros(q, k * r),
        d_x: vec![vec![F::zero(); p]; n],
        d_y: vec![vec![F::zero(); q]; n],
    };
    for (l, (&g, &v)) in upstream.iter().zip(&cache.global.argmax).enumerate() {
        let code = &cache.codes[v];
        if g == F::zero() || code.pre[l].abs() <= half {
            continue;
        }
        let pair = &cache.pairs.pairs[v];
        for j in l * r..(l + 1) * r {
            let da = g * code.vy[j];
            let db = g * code.ux[j];
            for (i, &xi) in pair.x.iter().enumerate() {
                let idx = i * k * r + j;
                grads.d_u.data[idx] = grads.d_u.data[idx] + xi * da;
                grads.d_x[v][i] = grads.d_x[v][i] + params.u.data[idx] * da;
            }
            for (i, &yi) in pair.y.iter().enumerate() {
                let idx = i * k * r + j;
                grads.d_v.data[idx] = grads.d_v.data[idx] + yi * db;
                grads.d_y[v][i] = grads.d_y[v][i] + params.v.data[idx] * db;
            }
        }
    }
    Ok(grads)
}

/// Applies `mode` to the aggregated vector.
pub fn normalize<F: Real>(z: &[F], mode: Normalization) -> Vec<F> {
    match mode {
        Normalization::None => z.to_vec(),
        Normalization::L2 => l2(z),
        Normalization::SignedSqrtL2 => l2(&z.iter().map(|&v| signed_sqrt(v)).collect::<Vec<_>>()),
    }
}

fn signed_sqrt<F: Real>(v: F) -> F {
    let eps = F::of(NORM_EPS);
    v.signum() * ((v.abs() + eps).sqrt() - eps.sqrt())
}

fn l2<F: Real>(z: &[F]) -> Vec<F> {
    let n = (z.iter().map(|&v| v * v).sum::<F>() + F::of(NORM_EPS)).sqrt();
    z.iter().map(|&v| v / n).collect()
}

fn l2_backward<F: Real>(z: &[F], g: &[F]) -> Vec<F> {
    let n2 = z.iter().map(|&v| v * v).sum::<F>() + F::of(NORM_EPS);
    let n = n2.sqrt();
    let dot: F = z.iter().zip(g).map(|(&a, &b)| a * b).sum();
    z.iter()
        .zip(g)
        .map(|(&zi, &gi)| gi / n - zi * dot / (n2 * n))
        .collect()
}

/// Gradient of [`normalize`] with respect to its input `z`.
pub fn normalize_backward<F: Real>(z: &[F], g: &[F], mode: Normalization) -> Vec<F> {
    match mode {
        Normalization::None => g.to_vec(),
        Normalization::L2 => l2_backward(z, g),
        Normalization::SignedSqrtL2 => {
            let s: Vec<F> = z.iter().map(|&v| signed_sqrt(v)).collect();
            let ds = l2_backward(&s, g);
            let eps = F::of(NORM_EPS);
            z.iter()
                .zip(ds)
                .map(|(&v, d)| d / (F::of(2.0) * (v.abs() + eps).sqrt()))
                .collect()
        }
    }
}

/// Explicit factorized dictionary: atom `l` is `U_l V_lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDictionary {
    /// `k` matrices of shape `p × r`.
    pub u: Vec<Matrix<f64>>,
    /// `k` matrices of shape `q × r`.
    pub v: Vec<Matrix<f64>>,
}

impl RawDictionary {
    fn shape(&self) -> Result<(usize, usize, usize, usize)> {
        let k = self.u.len();
        let first_u = self.u.first().ok_or(Error::Empty("dictionary"))?;
        let first_v = self.v.first().ok_or(Error::Empty("dictionary"))?;
        let (p, q, r) = (first_u.rows, first_v.rows, first_u.cols);
        let consistent = self.v.len() == k
            && self.u.iter().all(|m| m.rows == p && m.cols == r)
            && self.v.iter().all(|m| m.rows == q && m.cols == r);
        if !consistent || r == 0 {
            return Err(Error::ShapeMismatch("inconsistent dictionary factors".into()));
        }
        Ok((p, q, k, r))
    }

    /// Column-concatenated factors `[U_1 … U_k]`, `[V_1 … V_k]`.
    pub fn stacked(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (p, q, k, r) = self.shape()?;
        let u = DMatrix::from_fn(p, k * r, |i, j| self.u[j / r].get(i, j % r));
        let v = DMatrix::from_fn(q, k * r, |i, j| self.v[j / r].get(i, j % r));
        Ok((u, v))
    }
}

/// Ridge added to the Gram matrix when the caller has no better choice.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Minimum reciprocal condition number accepted by [`derive_transforms`].
pub const MIN_RCOND: f64 = 1e-14;

/// Builds `(Ũ, Ṽ)` from an explicit dictionary.
///
/// With `G = P((UᵀU Pᵀ) ∘ (VᵀV Pᵀ)) + ridge·I` and `Q = (G⁻¹P)ᵀ`, rank
/// component `s` of atom `l` becomes `ũ = Q[(l,s), l] · u_(l,s)` and
/// `ṽ = v_(l,s)`. Every atom keeps only the diagonal block of `Q`, so the
/// closed form equals the least-squares code whenever the atoms are mutually
/// orthogonal (in particular for `k = 1`), and is a diagonal approximation
/// otherwise.
pub fn derive_transforms(raw: &RawDictionary, ridge: f64) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let (p, q, k, r) = raw.shape()?;
    let (u, v) = raw.stacked()?;
    let proj = ProjectionMatrix { k, r }.to_dense();
    let gram = &proj * (&u.transpose() * &u * proj.transpose()).component_mul(&(&v.transpose() * &v * proj.transpose()))
        + DMatrix::identity(k, k) * ridge;
    let sv = gram.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(rcond >= MIN_RCOND) {
        return Err(Error::SingularSystem { rcond });
    }
    let inv = gram
        .try_inverse()
        .ok_or(Error::SingularSystem { rcond })?;
    let qmat = (inv * proj).transpose();
    if qmat.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem { rcond });
    }
    let mut ut = Matrix::zeros(p, k * r);
    let mut vt = Matrix::zeros(q, k * r);
    for j in 0..k * r {
        let scale = qmat[(j, j / r)];
        for i in 0..p {
            ut.set(i, j, scale * u[(i, j)]);
        }
        for i in 0..q {
            vt.set(i, j, v[(i, j)]);
        }
    }
    Ok((ut, vt))
}
