//! Dilations and ladder decompositions of one-dimensional diffeomorphisms.
//!
//! For a scale `0 < gamma <= 1` the dilation of `f` is `f(gamma x) / gamma`.
//! Given scales `gamma_0 < ... < gamma_d = 1`, the rung
//! `Delta_k = f_[gamma_k] o f_[gamma_{k-1}]^{-1}` is close to the identity and
//! `f = Delta_d o ... o Delta_1 o f_[gamma_0]`. The residual
//! `psi_k = Delta_k - id` is what each level of the hierarchical model learns.
//!
//! The `verify_*` functions produce numerical certificates: finite-difference
//! lower bounds on Lipschitz and smoothness constants, compared against the
//! analytic upper bounds.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt17, write_csv};

/// Grid size used to compute `M1` and `M2` for closed-form bundles.
pub const CONSTANT_GRID: usize = 100_000;

/// Multiplicative safety margin applied to grid maxima of `M1` and `M2`.
pub const CONSTANT_INFLATION: f64 = 1.01;

/// Endpoint shrink applied to open domains before gridding them.
pub const DOMAIN_SHRINK: f64 = 1e-9;

/// Absolute tolerance for floating-point noise when a certificate compares an
/// estimate against an analytic bound that may be exactly zero.
pub const LIPSCHITZ_ROUNDOFF: f64 = 1e-9;
pub const SMOOTHNESS_ROUNDOFF: f64 = 1e-7;

/// An invertible, twice differentiable map with closed-form derivatives and inverse.
pub trait Diffeomorphism: Send + Sync + fmt::Debug {
    fn f(&self, x: f64) -> f64;
    fn df(&self, x: f64) -> f64;
    fn d2f(&self, x: f64) -> f64;
    fn inv(&self, y: f64) -> f64;
    fn dinv(&self, y: f64) -> f64;
    fn d2inv(&self, y: f64) -> f64;
}

/// The closed-form targets shipped with the library.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetKind {
    #[default]
    Tanh,
    /// `f(x) = slope * x`.
    Linear { slope: f64 },
    /// `f(x) = alpha * sinh(x / alpha)`.
    ScaledSinh { alpha: f64 },
}


impl TargetKind {
    pub fn name(&self) -> String {
        match self {
            TargetKind::Tanh => "tanh".into(),
            TargetKind::Linear { slope } => format!("linear({slope})"),
            TargetKind::ScaledSinh { alpha } => format!("scaled-sinh({alpha})"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TargetKind::Tanh => Ok(()),
            TargetKind::Linear { slope } if slope.is_finite() && slope != 0.0 => Ok(()),
            TargetKind::ScaledSinh { alpha } if alpha.is_finite() && alpha > 0.0 => Ok(()),
            other => Err(Error::InvalidBundle(format!("invalid parameters for {}", other.name()))),
        }
    }

    /// Certified bundle for this target on `(-radius, radius)`.
    pub fn bundle(&self, radius: f64) -> Result<DiffeoBundle> {
        self.validate()?;
        DiffeoBundle::certified(self.name(), Arc::new(*self), radius)
    }
}

impl Diffeomorphism for TargetKind {
    fn f(&self, x: f64) -> f64 {
        match *self {
            TargetKind::Tanh => x.tanh(),
            TargetKind::Linear { slope } => slope * x,
            TargetKind::ScaledSinh { alpha } => alpha * (x / alpha).sinh(),
        }
    }

    fn df(&self, x: f64) -> f64 {
        match *self {
            TargetKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            TargetKind::Linear { slope } => slope,
            TargetKind::ScaledSinh { alpha } => (x / alpha).cosh(),
        }
    }

    fn d2f(&self, x: f64) -> f64 {
        match *self {
            TargetKind::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            TargetKind::Linear { .. } => 0.0,
            TargetKind::ScaledSinh { alpha } => (x / alpha).sinh() / alpha,
        }
    }

    fn inv(&self, y: f64) -> f64 {
        match *self {
            TargetKind::Tanh => y.atanh(),
            TargetKind::Linear { slope } => y / slope,
            TargetKind::ScaledSinh { alpha } => alpha * (y / alpha).asinh(),
        }
    }

    fn dinv(&self, y: f64) -> f64 {
        match *self {
            TargetKind::Tanh => 1.0 / (1.0 - y * y),
            TargetKind::Linear { slope } => 1.0 / slope,
            TargetKind::ScaledSinh { alpha } => {
                let u = y / alpha;
                1.0 / (1.0 + u * u).sqrt()
            }
        }
    }

    fn d2inv(&self, y: f64) -> f64 {
        match *self {
            TargetKind::Tanh => {
                let s = 1.0 - y * y;
                2.0 * y / (s * s)
            }
            TargetKind::Linear { .. } => 0.0,
            TargetKind::ScaledSinh { alpha } => {
                let u = y / alpha;
                -(u / alpha) / (1.0 + u * u).powf(1.5)
            }
        }
    }
}

/// A target map on `(-R, R)` together with its regularity constants.
#[derive(Clone)]
pub struct DiffeoBundle {
    name: String,
    map: Arc<dyn Diffeomorphism>,
    m1: f64,
    m2: f64,
    radius: f64,
}

impl fmt::Debug for DiffeoBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffeoBundle")
            .field("name", &self.name)
            .field("m1", &self.m1)
            .field("m2", &self.m2)
            .field("radius", &self.radius)
            .finish()
    }
}

fn closed_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(move |i| if i + 1 == n { hi } else { lo + step * i as f64 })
}

impl DiffeoBundle {
    /// Builds a bundle whose `M1`, `M2` are grid maxima of `|f'|, |(f^-1)'|`
    /// and `|f''|, |(f^-1)''|` over the closed domain and range, inflated by
    /// [`CONSTANT_INFLATION`]. `M1` is at least one.
    pub fn certified(name: impl Into<String>, map: Arc<dyn Diffeomorphism>, radius: f64) -> Result<Self> {
        check_radius(radius)?;
        let (ylo, yhi) = image_of(&*map, radius);
        let mut m1: f64 = 0.0;
        let mut m2: f64 = 0.0;
        for x in closed_grid(-radius, radius, CONSTANT_GRID) {
            m1 = m1.max(map.df(x).abs());
            m2 = m2.max(map.d2f(x).abs());
        }
        for y in closed_grid(ylo, yhi, CONSTANT_GRID) {
            m1 = m1.max(map.dinv(y).abs());
            m2 = m2.max(map.d2inv(y).abs());
        }
        if !(m1.is_finite() && m2.is_finite()) {
            return Err(Error::InvalidBundle("derivatives are unbounded on the domain".into()));
        }
        let m1 = (m1 * CONSTANT_INFLATION).max(1.0);
        let m2 = m2 * CONSTANT_INFLATION;
        Self::with_constants(name, map, radius, m1, m2)
    }

    /// Builds a bundle from caller-supplied constants; the map is spot-checked
    /// against them on a grid.
    pub fn with_constants(
        name: impl Into<String>,
        map: Arc<dyn Diffeomorphism>,
        radius: f64,
        m1: f64,
        m2: f64,
    ) -> Result<Self> {
        check_radius(radius)?;
        if !(m1 >= 1.0 && m1.is_finite()) {
            return Err(Error::InvalidBundle(format!("M1 = {m1} must be at least 1")));
        }
        if !(m2 >= 0.0 && m2.is_finite()) {
            return Err(Error::InvalidBundle(format!("M2 = {m2} must be non-negative")));
        }
        if map.f(0.0) != 0.0 {
            return Err(Error::InvalidBundle(format!("f(0) = {} but must be 0", map.f(0.0))));
        }
        let inner = radius * (1.0 - DOMAIN_SHRINK);
        let slack = 1.0 + 1e-12;
        for x in closed_grid(-inner, inner, 1001) {
            let back = map.inv(map.f(x));
            if (back - x).abs() > 1e-10 {
                return Err(Error::InvalidBundle(format!("f_inv(f({x})) = {back}")));
            }
            let y = map.f(x);
            if map.df(x).abs() > m1 * slack || map.dinv(y).abs() > m1 * slack {
                return Err(Error::InvalidBundle(format!("first derivative exceeds M1 = {m1} near x = {x}")));
            }
            if map.d2f(x).abs() > m2 * slack + 1e-15 || map.d2inv(y).abs() > m2 * slack + 1e-15 {
                return Err(Error::InvalidBundle(format!("second derivative exceeds M2 = {m2} near x = {x}")));
            }
        }
        Ok(Self {
            name: name.into(),
            map,
            m1,
            m2,
            radius,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn map(&self) -> &dyn Diffeomorphism {
        &*self.map
    }

    pub fn m1(&self) -> f64 {
        self.m1
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `C1 = 3 M1 M2`.
    pub fn c1(&self) -> f64 {
        3.0 * self.m1 * self.m2
    }

    /// `C2 = M2 (M1^2 + M1)`.
    pub fn c2(&self) -> f64 {
        self.m2 * (self.m1 * self.m1 + self.m1)
    }

    pub fn f(&self, x: f64) -> f64 {
        self.map.f(x)
    }

    /// Open image `(f(-R), f(R))`, ordered.
    pub fn image(&self) -> (f64, f64) {
        image_of(&*self.map, self.radius)
    }

    /// Evaluates `f` with a domain check.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(x.abs() < self.radius) {
            return Err(Error::OutOfDomain {
                x,
                domain: format!("(-{r}, {r})", r = self.radius),
            });
        }
        Ok(self.map.f(x))
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidBundle(format!("radius {radius} must be positive")));
    }
    Ok(())
}

fn image_of(map: &dyn Diffeomorphism, radius: f64) -> (f64, f64) {
    let a = map.f(-radius);
    let b = map.f(radius);
    (a.min(b), a.max(b))
}

fn check_scale(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::OutOfRange(format!("scale {gamma} must lie in (0, 1]")));
    }
    Ok(())
}

/// `f_[gamma](x) = f(gamma x) / gamma`.
pub fn dilate(bundle: &DiffeoBundle, gamma: f64, x: f64) -> Result<f64> {
    check_scale(gamma)?;
    let arg = gamma * x;
    if !(arg.abs() < bundle.radius) {
        return Err(Error::OutOfDomain {
            x,
            domain: format!("|{gamma} x| < {}", bundle.radius),
        });
    }
    Ok(bundle.map.f(arg) / gamma)
}

/// `f_[gamma]^{-1}(x) = f^{-1}(gamma x) / gamma`.
pub fn dilate_inverse(bundle: &DiffeoBundle, gamma: f64, x: f64) -> Result<f64> {
    check_scale(gamma)?;
    let arg = gamma * x;
    let (lo, hi) = bundle.image();
    if !(arg > lo && arg < hi) {
        return Err(Error::OutOfDomain {
            x,
            domain: format!("{gamma} x in ({lo}, {hi})"),
        });
    }
    Ok(bundle.map.inv(arg) / gamma)
}

fn check_order(gamma_prev: f64, gamma_next: f64) -> Result<()> {
    if gamma_prev > gamma_next {
        return Err(Error::OutOfRange(format!(
            "rung scales must satisfy gamma_prev <= gamma_next, got {gamma_prev} > {gamma_next}"
        )));
    }
    Ok(())
}

/// `Delta_k(x) = f_[gamma_next](f_[gamma_prev]^{-1}(x))`.
pub fn delta_k(bundle: &DiffeoBundle, gamma_prev: f64, gamma_next: f64, x: f64) -> Result<f64> {
    check_order(gamma_prev, gamma_next)?;
    if gamma_prev == gamma_next {
        check_scale(gamma_prev)?;
        return Ok(x);
    }
    let v = dilate_inverse(bundle, gamma_prev, x)?;
    dilate(bundle, gamma_next, v)
}

/// `psi_k(x) = Delta_k(x) - x`.
pub fn psi_k(bundle: &DiffeoBundle, gamma_prev: f64, gamma_next: f64, x: f64) -> Result<f64> {
    Ok(delta_k(bundle, gamma_prev, gamma_next, x)? - x)
}

/// `psi_k'(x) = f'(gamma_next v) (f^{-1})'(gamma_prev x) - 1` with `v = f_[gamma_prev]^{-1}(x)`.
pub fn psi_k_prime(bundle: &DiffeoBundle, gamma_prev: f64, gamma_next: f64, x: f64) -> Result<f64> {
    check_order(gamma_prev, gamma_next)?;
    let v = dilate_inverse(bundle, gamma_prev, x)?;
    if !((gamma_next * v).abs() < bundle.radius) {
        return Err(Error::OutOfDomain {
            x,
            domain: "range of the previous dilation".into(),
        });
    }
    Ok(bundle.map.df(gamma_next * v) * bundle.map.dinv(gamma_prev * x) - 1.0)
}

/// `-g^2 x^3 / (1 + g^2 x^2)`, the closed-form rung residual of `tanh` when
/// consecutive scales double.
pub fn tanh_psi_closed_form(gamma_prev: f64, x: f64) -> f64 {
    let g2 = gamma_prev * gamma_prev;
    -g2 * x * x * x / (1.0 + g2 * x * x)
}

/// Scales `gamma_0 < gamma_1 < ... < gamma_d = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    scales: Vec<f64>,
}

impl LadderSpec {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.len() < 2 {
            return Err(Error::InvalidLadder("need at least gamma_0 and gamma_1".into()));
        }
        if !(scales[0] > 0.0) {
            return Err(Error::InvalidLadder(format!("gamma_0 = {} must be positive", scales[0])));
        }
        if scales.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidLadder("scales must be strictly increasing".into()));
        }
        if *scales.last().unwrap() != 1.0 {
            return Err(Error::InvalidLadder("the last scale must equal 1".into()));
        }
        Ok(Self { scales })
    }

    /// `gamma_k = base^(k - d)` for `k = 0..=d`.
    pub fn geometric(base: f64, d: usize) -> Result<Self> {
        if !(base > 1.0) || d == 0 {
            return Err(Error::InvalidLadder(format!("need base > 1 and d >= 1, got {base}, {d}")));
        }
        Self::new((0..=d).map(|k| base.powi(k as i32 - d as i32)).collect())
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn d(&self) -> usize {
        self.scales.len() - 1
    }

    /// `(gamma_{k-1}, gamma_k)` for `k` in `1..=d`.
    pub fn rung(&self, k: usize) -> (f64, f64) {
        (self.scales[k - 1], self.scales[k])
    }
}

/// Evaluates `Delta_d o ... o Delta_1 o f_[gamma_0]` at `x`.
pub fn ladder_compose(bundle: &DiffeoBundle, spec: &LadderSpec, x: f64) -> Result<f64> {
    let mut y = dilate(bundle, spec.scales[0], x)?;
    for k in 1..=spec.d() {
        let (gp, gn) = spec.rung(k);
        y = delta_k(bundle, gp, gn, y)?;
    }
    Ok(y)
}

/// The domain of `psi_k`: the image of `f_[gamma_prev]` over `(-R, R)`,
/// shrunk by [`DOMAIN_SHRINK`] at each end.
pub fn psi_domain(bundle: &DiffeoBundle, gamma_prev: f64) -> Result<(f64, f64)> {
    check_scale(gamma_prev)?;
    let r = bundle.radius;
    let a = bundle.map.f(-gamma_prev * r) / gamma_prev;
    let b = bundle.map.f(gamma_prev * r) / gamma_prev;
    let (lo, hi) = (a.min(b) + DOMAIN_SHRINK, a.max(b) - DOMAIN_SHRINK);
    if !(lo < hi) {
        return Err(Error::OutOfDomain {
            x: lo,
            domain: format!("image of the dilation at scale {gamma_prev} is too small"),
        });
    }
    Ok((lo, hi))
}

fn check_grid(lo: f64, hi: f64, grid_n: usize) -> Result<()> {
    if !(lo < hi) {
        return Err(Error::OutOfRange(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    if grid_n < 2 {
        return Err(Error::OutOfRange(format!("grid_n = {grid_n} must be at least 2")));
    }
    Ok(())
}

/// Largest slope between adjacent points of a `grid_n`-point grid on `[lo, hi]`.
///
/// This is a lower bound on the Lipschitz constant of `g`.
pub fn estimate_lipschitz<G>(g: G, lo: f64, hi: f64, grid_n: usize) -> Result<f64>
where
    G: Fn(f64) -> Result<f64> + Sync,
{
    check_grid(lo, hi, grid_n)?;
    let xs: Vec<f64> = closed_grid(lo, hi, grid_n).collect();
    let ys = xs.par_iter().map(|&x| g(x)).collect::<Result<Vec<f64>>>()?;
    let mut best: f64 = 0.0;
    for i in 1..xs.len() {
        best = best.max((ys[i] - ys[i - 1]).abs() / (xs[i] - xs[i - 1]));
    }
    Ok(best)
}

/// Largest central second difference `|g(x+h) - 2g(x) + g(x-h)| / h^2`
/// with `h = (hi - lo) / grid_n`, over the interior grid points.
pub fn estimate_smoothness<G>(g: G, lo: f64, hi: f64, grid_n: usize) -> Result<f64>
where
    G: Fn(f64) -> Result<f64> + Sync,
{
    check_grid(lo, hi, grid_n)?;
    if grid_n < 3 {
        return Err(Error::OutOfRange("second differences need grid_n >= 3".into()));
    }
    let h = (hi - lo) / grid_n as f64;
    let ys = (0..=grid_n)
        .into_par_iter()
        .map(|i| g(if i == grid_n { hi } else { lo + h * i as f64 }))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ys
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs() / (h * h))
        .fold(0.0, f64::max))
}

/// Certificate for one rung.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungCertificate {
    pub k: usize,
    pub gamma_prev: f64,
    pub gamma: f64,
    pub domain: (f64, f64),
    pub lip_est: f64,
    pub lip_bound: f64,
    pub smooth_est: f64,
    pub smooth_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderCertificate {
    pub target: String,
    pub radius: f64,
    pub m1: f64,
    pub m2: f64,
    pub c1: f64,
    pub c2: f64,
    pub grid_n: usize,
    pub levels: Vec<RungCertificate>,
    pub pass: bool,
}

/// Checks, rung by rung, that `psi_k` has a finite-difference Lipschitz
/// estimate at most `C1 R (gamma_k - gamma_{k-1})` and a second-difference
/// estimate at most `C2` on its domain.
pub fn verify_theorem1(bundle: &DiffeoBundle, spec: &LadderSpec, grid_n: usize) -> Result<LadderCertificate> {
    let (c1, c2, r) = (bundle.c1(), bundle.c2(), bundle.radius);
    let mut levels = Vec::with_capacity(spec.d());
    for k in 1..=spec.d() {
        let (gp, gn) = spec.rung(k);
        let (lo, hi) = psi_domain(bundle, gp)?;
        let psi = |x: f64| psi_k(bundle, gp, gn, x);
        let lip_est = estimate_lipschitz(psi, lo, hi, grid_n)?;
        let smooth_est = estimate_smoothness(psi, lo, hi, grid_n)?;
        let lip_bound = c1 * r * (gn - gp);
        let smooth_bound = c2;
        levels.push(RungCertificate {
            k,
            gamma_prev: gp,
            gamma: gn,
            domain: (lo, hi),
            lip_est,
            lip_bound,
            smooth_est,
            smooth_bound,
            pass: lip_est <= lip_bound + LIPSCHITZ_ROUNDOFF && smooth_est <= smooth_bound + SMOOTHNESS_ROUNDOFF,
        });
    }
    let pass = levels.iter().all(|l| l.pass);
    Ok(LadderCertificate {
        target: bundle.name.clone(),
        radius: r,
        m1: bundle.m1,
        m2: bundle.m2,
        c1,
        c2,
        grid_n,
        levels,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilationCertificate {
    pub gamma: f64,
    pub lip_est: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Checks that `f_[gamma](x) - f'(0) x` has Lipschitz estimate at most
/// `gamma M2 R` on `(-R, R)`.
pub fn verify_prop1(bundle: &DiffeoBundle, gamma: f64, grid_n: usize) -> Result<DilationCertificate> {
    check_scale(gamma)?;
    let slope0 = bundle.map.df(0.0);
    let r = bundle.radius - DOMAIN_SHRINK;
    let lip_est = estimate_lipschitz(|x| Ok(dilate(bundle, gamma, x)? - slope0 * x), -r, r, grid_n)?;
    let bound = gamma * bundle.m2 * bundle.radius;
    Ok(DilationCertificate {
        gamma,
        lip_est,
        bound,
        pass: lip_est <= bound + LIPSCHITZ_ROUNDOFF,
    })
}

/// One sample of a rung residual curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiPoint {
    pub k: usize,
    pub x: f64,
    pub psi: f64,
}

/// Samples every `psi_k` on a shared `points`-point grid covering the
/// intersection of all rung domains.
pub fn psi_curves(bundle: &DiffeoBundle, spec: &LadderSpec, points: usize) -> Result<Vec<PsiPoint>> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for k in 1..=spec.d() {
        let (a, b) = psi_domain(bundle, spec.rung(k).0)?;
        lo = lo.max(a);
        hi = hi.min(b);
    }
    check_grid(lo, hi, points)?;
    let xs: Vec<f64> = closed_grid(lo, hi, points).collect();
    let mut out = Vec::with_capacity(points * spec.d());
    for k in 1..=spec.d() {
        let (gp, gn) = spec.rung(k);
        for &x in &xs {
            out.push(PsiPoint {
                k,
                x,
                psi: psi_k(bundle, gp, gn, x)?,
            });
        }
    }
    Ok(out)
}

/// Writes curves as CSV with header `k,x,psi`.
pub fn write_psi_curves_csv(path: &Path, curves: &[PsiPoint]) -> Result<()> {
    write_csv(
        path,
        &["k", "x", "psi"],
        curves.iter().map(|p| vec![p.k.to_string(), fmt17(p.x), fmt17(p.psi)]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh(r: f64) -> DiffeoBundle {
        TargetKind::Tanh.bundle(r).unwrap()
    }

    fn linear(c: f64) -> DiffeoBundle {
        TargetKind::Linear { slope: c }.bundle(1.0).unwrap()
    }

    #[test]
    fn tanh_constants() {
        let b = tanh(1.0);
        let cosh2 = 1f64.cosh().powi(2);
        assert!((b.m1() - 1.01 * cosh2).abs() < 1e-6, "{}", b.m1());
        // (atanh)'' peaks at y = tanh(1): 2y / (1 - y^2)^2
        let y = 1f64.tanh();
        let m2 = 2.0 * y / (1.0 - y * y).powi(2);
        assert!((b.m2() - 1.01 * m2).abs() < 1e-6, "{}", b.m2());
        assert!((b.c1() - 3.0 * b.m1() * b.m2()).abs() < 1e-12);
    }

    #[test]
    fn linear_constants() {
        let b = linear(2.0);
        assert!((b.m1() - 2.02).abs() < 1e-12);
        assert_eq!(b.m2(), 0.0);
        let b = linear(0.25);
        assert!((b.m1() - 4.04).abs() < 1e-12);
    }

    #[test]
    fn bundle_rejects_bad_maps() {
        #[derive(Debug)]
        struct Shifted;
        impl Diffeomorphism for Shifted {
            fn f(&self, x: f64) -> f64 {
                x + 1.0
            }
            fn df(&self, _: f64) -> f64 {
                1.0
            }
            fn d2f(&self, _: f64) -> f64 {
                0.0
            }
            fn inv(&self, y: f64) -> f64 {
                y - 1.0
            }
            fn dinv(&self, _: f64) -> f64 {
                1.0
            }
            fn d2inv(&self, _: f64) -> f64 {
                0.0
            }
        }
        assert!(DiffeoBundle::certified("shifted", Arc::new(Shifted), 1.0).is_err());
        assert!(TargetKind::Linear { slope: 0.0 }.bundle(1.0).is_err());
        assert!(DiffeoBundle::with_constants("t", Arc::new(TargetKind::Tanh), 1.0, 1.0, 10.0).is_err());
    }

    #[test]
    fn dilation_examples() {
        let b = tanh(2.0);
        assert_eq!(dilate(&b, 1.0, 0.3).unwrap(), 0.3f64.tanh());
        assert!((dilate(&b, 0.5, 1.0).unwrap() - 0.9242343145200195).abs() < 1e-12);
        let l = linear(2.0);
        for g in [0.1, 0.5, 1.0] {
            assert!((dilate(&l, g, 0.4).unwrap() - 0.8).abs() < 1e-15);
        }
        assert!(dilate(&b, 0.5, 4.0).is_err());
        assert!(dilate(&b, 0.0, 1.0).is_err());
    }

    #[test]
    fn dilation_inverse_examples() {
        let b = tanh(1.0);
        assert_eq!(dilate_inverse(&b, 1.0, 0.5).unwrap(), 0.5f64.atanh());
        let x = 0.3;
        let back = dilate_inverse(&b, 0.25, dilate(&b, 0.25, x).unwrap()).unwrap();
        assert!((back - x).abs() < 1e-10);
        assert!((dilate_inverse(&linear(2.0), 0.5, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(dilate_inverse(&b, 1.0, 0.9).is_err());
    }

    #[test]
    fn delta_and_psi_examples() {
        let b = tanh(2.0);
        assert_eq!(delta_k(&b, 0.5, 0.5, 0.7).unwrap(), 0.7);
        let x = 0.5f64.tanh() / 0.5;
        assert!((delta_k(&b, 0.5, 1.0, x).unwrap() - 0.7615941559557649).abs() < 1e-12);
        assert!(delta_k(&b, 1.0, 0.5, 0.1).is_err());

        let l = linear(3.0);
        assert!((delta_k(&l, 0.25, 1.0, 0.4).unwrap() - 0.4).abs() < 1e-15);
        assert!(psi_k(&l, 0.25, 1.0, 0.4).unwrap().abs() < 1e-15);

        assert!((psi_k(&b, 0.5, 1.0, 1.0).unwrap() + 0.2).abs() < 1e-12);
        assert_eq!(psi_k(&b, 0.5, 0.5, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn psi_prime_matches_finite_differences() {
        let b = tanh(1.0);
        let sinh = TargetKind::ScaledSinh { alpha: 0.7 }.bundle(1.0).unwrap();
        for bundle in [&b, &sinh] {
            for x in [-0.6, -0.1, 0.0, 0.35, 0.7] {
                let h = 1e-6;
                let fd = (psi_k(bundle, 0.25, 0.5, x + h).unwrap() - psi_k(bundle, 0.25, 0.5, x - h).unwrap()) / (2.0 * h);
                assert!((psi_k_prime(bundle, 0.25, 0.5, x).unwrap() - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(tanh_psi_closed_form(0.3, 0.0), 0.0);
        assert!((tanh_psi_closed_form(0.5, 1.0) + 0.2).abs() < 1e-15);
        assert!((tanh_psi_closed_form(1.0, 2.0) + 1.6).abs() < 1e-15);
    }

    #[test]
    fn ladder_spec_validation() {
        assert!(LadderSpec::new(vec![0.5, 1.0]).is_ok());
        assert!(LadderSpec::new(vec![0.5, 0.4, 1.0]).is_err());
        assert!(LadderSpec::new(vec![0.5, 0.9]).is_err());
        assert!(LadderSpec::new(vec![0.0, 1.0]).is_err());
        let s = LadderSpec::geometric(2.0, 5).unwrap();
        assert_eq!(s.scales()[0], 1.0 / 32.0);
        assert_eq!(s.d(), 5);
    }

    #[test]
    fn ladder_compose_examples() {
        let b = tanh(1.0);
        let one = LadderSpec::new(vec![0.3, 1.0]).unwrap();
        assert!((ladder_compose(&b, &one, 0.45).unwrap() - 0.45f64.tanh()).abs() < 1e-12);
        let five = LadderSpec::geometric(2.0, 5).unwrap();
        assert!((ladder_compose(&b, &five, 0.7).unwrap() - 0.6043677771171636).abs() < 1e-12);
        let l = linear(2.0);
        assert_eq!(ladder_compose(&l, &five, 0.7).unwrap(), 1.4);
    }

    #[test]
    fn telescoping_on_a_grid() {
        let sinh = TargetKind::ScaledSinh { alpha: 0.5 }.bundle(1.5).unwrap();
        let b = tanh(1.0);
        for (bundle, spec) in [
            (&b, LadderSpec::geometric(2.0, 5).unwrap()),
            (&sinh, LadderSpec::new(vec![0.1, 0.3, 0.55, 1.0]).unwrap()),
        ] {
            let r = bundle.radius();
            for i in 0..200 {
                let x = -r + 2.0 * r * (i as f64 + 0.5) / 200.0;
                let err = (ladder_compose(bundle, &spec, x).unwrap() - bundle.f(x)).abs();
                assert!(err < 1e-9, "x = {x}: {err}");
            }
        }
    }

    #[test]
    fn lipschitz_estimator_examples() {
        assert!((estimate_lipschitz(|x| Ok(3.0 * x), -1.0, 2.0, 50).unwrap() - 3.0).abs() < 1e-9);
        let est = estimate_lipschitz(|x| Ok(x * x), 0.0, 1.0, 1001).unwrap();
        assert!((est - (2.0 - 1e-3)).abs() < 1e-9);
        assert_eq!(estimate_lipschitz(|_| Ok(4.0), 0.0, 1.0, 10).unwrap(), 0.0);
        assert!(estimate_lipschitz(Ok, 1.0, 0.0, 10).is_err());
        assert!(estimate_lipschitz(Ok, 0.0, 1.0, 1).is_err());
        let failing = estimate_lipschitz(|x| if x > 0.5 { Err(Error::Empty("boom".into())) } else { Ok(x) }, 0.0, 1.0, 10);
        assert!(failing.is_err());
    }

    #[test]
    fn smoothness_estimator() {
        let est = estimate_smoothness(|x| Ok(x * x * x), 0.0, 1.0, 1000).unwrap();
        assert!((est - 6.0).abs() < 1e-2);
        assert!(estimate_smoothness(|x| Ok(2.0 * x + 1.0), 0.0, 1.0, 1000).unwrap() < 1e-6);
    }

    #[test]
    fn theorem1_linear_is_trivial() {
        let l = linear(1.5);
        let cert = verify_theorem1(&l, &LadderSpec::geometric(2.0, 4).unwrap(), 500).unwrap();
        assert!(cert.pass);
        for lvl in &cert.levels {
            assert_eq!(lvl.lip_bound, 0.0);
            assert!(lvl.lip_est < 1e-12);
        }
    }

    #[test]
    fn theorem1_degenerate_rung() {
        let b = tanh(1.0);
        let spec = LadderSpec::new(vec![0.5, 0.5 + 1e-6, 1.0]).unwrap();
        let cert = verify_theorem1(&b, &spec, 2000).unwrap();
        let lvl = &cert.levels[0];
        assert!(lvl.lip_bound < 1e-4);
        assert!(lvl.lip_est <= lvl.lip_bound);
        assert!(cert.pass);
    }

    #[test]
    fn prop1_examples() {
        let l = linear(1.5);
        let c = verify_prop1(&l, 0.25, 1000).unwrap();
        assert!(c.pass && c.lip_est < 1e-12);
        let b = tanh(1.0);
        let c = verify_prop1(&b, 1.0 / 32.0, 4000).unwrap();
        assert!(c.pass, "{c:?}");
        let tiny = verify_prop1(&b, 1e-6, 1000).unwrap();
        assert!(tiny.bound < 1e-4 && tiny.lip_est < 1e-9);
    }

    #[test]
    fn psi_curves_csv() {
        let b = tanh(1.0);
        let spec = LadderSpec::geometric(2.0, 5).unwrap();
        let curves = psi_curves(&b, &spec, 40).unwrap();
        assert_eq!(curves.len(), 200);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("psi.csv");
        write_psi_curves_csv(&path, &curves).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("k,x,psi\n"));
        assert_eq!(text.lines().count(), 201);
    }
}
