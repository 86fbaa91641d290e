//! Discretized privacy loss distributions.
//!
//! A [`LossPmf`] holds the distribution of the privacy loss
//! `L = ln(P(o) / Q(o))`, `o ~ P`, on the grid `i * grid_spacing`, plus the
//! mass of `L = +inf`. Add/remove adjacency is not symmetric once subsampling
//! enters, so a [`PrivacyLossDistribution`] carries one pmf per direction and
//! reports the worse of the two.

use std::f64::consts::SQRT_2;

use std::cell::RefCell;

use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Direction in which losses are rounded onto the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round up; every derived ε(δ) is an upper bound.
    Pessimistic,
    /// Round down; every derived ε(δ) is a lower bound.
    Optimistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub grid_spacing: f64,
    /// Mass trimmed from each tail when building or composing.
    pub tail_mass: f64,
    /// Losses beyond `±max_loss` are folded: above into the infinite mass
    /// (or clamped, when optimistic), below onto `-max_loss`.
    pub max_loss: f64,
    pub rounding: Rounding,
}

impl Default for Discretization {
    fn default() -> Self {
        Self { grid_spacing: 1e-4, tail_mass: 1e-15, max_loss: 100.0, rounding: Rounding::Pessimistic }
    }
}

impl Discretization {
    pub fn with_grid(grid_spacing: f64) -> Self {
        Self { grid_spacing, ..Self::default() }
    }

    pub fn optimistic(self) -> Self {
        Self { rounding: Rounding::Optimistic, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.grid_spacing > 0.0 && self.grid_spacing.is_finite()) {
            return Err(Error::Domain(format!("grid spacing {} must be positive", self.grid_spacing)));
        }
        if !(self.tail_mass >= 0.0 && self.tail_mass < 0.5) {
            return Err(Error::Domain(format!("tail mass {} outside [0, 0.5)", self.tail_mass)));
        }
        if !(self.max_loss > 0.0) {
            return Err(Error::Domain("max_loss must be positive".into()));
        }
        Ok(())
    }

    fn cap_index_hi(&self) -> i64 {
        (self.max_loss / self.grid_spacing).floor() as i64
    }

    fn cap_index_lo(&self) -> i64 {
        (-self.max_loss / self.grid_spacing).ceil() as i64
    }
}

/// Privacy loss pmf for one adjacency direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPmf {
    grid_spacing: f64,
    offset: i64,
    masses: Vec<f64>,
    infinity_mass: f64,
    rounding: Rounding,
}

impl LossPmf {
    /// All mass at loss zero: the pmf of identical output distributions.
    pub fn identity(grid_spacing: f64, rounding: Rounding) -> Self {
        Self { grid_spacing, offset: 0, masses: vec![1.0], infinity_mass: 0.0, rounding }
    }

    pub fn grid_spacing(&self) -> f64 {
        self.grid_spacing
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn infinity_mass(&self) -> f64 {
        self.infinity_mass
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Grid index of `masses()[0]`.
    pub fn offset(&self) -> i64 {
        self.offset
    }

    /// `(loss, mass)` pairs over the finite support.
    pub fn losses(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.masses
            .iter()
            .enumerate()
            .map(move |(i, &m)| ((self.offset + i as i64) as f64 * self.grid_spacing, m))
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.infinity_mass
    }

    /// Hockey-stick divergence `δ(ε) = inf + Σ_{ℓ>ε} m(ℓ)(1 − e^{ε−ℓ})`.
    pub fn delta_for_epsilon(&self, epsilon: f64) -> f64 {
        let tail: f64 = self
            .losses()
            .filter(|&(l, _)| l > epsilon)
            .map(|(l, m)| m * -(epsilon - l).exp_m1())
            .sum();
        self.infinity_mass + tail
    }

    /// Smallest ε ≥ 0 with `delta_for_epsilon(ε) ≤ delta`.
    ///
    /// The hockey-stick curve is solved exactly between consecutive support
    /// points, so the answer is not restricted to grid values.
    pub fn epsilon_for_delta(&self, delta: f64) -> Result<f64> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
        }
        if delta <= self.infinity_mass {
            return Err(Error::Unsatisfiable { delta, infinity_mass: self.infinity_mass });
        }
        let excess = |s1: f64, s2: f64| ((self.infinity_mass + s1 - delta) / s2).ln().max(0.0);
        // s1 = Σ m over losses above the current point, s2 = Σ m e^{-ℓ} likewise.
        let (mut s1, mut s2) = (0.0, 0.0);
        for (i, &m) in self.masses.iter().enumerate().rev() {
            let loss = (self.offset + i as i64) as f64 * self.grid_spacing;
            if self.infinity_mass + s1 - loss.exp() * s2 > delta {
                return Ok(excess(s1, s2));
            }
            s1 += m;
            s2 += m * (-loss).exp();
        }
        if self.infinity_mass + s1 > delta && s2 > 0.0 {
            Ok(excess(s1, s2))
        } else {
            Ok(0.0)
        }
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.grid_spacing != other.grid_spacing || self.rounding != other.rounding {
            return Err(Error::Domain("cannot compose pmfs on different grids or roundings".into()));
        }
        Ok(())
    }

    /// Distribution of the sum of two independent losses.
    pub fn convolve(&self, other: &Self, disc: &Discretization) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = Self {
            grid_spacing: self.grid_spacing,
            offset: self.offset + other.offset,
            masses: convolve(&self.masses, &other.masses),
            infinity_mass: self.infinity_mass + other.infinity_mass
                - self.infinity_mass * other.infinity_mass,
            rounding: self.rounding,
        };
        out.truncate(disc);
        Ok(out)
    }

    /// `times`-fold composition by repeated squaring.
    pub fn self_compose(&self, times: u64, disc: &Discretization) -> Result<Self> {
        Ok(self.self_compose_until(times, disc, |_| false)?.expect("never abandoned"))
    }

    /// Composition that is abandoned (returning `None`) as soon as an
    /// intermediate result, which composes at most `times` steps, satisfies
    /// `give_up`. Privacy only degrades under further composition, so any
    /// monotone criterion checked on a partial result holds for the whole.
    pub fn self_compose_until(
        &self,
        times: u64,
        disc: &Discretization,
        give_up: impl Fn(&Self) -> bool,
    ) -> Result<Option<Self>> {
        let over = |p: &Self| give_up(p);
        let mut result: Option<Self> = None;
        let mut base = self.clone();
        let mut remaining = times;
        while remaining > 0 {
            if remaining & 1 == 1 {
                result = Some(match result {
                    None => base.clone(),
                    Some(acc) => acc.convolve(&base, disc)?,
                });
                if result.as_ref().is_some_and(over) {
                    return Ok(None);
                }
            }
            remaining >>= 1;
            if remaining > 0 {
                base = base.convolve(&base, disc)?;
                if over(&base) {
                    return Ok(None);
                }
            }
        }
        Ok(Some(result.unwrap_or_else(|| Self::identity(self.grid_spacing, self.rounding))))
    }

    /// Folds losses outside the window and trims negligible tails.
    fn truncate(&mut self, disc: &Discretization) {
        for m in &mut self.masses {
            if !(*m > 0.0) {
                *m = 0.0;
            }
        }
        let pessimistic = self.rounding == Rounding::Pessimistic;

        let hi_cap = disc.cap_index_hi();
        let last_index = self.offset + self.masses.len() as i64 - 1;
        if last_index > hi_cap {
            let keep = (hi_cap - self.offset + 1).max(0) as usize;
            let folded: f64 = self.masses.drain(keep..).sum();
            if pessimistic || keep == 0 {
                self.infinity_mass += folded;
            } else {
                self.masses[keep - 1] += folded;
            }
        }
        let lo_cap = disc.cap_index_lo();
        if self.offset < lo_cap && !self.masses.is_empty() {
            let cut = ((lo_cap - self.offset) as usize).min(self.masses.len());
            let folded: f64 = self.masses.drain(..cut).sum();
            self.offset = lo_cap;
            if self.masses.is_empty() {
                self.masses.push(folded);
            } else {
                self.masses[0] += folded;
            }
        }

        let budget = disc.tail_mass / 2.0;
        let mut lower = 0;
        let mut acc = 0.0;
        while lower + 1 < self.masses.len() && acc + self.masses[lower] <= budget {
            acc += self.masses[lower];
            lower += 1;
        }
        if lower > 0 {
            self.masses.drain(..lower);
            self.offset += lower as i64;
            self.masses[0] += acc;
        }
        let mut acc = 0.0;
        let mut upper = self.masses.len();
        while upper > 1 && acc + self.masses[upper - 1] <= budget {
            acc += self.masses[upper - 1];
            upper -= 1;
        }
        if upper < self.masses.len() {
            self.masses.truncate(upper);
            if pessimistic {
                self.infinity_mass += acc;
            } else {
                *self.masses.last_mut().expect("non-empty") += acc;
            }
        }
        if self.masses.is_empty() {
            self.masses.push(0.0);
        }
    }
}

const DIRECT_CONVOLUTION_LIMIT: usize = 1 << 16;

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 || a.len() * b.len() <= DIRECT_CONVOLUTION_LIMIT {
        let mut out = vec![0.0; n];
        for (i, &x) in a.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[i..].iter_mut().zip(b) {
                *o += x * y;
            }
        }
        return out;
    }
    let size = fft_size(n);
    FFT_PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let spectrum = |x: &[f64]| {
            let mut padded = forward.make_input_vec();
            padded[..x.len()].copy_from_slice(x);
            let mut out = forward.make_output_vec();
            forward.process(&mut padded, &mut out).expect("buffer sizes from planner");
            out
        };
        let mut product = spectrum(a);
        if std::ptr::eq(a, b) {
            product.iter_mut().for_each(|z| *z = *z * *z);
        } else {
            product.iter_mut().zip(spectrum(b)).for_each(|(z, w)| *z *= w);
        }
        // The real transform needs exactly-real DC and Nyquist bins.
        let last = product.len() - 1;
        product[0].im = 0.0;
        product[last].im = 0.0;
        let mut out = inverse.make_output_vec();
        inverse.process(&mut product, &mut out).expect("buffer sizes from planner");
        let scale = 1.0 / size as f64;
        out.truncate(n);
        out.iter_mut().for_each(|v| *v = (*v * scale).max(0.0));
        out
    })
}

thread_local! {
    static FFT_PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

/// Smallest even length `≥ n` of the form `m · 2^j` with `m` a small
/// 3-5-smooth number.
fn fft_size(n: usize) -> usize {
    [1usize, 3, 5, 9, 15, 25, 27, 45]
        .iter()
        .map(|&m| m * n.div_ceil(m).next_power_of_two().max(2))
        .min()
        .expect("non-empty")
}

/// Gaussian mixture `Σ w_i N(mean_i, σ²)`; the distribution of the
/// mechanism's output that a loss curve is evaluated under.
struct NoiseMixture {
    sigma: f64,
    components: Vec<(f64, f64)>,
    pivot: f64,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

impl NoiseMixture {
    fn new(sigma: f64, components: Vec<(f64, f64)>) -> Self {
        let pivot = components.iter().map(|(m, w)| m * w).sum();
        Self { sigma, components, pivot }
    }

    fn cdf(&self, x: f64) -> f64 {
        self.components.iter().map(|&(m, w)| w * std_normal_cdf((x - m) / self.sigma)).sum()
    }

    fn sf(&self, x: f64) -> f64 {
        self.components.iter().map(|&(m, w)| w * std_normal_cdf((m - x) / self.sigma)).sum()
    }

    /// `cdf(x)` left of the pivot and `sf(x)` right of it: the smaller tail,
    /// which keeps interval subtractions accurate.
    fn tail(&self, x: f64) -> f64 {
        if x <= self.pivot {
            self.cdf(x)
        } else {
            self.sf(x)
        }
    }

    /// `P(a < X ≤ b)` from `tail(a)` and `tail(b)`.
    fn interval_from_tails(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let ((a, ta), (b, tb)) = (a, b);
        if b <= a {
            0.0
        } else if b <= self.pivot {
            tb - ta
        } else if a >= self.pivot {
            ta - tb
        } else {
            (self.cdf(self.pivot) - ta) + (self.sf(self.pivot) - tb)
        }
        .max(0.0)
    }

    fn range(&self, tail_mass: f64) -> (f64, f64) {
        let z = if tail_mass > 0.0 { SQRT_2 * erfc_inv(tail_mass) } else { 40.0 };
        let lo = self.components.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let hi = self.components.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        (lo - z * self.sigma, hi + z * self.sigma)
    }
}

/// An increasing privacy-loss curve over the noise variable.
trait LossCurve {
    fn loss(&self, x: f64) -> f64;
    /// Solves `loss(x) = target` for `x` in `[lo, hi]`.
    fn inverse(&self, target: f64, lo: f64, hi: f64) -> f64;
    /// `lim_{x→∞} loss(x)`.
    fn supremum(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// Output drawn from the dataset containing the unit.
    Remove,
    /// Output drawn from the dataset without the unit; the noise variable is
    /// negated so the curve stays increasing.
    Add,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Closed-form loss of the Poisson-subsampled Gaussian with sensitivity 1:
/// `l(x) = ln(1 − q + q e^{(2x − 1)/(2σ²)})`.
struct SubsampledGaussianLoss {
    sigma: f64,
    q: f64,
    direction: Direction,
}

impl SubsampledGaussianLoss {
    fn remove_loss(&self, x: f64) -> f64 {
        let u = (2.0 * x - 1.0) / (2.0 * self.sigma * self.sigma);
        if self.q == 1.0 {
            u
        } else {
            log_add_exp((-self.q).ln_1p(), self.q.ln() + u)
        }
    }

    fn remove_inverse(&self, loss: f64) -> f64 {
        let u = if self.q == 1.0 { loss } else { (loss.exp_m1() + self.q).ln() - self.q.ln() };
        self.sigma * self.sigma * u + 0.5
    }
}

impl LossCurve for SubsampledGaussianLoss {
    fn loss(&self, x: f64) -> f64 {
        match self.direction {
            Direction::Remove => self.remove_loss(x),
            Direction::Add => -self.remove_loss(-x),
        }
    }

    fn inverse(&self, target: f64, lo: f64, hi: f64) -> f64 {
        let x = match self.direction {
            Direction::Remove => self.remove_inverse(target),
            Direction::Add => -self.remove_inverse(-target),
        };
        if x.is_nan() {
            lo
        } else {
            x.clamp(lo, hi)
        }
    }

    fn supremum(&self) -> f64 {
        match self.direction {
            Direction::Add if self.q < 1.0 => -(-self.q).ln_1p(),
            _ => f64::INFINITY,
        }
    }
}

/// Loss of the mixture-of-Gaussians mechanism, where the sensitivity is
/// `s` with probability `w_s`: `l(x) = ln Σ_s w_s e^{(2sx − s²)/(2σ²)}`.
/// Inverted numerically.
struct MixtureLoss {
    sigma: f64,
    /// `(s, ln w_s)` for every sensitivity with positive weight.
    terms: Vec<(f64, f64)>,
    direction: Direction,
}

impl MixtureLoss {
    /// Remove-direction loss and its derivative.
    fn remove_loss(&self, x: f64) -> (f64, f64) {
        let var = self.sigma * self.sigma;
        let exponent = |&(s, lw): &(f64, f64)| lw + (2.0 * s * x - s * s) / (2.0 * var);
        let top = self.terms.iter().map(exponent).fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut zs) = (0.0, 0.0);
        for t in &self.terms {
            let p = (exponent(t) - top).exp();
            z += p;
            zs += p * t.0;
        }
        (top + z.ln(), zs / z / var)
    }

    fn loss_and_slope(&self, x: f64) -> (f64, f64) {
        match self.direction {
            Direction::Remove => self.remove_loss(x),
            Direction::Add => {
                let (l, d) = self.remove_loss(-x);
                (-l, d)
            }
        }
    }
}

impl LossCurve for MixtureLoss {
    fn loss(&self, x: f64) -> f64 {
        self.loss_and_slope(x).0
    }

    fn inverse(&self, target: f64, mut lo: f64, mut hi: f64) -> f64 {
        // Safeguarded Newton, warm-started at the lower bracket end.
        let mut x = lo;
        for _ in 0..200 {
            let (l, d) = self.loss_and_slope(x);
            let f = l - target;
            if f == 0.0 {
                return x;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let mut next = if d > 0.0 { x - f / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-14 * (1.0 + x.abs()) || hi - lo <= 1e-14 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }

    fn supremum(&self) -> f64 {
        match self.direction {
            Direction::Remove => f64::INFINITY,
            Direction::Add => match self.terms.iter().find(|t| t.0 == 0.0) {
                Some(&(_, ln_w0)) => -ln_w0,
                None => f64::INFINITY,
            },
        }
    }
}

/// Buckets an increasing loss curve evaluated under `noise` onto the grid.
fn discretize(curve: &impl LossCurve, noise: &NoiseMixture, disc: &Discretization) -> LossPmf {
    let delta = disc.grid_spacing;
    let pessimistic = disc.rounding == Rounding::Pessimistic;
    let (mut x_lo, mut x_hi) = noise.range(disc.tail_mass);
    let mut l_lo = curve.loss(x_lo);
    let mut l_hi = curve.loss(x_hi);
    if l_hi > disc.max_loss {
        x_hi = curve.inverse(disc.max_loss, x_lo, x_hi);
        l_hi = disc.max_loss;
    }
    if l_lo < -disc.max_loss {
        x_lo = curve.inverse(-disc.max_loss, x_lo, x_hi);
        l_lo = -disc.max_loss;
    }
    let lower_tail = noise.cdf(x_lo);
    let upper_tail = noise.sf(x_hi);

    let bucket = |l: f64| if pessimistic { (l / delta).ceil() as i64 } else { (l / delta).floor() as i64 };
    let (first, last) = (bucket(l_lo), bucket(l_hi).max(bucket(l_lo)));
    // Bucket i collects losses in ((i-1)Δ, iΔ] when pessimistic and
    // [iΔ, (i+1)Δ) when optimistic; walk the interior boundaries in order.
    let shift = if pessimistic { 1 } else { 0 };
    let n = (last - first + 1) as usize;
    let mut masses = Vec::with_capacity(n + 1);
    // Each boundary's tail probability is shared by its two buckets.
    let mut left = (x_lo, noise.tail(x_lo));
    for i in first..=last {
        let x = if i == last {
            x_hi
        } else {
            let boundary = (i + 1 - shift) as f64 * delta;
            curve.inverse(boundary, left.0, x_hi).max(left.0)
        };
        let right = (x, noise.tail(x));
        masses.push(noise.interval_from_tails(left, right));
        left = right;
    }
    masses[0] += lower_tail;

    let mut pmf = LossPmf {
        grid_spacing: delta,
        offset: first,
        masses,
        infinity_mass: 0.0,
        rounding: disc.rounding,
    };
    let sup = curve.supremum();
    if !pessimistic {
        *pmf.masses.last_mut().expect("non-empty") += upper_tail;
    } else if sup.is_finite() && sup <= disc.max_loss {
        let idx = bucket(sup).max(last);
        pmf.masses.resize((idx - first + 1) as usize, 0.0);
        *pmf.masses.last_mut().expect("non-empty") += upper_tail;
    } else {
        pmf.infinity_mass += upper_tail;
    }
    pmf
}

/// Loss pmfs for both adjacency directions. `add` is `None` when the
/// mechanism is symmetric and the two coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLossDistribution {
    remove: LossPmf,
    add: Option<LossPmf>,
}

impl PrivacyLossDistribution {
    pub fn symmetric(pmf: LossPmf) -> Self {
        Self { remove: pmf, add: None }
    }

    pub fn from_directions(remove: LossPmf, add: LossPmf) -> Self {
        Self { remove, add: Some(add) }
    }

    pub fn remove(&self) -> &LossPmf {
        &self.remove
    }

    pub fn add(&self) -> &LossPmf {
        self.add.as_ref().unwrap_or(&self.remove)
    }

    pub fn is_symmetric(&self) -> bool {
        self.add.is_none()
    }

    pub fn grid_spacing(&self) -> f64 {
        self.remove.grid_spacing
    }

    pub fn rounding(&self) -> Rounding {
        self.remove.rounding
    }

    pub fn infinity_mass(&self) -> f64 {
        self.remove.infinity_mass.max(self.add().infinity_mass)
    }

    fn directions(&self) -> impl Iterator<Item = &LossPmf> {
        std::iter::once(&self.remove).chain(self.add.as_ref())
    }

    pub fn delta_for_epsilon(&self, epsilon: f64) -> f64 {
        self.directions().map(|p| p.delta_for_epsilon(epsilon)).fold(0.0, f64::max)
    }

    pub fn epsilon_for_delta(&self, delta: f64) -> Result<f64> {
        let mut eps: f64 = 0.0;
        for p in self.directions() {
            eps = eps.max(p.epsilon_for_delta(delta)?);
        }
        Ok(eps)
    }

    fn map_directions(
        &self,
        f: impl Fn(&LossPmf) -> Result<Option<LossPmf>> + Sync,
    ) -> Result<Option<Self>> {
        let remove = match f(&self.remove)? {
            Some(p) => p,
            None => return Ok(None),
        };
        let add = match &self.add {
            Some(a) => match f(a)? {
                Some(p) => Some(p),
                None => return Ok(None),
            },
            None => None,
        };
        Ok(Some(Self { remove, add }))
    }
}

fn check_mechanism(sigma: f64, q: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("noise multiplier {sigma} must be positive")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling probability {q} outside (0, 1]")));
    }
    Ok(())
}

/// One step of the Poisson-subsampled Gaussian mechanism (sensitivity 1,
/// noise multiplier `sigma`, sampling probability `q`).
pub fn gaussian_pld(sigma: f64, q: f64, disc: &Discretization) -> Result<PrivacyLossDistribution> {
    check_mechanism(sigma, q)?;
    disc.validate()?;
    let remove_noise = NoiseMixture::new(sigma, if q == 1.0 { vec![(1.0, 1.0)] } else { vec![(0.0, 1.0 - q), (1.0, q)] });
    let remove = discretize(&SubsampledGaussianLoss { sigma, q, direction: Direction::Remove }, &remove_noise, disc);
    if q == 1.0 {
        return Ok(PrivacyLossDistribution::symmetric(remove));
    }
    let add_noise = NoiseMixture::new(sigma, vec![(0.0, 1.0)]);
    let add = discretize(&SubsampledGaussianLoss { sigma, q, direction: Direction::Add }, &add_noise, disc);
    Ok(PrivacyLossDistribution::from_directions(remove, add))
}

/// One step of DP-SGD under removal or addition of `k` records: the
/// sensitivity is `Bin(k, q)` distributed.
pub fn mog_pld(sigma: f64, q: f64, k: u64, disc: &Discretization) -> Result<PrivacyLossDistribution> {
    check_mechanism(sigma, q)?;
    disc.validate()?;
    if k == 0 {
        return Err(Error::Domain("group size k must be at least 1".into()));
    }
    let terms: Vec<(f64, f64)> = (0..=k)
        .filter_map(|s| {
            let ln_w = if q == 1.0 {
                if s == k { 0.0 } else { f64::NEG_INFINITY }
            } else {
                ln_binomial(k, s) + s as f64 * q.ln() + (k - s) as f64 * (-q).ln_1p()
            };
            ln_w.is_finite().then_some((s as f64, ln_w))
        })
        .collect();
    let remove_noise =
        NoiseMixture::new(sigma, terms.iter().map(|&(s, lw)| (s, lw.exp())).collect());
    let remove = discretize(
        &MixtureLoss { sigma, terms: terms.clone(), direction: Direction::Remove },
        &remove_noise,
        disc,
    );
    if q == 1.0 {
        return Ok(PrivacyLossDistribution::symmetric(remove));
    }
    let add_noise = NoiseMixture::new(sigma, vec![(0.0, 1.0)]);
    let add = discretize(&MixtureLoss { sigma, terms, direction: Direction::Add }, &add_noise, disc);
    Ok(PrivacyLossDistribution::from_directions(remove, add))
}

/// `times`-fold self-composition.
pub fn compose(pld: &PrivacyLossDistribution, times: u64) -> Result<PrivacyLossDistribution> {
    compose_with(pld, times, &Discretization::with_grid(pld.grid_spacing()).with_rounding(pld.rounding()))
}

impl Discretization {
    pub fn with_rounding(self, rounding: Rounding) -> Self {
        Self { rounding, ..self }
    }
}

pub fn compose_with(
    pld: &PrivacyLossDistribution,
    times: u64,
    disc: &Discretization,
) -> Result<PrivacyLossDistribution> {
    if times == 0 {
        return Err(Error::Domain("composition count must be at least 1".into()));
    }
    Ok(pld
        .map_directions(|p| p.self_compose(times, disc).map(Some))?
        .expect("never abandoned"))
}

/// Composition that is abandoned once some partial result already needs more
/// than `epsilon` at `delta` (or cannot reach `delta` at all).
pub(crate) fn compose_within(
    pld: &PrivacyLossDistribution,
    times: u64,
    disc: &Discretization,
    epsilon: f64,
    delta: f64,
) -> Result<Option<PrivacyLossDistribution>> {
    let exceeded = |p: &LossPmf| match p.epsilon_for_delta(delta) {
        Ok(e) => e > epsilon,
        Err(_) => true,
    };
    if pld.directions().any(exceeded) {
        return Ok(None);
    }
    pld.map_directions(|p| p.self_compose_until(times, disc, exceeded))
}
