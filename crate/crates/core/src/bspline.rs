//! Uniform B-spline activations with learnable control points.
//!
//! A grid with `k` control points of degree `d` carries `n = k + d + 1`
//! uniformly spaced knots `t_0 < … < t_{n-1}`. The spline
//! `B(x) = Σ_i c_i N_{i,d}(x)` is evaluated on the interior domain
//! `[t_d, t_{n-d-1}]`, where the basis forms a partition of unity.
//!
//! Control points are stored per channel as a `[channels × k]` tensor leaf so
//! the optimizer can train them. Knots are structural: [`SplineGrid::extend`]
//! widens the domain by 25% steps and refits the control points, and is never
//! differentiated through.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of dense samples over the old domain used when refitting.
pub const REFIT_SAMPLES: usize = 512;
/// Samples per extended side that anchor the refit to the old boundary value.
const ANCHOR_SAMPLES: usize = 64;
const ANCHOR_WEIGHT: f64 = 0.01;
/// Amplitude of the uniform noise added to the identity initialization.
pub const INIT_NOISE: f64 = 0.05;
/// Highest supported spline degree.
pub const MAX_DEGREE: usize = 7;

#[derive(Debug, Clone)]
pub struct SplineGrid {
    degree: usize,
    knots: Vec<f64>,
    control: Tensor,
}

/// Nonzero basis values at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisValues {
    /// `N_{i,d}(x)` for every control index `i`.
    pub values: Vec<f64>,
    /// Indices whose basis functions may be nonzero at `x`.
    pub active_span: Range<usize>,
}

/// Grid with identity-fit control points plus uniform noise in `[-0.05, 0.05]`.
pub fn make_grid<R: Rng + ?Sized>(
    control_count: usize,
    degree: usize,
    lo: f64,
    hi: f64,
    channels: usize,
    rng: &mut R,
) -> Result<SplineGrid> {
    let grid = SplineGrid::identity(control_count, degree, lo, hi, channels)?;
    let noisy: Vec<f64> = grid
        .control
        .data()
        .iter()
        .map(|c| c + rng.gen_range(-INIT_NOISE..=INIT_NOISE))
        .collect();
    grid.with_control(noisy)
}

fn uniform_knots(control_count: usize, degree: usize, lo: f64, hi: f64) -> Vec<f64> {
    let n = control_count + degree + 1;
    let h = (hi - lo) / (control_count - degree) as f64;
    (0..n)
        .map(|j| lo + (j as f64 - degree as f64) * h)
        .collect()
}

impl SplineGrid {
    /// Grid whose control points reproduce `f(x) = x` on every channel.
    pub fn identity(
        control_count: usize,
        degree: usize,
        lo: f64,
        hi: f64,
        channels: usize,
    ) -> Result<SplineGrid> {
        if degree > MAX_DEGREE {
            return Err(Error::Config(format!(
                "degree {degree} exceeds {MAX_DEGREE}"
            )));
        }
        if control_count <= degree {
            return Err(Error::Config(format!(
                "need more control points ({control_count}) than the degree ({degree})"
            )));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid domain [{lo}, {hi}]")));
        }
        if channels == 0 {
            return Err(Error::Config(
                "spline grid needs at least one channel".into(),
            ));
        }
        let knots = uniform_knots(control_count, degree, lo, hi);
        let greville = greville_abscissae(&knots, degree, control_count);
        let control: Vec<f64> = (0..channels)
            .flat_map(|_| greville.iter().copied())
            .collect();
        Ok(SplineGrid {
            degree,
            knots,
            control: Tensor::param(control, &[channels, control_count])?,
        })
    }

    /// Same knots, new control values (`channels × k`, row-major).
    pub fn with_control(&self, values: Vec<f64>) -> Result<SplineGrid> {
        let shape = self.control.shape().to_vec();
        Ok(SplineGrid {
            degree: self.degree,
            knots: self.knots.clone(),
            control: Tensor::param(values, &shape)?,
        })
    }

    /// Rebuilds a grid from serialized parts.
    pub fn from_parts(degree: usize, knots: Vec<f64>, control: Tensor) -> Result<SplineGrid> {
        if control.rank() != 2 || knots.len() != control.shape()[1] + degree + 1 {
            return Err(Error::Format(format!(
                "{} knots inconsistent with control shape {:?} at degree {degree}",
                knots.len(),
                control.shape()
            )));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Format("knots must be strictly ascending".into()));
        }
        let control = if control.requires_grad() {
            control
        } else {
            Tensor::param(control.data().to_vec(), control.shape())?
        };
        Ok(SplineGrid {
            degree,
            knots,
            control,
        })
    }

    /// Copy whose control points are constants, for inference without a tape.
    pub fn detached(&self) -> SplineGrid {
        SplineGrid {
            degree: self.degree,
            knots: self.knots.clone(),
            control: self.control.detach(),
        }
    }

    pub(crate) fn control_mut(&mut self) -> &mut Tensor {
        &mut self.control
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn control_count(&self) -> usize {
        self.control.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.control.shape()[0]
    }

    /// Learnable `[channels × k]` control points.
    pub fn control(&self) -> &Tensor {
        &self.control
    }

    pub fn set_control(&mut self, control: Tensor) -> Result<()> {
        if control.shape() != self.control.shape() {
            return Err(Error::Dimension(format!(
                "control shape {:?}, expected {:?}",
                control.shape(),
                self.control.shape()
            )));
        }
        self.control = control;
        Ok(())
    }

    pub fn domain(&self) -> (f64, f64) {
        let n = self.knots.len();
        (self.knots[self.degree], self.knots[n - self.degree - 1])
    }

    fn check(&self, x: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if x.is_finite() && x >= lo && x <= hi {
            Ok(())
        } else {
            Err(Error::OutOfDomain { value: x, lo, hi })
        }
    }

    /// Knot span `s` with `t_s ≤ x < t_{s+1}`, clamped to the interior.
    fn span(&self, x: f64) -> usize {
        let n = self.knots.len();
        let last = n - self.degree - 2;
        let s = self.knots.partition_point(|&t| t <= x).saturating_sub(1);
        s.clamp(self.degree, last)
    }

    /// All basis values at `x`.
    pub fn basis_eval(&self, x: f64) -> Result<BasisValues> {
        self.check(x)?;
        let k = self.control_count();
        let s = self.span(x);
        let local = basis_funs(&self.knots, self.degree, s, x);
        let mut values = vec![0.0; k];
        values[s - self.degree..=s].copy_from_slice(&local);
        Ok(BasisValues {
            values,
            active_span: s - self.degree..s + 1,
        })
    }

    /// Scalar spline value for one channel.
    pub fn value_at(&self, channel: usize, x: f64) -> Result<f64> {
        self.check(x)?;
        Ok(self.value_unchecked(channel, x))
    }

    fn value_unchecked(&self, channel: usize, x: f64) -> f64 {
        let k = self.control_count();
        let c = &self.control.data()[channel * k..(channel + 1) * k];
        let s = self.span(x);
        let mut local = [0.0; MAX_DEGREE + 1];
        basis_into(&self.knots, self.degree, s, x, &mut local);
        (0..=self.degree)
            .map(|j| local[j] * c[s - self.degree + j])
            .sum()
    }

    /// Elementwise `B(x)`, differentiable in `x` and the control points.
    ///
    /// A single-channel grid applies to every element; otherwise axis 1 of `x`
    /// selects the channel.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = x.data().iter().find(|v| self.check(**v).is_err()) {
            let (lo, hi) = self.domain();
            return Err(Error::OutOfDomain { value: bad, lo, hi });
        }
        spline_op(self, x, false)
    }

    /// Like [`eval`](Self::eval) but clamps inputs to the domain, which
    /// extends the spline as a constant beyond its ends.
    pub fn eval_clamped(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = x.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite spline input {bad}")));
        }
        spline_op(self, x, true)
    }

    /// Whether `[observed_min, observed_max]` lies inside the domain.
    pub fn covers(&self, observed_min: f64, observed_max: f64) -> bool {
        let (lo, hi) = self.domain();
        observed_min >= lo && observed_max <= hi
    }

    /// Widens the violated side(s) by 25% of the current domain width until the
    /// observed range is covered, re-spaces the knots uniformly and refits the
    /// control points by least squares against the old spline.
    pub fn extend(&self, observed_min: f64, observed_max: f64) -> Result<SplineGrid> {
        if !observed_min.is_finite() || !observed_max.is_finite() {
            return Err(Error::Input(format!(
                "non-finite observed range [{observed_min}, {observed_max}]"
            )));
        }
        if self.covers(observed_min, observed_max) {
            return Ok(self.clone());
        }
        let (old_lo, old_hi) = self.domain();
        let (mut lo, mut hi) = (old_lo, old_hi);
        while observed_min < lo || observed_max > hi {
            let width = hi - lo;
            if observed_min < lo {
                lo -= 0.25 * width;
            }
            if observed_max > hi {
                hi += 0.25 * width;
            }
        }
        let k = self.control_count();
        let knots = uniform_knots(k, self.degree, lo, hi);
        let fresh = SplineGrid::from_parts(
            self.degree,
            knots,
            Tensor::new(vec![0.0; self.control.numel()], self.control.shape())?,
        )?;

        let mut xs: Vec<(f64, f64)> = (0..REFIT_SAMPLES)
            .map(|i| {
                let t = i as f64 / (REFIT_SAMPLES - 1) as f64;
                (old_lo + t * (old_hi - old_lo), 1.0)
            })
            .collect();
        if lo < old_lo {
            xs.extend((1..=ANCHOR_SAMPLES).map(|i| {
                (
                    old_lo - (old_lo - lo) * i as f64 / ANCHOR_SAMPLES as f64,
                    ANCHOR_WEIGHT,
                )
            }));
        }
        if hi > old_hi {
            xs.extend((1..=ANCHOR_SAMPLES).map(|i| {
                (
                    old_hi + (hi - old_hi) * i as f64 / ANCHOR_SAMPLES as f64,
                    ANCHOR_WEIGHT,
                )
            }));
        }
        let channels = self.channels();
        let design = DMatrix::from_fn(xs.len(), k, |r, c| {
            let (x, w) = xs[r];
            w * fresh
                .basis_eval(x.clamp(lo, hi))
                .expect("inside new domain")
                .values[c]
        });
        let targets = DMatrix::from_fn(xs.len(), channels, |r, ch| {
            let (x, w) = xs[r];
            w * self.value_unchecked(ch, x.clamp(old_lo, old_hi))
        });
        let solution = design
            .svd(true, true)
            .solve(&targets, 1e-12)
            .map_err(|e| Error::Numeric(format!("spline refit failed: {e}")))?;
        let mut control = vec![0.0; channels * k];
        for ch in 0..channels {
            for i in 0..k {
                control[ch * k + i] = solution[(i, ch)];
            }
        }
        fresh.with_control(control)
    }
}

/// `ξ_i = (t_{i+1} + … + t_{i+d}) / d`; control points at these abscissae
/// reproduce linear functions exactly.
pub fn greville_abscissae(knots: &[f64], degree: usize, control_count: usize) -> Vec<f64> {
    (0..control_count)
        .map(|i| {
            if degree == 0 {
                0.5 * (knots[i] + knots[i + 1])
            } else {
                knots[i + 1..=i + degree].iter().sum::<f64>() / degree as f64
            }
        })
        .collect()
}

/// Nonzero basis values `N_{s-p..=s, p}(x)` by the triangular Cox–de Boor
/// scheme, written into `out[..=p]`.
pub(crate) fn basis_into(knots: &[f64], p: usize, s: usize, x: f64, out: &mut [f64]) {
    let mut left = [0.0; MAX_DEGREE + 1];
    let mut right = [0.0; MAX_DEGREE + 1];
    out[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[s + 1 - j];
        right[j] = knots[s + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        out[j] = saved;
    }
}

pub(crate) fn basis_funs(knots: &[f64], p: usize, s: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; p + 1];
    basis_into(knots, p, s, x, &mut out);
    out
}

type Local = [f64; MAX_DEGREE + 1];

/// Values and first derivatives of the nonzero degree-`p` basis functions.
fn basis_with_derivative(knots: &[f64], p: usize, s: usize, x: f64) -> (Local, Local) {
    let mut values = [0.0; MAX_DEGREE + 1];
    basis_into(knots, p, s, x, &mut values);
    let mut deriv = [0.0; MAX_DEGREE + 1];
    if p > 0 {
        let mut lower = [0.0; MAX_DEGREE + 1];
        basis_into(knots, p - 1, s, x, &mut lower);
        let pf = p as f64;
        for j in 0..=p {
            let i = s - p + j;
            let mut d = 0.0;
            if j >= 1 {
                d += lower[j - 1] / (knots[i + p] - knots[i]);
            }
            if j < p {
                d -= lower[j] / (knots[i + p + 1] - knots[i + 1]);
            }
            deriv[j] = pf * d;
        }
    }
    (values, deriv)
}

fn channel_index(grid: &SplineGrid, x: &Tensor) -> Result<impl Fn(usize) -> usize> {
    let channels = grid.channels();
    let inner: usize = if channels == 1 {
        usize::MAX
    } else {
        if x.rank() < 2 || x.shape()[1] != channels {
            return Err(Error::Dimension(format!(
                "spline has {channels} channels, input shape {:?}",
                x.shape()
            )));
        }
        x.shape()[2..].iter().product()
    };
    Ok(move |i: usize| {
        if inner == usize::MAX {
            0
        } else {
            (i / inner) % channels
        }
    })
}

fn spline_op(grid: &SplineGrid, x: &Tensor, clamp: bool) -> Result<Tensor> {
    let channel_of = channel_index(grid, x)?;
    let (lo, hi) = grid.domain();
    let k = grid.control_count();
    let p = grid.degree;
    let knots = grid.knots.clone();
    let c = grid.control.data();
    let mut out = vec![0.0; x.numel()];
    for (i, (o, &v)) in out.iter_mut().zip(x.data()).enumerate() {
        let v = if clamp { v.clamp(lo, hi) } else { v };
        let s = grid.span(v);
        let ch = channel_of(i);
        let mut local = [0.0; MAX_DEGREE + 1];
        basis_into(&knots, p, s, v, &mut local);
        *o = (0..=p).map(|j| local[j] * c[ch * k + s - p + j]).sum();
    }
    let xc = x.clone();
    let cc = grid.control.clone();
    let g2 = grid.clone();
    Ok(Tensor::from_op(
        "spline",
        out,
        x.shape().to_vec(),
        &[x, &grid.control],
        move |g| {
            let need_x = xc.requires_grad();
            let need_c = cc.requires_grad();
            let c = cc.data();
            let mut gx = need_x.then(|| vec![0.0; g.len()]);
            let mut gc = need_c.then(|| vec![0.0; c.len()]);
            for (i, &v) in xc.data().iter().enumerate() {
                let inside = v >= lo && v <= hi;
                let v = v.clamp(lo, hi);
                let s = g2.span(v);
                let ch = channel_of(i);
                let (vals, ders) = basis_with_derivative(&knots, p, s, v);
                if let Some(gx) = gx.as_mut() {
                    if inside || !clamp {
                        gx[i] = g[i]
                            * (0..=p)
                                .map(|j| ders[j] * c[ch * k + s - p + j])
                                .sum::<f64>();
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    for j in 0..=p {
                        gc[ch * k + s - p + j] += g[i] * vals[j];
                    }
                }
            }
            vec![gx, gc]
        },
    ))
}
