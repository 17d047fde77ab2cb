//! Continuous control paths built from irregular observations.
//!
//! Each channel is interpolated by its own natural cubic spline over the
//! timestamps where that channel was observed, so missing cells never need
//! imputation. Outside a channel's own knots (but inside the path domain) the
//! spline continues linearly, which keeps the path C² because the natural
//! boundary has zero curvature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One irregularly sampled multivariate series.
///
/// `values` is row-major: one row per timestamp, one cell per channel, `None`
/// marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries<T> {
    times: Vec<T>,
    values: Vec<Vec<Option<T>>>,
    channel_names: Option<Vec<String>>,
}

impl<T: Scalar> TimeSeries<T> {
    pub fn new(times: Vec<T>, values: Vec<Vec<Option<T>>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Validation(format!(
                "a series needs at least 2 observations, got {}",
                times.len()
            )));
        }
        if times.len() != values.len() {
            return Err(Error::Validation(format!(
                "{} timestamps but {} value rows",
                times.len(),
                values.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Validation("non-finite timestamp".into()));
        }
        if let Some(w) = times.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "timestamps must be strictly increasing (index {})",
                w + 1
            )));
        }
        let d = values[0].len();
        if d == 0 {
            return Err(Error::Validation("series has no channels".into()));
        }
        if values.iter().any(|row| row.len() != d) {
            return Err(Error::Validation("ragged value rows".into()));
        }
        Ok(Self {
            times,
            values,
            channel_names: None,
        })
    }

    /// Fully observed series from dense rows.
    pub fn from_dense(times: Vec<T>, rows: Vec<Vec<T>>) -> Result<Self> {
        let values = rows
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        Self::new(times, values)
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::Validation(format!(
                "{} channel names for {} channels",
                names.len(),
                self.dim()
            )));
        }
        self.channel_names = Some(names);
        Ok(self)
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<Option<T>>] {
        &self.values
    }

    pub fn channel_names(&self) -> Option<&[String]> {
        self.channel_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of channels `D`.
    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Observed `(t, x)` pairs of one channel.
    pub fn channel(&self, c: usize) -> (Vec<T>, Vec<T>) {
        self.times
            .iter()
            .zip(&self.values)
            .filter_map(|(&t, row)| row[c].map(|v| (t, v)))
            .unzip()
    }

}

/// Value, first and second derivative of `a + b·s + c·s² + d·s³`.
#[inline]
pub fn cubic_eval<T: Scalar>(coef: &[T; 4], s: T) -> [T; 3] {
    let [a, b, c, d] = *coef;
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let six = T::lit(6.0);
    [
        a + s * (b + s * (c + s * d)),
        b + s * (two * c + three * d * s),
        two * c + six * d * s,
    ]
}

/// Natural cubic spline of a single channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpline<T> {
    knots: Vec<T>,
    /// `(a, b, c, d)` per interval, in the local coordinate `s = t - knots[i]`.
    coeffs: Vec<[T; 4]>,
    /// Slope at the last knot, used for linear continuation to the right.
    end_slope: T,
    end_value: T,
}

impl<T: Scalar> ChannelSpline<T> {
    /// Fit a natural cubic spline through `(knots[i], values[i])`.
    pub fn fit(knots: &[T], values: &[T]) -> Result<Self> {
        let n = knots.len();
        if n < 2 {
            return Err(Error::Construction(format!(
                "need at least 2 observed points per channel, got {n}"
            )));
        }
        if values.len() != n {
            return Err(Error::Validation("knots and values differ in length".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("knots must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Construction("non-finite observation".into()));
        }

        let h: Vec<T> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let slope: Vec<T> = (0..n - 1).map(|i| (values[i + 1] - values[i]) / h[i]).collect();

        // c_i = S''(t_i) / 2; natural boundary pins c_0 = c_{n-1} = 0.
        let mut c = vec![T::zero(); n];
        if n > 2 {
            let m = n - 2;
            let two = T::lit(2.0);
            let three = T::lit(3.0);
            let mut diag = Vec::with_capacity(m);
            let mut upper = Vec::with_capacity(m);
            let mut lower = Vec::with_capacity(m);
            let mut rhs = Vec::with_capacity(m);
            for i in 1..n - 1 {
                lower.push(h[i - 1]);
                diag.push(two * (h[i - 1] + h[i]));
                upper.push(h[i]);
                rhs.push(three * (slope[i] - slope[i - 1]));
            }
            let sol = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
            c[1..n - 1].copy_from_slice(&sol);
        }

        let three = T::lit(3.0);
        let two = T::lit(2.0);
        let coeffs: Vec<[T; 4]> = (0..n - 1)
            .map(|i| {
                let b = slope[i] - h[i] * (two * c[i] + c[i + 1]) / three;
                let d = (c[i + 1] - c[i]) / (three * h[i]);
                [values[i], b, c[i], d]
            })
            .collect();
        let last = coeffs[n - 2];
        let end_slope = cubic_eval(&last, h[n - 2])[1];

        Ok(Self {
            knots: knots.to_vec(),
            coeffs,
            end_slope,
            end_value: values[n - 1],
        })
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn coeffs(&self) -> &[[T; 4]] {
        &self.coeffs
    }

    /// `[value, first derivative, second derivative]` at `t`.
    pub fn eval_all(&self, t: T) -> [T; 3] {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if t < first {
            let [a, b, _, _] = self.coeffs[0];
            return [a + b * (t - first), b, T::zero()];
        }
        if t > last {
            return [self.end_value + self.end_slope * (t - last), self.end_slope, T::zero()];
        }
        let i = self
            .knots
            .partition_point(|&k| k <= t)
            .saturating_sub(1)
            .min(self.coeffs.len() - 1);
        cubic_eval(&self.coeffs[i], t - self.knots[i])
    }
}

/// Thomas algorithm for a tridiagonal system; `lower[0]` and `upper[m-1]` are ignored.
pub fn solve_tridiagonal<T: Scalar>(lower: &[T], diag: &[T], upper: &[T], rhs: &[T]) -> Result<Vec<T>> {
    let m = diag.len();
    let mut cp = vec![T::zero(); m];
    let mut dp = vec![T::zero(); m];
    let mut denom = diag[0];
    if denom == T::zero() {
        return Err(Error::Construction("singular tridiagonal system".into()));
    }
    cp[0] = upper[0] / denom;
    dp[0] = rhs[0] / denom;
    for i in 1..m {
        denom = diag[i] - lower[i] * cp[i - 1];
        if denom == T::zero() {
            return Err(Error::Construction("singular tridiagonal system".into()));
        }
        cp[i] = upper[i] / denom;
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / denom;
    }
    let mut x = dp;
    for i in (0..m - 1).rev() {
        x[i] = x[i] - cp[i] * x[i + 1];
    }
    Ok(x)
}

/// A continuous control `X(t)` with an analytic derivative.
pub trait ControlPath<T: Scalar> {
    fn channels(&self) -> usize;

    /// Closed interval on which the path is defined.
    fn domain(&self) -> (T, T);

    fn value_into(&self, t: T, out: &mut [T]) -> Result<()>;

    fn derivative_into(&self, t: T, out: &mut [T]) -> Result<()>;

    /// Times where the path's pieces join, including both domain ends.
    fn breakpoints(&self) -> Vec<T> {
        let (lo, hi) = self.domain();
        vec![lo, hi]
    }

    /// Value and derivative together; overridden when a single lookup serves both.
    fn value_and_derivative(&self, t: T, value: &mut [T], deriv: &mut [T]) -> Result<()> {
        self.value_into(t, value)?;
        self.derivative_into(t, deriv)
    }
}

/// The identity control `X(t) = t` on a fixed interval.
#[derive(Debug, Clone, Copy)]
pub struct IdentityControl<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> ControlPath<T> for IdentityControl<T> {
    fn channels(&self) -> usize {
        1
    }

    fn domain(&self) -> (T, T) {
        (self.lo, self.hi)
    }

    fn value_into(&self, t: T, out: &mut [T]) -> Result<()> {
        out[0] = t;
        Ok(())
    }

    fn derivative_into(&self, _t: T, out: &mut [T]) -> Result<()> {
        out[0] = T::one();
        Ok(())
    }
}

/// Piecewise-cubic control path, one natural spline per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplinePath<T> {
    channels: Vec<ChannelSpline<T>>,
    domain: (T, T),
    breakpoints: Vec<T>,
    time_augmented: bool,
    clamp: bool,
}

impl<T: Scalar> SplinePath<T> {
    pub fn channel(&self, c: usize) -> &ChannelSpline<T> {
        &self.channels[c]
    }

    pub fn is_time_augmented(&self) -> bool {
        self.time_augmented
    }

    /// Switch between erroring (default) and clamping for times outside the domain.
    /// When clamping, the value freezes at the nearest end and the derivative is zero.
    pub fn with_clamp(mut self, clamp: bool) -> Self {
        self.clamp = clamp;
        self
    }

    fn locate(&self, t: T) -> Result<Option<T>> {
        let (lo, hi) = self.domain;
        if t >= lo && t <= hi {
            return Ok(Some(t));
        }
        if self.clamp && !t.is_nan() {
            return Ok(None);
        }
        Err(Error::Domain {
            t: t.to_f64_lossy(),
            lo: lo.to_f64_lossy(),
            hi: hi.to_f64_lossy(),
        })
    }

    fn clamp_time(&self, t: T) -> T {
        t.max(self.domain.0).min(self.domain.1)
    }

    pub fn eval(&self, t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.channels.len()];
        self.value_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_derivative(&self, t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.channels.len()];
        self.derivative_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_second_derivative(&self, t: T) -> Result<Vec<T>> {
        match self.locate(t)? {
            Some(t) => Ok(self.channels.iter().map(|c| c.eval_all(t)[2]).collect()),
            None => Ok(vec![T::zero(); self.channels.len()]),
        }
    }
}

impl<T: Scalar> ControlPath<T> for SplinePath<T> {
    fn channels(&self) -> usize {
        self.channels.len()
    }

    fn domain(&self) -> (T, T) {
        self.domain
    }

    fn value_into(&self, t: T, out: &mut [T]) -> Result<()> {
        let t = match self.locate(t)? {
            Some(t) => t,
            None => self.clamp_time(t),
        };
        for (o, c) in out.iter_mut().zip(&self.channels) {
            *o = c.eval_all(t)[0];
        }
        Ok(())
    }

    fn derivative_into(&self, t: T, out: &mut [T]) -> Result<()> {
        match self.locate(t)? {
            Some(t) => {
                for (o, c) in out.iter_mut().zip(&self.channels) {
                    *o = c.eval_all(t)[1];
                }
            }
            None => out.iter_mut().for_each(|o| *o = T::zero()),
        }
        Ok(())
    }

    fn value_and_derivative(&self, t: T, value: &mut [T], deriv: &mut [T]) -> Result<()> {
        match self.locate(t)? {
            Some(t) => {
                for ((v, d), c) in value.iter_mut().zip(deriv.iter_mut()).zip(&self.channels) {
                    let [x, dx, _] = c.eval_all(t);
                    *v = x;
                    *d = dx;
                }
            }
            None => {
                let t = self.clamp_time(t);
                for ((v, d), c) in value.iter_mut().zip(deriv.iter_mut()).zip(&self.channels) {
                    *v = c.eval_all(t)[0];
                    *d = T::zero();
                }
            }
        }
        Ok(())
    }

    fn breakpoints(&self) -> Vec<T> {
        self.breakpoints.clone()
    }
}

/// Build the control path of a series.
///
/// With `time_augment`, channel 0 of the path is `t` itself and the series'
/// channels follow in order.
pub fn fit_natural_cubic_spline<T: Scalar>(series: &TimeSeries<T>, time_augment: bool) -> Result<SplinePath<T>> {
    let times = series.times();
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("timestamps must be strictly increasing".into()));
    }
    let lo = times[0];
    let hi = times[times.len() - 1];
    let mut channels = Vec::with_capacity(series.dim() + usize::from(time_augment));
    if time_augment {
        channels.push(ChannelSpline {
            knots: vec![lo, hi],
            coeffs: vec![[lo, T::one(), T::zero(), T::zero()]],
            end_slope: T::one(),
            end_value: hi,
        });
    }
    for c in 0..series.dim() {
        let (k, v) = series.channel(c);
        let spline = ChannelSpline::fit(&k, &v).map_err(|e| match e {
            Error::Construction(msg) => Error::Construction(format!("channel {c}: {msg}")),
            other => other,
        })?;
        channels.push(spline);
    }

    let mut breakpoints: Vec<T> = channels.iter().flat_map(|c| c.knots.iter().copied()).collect();
    breakpoints.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
    breakpoints.dedup();

    Ok(SplinePath {
        channels,
        domain: (lo, hi),
        breakpoints,
        time_augmented: time_augment,
        clamp: false,
    })
}
