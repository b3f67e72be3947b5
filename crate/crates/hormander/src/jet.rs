//! Forward-mode truncated Taylor arithmetic over `k` active variables.
//!
//! A [`Jet`] carries a value plus dense gradient, Hessian and third-derivative
//! tensors up to its order. Empty tensors stand for exact zeros, which keeps
//! constants (inactive increments, parameters) at `f64` cost.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Order tag for exact constants: every derivative is known to be zero.
pub const EXACT: u8 = u8::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    k: usize,
    order: u8,
    v: f64,
    g: Vec<f64>,
    h: Vec<f64>,
    t: Vec<f64>,
}

/// Scalar types that functionals can be evaluated on.
pub trait Scalar:
    Clone
    + Send
    + Sync
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(c: f64) -> Self;
    fn value(&self) -> f64;
    /// Applies a scalar function given its value and first three derivatives.
    fn unary(&self, f: [f64; 4]) -> Self;
    /// True when the value is an exact zero with no derivative content.
    fn is_zero_const(&self) -> bool {
        false
    }

    fn sin(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        self.unary([s, c, -s, -c])
    }
    fn cos(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        self.unary([c, -s, -c, s])
    }
    fn exp(&self) -> Self {
        let e = self.value().exp();
        self.unary([e; 4])
    }
    fn ln(&self) -> Self {
        let x = self.value();
        self.unary([x.ln(), 1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x)])
    }
    fn sqrt(&self) -> Self {
        let x = self.value();
        let s = x.sqrt();
        self.unary([s, 0.5 / s, -0.25 / (s * x), 0.375 / (s * x * x)])
    }
    fn recip(&self) -> Self {
        let x = self.value();
        let r = 1.0 / x;
        self.unary([r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r])
    }
    fn tanh(&self) -> Self {
        let th = self.value().tanh();
        let s = 1.0 - th * th;
        self.unary([th, s, -2.0 * th * s, s * (6.0 * th * th - 2.0)])
    }
    fn ln_cosh(&self) -> Self {
        let x = self.value();
        let th = x.tanh();
        let s = 1.0 - th * th;
        let lc = x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2;
        self.unary([lc, th, s, -2.0 * th * s])
    }
    fn square(&self) -> Self {
        self.clone() * self.clone()
    }
    fn powi(&self, n: i32) -> Self {
        let x = self.value();
        let nf = n as f64;
        self.unary([
            x.powi(n),
            nf * x.powi(n - 1),
            nf * (nf - 1.0) * x.powi(n - 2),
            nf * (nf - 1.0) * (nf - 2.0) * x.powi(n - 3),
        ])
    }
}

impl Scalar for f64 {
    fn cst(c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn unary(&self, f: [f64; 4]) -> Self {
        f[0]
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn recip(&self) -> Self {
        1.0 / *self
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn square(&self) -> Self {
        self * self
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
}

fn axpy(out: &mut Vec<f64>, a: f64, x: &[f64], len: usize) {
    if x.is_empty() || a == 0.0 {
        return;
    }
    if out.is_empty() {
        out.resize(len, 0.0);
    }
    for (o, &xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}

/// out += s * (x ⊗ y + y ⊗ x)
fn sym_outer(out: &mut Vec<f64>, s: f64, x: &[f64], y: &[f64], k: usize) {
    if x.is_empty() || y.is_empty() || s == 0.0 {
        return;
    }
    if out.is_empty() {
        out.resize(k * k, 0.0);
    }
    for i in 0..k {
        let (xi, yi) = (s * x[i], s * y[i]);
        if xi == 0.0 && yi == 0.0 {
            continue;
        }
        let row = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            row[j] += xi * y[j] + yi * x[j];
        }
    }
}

/// out += s * x ⊗ x
fn self_outer(out: &mut Vec<f64>, s: f64, x: &[f64], k: usize) {
    if x.is_empty() || s == 0.0 {
        return;
    }
    if out.is_empty() {
        out.resize(k * k, 0.0);
    }
    for i in 0..k {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        let row = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            row[j] += s * (xi * x[j]);
        }
    }
}

/// out_{ijl} += s * (h_{ij} g_l + h_{il} g_j + h_{jl} g_i)
fn sym_hg(out: &mut Vec<f64>, s: f64, h: &[f64], g: &[f64], k: usize) {
    if h.is_empty() || g.is_empty() || s == 0.0 {
        return;
    }
    if out.is_empty() {
        out.resize(k * k * k, 0.0);
    }
    for i in 0..k {
        for j in 0..k {
            let hij = s * h[i * k + j];
            let base = (i * k + j) * k;
            for l in 0..k {
                out[base + l] += hij * g[l] + s * (h[i * k + l] * g[j] + h[j * k + l] * g[i]);
            }
        }
    }
}

/// out_{ijl} += s * g_i g_j g_l
fn cube(out: &mut Vec<f64>, s: f64, g: &[f64], k: usize) {
    if g.is_empty() || s == 0.0 {
        return;
    }
    if out.is_empty() {
        out.resize(k * k * k, 0.0);
    }
    for i in 0..k {
        for j in 0..k {
            let gij = s * g[i] * g[j];
            if gij == 0.0 {
                continue;
            }
            let base = (i * k + j) * k;
            for l in 0..k {
                out[base + l] += gij * g[l];
            }
        }
    }
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Self { k: 0, order: EXACT, v, g: Vec::new(), h: Vec::new(), t: Vec::new() }
    }

    /// Independent variable `idx` of `k`, tracked up to `order`.
    pub fn var(v: f64, idx: usize, k: usize, order: u8) -> Self {
        assert!(idx < k);
        let mut g = Vec::new();
        if order >= 1 {
            g = vec![0.0; k];
            g[idx] = 1.0;
        }
        Self { k, order, v, g, h: Vec::new(), t: Vec::new() }
    }

    pub fn value(&self) -> f64 {
        self.v
    }
    pub fn order(&self) -> u8 {
        self.order
    }
    pub fn nvars(&self) -> usize {
        self.k
    }
    pub fn is_constant(&self) -> bool {
        self.g.is_empty() && self.h.is_empty() && self.t.is_empty()
    }

    pub fn grad(&self, i: usize) -> f64 {
        assert!(self.order >= 1, "gradient beyond tracked order");
        self.g.get(i).copied().unwrap_or(0.0)
    }
    pub fn hess(&self, i: usize, j: usize) -> f64 {
        assert!(self.order >= 2, "Hessian beyond tracked order");
        self.h.get(i * self.k + j).copied().unwrap_or(0.0)
    }
    pub fn third(&self, i: usize, j: usize, l: usize) -> f64 {
        assert!(self.order >= 3, "third derivative beyond tracked order");
        self.t.get((i * self.k + j) * self.k + l).copied().unwrap_or(0.0)
    }

    /// `∂_i` of the jet, one order lower.
    pub fn partial(&self, i: usize) -> Jet {
        assert!(self.order >= 1, "partial beyond tracked order");
        let k = self.k;
        let order = if self.order == EXACT { EXACT } else { self.order - 1 };
        let v = self.g.get(i).copied().unwrap_or(0.0);
        let g = if order >= 1 && !self.h.is_empty() { self.h[i * k..(i + 1) * k].to_vec() } else { Vec::new() };
        let h = if order >= 2 && !self.t.is_empty() { self.t[i * k * k..(i + 1) * k * k].to_vec() } else { Vec::new() };
        let mut out = Jet { k, order, v, g, h, t: Vec::new() };
        out.compact();
        out
    }

    /// Lowers the tracked order.
    pub fn truncate(mut self, order: u8) -> Jet {
        if order < self.order {
            self.order = order;
            if order < 3 {
                self.t.clear();
            }
            if order < 2 {
                self.h.clear();
            }
            if order < 1 {
                self.g.clear();
            }
        }
        self
    }

    fn compact(&mut self) {
        if self.g.iter().all(|&x| x == 0.0) {
            self.g.clear();
        }
        if self.h.iter().all(|&x| x == 0.0) {
            self.h.clear();
        }
        if self.t.iter().all(|&x| x == 0.0) {
            self.t.clear();
        }
    }

    fn with_shape(k: usize, order: u8, v: f64) -> Self {
        Self { k, order, v, g: Vec::new(), h: Vec::new(), t: Vec::new() }
    }

    fn add_scaled(&self, s: f64, o: &Jet, sign: f64) -> Jet {
        let k = self.k.max(o.k);
        let order = self.order.min(o.order);
        let mut r = Jet::with_shape(k, order, s * self.v + sign * o.v);
        if order >= 1 {
            axpy(&mut r.g, s, &self.g, k);
            axpy(&mut r.g, sign, &o.g, k);
        }
        if order >= 2 {
            axpy(&mut r.h, s, &self.h, k * k);
            axpy(&mut r.h, sign, &o.h, k * k);
        }
        if order >= 3 {
            axpy(&mut r.t, s, &self.t, k * k * k);
            axpy(&mut r.t, sign, &o.t, k * k * k);
        }
        r
    }

    fn scale(&self, s: f64) -> Jet {
        let mut r = self.clone();
        r.v *= s;
        for x in r.g.iter_mut().chain(r.h.iter_mut()).chain(r.t.iter_mut()) {
            *x *= s;
        }
        r
    }

    fn mul_jet(&self, o: &Jet) -> Jet {
        if o.is_constant() {
            return self.scale(o.v).with_order(self.order.min(o.order));
        }
        if self.is_constant() {
            return o.scale(self.v).with_order(self.order.min(o.order));
        }
        let k = self.k.max(o.k);
        let order = self.order.min(o.order);
        let (a, b) = (self, o);
        let mut r = Jet::with_shape(k, order, a.v * b.v);
        if order >= 1 {
            axpy(&mut r.g, a.v, &b.g, k);
            axpy(&mut r.g, b.v, &a.g, k);
        }
        if order >= 2 {
            axpy(&mut r.h, a.v, &b.h, k * k);
            axpy(&mut r.h, b.v, &a.h, k * k);
            sym_outer(&mut r.h, 1.0, &a.g, &b.g, k);
        }
        if order >= 3 {
            axpy(&mut r.t, a.v, &b.t, k * k * k);
            axpy(&mut r.t, b.v, &a.t, k * k * k);
            sym_hg(&mut r.t, 1.0, &a.h, &b.g, k);
            sym_hg(&mut r.t, 1.0, &b.h, &a.g, k);
        }
        r
    }

    fn with_order(mut self, order: u8) -> Jet {
        self.order = order;
        self
    }

    fn apply(&self, f: [f64; 4]) -> Jet {
        let k = self.k;
        let order = self.order;
        let mut r = Jet::with_shape(k, order, f[0]);
        if self.is_constant() {
            return r;
        }
        if order >= 1 {
            axpy(&mut r.g, f[1], &self.g, k);
        }
        if order >= 2 {
            axpy(&mut r.h, f[1], &self.h, k * k);
            self_outer(&mut r.h, f[2], &self.g, k);
        }
        if order >= 3 {
            axpy(&mut r.t, f[1], &self.t, k * k * k);
            sym_hg(&mut r.t, f[2], &self.h, &self.g, k);
            cube(&mut r.t, f[3], &self.g, k);
        }
        r
    }
}

impl Scalar for Jet {
    fn cst(c: f64) -> Self {
        Jet::constant(c)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn unary(&self, f: [f64; 4]) -> Self {
        self.apply(f)
    }
    fn is_zero_const(&self) -> bool {
        self.is_constant() && self.v == 0.0
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        self.add_scaled(1.0, &o, 1.0)
    }
}
impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self.add_scaled(1.0, &o, -1.0)
    }
}
impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        self.mul_jet(&o)
    }
}
impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        if o.is_constant() {
            return self.scale(1.0 / o.v).with_order(self.order.min(o.order));
        }
        self.mul_jet(&o.recip())
    }
}
impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}
impl<'a> Add<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn add(self, o: &Jet) -> Jet {
        self.add_scaled(1.0, o, 1.0)
    }
}
impl<'a> Sub<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn sub(self, o: &Jet) -> Jet {
        self.add_scaled(1.0, o, -1.0)
    }
}
impl<'a> Mul<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn mul(self, o: &Jet) -> Jet {
        self.mul_jet(o)
    }
}
impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, c: f64) -> Jet {
        self.v += c;
        self
    }
}
impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, c: f64) -> Jet {
        self.v -= c;
        self
    }
}
impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, c: f64) -> Jet {
        self.scale(c)
    }
}
impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, c: f64) -> Jet {
        self.scale(1.0 / c)
    }
}

/// Sum of jets without intermediate clones.
pub fn sum<S: Scalar>(items: impl IntoIterator<Item = S>) -> S {
    let mut it = items.into_iter();
    match it.next() {
        None => S::cst(0.0),
        Some(first) => it.fold(first, |a, b| a + b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Scalar>(x: &S, y: &S) -> S {
        (x.clone() * y.clone()).sin() + x.exp() / (y.clone() * y.clone() + 1.0)
    }

    #[test]
    fn matches_finite_differences() {
        let (x0, y0) = (0.3, -0.7);
        let x = Jet::var(x0, 0, 2, 3);
        let y = Jet::var(y0, 1, 2, 3);
        let j = f(&x, &y);
        let e = 1e-4;
        let fv = |a: f64, b: f64| f(&a, &b);
        let fx = (fv(x0 + e, y0) - fv(x0 - e, y0)) / (2.0 * e);
        let fxy = (fv(x0 + e, y0 + e) - fv(x0 + e, y0 - e) - fv(x0 - e, y0 + e) + fv(x0 - e, y0 - e)) / (4.0 * e * e);
        assert!((j.grad(0) - fx).abs() < 1e-7);
        assert!((j.hess(0, 1) - fxy).abs() < 1e-6);
        assert_eq!(j.hess(0, 1), j.hess(1, 0));
        // third derivative from differences of the Hessian
        let hx = |a: f64| f(&Jet::var(a, 0, 2, 2), &Jet::var(y0, 1, 2, 2)).hess(1, 1);
        let fxyy = (hx(x0 + e) - hx(x0 - e)) / (2.0 * e);
        assert!((j.third(0, 1, 1) - fxyy).abs() < 1e-6);
        assert!((j.third(0, 1, 1) - j.third(1, 0, 1)).abs() < 1e-14);
        assert!((j.third(0, 1, 1) - j.third(1, 1, 0)).abs() < 1e-14);
    }

    #[test]
    fn partial_lowers_order() {
        let x = Jet::var(2.0, 0, 1, 3);
        let c = x.clone() * x.clone() * x.clone();
        let d = c.partial(0);
        assert_eq!(d.value(), 12.0);
        assert_eq!(d.grad(0), 12.0);
        assert_eq!(d.hess(0, 0), 6.0);
        assert_eq!(d.order(), 2);
    }

    #[test]
    fn constants_stay_cheap() {
        let a = Jet::constant(2.0) * Jet::constant(3.0) + 1.0;
        assert!(a.is_constant());
        assert_eq!(a.value(), 7.0);
        assert_eq!(a.order(), EXACT);
    }
}
