//! Double-double arithmetic (~106-bit significand) for high-precision
//! reference evaluation.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DD {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: DD = DD {
    hi: 6.931_471_805_599_452_862e-1,
    lo: 2.319_046_813_846_299_558e-17,
};

impl DD {
    pub const ZERO: DD = DD { hi: 0.0, lo: 0.0 };
    pub const ONE: DD = DD { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        DD { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        DD {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn is_positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return DD::ZERO;
        }
        let q = DD::new(self.hi.sqrt());
        let r = self - q * q;
        q + DD::new(r.hi / (2.0 * q.hi))
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return DD::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return DD::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * DD::new(k)).scale_pow2(-10);
        // Taylor series of e^r - 1 for |r| < 4e-4.
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = term * r / DD::new(n as f64);
            sum = sum + term;
        }
        // (1 + s)^2 - 1 = 2s + s^2, ten times.
        for _ in 0..10 {
            sum = sum + sum + sum * sum;
        }
        (sum + DD::ONE).scale_pow2(k as i32)
    }
}

impl Add for DD {
    type Output = DD;
    fn add(self, y: DD) -> DD {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        DD { hi, lo }
    }
}

impl Neg for DD {
    type Output = DD;
    fn neg(self) -> DD {
        DD {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DD {
    type Output = DD;
    fn sub(self, y: DD) -> DD {
        self + (-y)
    }
}

impl Mul for DD {
    type Output = DD;
    fn mul(self, y: DD) -> DD {
        let (p, e) = two_prod(self.hi, y.hi);
        let e = e + (self.hi * y.lo + self.lo * y.hi);
        let (hi, lo) = quick_two_sum(p, e);
        DD { hi, lo }
    }
}

impl Div for DD {
    type Output = DD;
    fn div(self, y: DD) -> DD {
        let q1 = self.hi / y.hi;
        let r = self - y * DD::new(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * DD::new(q2);
        let q3 = r.hi / y.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        DD { hi, lo } + DD::new(q3)
    }
}

#[test]
fn dd_elementary_functions_agree_with_f64() {
    for &x in &[-30.0, -3.5, -0.7, -1e-6, 0.0, 1e-9, 0.3, 1.0, 2.5, 17.0] {
        let e = DD::new(x).exp().to_f64();
        assert!((e - x.exp()).abs() <= 4.0 * f64::EPSILON * x.exp(), "exp({x})");
    }
    let two = DD::new(2.0).sqrt();
    assert!(((two * two) - DD::new(2.0)).abs().to_f64() < 1e-30);
    let third = DD::ONE / DD::new(3.0);
    assert!(((third * DD::new(3.0)) - DD::ONE).abs().to_f64() < 1e-30);
    // e^1 to ~32 digits: 2.71828182845904523536028747135266
    let e1 = DD::ONE.exp();
    assert_eq!(e1.hi, std::f64::consts::E);
    assert!((e1.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-30);
}
