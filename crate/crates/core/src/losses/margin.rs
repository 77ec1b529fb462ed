use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Hinge with an additive margin, or the softplus "soft margin".
///
/// Serialized as the string `"soft"` or the margin as a plain number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarginMode {
    Hard(f64),
    Soft,
}

impl MarginMode {
    pub fn hard(m: f64) -> Result<Self> {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::config(format!("margin must be a nonnegative real, got {m}")));
        }
        Ok(MarginMode::Hard(m))
    }

    /// `[m + x]_+` for a hard margin, `ln(1 + eˣ)` for the soft one.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            MarginMode::Hard(m) => (m + x).max(0.0),
            MarginMode::Soft => softplus(x),
        }
    }

    /// Derivative of [`apply`](Self::apply). The hinge kink takes the zero branch.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            MarginMode::Hard(m) => {
                if m + x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            MarginMode::Soft => sigmoid(x),
        }
    }

    /// Outer function of the lifted losses, whose margin sits inside the
    /// exponent: a plain hinge for hard mode, softplus for soft mode.
    #[inline]
    pub fn outer(self) -> MarginMode {
        match self {
            MarginMode::Hard(_) => MarginMode::Hard(0.0),
            MarginMode::Soft => MarginMode::Soft,
        }
    }

    /// Margin placed inside the lifted exponent. Soft mode uses none.
    #[inline]
    pub fn inner_margin(self) -> f64 {
        match self {
            MarginMode::Hard(m) => m,
            MarginMode::Soft => 0.0,
        }
    }

    pub fn is_soft(self) -> bool {
        matches!(self, MarginMode::Soft)
    }
}

pub fn margin_apply(x: f64, mode: MarginMode) -> f64 {
    mode.apply(x)
}

/// Overflow-safe `ln(1 + eˣ)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl std::str::FromStr for MarginMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("soft") {
            return Ok(MarginMode::Soft);
        }
        let m: f64 = s
            .parse()
            .map_err(|_| Error::Parse(format!("margin must be 'soft' or a number, got '{s}'")))?;
        MarginMode::hard(m)
    }
}

impl std::fmt::Display for MarginMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MarginMode::Hard(m) => write!(f, "{m}"),
            MarginMode::Soft => f.write_str("soft"),
        }
    }
}

impl Serialize for MarginMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MarginMode::Hard(m) => s.serialize_f64(*m),
            MarginMode::Soft => s.serialize_str("soft"),
        }
    }
}

impl<'de> Deserialize<'de> for MarginMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(m) => MarginMode::hard(m),
            Raw::Text(t) => t.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}
