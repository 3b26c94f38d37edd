use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The nine scoring functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Inner product.
    Lin,
    /// `-log(||w - h||^p + 1)`
    Log,
    /// `-||w - h||^p`
    Pow,
    /// `(alpha w.h + c)^p`
    Pol,
    /// `exp(-gamma ||w - h||^2)`
    Rbf,
    /// Log expected likelihood of two spherical Gaussians.
    Ssg,
    /// Pairwise log expected likelihoods of spherical Gaussian mixtures.
    Mog,
    /// Negative Poincaré-ball distance.
    Hpb,
    /// `cos(||w - h||^2 / a) exp(-||w - h||^2 / b)`
    Wav,
}

impl KernelKind {
    pub const ALL: [KernelKind; 9] = [
        KernelKind::Lin,
        KernelKind::Log,
        KernelKind::Pow,
        KernelKind::Pol,
        KernelKind::Rbf,
        KernelKind::Ssg,
        KernelKind::Mog,
        KernelKind::Hpb,
        KernelKind::Wav,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Lin => "lin",
            KernelKind::Log => "log",
            KernelKind::Pow => "pow",
            KernelKind::Pol => "pol",
            KernelKind::Rbf => "rbf",
            KernelKind::Ssg => "ssg",
            KernelKind::Mog => "mog",
            KernelKind::Hpb => "hpb",
            KernelKind::Wav => "wav",
        }
    }

    /// Kernels that depend on the arguments only through `||w - h||`
    /// (and, for `hpb`, their norms).
    pub fn is_distance_based(self) -> bool {
        matches!(
            self,
            KernelKind::Log | KernelKind::Pow | KernelKind::Rbf | KernelKind::Wav | KernelKind::Hpb
        )
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, KernelKind::Ssg | KernelKind::Mog)
    }

    fn uses(self, key: &str) -> bool {
        matches!(
            (self, key),
            (KernelKind::Log | KernelKind::Pow | KernelKind::Pol, "p")
                | (KernelKind::Pol, "alpha" | "c")
                | (KernelKind::Rbf, "gamma")
                | (KernelKind::Wav, "a" | "b")
                | (KernelKind::Ssg | KernelKind::Mog, "learn_var")
                | (KernelKind::Mog, "gauss" | "mog")
        )
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::KernelSpecParse {
                spec: s.to_string(),
                reason: "unknown kernel kind".into(),
            })
    }
}

/// How a `mog` kernel combines its `num_gauss²` pairwise overlaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MogMode {
    /// `sum_ij log ∫ N_i N_j`
    #[default]
    SumOfLogs,
    /// `log (1/G²) sum_ij ∫ N_i N_j`
    LogOfSum,
}

impl MogMode {
    fn name(self) -> &'static str {
        match self {
            MogMode::SumOfLogs => "sum-of-logs",
            MogMode::LogOfSum => "log-of-sum",
        }
    }
}

/// A kernel kind plus its hyperparameters.
///
/// `alpha` and `gamma` default to `1/d` and are resolved against the vector
/// dimension at use time. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec<T> {
    pub kind: KernelKind,
    pub p: T,
    pub alpha: Option<T>,
    pub c: T,
    pub gamma: Option<T>,
    pub a: T,
    pub b: T,
    pub num_gauss: usize,
    pub learn_variances: bool,
    pub mog_mode: MogMode,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            p: T::lit(2.0),
            alpha: None,
            c: T::one(),
            gamma: None,
            a: T::one(),
            b: T::one(),
            num_gauss: 2,
            learn_variances: true,
            mog_mode: MogMode::SumOfLogs,
        }
    }

    pub fn with_p(mut self, p: T) -> Self {
        self.p = p;
        self
    }

    pub fn with_alpha(mut self, alpha: T) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_c(mut self, c: T) -> Self {
        self.c = c;
        self
    }

    pub fn with_gamma(mut self, gamma: T) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_wavelet(mut self, a: T, b: T) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    pub fn with_num_gauss(mut self, g: usize) -> Self {
        self.num_gauss = g;
        self
    }

    pub fn with_mog_mode(mut self, mode: MogMode) -> Self {
        self.mog_mode = mode;
        self
    }

    pub fn with_learn_variances(mut self, learn: bool) -> Self {
        self.learn_variances = learn;
        self
    }

    pub fn alpha_for(&self, d: usize) -> T {
        self.alpha.unwrap_or_else(|| T::one() / T::from_count(d))
    }

    pub fn gamma_for(&self, d: usize) -> T {
        self.gamma.unwrap_or_else(|| T::one() / T::from_count(d))
    }

    /// Copy with `alpha` and `gamma` fixed to their values for dimension `d`.
    pub fn resolved(&self, d: usize) -> Self {
        Self {
            alpha: Some(self.alpha_for(d)),
            gamma: Some(self.gamma_for(d)),
            ..*self
        }
    }

    /// Degree of a `pol` kernel.
    pub(crate) fn degree(&self) -> i32 {
        self.p.round().to_i32().unwrap_or(1)
    }

    /// Checks the hyperparameters used by `kind`.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: T| {
            if v.is_finite() && v > T::zero() {
                Ok(())
            } else {
                Err(Error::InvalidHyperparameter {
                    name,
                    value: v.as_f64(),
                    reason: "must be positive and finite",
                })
            }
        };
        match self.kind {
            KernelKind::Log | KernelKind::Pow => positive("p", self.p)?,
            KernelKind::Pol => {
                positive("p", self.p)?;
                if self.p.fract() != T::zero() {
                    return Err(Error::InvalidHyperparameter {
                        name: "p",
                        value: self.p.as_f64(),
                        reason: "polynomial degree must be a positive integer",
                    });
                }
                let finite = |name, v: T| {
                    if v.is_finite() {
                        Ok(())
                    } else {
                        Err(Error::InvalidHyperparameter {
                            name,
                            value: v.as_f64(),
                            reason: "must be finite",
                        })
                    }
                };
                if let Some(alpha) = self.alpha {
                    finite("alpha", alpha)?;
                }
                finite("c", self.c)?;
            }
            KernelKind::Rbf => {
                if let Some(gamma) = self.gamma {
                    positive("gamma", gamma)?;
                }
            }
            KernelKind::Wav => {
                positive("a", self.a)?;
                positive("b", self.b)?;
            }
            KernelKind::Mog => {
                if self.num_gauss == 0 {
                    return Err(Error::InvalidHyperparameter {
                        name: "num_gauss",
                        value: 0.0,
                        reason: "must be at least 1",
                    });
                }
            }
            KernelKind::Lin | KernelKind::Ssg | KernelKind::Hpb => {}
        }
        Ok(())
    }

    /// Checks that the spec can score vectors of dimension `d`.
    pub fn validate_dim(&self, d: usize) -> Result<()> {
        self.validate()?;
        if d == 0 {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if self.kind == KernelKind::Mog && !d.is_multiple_of(self.num_gauss) {
            return Err(Error::InvalidHyperparameter {
                name: "num_gauss",
                value: self.num_gauss as f64,
                reason: "must divide the vector dimension",
            });
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Display for KernelSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let default = KernelSpec::<T>::new(self.kind);
        write!(f, "{}", self.kind)?;
        let k = self.kind;
        if k.uses("p") && self.p != default.p {
            write!(f, ":p={}", self.p)?;
        }
        if k.uses("alpha") {
            if let Some(alpha) = self.alpha {
                write!(f, ":alpha={alpha}")?;
            }
        }
        if k.uses("c") && self.c != default.c {
            write!(f, ":c={}", self.c)?;
        }
        if k.uses("gamma") {
            if let Some(gamma) = self.gamma {
                write!(f, ":gamma={gamma}")?;
            }
        }
        if k.uses("a") && self.a != default.a {
            write!(f, ":a={}", self.a)?;
        }
        if k.uses("b") && self.b != default.b {
            write!(f, ":b={}", self.b)?;
        }
        if k.uses("gauss") && self.num_gauss != default.num_gauss {
            write!(f, ":gauss={}", self.num_gauss)?;
        }
        if k.uses("mog") && self.mog_mode != default.mog_mode {
            write!(f, ":mog={}", self.mog_mode.name())?;
        }
        if k.uses("learn_var") && !self.learn_variances {
            write!(f, ":learn_var=false")?;
        }
        Ok(())
    }
}

/// Parses `kind[:key=value]*`, e.g. `pol:p=3:alpha=0.5` or `rbf:gamma=2`.
impl<T: Scalar> FromStr for KernelSpec<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |reason: String| Error::KernelSpecParse {
            spec: s.to_string(),
            reason,
        };
        let mut parts = s.split(':');
        let kind: KernelKind = parts.next().unwrap_or_default().trim().parse()?;
        let mut spec = KernelSpec::new(kind);
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{part}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !kind.uses(key) {
                return Err(bad(format!("`{key}` is not a parameter of `{kind}`")));
            }
            let real = || {
                value
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|_| bad(format!("`{key}` expects a number, got `{value}`")))
            };
            match key {
                "p" => spec.p = real()?,
                "alpha" => spec.alpha = Some(real()?),
                "c" => spec.c = real()?,
                "gamma" => spec.gamma = Some(real()?),
                "a" => spec.a = real()?,
                "b" => spec.b = real()?,
                "gauss" => {
                    spec.num_gauss = value
                        .parse()
                        .map_err(|_| bad(format!("`gauss` expects an integer, got `{value}`")))?
                }
                "learn_var" => {
                    spec.learn_variances = value
                        .parse()
                        .map_err(|_| bad(format!("`learn_var` expects true/false, got `{value}`")))?
                }
                "mog" => {
                    spec.mog_mode = match value {
                        "sum-of-logs" => MogMode::SumOfLogs,
                        "log-of-sum" => MogMode::LogOfSum,
                        _ => return Err(bad(format!("unknown mog mode `{value}`"))),
                    }
                }
                _ => unreachable!("filtered by KernelKind::uses"),
            }
        }
        spec.validate().map_err(|e| bad(e.to_string()))?;
        Ok(spec)
    }
}

/// Parses a comma-separated list of kernel specs.
pub fn parse_kernel_list<T: Scalar>(s: &str) -> Result<Vec<KernelSpec<T>>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for text in [
            "lin",
            "pol:p=3:alpha=0.5:c=0",
            "rbf:gamma=2",
            "wav:a=2:b=3",
            "mog:gauss=4:mog=log-of-sum",
        ] {
            let spec: KernelSpec<f64> = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!("pow:p=0".parse::<KernelSpec<f64>>().is_err());
        assert!("pol:p=1.5".parse::<KernelSpec<f64>>().is_err());
        assert!("rbf:gamma=-1".parse::<KernelSpec<f64>>().is_err());
        assert!("wav:b=0".parse::<KernelSpec<f64>>().is_err());
        assert!("lin:p=2".parse::<KernelSpec<f64>>().is_err());
        assert!("cosine".parse::<KernelSpec<f64>>().is_err());
    }

    #[test]
    fn mog_dimension_must_split_evenly() {
        let spec = KernelSpec::<f64>::new(KernelKind::Mog).with_num_gauss(3);
        assert!(spec.validate_dim(4).is_err());
        assert!(spec.validate_dim(6).is_ok());
    }

    #[test]
    fn defaults_resolve_against_dimension() {
        let spec = KernelSpec::<f64>::new(KernelKind::Rbf);
        assert_eq!(spec.gamma_for(4), 0.25);
        assert_eq!(spec.with_gamma(1.0).gamma_for(4), 1.0);
    }
}
