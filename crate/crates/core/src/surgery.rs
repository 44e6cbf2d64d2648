//! Backward-pass rules for the gradient-surgery modes.
//!
//! * `lsgm` scales the adjoint entering every residual branch by `gamma`.
//! * `lila` differentiates the projection `v . h_{r,n}` instead of the
//!   cross-entropy.
//! * `lila_dagger` keeps the cross-entropy but, at `(r, n)`, replaces the
//!   incoming adjoint `g` by `alpha (g - beta v)` with
//!   `alpha = |g| / |g - beta v|`, or by `-(|g| / |v|) v` when beta is
//!   infinite.
//! * `lsgm_lila_dagger` applies both the scaling and the replacement.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use suffixlab_engine::{
    GradReplacement, HookSet, Label, Replacement, ReplacementRule, Scalar, DENOM_EPS,
};

use crate::error::{LabError, Result};
use crate::model::ActivationCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurgeryMode {
    None,
    Lsgm,
    Lila,
    LilaDagger,
    LsgmLilaDagger,
}

impl SurgeryMode {
    pub const ALL: [SurgeryMode; 5] = [
        SurgeryMode::None,
        SurgeryMode::Lsgm,
        SurgeryMode::Lila,
        SurgeryMode::LilaDagger,
        SurgeryMode::LsgmLilaDagger,
    ];

    pub fn needs_guide(self) -> bool {
        matches!(self, Self::Lila | Self::LilaDagger | Self::LsgmLilaDagger)
    }

    pub fn scales_residuals(self) -> bool {
        matches!(self, Self::Lsgm | Self::LsgmLilaDagger)
    }

    pub fn uses_beta(self) -> bool {
        matches!(self, Self::LilaDagger | Self::LsgmLilaDagger)
    }

    /// Command-line spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Lsgm => "lsgm",
            Self::Lila => "lila",
            Self::LilaDagger => "lila+",
            Self::LsgmLilaDagger => "lsgm-lila+",
        }
    }
}

impl fmt::Display for SurgeryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for SurgeryMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "lsgm" => Self::Lsgm,
            "lila" => Self::Lila,
            "lila+" | "lila_dagger" | "lila-dagger" => Self::LilaDagger,
            "lsgm-lila+" | "lsgm_lila_dagger" | "lsgm-lila-dagger" => Self::LsgmLilaDagger,
            other => return Err(LabError::Config(format!("unknown surgery mode {other:?}"))),
        })
    }
}

/// Balance between the cross-entropy adjoint and the guide direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(b) => write!(f, "{b}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Beta {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Ok(Self::Infinite),
            other => {
                let b: f64 = other
                    .parse()
                    .map_err(|_| LabError::Config(format!("invalid beta {s:?}")))?;
                if b.is_infinite() && b > 0.0 {
                    Ok(Self::Infinite)
                } else if b.is_finite() && b >= 0.0 {
                    Ok(Self::Finite(b))
                } else {
                    Err(LabError::Config(format!("beta must be >= 0, got {s}")))
                }
            }
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(b) => s.serialize_f64(*b),
            Self::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(b) => Beta::from_str(&b.to_string()),
            Raw::Text(t) => Beta::from_str(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryConfig {
    pub mode: SurgeryMode,
    pub gamma: f64,
    /// Layer `r` of the guide, `1..=n_layers`.
    pub layer: usize,
    pub beta: Beta,
    /// Recompute the guide every this many iterations (1 = every iteration).
    pub guide_refresh: usize,
}

impl SurgeryConfig {
    pub fn new(mode: SurgeryMode, n_layers: usize) -> Self {
        Self {
            mode,
            gamma: 0.5,
            layer: n_layers.div_ceil(2),
            beta: Beta::Infinite,
            guide_refresh: 1,
        }
    }

    pub fn none() -> Self {
        Self::new(SurgeryMode::None, 1)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LabError::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.mode.needs_guide() && !(1..=n_layers).contains(&self.layer) {
            return Err(LabError::Config(format!(
                "layer {} outside 1..={n_layers}",
                self.layer
            )));
        }
        if self.guide_refresh == 0 {
            return Err(LabError::Config("guide_refresh must be >= 1".into()));
        }
        Ok(())
    }
}

/// Direction `v = h_{r,n}(current) - h_{r,n}(reference)`. Held outside any
/// tape, so no gradient flows through it.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalGuide<T> {
    pub v: Vec<T>,
    pub reference_h0: Vec<T>,
    pub layer: usize,
    pub position: usize,
}

impl<T: Scalar> DirectionalGuide<T> {
    pub fn norm(&self) -> T {
        self.v.iter().map(|&x| x * x).sum::<T>().sqrt()
    }
}

pub fn compute_guide<T: Scalar>(
    cache_current: &ActivationCache<T>,
    reference_h0: &[T],
    layer: usize,
    position: usize,
) -> Result<DirectionalGuide<T>> {
    if layer > cache_current.n_layers() {
        return Err(LabError::Config(format!(
            "guide layer {layer} beyond model depth"
        )));
    }
    let resid = cache_current.resid(layer);
    if position >= resid.rows() || reference_h0.len() != resid.cols() {
        return Err(LabError::Config(format!(
            "guide position {position} / width {} do not fit h of shape {:?}",
            reference_h0.len(),
            resid.shape()
        )));
    }
    let v = resid
        .row(position)
        .iter()
        .zip(reference_h0)
        .map(|(&h, &h0)| h - h0)
        .collect();
    Ok(DirectionalGuide {
        v,
        reference_h0: reference_h0.to_vec(),
        layer,
        position,
    })
}

/// `v . h_{r,n}`; the attack maximises this.
pub fn lila_objective<T: Scalar>(cache: &ActivationCache<T>, guide: &DirectionalGuide<T>) -> T {
    cache
        .h(guide.layer, guide.position)
        .iter()
        .zip(&guide.v)
        .map(|(&h, &v)| h * v)
        .sum()
}

fn l2<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&a| a * a).sum::<T>().sqrt()
}

/// Norm-preserving replacement of the adjoint at the guide position.
pub fn lila_dagger_replace<T: Scalar>(g: &[T], v: &[T], beta: Beta) -> Replacement<T> {
    let guard = T::of(DENOM_EPS);
    let skip = || Replacement {
        value: g.to_vec(),
        skipped: true,
    };
    let g_norm = l2(g);
    match beta {
        Beta::Infinite => {
            let v_norm = l2(v);
            if v_norm < guard {
                return skip();
            }
            let c = g_norm / v_norm;
            Replacement {
                value: v.iter().map(|&x| -(c * x)).collect(),
                skipped: false,
            }
        }
        Beta::Finite(b) => {
            let b = T::of(b);
            let w: Vec<T> = g.iter().zip(v).map(|(&gi, &vi)| gi - b * vi).collect();
            let w_norm = l2(&w);
            if w_norm < guard {
                return skip();
            }
            let alpha = g_norm / w_norm;
            Replacement {
                value: w.into_iter().map(|x| alpha * x).collect(),
                skipped: false,
            }
        }
    }
}

/// Quantity differentiated to obtain the one-hot gradient.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective<T> {
    /// Target cross-entropy.
    CrossEntropy,
    /// `-(v . h_{layer, position})`, seeded directly at the residual stream.
    NegatedProjection {
        layer: usize,
        position: usize,
        v: Vec<T>,
    },
}

pub fn make_hooks<T: Scalar>(
    config: &SurgeryConfig,
    guide: Option<&DirectionalGuide<T>>,
) -> Result<(HookSet<T>, Objective<T>)> {
    let guide = match (config.mode.needs_guide(), guide) {
        (true, None) => return Err(LabError::MissingGuide(config.mode.cli_name())),
        (_, g) => g,
    };
    let mut hooks = HookSet::empty();
    if config.mode.scales_residuals() {
        hooks.residual_branch_scale = Some(T::of(config.gamma));
    }
    let objective = match config.mode {
        SurgeryMode::None | SurgeryMode::Lsgm => Objective::CrossEntropy,
        SurgeryMode::Lila => {
            let g = guide.expect("checked above");
            Objective::NegatedProjection {
                layer: g.layer,
                position: g.position,
                v: g.v.clone(),
            }
        }
        SurgeryMode::LilaDagger | SurgeryMode::LsgmLilaDagger => {
            let g = guide.expect("checked above");
            let v = g.v.clone();
            let beta = config.beta;
            hooks.grad_replacements.push(GradReplacement {
                label: Label::Resid(g.layer),
                row: g.position,
                rule: ReplacementRule::Map(Arc::new(move |incoming: &[T]| {
                    lila_dagger_replace(incoming, &v, beta)
                })),
            });
            Objective::CrossEntropy
        }
    };
    Ok((hooks, objective))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn beta_zero_returns_g_exactly() {
        let g = [0.3f64, -1.7, 2.2];
        let r = lila_dagger_replace(&g, &[5.0, 1.0, -3.0], Beta::Finite(0.0));
        assert_eq!(r.value, g.to_vec());
        assert!(!r.skipped);
    }

    #[test]
    fn beta_infinite_with_v_equal_g_negates() {
        let g = [0.3f64, -1.7, 2.2];
        let r = lila_dagger_replace(&g, &g, Beta::Infinite);
        for (a, b) in r.value.iter().zip(g) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_case() {
        // g - v = (3, 3), alpha = 5 / (3 sqrt 2)
        let r = lila_dagger_replace(&[3.0f64, 4.0], &[0.0, 1.0], Beta::Finite(1.0));
        let alpha = 5.0 / (3.0 * 2f64.sqrt());
        assert!((alpha - 1.17851).abs() < 1e-5);
        assert!((r.value[0] - 3.53553).abs() < 1e-5);
        assert!((r.value[1] - 3.53553).abs() < 1e-5);
        assert!((norm(&r.value) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_denominators_skip() {
        let g = [1.0, 2.0];
        let r = lila_dagger_replace(&g, &[0.0, 0.0], Beta::Infinite);
        assert!(r.skipped);
        assert_eq!(r.value, g.to_vec());
        let r = lila_dagger_replace(&g, &g, Beta::Finite(1.0));
        assert!(r.skipped);
    }

    #[test]
    fn beta_parsing() {
        assert_eq!("inf".parse::<Beta>().unwrap(), Beta::Infinite);
        assert_eq!("2.5".parse::<Beta>().unwrap(), Beta::Finite(2.5));
        assert!("-1".parse::<Beta>().is_err());
        let json = serde_json::to_string(&Beta::Infinite).unwrap();
        assert_eq!(serde_json::from_str::<Beta>(&json).unwrap(), Beta::Infinite);
        assert_eq!(
            serde_json::from_str::<Beta>("0.5").unwrap(),
            Beta::Finite(0.5)
        );
    }

    #[test]
    fn modes_round_trip_through_cli_names() {
        for m in SurgeryMode::ALL {
            assert_eq!(m.cli_name().parse::<SurgeryMode>().unwrap(), m);
        }
    }

    #[test]
    fn missing_guide_is_an_error() {
        let cfg = SurgeryConfig::new(SurgeryMode::LilaDagger, 4);
        assert!(matches!(
            make_hooks::<f64>(&cfg, None),
            Err(LabError::MissingGuide(_))
        ));
        let cfg = SurgeryConfig::new(SurgeryMode::Lsgm, 4);
        let (hooks, obj) = make_hooks::<f64>(&cfg, None).unwrap();
        assert_eq!(hooks.residual_branch_scale, Some(0.5));
        assert_eq!(obj, Objective::CrossEntropy);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SurgeryConfig::new(SurgeryMode::Lila, 8);
        assert_eq!(cfg.layer, 4);
        assert!(cfg.validate(8).is_ok());
        cfg.layer = 9;
        assert!(cfg.validate(8).is_err());
        cfg.layer = 4;
        cfg.gamma = 1.5;
        assert!(cfg.validate(8).is_err());
    }

    proptest::proptest! {
        #[test]
        fn replacement_preserves_norm(
            g in proptest::collection::vec(-10.0f64..10.0, 6),
            v in proptest::collection::vec(-10.0f64..10.0, 6),
            beta in proptest::option::of(0.0f64..100.0),
        ) {
            let beta = beta.map_or(Beta::Infinite, Beta::Finite);
            let r = lila_dagger_replace(&g, &v, beta);
            if !r.skipped {
                let (a, b) = (norm(&r.value), norm(&g));
                proptest::prop_assert!((a - b).abs() <= 1e-6 * b.max(1e-300));
            }
        }
    }
}
