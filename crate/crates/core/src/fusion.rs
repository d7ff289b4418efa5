//! Cascade fusion: a matching hard rule decides outright, otherwise the
//! neural and soft-symbolic scores are blended through a sigmoid.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbolic::{sigmoid, RuleAction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmoidMode {
    #[default]
    Exact,
    Table256,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Hard-veto enable, 0 or 1.
    pub lambda_h: u8,
    #[serde(default)]
    pub sigmoid_mode: SigmoidMode,
    /// Let whitelist hard rules force the score to 0.
    #[serde(default)]
    pub whitelist: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_h: 1,
            sigmoid_mode: SigmoidMode::Exact,
            whitelist: false,
        }
    }
}

impl FusionConfig {
    pub fn new(alpha: f64, beta: f64, lambda_h: u8) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            lambda_h,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_h > 1 {
            return Err(Error::Config(format!(
                "fusion.lambda_h must be 0 or 1, got {}",
                self.lambda_h
            )));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("fusion.alpha and fusion.beta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionPath {
    HardVeto,
    SoftBlend,
    Whitelist,
}

impl FusionPath {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::HardVeto => "hard_veto",
            Self::SoftBlend => "soft_blend",
            Self::Whitelist => "whitelist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub value: f64,
    pub path: FusionPath,
}

pub fn fuse(s_nn: f64, i_sym: u8, s_sym: f64, cfg: &FusionConfig) -> FusedScore {
    let action = (i_sym == 1).then_some(RuleAction::Alarm);
    fuse_with_action(s_nn, action, s_sym, cfg)
}

/// Like [`fuse`], taking the action of the winning hard rule.
pub fn fuse_with_action(s_nn: f64, hard: Option<RuleAction>, s_sym: f64, cfg: &FusionConfig) -> FusedScore {
    if cfg.lambda_h == 1 {
        match hard {
            Some(RuleAction::Alarm) => {
                return FusedScore {
                    value: 1.0,
                    path: FusionPath::HardVeto,
                }
            }
            Some(RuleAction::Whitelist) if cfg.whitelist => {
                return FusedScore {
                    value: 0.0,
                    path: FusionPath::Whitelist,
                }
            }
            _ => {}
        }
    }
    let z = cfg.alpha * s_nn + cfg.beta * s_sym;
    let value = match cfg.sigmoid_mode {
        SigmoidMode::Exact => sigmoid(z),
        SigmoidMode::Table256 => table_sigmoid(z),
    };
    FusedScore {
        value,
        path: FusionPath::SoftBlend,
    }
}

pub const TABLE_ENTRIES: usize = 256;
pub const TABLE_RANGE: f64 = 8.0;

fn table() -> &'static [f64; TABLE_ENTRIES] {
    static TABLE: OnceLock<[f64; TABLE_ENTRIES]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; TABLE_ENTRIES];
        for (i, y) in t.iter_mut().enumerate() {
            *y = sigmoid(table_x(i));
        }
        t
    })
}

fn table_x(i: usize) -> f64 {
    -TABLE_RANGE + 2.0 * TABLE_RANGE * i as f64 / (TABLE_ENTRIES - 1) as f64
}

/// Piecewise-linear sigmoid over 256 breakpoints on `[-8, 8]`, flat outside.
pub fn table_sigmoid(z: f64) -> f64 {
    let t = table();
    if z.is_nan() {
        return 0.5;
    }
    let pos = (z + TABLE_RANGE) / (2.0 * TABLE_RANGE) * (TABLE_ENTRIES - 1) as f64;
    if pos <= 0.0 {
        return t[0];
    }
    if pos >= (TABLE_ENTRIES - 1) as f64 {
        return t[TABLE_ENTRIES - 1];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    t[i] + frac * (t[i + 1] - t[i])
}

/// Largest `|table_sigmoid - sigmoid|` over a dense grid on `[-lim, lim]`.
pub fn table_max_error(lim: f64, samples: usize) -> f64 {
    (0..=samples)
        .map(|i| {
            let z = -lim + 2.0 * lim * i as f64 / samples as f64;
            (table_sigmoid(z) - sigmoid(z)).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    }

    #[test]
    fn spec_examples() {
        let cfg = FusionConfig::new(3.0, -2.0, 1).unwrap();
        assert_eq!(
            fuse(0.1, 1, 0.9, &cfg),
            FusedScore {
                value: 1.0,
                path: FusionPath::HardVeto
            }
        );
        let zero = FusionConfig::new(0.0, 0.0, 1).unwrap();
        assert_eq!(
            fuse(0.7, 0, 0.2, &zero),
            FusedScore {
                value: 0.5,
                path: FusionPath::SoftBlend
            }
        );
        let off = FusionConfig::new(1.0, 1.0, 0).unwrap();
        let s = fuse(0.3, 1, 0.2, &off);
        assert_eq!(s.path, FusionPath::SoftBlend);
        assert!((s.value - 0.622_459_331_201_854_6).abs() < 1e-15);
        assert!(FusionConfig::new(1.0, 1.0, 2).is_err());
    }

    #[test]
    fn veto_dominance_and_path_exclusivity() {
        for &(a, b) in &[(0.0, 0.0), (1.0, 1.0), (5.0, 0.5), (-3.0, 2.0), (100.0, -100.0)] {
            for lambda in 0..=1u8 {
                let cfg = FusionConfig::new(a, b, lambda).unwrap();
                for i_sym in 0..=1u8 {
                    for &x in &grid() {
                        for &y in &grid() {
                            let s = fuse(x, i_sym, y, &cfg);
                            let veto = i_sym == 1 && lambda == 1;
                            assert_eq!(s.path == FusionPath::HardVeto, veto);
                            if veto {
                                assert_eq!(s.value, 1.0);
                            } else {
                                assert!(s.value >= 0.0 && s.value <= 1.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn soft_blend_monotone() {
        for mode in [SigmoidMode::Exact, SigmoidMode::Table256] {
            let cfg = FusionConfig {
                alpha: 2.0,
                beta: 0.5,
                sigmoid_mode: mode,
                ..FusionConfig::default()
            };
            let g = grid();
            for w in g.windows(2) {
                for &y in &g {
                    assert!(fuse(w[1], 0, y, &cfg).value >= fuse(w[0], 0, y, &cfg).value - 1e-12);
                    assert!(fuse(y, 0, w[1], &cfg).value >= fuse(y, 0, w[0], &cfg).value - 1e-12);
                }
            }
        }
    }

    #[test]
    fn whitelist_is_opt_in() {
        let mut cfg = FusionConfig::default();
        let s = fuse_with_action(0.9, Some(RuleAction::Whitelist), 0.9, &cfg);
        assert_eq!(s.path, FusionPath::SoftBlend);
        cfg.whitelist = true;
        assert_eq!(fuse_with_action(0.9, Some(RuleAction::Whitelist), 0.9, &cfg).value, 0.0);
        cfg.lambda_h = 0;
        assert_eq!(
            fuse_with_action(0.9, Some(RuleAction::Whitelist), 0.9, &cfg).path,
            FusionPath::SoftBlend
        );
    }

    #[test]
    fn table_sigmoid_accuracy() {
        assert_eq!(table_sigmoid(0.0), 0.5);
        for i in 0..TABLE_ENTRIES {
            assert!((table_sigmoid(table_x(i)) - sigmoid(table_x(i))).abs() < 1e-15);
        }
        let err = table_max_error(10.0, 100_000);
        // chord error of a curve with |σ''| <= 0.1 over steps of 16/255
        let h = 2.0 * TABLE_RANGE / 255.0;
        assert!(err <= 0.1 * h * h / 8.0 + sigmoid(-TABLE_RANGE), "{err}");
        assert!(table_sigmoid(50.0) < 1.0 && table_sigmoid(-50.0) > 0.0);
    }

    #[test]
    fn config_toml() {
        let cfg: FusionConfig =
            toml::from_str("alpha = 2.0\nbeta = 0.5\nlambda_h = 1\nsigmoid_mode = \"table256\"").unwrap();
        assert_eq!(cfg.sigmoid_mode, SigmoidMode::Table256);
        assert!(!cfg.whitelist);
    }
}
