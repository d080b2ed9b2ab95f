//! Training schedules: which epochs are clean and which are adversarial.
//!
//! A cross schedule repeats a cycle of `clean_epochs` clean epochs followed by
//! `adv_epochs` adversarial epochs. Epoch `e` is adversarial iff
//! `e mod (clean_epochs + adv_epochs) >= clean_epochs`.

use serde::{Deserialize, Serialize};

use crate::attack::AttackScope;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Clean meta-training only.
    Nat,
    /// Every epoch adversarial, support and query attacked.
    At,
    /// Every epoch adversarial, query only.
    Aq,
    /// Cross schedule of clean and adversarial blocks.
    Lcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Clean,
    Adv,
}

impl Phase {
    pub fn letter(self) -> char {
        match self {
            Phase::Clean => 'C',
            Phase::Adv => 'A',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradesMode {
    Off,
    /// TRADES loss in adversarial epochs only.
    AdvPhaseOnly,
    /// TRADES label on every epoch. Clean epochs have no adversarial
    /// examples, so their loss stays plain cross-entropy.
    AllEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateGranularity {
    /// Accumulate over a whole same-phase block of epochs, update once.
    PerBlock,
    /// One optimizer step per meta-batch.
    PerTerm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: Mode,
    pub clean_epochs: usize,
    pub adv_epochs: usize,
    pub epochs: usize,
    pub meta_batches_per_epoch: usize,
    pub batch_size: usize,
    pub trades: TradesMode,
    pub trades_beta: f64,
    pub granularity: UpdateGranularity,
    /// Images attacked in adversarial epochs; defaults by mode.
    #[serde(default)]
    pub attack_scope: Option<AttackScope>,
}

/// Named method presets.
pub const PRESETS: &[&str] = &["nat", "at", "aq", "scat", "lcat", "lcat_trades", "aq_trades"];

impl ScheduleConfig {
    /// Long-term cross schedule, 5 clean + 5 adversarial epochs per cycle.
    pub fn lcat(epochs: usize) -> Self {
        ScheduleConfig {
            mode: Mode::Lcat,
            clean_epochs: 5,
            adv_epochs: 5,
            epochs,
            meta_batches_per_epoch: 100,
            batch_size: 8,
            trades: TradesMode::Off,
            trades_beta: 6.0,
            granularity: UpdateGranularity::PerBlock,
            attack_scope: None,
        }
    }

    /// Apply a named preset on top of `self`, keeping epochs, batch counts,
    /// granularity and β.
    pub fn with_preset(&self, name: &str) -> Result<Self> {
        let mut s = self.clone();
        s.trades = TradesMode::Off;
        s.attack_scope = None;
        let (mode, c, t) = match name {
            "nat" => (Mode::Nat, 1, 0),
            "at" => (Mode::At, 0, 1),
            "aq" | "aq_trades" => (Mode::Aq, 0, 1),
            "scat" => (Mode::Lcat, 9, 1),
            "lcat" | "lcat_trades" => (Mode::Lcat, 5, 5),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; valid presets: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        s.mode = mode;
        s.clean_epochs = c;
        s.adv_epochs = t;
        if name.ends_with("_trades") {
            s.trades = TradesMode::AdvPhaseOnly;
        }
        Ok(s)
    }

    pub fn cycle(&self) -> usize {
        self.clean_epochs + self.adv_epochs
    }

    pub fn scope(&self) -> AttackScope {
        self.attack_scope.unwrap_or(match self.mode {
            Mode::At => AttackScope::SupportAndQuery,
            _ => AttackScope::QueryOnly,
        })
    }

    pub fn trades_in_adv_phase(&self) -> bool {
        self.trades != TradesMode::Off
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle() == 0 {
            return Err(Error::config("clean_epochs + adv_epochs must be at least 1"));
        }
        if matches!(self.mode, Mode::At | Mode::Aq) && self.clean_epochs != 0 {
            return Err(Error::config(
                "AT/AQ schedules have no clean epochs (clean_epochs must be 0)",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.trades_beta >= 0.0 && self.trades_beta.is_finite()) {
            return Err(Error::config(format!(
                "TRADES beta must be >= 0, got {}",
                self.trades_beta
            )));
        }
        Ok(())
    }

    /// Whether epoch `e` is the last of a same-phase block (or of training).
    pub fn ends_block(&self, epoch: usize) -> bool {
        let next = epoch + 1;
        next >= self.epochs
            || next.is_multiple_of(self.cycle())
            || phase_of_epoch(next, self) != phase_of_epoch(epoch, self)
    }
}

pub fn phase_of_epoch(epoch: usize, cfg: &ScheduleConfig) -> Phase {
    match cfg.mode {
        Mode::Nat => Phase::Clean,
        Mode::At | Mode::Aq => Phase::Adv,
        Mode::Lcat => {
            if epoch % cfg.cycle() >= cfg.clean_epochs {
                Phase::Adv
            } else {
                Phase::Clean
            }
        }
    }
}

/// Phase letters for epochs `0..epochs`, e.g. `CCCCCAAAAA...`.
pub fn phase_pattern(cfg: &ScheduleConfig) -> String {
    (0..cfg.epochs).map(|e| phase_of_epoch(e, cfg).letter()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> ScheduleConfig {
        ScheduleConfig::lcat(50).with_preset(name).unwrap()
    }

    #[test]
    fn lcat_phases() {
        let c = preset("lcat");
        assert_eq!(phase_of_epoch(3, &c), Phase::Clean);
        assert_eq!(phase_of_epoch(7, &c), Phase::Adv);
        assert_eq!(phase_pattern(&c), "CCCCCAAAAA".repeat(5));
    }

    #[test]
    fn scat_phases() {
        let c = preset("scat");
        for e in 0..9 {
            assert_eq!(phase_of_epoch(e, &c), Phase::Clean);
        }
        assert_eq!(phase_of_epoch(9, &c), Phase::Adv);
        assert_eq!(phase_pattern(&c), "CCCCCCCCCA".repeat(5));
    }

    #[test]
    fn baseline_modes() {
        assert_eq!(phase_pattern(&preset("aq")), "A".repeat(50));
        assert_eq!(phase_pattern(&preset("at")), "A".repeat(50));
        assert_eq!(phase_pattern(&preset("nat")), "C".repeat(50));
        assert_eq!(preset("at").scope(), AttackScope::SupportAndQuery);
        assert_eq!(preset("aq").scope(), AttackScope::QueryOnly);
        assert_eq!(preset("lcat_trades").trades, TradesMode::AdvPhaseOnly);
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = ScheduleConfig::lcat(1).with_preset("madry").unwrap_err().to_string();
        for p in PRESETS {
            assert!(err.contains(p), "{err}");
        }
    }

    #[test]
    fn block_boundaries() {
        let c = preset("lcat");
        let ends: Vec<usize> = (0..20).filter(|&e| c.ends_block(e)).collect();
        assert_eq!(ends, vec![4, 9, 14, 19]);
        let aq = preset("aq");
        assert!((0..50).all(|e| aq.ends_block(e)));
    }

    #[test]
    fn validation() {
        let mut c = preset("aq");
        c.clean_epochs = 2;
        assert!(c.validate().is_err());
        let mut c = preset("lcat");
        c.clean_epochs = 0;
        c.adv_epochs = 0;
        assert!(c.validate().is_err());
        let mut c = preset("lcat");
        c.trades_beta = -1.0;
        assert!(c.validate().is_err());
    }
}
