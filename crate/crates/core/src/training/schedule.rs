use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `lr_max`, a constant plateau, then exponential decay
/// that reaches `lr_min` after `decay_epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub plateau_epochs: usize,
    pub decay_epochs: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams::spanning(1e-3, 1e-5, 5, 1, 60)
    }
}

impl ScheduleParams {
    /// Warmup and plateau as given, decay filling the remaining epochs.
    pub fn spanning(lr_max: f64, lr_min: f64, warmup: usize, plateau: usize, epochs: usize) -> Self {
        ScheduleParams {
            lr_max,
            lr_min,
            warmup_epochs: warmup,
            plateau_epochs: plateau,
            decay_epochs: epochs.saturating_sub(warmup + plateau).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config("schedule needs 0 < lr_min <= lr_max".into()));
        }
        if self.decay_epochs == 0 {
            return Err(Error::Config("decay_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based `epoch`.
pub fn scheduled_lr(epoch: usize, p: &ScheduleParams) -> f64 {
    let epoch = epoch.max(1);
    let (w, pl) = (p.warmup_epochs, p.plateau_epochs);
    if epoch <= w {
        epoch as f64 / w as f64 * p.lr_max
    } else if epoch <= w + pl {
        p.lr_max
    } else {
        let t = (epoch - w - pl) as f64 / p.decay_epochs as f64;
        p.lr_max * (p.lr_min / p.lr_max).powf(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Frozen,
    Delayed,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    Constant,
    Scheduled,
}

impl LrMode {
    fn code(self) -> char {
        match self {
            LrMode::Constant => 'c',
            LrMode::Scheduled => 's',
        }
    }
}

/// How the encoder and the rest of the model are optimised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeConfig {
    pub encoder_pretrained: bool,
    pub encoder_mode: EncoderMode,
    /// Last frozen epoch of a delayed encoder; defaults to the warmup length.
    #[serde(default)]
    pub unfreeze_epoch: Option<usize>,
    pub encoder_lr_mode: LrMode,
    pub body_lr_mode: LrMode,
    pub encoder_constant_lr: f64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig::frozen()
    }
}

impl RegimeConfig {
    pub fn new(encoder_pretrained: bool, encoder_mode: EncoderMode) -> Self {
        RegimeConfig {
            encoder_pretrained,
            encoder_mode,
            unfreeze_epoch: None,
            encoder_lr_mode: LrMode::Constant,
            body_lr_mode: LrMode::Scheduled,
            encoder_constant_lr: 1e-5,
        }
    }

    pub fn frozen() -> Self {
        Self::new(true, EncoderMode::Frozen)
    }

    pub fn delayed(unfreeze_epoch: usize) -> Self {
        RegimeConfig {
            unfreeze_epoch: Some(unfreeze_epoch),
            ..Self::new(true, EncoderMode::Delayed)
        }
    }

    pub fn joint() -> Self {
        Self::new(true, EncoderMode::Joint)
    }

    pub fn resolved_unfreeze(&self, schedule: &ScheduleParams) -> usize {
        self.unfreeze_epoch.unwrap_or(schedule.warmup_epochs).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unfreeze_epoch == Some(0) {
            return Err(Error::Config("unfreeze_epoch must be at least 1".into()));
        }
        if !(self.encoder_constant_lr >= 0.0 && self.encoder_constant_lr.is_finite()) {
            return Err(Error::Config("encoder_constant_lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `(body_lr, encoder_lr, encoder_trainable)` for a 1-based epoch.
pub fn regime_lrs(regime: &RegimeConfig, schedule: &ScheduleParams, epoch: usize) -> (f64, f64, bool) {
    let lr_for = |mode: LrMode, constant: f64| match mode {
        LrMode::Scheduled => scheduled_lr(epoch, schedule),
        LrMode::Constant => constant,
    };
    let body = lr_for(regime.body_lr_mode, schedule.lr_min);
    let encoder = lr_for(regime.encoder_lr_mode, regime.encoder_constant_lr);
    match regime.encoder_mode {
        EncoderMode::Frozen => (body, 0.0, false),
        EncoderMode::Delayed if epoch <= regime.resolved_unfreeze(schedule) => (body, 0.0, false),
        _ => (body, encoder, true),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    Res,
    Vit,
    VitTrip,
}

impl EncoderFamily {
    fn code(self) -> &'static str {
        match self {
            EncoderFamily::Res => "res",
            EncoderFamily::Vit => "vit",
            EncoderFamily::VitTrip => "vittrip",
        }
    }
}

/// Short run label `<family>-<pre|non>[body,encoder,mode]`, e.g. `res-pre[s,c,t]`.
pub fn format_regime(family: EncoderFamily, pretrained: bool, regime: &RegimeConfig) -> String {
    let (enc, mode) = match regime.encoder_mode {
        EncoderMode::Frozen => ('-', '-'),
        EncoderMode::Delayed => (regime.encoder_lr_mode.code(), 't'),
        EncoderMode::Joint => (regime.encoder_lr_mode.code(), '0'),
    };
    format!(
        "{}-{}[{},{},{}]",
        family.code(),
        if pretrained { "pre" } else { "non" },
        regime.body_lr_mode.code(),
        enc,
        mode
    )
}
