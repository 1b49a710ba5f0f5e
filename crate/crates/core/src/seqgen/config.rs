use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffnum::AdamConfig;
use crate::error::{Error, Result};
use crate::trajectory::DEFAULT_K;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Deterministic latent; Gaussian outcomes and Poisson treatments per cell.
    Parametric,
    /// Gaussian latent per past step, trained on the negative ELBO.
    Latent,
    /// One-step-ahead model rolled out over the horizon.
    Autoregressive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Parametric => "parametric",
            Mode::Latent => "latent",
            Mode::Autoregressive => "autoregressive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(Mode::Parametric),
            "latent" => Ok(Mode::Latent),
            "autoregressive" => Ok(Mode::Autoregressive),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// Input channel groups that can be withheld from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "past-y")]
    PastY,
    #[serde(rename = "past-x")]
    PastX,
    #[serde(rename = "past-v")]
    PastV,
    #[serde(rename = "future-x")]
    FutureX,
    #[serde(rename = "future-v")]
    FutureV,
    #[serde(rename = "static")]
    Static,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::PastY,
        Channel::PastX,
        Channel::PastV,
        Channel::FutureX,
        Channel::FutureV,
        Channel::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::PastY => "past-y",
            Channel::PastX => "past-x",
            Channel::PastV => "past-v",
            Channel::FutureX => "future-x",
            Channel::FutureV => "future-v",
            Channel::Static => "static",
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownChannel(s.to_string()))
    }
}

/// Parses a comma-separated channel list such as `"past-y,future-x"`.
pub fn parse_channels(spec: &str) -> Result<Vec<Channel>> {
    let mut out: Vec<Channel> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Channel::from_str)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_hidden: usize,
    pub embed_hidden: usize,
    pub latent_dim: usize,
    /// Forecast window K (hours). Ignored in autoregressive mode, which is one-step.
    pub window: usize,
    pub prior_sd: f64,
    pub mode: Mode,
    pub lr: f64,
    /// Patients per mini-batch.
    pub batch: usize,
    /// Past hours fed to the encoder in parametric and latent mode.
    pub max_history: usize,
    /// Optimisation steps.
    pub steps: usize,
    /// Validation is run every this many steps (and after the last one).
    pub eval_every: usize,
    /// Conditioning set; channels not listed are zeroed at the input.
    pub channels: Vec<Channel>,
    pub init_sd_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 16,
            enc_layers: 1,
            dec_layers: 1,
            ffn_hidden: 100,
            embed_hidden: 100,
            latent_dim: 16,
            window: DEFAULT_K,
            prior_sd: 1.0,
            mode: Mode::Parametric,
            lr: 1e-3,
            batch: 8,
            max_history: 24,
            steps: 1500,
            eval_every: 100,
            channels: Channel::ALL.to_vec(),
            init_sd_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and smoke tests.
    pub fn tiny(mode: Mode) -> Self {
        Self {
            d_model: 8,
            heads: 2,
            ffn_hidden: 6,
            embed_hidden: 5,
            latent_dim: 2,
            window: 4,
            max_history: 6,
            mode,
            steps: 200,
            eval_every: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("ModelConfig: {m}")));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.d_model == 0 || self.ffn_hidden == 0 || self.embed_hidden == 0 || self.latent_dim == 0 {
            return bad("layer sizes must be positive");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("at least one encoder and one decoder layer");
        }
        if self.window == 0 || self.max_history == 0 {
            return bad("window and max_history must be positive");
        }
        if !(self.prior_sd > 0.0 && self.prior_sd.is_finite()) {
            return bad("prior_sd must be positive");
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.eval_every == 0 {
            return bad("lr, batch and eval_every must be positive");
        }
        Ok(())
    }

    /// Future steps decoded per window: `window`, or 1 in autoregressive mode.
    pub fn horizon(&self) -> usize {
        match self.mode {
            Mode::Autoregressive => 1,
            _ => self.window,
        }
    }

    pub fn uses(&self, c: Channel) -> bool {
        self.channels.contains(&c)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny(Mode::Latent).validate().unwrap();
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn channel_parsing() {
        let c = parse_channels("future-x, past-y,past-y").unwrap();
        assert_eq!(c, vec![Channel::PastY, Channel::FutureX]);
        assert!(matches!(parse_channels("past-z"), Err(Error::UnknownChannel(_))));
        assert!(parse_channels("").unwrap().is_empty());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig {
            mode: Mode::Autoregressive,
            channels: vec![Channel::PastY, Channel::Static],
            ..ModelConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"autoregressive\"") && s.contains("\"past-y\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), cfg);
    }
}
