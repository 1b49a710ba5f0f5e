use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::config::{Mode, ModelConfig};
use super::features::{F_ENC, F_OUT, F_TRT};
use crate::container::{read_framed, write_framed};
use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::ScalerParams;
use crate::rng::Rng;
use crate::trajectory::{D, P};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLYCOCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter groups: encoder ψ, outcome decoder φ, treatment decoder θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Outcome,
    Treatment,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Outcome, ParamGroup::Treatment];

    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "enc" => Some(ParamGroup::Encoder),
            "out" => Some(ParamGroup::Outcome),
            "trt" => Some(ParamGroup::Treatment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub scaler: ScalerParams,
    pub tensors: BTreeMap<String, Tensor>,
    /// Set by training; sampling from an untrained model only logs a warning.
    pub trained: bool,
}

struct Init<'a> {
    tensors: BTreeMap<String, Tensor>,
    rng: &'a mut Rng,
    scale: f64,
}

impl Init<'_> {
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) {
        let sd = self.scale / (fan_in as f64).sqrt();
        self.tensors.insert(name, Tensor::randn(&[fan_in, fan_out], sd, self.rng));
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.tensors.insert(name, Tensor::zeros(shape));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(format!("{prefix}.w"), fan_in, fan_out);
        self.zeros(format!("{prefix}.b"), &[fan_out]);
    }

    fn table(&mut self, name: String, rows: usize, cols: usize) {
        self.tensors.insert(name, Tensor::randn(&[rows, cols], 0.1, self.rng));
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for m in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{m}"), d, d);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.linear(&format!("{prefix}.ff1"), d, hidden);
        self.linear(&format!("{prefix}.ff2"), hidden, d);
    }

    fn decoder(&mut self, prefix: &str, cfg: &ModelConfig, n_in: usize) {
        let d = cfg.d_model;
        self.linear(&format!("{prefix}.in1"), n_in, cfg.embed_hidden);
        self.linear(&format!("{prefix}.in2"), cfg.embed_hidden, d);
        self.table(format!("{prefix}.hour"), 24, d);
        for l in 0..cfg.dec_layers {
            self.attention(&format!("{prefix}.l{l}.self"), d);
            self.attention(&format!("{prefix}.l{l}.cross"), d);
            self.ffn(&format!("{prefix}.l{l}"), d, cfg.ffn_hidden);
        }
    }
}

impl ModelParams {
    /// Random initialisation for `config`; the scaler fixes the static-feature count.
    pub fn init(config: &ModelConfig, scaler: &ScalerParams, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        scaler.validate()?;
        let d = config.d_model;
        let n_static = scaler.static_mean.len();
        let mut init = Init {
            tensors: BTreeMap::new(),
            rng,
            scale: config.init_sd_scale,
        };
        init.linear("enc.in1", F_ENC, config.embed_hidden);
        init.linear("enc.in2", config.embed_hidden, d);
        init.table("enc.hour".into(), 24, d);
        for l in 0..config.enc_layers {
            init.attention(&format!("enc.l{l}.self"), d);
            init.ffn(&format!("enc.l{l}"), d, config.ffn_hidden);
        }
        init.linear("enc.mu", d, config.latent_dim);
        if config.mode == Mode::Latent {
            init.linear("enc.sd", d, config.latent_dim);
        }
        init.linear("enc.z", config.latent_dim, d);
        init.linear("enc.start", n_static.max(1), d);

        init.decoder("out", config, F_OUT);
        init.linear("out.head", d, P);
        init.zeros("out.logsd".into(), &[config.horizon(), P]);

        init.decoder("trt", config, F_TRT);
        init.linear("trt.head", d, D);

        Ok(Self {
            config: config.clone(),
            scaler: scaler.clone(),
            tensors: init.tensors,
            trained: false,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn names_in(&self, groups: &[ParamGroup]) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
            .cloned()
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.scaler.validate()?;
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(Error::InvalidArgument(format!("parameter {name} is not finite")));
            }
            if ParamGroup::of(name).is_none() {
                return Err(Error::InvalidArgument(format!("parameter {name} has no group")));
            }
        }
        Ok(())
    }

    /// Writes the checkpoint: JSON manifest then little-endian f64 tensor data.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut table = Vec::with_capacity(self.tensors.len());
        let mut floats = Vec::with_capacity(self.num_parameters());
        for (name, t) in &self.tensors {
            table.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: floats.len(),
            });
            floats.extend_from_slice(t.data());
        }
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            trained: self.trained,
            tensors: table,
        };
        let json = serde_json::to_vec(&manifest)?;
        write_framed(w, CHECKPOINT_MAGIC, &json, &floats, &[])
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let framed = read_framed(r, CHECKPOINT_MAGIC)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&framed.manifest)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                manifest.version
            )));
        }
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = framed
                .floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Format(format!("tensor {} out of range", e.name)))?;
            if tensors.insert(e.name.clone(), Tensor::new(e.shape, data.to_vec())?).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", e.name)));
            }
        }
        let params = Self {
            config: manifest.config,
            scaler: manifest.scaler,
            tensors,
            trained: manifest.trained,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: ModelConfig,
    scaler: ScalerParams,
    trained: bool,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn groups_partition_names() {
        let cfg = ModelConfig::tiny(Mode::Latent);
        let p = ModelParams::init(&cfg, &ScalerParams::identity(3), &mut stream(1, "init", 0)).unwrap();
        let all: usize = ParamGroup::ALL.iter().map(|g| p.names_in(&[*g]).len()).sum();
        assert_eq!(all, p.tensors.len());
        assert!(p.names_in(&[ParamGroup::Outcome]).contains(&"out.logsd".to_string()));
        assert!(p.tensors.contains_key("enc.sd.w"));
        p.validate().unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::tiny(Mode::Parametric);
        let mut p = ModelParams::init(&cfg, &ScalerParams::identity(3), &mut stream(2, "init", 0)).unwrap();
        p.trained = true;
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        assert_eq!(ModelParams::load(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let cfg = ModelConfig::tiny(Mode::Parametric);
        let p = ModelParams::init(&cfg, &ScalerParams::identity(3), &mut stream(3, "init", 0)).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let key = b"\"version\":1";
        let at = buf.windows(key.len()).position(|w| w == key).unwrap();
        buf[at + key.len() - 1] = b'9';
        assert!(matches!(ModelParams::load(buf.as_slice()), Err(Error::Format(_))));
    }
}
