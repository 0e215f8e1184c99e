//! Model configuration: presets, a small `key = value` text format, and a
//! canonical serialization used to fingerprint checkpoints.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::resnet;
use crate::stem::{StemActivation, StemSpec};
use crate::swin::{StageSpec, SwinSpec};
use crate::temporal::TemporalSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    SwinLip,
    ResNet18,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::SwinLip => "swinlip",
            ModelKind::ResNet18 => "resnet18",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stem: StemSpec,
    pub patch: usize,
    pub stages: [StageSpec; 3],
    pub temporal: TemporalSpec,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::swinlip()
    }
}

impl ModelConfig {
    /// Full encoder: 3-D stem, three-stage windowed-attention hierarchy,
    /// two-block temporal back-end.
    pub fn swinlip() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::SwinLip,
            frames: 29,
            height: 88,
            width: 88,
            stem: StemSpec::default_24(),
            patch: 11,
            stages: [
                StageSpec { channels: 64, depth: 2, window: 4, heads: 2 },
                StageSpec { channels: 128, depth: 2, window: 4, heads: 4 },
                StageSpec { channels: 256, depth: 6, window: 2, heads: 8 },
            ],
            temporal: TemporalSpec::default_512(),
            seed: 0,
        }
    }

    /// Causal variant: attention-free temporal back-end, left-padded
    /// depthwise convolutions. Causality is a property of the temporal
    /// stack; the 3-D stem keeps its symmetric temporal padding and so
    /// looks one frame ahead when computing per-frame spatial features.
    pub fn streaming() -> ModelConfig {
        let mut c = ModelConfig::swinlip();
        c.temporal.streaming = true;
        c
    }

    /// Stem ablation: wide 5x7x7 kernel at the same unit stride.
    pub fn stem_577() -> ModelConfig {
        let mut c = ModelConfig::swinlip();
        c.stem = StemSpec::wide_577();
        c
    }

    /// Residual-network baseline front-end (no temporal module).
    pub fn resnet18() -> ModelConfig {
        let mut c = ModelConfig::swinlip();
        c.kind = ModelKind::ResNet18;
        c
    }

    /// Small f64-friendly geometry for finite-difference gradient checks.
    /// The 4x4 first-stage grid with window 2 exercises the shifted,
    /// masked attention path.
    pub fn gradcheck_reduced() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::SwinLip,
            frames: 3,
            height: 44,
            width: 44,
            stem: StemSpec {
                channels: 8,
                ..StemSpec::default_24()
            },
            patch: 11,
            stages: [
                StageSpec { channels: 16, depth: 2, window: 2, heads: 2 },
                StageSpec { channels: 32, depth: 2, window: 2, heads: 4 },
                StageSpec { channels: 64, depth: 2, window: 1, heads: 8 },
            ],
            temporal: TemporalSpec {
                dim: 128,
                heads: 4,
                hidden: 128,
                kernel: 3,
                blocks: 2,
                dropout: 0.0,
                streaming: false,
            },
            seed: 0,
        }
    }

    /// Reduced width at full input resolution, for fast end-to-end
    /// optimization checks.
    pub fn overfit_reduced() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::SwinLip,
            frames: 8,
            height: 88,
            width: 88,
            stem: StemSpec {
                channels: 4,
                ..StemSpec::default_24()
            },
            patch: 11,
            stages: [
                StageSpec { channels: 16, depth: 2, window: 4, heads: 2 },
                StageSpec { channels: 32, depth: 2, window: 4, heads: 4 },
                StageSpec { channels: 64, depth: 2, window: 2, heads: 8 },
            ],
            temporal: TemporalSpec {
                dim: 128,
                heads: 4,
                hidden: 128,
                kernel: 5,
                blocks: 2,
                dropout: 0.0,
                streaming: false,
            },
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<ModelConfig> {
        match name {
            "swinlip" => Ok(ModelConfig::swinlip()),
            "streaming" => Ok(ModelConfig::streaming()),
            "stem577" => Ok(ModelConfig::stem_577()),
            "resnet18" => Ok(ModelConfig::resnet18()),
            "gradcheck" => Ok(ModelConfig::gradcheck_reduced()),
            "overfit" => Ok(ModelConfig::overfit_reduced()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected swinlip, streaming, stem577, \
                 resnet18, gradcheck, or overfit)"
            ))),
        }
    }

    /// Swin specification implied by this config.
    pub fn swin_spec(&self) -> SwinSpec {
        SwinSpec {
            patch: self.patch,
            in_channels: self.stem.channels,
            stages: self.stages,
        }
    }

    /// Check internal consistency; every constructor of a model goes
    /// through this.
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("input.frames must be at least 1".to_string()));
        }
        match self.kind {
            ModelKind::ResNet18 => {
                resnet::resolutions(self.height, self.width)?;
            }
            ModelKind::SwinLip => {
                let k = self.stem.kernel;
                let st = self.stem.stride;
                let p = self.stem.pad;
                if k.0 == 0 || k.1 == 0 || k.2 == 0 || st.0 == 0 || st.1 == 0 || st.2 == 0 {
                    return Err(Error::config(
                        "stem.kernel and stem.stride components must be at least 1".to_string(),
                    ));
                }
                if self.height + 2 * p.1 < k.1 || self.width + 2 * p.2 < k.2 {
                    return Err(Error::config(format!(
                        "stem kernel {}x{} exceeds the padded {}x{} input",
                        k.1, k.2, self.height, self.width
                    )));
                }
                if self.stem.channels == 0 {
                    return Err(Error::config("stem.channels must be at least 1".to_string()));
                }
                let (sh, sw) = self.stem.out_hw(self.height, self.width);
                let spec = self.swin_spec();
                spec.plan(sh, sw)?;
                if spec.out_dim() != self.temporal.dim {
                    return Err(Error::config(format!(
                        "temporal.dim {} does not match the {}-wide hierarchy output",
                        self.temporal.dim,
                        spec.out_dim()
                    )));
                }
                let t = &self.temporal;
                if t.dim == 0 || t.heads == 0 || t.dim % t.heads != 0 {
                    return Err(Error::config(format!(
                        "temporal.dim {} must be a positive multiple of temporal.heads {}",
                        t.dim, t.heads
                    )));
                }
                if t.dim % 2 != 0 {
                    return Err(Error::config(
                        "temporal.dim must be even for the sinusoid table".to_string(),
                    ));
                }
                if t.hidden == 0 || t.blocks == 0 {
                    return Err(Error::config(
                        "temporal.hidden and temporal.blocks must be at least 1".to_string(),
                    ));
                }
                if t.kernel == 0 || (!t.streaming && t.kernel % 2 == 0) {
                    return Err(Error::config(format!(
                        "temporal.kernel {} must be odd for the centered convolution",
                        t.kernel
                    )));
                }
                if !(0.0..1.0).contains(&t.dropout) {
                    return Err(Error::config(format!(
                        "temporal.dropout {} must lie in [0, 1)",
                        t.dropout
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parse the `key = value` text format. Unknown keys and malformed
    /// values are rejected with their line number. Omitted keys keep the
    /// default (full-encoder) values.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::swinlip();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config_at(line_no, format!("expected `key = value`, got `{line}`"))
            })?;
            cfg.apply(key.trim(), value.trim(), line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<ModelConfig> {
        let text = std::fs::read_to_string(path)?;
        ModelConfig::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |what: &str| Error::config_at(line, format!("invalid {what}: `{value}`"));
        let usize_v = || value.parse::<usize>().map_err(|_| bad("integer"));
        let triple = || -> Result<(usize, usize, usize)> {
            let parts: Vec<_> = value.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(bad("triple (expected `t,h,w`)"));
            }
            let mut n = [0usize; 3];
            for (slot, p) in n.iter_mut().zip(&parts) {
                *slot = p.parse().map_err(|_| bad("triple (expected `t,h,w`)"))?;
            }
            Ok((n[0], n[1], n[2]))
        };
        match key {
            "model.kind" => {
                self.kind = match value {
                    "swinlip" => ModelKind::SwinLip,
                    "resnet18" => ModelKind::ResNet18,
                    _ => return Err(bad("model kind (swinlip or resnet18)")),
                }
            }
            "input.frames" => self.frames = usize_v()?,
            "input.height" => self.height = usize_v()?,
            "input.width" => self.width = usize_v()?,
            "stem.kernel" => self.stem.kernel = triple()?,
            "stem.stride" => self.stem.stride = triple()?,
            "stem.pad" => self.stem.pad = triple()?,
            "stem.channels" => self.stem.channels = usize_v()?,
            "stem.activation" => {
                self.stem.activation = match value {
                    "prelu" => StemActivation::PRelu,
                    "relu" => StemActivation::Relu,
                    _ => return Err(bad("activation (prelu or relu)")),
                }
            }
            "patch.size" => self.patch = usize_v()?,
            "stage1.channels" => self.stages[0].channels = usize_v()?,
            "stage1.depth" => self.stages[0].depth = usize_v()?,
            "stage1.window" => self.stages[0].window = usize_v()?,
            "stage1.heads" => self.stages[0].heads = usize_v()?,
            "stage2.channels" => self.stages[1].channels = usize_v()?,
            "stage2.depth" => self.stages[1].depth = usize_v()?,
            "stage2.window" => self.stages[1].window = usize_v()?,
            "stage2.heads" => self.stages[1].heads = usize_v()?,
            "stage3.channels" => self.stages[2].channels = usize_v()?,
            "stage3.depth" => self.stages[2].depth = usize_v()?,
            "stage3.window" => self.stages[2].window = usize_v()?,
            "stage3.heads" => self.stages[2].heads = usize_v()?,
            "temporal.dim" => self.temporal.dim = usize_v()?,
            "temporal.heads" => self.temporal.heads = usize_v()?,
            "temporal.hidden" => self.temporal.hidden = usize_v()?,
            "temporal.kernel" => self.temporal.kernel = usize_v()?,
            "temporal.blocks" => self.temporal.blocks = usize_v()?,
            "temporal.dropout" => {
                self.temporal.dropout = value.parse::<f64>().map_err(|_| bad("number"))?
            }
            "temporal.streaming" => {
                self.temporal.streaming = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad("boolean (true or false)")),
                }
            }
            "seed" => self.seed = value.parse::<u64>().map_err(|_| bad("seed"))?,
            other => {
                return Err(Error::config_at(line, format!("unknown key `{other}`")));
            }
        }
        Ok(())
    }

    /// Deterministic full serialization; `parse` of this text reproduces
    /// the config exactly.
    pub fn canonical_string(&self) -> String {
        let act = match self.stem.activation {
            StemActivation::PRelu => "prelu",
            StemActivation::Relu => "relu",
        };
        let mut s = String::new();
        s.push_str(&format!("model.kind = {}\n", self.kind.label()));
        s.push_str(&format!("input.frames = {}\n", self.frames));
        s.push_str(&format!("input.height = {}\n", self.height));
        s.push_str(&format!("input.width = {}\n", self.width));
        let (k, st, p) = (self.stem.kernel, self.stem.stride, self.stem.pad);
        s.push_str(&format!("stem.kernel = {},{},{}\n", k.0, k.1, k.2));
        s.push_str(&format!("stem.stride = {},{},{}\n", st.0, st.1, st.2));
        s.push_str(&format!("stem.pad = {},{},{}\n", p.0, p.1, p.2));
        s.push_str(&format!("stem.channels = {}\n", self.stem.channels));
        s.push_str(&format!("stem.activation = {act}\n"));
        s.push_str(&format!("patch.size = {}\n", self.patch));
        for (i, stg) in self.stages.iter().enumerate() {
            let n = i + 1;
            s.push_str(&format!("stage{n}.channels = {}\n", stg.channels));
            s.push_str(&format!("stage{n}.depth = {}\n", stg.depth));
            s.push_str(&format!("stage{n}.window = {}\n", stg.window));
            s.push_str(&format!("stage{n}.heads = {}\n", stg.heads));
        }
        let t = &self.temporal;
        s.push_str(&format!("temporal.dim = {}\n", t.dim));
        s.push_str(&format!("temporal.heads = {}\n", t.heads));
        s.push_str(&format!("temporal.hidden = {}\n", t.hidden));
        s.push_str(&format!("temporal.kernel = {}\n", t.kernel));
        s.push_str(&format!("temporal.blocks = {}\n", t.blocks));
        s.push_str(&format!("temporal.dropout = {}\n", t.dropout));
        s.push_str(&format!("temporal.streaming = {}\n", t.streaming));
        s.push_str(&format!("seed = {}\n", self.seed));
        s
    }

    /// SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}
