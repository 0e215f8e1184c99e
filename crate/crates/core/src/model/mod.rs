//! Model assembly: configuration, parameter registry, checkpoint store,
//! and the end-to-end clip encoders.

pub mod config;
pub mod params;
pub mod store;

pub use config::{ModelConfig, ModelKind};
pub use params::Params;

use crate::error::{Error, Result};
use crate::resnet::{init_resnet, resnet_forward};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::stem::{init_stem, stem_forward, BnUpdate, Mode};
use crate::swin::{init_swin, swin_forward};
use crate::temporal::{init_temporal, temporal_forward};
use crate::tensor::Tensor;

/// Parameter-name prefixes for the sub-modules.
pub const STEM_PREFIX: &str = "stem";
pub const SWIN_PREFIX: &str = "swin";
pub const TEMPORAL_PREFIX: &str = "tmp";
pub const RESNET_PREFIX: &str = "res";

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: Params<S>,
}

impl<S: Scalar> std::fmt::Debug for Model<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.config.kind)
            .field("tensors", &self.params.len())
            .finish()
    }
}

impl<S: Scalar> Model<S> {
    /// Initialize fresh parameters from the config's seed.
    pub fn build(config: &ModelConfig) -> Result<Model<S>> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let mut params = Params::new();
        match config.kind {
            ModelKind::SwinLip => {
                init_stem(&mut params, &mut rng, STEM_PREFIX, config.stem)?;
                let (h, w) = config.stem.out_hw(config.height, config.width);
                init_swin(&mut params, &mut rng, SWIN_PREFIX, &config.swin_spec(), h, w)?;
                init_temporal(&mut params, &mut rng, TEMPORAL_PREFIX, &config.temporal)?;
            }
            ModelKind::ResNet18 => {
                init_resnet(&mut params, &mut rng, RESNET_PREFIX)?;
            }
        }
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    /// Per-frame feature width of the encoder output.
    pub fn output_dim(&self) -> usize {
        match self.config.kind {
            ModelKind::SwinLip => self.config.temporal.dim,
            ModelKind::ResNet18 => crate::resnet::OUT_DIM,
        }
    }

    /// Encode one clip `[T, H, W, 1]` into `[T, output_dim]`.
    pub fn forward(
        &self,
        x: &Tensor<S>,
        mode: Mode,
        updates: Option<&mut Vec<BnUpdate<S>>>,
        rng: Option<&mut SeededRng>,
    ) -> Result<Tensor<S>> {
        forward_clip(&self.params, &self.config, x, mode, updates, rng)
    }
}

/// Encoder forward pass usable with any parameter set sharing the model's
/// names — in particular tape-bound copies during training.
pub fn forward_clip<S: Scalar>(
    params: &Params<S>,
    config: &ModelConfig,
    x: &Tensor<S>,
    mode: Mode,
    mut updates: Option<&mut Vec<BnUpdate<S>>>,
    rng: Option<&mut SeededRng>,
) -> Result<Tensor<S>> {
    if x.shape().len() != 4
        || x.shape()[1] != config.height
        || x.shape()[2] != config.width
        || x.shape()[3] != 1
    {
        return Err(Error::InvalidShape {
            op: "forward_clip",
            msg: format!(
                "expected [T, {}, {}, 1] input",
                config.height, config.width
            ),
            shape: x.shape().to_vec(),
        });
    }
    match config.kind {
        ModelKind::ResNet18 => resnet_forward(params, RESNET_PREFIX, x, mode, updates),
        ModelKind::SwinLip => {
            let y = stem_forward(
                params,
                STEM_PREFIX,
                x,
                config.stem,
                mode,
                updates.as_deref_mut(),
            )?;
            let y = swin_forward(params, SWIN_PREFIX, &y, &config.swin_spec())?;
            temporal_forward(params, TEMPORAL_PREFIX, &y, &config.temporal, mode, rng)
        }
    }
}
