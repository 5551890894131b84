//! JSON layer-list description of a network. The same schema is the manifest
//! of a model file.

use serde::{Deserialize, Serialize};

use super::{Layer, NetworkModel};
use crate::error::{Error, Result};
use crate::sampling::{circular_permutations, Factors, MuxOutSpec, Permutation};
use crate::tensor::{ConvKernel, Padding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub color_channels: usize,
    #[serde(default)]
    pub noise_channels: usize,
    /// Input height/width must be multiples of this.
    #[serde(default = "unit_factors")]
    pub divisor: Factors,
}

fn unit_factors() -> Factors {
    Factors::unit()
}

fn three() -> usize {
    3
}

impl InputSpec {
    pub fn new(color_channels: usize, noise_channels: usize) -> Self {
        InputSpec {
            color_channels,
            noise_channels,
            divisor: Factors::unit(),
        }
    }

    pub fn features(&self) -> usize {
        self.color_channels + self.noise_channels
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv {
        in_features: usize,
        out_features: usize,
        #[serde(default = "three")]
        kernel_h: usize,
        #[serde(default = "three")]
        kernel_w: usize,
        #[serde(default)]
        padding: Padding,
    },
    Activ {
        features: usize,
    },
    TanhActiv {
        features: usize,
    },
    Muxout {
        factors: Factors,
        g_in: usize,
        g_out: usize,
        /// 0-based permutations over the `M` grids; circular when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        permutations: Option<Vec<Permutation>>,
    },
    TMuxout {
        factors: Factors,
        g_in: usize,
        g_out: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        permutations: Option<Vec<Permutation>>,
    },
    GlobalAvg,
}

fn mux_spec(factors: Factors, g_in: usize, g_out: usize, perms: &Option<Vec<Permutation>>) -> Result<MuxOutSpec> {
    let perms = perms
        .clone()
        .unwrap_or_else(|| circular_permutations(factors.count(), g_out));
    if perms.len() != g_out {
        return Err(Error::dim(format!(
            "g_out={g_out} but {} permutations given",
            perms.len()
        )));
    }
    MuxOutSpec::new(factors, g_in, perms)
}

impl LayerConfig {
    /// Builds the layer with zeroed parameters.
    pub fn build(&self) -> Result<Layer> {
        Ok(match self {
            LayerConfig::Conv {
                in_features,
                out_features,
                kernel_h,
                kernel_w,
                padding,
            } => Layer::Conv {
                kernel: ConvKernel::zeros(*out_features, *in_features, *kernel_h, *kernel_w)?,
                padding: *padding,
            },
            LayerConfig::Activ { features } => Layer::relu(*features),
            LayerConfig::TanhActiv { features } => Layer::tanh(*features),
            LayerConfig::Muxout {
                factors,
                g_in,
                g_out,
                permutations,
            } => Layer::MuxOut(mux_spec(*factors, *g_in, *g_out, permutations)?),
            LayerConfig::TMuxout {
                factors,
                g_in,
                g_out,
                permutations,
            } => Layer::TMuxOut(mux_spec(*factors, *g_in, *g_out, permutations)?),
            LayerConfig::GlobalAvg => Layer::GlobalAvg,
        })
    }

    pub fn from_layer(layer: &Layer) -> Self {
        match layer {
            Layer::Conv { kernel, padding } => LayerConfig::Conv {
                in_features: kernel.in_features(),
                out_features: kernel.out_features(),
                kernel_h: kernel.kernel_h(),
                kernel_w: kernel.kernel_w(),
                padding: *padding,
            },
            Layer::Activ { bias } => LayerConfig::Activ { features: bias.len() },
            Layer::TanhActiv { bias } => LayerConfig::TanhActiv { features: bias.len() },
            Layer::MuxOut(s) => LayerConfig::Muxout {
                factors: s.factors,
                g_in: s.g_in,
                g_out: s.g_out,
                permutations: Some(s.permutations.clone()),
            },
            Layer::TMuxOut(s) => LayerConfig::TMuxout {
                factors: s.factors,
                g_in: s.g_in,
                g_out: s.g_out,
                permutations: Some(s.permutations.clone()),
            },
            Layer::GlobalAvg => LayerConfig::GlobalAvg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub name: String,
    pub input: InputSpec,
    #[serde(default)]
    pub metadata: Metadata,
    pub layers: Vec<LayerConfig>,
}

impl ArchitectureConfig {
    pub fn from_model(model: &NetworkModel) -> Self {
        ArchitectureConfig {
            name: model.name.clone(),
            input: model.input,
            metadata: model.metadata.clone(),
            layers: model.layers.iter().map(LayerConfig::from_layer).collect(),
        }
    }

    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// A model with zeroed parameters; shapes are checked end to end.
    pub fn build(&self) -> Result<NetworkModel> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.build().map_err(|e| Error::Config {
                    path: format!("layers[{i}]"),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = NetworkModel::new(self.name.clone(), self.input, layers)?;
        model.metadata = self.metadata.clone();
        Ok(model)
    }
}
