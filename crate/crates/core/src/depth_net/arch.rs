use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error};

/// The two toy encoder-decoders. They share an I/O contract but differ in
/// width, activation and skip structure so that transfer between them can
/// be studied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    ModelA,
    ModelB,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::ModelA, Architecture::ModelB];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::ModelA => "ModelA",
            Architecture::ModelB => "ModelB",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "ModelA" | "A" | "a" | "model_a" => Ok(Architecture::ModelA),
            "ModelB" | "B" | "b" | "model_b" => Ok(Architecture::ModelB),
            other => Err(config_err!("unknown architecture id '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    /// Sigmoid followed by the disparity-to-depth mapping.
    DepthHead,
}

/// Name under which skip connections refer to the network input.
pub const INPUT: &str = "input";

/// Where a layer's input comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerInput {
    Previous,
    /// Nearest 2x upsampling of the previous output, optionally concatenated
    /// with the output of an earlier named layer.
    UpsampleConcat(Option<&'static str>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub input: LayerInput,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

const fn conv(
    name: &'static str,
    input: LayerInput,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    activation: Activation,
) -> LayerSpec {
    LayerSpec {
        name,
        input,
        in_channels,
        out_channels,
        kernel,
        stride,
        activation,
    }
}

/// Ordered layer list of an architecture.
pub fn architecture_spec(arch: Architecture) -> Vec<LayerSpec> {
    use Activation::*;
    use LayerInput::*;
    match arch {
        Architecture::ModelA => vec![
            conv("enc1", Previous, 3, 8, 3, 2, Elu),
            conv("enc2", Previous, 8, 16, 3, 2, Elu),
            conv("enc3", Previous, 16, 32, 3, 2, Elu),
            conv("dec3", UpsampleConcat(Some("enc2")), 32 + 16, 12, 3, 1, Elu),
            conv("dec2", UpsampleConcat(Some("enc1")), 12 + 8, 8, 3, 1, Elu),
            conv("dec1", UpsampleConcat(None), 8, 8, 1, 1, Elu),
            conv("head", Previous, 8, 1, 1, 1, DepthHead),
        ],
        Architecture::ModelB => vec![
            conv("enc1", Previous, 3, 12, 3, 2, Relu),
            conv("enc2", Previous, 12, 24, 3, 2, Relu),
            conv("enc3", Previous, 24, 48, 3, 2, Relu),
            conv("dec3", UpsampleConcat(None), 48, 12, 3, 1, Relu),
            conv("dec2", UpsampleConcat(None), 12, 8, 3, 1, Relu),
            conv("dec1", UpsampleConcat(None), 8, 4, 1, 1, Relu),
            conv("head", Previous, 4, 1, 1, 1, DepthHead),
        ],
    }
}

pub fn param_count(arch: Architecture) -> usize {
    architecture_spec(arch).iter().map(LayerSpec::param_count).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts_differ() {
        assert_ne!(param_count(Architecture::ModelA), param_count(Architecture::ModelB));
    }

    #[test]
    fn unknown_id_is_config_error() {
        assert!(matches!("ModelC".parse::<Architecture>(), Err(Error::Config(_))));
        assert_eq!("ModelB".parse::<Architecture>().unwrap(), Architecture::ModelB);
    }

    #[test]
    fn channels_chain() {
        for arch in Architecture::ALL {
            let layers = architecture_spec(arch);
            for pair in layers.windows(2) {
                let extra = match pair[1].input {
                    LayerInput::UpsampleConcat(Some(INPUT)) => 3,
                    LayerInput::UpsampleConcat(Some(skip)) => {
                        layers.iter().find(|l| l.name == skip).unwrap().out_channels
                    }
                    _ => 0,
                };
                assert_eq!(pair[0].out_channels + extra, pair[1].in_channels, "{arch} {}", pair[1].name);
            }
        }
    }
}
