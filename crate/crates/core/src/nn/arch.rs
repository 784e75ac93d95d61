//! Architecture catalog.
//!
//! The desk-scale models are small enough to train on a laptop CPU; the
//! other tags keep the residual, densely connected and legacy shapes of the
//! large reference networks at reduced width.

use serde::{Deserialize, Serialize};

use super::layers::{OpSpec, Shape3};
use super::network::ArchSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Three conv blocks and global pooling, 64-dimensional features.
    DeskCnn,
    /// Residual blocks between downsampling convs.
    DeskResnet,
    /// Densely connected blocks (channel concatenation).
    DeskDensenet,
    /// Shallow legacy design: conv/pool stack with a fully connected feature layer.
    DeskAlexnet,
    /// Tiny smooth (tanh, average pooling) extractor for gradient checks.
    TinySmooth,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::DeskCnn,
        Architecture::DeskResnet,
        Architecture::DeskDensenet,
        Architecture::DeskAlexnet,
        Architecture::TinySmooth,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::DeskCnn => "desk_cnn",
            Architecture::DeskResnet => "desk_resnet",
            Architecture::DeskDensenet => "desk_densenet",
            Architecture::DeskAlexnet => "desk_alexnet",
            Architecture::TinySmooth => "tiny_smooth",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown architecture `{tag}`")))
    }

    pub fn spec(self, input: Shape3, classes: usize) -> ArchSpec {
        use OpSpec::*;
        let conv = |out| Conv { out, kernel: 3 };
        let extractor = match self {
            Architecture::DeskCnn => vec![
                conv(16),
                Relu,
                MaxPool2,
                conv(32),
                Relu,
                MaxPool2,
                conv(64),
                Relu,
                GlobalAvgPool,
            ],
            Architecture::DeskResnet => vec![
                conv(16),
                Relu,
                MaxPool2,
                Residual(vec![conv(16), Relu, conv(16)]),
                Relu,
                conv(32),
                Relu,
                MaxPool2,
                Residual(vec![conv(32), Relu, conv(32)]),
                Relu,
                conv(64),
                Relu,
                GlobalAvgPool,
            ],
            Architecture::DeskDensenet => vec![
                conv(16),
                Relu,
                MaxPool2,
                Concat(vec![conv(12), Relu]),
                Concat(vec![conv(12), Relu]),
                Conv { out: 32, kernel: 1 },
                Relu,
                MaxPool2,
                Concat(vec![conv(16), Relu]),
                Concat(vec![conv(16), Relu]),
                Conv { out: 64, kernel: 1 },
                Relu,
                GlobalAvgPool,
            ],
            Architecture::DeskAlexnet => vec![
                Conv { out: 24, kernel: 5 },
                Relu,
                MaxPool2,
                conv(48),
                Relu,
                MaxPool2,
                conv(48),
                Relu,
                MaxPool2,
                Flatten,
                Dense { out: 128 },
                Relu,
            ],
            Architecture::TinySmooth => vec![conv(4), Tanh, AvgPool2, conv(8), Tanh, GlobalAvgPool],
        };
        ArchSpec {
            tag: self.tag().to_string(),
            input,
            extractor,
            classes,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Network, Normalization};

    #[test]
    fn every_architecture_compiles_on_cifar_shape() {
        for arch in Architecture::ALL {
            let net = Network::new(
                arch.spec(Shape3::new(3, 32, 32), 8),
                Normalization::identity(3),
                0,
            )
            .unwrap();
            assert_eq!(net.classes(), 8);
            if arch != Architecture::TinySmooth {
                assert!(
                    (64..=256).contains(&net.feature_dim()),
                    "{arch}: d={}",
                    net.feature_dim()
                );
            }
            assert_eq!(Architecture::parse(arch.tag()).unwrap(), arch);
        }
    }

    #[test]
    fn unknown_tag_is_rejected() {
        assert!(Architecture::parse("resnet1000").is_err());
    }
}
