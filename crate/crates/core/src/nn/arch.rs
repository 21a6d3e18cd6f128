use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer kinds the engine knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    /// Weight shape of a prunable layer: `(out, in, k, k)` or `(out, in)`.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some(vec![out_ch, in_ch, kernel, kernel]),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d { in_ch, kernel, .. } => Some(in_ch * kernel * kernel),
            LayerKind::Linear { in_features, .. } => Some(in_features),
            _ => None,
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let &[c, h, w] = input else {
                    return Err(format!("conv expects (C, H, W), got {input:?}"));
                };
                if c != in_ch {
                    return Err(format!("conv expects {in_ch} channels, got {c}"));
                }
                if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(format!("{h}x{w} input too small for kernel {kernel}"));
                }
                Ok(vec![
                    out_ch,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(format!("linear expects [{in_features}], got {input:?}"));
                }
                Ok(vec![out_features])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel } => {
                let &[c, h, w] = input else {
                    return Err(format!("pool expects (C, H, W), got {input:?}"));
                };
                if kernel == 0 || h < kernel || w < kernel {
                    return Err(format!("{h}x{w} input too small for pool {kernel}"));
                }
                Ok(vec![c, h / kernel, w / kernel])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Named architectures.
///
/// `Mlp` lists every layer width including input and output, so
/// `Mlp([4, 3, 2])` is `Linear(4, 3) -> ReLU -> Linear(3, 2)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ArchId {
    LeNet,
    TinyConv,
    Mlp(Vec<usize>),
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchId::LeNet => f.write_str("lenet"),
            ArchId::TinyConv => f.write_str("tinyconv"),
            ArchId::Mlp(widths) => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "mlp[{}]", w.join(","))
            }
        }
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "lenet" => return Ok(ArchId::LeNet),
            "tinyconv" => return Ok(ArchId::TinyConv),
            _ => {}
        }
        if let Some(rest) = lower.strip_prefix("mlp[").and_then(|r| r.strip_suffix(']')) {
            let widths = rest
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::UnknownArch(s.to_string()))?;
            return Ok(ArchId::Mlp(widths));
        }
        Err(Error::UnknownArch(s.to_string()))
    }
}

impl TryFrom<String> for ArchId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ArchId> for String {
    fn from(a: ArchId) -> String {
        a.to_string()
    }
}

impl ArchId {
    /// Layer list for a per-example `input_shape` and class count.
    pub fn layers(&self, input_shape: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
        let incompatible = |reason: String| Error::IncompatibleInput {
            arch: self.to_string(),
            input: input_shape.to_vec(),
            reason,
        };
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        let conv = |in_ch, out_ch| LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 0,
        };
        let linear = |i, o| LayerKind::Linear {
            in_features: i,
            out_features: o,
        };
        let layers = match self {
            ArchId::LeNet => {
                let &[c, _, _] = input_shape else {
                    return Err(incompatible("expected (C, H, W)".into()));
                };
                let head = vec![
                    LayerSpec::new("conv1", conv(c, 6)),
                    LayerSpec::new("relu1", LayerKind::Relu),
                    LayerSpec::new("pool1", LayerKind::MaxPool2d { kernel: 2 }),
                    LayerSpec::new("conv2", conv(6, 16)),
                    LayerSpec::new("relu2", LayerKind::Relu),
                    LayerSpec::new("pool2", LayerKind::MaxPool2d { kernel: 2 }),
                    LayerSpec::new("flatten", LayerKind::Flatten),
                ];
                let flat = trace_shape(&head, input_shape).map_err(incompatible)?[0];
                let mut layers = head;
                layers.extend([
                    LayerSpec::new("fc1", linear(flat, 120)),
                    LayerSpec::new("relu3", LayerKind::Relu),
                    LayerSpec::new("fc2", linear(120, 84)),
                    LayerSpec::new("relu4", LayerKind::Relu),
                    LayerSpec::new("fc3", linear(84, num_classes)),
                ]);
                layers
            }
            ArchId::TinyConv => {
                let &[c, _, _] = input_shape else {
                    return Err(incompatible("expected (C, H, W)".into()));
                };
                let head = vec![
                    LayerSpec::new("conv1", conv(c, 8)),
                    LayerSpec::new("relu1", LayerKind::Relu),
                    LayerSpec::new("pool1", LayerKind::MaxPool2d { kernel: 2 }),
                    LayerSpec::new("flatten", LayerKind::Flatten),
                ];
                let flat = trace_shape(&head, input_shape).map_err(incompatible)?[0];
                let mut layers = head;
                layers.push(LayerSpec::new("fc1", linear(flat, num_classes)));
                layers
            }
            ArchId::Mlp(widths) => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::InvalidArgument(format!(
                        "mlp needs at least two positive widths, got {widths:?}"
                    )));
                }
                let flat: usize = input_shape.iter().product();
                if flat != widths[0] {
                    return Err(incompatible(format!(
                        "mlp input width {} != {flat} input features",
                        widths[0]
                    )));
                }
                if *widths.last().unwrap() != num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "mlp output width {} != {num_classes} classes",
                        widths.last().unwrap()
                    )));
                }
                let mut layers = Vec::new();
                if input_shape.len() != 1 {
                    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
                }
                let n = widths.len() - 1;
                for (i, pair) in widths.windows(2).enumerate() {
                    layers.push(LayerSpec::new(format!("fc{}", i + 1), linear(pair[0], pair[1])));
                    if i + 1 < n {
                        layers.push(LayerSpec::new(format!("relu{}", i + 1), LayerKind::Relu));
                    }
                }
                layers
            }
        };
        trace_shape(&layers, input_shape).map_err(incompatible)?;
        Ok(layers)
    }
}

/// Propagates a per-example shape through `layers`.
pub fn trace_shape(layers: &[LayerSpec], input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    let mut shape = input.to_vec();
    for layer in layers {
        shape = layer
            .kind
            .output_shape(&shape)
            .map_err(|e| format!("layer `{}`: {e}", layer.name))?;
    }
    Ok(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_on_mnist_shapes() {
        let layers = ArchId::LeNet.layers(&[1, 28, 28], 10).unwrap();
        let shapes: Vec<Vec<usize>> = layers.iter().filter_map(|l| l.kind.weight_shape()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![6, 1, 3, 3],
                vec![16, 6, 3, 3],
                vec![120, 400],
                vec![84, 120],
                vec![10, 84],
            ]
        );
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, 59_838);
    }

    #[test]
    fn mlp_shapes() {
        let layers = ArchId::Mlp(vec![4, 3, 2]).layers(&[4], 2).unwrap();
        let shapes: Vec<Vec<usize>> = layers.iter().filter_map(|l| l.kind.weight_shape()).collect();
        assert_eq!(shapes, vec![vec![3, 4], vec![2, 3]]);
    }

    #[test]
    fn incompatible_inputs() {
        assert!(matches!(
            ArchId::LeNet.layers(&[1, 4, 4], 10),
            Err(Error::IncompatibleInput { .. })
        ));
        assert!(ArchId::LeNet.layers(&[784], 10).is_err());
        assert!(ArchId::Mlp(vec![5, 2]).layers(&[4], 2).is_err());
        assert!(ArchId::LeNet.layers(&[1, 28, 28], 1).is_err());
    }

    #[test]
    fn arch_names_round_trip() {
        for arch in [ArchId::LeNet, ArchId::TinyConv, ArchId::Mlp(vec![784, 32, 10])] {
            assert_eq!(arch.to_string().parse::<ArchId>().unwrap(), arch);
        }
        assert!("resnet".parse::<ArchId>().is_err());
    }
}
