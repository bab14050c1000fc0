use std::fmt;

use crate::error::{invalid_arg, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    /// Parameter-free standardization: per sample for vectors, per sample
    /// and channel for feature maps.
    Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Norm => "norm",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv { .. })
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            _ => vec![],
        }
    }

    pub(crate) fn param_suffixes(&self) -> &'static [&'static str] {
        if self.has_params() {
            &["weight", "bias"]
        } else {
            &[]
        }
    }

    pub(crate) fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 1,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(shape_err!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return Err(shape_err!("conv expects [c, h, w], got {input:?}"));
                };
                if *c != in_channels {
                    return Err(shape_err!("conv expects {in_channels} channels, got {c}"));
                }
                let dim = |d: usize| crate::tensor::kernels::conv_output_dim(d, kernel, stride, padding);
                match (dim(*h), dim(*w)) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(shape_err!("kernel {kernel} does not fit input {input:?} with padding {padding}")),
                }
            }
            LayerKind::MaxPool { size } => {
                let [c, h, w] = input else {
                    return Err(shape_err!("maxpool expects [c, h, w], got {input:?}"));
                };
                if *h < size || *w < size {
                    return Err(shape_err!("maxpool {size} does not fit {input:?}"));
                }
                Ok(vec![*c, h / size, w / size])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Relu | LayerKind::Norm => Ok(input.to_vec()),
        }
    }
}

impl LayerSpec {
    /// Parses `[name:] kind args...`; `position` names unnamed layers.
    pub fn parse(text: &str, position: usize) -> Result<Self> {
        let (name, body) = match text.split_once(':') {
            Some((n, b)) => (Some(n.trim().to_string()), b),
            None => (None, text),
        };
        let mut words = body.split_whitespace();
        let keyword = words
            .next()
            .ok_or_else(|| invalid_arg!("empty layer description `{text}`"))?;
        let mut positional = Vec::new();
        let mut stride = 1;
        let mut padding = 0;
        for w in words {
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| invalid_arg!("`{v}` is not a non-negative integer in `{text}`"))
            };
            if let Some(v) = w.strip_prefix("stride=") {
                stride = num(v)?;
            } else if let Some(v) = w.strip_prefix("padding=") {
                padding = num(v)?;
            } else {
                positional.push(num(w)?);
            }
        }
        let arity = |n: usize| {
            if positional.len() == n {
                Ok(())
            } else {
                Err(invalid_arg!(
                    "`{keyword}` takes {n} size arguments, got {} in `{text}`",
                    positional.len()
                ))
            }
        };
        let kind = match keyword {
            "dense" => {
                arity(2)?;
                LayerKind::Dense {
                    inputs: positional[0],
                    outputs: positional[1],
                }
            }
            "conv" => {
                arity(3)?;
                LayerKind::Conv {
                    in_channels: positional[0],
                    out_channels: positional[1],
                    kernel: positional[2],
                    stride,
                    padding,
                }
            }
            "relu" => {
                arity(0)?;
                LayerKind::Relu
            }
            "maxpool" => {
                arity(1)?;
                LayerKind::MaxPool {
                    size: positional[0],
                }
            }
            "flatten" => {
                arity(0)?;
                LayerKind::Flatten
            }
            "norm" => {
                arity(0)?;
                LayerKind::Norm
            }
            other => return Err(invalid_arg!("unknown layer kind `{other}`")),
        };
        if !matches!(kind, LayerKind::Conv { .. }) && (stride != 1 || padding != 0) {
            return Err(invalid_arg!("stride/padding only apply to conv layers: `{text}`"));
        }
        if let LayerKind::Conv { stride: 0, .. } = kind {
            return Err(invalid_arg!("conv stride must be positive: `{text}`"));
        }
        if kind.param_shapes().iter().flatten().any(|&d| d == 0)
            || matches!(kind, LayerKind::MaxPool { size: 0 })
        {
            return Err(invalid_arg!("layer sizes must be positive: `{text}`"));
        }
        let name = match name {
            Some(n) if n.is_empty() || n.contains(char::is_whitespace) => {
                return Err(invalid_arg!("invalid layer name in `{text}`"))
            }
            Some(n) => n,
            None => format!("{keyword}{position}"),
        };
        Ok(LayerSpec { name, kind })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.kind.keyword())?;
        match self.kind {
            LayerKind::Dense { inputs, outputs } => write!(f, " {inputs} {outputs}"),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                " {in_channels} {out_channels} {kernel} stride={stride} padding={padding}"
            ),
            LayerKind::MaxPool { size } => write!(f, " {size}"),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for (text, pos) in [
            ("dense 8 64", 0),
            ("fc: dense 8 64", 3),
            ("conv 3 16 3 stride=2 padding=1", 1),
            ("maxpool 2", 2),
            ("relu", 4),
            ("flatten", 5),
            ("norm", 6),
        ] {
            let spec = LayerSpec::parse(text, pos).unwrap();
            assert_eq!(LayerSpec::parse(&spec.to_string(), 99).unwrap(), spec);
        }
        assert_eq!(LayerSpec::parse("relu", 4).unwrap().name, "relu4");
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "dense 8", "dense 8 x", "softmax", "relu 3", "dense 8 4 stride=2", "conv 1 1 3 stride=0", "dense 0 4"] {
            assert!(LayerSpec::parse(bad, 0).is_err(), "{bad}");
        }
    }
}
