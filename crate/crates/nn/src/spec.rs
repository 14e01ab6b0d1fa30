use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial tensor shape in `(time, width, channels)` order, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub len: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub fn new(len: usize, width: usize, channels: usize) -> Self {
        Self {
            len,
            width,
            channels,
        }
    }

    pub fn size(&self) -> usize {
        self.len * self.width * self.channels
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.len, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial(Shape3),
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match self {
            Shape::Spatial(s) => s.size(),
            Shape::Flat(n) => *n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial(s) => s.fmt(f),
            Shape::Flat(n) => write!(f, "({n})"),
        }
    }
}

/// One layer of a model. Convolutions use unit stride and valid padding; pooling
/// runs along the time axis only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        filters: usize,
        filter_len: usize,
        filter_width: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    MaxPool {
        pool: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Affine projection onto `classes` logits followed by softmax.
    Softmax {
        classes: usize,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Dropout { .. } => "dropout",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::Softmax { .. } => "softmax",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, index: usize, input: Shape) -> Result<Shape> {
        let err = |detail: String| NnError::Shape {
            layer: index,
            kind: self.kind(),
            detail,
        };
        match (*self, input) {
            (
                Layer::Conv {
                    filters,
                    filter_len,
                    filter_width,
                    ..
                },
                Shape::Spatial(s),
            ) => {
                if filters == 0 || filter_len == 0 || filter_width == 0 {
                    return Err(err("zero-sized filter bank".into()));
                }
                if filter_len > s.len || filter_width > s.width {
                    return Err(err(format!(
                        "filter {filter_len}x{filter_width} does not fit input {s}"
                    )));
                }
                Ok(Shape::Spatial(Shape3::new(
                    s.len - filter_len + 1,
                    s.width - filter_width + 1,
                    filters,
                )))
            }
            (Layer::MaxPool { pool, stride }, Shape::Spatial(s)) => {
                if pool == 0 || stride == 0 {
                    return Err(err("zero pool or stride".into()));
                }
                if pool > s.len {
                    return Err(err(format!("pool {pool} longer than input {s}")));
                }
                Ok(Shape::Spatial(Shape3::new(
                    (s.len - pool) / stride + 1,
                    s.width,
                    s.channels,
                )))
            }
            (Layer::Dropout { rate }, shape) => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(err(format!("rate {rate} outside [0, 1)")));
                }
                Ok(shape)
            }
            (Layer::Flatten, shape) => Ok(Shape::Flat(shape.size())),
            (Layer::Dense { units, .. }, Shape::Flat(_)) => {
                if units == 0 {
                    return Err(err("zero units".into()));
                }
                Ok(Shape::Flat(units))
            }
            (Layer::Softmax { classes }, Shape::Flat(_)) => {
                if classes < 2 {
                    return Err(err("need at least two classes".into()));
                }
                Ok(Shape::Flat(classes))
            }
            (layer, shape) => Err(err(format!(
                "cannot accept input of shape {shape} ({} layers need {} input)",
                layer.kind(),
                if matches!(layer, Layer::Dense { .. } | Layer::Softmax { .. }) {
                    "flat"
                } else {
                    "spatial"
                }
            ))),
        }
    }
}

/// An ordered layer list plus the input shape it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: Shape3,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    pub fn new(input: Shape3, layers: Vec<Layer>) -> Self {
        Self { input, layers }
    }

    /// Output shape of every layer, validating the chain and the softmax head.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input.size() == 0 {
            return Err(NnError::InvalidSpec(format!(
                "empty input shape {}",
                self.input
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = Shape::Spatial(self.input);
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Softmax { .. }) && i + 1 != self.layers.len() {
                return Err(NnError::Shape {
                    layer: i,
                    kind: layer.kind(),
                    detail: "softmax head must be the final layer".into(),
                });
            }
            current = layer.output_shape(i, current)?;
            shapes.push(current);
        }
        match self.layers.last() {
            Some(Layer::Softmax { .. }) => Ok(shapes),
            _ => Err(NnError::InvalidSpec(
                "final layer must be a softmax head".into(),
            )),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax { classes }) => *classes,
            _ => 0,
        }
    }

    /// One-line summary such as `conv64x16x2-drop0-pool5/5-flat-dense100-drop0-softmax3`.
    pub fn summary(&self) -> String {
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Conv {
                    filters,
                    filter_len,
                    filter_width,
                    activation,
                } => format!("conv{filters}x{filter_len}x{filter_width}{activation}"),
                Layer::Dropout { rate } => format!("drop{rate}"),
                Layer::MaxPool { pool, stride } => format!("pool{pool}/{stride}"),
                Layer::Flatten => "flat".to_string(),
                Layer::Dense { units, activation } => format!("dense{units}{activation}"),
                Layer::Softmax { classes } => format!("softmax{classes}"),
            })
            .collect::<Vec<_>>()
            .join("-")
    }
}
