use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default)]
        padding: Padding,
        #[serde(default)]
        activation: Activation,
    },
    MaxPool {
        size: usize,
    },
    Dropout {
        rate: f32,
    },
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel,
            padding: Padding::Valid,
            activation: Activation::Relu,
        }
    }

    pub fn conv_same(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel,
            padding: Padding::Same,
            activation: Activation::Relu,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            activation: Activation::Relu,
        }
    }

    pub fn head(classes: usize) -> Self {
        LayerSpec::Dense {
            units: classes,
            activation: Activation::Softmax,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Layer stack plus input shape `(height, width, channels)` and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Output shape after each layer, as `(channels, height, width)`; dense
/// outputs are `(units, 1, 1)`.
pub type Shape = (usize, usize, usize);

impl ArchitectureSpec {
    /// Walk the stack and return every intermediate shape, input first.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(NnError::Spec("input shape has a zero dimension".into()));
        }
        if self.classes < 2 {
            return Err(NnError::Spec("at least two classes are required".into()));
        }
        let mut shapes = vec![(c, h, w)];
        let mut cur = (c, h, w);
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    padding,
                    activation,
                } => {
                    if flat {
                        return Err(NnError::Spec(format!("layer {i}: conv after dense")));
                    }
                    if filters == 0 || kernel == 0 {
                        return Err(NnError::Spec(format!("layer {i}: empty conv")));
                    }
                    if activation == Activation::Softmax {
                        return Err(NnError::Spec(format!("layer {i}: softmax conv")));
                    }
                    match padding {
                        Padding::Valid => {
                            if kernel > cur.1 || kernel > cur.2 {
                                return Err(NnError::Spec(format!(
                                    "layer {i}: kernel {kernel} larger than {}x{} input",
                                    cur.1, cur.2
                                )));
                            }
                            (filters, cur.1 - kernel + 1, cur.2 - kernel + 1)
                        }
                        Padding::Same => {
                            if kernel % 2 == 0 {
                                return Err(NnError::Spec(format!("layer {i}: same padding needs odd kernel")));
                            }
                            (filters, cur.1, cur.2)
                        }
                    }
                }
                LayerSpec::MaxPool { size } => {
                    if flat || size == 0 || size > cur.1 || size > cur.2 {
                        return Err(NnError::Spec(format!("layer {i}: bad pooling")));
                    }
                    (cur.0, cur.1 / size, cur.2 / size)
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(NnError::Spec(format!("layer {i}: dropout rate {rate}")));
                    }
                    cur
                }
                LayerSpec::Dense { units, activation } => {
                    if units == 0 {
                        return Err(NnError::Spec(format!("layer {i}: empty dense")));
                    }
                    let last = i + 1 == self.layers.len();
                    if (activation == Activation::Softmax) != last {
                        return Err(NnError::Spec(format!(
                            "layer {i}: softmax must be the final layer and only there"
                        )));
                    }
                    flat = true;
                    (units, 1, 1)
                }
            };
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense {
                units,
                activation: Activation::Softmax,
            }) if *units == self.classes => Ok(shapes),
            _ => Err(NnError::Spec(format!(
                "stack must end in a {}-way softmax dense layer",
                self.classes
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.shapes().map(|_| ())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Named preset. `desk-*` variants halve layer widths for CPU-scale runs.
    pub fn preset(name: &str) -> Option<Self> {
        use LayerSpec as L;
        let gray = [28, 28, 1];
        let rgb = [32, 32, 3];
        let (input, layers) = match name {
            "mnist-cnn" => (
                gray,
                vec![
                    L::conv(64, 5),
                    L::MaxPool { size: 2 },
                    L::conv(128, 5),
                    L::MaxPool { size: 2 },
                    L::dense(256),
                    L::head(10),
                ],
            ),
            "fashion-cnn" => (
                gray,
                vec![
                    L::conv(64, 5),
                    L::MaxPool { size: 2 },
                    L::conv(128, 5),
                    L::MaxPool { size: 2 },
                    L::Dropout { rate: 0.2 },
                    L::dense(256),
                    L::Dropout { rate: 0.2 },
                    L::head(10),
                ],
            ),
            "desk-mnist" => (
                gray,
                vec![
                    L::conv(32, 5),
                    L::MaxPool { size: 2 },
                    L::conv(64, 5),
                    L::MaxPool { size: 2 },
                    L::dense(128),
                    L::head(10),
                ],
            ),
            "desk-fashion" => (
                gray,
                vec![
                    L::conv(32, 5),
                    L::MaxPool { size: 2 },
                    L::conv(64, 5),
                    L::MaxPool { size: 2 },
                    L::Dropout { rate: 0.2 },
                    L::dense(128),
                    L::Dropout { rate: 0.2 },
                    L::head(10),
                ],
            ),
            "cifar-cnn" => (rgb, cifar_stack(&[32, 64, 128, 256], &[128, 256])),
            "desk-cifar" => (rgb, cifar_stack(&[16, 32, 64, 128], &[64, 128])),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            input_shape: input,
            classes: 10,
            layers,
        })
    }

    pub const PRESETS: [&'static str; 6] = [
        "mnist-cnn",
        "fashion-cnn",
        "cifar-cnn",
        "desk-mnist",
        "desk-fashion",
        "desk-cifar",
    ];

    /// Fully connected network with ReLU hidden layers.
    pub fn mlp(input_shape: [usize; 3], hidden: &[usize], classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden.iter().map(|&u| LayerSpec::dense(u)).collect();
        layers.push(LayerSpec::head(classes));
        Self {
            name: "mlp".into(),
            input_shape,
            classes,
            layers,
        }
    }
}

fn cifar_stack(conv: &[usize], fc: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for &f in conv {
        layers.push(LayerSpec::conv_same(f, 3));
        layers.push(LayerSpec::conv_same(f, 3));
        layers.push(LayerSpec::MaxPool { size: 2 });
        layers.push(LayerSpec::Dropout { rate: 0.2 });
    }
    layers.push(LayerSpec::dense(fc[0]));
    layers.push(LayerSpec::Dropout { rate: 0.2 });
    layers.push(LayerSpec::dense(fc[1]));
    layers.push(LayerSpec::head(10));
    layers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_chain() {
        for name in ArchitectureSpec::PRESETS {
            let spec = ArchitectureSpec::preset(name).unwrap();
            let shapes = spec.shapes().unwrap();
            assert_eq!(*shapes.last().unwrap(), (10, 1, 1), "{name}");
        }
        assert!(ArchitectureSpec::preset("vgg19").is_none());
    }

    #[test]
    fn desk_mnist_shapes() {
        let s = ArchitectureSpec::preset("desk-mnist").unwrap().shapes().unwrap();
        assert_eq!(s[1], (32, 24, 24));
        assert_eq!(s[2], (32, 12, 12));
        assert_eq!(s[3], (64, 8, 8));
        assert_eq!(s[4], (64, 4, 4));
    }

    #[test]
    fn rejects_broken_chains() {
        let mut spec = ArchitectureSpec::mlp([4, 4, 1], &[8], 3);
        spec.classes = 4;
        assert!(spec.validate().is_err());
        let bad = ArchitectureSpec {
            name: "x".into(),
            input_shape: [4, 4, 1],
            classes: 2,
            layers: vec![LayerSpec::conv(2, 5), LayerSpec::head(2)],
        };
        assert!(bad.validate().is_err());
        let mid_softmax = ArchitectureSpec {
            name: "x".into(),
            input_shape: [4, 4, 1],
            classes: 2,
            layers: vec![LayerSpec::head(2), LayerSpec::head(2)],
        };
        assert!(mid_softmax.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ArchitectureSpec::preset("fashion-cnn").unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ArchitectureSpec>(&text).unwrap(), spec);
    }
}
