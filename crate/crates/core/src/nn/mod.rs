//! Encoder and task-head networks built from a [`ModelConfig`].
//!
//! The encoder is `[conv3x3(f) -> relu -> maxpool2x2]` per entry of
//! `conv_filters`, then flatten, a dense feature layer with ReLU, and
//! dropout. The task head maps features to class probabilities.

mod layers;

pub use layers::{
    apply_max_norm, conv2d_forward, dense_forward, dropout_forward, maxpool2d_forward,
    softmax_forward, Mode,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const KERNEL_SIZE: usize = 3;
pub const POOL_WINDOW: usize = 2;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// 3x3 kernel, stride 1, no padding.
    Conv2d { filters: usize },
    /// 2x2 window, stride 2, floor mode.
    MaxPool2d,
    Flatten,
    Dense { units: usize, max_norm: Option<f64> },
    Dropout { rate: f64 },
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv_filters: Vec<usize>,
    pub feature_units: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    /// Column max-norm applied to the feature and head dense weights.
    #[serde(rename = "max_norm_cap")]
    pub head_max_norm: Option<f64>,
    /// Adds a hidden dense(`feature_units`) + ReLU layer to the task head.
    pub deep_head: bool,
    /// Side of the square RGB input images.
    pub input_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_filters: vec![16, 32],
            feature_units: 16,
            dropout_rate: 0.5,
            num_classes: 2,
            head_max_norm: Some(3.0),
            deep_head: false,
            input_side: 224,
        }
    }
}

impl ModelConfig {
    pub fn with_filters(conv_filters: &[usize]) -> Self {
        Self {
            conv_filters: conv_filters.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() {
            return Err(Error::config("conv_filters", "must list at least one layer"));
        }
        if self.conv_filters.contains(&0) {
            return Err(Error::config("conv_filters", "filter counts must be >= 1"));
        }
        if self.feature_units == 0 {
            return Err(Error::config("feature_units", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if let Some(cap) = self.head_max_norm {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::config("max_norm_cap", "must be positive"));
            }
        }
        self.flatten_dim().map(|_| ())
    }

    /// Spatial side after each conv + pool block.
    pub fn spatial_trace(&self) -> Result<Vec<usize>> {
        let mut side = self.input_side;
        let mut trace = vec![side];
        for (i, _) in self.conv_filters.iter().enumerate() {
            if side < KERNEL_SIZE {
                return Err(Error::config(
                    "conv_filters",
                    format!("input side {} collapses before conv layer {}", self.input_side, i + 1),
                ));
            }
            side -= KERNEL_SIZE - 1;
            trace.push(side);
            if side < POOL_WINDOW {
                return Err(Error::config(
                    "conv_filters",
                    format!("input side {} collapses before pool layer {}", self.input_side, i + 1),
                ));
            }
            side /= POOL_WINDOW;
            trace.push(side);
        }
        Ok(trace)
    }

    /// Width of the flattened encoder activation fed to the feature layer.
    pub fn flatten_dim(&self) -> Result<usize> {
        let side = *self.spatial_trace()?.last().expect("trace is never empty");
        let channels = *self.conv_filters.last().expect("validated non-empty");
        Ok(side * side * channels)
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        for &filters in &self.conv_filters {
            layers.extend([
                LayerSpec::Conv2d { filters },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
            ]);
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: self.feature_units,
                max_norm: self.head_max_norm,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout {
                rate: self.dropout_rate,
            },
        ]);
        layers
    }

    pub fn head_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        if self.deep_head {
            layers.extend([
                LayerSpec::Dense {
                    units: self.feature_units,
                    max_norm: self.head_max_norm,
                },
                LayerSpec::Relu,
            ]);
        }
        layers.extend([
            LayerSpec::Dense {
                units: self.num_classes,
                max_norm: self.head_max_norm,
            },
            LayerSpec::Softmax,
        ]);
        layers
    }
}

/// A trainable tensor with an optional column max-norm constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub max_norm: Option<f64>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub features: Var,
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    encoder: Vec<LayerSpec>,
    head: Vec<LayerSpec>,
    params: Vec<Parameter>,
}

/// Builds a model with seeded He-uniform weights and zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = config.encoder_layers();
    let head = config.head_layers();
    let mut params = Vec::new();
    let mut channels = INPUT_CHANNELS;
    let mut width = config.flatten_dim()?;
    let mut conv_index = 0;
    let mut dense_index = 0;
    let dense_total = encoder
        .iter()
        .chain(&head)
        .filter(|l| matches!(l, LayerSpec::Dense { .. }))
        .count();
    for layer in encoder.iter().chain(&head) {
        match *layer {
            LayerSpec::Conv2d { filters } => {
                conv_index += 1;
                let fan_in = KERNEL_SIZE * KERNEL_SIZE * channels;
                params.push(Parameter {
                    name: format!("conv{conv_index}.kernel"),
                    value: he_uniform(&[KERNEL_SIZE, KERNEL_SIZE, channels, filters], fan_in, &mut rng)?,
                    max_norm: None,
                });
                params.push(Parameter {
                    name: format!("conv{conv_index}.bias"),
                    value: Tensor::zeros(&[filters])?,
                    max_norm: None,
                });
                channels = filters;
            }
            LayerSpec::Dense { units, max_norm } => {
                let name = match dense_index {
                    0 => "features".to_string(),
                    i if i + 1 == dense_total => "head".to_string(),
                    i => format!("head_hidden{i}"),
                };
                dense_index += 1;
                params.push(Parameter {
                    name: format!("{name}.weight"),
                    value: he_uniform(&[width, units], width, &mut rng)?,
                    max_norm,
                });
                params.push(Parameter {
                    name: format!("{name}.bias"),
                    value: Tensor::zeros(&[units])?,
                    max_norm: None,
                });
                width = units;
            }
            _ => {}
        }
    }
    for p in &mut params {
        p.value = p.value.clone().with_requires_grad(true);
    }
    Ok(Model {
        config: config.clone(),
        encoder,
        head,
        params,
    })
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())?)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &[LayerSpec] {
        &self.encoder
    }

    pub fn task_head(&self) -> &[LayerSpec] {
        &self.head
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Records every parameter as a constant (no gradients, no saved patches).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// Runs encoder and task head on `[N, side, side, 3]` images.
    ///
    /// `params` must come from [`Model::bind`] or [`Model::bind_frozen`] on the same graph.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Var],
        images: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let side = self.config.input_side;
        match *g.shape(images) {
            [_, h, w, INPUT_CHANNELS] if h == side && w == side => {}
            ref other => {
                return Err(Error::InvalidArgument {
                    op: "forward",
                    reason: format!("expected images [N,{side},{side},3], got {other:?}"),
                })
            }
        }
        let mut cursor = params.iter().copied();
        let mut next = || cursor.next().expect("parameter list matches layers");
        let mut x = images;
        let mut layers = self.encoder.iter().peekable();
        while let Some(layer) = layers.next() {
            // ReLU then 2x2 max-pool equals max-pool then ReLU, values and
            // gradients alike (ReLU is monotone and zeroes the same winners),
            // and the swapped order touches a quarter of the activations.
            if *layer == LayerSpec::Relu && layers.peek() == Some(&&LayerSpec::MaxPool2d) {
                layers.next();
                x = maxpool2d_forward(g, x)?;
                x = g.relu(x)?;
                continue;
            }
            x = self.apply(g, layer, x, &mut next, mode, rng)?;
        }
        let features = x;
        for layer in &self.head {
            x = self.apply(g, layer, x, &mut next, mode, rng)?;
        }
        Ok(ForwardOutput { features, probs: x })
    }

    fn apply<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        layer: &LayerSpec,
        x: Var,
        next: &mut impl FnMut() -> Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        Ok(match *layer {
            LayerSpec::Conv2d { .. } => {
                let (k, b) = (next(), next());
                conv2d_forward(g, x, k, b)?
            }
            LayerSpec::MaxPool2d => maxpool2d_forward(g, x)?,
            LayerSpec::Flatten => {
                let n = g.shape(x)[0];
                let width = g.value(x).len() / n;
                g.reshape(x, &[n, width])?
            }
            LayerSpec::Dense { .. } => {
                let (w, b) = (next(), next());
                dense_forward(g, x, w, b)?
            }
            LayerSpec::Dropout { rate } => dropout_forward(g, x, rate, mode, rng)?,
            LayerSpec::Relu => g.relu(x)?,
            LayerSpec::Softmax => softmax_forward(g, x)?,
        })
    }

    /// Eval-mode forward pass returning `(features, probs)` tensors.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &params, x, Mode::Eval, &mut rng)?;
        Ok((g.value(out.features).clone(), g.value(out.probs).clone()))
    }

    /// Projects every constrained weight back onto its max-norm ball.
    pub fn apply_constraints(&mut self) -> Result<()> {
        for p in &mut self.params {
            if let Some(cap) = p.max_norm {
                apply_max_norm(&mut p.value, cap)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_stack_matches_config() {
        let cfg = ModelConfig::with_filters(&[16, 32]);
        let model = build_model(&cfg, 0).unwrap();
        assert_eq!(
            model.encoder(),
            &[
                LayerSpec::Conv2d { filters: 16 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Conv2d { filters: 32 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 16,
                    max_norm: Some(3.0)
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
            ]
        );
        assert_eq!(
            model.task_head(),
            &[
                LayerSpec::Dense {
                    units: 2,
                    max_norm: Some(3.0)
                },
                LayerSpec::Softmax
            ]
        );
        let names: Vec<&str> = model.parameters().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv1.kernel",
                "conv1.bias",
                "conv2.kernel",
                "conv2.bias",
                "features.weight",
                "features.bias",
                "head.weight",
                "head.bias"
            ]
        );
    }

    #[test]
    fn spatial_trace_for_two_layers() {
        let cfg = ModelConfig::with_filters(&[16, 32]);
        assert_eq!(cfg.spatial_trace().unwrap(), vec![224, 222, 111, 109, 54]);
        assert_eq!(cfg.flatten_dim().unwrap(), 93_312);
        let small = ModelConfig {
            input_side: 64,
            ..cfg
        };
        assert_eq!(small.spatial_trace().unwrap(), vec![64, 62, 31, 29, 14]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(build_model(&ModelConfig::with_filters(&[]), 0).is_err());
        assert!(build_model(&ModelConfig::with_filters(&[4, 0]), 0).is_err());
        let tiny = ModelConfig {
            input_side: 8,
            ..ModelConfig::with_filters(&[4, 4, 4])
        };
        assert!(matches!(build_model(&tiny, 0), Err(Error::Config { .. })));
        let bad_dropout = ModelConfig {
            dropout_rate: 1.0,
            ..ModelConfig::default()
        };
        assert!(build_model(&bad_dropout, 0).is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let cfg = ModelConfig {
            input_side: 16,
            ..ModelConfig::with_filters(&[4, 8])
        };
        let a = build_model(&cfg, 5).unwrap();
        let b = build_model(&cfg, 5).unwrap();
        let c = build_model(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a.parameters() {
            if p.name.ends_with("bias") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
        let k = &a.parameters()[0].value;
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn forward_shapes_and_purity() {
        let cfg = ModelConfig {
            input_side: 32,
            ..ModelConfig::with_filters(&[16, 32])
        };
        let model = build_model(&cfg, 1).unwrap();
        let images = Tensor::new(
            &[2, 32, 32, 3],
            (0..2 * 32 * 32 * 3).map(|i| (i % 255) as f64 / 255.0).collect(),
        )
        .unwrap();
        let (f1, p1) = model.predict(&images).unwrap();
        assert_eq!(f1.shape(), &[2, 16]);
        assert_eq!(p1.shape(), &[2, 2]);
        for row in p1.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (f2, p2) = model.predict(&images).unwrap();
        assert_eq!(f1.data(), f2.data());
        assert_eq!(p1.data(), p2.data());

        let wrong = Tensor::zeros(&[1, 31, 32, 3]).unwrap();
        assert!(model.predict(&wrong).is_err());
    }

    #[test]
    fn zero_image_with_zero_biases_gives_uniform_probs() {
        let cfg = ModelConfig {
            input_side: 16,
            ..ModelConfig::with_filters(&[4, 8])
        };
        let model = build_model(&cfg, 3).unwrap();
        let (_, probs) = model.predict(&Tensor::zeros(&[1, 16, 16, 3]).unwrap()).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5]);
    }

    #[test]
    fn deep_head_adds_hidden_layer() {
        let cfg = ModelConfig {
            input_side: 16,
            deep_head: true,
            ..ModelConfig::with_filters(&[4])
        };
        let model = build_model(&cfg, 0).unwrap();
        let names: Vec<&str> = model.parameters().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"head_hidden1.weight"));
        assert_eq!(names.last(), Some(&"head.bias"));
    }
}
