//! Learnable state of the model, with named access for the optimizer,
//! checkpoints, and gradient checks.

use crate::error::{Error, Result};
use crate::graph::Parameter;
use crate::nn::{sinusoidal_encoding, uniform_init, EncoderLayer, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::SeedRng;

use super::ModelConfig;

/// All tensors of the model. The time table is sinusoidal and frozen;
/// everything else trains.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub backbone_proj: [Linear<T>; 3],
    pub fusion: Linear<T>,
    pub shot_cls: Parameter<T>,
    /// Constant sinusoidal frame-position rows, one per frame slot.
    pub frame_pos: Tensor<T>,
    pub shot_encoder: Vec<EncoderLayer<T>>,
    pub utter_proj: Linear<T>,
    /// Row 0 tags shots, row 1 tags dialogs.
    pub type_table: Parameter<T>,
    pub time_table: Parameter<T>,
    pub group_table: Parameter<T>,
    pub group_token: Parameter<T>,
    pub input_norm: LayerNorm<T>,
    pub episode_encoder: Vec<EncoderLayer<T>>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let table_bound = 1.0 / (d as f64).sqrt();

        let backbone_proj = [
            Linear::new("backbone_proj.0", d, cfg.video_dims[0], rng),
            Linear::new("backbone_proj.1", d, cfg.video_dims[1], rng),
            Linear::new("backbone_proj.2", d, cfg.video_dims[2], rng),
        ];
        let fusion = Linear::new("fusion", 3, 3 * d, rng);
        let shot_cls = Parameter::new("shot_cls", uniform_init(&[1, d], table_bound, rng));
        let frame_pos = sinusoidal_encoding(cfg.frame_cap, d)?;
        let shot_encoder = (0..cfg.shot_layers)
            .map(|i| EncoderLayer::new(&format!("shot_encoder.{i}"), d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let utter_proj = Linear::new("utter_proj", d, cfg.dialog_dim, rng);
        let type_table = Parameter::new("type_table", uniform_init(&[2, d], table_bound, rng));
        let time_table = Parameter::frozen("time_table", sinusoidal_encoding(cfg.time_bins(), d)?);
        let group_table = Parameter::new(
            "group_table",
            uniform_init(&[cfg.max_groups, d], table_bound, rng),
        );
        let group_token = Parameter::new("group_token", uniform_init(&[1, d], table_bound, rng));
        let input_norm = LayerNorm::new("input_norm", d);
        let episode_encoder = (0..cfg.episode_layers)
            .map(|i| EncoderLayer::new(&format!("episode_encoder.{i}"), d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new("classifier", 1, d, rng);

        Ok(ModelParams {
            backbone_proj,
            fusion,
            shot_cls,
            frame_pos,
            shot_encoder,
            utter_proj,
            type_table,
            time_table,
            group_table,
            group_token,
            input_norm,
            episode_encoder,
            classifier,
        })
    }

    /// All parameters in a fixed, stable order.
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = Vec::new();
        for p in &self.backbone_proj {
            out.extend(p.params());
        }
        out.extend(self.fusion.params());
        out.push(&self.shot_cls);
        for layer in &self.shot_encoder {
            out.extend(layer.params());
        }
        out.extend(self.utter_proj.params());
        out.push(&self.type_table);
        out.push(&self.time_table);
        out.push(&self.group_table);
        out.push(&self.group_token);
        out.extend(self.input_norm.params());
        for layer in &self.episode_encoder {
            out.extend(layer.params());
        }
        out.extend(self.classifier.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = Vec::new();
        for p in &mut self.backbone_proj {
            out.extend(p.params_mut());
        }
        out.extend(self.fusion.params_mut());
        out.push(&mut self.shot_cls);
        for layer in &mut self.shot_encoder {
            out.extend(layer.params_mut());
        }
        out.extend(self.utter_proj.params_mut());
        out.push(&mut self.type_table);
        out.push(&mut self.time_table);
        out.push(&mut self.group_table);
        out.push(&mut self.group_token);
        out.extend(self.input_norm.params_mut());
        for layer in &mut self.episode_encoder {
            out.extend(layer.params_mut());
        }
        out.extend(self.classifier.params_mut());
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Scale every accumulated gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, factor: T) {
        for p in self.params_mut() {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Check that every value tensor is finite.
    pub fn validate_finite(&self) -> Result<()> {
        for p in self.params() {
            if !p.value.all_finite() {
                return Err(Error::NonFinite(format!("parameter {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn to_f32(&self) -> ModelParams<f32>
    where
        T: Scalar,
    {
        self.convert(|t| t.to_f32())
    }

    fn convert<U: Scalar>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U> + Copy) -> ModelParams<U> {
        let conv_param = |p: &Parameter<T>| -> Parameter<U> {
            let mut q = Parameter::new(p.name.clone(), f(&p.value));
            q.trainable = p.trainable;
            q
        };
        let conv_linear = |l: &Linear<T>| -> Linear<U> {
            Linear {
                weight: conv_param(&l.weight),
                bias: conv_param(&l.bias),
            }
        };
        let conv_ln = |l: &LayerNorm<T>| -> LayerNorm<U> {
            LayerNorm {
                gain: conv_param(&l.gain),
                bias: conv_param(&l.bias),
                eps: U::from_f64_c(l.eps.to_f64_c()),
            }
        };
        let conv_layer = |e: &EncoderLayer<T>| -> EncoderLayer<U> {
            EncoderLayer {
                attn: crate::nn::MultiHeadAttention {
                    wq: conv_linear(&e.attn.wq),
                    wk: conv_linear(&e.attn.wk),
                    wv: conv_linear(&e.attn.wv),
                    wo: conv_linear(&e.attn.wo),
                    heads: e.attn.heads,
                },
                ffn1: conv_linear(&e.ffn1),
                ffn2: conv_linear(&e.ffn2),
                ln1: conv_ln(&e.ln1),
                ln2: conv_ln(&e.ln2),
            }
        };
        ModelParams {
            backbone_proj: [
                conv_linear(&self.backbone_proj[0]),
                conv_linear(&self.backbone_proj[1]),
                conv_linear(&self.backbone_proj[2]),
            ],
            fusion: conv_linear(&self.fusion),
            shot_cls: conv_param(&self.shot_cls),
            frame_pos: f(&self.frame_pos),
            shot_encoder: self.shot_encoder.iter().map(conv_layer).collect(),
            utter_proj: conv_linear(&self.utter_proj),
            type_table: conv_param(&self.type_table),
            time_table: conv_param(&self.time_table),
            group_table: conv_param(&self.group_table),
            group_token: conv_param(&self.group_token),
            input_norm: conv_ln(&self.input_norm),
            episode_encoder: self.episode_encoder.iter().map(conv_layer).collect(),
            classifier: conv_linear(&self.classifier),
        }
    }
}

impl ModelParams<f32> {
    pub fn to_f64(&self) -> ModelParams<f64> {
        self.convert(Tensor::<f64>::from_f32)
    }
}
