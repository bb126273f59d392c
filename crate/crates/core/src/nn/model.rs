use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{self, LayerParams, ParamInfo, ParamKind, Plan};
use super::spec::ArchitectureSpec;
use super::train::TrainingLog;
use super::NnError;
use crate::image::Image;

const MODEL_MAGIC: &[u8; 8] = b"TMMODEL\0";
const MODEL_VERSION: u32 = 1;

/// A trained (or freshly initialised) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    plan: Plan,
    params: Vec<LayerParams<f32>>,
    /// Calibrated `(min, max)` per op output; set by full-integer quantisation.
    activation_ranges: Option<Vec<(f32, f32)>>,
    pub training_log: TrainingLog,
    pub seed: u64,
    pub config_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ArchitectureSpec,
    seed: u64,
    training_log: TrainingLog,
    activation_ranges: Option<Vec<(f32, f32)>>,
    config_digest: Option<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Model {
    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self, NnError> {
        let plan = Plan::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = plan
            .params
            .iter()
            .map(|info| {
                let limit = (6.0 / info.fan_in as f64).sqrt() as f32;
                let n: usize = info.weight_shape.iter().product();
                LayerParams {
                    w: (0..n).map(|_| rng.gen_range(-limit..limit)).collect(),
                    b: vec![0.0; info.bias_len],
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            plan,
            params,
            activation_ranges: None,
            training_log: TrainingLog::default(),
            seed,
            config_digest: None,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[LayerParams<f32>] {
        &self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.plan.params
    }

    /// Mutable access for in-place transforms (pruning, quantisation).
    pub fn params_mut(&mut self) -> &mut [LayerParams<f32>] {
        &mut self.params
    }

    pub fn weight_count(&self) -> usize {
        self.params.iter().map(|p| p.w.len() + p.b.len()).sum()
    }

    pub fn activation_ranges(&self) -> Option<&[(f32, f32)]> {
        self.activation_ranges.as_deref()
    }

    pub fn set_activation_ranges(&mut self, ranges: Option<Vec<(f32, f32)>>) -> Result<(), NnError> {
        if let Some(r) = &ranges {
            if r.len() != self.plan.op_count() {
                return Err(NnError::Shape(format!(
                    "{} activation ranges for {} ops",
                    r.len(),
                    self.plan.op_count()
                )));
            }
        }
        self.activation_ranges = ranges;
        Ok(())
    }

    /// Per-op `(min, max)` of the float activations over `images`.
    pub fn activation_extents(&self, images: &[Image]) -> Result<Vec<(f32, f32)>, NnError> {
        if images.is_empty() {
            return Err(NnError::Data("calibration set is empty".into()));
        }
        let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); self.plan.op_count()];
        for img in images {
            self.check_input(img)?;
            let trace = net::forward_trace(&self.plan, &self.params, &img.to_chw_unit(), None, None);
            for (r, act) in ranges.iter_mut().zip(&trace.acts[1..]) {
                for &v in act {
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                }
            }
        }
        Ok(ranges)
    }

    /// Indices of parameter layers that are fully connected.
    pub fn dense_param_indices(&self) -> Vec<usize> {
        (0..self.plan.params.len())
            .filter(|&p| self.plan.params[p].kind == ParamKind::Dense)
            .collect()
    }

    pub fn check_input(&self, image: &Image) -> Result<(), NnError> {
        let [h, w, c] = self.spec.input_shape;
        if image.shape() != (h as u32, w as u32, c as u32) {
            return Err(NnError::Shape(format!(
                "image is {}x{}x{}, model expects {h}x{w}x{c}",
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Logits for a normalised CHW input.
    pub fn logits_unit(&self, input: &[f32]) -> Vec<f32> {
        net::forward(&self.plan, &self.params, input, self.activation_ranges.as_deref())
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f32>, NnError> {
        self.check_input(image)?;
        Ok(self.logits_unit(&image.to_chw_unit()))
    }

    pub fn probabilities(&self, image: &Image) -> Result<Vec<f32>, NnError> {
        Ok(net::softmax(&self.logits(image)?))
    }

    /// Arg-max class of the softmax output, lowest index on ties.
    pub fn predict(&self, image: &Image) -> Result<usize, NnError> {
        Ok(net::argmax(&self.probabilities(image)?))
    }

    /// Cross-entropy towards `target` and its gradient with respect to the
    /// normalised input. Also returns the logits of the forward pass.
    pub fn input_gradient(&self, input: &[f32], target: usize) -> (f32, Vec<f32>, Vec<f32>) {
        let trace = net::forward_trace(&self.plan, &self.params, input, None, self.activation_ranges.as_deref());
        let logits = trace.logits().to_vec();
        let (loss, d) = net::cross_entropy(&logits, target);
        let mut scratch: Vec<LayerParams<f32>> = self.params.iter().map(LayerParams::zeros_like).collect();
        let frozen = vec![false; self.params.len()];
        let grad = net::backward(&self.plan, &self.params, &trace, &d, &mut scratch, &frozen, true)
            .expect("input gradient requested");
        (loss, grad, logits)
    }

    pub(crate) fn with_params(&self, params: Vec<LayerParams<f32>>) -> Self {
        Self { params, ..self.clone() }
    }

    /// SHA-256 of the serialised model, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Magic, version, header length, JSON header, then every weight and
    /// bias tensor as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self
            .plan
            .params
            .iter()
            .enumerate()
            .flat_map(|(i, info)| {
                [
                    TensorEntry {
                        name: format!("layer{}.weight", info.layer),
                        shape: info.weight_shape.clone(),
                    },
                    TensorEntry {
                        name: format!("layer{}.bias", info.layer),
                        shape: vec![self.params[i].b.len()],
                    },
                ]
            })
            .collect();
        let header = Header {
            spec: self.spec.clone(),
            seed: self.seed,
            training_log: self.training_log.clone(),
            activation_ranges: self.activation_ranges.clone(),
            config_digest: self.config_digest.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.weight_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for v in p.w.iter().chain(&p.b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("not a model file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(NnError::Format(format!("unsupported model version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| NnError::Format(e.to_string()))?;
        let mut model = Model::build(&header.spec, header.seed)?;
        let mut blob = &bytes[16 + hlen..];
        if blob.len() != 4 * model.weight_count() {
            return Err(bad("weight blob length does not match architecture"));
        }
        let mut buf = [0u8; 4];
        for p in &mut model.params {
            for v in p.w.iter_mut().chain(p.b.iter_mut()) {
                blob.read_exact(&mut buf).map_err(|e| NnError::Format(e.to_string()))?;
                *v = f32::from_le_bytes(buf);
            }
        }
        model.training_log = header.training_log;
        model.config_digest = header.config_digest;
        model.set_activation_ranges(header.activation_ranges)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn tiny_cnn() -> ArchitectureSpec {
        ArchitectureSpec {
            name: "tiny".into(),
            input_shape: [6, 6, 1],
            classes: 3,
            layers: vec![
                LayerSpec::conv(2, 3),
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::head(3),
            ],
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ArchitectureSpec::preset("desk-mnist").unwrap();
        let a = Model::build(&spec, 11).unwrap();
        let b = Model::build(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), Model::build(&spec, 12).unwrap().params());
        let img = Image::filled(28, 28, 1, 30);
        assert_eq!(a.logits(&img).unwrap().len(), 10);
    }

    #[test]
    fn dense_shapes() {
        let spec = ArchitectureSpec::mlp([16, 16, 1], &[], 10);
        let m = Model::build(&spec, 0).unwrap();
        assert_eq!(m.param_info()[0].weight_shape, vec![256, 10]);
        assert_eq!(m.params()[0].w.len(), 2560);
        assert_eq!(m.params()[0].b.len(), 10);
    }

    #[test]
    fn he_uniform_bounds() {
        let m = Model::build(&tiny_cnn(), 3).unwrap();
        let limit = (6.0f32 / 9.0).sqrt();
        assert!(m.params()[0].w.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let mut m = Model::build(&tiny_cnn(), 1).unwrap();
        for p in m.params_mut() {
            p.w.fill(0.0);
            p.b.fill(0.0);
        }
        assert_eq!(m.predict(&Image::filled(6, 6, 1, 200)).unwrap(), 0);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = Model::build(&tiny_cnn(), 1).unwrap();
        assert!(matches!(m.predict(&Image::filled(5, 6, 1, 0)), Err(NnError::Shape(_))));
    }

    #[test]
    fn file_round_trip() {
        let mut m = Model::build(&tiny_cnn(), 5).unwrap();
        m.config_digest = Some("abc".into());
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Model::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn softmax_outputs_sum_to_one() {
        let m = Model::build(&ArchitectureSpec::preset("desk-mnist").unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let px: Vec<u8> = (0..784).map(|_| rng.gen()).collect();
            let p = m.probabilities(&Image::new(28, 28, 1, px).unwrap()).unwrap();
            assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
