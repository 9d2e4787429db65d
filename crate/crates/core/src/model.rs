//! End-to-end network: dilated encoder, context aggregation module, and a
//! 1×1 classifier producing `2K` ordinal logits (or `K` class scores).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{cam_forward, CamOptions, CamVars, NormMode};
use crate::discretization::{DepthDiscretization, DiscretizationParams};
use crate::tensor::{
    read_tensor, write_tensor, BatchStats, RunningStats, Tape, Tensor, TensorError, Var,
    BN_MOMENTUM,
};

pub const OUTPUT_STRIDE: usize = 8;
const CHECKPOINT_MAGIC: [u8; 4] = *b"ACKP";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// `2K` channels, paired per bin.
    Ordinal,
    /// `K` softmax scores.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<EncoderStage>,
    pub kernel: usize,
    pub key_channels: usize,
    pub value_channels: usize,
    pub bins: usize,
    pub head: Head,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let stage = |channels, stride, dilation| EncoderStage {
            channels,
            stride,
            dilation,
        };
        Self {
            input_height: 48,
            input_width: 48,
            stages: vec![
                stage(16, 2, 1),
                stage(16, 2, 1),
                stage(32, 2, 1),
                stage(64, 1, 2),
                stage(64, 1, 4),
            ],
            kernel: 3,
            key_channels: 16,
            value_channels: 32,
            bins: 16,
            head: Head::Ordinal,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.stages.is_empty() {
            return fail("encoder has no stages".into());
        }
        let stride: usize = self.stages.iter().map(|s| s.stride).product();
        if stride != OUTPUT_STRIDE {
            return fail(format!(
                "encoder output stride is {stride}, expected {OUTPUT_STRIDE}"
            ));
        }
        if self
            .stages
            .iter()
            .any(|s| s.channels == 0 || s.stride == 0 || s.dilation == 0)
        {
            return fail("stage widths, strides and dilations must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel size {} must be odd", self.kernel));
        }
        if self.key_channels == 0 || self.value_channels == 0 || self.bins < 2 {
            return fail("attention widths must be positive and K ≥ 2".into());
        }
        self.check_input(self.input_height, self.input_width)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(ModelError::Config(format!(
                "input {h}x{w} is not divisible by {OUTPUT_STRIDE}"
            )));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        match self.head {
            Head::Ordinal => 2 * self.bins,
            Head::CrossEntropy => self.bins,
        }
    }

    pub fn output_size(&self) -> (usize, usize) {
        (
            self.input_height / OUTPUT_STRIDE,
            self.input_width / OUTPUT_STRIDE,
        )
    }

    /// Every parameter's name, shape, and role, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Role)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, s) in self.stages.iter().enumerate() {
            out.push((
                format!("encoder.{i}.weight"),
                vec![s.channels, c_in, k, k],
                Role::EncoderWeight,
            ));
            out.push((
                format!("encoder.{i}.bn.gamma"),
                vec![s.channels],
                Role::EncoderGamma,
            ));
            out.push((
                format!("encoder.{i}.bn.beta"),
                vec![s.channels],
                Role::EncoderBeta,
            ));
            c_in = s.channels;
        }
        let (ck, cv) = (self.key_channels, self.value_channels);
        out.push((
            "cam.key.weight".into(),
            vec![ck, c_in, 1, 1],
            Role::DecoderWeight,
        ));
        out.push(("cam.key.bn.gamma".into(), vec![ck], Role::DecoderGamma));
        out.push(("cam.key.bn.beta".into(), vec![ck], Role::DecoderBeta));
        out.push((
            "cam.value.weight".into(),
            vec![cv, c_in, 1, 1],
            Role::DecoderWeight,
        ));
        out.push(("cam.value.bias".into(), vec![cv], Role::DecoderBias));
        let c_out = self.output_channels();
        out.push((
            "classifier.weight".into(),
            vec![c_out, cv + c_in, 1, 1],
            Role::DecoderWeight,
        ));
        out.push(("classifier.bias".into(), vec![c_out], Role::DecoderBias));
        out
    }

    fn norm_layers(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("encoder.{i}.bn"), s.channels))
            .collect();
        out.push(("cam.key.bn".into(), self.key_channels));
        out
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    EncoderWeight,
    EncoderGamma,
    EncoderBeta,
    DecoderWeight,
    DecoderGamma,
    DecoderBeta,
    DecoderBias,
}

/// Learning-rate group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: Group,
    /// Convolution weights only.
    pub decay: bool,
}

/// Named parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    running: IndexMap<String, RunningStats>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn running(&self, layer: &str) -> Option<&RunningStats> {
        self.running.get(layer)
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.running.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Fold one training forward's batch statistics into the running
    /// estimates.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)]) {
        for (layer, s) in stats {
            self.running
                .get_mut(layer)
                .unwrap_or_else(|| panic!("unknown norm layer {layer}"))
                .update(s, BN_MOMENTUM);
        }
    }

    /// Puts every parameter on the tape as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), tape.param(p.value.clone())))
            .collect()
    }
}

/// Fan-in scaled uniform initialisation: `U(−a, a)` with `a = √(6/fan_in)`,
/// so the weight variance is `2/fan_in`. Biases and shifts start at 0,
/// scales at 1.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape, role) in cfg.layout() {
        let (value, group, decay) = match role {
            Role::EncoderWeight | Role::DecoderWeight => {
                let fan_in: usize = shape[1..].iter().product();
                let a = (6.0 / fan_in as f64).sqrt();
                let t = Tensor::from_fn(&shape, |_| rng.gen_range(-a..a));
                let group = if role == Role::EncoderWeight {
                    Group::Encoder
                } else {
                    Group::Decoder
                };
                (t, group, true)
            }
            Role::EncoderGamma => (Tensor::full(&shape, 1.0), Group::Encoder, false),
            Role::EncoderBeta => (Tensor::zeros(&shape), Group::Encoder, false),
            Role::DecoderGamma => (Tensor::full(&shape, 1.0), Group::Decoder, false),
            Role::DecoderBeta | Role::DecoderBias => (Tensor::zeros(&shape), Group::Decoder, false),
        };
        params.insert(
            name,
            Param {
                value,
                group,
                decay,
            },
        );
    }
    let running = cfg
        .norm_layers()
        .into_iter()
        .map(|(name, c)| (name, RunningStats::new(c)))
        .collect();
    Ok(ParamStore { params, running })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B, 2K, h, w]` (or `[B, K, h, w]` for the cross-entropy head).
    pub logits: Var,
    /// `[B, N, N]`.
    pub attention: Var,
    /// Training-mode batch statistics keyed by norm layer.
    pub batch_stats: Vec<(String, BatchStats)>,
    /// Tape handle of every parameter.
    pub params: IndexMap<String, Var>,
}

/// Planar `[B, 3, H, W]` input; callers centre RGB around zero.
pub fn forward(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    store: &ParamStore,
    input: Var,
    mode: Mode,
    options: CamOptions,
) -> Result<ForwardOutput> {
    let vars = store.register(tape);
    forward_with(tape, cfg, store, vars, input, mode, options)
}

/// [`forward`] with parameter handles supplied by the caller; `store` only
/// provides running statistics.
pub fn forward_with(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    store: &ParamStore,
    vars: IndexMap<String, Var>,
    input: Var,
    mode: Mode,
    options: CamOptions,
) -> Result<ForwardOutput> {
    let &[_, 3, h, w] = tape.shape(input) else {
        return Err(ModelError::Config(format!(
            "input must be [B, 3, H, W], got {:?}",
            tape.shape(input)
        )));
    };
    cfg.check_input(h, w)?;
    let v = |name: &str| vars[name];
    let mut batch_stats = Vec::new();

    let mut norm = |tape: &mut Tape, x: Var, layer: &str| -> Result<Var> {
        let (gamma, beta) = (v(&format!("{layer}.gamma")), v(&format!("{layer}.beta")));
        match mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm_train(x, gamma, beta)?;
                batch_stats.push((layer.to_string(), s));
                Ok(y)
            }
            Mode::Eval => {
                let running = store.running(layer).expect("norm layer");
                Ok(tape.batch_norm_eval(x, gamma, beta, running)?)
            }
        }
    };

    let mut x = input;
    for (i, s) in cfg.stages.iter().enumerate() {
        x = tape.conv2d(
            x,
            v(&format!("encoder.{i}.weight")),
            None,
            s.stride,
            s.dilation,
        )?;
        x = norm(tape, x, &format!("encoder.{i}.bn"))?;
        x = tape.relu(x);
    }

    let cam_vars = CamVars {
        key_kernel: v("cam.key.weight"),
        key_gamma: v("cam.key.bn.gamma"),
        key_beta: v("cam.key.bn.beta"),
        value_kernel: v("cam.value.weight"),
        value_bias: v("cam.value.bias"),
    };
    let cam_norm = match mode {
        Mode::Train => NormMode::Train,
        Mode::Eval => NormMode::Eval(store.running("cam.key.bn").expect("norm layer")),
    };
    let cam = cam_forward(tape, x, &cam_vars, cam_norm, options)?;
    if let Some(s) = cam.key_stats {
        batch_stats.push(("cam.key.bn".into(), s));
    }
    let logits = tape.conv2d(
        cam.features,
        v("classifier.weight"),
        Some(v("classifier.bias")),
        1,
        1,
    )?;
    Ok(ForwardOutput {
        logits,
        attention: cam.attention,
        batch_stats,
        params: vars,
    })
}

/// Bilinear resize of one `h × w` plane to `out_h × out_w` with half-pixel
/// centres and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane size");
    let axis = |o: usize, n: usize, out_n: usize| {
        let pos = ((o as f64 + 0.5) * n as f64 / out_n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Ground truth on the output grid: each `factor × factor` cell takes the
/// geometric mean of its valid depths; a cell is valid when any pixel is.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTargets {
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub labels: Vec<usize>,
}

pub fn downsample_targets(
    depth: &[f64],
    valid: &[bool],
    height: usize,
    width: usize,
    factor: usize,
    disc: &DepthDiscretization,
) -> CellTargets {
    let (h, w) = (height / factor, width / factor);
    let mut out = CellTargets {
        depth: vec![0.0; h * w],
        valid: vec![false; h * w],
        labels: vec![0; h * w],
    };
    for cy in 0..h {
        for cx in 0..w {
            let (mut sum, mut n) = (0.0, 0usize);
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    let i = y * width + x;
                    if valid[i] {
                        sum += depth[i].ln();
                        n += 1;
                    }
                }
            }
            if n > 0 {
                let c = cy * w + cx;
                let d = (sum / n as f64).exp().clamp(disc.d_min(), disc.d_max());
                out.depth[c] = d;
                out.valid[c] = true;
                out.labels[c] = disc.quantize(d).expect("clamped depth");
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    discretization: DiscretizationParams,
    params: Vec<(String, Group, bool)>,
    running: Vec<(String, bool)>,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub discretization: DiscretizationParams,
    pub store: ParamStore,
}

impl Checkpoint {
    /// Layout: `ACKP`, u32 LE header length, JSON header, then one tensor
    /// container record per parameter followed by mean and variance records
    /// per norm layer.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            discretization: self.discretization,
            params: self
                .store
                .iter()
                .map(|(k, p)| (k.to_string(), p.group, p.decay))
                .collect(),
            running: self
                .store
                .running_stats()
                .map(|(k, r)| (k.to_string(), r.populated))
                .collect(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, p) in self.store.iter() {
            write_tensor(&mut w, &p.value)?;
        }
        for (_, r) in self.store.running_stats() {
            write_tensor(&mut w, &Tensor::new(vec![r.mean.len()], r.mean.clone())?)?;
            write_tensor(&mut w, &Tensor::new(vec![r.var.len()], r.var.clone())?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: String| ModelError::Checkpoint(format!("{}: {m}", path.display()));
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;

        let mut store = init_params(&header.config, 0)?;
        if store.params.len() != header.params.len() {
            return Err(bad(format!(
                "{} parameters stored, config expects {}",
                header.params.len(),
                store.params.len()
            )));
        }
        let mut next = |what: &str| -> Result<Tensor> {
            read_tensor(&mut r)?.ok_or_else(|| bad(format!("missing record for {what}")))
        };
        for (name, group, decay) in &header.params {
            let slot = store
                .params
                .get_mut(name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            let t = next(name)?;
            if t.shape() != slot.value.shape() {
                return Err(bad(format!(
                    "{name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.value.shape()
                )));
            }
            *slot = Param {
                value: t,
                group: *group,
                decay: *decay,
            };
        }
        for (name, populated) in &header.running {
            let mean = next(name)?.into_data();
            let var = next(name)?.into_data();
            let slot = store
                .running
                .get_mut(name)
                .ok_or_else(|| bad(format!("unknown norm layer {name}")))?;
            if mean.len() != slot.mean.len() || var.len() != slot.var.len() {
                return Err(bad(format!(
                    "running stats for {name} have the wrong width"
                )));
            }
            *slot = RunningStats {
                mean,
                var,
                populated: *populated,
            };
        }
        Ok(Self {
            config: header.config,
            discretization: header.discretization,
            store,
        })
    }

    /// Fails when the stored network does not match `cfg` shape-for-shape.
    pub fn check_compatible(&self, cfg: &NetworkConfig) -> Result<()> {
        let ours = self.config.layout();
        let theirs = cfg.layout();
        if ours.len() != theirs.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} parameters, config expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((a, sa, _), (b, sb, _)) in ours.iter().zip(&theirs) {
            if a != b || sa != sb {
                return Err(ModelError::Checkpoint(format!(
                    "checkpoint {a} {sa:?} does not match config {b} {sb:?}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{
        attention_loss, gt_attention_weights, ordinal_loss, total_loss, LossWeights,
    };
    use crate::tensor::gradcheck;

    fn small() -> NetworkConfig {
        let stage = |channels, stride, dilation| EncoderStage {
            channels,
            stride,
            dilation,
        };
        NetworkConfig {
            input_height: 16,
            input_width: 16,
            stages: vec![
                stage(3, 2, 1),
                stage(4, 2, 1),
                stage(4, 2, 1),
                stage(4, 1, 2),
            ],
            key_channels: 3,
            value_channels: 4,
            bins: 4,
            ..Default::default()
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-0.5..0.5))
    }

    #[test]
    fn output_shape_contract() {
        let cfg = NetworkConfig::default();
        let store = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&[2, 3, 48, 48], 2));
        let out = forward(
            &mut tape,
            &cfg,
            &store,
            x,
            Mode::Train,
            CamOptions::default(),
        )
        .unwrap();
        assert_eq!(tape.shape(out.logits), &[2, 32, 6, 6]);
        assert_eq!(tape.shape(out.attention), &[2, 36, 36]);
        assert!(tape.value(out.logits).all_finite());
        assert_eq!(out.batch_stats.len(), cfg.stages.len() + 1);
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = NetworkConfig::default();
        let store = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&[1, 3, 44, 48], 2));
        let err = forward(
            &mut tape,
            &cfg,
            &store,
            x,
            Mode::Train,
            CamOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Config(_)), "{err}");
        let bad = NetworkConfig {
            input_height: 20,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn stride_must_be_eight() {
        let mut cfg = NetworkConfig::default();
        cfg.stages[2].stride = 1;
        assert!(matches!(init_params(&cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn eval_is_deterministic_and_needs_running_stats() {
        let cfg = small();
        let mut store = init_params(&cfg, 3).unwrap();
        let input = random_input(&[2, 3, 16, 16], 4);
        let run = |store: &ParamStore, mode| {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            forward(&mut tape, &cfg, store, x, mode, CamOptions::default())
                .map(|o| (tape.value(o.logits).clone(), o.batch_stats))
        };
        assert!(matches!(
            run(&store, Mode::Eval),
            Err(ModelError::Tensor(TensorError::State(_)))
        ));
        let (_, stats) = run(&store, Mode::Train).unwrap();
        store.update_running(&stats);
        let (a, _) = run(&store, Mode::Eval).unwrap();
        let (b, _) = run(&store, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seeded_and_fan_in_scaled() {
        let cfg = NetworkConfig::default();
        assert_eq!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 5).unwrap());
        assert_ne!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 6).unwrap());
        let store = init_params(&cfg, 5).unwrap();
        for (name, p) in store.iter().filter(|(_, p)| p.decay) {
            let fan_in: usize = p.value.shape()[1..].iter().product();
            let n = p.value.len() as f64;
            let mean = p.value.sum() / n;
            let var = p
                .value
                .data()
                .iter()
                .map(|x| (x - mean).powi(2))
                .sum::<f64>()
                / n;
            let target = 2.0 / fan_in as f64;
            if p.value.len() >= 1000 {
                assert!(
                    var > target / 2.0 && var < target * 2.0,
                    "{name}: {var} vs {target}"
                );
            }
        }
        let gamma = &store.get("encoder.0.bn.gamma").unwrap().value;
        assert!(gamma.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [NetworkConfig::default(), small()] {
            assert_eq!(
                init_params(&cfg, 0).unwrap().scalar_count(),
                cfg.parameter_count()
            );
        }
        let ce = NetworkConfig {
            head: Head::CrossEntropy,
            ..Default::default()
        };
        let delta = NetworkConfig::default().parameter_count() - ce.parameter_count();
        assert_eq!(delta, 16 * (32 + 64 + 1));
    }

    #[test]
    fn groups_and_decay_flags() {
        let store = init_params(&small(), 0).unwrap();
        assert_eq!(store.get("encoder.1.weight").unwrap().group, Group::Encoder);
        assert_eq!(store.get("cam.value.weight").unwrap().group, Group::Decoder);
        assert_eq!(store.get("classifier.bias").unwrap().group, Group::Decoder);
        assert!(!store.get("cam.key.bn.gamma").unwrap().decay);
        assert!(!store.get("classifier.bias").unwrap().decay);
        assert!(store.get("classifier.weight").unwrap().decay);
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let c = upsample_bilinear(&[2.5; 12], 3, 4, 24, 32);
        assert!(c.iter().all(|&v| v == 2.5));
        let (h, w, f) = (4, 5, 8);
        let ramp: Vec<f64> = (0..h * w)
            .map(|i| 0.3 * (i % w) as f64 - 1.1 * (i / w) as f64)
            .collect();
        let up = upsample_bilinear(&ramp, h, w, h * f, w * f);
        for oy in 0..h * f {
            for ox in 0..w * f {
                let sy = (oy as f64 + 0.5) / f as f64 - 0.5;
                let sx = (ox as f64 + 0.5) / f as f64 - 0.5;
                if sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64 {
                    let want = 0.3 * sx - 1.1 * sy;
                    assert!((up[oy * w * f + ox] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn downsample_uses_geometric_mean_of_valid() {
        let disc = DepthDiscretization::new(0.5, 10.0, 4).unwrap();
        let mut depth = vec![1.0; 16];
        depth[0] = 4.0;
        let mut valid = vec![true; 16];
        valid[1] = false;
        valid[4] = false;
        valid[5] = false;
        let t = downsample_targets(&depth, &valid, 4, 4, 2, &disc);
        assert_eq!(t.depth[0], 4.0);
        assert!(t.valid.iter().all(|&v| v));
        assert_eq!(t.depth[1], 1.0);

        let none = downsample_targets(&depth, &[false; 16], 4, 4, 2, &disc);
        assert!(none.valid.iter().all(|&v| !v));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let mut store = init_params(&cfg, 8).unwrap();
        let input = random_input(&[2, 3, 16, 16], 9);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = forward(
            &mut tape,
            &cfg,
            &store,
            x,
            Mode::Train,
            CamOptions::default(),
        )
        .unwrap();
        store.update_running(&out.batch_stats);
        let ckpt = Checkpoint {
            config: cfg.clone(),
            discretization: DiscretizationParams::default(),
            store,
        };
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);

        let eval = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let o = forward(&mut tape, &cfg, s, x, Mode::Eval, CamOptions::default()).unwrap();
            tape.value(o.logits).clone()
        };
        assert_eq!(eval(&ckpt.store), eval(&back.store));

        assert!(back.check_compatible(&cfg).is_ok());
        assert!(matches!(
            back.check_compatible(&NetworkConfig::default()),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = NetworkConfig {
            input_height: 8,
            input_width: 8,
            stages: vec![
                EncoderStage {
                    channels: 2,
                    stride: 2,
                    dilation: 1,
                },
                EncoderStage {
                    channels: 3,
                    stride: 2,
                    dilation: 1,
                },
                EncoderStage {
                    channels: 3,
                    stride: 2,
                    dilation: 1,
                },
                EncoderStage {
                    channels: 3,
                    stride: 1,
                    dilation: 2,
                },
            ],
            key_channels: 2,
            value_channels: 2,
            bins: 4,
            ..Default::default()
        };
        let store = init_params(&cfg, 11).unwrap();
        let input = random_input(&[2, 3, 8, 8], 12);
        let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
        let values: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
        let targets = vec![
            gt_attention_weights(&[2.0], 10.0, None).unwrap(),
            gt_attention_weights(&[3.0], 10.0, None).unwrap(),
        ];
        let check = gradcheck::check(&values, |tape: &mut Tape, vars: &[Var]| {
            let map = names.iter().cloned().zip(vars.iter().copied()).collect();
            let x = tape.constant(input.clone());
            let out = forward_with(
                tape,
                &cfg,
                &store,
                map,
                x,
                Mode::Train,
                CamOptions::default(),
            )
            .map_err(|e| TensorError::Contract(e.to_string()))?;
            let ord = ordinal_loss(tape, out.logits, &[1, 2], &[true, true])?;
            let att = attention_loss(tape, out.attention, &targets)?;
            total_loss(tape, att, ord, LossWeights::default())
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-3, "{check:?}");
    }
}
