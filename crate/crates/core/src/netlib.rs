//! Compact stage-tapped segmentation network used as both teacher and
//! student, plus the lane-existence head and the teacher's label-as-image
//! input rendering.
//!
//! Architecture: four encoder stages (conv3x3-relu-conv3x3-relu-maxpool2)
//! at the configured widths, then a decoder that upsamples x16 with a
//! conv3x3-relu after every doubling, ending in a 1x1 conv to K logits at
//! input resolution. Each stage exposes its pre-pool activation as a named
//! tap; the existence head is a global average pool over the encoder output
//! followed by an affine map and a sigmoid, one probability per lane slot.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numcore::{read_tensors, write_tensors, ClassMask, Dims, NumError, Scalar, Tape, Tensor, Var};

/// The four stage taps, in network order.
pub const TAP_NAMES: [&str; 4] = ["stage1", "stage2", "stage3", "stage4"];

/// Input height/width must be divisible by this (one halving per stage).
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unknown parameter '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Architecture description. Teacher and student share one config; only the
/// meaning of the input differs (rendered labels vs scene images).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Background plus one class per lane slot.
    pub num_classes: usize,
    pub stage_widths: [usize; 4],
    pub with_existence_head: bool,
    pub max_lanes: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(NetError::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::Config(format!("num_classes {} must be >= 2", self.num_classes)));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(NetError::Config("stage widths must be positive".into()));
        }
        if self.max_lanes == 0 {
            return Err(NetError::Config("max_lanes must be positive".into()));
        }
        Ok(())
    }

    /// Parameter inventory (name, dims) as a pure function of the config.
    pub fn parameter_specs(&self) -> Vec<(String, Dims)> {
        let w = self.stage_widths;
        let mut specs = Vec::new();
        let conv = |name: &str, cout: usize, cin: usize, k: usize, specs: &mut Vec<(String, Dims)>| {
            specs.push((format!("{name}.weight"), Dims::new(cout, cin, k, k)));
            specs.push((format!("{name}.bias"), Dims::new(1, cout, 1, 1)));
        };
        let mut cin = self.in_channels;
        for (i, &width) in w.iter().enumerate() {
            conv(&format!("stage{}.conv1", i + 1), width, cin, 3, &mut specs);
            conv(&format!("stage{}.conv2", i + 1), width, width, 3, &mut specs);
            cin = width;
        }
        // Decoder channel plan: w4 -> w3 -> w2 -> w1 -> w1.
        let dec_out = [w[2], w[1], w[0], w[0]];
        let mut dec_in = w[3];
        for (i, &out) in dec_out.iter().enumerate() {
            conv(&format!("decoder{}.conv", i + 1), out, dec_in, 3, &mut specs);
            dec_in = out;
        }
        conv("head", self.num_classes, w[0], 1, &mut specs);
        if self.with_existence_head {
            conv("exist", self.max_lanes, w[3], 1, &mut specs);
        }
        specs
    }
}

/// Instantiated parameter set. Parameter order is fixed by
/// [`NetworkConfig::parameter_specs`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    params: Vec<(String, Tensor<f32>)>,
}

impl Network {
    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }
}

/// Deterministic He-style initialization: fan-in scaled normal draws for
/// conv weights, zero biases, all from one seeded stream in inventory order.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (name, dims) in cfg.parameter_specs() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(dims)
        } else {
            let fan_in = (dims.c * dims.h * dims.w) as f64;
            let std = (2.0 / fan_in).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let mut data = Vec::with_capacity(dims.len());
            for _ in 0..dims.len() {
                data.push(normal.sample(&mut rng) as f32);
            }
            Tensor::new(dims, data)?
        };
        params.push((name, tensor));
    }
    Ok(Network { config: cfg.clone(), params })
}

/// Tape handles for one network's parameters.
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Register all parameters of a network on a tape (casting to the tape's
/// element type), in inventory order.
pub fn register_params<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Network,
    requires_grad: bool,
) -> ParamVars {
    let vars = net
        .params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.cast::<T>(), requires_grad)))
        .collect();
    ParamVars { vars }
}

/// Variables produced by one tape forward pass.
pub struct TapeForward {
    pub logits: Var,
    /// Pre-pool activation of each stage, in [`TAP_NAMES`] order.
    pub taps: [Var; 4],
    pub existence_logits: Option<Var>,
    pub existence_probs: Option<Var>,
}

impl TapeForward {
    pub fn tap(&self, name: &str) -> Option<Var> {
        TAP_NAMES.iter().position(|&n| n == name).map(|i| self.taps[i])
    }
}

/// Run the network on a tape. Works for any element type so the gradient
/// checker can replay the same graph in f64.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &NetworkConfig,
    params: &ParamVars,
    x: Var,
) -> Result<TapeForward> {
    let xd = tape.value(x).dims();
    if xd.c != cfg.in_channels {
        return Err(NetError::Config(format!(
            "input has {} channels, config expects {}",
            xd.c, cfg.in_channels
        )));
    }
    if xd.h % SPATIAL_MULTIPLE != 0 || xd.w % SPATIAL_MULTIPLE != 0 {
        return Err(NetError::Config(format!(
            "input {}x{} must be a multiple of {} in both spatial dims",
            xd.h, xd.w, SPATIAL_MULTIPLE
        )));
    }

    let mut cur = x;
    let mut taps = [x; 4];
    for i in 1..=4 {
        let w1 = params.get(&format!("stage{i}.conv1.weight"))?;
        let b1 = params.get(&format!("stage{i}.conv1.bias"))?;
        cur = tape.conv2d(cur, w1, b1, 1, 1)?;
        cur = tape.relu(cur);
        let w2 = params.get(&format!("stage{i}.conv2.weight"))?;
        let b2 = params.get(&format!("stage{i}.conv2.bias"))?;
        cur = tape.conv2d(cur, w2, b2, 1, 1)?;
        cur = tape.relu(cur);
        taps[i - 1] = cur;
        cur = tape.max_pool(cur, 2, 2)?;
    }
    let encoded = cur;

    for i in 1..=4 {
        let d = tape.value(cur).dims();
        cur = tape.bilinear_upsample(cur, d.h * 2, d.w * 2)?;
        let w = params.get(&format!("decoder{i}.conv.weight"))?;
        let b = params.get(&format!("decoder{i}.conv.bias"))?;
        cur = tape.conv2d(cur, w, b, 1, 1)?;
        cur = tape.relu(cur);
    }
    let hw = params.get("head.weight")?;
    let hb = params.get("head.bias")?;
    let logits = tape.conv2d(cur, hw, hb, 1, 0)?;

    let (existence_logits, existence_probs) = if cfg.with_existence_head {
        let pooled = tape.global_avg_pool(encoded);
        let ew = params.get("exist.weight")?;
        let eb = params.get("exist.bias")?;
        let z = tape.conv2d(pooled, ew, eb, 1, 0)?;
        let p = tape.sigmoid(z);
        (Some(z), Some(p))
    } else {
        (None, None)
    };

    Ok(TapeForward { logits, taps, existence_logits, existence_probs })
}

/// Plain inference result with owned tensors.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Class logits at input resolution.
    pub logits: Tensor<f32>,
    /// Pre-pool stage activations, in [`TAP_NAMES`] order.
    pub taps: Vec<(String, Tensor<f32>)>,
    /// Per-slot existence probabilities (N x max_lanes), when the head is on.
    pub existence: Option<Tensor<f32>>,
}

impl ForwardResult {
    pub fn tap(&self, name: &str) -> Option<&Tensor<f32>> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn forward(net: &Network, x: &Tensor<f32>) -> Result<ForwardResult> {
    let mut tape = Tape::<f32>::new();
    let params = register_params(&mut tape, net, false);
    let xv = tape.leaf(x.clone(), false);
    let fwd = forward_on_tape(&mut tape, &net.config, &params, xv)?;
    Ok(ForwardResult {
        logits: tape.value(fwd.logits).clone(),
        taps: TAP_NAMES
            .iter()
            .zip(fwd.taps)
            .map(|(name, v)| (name.to_string(), tape.value(v).clone()))
            .collect(),
        existence: fwd.existence_probs.map(|v| tape.value(v).clone()),
    })
}

/// Render a class mask as the teacher's input image: class id c becomes
/// intensity c/(K-1), replicated across all input channels.
pub fn label_to_image(mask: &ClassMask, in_channels: usize, num_classes: usize) -> Tensor<f32> {
    let scale = 1.0 / (num_classes as f32 - 1.0);
    Tensor::from_fn(Dims::new(1, in_channels, mask.height(), mask.width()), |_, _, y, x| {
        mask.at(y, x) as f32 * scale
    })
}

// ------------------------------------------------------------ checkpoints

/// Write a checkpoint: the tensor blob followed by a trailing UTF-8
/// key=value config record.
pub fn save_checkpoint(net: &Network, role: &str, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let named: Vec<(&str, &Tensor<f32>)> =
        net.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_tensors(&mut out, &named)?;
    use std::io::Write;
    let cfg = &net.config;
    write!(
        out,
        "in_channels={}\nnum_classes={}\nstage_widths={},{},{},{}\nwith_existence_head={}\nmax_lanes={}\nrole={}\n",
        cfg.in_channels,
        cfg.num_classes,
        cfg.stage_widths[0],
        cfg.stage_widths[1],
        cfg.stage_widths[2],
        cfg.stage_widths[3],
        cfg.with_existence_head,
        cfg.max_lanes,
        role,
    )?;
    out.flush()?;
    Ok(())
}

fn record_get<'a>(fields: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| NetError::Checkpoint(format!("{}: missing config key '{key}'", path.display())))
}

/// Read a checkpoint back. Returns the network and its recorded role.
pub fn load_checkpoint(path: &Path) -> Result<(Network, String)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let tensors = read_tensors(&mut reader)?;
    let mut trailer = String::new();
    reader
        .read_to_string(&mut trailer)
        .map_err(|e| NetError::Checkpoint(format!("{}: config record not UTF-8: {e}", path.display())))?;
    let fields: Vec<(String, String)> = trailer
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| {
                NetError::Checkpoint(format!("{}: malformed config line '{l}'", path.display()))
            })?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect::<Result<_>>()?;

    let parse = |v: &str| -> Result<usize> {
        v.parse().map_err(|_| NetError::Checkpoint(format!("{}: bad number '{v}'", path.display())))
    };
    let widths_raw = record_get(&fields, "stage_widths", path)?;
    let widths: Vec<usize> = widths_raw.split(',').map(parse).collect::<Result<_>>()?;
    if widths.len() != 4 {
        return Err(NetError::Checkpoint(format!("{}: expected 4 stage widths", path.display())));
    }
    let config = NetworkConfig {
        in_channels: parse(record_get(&fields, "in_channels", path)?)?,
        num_classes: parse(record_get(&fields, "num_classes", path)?)?,
        stage_widths: [widths[0], widths[1], widths[2], widths[3]],
        with_existence_head: record_get(&fields, "with_existence_head", path)? == "true",
        max_lanes: parse(record_get(&fields, "max_lanes", path)?)?,
    };
    let role = record_get(&fields, "role", path)?.to_string();

    // The stored inventory must match the config-derived one exactly.
    let specs = config.parameter_specs();
    if specs.len() != tensors.len() {
        return Err(NetError::Checkpoint(format!(
            "{}: {} tensors stored, config implies {}",
            path.display(),
            tensors.len(),
            specs.len()
        )));
    }
    let mut seen = HashSet::new();
    for ((name, tensor), (want_name, want_dims)) in tensors.iter().zip(&specs) {
        if name != want_name || tensor.dims() != *want_dims {
            return Err(NetError::Checkpoint(format!(
                "{}: tensor '{}' {} does not match expected '{}' {}",
                path.display(),
                name,
                tensor.dims(),
                want_name,
                want_dims
            )));
        }
        seen.insert(name.clone());
    }
    if seen.len() != specs.len() {
        return Err(NetError::Checkpoint(format!("{}: duplicate tensor names", path.display())));
    }
    Ok((Network { config, params: tensors }, role))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            in_channels: 3,
            num_classes: 5,
            stage_widths: [4, 8, 16, 32],
            with_existence_head: true,
            max_lanes: 4,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_cfg();
        let a = build_network(&cfg, 9).unwrap();
        let b = build_network(&cfg, 9).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = build_network(&cfg, 10).unwrap();
        assert_ne!(a.params()[0].1.data(), c.params()[0].1.data());
    }

    #[test]
    fn teacher_and_student_share_parameter_inventory() {
        let cfg = small_cfg();
        let teacher = build_network(&cfg, 1).unwrap();
        let student = build_network(&cfg, 2).unwrap();
        assert_eq!(teacher.params().len(), student.params().len());
        for ((nt, tt), (ns, ts)) in teacher.params().iter().zip(student.params()) {
            assert_eq!(nt, ns);
            assert_eq!(tt.dims(), ts.dims());
        }
    }

    #[test]
    fn tap_dims_halve_per_stage() {
        let cfg = NetworkConfig { stage_widths: [8, 16, 32, 64], ..small_cfg() };
        let net = build_network(&cfg, 3).unwrap();
        let x = Tensor::zeros(Dims::new(1, 3, 64, 64));
        let out = forward(&net, &x).unwrap();
        let expect = [(8, 64), (16, 32), (32, 16), (64, 8)];
        for (i, (name, tap)) in out.taps.iter().enumerate() {
            assert_eq!(name, TAP_NAMES[i]);
            let d = tap.dims();
            assert_eq!((d.c, d.h), expect[i], "tap {name}");
            assert_eq!(d.h, d.w);
        }
        assert_eq!(out.logits.dims(), Dims::new(1, 5, 64, 64));
        let exist = out.existence.unwrap();
        assert_eq!(exist.dims(), Dims::new(1, 4, 1, 1));
        assert!(exist.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zero_input_with_zero_head_gives_uniform_classes() {
        let mut net = build_network(&small_cfg(), 4).unwrap();
        for (name, t) in net.params_mut() {
            if name.starts_with("head.") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let x = Tensor::zeros(Dims::new(1, 3, 32, 32));
        let out = forward(&net, &x).unwrap();
        // All logits equal -> softmax uniform.
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_forward_equals_stacked_single_forwards() {
        let net = build_network(&small_cfg(), 5).unwrap();
        let a = Tensor::from_fn(Dims::new(1, 3, 32, 32), |_, c, y, x| {
            ((c + y * x) % 7) as f32 * 0.1
        });
        let b = Tensor::from_fn(Dims::new(1, 3, 32, 32), |_, c, y, x| {
            ((c * 3 + y + x) % 5) as f32 * 0.2 - 0.3
        });
        let batch = Tensor::stack(&[&a, &b]).unwrap();
        let joint = forward(&net, &batch).unwrap();
        let fa = forward(&net, &a).unwrap();
        let fb = forward(&net, &b).unwrap();
        let merged = Tensor::stack(&[&fa.logits, &fb.logits]).unwrap();
        assert_eq!(joint.logits.data(), merged.data());
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let net = build_network(&small_cfg(), 6).unwrap();
        let x = Tensor::zeros(Dims::new(1, 3, 40, 40));
        let err = forward(&net, &x).unwrap_err();
        assert!(err.to_string().contains("multiple of 16"), "got: {err}");
    }

    #[test]
    fn label_rendering_scales_class_ids() {
        let mask = ClassMask::zeros(4, 4);
        let img = label_to_image(&mask, 3, 5);
        assert!(img.data().iter().all(|&v| v == 0.0));

        let mut mask = ClassMask::zeros(4, 4);
        mask.set(1, 2, 1);
        let img = label_to_image(&mask, 2, 2);
        for c in 0..2 {
            assert_eq!(img.at(0, c, 1, 2), 1.0);
        }
        // Thresholding recovers the binary mask exactly for K=2.
        let mut recovered = ClassMask::zeros(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                if img.at(0, 0, y, x) > 0.5 {
                    recovered.set(y, x, 1);
                }
            }
        }
        assert_eq!(recovered, mask);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_network(&small_cfg(), 8).unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&net, "teacher", &path).unwrap();
        let (back, role) = load_checkpoint(&path).unwrap();
        assert_eq!(role, "teacher");
        assert_eq!(back.config, net.config);
        for ((na, ta), (nb, tb)) in net.params().iter().zip(back.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = small_cfg();
        cfg.num_classes = 1;
        assert!(build_network(&cfg, 0).is_err());
        let mut cfg = small_cfg();
        cfg.stage_widths[2] = 0;
        assert!(build_network(&cfg, 0).is_err());
    }
}
