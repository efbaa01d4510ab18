//! The toy classification network: a 1x1 linear stem with pooling, stages of
//! pre-activation residual blocks of the form [RNM, ReLU, SES-Layer], global
//! average pooling, and a linear head. Blocks expose their sampling masks to
//! the equivariance harness through the [`MaskProbe`] trait.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::harness::{MaskMap, MaskProbe};
use crate::nn::{BatchNormLayer, LinearLayer, Mode};
use crate::rnm::{rnm_forward, RnmConfig};
use crate::ses::{SesCapture, SesLayer, SesLayerConfig};
use crate::tensor::serial;
use crate::tensor::{no_grad, Tensor};
use crate::util::mix64;

const SEED_INIT: u64 = 0x494E_4954;
const SEED_NOISE: u64 = 0x4E4F_4953;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_side: usize,
    pub stem_channels: usize,
    /// 2x max-pools applied right after the stem; sets the stride of the
    /// first stage to 2^stem_pools.
    pub stem_pools: usize,
    pub stages: Vec<StageConfig>,
    pub k: usize,
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub rnm: RnmConfig,
    pub num_classes: usize,
    /// Restores a positional signal in the mask regressor and bypasses the
    /// transformation embedding (the non-equivariant reference design).
    #[serde(default)]
    pub san_ablation: bool,
}

impl NetworkConfig {
    /// Desk-scale default: 64-pixel grayscale inputs, two stages of two
    /// blocks at strides 4 and 8, four classes.
    pub fn toy() -> NetworkConfig {
        NetworkConfig {
            input_channels: 1,
            input_side: 64,
            stem_channels: 32,
            stem_pools: 2,
            stages: vec![
                StageConfig { channels: 32, blocks: 2 },
                StageConfig { channels: 64, blocks: 2 },
            ],
            k: 7,
            r1: 1,
            r2: 4,
            r3: 4,
            rnm: RnmConfig::default(),
            num_classes: 4,
            san_ablation: false,
        }
    }

    fn block_plan(&self) -> Vec<(usize, usize, usize, usize)> {
        // (stage, c_in, c_out, stride) per block in network order.
        let mut plan = Vec::new();
        let mut c_prev = self.stem_channels;
        let mut stride = 1usize << self.stem_pools;
        for (s, stage) in self.stages.iter().enumerate() {
            for _ in 0..stage.blocks {
                plan.push((s, c_prev, stage.channels, stride));
                c_prev = stage.channels;
            }
            stride *= 2;
        }
        plan
    }

    fn ses_config(&self, c_in: usize, c_out: usize) -> SesLayerConfig {
        let mut cfg = SesLayerConfig::new(c_in, c_out, self.k, self.r1, self.r2, self.r3);
        cfg.positional_encoding = self.san_ablation;
        cfg.zeta_passthrough = self.san_ablation;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_classes == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return Err(Error::Config("network needs at least one non-empty stage".into()));
        }
        let total_pool = self.stem_pools + self.stages.len() - 1;
        if self.input_side < (1 << total_pool) * self.k {
            return Err(Error::Config(format!(
                "input side {} too small for {} halvings with footprint {}",
                self.input_side, total_pool, self.k
            )));
        }
        self.rnm.validate()?;
        for (_, c_in, c_out, _) in self.block_plan() {
            self.ses_config(c_in, c_out).validate()?;
        }
        Ok(())
    }
}

pub struct Block {
    pub index: usize,
    pub stage: usize,
    pub stride: usize,
    pub rnm_bn: BatchNormLayer,
    pub ses: SesLayer,
    pub shortcut: Option<LinearLayer>,
    noise_rng: RefCell<ChaCha12Rng>,
}

/// Masks and values captured from one block during a probed forward pass.
pub struct BlockCapture {
    pub layer: usize,
    pub stride: usize,
    pub ses: SesCapture,
}

pub struct Network {
    pub cfg: NetworkConfig,
    pub stem: LinearLayer,
    pub blocks: Vec<Block>,
    pub head: LinearLayer,
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Network> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(mix64(seed, SEED_INIT));
        let stem = LinearLayer::new(cfg.input_channels, cfg.stem_channels, true, &mut rng);
        let mut blocks = Vec::new();
        for (index, (stage, c_in, c_out, stride)) in cfg.block_plan().into_iter().enumerate() {
            let ses = SesLayer::new(cfg.ses_config(c_in, c_out), &mut rng)?;
            let shortcut = (c_in != c_out).then(|| LinearLayer::new(c_in, c_out, true, &mut rng));
            blocks.push(Block {
                index,
                stage,
                stride,
                rnm_bn: BatchNormLayer::new(c_in),
                ses,
                shortcut,
                noise_rng: RefCell::new(ChaCha12Rng::seed_from_u64(mix64(seed, SEED_NOISE + index as u64))),
            });
        }
        let last_channels = cfg.stages.last().unwrap().channels;
        let head = LinearLayer::new(last_channels, cfg.num_classes, true, &mut rng);
        Ok(Network {
            cfg,
            stem,
            blocks,
            head,
        })
    }

    /// Reseeds every block's noise stream from a run seed.
    pub fn reseed_noise(&self, seed: u64) {
        for block in &self.blocks {
            *block.noise_rng.borrow_mut() =
                ChaCha12Rng::seed_from_u64(mix64(seed, SEED_NOISE + block.index as u64));
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_inner(x, mode, None)
    }

    pub fn forward_captured(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BlockCapture>)> {
        let mut caps = Vec::new();
        let out = self.forward_inner(x, mode, Some(&mut caps))?;
        Ok((out, caps))
    }

    fn forward_inner(
        &self,
        x: &Tensor,
        mode: Mode,
        mut capture: Option<&mut Vec<BlockCapture>>,
    ) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[1] != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "network input must be [N, {}, H, W], got {:?}",
                self.cfg.input_channels,
                x.shape()
            )));
        }
        let mut x = self.stem.forward_channels(x)?;
        for _ in 0..self.cfg.stem_pools {
            x = x.maxpool2()?;
        }
        let mut stage = 0usize;
        for block in &self.blocks {
            if block.stage != stage {
                x = x.maxpool2()?;
                stage = block.stage;
            }
            let (clean, pert) = rnm_forward(
                &block.rnm_bn,
                &x,
                &self.cfg.rnm,
                mode,
                &mut *block.noise_rng.borrow_mut(),
            )?;
            let clean_a = clean.relu()?;
            let pert_a = if pert.is_same(&clean) {
                clean_a.clone()
            } else {
                pert.relu()?
            };
            let route = self.cfg.rnm.routing;
            let v_src = if route.v { &pert_a } else { &clean_a };
            let q_src = if route.q { &pert_a } else { &clean_a };
            let k_src = if route.k { &pert_a } else { &clean_a };
            let y = match capture.as_deref_mut() {
                Some(caps) => {
                    let (y, ses_cap) = block.ses.forward_probed(v_src, q_src, k_src, mode)?;
                    caps.push(BlockCapture {
                        layer: block.index,
                        stride: block.stride,
                        ses: ses_cap,
                    });
                    y
                }
                None => block.ses.forward_batch(v_src, q_src, k_src, mode)?,
            };
            let shortcut = match &block.shortcut {
                Some(p) => p.forward_channels(&x)?,
                None => x.clone(),
            };
            x = shortcut.add(&y)?;
        }
        let pooled = x.global_avg_pool()?;
        self.head.forward(&pooled)
    }

    /// Trainable parameters in network order with stable names.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut lin = |name: String, l: &LinearLayer, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{name}.weight"), l.weight.clone()));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), b.clone()));
            }
        };
        lin("stem".into(), &self.stem, &mut out);
        for block in &self.blocks {
            let p = format!("block{}", block.index);
            out.push((format!("{p}.rnm.gamma"), block.rnm_bn.gamma.clone()));
            out.push((format!("{p}.rnm.beta"), block.rnm_bn.beta.clone()));
            lin(format!("{p}.ses.lin_v"), &block.ses.lin_v, &mut out);
            lin(format!("{p}.ses.lin_q"), &block.ses.lin_q, &mut out);
            lin(format!("{p}.ses.lin_k"), &block.ses.lin_k, &mut out);
            out.push((format!("{p}.ses.gamma_bn1.gamma"), block.ses.gamma_bn1.gamma.clone()));
            out.push((format!("{p}.ses.gamma_bn1.beta"), block.ses.gamma_bn1.beta.clone()));
            lin(format!("{p}.ses.gamma_lin1"), &block.ses.gamma_lin1, &mut out);
            out.push((format!("{p}.ses.gamma_bn2.gamma"), block.ses.gamma_bn2.gamma.clone()));
            out.push((format!("{p}.ses.gamma_bn2.beta"), block.ses.gamma_bn2.beta.clone()));
            lin(format!("{p}.ses.gamma_lin2"), &block.ses.gamma_lin2, &mut out);
            if let Some(z) = &block.ses.zeta {
                lin(format!("{p}.ses.zeta"), z, &mut out);
            }
            lin(format!("{p}.ses.lin_out"), &block.ses.lin_out, &mut out);
            if let Some(s) = &block.shortcut {
                lin(format!("{p}.shortcut"), s, &mut out);
            }
        }
        lin("head".into(), &self.head, &mut out);
        out
    }

    /// Batch-norm layers with their running statistics, in network order.
    pub fn norm_layers(&self) -> Vec<(String, &BatchNormLayer)> {
        let mut out = Vec::new();
        for block in &self.blocks {
            let p = format!("block{}", block.index);
            out.push((format!("{p}.rnm"), &block.rnm_bn));
            out.push((format!("{p}.ses.gamma_bn1"), &block.ses.gamma_bn1));
            out.push((format!("{p}.ses.gamma_bn2"), &block.ses.gamma_bn2));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Distinct block strides, ascending.
    pub fn strides(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.blocks.iter().map(|b| b.stride).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    kind: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "ses-checkpoint-v1";

impl Network {
    /// Writes the manifest plus one flat binary tensor file per parameter
    /// and running-statistics buffer.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        let mut idx = 0usize;
        let mut write = |name: String, kind: &str, t: &Tensor, tensors: &mut Vec<TensorEntry>| -> Result<()> {
            let file = format!("t{idx:04}.sest");
            serial::save_tensor(&dir.join(&file), t)?;
            tensors.push(TensorEntry {
                name,
                file,
                kind: kind.into(),
            });
            idx += 1;
            Ok(())
        };
        for (name, t) in self.params() {
            write(name, "param", &t, &mut tensors)?;
        }
        for (name, bn) in self.norm_layers() {
            let c = bn.channels();
            let rm = Tensor::from_vec(bn.running_mean.borrow().clone(), &[c])?;
            let rv = Tensor::from_vec(bn.running_var.borrow().clone(), &[c])?;
            write(format!("{name}.running_mean"), "buffer", &rm, &mut tensors)?;
            write(format!("{name}.running_var"), "buffer", &rv, &mut tensors)?;
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            network: self.cfg.clone(),
            tensors,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Network> {
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&raw)
            .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format '{}'",
                manifest.format
            )));
        }
        let net = Network::new(manifest.network.clone(), 0)?;
        let params: HashMap<String, Tensor> = net.params().into_iter().collect();
        let norms: HashMap<String, &BatchNormLayer> = net
            .norm_layers()
            .into_iter()
            .map(|(n, l)| (n, l))
            .collect();
        let mut loaded = 0usize;
        let mut buffers_loaded = 0usize;
        for entry in &manifest.tensors {
            let t = serial::load_tensor(&dir.join(&entry.file))?;
            match entry.kind.as_str() {
                "param" => {
                    let dst = params.get(&entry.name).ok_or_else(|| {
                        Error::Checkpoint(format!("unknown parameter '{}'", entry.name))
                    })?;
                    if dst.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!(
                            "parameter '{}' has shape {:?}, checkpoint holds {:?}",
                            entry.name,
                            dst.shape(),
                            t.shape()
                        )));
                    }
                    dst.update_data(|d| d.copy_from_slice(&t.data()));
                    loaded += 1;
                }
                "buffer" => {
                    let (layer_name, field) = entry
                        .name
                        .rsplit_once('.')
                        .ok_or_else(|| Error::Checkpoint(format!("bad buffer name '{}'", entry.name)))?;
                    let bn = norms.get(layer_name).ok_or_else(|| {
                        Error::Checkpoint(format!("unknown norm layer '{layer_name}'"))
                    })?;
                    if t.numel() != bn.channels() {
                        return Err(Error::Checkpoint(format!(
                            "buffer '{}' length {} does not match {} channels",
                            entry.name,
                            t.numel(),
                            bn.channels()
                        )));
                    }
                    match field {
                        "running_mean" => *bn.running_mean.borrow_mut() = t.to_vec(),
                        "running_var" => *bn.running_var.borrow_mut() = t.to_vec(),
                        other => {
                            return Err(Error::Checkpoint(format!("unknown buffer field '{other}'")))
                        }
                    }
                    buffers_loaded += 1;
                }
                other => return Err(Error::Checkpoint(format!("unknown tensor kind '{other}'"))),
            }
        }
        if loaded != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {loaded} of {} parameters",
                params.len()
            )));
        }
        if buffers_loaded != 2 * norms.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {buffers_loaded} of {} running-statistics buffers",
                2 * norms.len()
            )));
        }
        Ok(net)
    }
}

impl MaskProbe for Network {
    fn strides(&self) -> Vec<usize> {
        Network::strides(self)
    }

    fn probe(&self, img: &ImageGrid, stride: usize) -> Result<Vec<MaskMap>> {
        if img.channels != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "probe image has {} channels, network expects {}",
                img.channels, self.cfg.input_channels
            )));
        }
        let _guard = no_grad();
        let x = img
            .to_tensor()
            .reshape(&[1, img.channels, img.height, img.width])?;
        let (_logits, caps) = self.forward_captured(&x, Mode::Eval)?;
        Ok(caps
            .into_iter()
            .filter(|c| c.stride == stride)
            .map(|c| {
                let [_, c_w, k2, h, w] = c.ses.mask_shape;
                MaskMap {
                    layer: c.layer,
                    stride: c.stride,
                    k: (k2 as f64).sqrt() as usize,
                    c_w,
                    height: h,
                    width: w,
                    data: c.ses.masks,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetworkConfig {
        // Small enough for fast tests: 32-pixel inputs, one block per stage.
        NetworkConfig {
            input_side: 32,
            stem_pools: 1,
            stages: vec![
                StageConfig { channels: 16, blocks: 1 },
                StageConfig { channels: 24, blocks: 1 },
            ],
            k: 5,
            r2: 4,
            r3: 2,
            stem_channels: 16,
            ..NetworkConfig::toy()
        }
    }

    fn random_batch(seed: u64, n: usize, side: usize) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[n, 1, side, side], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn toy_config_is_valid_and_has_two_strides() {
        let cfg = NetworkConfig::toy();
        cfg.validate().unwrap();
        let net = Network::new(cfg, 7).unwrap();
        assert_eq!(net.strides(), vec![4, 8]);
        assert_eq!(net.blocks.len(), 4);
        assert!(net.blocks[2].shortcut.is_some());
        assert!(net.blocks[3].shortcut.is_none());
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let net = Network::new(tiny_cfg(), 3).unwrap();
        let x = random_batch(1, 2, 32);
        let _guard = no_grad();
        let a = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.shape(), &[2, 4]);
        let b = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn same_seed_same_initialization() {
        let a = Network::new(tiny_cfg(), 11).unwrap();
        let b = Network::new(tiny_cfg(), 11).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let c = Network::new(tiny_cfg(), 12).unwrap();
        let pa: Vec<f64> = a.params()[0].1.to_vec();
        let pc: Vec<f64> = c.params()[0].1.to_vec();
        assert_ne!(pa, pc);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_eval() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(tiny_cfg(), 5).unwrap();
        // Move the running stats off their initialization so the round trip
        // covers buffers too.
        let x = random_batch(2, 4, 32);
        net.forward(&x, Mode::Train).unwrap();
        net.save_checkpoint(dir.path()).unwrap();
        let back = Network::load_checkpoint(dir.path()).unwrap();
        let probe = random_batch(3, 2, 32);
        let _guard = no_grad();
        let a = net.forward(&probe, Mode::Eval).unwrap();
        let b = back.forward(&probe, Mode::Eval).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn checkpoint_rejects_mismatched_network() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(tiny_cfg(), 5).unwrap();
        net.save_checkpoint(dir.path()).unwrap();
        // Corrupt the manifest: drop one tensor entry.
        let mpath = dir.path().join("manifest.json");
        let raw = std::fs::read_to_string(&mpath).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&raw).unwrap();
        let arr = v["tensors"].as_array_mut().unwrap();
        arr.pop();
        std::fs::write(&mpath, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(Network::load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn probe_returns_masks_at_requested_stride() {
        let net = Network::new(tiny_cfg(), 9).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..32 * 32).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let img = ImageGrid::new(1, 32, 32, data).unwrap();
        let maps = net.probe(&img, 2).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].stride, 2);
        assert_eq!(maps[0].height, 16);
        assert_eq!(maps[0].c_w, 8); // c_v = 16 / r1 = 16, r3 = 2
        // Footprints sum to one.
        let m = &maps[0];
        for (cy, cx) in m.interior() {
            let s: f64 = (0..m.k * m.k).map(|j| m.mask_at(0, (cy, cx), j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
