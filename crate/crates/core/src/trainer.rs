//! Joint training with AdamW, checkpoints and evaluation.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tensor::{Graph, ParamStore, Rng, Tensor, TensorError};

use crate::cmadiff::{sample, SampleOptions, ScheduleConfig};
use crate::error::{Error, Result};
use crate::image::{Image, SIZE};
use crate::io::write_atomic;
use crate::model::{LossWeights, Model};
use crate::scene::{SceneGraph, N_MAX};
use crate::slvae;
use crate::synth::{eval_metrics, Dataset, Metrics};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"DISCO001";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step, as a fraction of `lr`.
    pub lr_final_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    pub cond_dropout: f64,
    pub schedule: ScheduleConfig,
    pub n_max: usize,
    pub seed: u64,
    /// Steps between progress reports; 0 disables them.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            lr: 1e-4,
            lr_final_fraction: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            loss_weights: LossWeights::default(),
            cond_dropout: 0.1,
            schedule: ScheduleConfig::default(),
            n_max: N_MAX,
            seed: 0,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        let checks = [
            (self.batch_size > 0, "batch_size must be positive"),
            (self.lr > 0.0, "lr must be positive"),
            ((0.0..=1.0).contains(&self.lr_final_fraction), "lr_final_fraction must lie in [0, 1]"),
            ((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)"),
            (self.adam_eps > 0.0, "adam_eps must be positive"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (self.grad_clip > 0.0, "grad_clip must be positive"),
            (w.diffusion > 0.0 && w.union > 0.0 && w.layout > 0.0, "loss weights must be positive"),
            ((0.0..1.0).contains(&self.cond_dropout), "cond_dropout must lie in [0, 1)"),
            (self.n_max == N_MAX, "n_max must equal the model capacity (8)"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Constraint(msg.into()));
            }
        }
        Ok(())
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.lr * (1.0 - frac * (1.0 - self.lr_final_fraction))
    }
}

/// AdamW moments, named like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update. `grads` is indexed like the
    /// store; missing entries count as zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let g = grads[k].as_ref().map(Tensor::data);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                p[i] -= lr * (update + cfg.weight_decay * p[i]);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub diffusion: f64,
    pub union: f64,
    pub layout: f64,
}

/// Metadata stored after the tensors of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: String,
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    /// Optimizer steps taken; also the index of the next step's RNG stream.
    pub step: usize,
    pub adam_t: u64,
    pub loss_curve: Vec<LossRecord>,
}

pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// A fresh, untrained checkpoint.
    pub fn init(config: TrainConfig, vocabulary: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::new(vocabulary.clone(), config.schedule, config.seed)?;
        let adam = AdamState::new(&model.store);
        Ok(Self {
            model,
            adam,
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION.into(),
                config,
                vocabulary,
                step: 0,
                adam_t: 0,
                loss_curve: Vec::new(),
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (_, name, t) in store.iter() {
            tensors.push((name.to_string(), t));
        }
        for (k, (_, name, _)) in store.iter().enumerate() {
            tensors.push((format!("adam.m/{name}"), &self.adam.m[k]));
            tensors.push((format!("adam.v/{name}"), &self.adam.v[k]));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut meta = self.meta.clone();
        meta.adam_t = self.adam.t;
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            if magic.starts_with(b"DISCO") {
                return Err(Error::CheckpointVersion {
                    found: String::from_utf8_lossy(&magic[5..]).into_owned(),
                    expected: "001".into(),
                });
            }
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let count = u32::from_le_bytes(read_array(&mut r, "tensor count")?) as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(4096));
        for k in 0..count {
            let what = format!("tensor #{k}");
            let len = u16::from_le_bytes(read_array(&mut r, &what)?) as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, &what)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint(format!("{what}: name is not UTF-8")))?;
            let rank = read_array::<1>(&mut r, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_array(&mut r, &name)?) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > r.len() {
                return Err(Error::CheckpointTensor {
                    name,
                    reason: "truncated data".into(),
                });
            }
            let data: Vec<f64> = (0..numel)
                .map(|_| read_array(&mut r, &name).map(f64::from_le_bytes))
                .collect::<Result<_>>()?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let len = u32::from_le_bytes(read_array(&mut r, "metadata length")?) as usize;
        if r.len() != len {
            return Err(Error::Checkpoint(format!(
                "metadata length {len} does not match the {} remaining bytes",
                r.len()
            )));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(r).map_err(|e| Error::Checkpoint(format!("invalid metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: meta.format_version,
                expected: FORMAT_VERSION.into(),
            });
        }
        meta.config.validate()?;

        let mut model = Model::new(meta.vocabulary.clone(), meta.config.schedule, meta.config.seed)?;
        let mut adam = AdamState::new(&model.store);
        adam.t = meta.adam_t;
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let ids: Vec<_> = model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = model.store.name(id).to_string();
            for (key, slot) in [
                (name.clone(), model.store.get_mut(id)),
                (format!("adam.m/{name}"), &mut adam.m[k]),
                (format!("adam.v/{name}"), &mut adam.v[k]),
            ] {
                let t = by_name.remove(&key).ok_or_else(|| Error::CheckpointTensor {
                    name: key.clone(),
                    reason: "missing".into(),
                })?;
                if t.shape() != slot.shape() {
                    return Err(Error::CheckpointTensor {
                        name: key,
                        reason: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                    });
                }
                *slot = t;
            }
        }
        if let Some(name) = by_name.into_keys().min() {
            return Err(Error::CheckpointTensor {
                name,
                reason: "not part of the model".into(),
            });
        }
        Ok(Self { model, adam, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_array<const N: usize>(r: &mut &[u8], what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

/// Batch indices for `step`: drawn with replacement from stream `step` of
/// the training seed, so any step can be replayed in isolation.
pub fn batch_indices(cfg: &TrainConfig, step: usize, n: usize) -> (Vec<usize>, Rng) {
    let mut rng = Rng::with_stream(cfg.seed ^ 0x74_7261_696e, step as u64);
    let idx = (0..cfg.batch_size).map(|_| rng.below(n)).collect();
    (idx, rng)
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: usize,
    indices: &'a [usize],
    scenes: Vec<&'a SceneGraph>,
    losses: [f64; 4],
}

/// Runs one optimizer step on dataset items `idx`, returning the losses.
pub fn train_step(ck: &mut Checkpoint, data: &Dataset, step: usize, dump_dir: &Path) -> Result<LossRecord> {
    let cfg = ck.meta.config.clone();
    let (idx, mut rng) = batch_indices(&cfg, step, data.len());
    let signed: Vec<Vec<f64>> = idx.iter().map(|&i| data.images[i].to_signed()).collect();
    let items: Vec<(&SceneGraph, &[f64])> = idx.iter().zip(&signed).map(|(&i, x)| (&data.scenes[i], &x[..])).collect();

    let dump_batch = |losses: [f64; 4]| -> Result<Error> {
        let dump = dump_dir.join(format!("nonfinite-step{step}.json"));
        let body = BatchDump {
            step,
            indices: &idx,
            scenes: idx.iter().map(|&i| &data.scenes[i]).collect(),
            losses,
        };
        write_atomic(&dump, &serde_json::to_vec_pretty(&body).expect("dump serializes"))?;
        Ok(Error::NonFiniteLoss { step, dump })
    };

    let mut g = Graph::new();
    let terms = match ck
        .model
        .loss(&mut g, &items, &cfg.loss_weights, cfg.cond_dropout, &mut rng)
    {
        Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(dump_batch([f64::NAN; 4])?),
        other => other?,
    };
    let rec = LossRecord {
        step,
        total: g.value(terms.total).item(),
        diffusion: g.value(terms.diffusion).item(),
        union: g.value(terms.union).item(),
        layout: g.value(terms.layout).item(),
    };
    if ![rec.total, rec.diffusion, rec.union, rec.layout].iter().all(|x| x.is_finite()) {
        return Err(dump_batch([rec.total, rec.diffusion, rec.union, rec.layout])?);
    }
    let grads = g.backward(terms.total)?;
    let mut by_param: Vec<Option<Tensor>> = vec![None; ck.model.store.len()];
    for (id, t) in g.param_grads(&grads) {
        by_param[id.index()] = Some(t);
    }
    clip_global_norm(&mut by_param, cfg.grad_clip);
    ck.adam
        .step(&mut ck.model.store, &by_param, cfg.lr_at(step), &cfg);
    Ok(rec)
}

/// Trains until `ck.meta.config.steps` steps have run. `progress` sees
/// every loss record.
pub fn train(
    ck: &mut Checkpoint,
    data: &Dataset,
    dump_dir: &Path,
    mut progress: impl FnMut(&LossRecord),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Constraint("training needs at least one scene".into()));
    }
    if data.manifest.vocabulary != ck.meta.vocabulary {
        return Err(Error::Constraint("dataset vocabulary differs from the checkpoint's".into()));
    }
    while ck.meta.step < ck.meta.config.steps {
        let rec = train_step(ck, data, ck.meta.step, dump_dir)?;
        ck.meta.loss_curve.push(rec);
        ck.meta.step += 1;
        progress(&rec);
    }
    Ok(())
}

/// Evaluation report: oracle metrics on sampled images, layout decoder L1
/// against ground truth and the training loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layout_iou: f64,
    pub attr_acc: f64,
    pub count_acc: f64,
    pub layout_l1: f64,
    pub samples: usize,
    pub loss_curve: Vec<LossRecord>,
}

/// Samples one image per scene (conditioned on ground-truth boxes and
/// semantics decoded from the scene's prior), scores them with the blob
/// oracle and measures the layout decoder's posterior reconstruction L1.
pub fn evaluate(ck: &Checkpoint, scenes: &[SceneGraph], opts: &SampleOptions, seed: u64) -> Result<(EvalReport, Vec<Image>)> {
    let model = &ck.model;
    let mut images = Vec::with_capacity(scenes.len());
    let mut l1 = 0.0;
    for (i, s) in scenes.iter().enumerate() {
        let scene_seed = tensor::mix(seed ^ tensor::mix(i as u64));
        let mut view = model.draw_view(s, scene_seed)?;
        view.boxes = s.boxes()?;
        let objects = model.object_conds(s, &view)?;
        let x = sample(model, &model.schedule, &objects, opts, scene_seed)?;
        images.push(Image::from_signed(SIZE, SIZE, &x));
        l1 += reconstruction_l1(model, s)?;
    }
    let Metrics {
        layout_iou,
        attr_acc,
        count_acc,
    } = eval_metrics(&images, scenes);
    let n = scenes.len().max(1) as f64;
    Ok((
        EvalReport {
            layout_iou,
            attr_acc,
            count_acc,
            layout_l1: l1 / n,
            samples: scenes.len(),
            loss_curve: ck.meta.loss_curve.clone(),
        },
        images,
    ))
}

/// Layout L1 of boxes decoded from the posterior mean of `s`.
pub fn reconstruction_l1(model: &Model, s: &SceneGraph) -> Result<f64> {
    let batch = crate::embed::SceneBatch::single(s);
    let mut g = Graph::new();
    let lat = model.vae.encode(&mut g, &model.store, &model.embedder, &batch)?;
    let layout = model
        .vae
        .decode_layout(&mut g, &model.store, &model.embedder, &batch, lat.mu)?;
    let pred = slvae::LayoutSample::from_tensor(g.value(layout)).boxes;
    slvae::layout_l1(&pred, &s.boxes()?)
}

/// Writes `report` as pretty JSON.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    crate::io::write_json(path, report)
}

/// Default location for non-finite-loss dumps next to a checkpoint path.
pub fn dump_dir_for(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{vocabulary, SynthConfig};

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_decays_linearly() {
        let c = TrainConfig {
            steps: 5,
            lr: 1.0,
            lr_final_fraction: 0.2,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..5).map(|s| c.lr_at(s)).collect();
        for (a, b) in lrs.iter().zip([1.0, 0.8, 0.6, 0.4, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 0.0]).unwrap()), None, Some(Tensor::scalar(4.0))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().flatten().flat_map(|t| t.data().to_vec()).map(|x| x * x).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut a = AdamState::new(&store);
        a.step(&mut store, &[Some(Tensor::vector(vec![0.5, -3.0]).unwrap())], 0.1, &cfg);
        let p = store.iter().next().unwrap().2.data().to_vec();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let data = Dataset::generate(3, 1, SynthConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::init(tiny_config(2), vocabulary()).unwrap();
        train(&mut ck, &data, dir.path(), |_| {}).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta.step, 2);
    }

    #[test]
    fn zero_steps_equals_initialization() {
        let data = Dataset::generate(2, 1, SynthConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::init(tiny_config(0), vocabulary()).unwrap();
        train(&mut ck, &data, dir.path(), |_| {}).unwrap();
        let init = Checkpoint::init(tiny_config(0), vocabulary()).unwrap();
        assert_eq!(ck.to_bytes(), init.to_bytes());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ck = Checkpoint::init(tiny_config(0), vocabulary()).unwrap();
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::CheckpointTensor { .. } | Error::Checkpoint(_))
        ));
        let mut v = bytes.clone();
        v[5..8].copy_from_slice(b"002");
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::CheckpointVersion { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::Checkpoint(_))));
    }
}
