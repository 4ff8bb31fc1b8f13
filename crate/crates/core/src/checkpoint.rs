//! Checkpoint directories.
//!
//! Layout:
//! ```text
//! meta.json                  format version, step, seed, task, size, λ, loss averages, optimiser step counts
//! config.toml                the run configuration
//! generator.safetensors      coarse + refinement networks (with normalisation statistics)
//! disc_coarse.safetensors
//! disc_refined.safetensors
//! optimizer.safetensors      first/second moments, keyed `<net>/m.<param>` and `<net>/v.<param>`
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::model::Generator;
use crate::nn::{read_safetensors, Adam, ParamStore};
use crate::train::TrainState;

pub const FORMAT_VERSION: u32 = 1;

const META: &str = "meta.json";
const CONFIG: &str = "config.toml";
const GENERATOR: &str = "generator.safetensors";
const DISC_COARSE: &str = "disc_coarse.safetensors";
const DISC_REFINED: &str = "disc_refined.safetensors";
const OPTIMIZER: &str = "optimizer.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    pub task: TaskKind,
    pub image_size: usize,
    pub lambda: f64,
    pub averages: Option<LossBreakdown>,
    pub optimizer_steps: BTreeMap<String, BTreeMap<String, u64>>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

fn optimizers(state: &TrainState) -> [(&'static str, &Adam); 3] {
    [("generator", &state.g_opt), ("disc_coarse", &state.dc_opt), ("disc_refined", &state.dr_opt)]
}

/// Writes `state` and `cfg` into `dir`, creating it if needed.
pub fn save(dir: &Path, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.g_store.save(dir.join(GENERATOR))?;
    state.dc_store.save(dir.join(DISC_COARSE))?;
    state.dr_store.save(dir.join(DISC_REFINED))?;

    let mut moments: HashMap<String, Tensor> = HashMap::new();
    let mut optimizer_steps = BTreeMap::new();
    for (net, opt) in optimizers(state) {
        let (tensors, steps) = opt.state();
        moments.extend(tensors.into_iter().map(|(k, v)| (format!("{net}/{k}"), v)));
        optimizer_steps.insert(net.to_string(), steps);
    }
    let opt_path = dir.join(OPTIMIZER);
    candle_core::safetensors::save(&moments, &opt_path)?;

    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        step: state.step,
        seed: state.seed,
        task: cfg.task,
        image_size: cfg.image_size(),
        lambda: cfg.lambda(),
        averages: state.averages,
        optimizer_steps,
    };
    let meta_path = dir.join(META);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| corrupt(&meta_path, e))?;
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let cfg_path = dir.join(CONFIG);
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META);
    if !dir.is_dir() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| corrupt(&path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(corrupt(
            &path,
            format!("format version {} (this build reads {FORMAT_VERSION})", meta.format_version),
        ));
    }
    Ok(meta)
}

/// The configuration stored with a checkpoint.
pub fn read_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunConfig::from_toml(&text).map_err(|e| corrupt(&path, e))
}

fn load_store(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.load(path, true).map_err(|e| corrupt(path, e))?;
    Ok(())
}

/// Rebuilds the training state described by `cfg` and fills it from `dir`.
/// Fails when the checkpoint was written for another task or image size.
pub fn load(dir: &Path, cfg: &RunConfig, device: &Device) -> Result<TrainState> {
    let meta = read_meta(dir)?;
    if meta.image_size != cfg.image_size() || meta.task != cfg.task {
        return Err(Error::Checkpoint(format!(
            "checkpoint is for {:?} at {}px but the run is {:?} at {}px",
            meta.task,
            meta.image_size,
            cfg.task,
            cfg.image_size()
        )));
    }
    let mut fresh = cfg.clone();
    fresh.generator.pretrained_encoder = None;
    let mut state = TrainState::new(&fresh, device)?;
    load_store(&mut state.g_store, &dir.join(GENERATOR))?;
    load_store(&mut state.dc_store, &dir.join(DISC_COARSE))?;
    load_store(&mut state.dr_store, &dir.join(DISC_REFINED))?;

    let opt_path = dir.join(OPTIMIZER);
    let moments = read_safetensors(&opt_path, device).map_err(|e| corrupt(&opt_path, e))?;
    let nets = [
        ("generator", &mut state.g_opt),
        ("disc_coarse", &mut state.dc_opt),
        ("disc_refined", &mut state.dr_opt),
    ];
    for (net, opt) in nets {
        let prefix = format!("{net}/");
        let tensors: HashMap<String, Tensor> = moments
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_string(), v.clone())))
            .collect();
        let steps = meta
            .optimizer_steps
            .get(net)
            .ok_or_else(|| corrupt(&opt_path, format!("no optimiser state for {net}")))?;
        opt.load_state(&tensors, steps).map_err(|e| corrupt(&opt_path, e))?;
    }
    state.step = meta.step;
    state.seed = meta.seed;
    state.averages = meta.averages;
    Ok(state)
}

/// Loads only the generator, for inference; no task network is involved.
pub fn load_generator(dir: &Path, device: &Device) -> Result<(Generator, ParamStore, RunConfig)> {
    read_meta(dir)?;
    let mut cfg = read_config(dir)?;
    // The stored weights replace any pretrained initialisation.
    cfg.generator.pretrained_encoder = None;
    let mut store = ParamStore::new(device, cfg.precision.dtype(), cfg.seed, false);
    let generator = Generator::new(&mut store, &cfg.generator)?;
    load_store(&mut store, &dir.join(GENERATOR))?;
    Ok((generator, store, cfg))
}
