use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use patchvid_core::checkpoint;
use patchvid_core::config::RunConfig;
use patchvid_core::error::Error;
use patchvid_core::hierarchy::ModelState;
use patchvid_core::metrics::{diversity, svfid, FeatureExtractor, MetricRecord, PixelFeatures, RandomConvFeatures};
use patchvid_core::schedule::build_schedule;
use patchvid_core::tensor::Tensor;
use patchvid_core::video::{VideoTensor, DEFAULT_FPS};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::videoio::{read_video, write_video, RAW_EXTENSION};

pub const LOSS_LOG: &str = "losses.jsonl";

/// Cuts `video` into consecutive non-overlapping slices of `config.slice_frames()` frames.
pub fn cut_slices(video: &VideoTensor, config: &RunConfig) -> Result<Vec<VideoTensor>, Error> {
    let len = config.slice_frames();
    if config.spatial_only && video.frames() != 1 {
        return Err(Error::Data(format!("image mode expects a single frame, got {}", video.frames())));
    }
    if video.frames() < len {
        return Err(Error::Data(format!(
            "insufficient frames: {} frames given but the strides {:?} need slices of {len}",
            video.frames(),
            config.strides
        )));
    }
    let count = video.frames() / len;
    let dropped = video.frames() - count * len;
    if dropped > 0 {
        warn!("dropping {dropped} trailing frames that do not fill a {len}-frame slice");
    }
    (0..count).map(|i| video.slice_frames(i * len, len)).collect()
}

#[derive(Serialize)]
struct LossLine<'a> {
    scale: usize,
    iteration: usize,
    #[serde(flatten)]
    loss: &'a patchvid_core::hierarchy::IterationLoss,
}

fn append_losses(out: &Path, state: &ModelState) -> Result<()> {
    let log = state.logs.last().expect("a trained scale has a log");
    let path = out.join(LOSS_LOG);
    let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    for (iteration, loss) in log.iterations.iter().enumerate() {
        let line = serde_json::to_string(&LossLine { scale: log.scale, iteration, loss })?;
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn train(config_path: &Path, input: &Path, out: &Path, resume: bool) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let video = read_video(input)?;
    let clips = cut_slices(&video, &config)?;
    info!("training on {} slice(s) of {:?}", clips.len(), clips[0].dims());

    let mut state = if out.join(checkpoint::MANIFEST).exists() {
        if !resume {
            return Err(Error::State(format!("{} already holds a checkpoint; pass --resume to continue it", out.display())).into());
        }
        let state = checkpoint::load(out)?;
        if state.config.hash() != config.hash() {
            return Err(Error::Config(format!("config {} differs from the checkpoint's {}", config.hash(), state.config.hash())).into());
        }
        info!("resuming at scale {} of {}", state.trained, state.finest());
        state
    } else {
        let [_, h, w, c] = clips[0].dims();
        let schedule = build_schedule(&config, [clips[0].frames(), h, w])?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let _ = fs::remove_file(out.join(LOSS_LOG));
        ModelState::new(config, schedule, c)?
    };

    state.train_all(&clips, |s| {
        let log = s.logs.last().expect("scale log");
        let (first, last) = log.recon_windows(50);
        info!("scale {} done: recon {first:.4} -> {last:.4}, noise amplitude {:.4}", log.scale, log.noise_amp);
        checkpoint::save(s, out)?;
        append_losses(out, s).map_err(|e| Error::Data(format!("{e:#}")))?;
        Ok(())
    })?;
    println!("trained {} scales; checkpoint in {}", state.trained, out.display());
    Ok(())
}

fn load_complete(dir: &Path) -> Result<ModelState> {
    let state = checkpoint::load(dir)?;
    if !state.is_complete() {
        return Err(Error::State(format!("checkpoint has {} of {} scales trained", state.trained, state.finest() + 1)).into());
    }
    Ok(state)
}

/// Generator for sample `index`: its own ChaCha stream, so samples do not depend on `count`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn to_video(t: &Tensor) -> Result<VideoTensor> {
    Ok(VideoTensor::from_cthw(t, DEFAULT_FPS)?)
}

pub fn sample(dir: &Path, count: usize, seed: u64, shape: Option<[usize; 3]>, out: &Path, raw: bool) -> Result<()> {
    let state = load_complete(dir)?;
    for i in 0..count {
        let x = state.generate_random(state.finest(), &mut sample_rng(seed, i), shape)?;
        let name = if raw { format!("sample_{i:03}.{RAW_EXTENSION}") } else { format!("sample_{i:03}") };
        write_video(&to_video(&x)?, &out.join(name))?;
    }
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Extractor {
    Pixels,
    RandomConv,
}

pub struct EvalOptions {
    pub count: usize,
    pub seed: u64,
    pub extractor: Extractor,
    pub svfid_dims: [usize; 3],
    pub reconstruct: bool,
}

pub fn evaluate(dir: &Path, real_path: &Path, opts: &EvalOptions) -> Result<Vec<MetricRecord>> {
    if opts.count < 2 {
        bail!(Error::Config(format!("evaluation needs at least 2 samples, got {}", opts.count)));
    }
    let state = load_complete(dir)?;
    let real = read_video(real_path)?;
    let slice = cut_slices(&real, &state.config)?.swap_remove(0);
    let pyramid = state.pyramid(&slice)?;
    let n = state.finest();
    let reference = to_video(&pyramid[n])?;

    let samples = (0..opts.count)
        .map(|i| {
            let x = if opts.reconstruct {
                state.reconstruct_mean(&pyramid[0], n)?
            } else {
                state.generate_random(n, &mut sample_rng(opts.seed, i), None)?
            };
            to_video(&x)
        })
        .collect::<Result<Vec<_>>>()?;

    let extractor: Box<dyn FeatureExtractor> = match opts.extractor {
        Extractor::Pixels => Box::new(PixelFeatures),
        Extractor::RandomConv => Box::new(RandomConvFeatures::new(state.image_channels, 8, 0)),
    };
    let scores = samples.iter().map(|s| svfid(&reference, s, extractor.as_ref(), opts.svfid_dims)).collect::<Result<Vec<_>, _>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64).sqrt();

    let hash = state.config.hash();
    let record = |name: String, value: f64| MetricRecord { name, value, seed: opts.seed, config_hash: hash.clone() };
    Ok(vec![
        record("diversity".into(), diversity(&reference, &samples)?),
        record(format!("svfid_{}_mean", extractor.name()), mean),
        record(format!("svfid_{}_std", extractor.name()), std),
    ])
}

pub fn inject(dir: &Path, guide_path: &Path, start: usize, out: &Path) -> Result<()> {
    let state = load_complete(dir)?;
    let guide = read_video(guide_path)?;
    if guide.channels() != state.image_channels {
        bail!(Error::Data(format!("guide has {} channels, the model {}", guide.channels(), state.image_channels)));
    }
    let result = state.inject(&guide.to_cthw(), start)?;
    write_video(&VideoTensor::from_cthw(&result.output, guide.fps)?, &out.join("output")).context("writing injection output")?;
    write_video(&VideoTensor::from_cthw(&result.guide, guide.fps)?, &out.join("guide")).context("writing resampled guide")?;
    println!("wrote output and resampled guide to {}", out.display());
    Ok(())
}
