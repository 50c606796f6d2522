//! Experiment pipeline behind the CLI. Every stage reads the containers the
//! previous stage wrote under `<out>/t60_<value>/` and writes its own:
//!
//! | stage    | reads                    | writes                               |
//! |----------|--------------------------|--------------------------------------|
//! | simulate | config                   | `dataset.bgtc`                       |
//! | estimate | `dataset.bgtc`           | `features.bgtc`                      |
//! | train    | both                     | `model_<loss>.bgtc`, `train_<loss>.json` (and the `self_rtfs` variants) |
//! | eval     | all of the above         | `eval_<loss>.bgtc`, `table_<loss>.json`, optional WAVs |
//! | report   | `eval_<loss>.bgtc`       | `<out>/report_<loss>.csv`            |

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beamformer::{mvdr_weights_factored, shadow_filter, NoiseFactors};
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::gcn::{infer, load_checkpoint, save_checkpoint, train, CheckpointMeta, ExampleSet, GcnParams, TrainConfig, TrainLog};
use crate::graph::{attach_query, leave_one_out, FeatureBank, QueryAttachment};
use crate::linalg::HermitianMatrix;
use crate::metrics::{estoi, sbf, si_sdr, snr_out, stoi};
use crate::objective::{LossExample, Objective};
use crate::room::{build_scene, render_with_airs, Air, Point, RoomSpec, Scene, SceneSpec, SourceId};
use crate::rtf::{
    estimate_covariances, estimate_rtf_clean, estimate_rtf_gevd, feature_to_rtf, label_frames, npm_features,
    rtf_from_airs, rtf_to_feature, FrameLabel, RtfFeature, L_CAUSAL, L_UNCAUSAL,
};
use crate::signal::{
    gen_pink_noise, gen_speech_like, mix_at_snr, stft, wav_write, MultichannelSignal, Signal, StftConfig, TfGrid,
    WavFormat, SAMPLE_RATE,
};
use crate::util::{derive_seed, mean_std, median};

pub const METHODS: [&str; 4] = ["gevd", "peer_rtf", "oracle", "self_rtfs"];
pub const METRICS: [&str; 6] = ["snr_out", "si_sdr", "stoi", "estoi", "sbf", "npm"];

const TAG_SPLIT: u64 = 1;
const TAG_SPEECH: u64 = 2;
const TAG_TRAIN_EXAMPLE: u64 = 3;
const TAG_TEST_EXAMPLE: u64 = 4;
const TAG_NOISE: u64 = 5;
const TAG_TRAIN: u64 = 6;
const TAG_CLEAN: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 110,
            validation: 10,
            test: 24,
        }
    }
}

/// Everything a run depends on. Serialized as JSON; every key is optional
/// and falls back to the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub room_dimensions: Point,
    pub speed_of_sound: f64,
    pub max_reflection_order: Option<usize>,
    pub scene: SceneSpec,
    pub t60s: Vec<f64>,
    /// Test input SNRs in dB; training SNRs are drawn uniformly from its range.
    pub snr_grid: Vec<f64>,
    pub split: SplitSizes,
    pub noise_draws: usize,
    /// Samples of dry speech per utterance.
    pub utterance_len: usize,
    pub air_len: usize,
    pub stft: StftConfig,
    pub l_uncausal: usize,
    pub l_causal: usize,
    pub knn_k: usize,
    /// `train.seed` is replaced by a value derived from `seed`.
    pub train: TrainConfig,
    /// Also train the network whose only neighbor is the query itself.
    pub train_self_rtfs: bool,
    pub write_audio: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let room = RoomSpec::desk_scale(0.0);
        Self {
            seed: 0,
            room_dimensions: room.dimensions,
            speed_of_sound: room.speed_of_sound,
            max_reflection_order: None,
            scene: SceneSpec::desk_scale(),
            t60s: vec![0.1, 0.3, 0.6],
            snr_grid: vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0],
            split: SplitSizes::default(),
            noise_draws: 3,
            utterance_len: 32000,
            air_len: 4096,
            stft: StftConfig::default(),
            l_uncausal: L_UNCAUSAL,
            l_causal: L_CAUSAL,
            knn_k: crate::graph::DEFAULT_K,
            train: TrainConfig::default(),
            train_self_rtfs: true,
            write_audio: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn room(&self, t60: f64) -> RoomSpec {
        RoomSpec {
            dimensions: self.room_dimensions,
            t60,
            speed_of_sound: self.speed_of_sound,
            max_order: self.max_reflection_order,
        }
    }

    pub fn num_positions(&self) -> usize {
        self.scene.grid.counts.iter().product()
    }

    fn mics(&self) -> usize {
        self.scene.mic_positions.len()
    }

    fn feature_rows(&self) -> usize {
        self.mics() - 1
    }

    fn feature_dim(&self) -> usize {
        self.l_uncausal + self.l_causal
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.split;
        if s.train + s.validation + s.test != self.num_positions() {
            return Err(Error::InvalidInput(format!(
                "split {}/{}/{} does not cover {} positions",
                s.train,
                s.validation,
                s.test,
                self.num_positions()
            )));
        }
        if s.train == 0 || s.test == 0 {
            return Err(Error::InvalidInput("train and test splits must be non-empty".into()));
        }
        if self.knn_k == 0 || self.knn_k >= s.train {
            return Err(Error::InvalidInput(format!("knn_k {} needs 0 < K < {} training positions", self.knn_k, s.train)));
        }
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("SNR grid must be non-empty and finite".into()));
        }
        if self.t60s.is_empty() {
            return Err(Error::InvalidInput("no reverberation times".into()));
        }
        if self.noise_draws == 0 {
            return Err(Error::InvalidInput("noise_draws must be at least 1".into()));
        }
        if self.scene.oog_positions.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one out-of-grid noise position".into()));
        }
        self.stft.validate()?;
        if self.l_uncausal + self.l_causal > self.stft.bins() || self.l_causal == 0 {
            return Err(Error::InvalidInput("feature lags exceed the FFT length".into()));
        }
        if self.utterance_len < 4 * self.stft.fft_len {
            return Err(Error::InvalidInput(format!("utterance_len must be at least {}", 4 * self.stft.fft_len)));
        }
        self.train.validate()
    }
}

pub fn t60_dir(out: &Path, t60: f64) -> PathBuf {
    out.join(format!("t60_{t60:.2}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Simulated material of one reverberation time.
pub struct Dataset {
    pub t60: f64,
    pub airs: Vec<Vec<Air>>,
    pub oog_airs: Vec<Vec<Air>>,
    pub excitation: Vec<Signal>,
    pub active: Vec<Vec<bool>>,
    pub train_ids: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

fn split_ids(cfg: &RunConfig) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..cfg.num_positions()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SPLIT])));
    let (tr, rest) = ids.split_at(cfg.split.train);
    let (va, te) = rest.split_at(cfg.split.validation);
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    (sorted(tr), sorted(va), sorted(te))
}

fn airs_tensor(c: &mut TensorContainer, name: &str, airs: &[Vec<Air>], air_len: usize) -> Result<()> {
    let m = airs.first().map_or(0, Vec::len);
    let data = airs.iter().flatten().flat_map(|a| a.taps.iter().copied()).collect();
    c.insert_f64(name, vec![airs.len(), m, air_len], data)
}

fn airs_from(c: &TensorContainer, name: &str) -> Result<Vec<Vec<Air>>> {
    let (shape, data) = c.f64_any(name)?;
    let [n, m, len] = shape[..] else {
        return Err(Error::Format(format!("'{name}' must be 3-dimensional")));
    };
    Ok((0..n)
        .map(|p| {
            (0..m)
                .map(|j| Air {
                    taps: data[(p * m + j) * len..(p * m + j + 1) * len].to_vec(),
                    sample_rate: SAMPLE_RATE,
                })
                .collect()
        })
        .collect())
}

fn ids_tensor(ids: &[usize]) -> Vec<i64> {
    ids.iter().map(|&i| i as i64).collect()
}

fn ids_from(c: &TensorContainer, name: &str) -> Result<Vec<usize>> {
    let (_, v) = c.i64_any(name)?;
    v.iter()
        .map(|&i| usize::try_from(i).map_err(|_| Error::Format(format!("negative id in '{name}'"))))
        .collect()
}

/// Renders the AIRs of every grid and OOG position and the dry utterance of
/// every grid position.
pub fn simulate(cfg: &RunConfig, t60: f64, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let room = cfg.room(t60);
    let scene: Scene = build_scene(&cfg.scene, &room)?;
    let n = scene.num_positions();
    info!("simulating {n} positions at T60 = {t60} s");
    let airs = (0..n)
        .map(|p| scene.airs(&room, SourceId::Grid(p), cfg.air_len))
        .collect::<Result<Vec<_>>>()?;
    let oog_airs = (0..scene.num_oog())
        .map(|o| scene.airs(&room, SourceId::Oog(o), cfg.air_len))
        .collect::<Result<Vec<_>>>()?;
    let (excitation, active): (Vec<Signal>, Vec<Vec<bool>>) = (0..n)
        .map(|p| gen_speech_like(cfg.utterance_len, derive_seed(cfg.seed, &[TAG_SPEECH, p as u64])))
        .unzip();
    let (train_ids, validation_ids, test_ids) = split_ids(cfg);
    let ds = Dataset {
        t60,
        airs,
        oog_airs,
        excitation,
        active,
        train_ids,
        validation_ids,
        test_ids,
    };
    let dir = t60_dir(out, t60);
    create_dir(&dir)?;
    let mut c = TensorContainer::new();
    airs_tensor(&mut c, "airs", &ds.airs, cfg.air_len)?;
    airs_tensor(&mut c, "oog_airs", &ds.oog_airs, cfg.air_len)?;
    c.insert_f64(
        "excitation",
        vec![n, cfg.utterance_len],
        ds.excitation.iter().flat_map(|s| s.samples().iter().copied()).collect(),
    )?;
    c.insert_i64(
        "active",
        vec![n, cfg.utterance_len],
        ds.active.iter().flatten().map(|&a| a as i64).collect(),
    )?;
    c.insert_i64("train_ids", vec![ds.train_ids.len()], ids_tensor(&ds.train_ids))?;
    c.insert_i64("validation_ids", vec![ds.validation_ids.len()], ids_tensor(&ds.validation_ids))?;
    c.insert_i64("test_ids", vec![ds.test_ids.len()], ids_tensor(&ds.test_ids))?;
    c.metadata.insert("t60".into(), t60.into());
    c.metadata.insert("seed".into(), cfg.seed.into());
    c.metadata.insert("ref_index".into(), cfg.scene.ref_index.into());
    c.save(dir.join("dataset.bgtc"))?;
    Ok(ds)
}

pub fn load_dataset(cfg: &RunConfig, t60: f64, out: &Path) -> Result<Dataset> {
    let c = TensorContainer::load(t60_dir(out, t60).join("dataset.bgtc"))?;
    let n = cfg.num_positions();
    let excitation = c.f64_array("excitation", &[n, cfg.utterance_len])?;
    let (shape, active) = c.i64_any("active")?;
    if shape != [n, cfg.utterance_len] {
        return Err(Error::Shape(format!("activity masks {shape:?} do not match the config")));
    }
    let airs = airs_from(&c, "airs")?;
    if airs.len() != n || airs.iter().any(|a| a.len() != cfg.mics()) {
        return Err(Error::Shape("dataset AIRs do not match the scene".into()));
    }
    let len = cfg.utterance_len;
    Ok(Dataset {
        t60,
        airs,
        oog_airs: airs_from(&c, "oog_airs")?,
        excitation: excitation
            .chunks(len)
            .map(|s| Signal::new(s.to_vec(), SAMPLE_RATE))
            .collect::<Result<_>>()?,
        active: active.chunks(len).map(|a| a.iter().map(|&v| v != 0).collect()).collect(),
        train_ids: ids_from(&c, "train_ids")?,
        validation_ids: ids_from(&c, "validation_ids")?,
        test_ids: ids_from(&c, "test_ids")?,
    })
}

/// One noisy observation: a position's utterance plus pink noise from an OOG
/// position at a given reference-microphone SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleSpec {
    pub position: usize,
    pub draw: usize,
    pub oog: usize,
    pub snr_db: f64,
    pub noise_seed: u64,
}

fn train_specs(cfg: &RunConfig, ids: &[usize], num_oog: usize) -> Vec<ExampleSpec> {
    let lo = cfg.snr_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cfg.snr_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for &p in ids {
        for draw in 0..cfg.noise_draws {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_TRAIN_EXAMPLE, p as u64, draw as u64]));
            let oog = rng.random_range(0..num_oog);
            let snr_db = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            out.push(ExampleSpec {
                position: p,
                draw,
                oog,
                snr_db,
                noise_seed: derive_seed(cfg.seed, &[TAG_NOISE, p as u64, draw as u64]),
            });
        }
    }
    out
}

fn test_specs(cfg: &RunConfig, ids: &[usize], num_oog: usize) -> Vec<ExampleSpec> {
    let mut out = Vec::new();
    for &p in ids {
        for (i, &snr_db) in cfg.snr_grid.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_TEST_EXAMPLE, p as u64, i as u64]));
            out.push(ExampleSpec {
                position: p,
                draw: i,
                oog: rng.random_range(0..num_oog),
                snr_db,
                noise_seed: derive_seed(cfg.seed, &[TAG_NOISE, p as u64, (1000 + i) as u64]),
            });
        }
    }
    out
}

fn specs_tensor(c: &mut TensorContainer, prefix: &str, specs: &[ExampleSpec]) -> Result<()> {
    let table = specs
        .iter()
        .flat_map(|s| [s.position as i64, s.draw as i64, s.oog as i64, s.noise_seed as i64])
        .collect();
    c.insert_i64(&format!("{prefix}_examples"), vec![specs.len(), 4], table)?;
    c.insert_f64(&format!("{prefix}_snr"), vec![specs.len()], specs.iter().map(|s| s.snr_db).collect())
}

fn specs_from(c: &TensorContainer, prefix: &str) -> Result<Vec<ExampleSpec>> {
    let (shape, table) = c.i64_any(&format!("{prefix}_examples"))?;
    let (_, snr) = c.f64_any(&format!("{prefix}_snr"))?;
    if shape.len() != 2 || shape[1] != 4 || snr.len() != shape[0] {
        return Err(Error::Format(format!("malformed '{prefix}' example table")));
    }
    Ok(table
        .chunks(4)
        .zip(snr)
        .map(|(r, &snr_db)| ExampleSpec {
            position: r[0] as usize,
            draw: r[1] as usize,
            oog: r[2] as usize,
            snr_db,
            noise_seed: r[3] as u64,
        })
        .collect())
}

/// Clean, noise and mixture signals of one example with its frame labels.
pub struct Rendered {
    pub clean: MultichannelSignal,
    pub noise: MultichannelSignal,
    pub mixture: MultichannelSignal,
    pub labels: Vec<FrameLabel>,
}

fn truncate(sig: &MultichannelSignal, len: usize) -> Result<MultichannelSignal> {
    let chans = sig
        .channels()
        .iter()
        .map(|c| Signal::new(c.samples()[..len].to_vec(), c.sample_rate()))
        .collect::<Result<Vec<_>>>()?;
    MultichannelSignal::new(chans, sig.ref_index())
}

pub fn render(cfg: &RunConfig, ds: &Dataset, spec: &ExampleSpec) -> Result<Rendered> {
    let p = spec.position;
    let airs = ds.airs.get(p).ok_or(Error::UnknownPosition(p))?;
    let oog = ds.oog_airs.get(spec.oog).ok_or(Error::UnknownPosition(spec.oog))?;
    let clean = render_with_airs(airs, &ds.excitation[p], cfg.scene.ref_index)?;
    let len = clean.len();
    let noise_src = gen_pink_noise(len, spec.noise_seed);
    let noise = truncate(&render_with_airs(oog, &noise_src, cfg.scene.ref_index)?, len)?;
    let mut active = ds.active[p].clone();
    active.resize(len, false);
    let (mixture, gain) = mix_at_snr(&clean, &noise, spec.snr_db, Some(&active))?;
    let frames = cfg.stft.num_frames(len);
    let labels = label_frames(&ds.active[p], cfg.air_len, &cfg.stft, frames);
    Ok(Rendered {
        clean,
        noise: noise.scaled(gain),
        mixture,
        labels,
    })
}

/// GEVD features of the mixture and the loaded noise covariances.
fn noisy_estimate(cfg: &RunConfig, r: &Rendered) -> Result<(RtfFeature, Vec<HermitianMatrix>, TfGrid)> {
    let grid = stft(&r.mixture, &cfg.stft)?;
    let cov = estimate_covariances(&grid, &r.labels)?;
    let h = estimate_rtf_gevd(&cov, cfg.scene.ref_index)?;
    Ok((rtf_to_feature(&h, cfg.l_uncausal, cfg.l_causal)?, cov.phi_vv, grid))
}

fn insert_features(c: &mut TensorContainer, name: &str, f: &[RtfFeature], cfg: &RunConfig) -> Result<()> {
    let data = f.iter().flat_map(|x| x.data().iter().copied()).collect();
    c.insert_f64(name, vec![f.len(), cfg.feature_rows(), cfg.feature_dim()], data)
}

fn features_from(c: &TensorContainer, name: &str, cfg: &RunConfig) -> Result<Vec<RtfFeature>> {
    let (shape, data) = c.f64_any(name)?;
    if shape.len() != 3 || shape[1] != cfg.feature_rows() || shape[2] != cfg.feature_dim() {
        return Err(Error::Shape(format!("'{name}' has shape {shape:?}")));
    }
    let stride = shape[1] * shape[2];
    data.chunks(stride.max(1))
        .take(shape[0])
        .map(|d| RtfFeature::new(cfg.l_uncausal, cfg.l_causal, cfg.mics(), cfg.scene.ref_index, d.to_vec()))
        .collect()
}

/// Fidelity figures produced by the estimation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    /// Median over positions of the mean per-microphone NPM (dB) between the
    /// clean EVD features and the AIR-ratio features.
    pub clean_vs_air_npm_median: f64,
    /// Median NPM (dB) of the noisy test features per SNR grid point.
    pub noisy_npm_median_by_snr: Vec<(f64, f64)>,
}

/// Clean features of every position (EVD of a pink-noise recording), the
/// AIR-ratio ground truth, and noisy GEVD features of every training,
/// validation and test example.
pub fn estimate(cfg: &RunConfig, t60: f64, out: &Path) -> Result<EstimateSummary> {
    cfg.validate()?;
    let ds = load_dataset(cfg, t60, out)?;
    let n = cfg.num_positions();
    let ref_index = cfg.scene.ref_index;
    let mut clean = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for p in 0..n {
        let exc = gen_pink_noise(cfg.utterance_len, derive_seed(cfg.seed, &[TAG_CLEAN, p as u64]));
        let grid = stft(&render_with_airs(&ds.airs[p], &exc, ref_index)?, &cfg.stft)?;
        let labels = label_frames(&vec![true; cfg.utterance_len], cfg.air_len, &cfg.stft, grid.frames());
        let h = estimate_rtf_clean(&grid, &labels, ref_index)?;
        clean.push(rtf_to_feature(&h, cfg.l_uncausal, cfg.l_causal)?);
        let t = rtf_from_airs(&ds.airs[p], ref_index, cfg.stft.bins())?;
        truth.push(rtf_to_feature(&t, cfg.l_uncausal, cfg.l_causal)?);
    }
    let npm_clean: Vec<f64> = clean
        .iter()
        .zip(&truth)
        .map(|(a, b)| npm_features(a, b).map(|r| r.mean))
        .collect::<Result<_>>()?;
    let num_oog = ds.oog_airs.len();
    let mut c = TensorContainer::new();
    insert_features(&mut c, "clean_features", &clean, cfg)?;
    insert_features(&mut c, "air_features", &truth, cfg)?;
    let mut by_snr: Vec<(f64, Vec<f64>)> = cfg.snr_grid.iter().map(|&s| (s, Vec::new())).collect();
    for (prefix, specs) in [
        ("train", train_specs(cfg, &ds.train_ids, num_oog)),
        ("validation", train_specs(cfg, &ds.validation_ids, num_oog)),
        ("test", test_specs(cfg, &ds.test_ids, num_oog)),
    ] {
        info!("estimating {} {prefix} examples", specs.len());
        let mut feats = Vec::with_capacity(specs.len());
        for s in &specs {
            let (f, _, _) = noisy_estimate(cfg, &render(cfg, &ds, s)?)?;
            if prefix == "test" {
                let v = npm_features(&f, &clean[s.position])?.mean;
                by_snr[s.draw].1.push(v);
            }
            feats.push(f);
        }
        specs_tensor(&mut c, prefix, &specs)?;
        insert_features(&mut c, &format!("{prefix}_noisy"), &feats, cfg)?;
    }
    let summary = EstimateSummary {
        clean_vs_air_npm_median: median(&npm_clean),
        noisy_npm_median_by_snr: by_snr.into_iter().map(|(s, v)| (s, median(&v))).collect(),
    };
    c.insert_f64("clean_vs_air_npm", vec![n], npm_clean)?;
    c.metadata.insert("t60".into(), t60.into());
    c.metadata.insert("seed".into(), cfg.seed.into());
    c.metadata.insert("summary".into(), serde_json::to_value(&summary)?);
    c.save(t60_dir(out, t60).join("features.bgtc"))?;
    Ok(summary)
}

/// Estimated features and example tables read back from `features.bgtc`.
pub struct Features {
    pub clean: Vec<RtfFeature>,
    pub air: Vec<RtfFeature>,
    pub train: Vec<(ExampleSpec, RtfFeature)>,
    pub validation: Vec<(ExampleSpec, RtfFeature)>,
    pub test: Vec<(ExampleSpec, RtfFeature)>,
    pub summary: EstimateSummary,
}

pub fn load_features(cfg: &RunConfig, t60: f64, out: &Path) -> Result<Features> {
    let c = TensorContainer::load(t60_dir(out, t60).join("features.bgtc"))?;
    let part = |prefix: &str| -> Result<Vec<(ExampleSpec, RtfFeature)>> {
        let specs = specs_from(&c, prefix)?;
        let feats = features_from(&c, &format!("{prefix}_noisy"), cfg)?;
        if specs.len() != feats.len() {
            return Err(Error::Format(format!("'{prefix}' table and features differ in length")));
        }
        Ok(specs.into_iter().zip(feats).collect())
    };
    let summary = c
        .metadata
        .get("summary")
        .cloned()
        .ok_or_else(|| Error::Format("features container lacks a summary".into()))?;
    Ok(Features {
        clean: features_from(&c, "clean_features", cfg)?,
        air: features_from(&c, "air_features", cfg)?,
        train: part("train")?,
        validation: part("validation")?,
        test: part("test")?,
        summary: serde_json::from_value(summary)?,
    })
}

/// Which neighbors a query sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// K nearest clean training nodes.
    Peer,
    /// Only the query itself.
    SelfOnly,
}

impl Variant {
    fn tag(self) -> u64 {
        match self {
            Variant::Peer => 0,
            Variant::SelfOnly => 1,
        }
    }
}

pub fn checkpoint_path(out: &Path, t60: f64, loss: Objective, variant: Variant) -> PathBuf {
    let name = match variant {
        Variant::Peer => format!("model_{}.bgtc", loss.name()),
        Variant::SelfOnly => format!("model_self_rtfs_{}.bgtc", loss.name()),
    };
    t60_dir(out, t60).join(name)
}

fn bank_of(cfg: &RunConfig, ds: &Dataset, clean: &[RtfFeature]) -> Result<FeatureBank> {
    let feats: Vec<RtfFeature> = ds.train_ids.iter().map(|&p| clean[p].clone()).collect();
    let bank = FeatureBank::new(ds.train_ids.clone(), &feats)?;
    if bank.dim() != cfg.feature_dim() {
        return Err(Error::Shape("bank dimension differs from the config".into()));
    }
    Ok(bank)
}

/// A training or validation example held in memory; the STFT of the
/// mixture is recomputed on demand.
struct Prepared {
    spec: ExampleSpec,
    attachment: QueryAttachment,
    mixture: MultichannelSignal,
    noise: Arc<NoiseFactors>,
    clean_ref: Vec<f64>,
    oracle: RtfFeature,
    oracle_out: Vec<f64>,
}

struct PreparedSet {
    cfg: StftConfig,
    items: Vec<Prepared>,
}

impl ExampleSet for PreparedSet {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn attachment(&self, i: usize) -> &QueryAttachment {
        &self.items[i].attachment
    }

    fn with_loss_example<T>(&self, i: usize, f: &mut dyn FnMut(&LossExample) -> Result<T>) -> Result<T> {
        let it = &self.items[i];
        let grid = stft(&it.mixture, &self.cfg)?;
        let ex = LossExample::with_oracle_output(grid, it.noise.clone(), &it.clean_ref, it.oracle.clone(), it.oracle_out.clone())?;
        f(&ex)
    }

    fn describe(&self, i: usize) -> String {
        let s = &self.items[i].spec;
        format!("position {} draw {} at {:.2} dB", s.position, s.draw, s.snr_db)
    }
}

fn prepare(
    cfg: &RunConfig,
    ds: &Dataset,
    clean: &[RtfFeature],
    bank: &FeatureBank,
    examples: &[(ExampleSpec, RtfFeature)],
    variant: Variant,
    leave_out: bool,
) -> Result<PreparedSet> {
    let items = examples
        .iter()
        .map(|(spec, noisy)| {
            let r = render(cfg, ds, spec)?;
            let (_, phi_vv, grid) = noisy_estimate(cfg, &r)?;
            let attachment = match (variant, leave_out) {
                (Variant::SelfOnly, _) => QueryAttachment::self_only(noisy.clone()),
                (Variant::Peer, true) => leave_one_out(bank, spec.position, noisy, cfg.knn_k)?,
                (Variant::Peer, false) => attach_query(bank, noisy, cfg.knn_k)?,
            };
            let oracle = clean[spec.position].clone();
            let ex = LossExample::new(grid, NoiseFactors::new(&phi_vv)?, r.clean.reference().samples(), oracle)?;
            Ok(Prepared {
                spec: *spec,
                attachment,
                mixture: r.mixture,
                noise: ex.noise,
                clean_ref: ex.clean_ref,
                oracle: ex.oracle,
                oracle_out: ex.oracle_out,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSet { cfg: cfg.stft, items })
}

/// Trains one network and writes its checkpoint and log.
pub fn train_stage(cfg: &RunConfig, t60: f64, out: &Path, variant: Variant) -> Result<TrainLog> {
    cfg.validate()?;
    let ds = load_dataset(cfg, t60, out)?;
    let feats = load_features(cfg, t60, out)?;
    let bank = bank_of(cfg, &ds, &feats.clean)?;
    info!("preparing {} training and {} validation examples", feats.train.len(), feats.validation.len());
    let train_set = prepare(cfg, &ds, &feats.clean, &bank, &feats.train, variant, true)?;
    let val_set = prepare(cfg, &ds, &feats.clean, &bank, &feats.validation, variant, false)?;
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(cfg.seed, &[TAG_TRAIN, variant.tag()]);
    let (params, log) = train(&bank, &train_set, Some(&val_set), &tc)?;
    let meta = CheckpointMeta {
        d: cfg.feature_dim(),
        k: match variant {
            Variant::Peer => cfg.knn_k,
            Variant::SelfOnly => 1,
        },
        m: cfg.mics(),
        loss: tc.loss,
        seed: cfg.seed,
        epoch: log.best_epoch,
    };
    let path = checkpoint_path(out, t60, tc.loss, variant);
    save_checkpoint(&path, &params, &meta)?;
    write_json(&path.with_extension("json"), &log)?;
    Ok(log)
}

/// Per-example scores of one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub snr_out: f64,
    pub si_sdr: f64,
    pub stoi: f64,
    pub estoi: f64,
    pub sbf: f64,
    pub npm: f64,
    /// Largest `|w^H h - 1|` over bins that did not fall back.
    pub distortion: f64,
}

impl Scores {
    fn metric(&self, i: usize) -> f64 {
        [self.snr_out, self.si_sdr, self.stoi, self.estoi, self.sbf, self.npm][i]
    }
}

/// Beamforms `r` steered by `f` and scores the output against the clean
/// reference-microphone signal.
pub fn score(
    f: &RtfFeature,
    oracle: &RtfFeature,
    noise: &NoiseFactors,
    clean_grid: &TfGrid,
    noise_grid: &TfGrid,
    clean_ref: &[f64],
) -> Result<(Scores, Signal)> {
    let h = feature_to_rtf(f, clean_grid.bins())?;
    let w = mvdr_weights_factored(&h, noise)?;
    let mut distortion: f64 = 0.0;
    for k in 0..h.bins() {
        if !w.fallback()[k] {
            let g: crate::signal::C64 = w.vector(k).iter().zip(h.vector(k)).map(|(a, b)| a.conj() * b).sum();
            distortion = distortion.max((g - 1.0).norm());
        }
    }
    let (s_hat, v_hat) = shadow_filter(&w, clean_grid, noise_grid)?;
    let y: Vec<f64> = s_hat.samples().iter().zip(v_hat.samples()).map(|(a, b)| a + b).collect();
    let reference = &clean_ref[..y.len()];
    let rate = clean_grid.sample_rate();
    let scores = Scores {
        snr_out: snr_out(s_hat.samples(), v_hat.samples())?,
        si_sdr: si_sdr(reference, &y)?,
        stoi: stoi(reference, &y, rate)?,
        estoi: estoi(reference, &y, rate)?,
        sbf: sbf(oracle, f, clean_ref)?,
        npm: npm_features(f, oracle)?.mean,
        distortion,
    };
    Ok((scores, Signal::new(y, rate)?))
}

/// Aggregated cell of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub t60: f64,
    pub snr_in: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per-example results of the evaluation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub t60: f64,
    pub methods: Vec<String>,
    pub examples: Vec<ExampleSpec>,
    /// `scores[example][method]`.
    pub scores: Vec<Vec<Scores>>,
}

impl EvalResult {
    pub fn rows(&self, snr_grid: &[f64]) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for (mi, method) in self.methods.iter().enumerate() {
            for &snr in snr_grid {
                for (k, metric) in METRICS.iter().enumerate() {
                    let vals: Vec<f64> = self
                        .examples
                        .iter()
                        .zip(&self.scores)
                        .filter(|(e, _)| e.snr_db == snr)
                        .map(|(_, s)| s[mi].metric(k))
                        .collect();
                    let (mean, std) = mean_std(&vals);
                    rows.push(ReportRow {
                        method: method.clone(),
                        t60: self.t60,
                        snr_in: snr,
                        metric: metric.to_string(),
                        mean,
                        std,
                        n: vals.len(),
                    });
                }
            }
        }
        rows
    }

    /// Mean of `metric` for `method` over the examples at `snr`.
    pub fn mean(&self, method: &str, metric: &str, snr: f64) -> Option<f64> {
        let mi = self.methods.iter().position(|m| m == method)?;
        let k = METRICS.iter().position(|m| *m == metric)?;
        let vals: Vec<f64> = self
            .examples
            .iter()
            .zip(&self.scores)
            .filter(|(e, _)| e.snr_db == snr)
            .map(|(_, s)| s[mi].metric(k))
            .collect();
        (!vals.is_empty()).then(|| mean_std(&vals).0)
    }

    fn to_container(&self, loss: Objective) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        specs_tensor(&mut c, "test", &self.examples)?;
        let (e, m) = (self.examples.len(), self.methods.len());
        let mut metrics = Vec::with_capacity(e * m * METRICS.len());
        let mut distortion = Vec::with_capacity(e * m);
        for row in &self.scores {
            for s in row {
                metrics.extend((0..METRICS.len()).map(|k| s.metric(k)));
                distortion.push(s.distortion);
            }
        }
        c.insert_f64("metrics", vec![e, m, METRICS.len()], metrics)?;
        c.insert_f64("distortion", vec![e, m], distortion)?;
        c.metadata.insert("t60".into(), self.t60.into());
        c.metadata.insert("loss".into(), loss.name().into());
        c.metadata.insert("methods".into(), serde_json::to_value(&self.methods)?);
        c.metadata.insert("metrics".into(), serde_json::to_value(METRICS)?);
        Ok(c)
    }

    fn from_container(c: &TensorContainer) -> Result<Self> {
        let t60 = c
            .metadata
            .get("t60")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Format("evaluation container lacks t60".into()))?;
        let methods: Vec<String> = serde_json::from_value(
            c.metadata
                .get("methods")
                .cloned()
                .ok_or_else(|| Error::Format("evaluation container lacks methods".into()))?,
        )?;
        let examples = specs_from(c, "test")?;
        let (e, m) = (examples.len(), methods.len());
        let metrics = c.f64_array("metrics", &[e, m, METRICS.len()])?;
        let distortion = c.f64_array("distortion", &[e, m])?;
        let scores = (0..e)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let v = &metrics[(i * m + j) * METRICS.len()..];
                        Scores {
                            snr_out: v[0],
                            si_sdr: v[1],
                            stoi: v[2],
                            estoi: v[3],
                            sbf: v[4],
                            npm: v[5],
                            distortion: distortion[i * m + j],
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            t60,
            methods,
            examples,
            scores,
        })
    }
}

pub fn eval_path(out: &Path, t60: f64, loss: Objective) -> PathBuf {
    t60_dir(out, t60).join(format!("eval_{}.bgtc", loss.name()))
}

/// Scores every test example with each method. `checkpoint` overrides the
/// peer model path.
pub fn eval_stage(cfg: &RunConfig, t60: f64, out: &Path, checkpoint: Option<&Path>) -> Result<EvalResult> {
    cfg.validate()?;
    let loss = cfg.train.loss;
    let ds = load_dataset(cfg, t60, out)?;
    let feats = load_features(cfg, t60, out)?;
    let bank = bank_of(cfg, &ds, &feats.clean)?;
    let peer_path = checkpoint.map_or_else(|| checkpoint_path(out, t60, loss, Variant::Peer), Path::to_path_buf);
    let (peer, _) = load_checkpoint(&peer_path)?;
    let self_path = checkpoint_path(out, t60, loss, Variant::SelfOnly);
    let self_net: Option<GcnParams> = if self_path.exists() {
        Some(load_checkpoint(&self_path)?.0)
    } else {
        None
    };
    let methods: Vec<String> = METHODS
        .iter()
        .filter(|m| **m != "self_rtfs" || self_net.is_some())
        .map(|m| m.to_string())
        .collect();
    let audio_dir = t60_dir(out, t60).join("audio");
    if cfg.write_audio {
        create_dir(&audio_dir)?;
    }
    let mut scores = Vec::with_capacity(feats.test.len());
    for (spec, noisy) in &feats.test {
        let r = render(cfg, &ds, spec)?;
        let (_, phi_vv, _) = noisy_estimate(cfg, &r)?;
        let nf = NoiseFactors::new(&phi_vv)?;
        let clean_grid = stft(&r.clean, &cfg.stft)?;
        let noise_grid = stft(&r.noise, &cfg.stft)?;
        let oracle = &feats.clean[spec.position];
        let mut row = Vec::with_capacity(methods.len());
        for method in &methods {
            let f = match method.as_str() {
                "gevd" => noisy.clone(),
                "peer_rtf" => infer(&peer, &bank, &attach_query(&bank, noisy, cfg.knn_k)?)?,
                "oracle" => oracle.clone(),
                _ => infer(
                    self_net.as_ref().expect("listed only when loaded"),
                    &bank,
                    &QueryAttachment::self_only(noisy.clone()),
                )?,
            };
            let (s, y) = score(&f, oracle, &nf, &clean_grid, &noise_grid, r.clean.reference().samples())?;
            if cfg.write_audio {
                let name = format!("p{:03}_snr{:+03.0}_{method}.wav", spec.position, spec.snr_db);
                wav_write(audio_dir.join(name), &[y], WavFormat::Float32)?;
            }
            row.push(s);
        }
        scores.push(row);
    }
    let result = EvalResult {
        t60,
        methods,
        examples: feats.test.iter().map(|(s, _)| *s).collect(),
        scores,
    };
    result.to_container(loss)?.save(eval_path(out, t60, loss))?;
    write_json(
        &t60_dir(out, t60).join(format!("table_{}.json", loss.name())),
        &result.rows(&cfg.snr_grid),
    )?;
    Ok(result)
}

pub fn load_eval(out: &Path, t60: f64, loss: Objective) -> Result<EvalResult> {
    EvalResult::from_container(&TensorContainer::load(eval_path(out, t60, loss))?)
}

/// Writes `report_<loss>.csv` over every configured T60 and returns its path.
pub fn report_stage(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let loss = cfg.train.loss;
    let mut csv = String::from("method,t60,snr_in,metric,mean,std,n\n");
    let results = cfg
        .t60s
        .iter()
        .map(|&t| load_eval(out, t, loss))
        .collect::<Result<Vec<_>>>()?;
    for method in METHODS {
        for res in &results {
            for row in res.rows(&cfg.snr_grid).iter().filter(|r| r.method == method) {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    row.method, row.t60, row.snr_in, row.metric, row.mean, row.std, row.n
                ));
            }
        }
    }
    let path = out.join(format!("report_{}.csv", loss.name()));
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Estimate,
    Train,
    Eval,
    Report,
    All,
}

/// Runs one stage (or all of them) for every configured T60.
pub fn run(cfg: &RunConfig, stage: Stage, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    create_dir(out)?;
    let does = |s: Stage| stage == s || stage == Stage::All;
    for &t60 in &cfg.t60s {
        if does(Stage::Simulate) {
            simulate(cfg, t60, out)?;
        }
        if does(Stage::Estimate) {
            let s = estimate(cfg, t60, out)?;
            info!("T60 {t60}: clean-vs-AIR NPM median {:.2} dB", s.clean_vs_air_npm_median);
        }
        if does(Stage::Train) {
            train_stage(cfg, t60, out, Variant::Peer)?;
            if cfg.train_self_rtfs {
                train_stage(cfg, t60, out, Variant::SelfOnly)?;
            }
        }
        if does(Stage::Eval) {
            eval_stage(cfg, t60, out, checkpoint)?;
        }
    }
    if does(Stage::Report) {
        let path = report_stage(cfg, out)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn config_rejects_bad_splits_and_keys() {
        assert!(RunConfig::from_json(r#"{"split": {"train": 100, "validation": 10, "test": 24}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"snr_grid": []}"#).is_err());
        assert!(RunConfig::from_json(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let cfg = RunConfig::default();
        let (a, b, c) = split_ids(&cfg);
        assert_eq!((a.len(), b.len(), c.len()), (110, 10, 24));
        let mut all = [a, b, c].concat();
        all.sort_unstable();
        assert_eq!(all, (0..144).collect::<Vec<_>>());
    }

    #[test]
    fn training_snrs_stay_in_grid_range() {
        let cfg = RunConfig::default();
        let specs = train_specs(&cfg, &[0, 5, 9], 8);
        assert_eq!(specs.len(), 9);
        assert!(specs.iter().all(|s| (-15.0..=10.0).contains(&s.snr_db) && s.oog < 8));
        let test = test_specs(&cfg, &[3], 8);
        assert_eq!(test.iter().map(|s| s.snr_db).collect::<Vec<_>>(), cfg.snr_grid);
    }
}
