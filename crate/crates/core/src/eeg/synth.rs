//! Hardware stand-in: 1/f background with a 10 Hz alpha rhythm, frontal
//! blink lobes and stimulus-locked p300 deflections.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EegError, EegWindow, EventKind, DEFAULT_RATE_HZ, STRIDE_SECONDS, WINDOW_SECONDS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rate_hz: f64,
    /// Standard deviation of the 1/f component, µV.
    pub noise_uv: f64,
    pub alpha_uv: f64,
    pub blink_min_uv: f64,
    pub blink_max_uv: f64,
    pub blink_ms: f64,
    pub p300_uv: f64,
    pub p300_peak_ms: f64,
    pub p300_width_ms: f64,
    pub oddball_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rate_hz: DEFAULT_RATE_HZ,
            noise_uv: 3.0,
            alpha_uv: 3.0,
            blink_min_uv: 100.0,
            blink_max_uv: 150.0,
            blink_ms: 400.0,
            p300_uv: 15.0,
            p300_peak_ms: 300.0,
            p300_width_ms: 50.0,
            oddball_ratio: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Background,
    Blink,
    P300Oddball,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub label: EventKind,
    #[serde(flatten)]
    pub window: EegWindow,
}

/// AR(1) poles summed with weights falling off with bandwidth give an
/// approximately 1/f spectrum over the EEG range.
const POLES: [(f64, f64); 4] = [(0.995, 0.6), (0.96, 0.5), (0.8, 0.45), (0.0, 0.35)];

#[derive(Debug, Clone)]
struct Lobe {
    /// Absolute sample index of the lobe onset.
    start: u64,
    len: u64,
    amplitude: f64,
}

impl Lobe {
    fn phase(&self, index: u64) -> Option<f64> {
        (index >= self.start && index < self.start + self.len).then(|| (index - self.start) as f64)
    }
}

/// Continuous multichannel generator.
#[derive(Debug, Clone)]
pub struct EegStream {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    ar: [[f64; POLES.len()]; 4],
    alpha_phase: [f64; 4],
    index: u64,
    blinks: Vec<Lobe>,
    erps: Vec<Lobe>,
    history: Vec<Vec<f64>>,
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

impl EegStream {
    pub fn new(cfg: SynthConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha_phase = [0; 4].map(|_| rng.gen::<f64>() * 2.0 * PI);
        let mut s = EegStream {
            cfg,
            rng,
            ar: [[0.0; POLES.len()]; 4],
            alpha_phase,
            index: 0,
            blinks: Vec::new(),
            erps: Vec::new(),
            history: vec![Vec::new(); 4],
        };
        // settle the slow poles
        for _ in 0..512 {
            s.next_sample();
        }
        s.index = 0;
        s.history.iter_mut().for_each(Vec::clear);
        s
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn samples_emitted(&self) -> u64 {
        self.index
    }

    pub fn time_ms(&self) -> u64 {
        (self.index as f64 * 1000.0 / self.cfg.rate_hz).round() as u64
    }

    fn ms_to_samples(&self, ms: f64) -> u64 {
        (ms * self.cfg.rate_hz / 1000.0).round() as u64
    }

    /// Schedules a blink lobe starting `delay_samples` from now.
    pub fn inject_blink(&mut self, delay_samples: usize) {
        let amplitude = self.rng.gen_range(self.cfg.blink_min_uv..=self.cfg.blink_max_uv);
        let len = self.ms_to_samples(self.cfg.blink_ms);
        self.blinks.push(Lobe { start: self.index + delay_samples as u64, len, amplitude });
    }

    /// Schedules a p300 deflection locked to a stimulus `delay_samples` ahead.
    pub fn inject_p300(&mut self, delay_samples: usize) {
        let len = self.ms_to_samples(2.0 * self.cfg.p300_peak_ms);
        self.erps.push(Lobe { start: self.index + delay_samples as u64, len, amplitude: self.cfg.p300_uv });
    }

    fn next_sample(&mut self) -> [f64; 4] {
        let t = self.index as f64 / self.cfg.rate_hz;
        let norm: f64 = POLES.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut out = [0.0; 4];
        for (ch, value) in out.iter_mut().enumerate() {
            let mut pink = 0.0;
            for (k, (rho, weight)) in POLES.iter().enumerate() {
                let e = gauss(&mut self.rng);
                self.ar[ch][k] = rho * self.ar[ch][k] + (1.0 - rho * rho).sqrt() * e;
                pink += weight * self.ar[ch][k];
            }
            *value = self.cfg.noise_uv * pink / norm
                + self.cfg.alpha_uv * (2.0 * PI * 10.0 * t + self.alpha_phase[ch]).sin();
        }

        for lobe in &self.blinks {
            if let Some(k) = lobe.phase(self.index) {
                let v = lobe.amplitude * (PI * (k + 0.5) / lobe.len as f64).sin();
                // frontal-polar channels only
                out[0] += v;
                out[2] += 0.9 * v;
            }
        }
        let peak = self.cfg.p300_peak_ms / 1000.0 * self.cfg.rate_hz;
        let width = self.cfg.p300_width_ms / 1000.0 * self.cfg.rate_hz;
        for erp in &self.erps {
            if let Some(k) = erp.phase(self.index) {
                let z = (k - peak) / width;
                let v = erp.amplitude * (-0.5 * z * z).exp();
                out.iter_mut().for_each(|o| *o += v);
            }
        }
        let index = self.index;
        self.blinks.retain(|l| l.start + l.len > index + 1);
        self.erps.retain(|l| l.start + l.len > index + 1);
        self.index += 1;
        out
    }

    /// Generates `n` more samples per channel and appends them to the
    /// rolling history.
    pub fn generate(&mut self, n: usize) {
        for _ in 0..n {
            let s = self.next_sample();
            for (ch, v) in s.into_iter().enumerate() {
                self.history[ch].push(v);
            }
        }
        let keep = (self.cfg.rate_hz * WINDOW_SECONDS * 8.0) as usize;
        for row in &mut self.history {
            if row.len() > keep {
                row.drain(..row.len() - keep);
            }
        }
    }

    /// The most recent `n` samples as a window, if available.
    pub fn latest_window(&self, n: usize) -> Option<EegWindow> {
        if self.history[0].len() < n {
            return None;
        }
        let samples: Vec<Vec<f64>> = self.history.iter().map(|row| row[row.len() - n..].to_vec()).collect();
        let start = self.index - n as u64;
        let start_ms = (start as f64 * 1000.0 / self.cfg.rate_hz).round() as u64;
        Some(EegWindow::new(samples, self.cfg.rate_hz, start_ms))
    }

    /// Generates a fresh window of `n` samples.
    pub fn next_window(&mut self, n: usize) -> EegWindow {
        self.generate(n);
        self.latest_window(n).expect("just generated")
    }
}

/// Fixed-length labelled windows for the requested stream kind.
///
/// * `Background`: overlapping 1 s windows at a 0.25 s stride.
/// * `Blink`: consecutive 1 s windows, each with one blink whose onset is
///   uniform in the first 0.8 s (at least half the lobe is visible).
/// * `P300Oddball`: consecutive stimulus-locked 1 s epochs, tagged with the
///   stimulus index; a fraction `oddball_ratio` carries the p300.
pub fn synth_stream(kind: StreamKind, duration_s: f64, seed: u64, cfg: &SynthConfig) -> Vec<LabeledWindow> {
    assert!(duration_s > 0.0, "duration must be positive");
    let mut stream = EegStream::new(*cfg, seed);
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e1);
    let n = (cfg.rate_hz * WINDOW_SECONDS).round() as usize;
    let stride = (cfg.rate_hz * STRIDE_SECONDS).round() as usize;
    let total = (cfg.rate_hz * duration_s).round() as usize;
    let mut out = Vec::new();
    match kind {
        StreamKind::Background => {
            stream.generate(n.min(total));
            let mut produced = n.min(total);
            if let Some(w) = stream.latest_window(n) {
                out.push(LabeledWindow { label: EventKind::None, window: w });
            }
            while produced + stride <= total {
                stream.generate(stride);
                produced += stride;
                out.push(LabeledWindow { label: EventKind::None, window: stream.latest_window(n).unwrap() });
            }
        }
        StreamKind::Blink => {
            let max_onset = (0.8 * n as f64) as usize;
            for _ in 0..(total / n).max(1) {
                let onset = pick.gen_range(0..=max_onset);
                stream.inject_blink(onset);
                out.push(LabeledWindow { label: EventKind::Blink, window: stream.next_window(n) });
            }
        }
        StreamKind::P300Oddball => {
            for tag in 0..(total / n).max(1) {
                let oddball = pick.gen::<f64>() < cfg.oddball_ratio;
                if oddball {
                    stream.inject_p300(0);
                }
                let mut w = stream.next_window(n);
                w.stimulus_tag = Some(tag as u64);
                let label = if oddball { EventKind::P300 } else { EventKind::None };
                out.push(LabeledWindow { label, window: w });
            }
        }
    }
    out
}

/// The 200-window training corpus: 100 blink and 100 background windows.
pub fn bundled_corpus(seed: u64) -> Vec<LabeledWindow> {
    let cfg = SynthConfig::default();
    let blinks = synth_stream(StreamKind::Blink, 100.0, seed, &cfg);
    // non-overlapping background windows from a separate stream
    let mut stream = EegStream::new(cfg, seed.wrapping_add(1));
    let n = (cfg.rate_hz * WINDOW_SECONDS) as usize;
    let background = (0..100).map(|_| LabeledWindow { label: EventKind::None, window: stream.next_window(n) });
    blinks.into_iter().zip(background).flat_map(|(b, g)| [b, g]).collect()
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[LabeledWindow]) -> Result<(), EegError> {
    let io = |e: std::io::Error| EegError::Io(e.to_string());
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for w in corpus {
        serde_json::to_writer(&mut out, w).map_err(|e| EegError::Io(e.to_string()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledWindow>, EegError> {
    let io = |e: std::io::Error| EegError::Io(e.to_string());
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let w: LabeledWindow =
            serde_json::from_str(&line).map_err(|e| EegError::Io(format!("line {}: {e}", i + 1)))?;
        w.window.validate()?;
        out.push(w);
    }
    Ok(out)
}
