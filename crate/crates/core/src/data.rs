//! Synthetic spectrogram classification tasks and the `SMDS1` dataset file.
//!
//! Each class is a fixed pattern of Gaussian time-frequency blobs and linear
//! chirps over a constant floor. A sample is its class pattern plus seeded
//! Gaussian noise. Generated values are rounded to `f32` precision so that a
//! dataset survives a save/load cycle bit-exactly.
//!
//! File layout (little-endian):
//!
//! ```text
//! "SMDS1" | n_samples u32 | n_classes u32 | F u32 | T u32
//! per sample: label u32 | F·T f32 values, row-major (frequency-major)
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"SMDS1";

/// Log-magnitude floor of every synthetic spectrogram.
const FLOOR: f64 = -1.0;

/// A log-magnitude spectrogram, `freq_bins × frames`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub freq_bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn new(freq_bins: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != freq_bins * frames {
            return Err(Error::Validation(format!(
                "spectrogram {freq_bins}x{frames} needs {} values, got {}",
                freq_bins * frames,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite spectrogram value at index {i}")));
        }
        Ok(Spectrogram {
            freq_bins,
            frames,
            values,
        })
    }

    pub fn zeros(freq_bins: usize, frames: usize) -> Self {
        Spectrogram {
            freq_bins,
            frames,
            values: vec![0.0; freq_bins * frames],
        }
    }

    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.frames + t]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub freq: f64,
    pub time: f64,
    pub freq_width: f64,
    pub time_width: f64,
    pub amplitude: f64,
}

/// A line `f(t) = freq_start + slope·(t - time_start)` active on
/// `[time_start, time_end]`, with a Gaussian cross-section.
#[derive(Clone, Debug, PartialEq)]
pub struct Chirp {
    pub freq_start: f64,
    pub slope: f64,
    pub time_start: f64,
    pub time_end: f64,
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPattern {
    pub blobs: Vec<Blob>,
    pub chirps: Vec<Chirp>,
}

impl ClassPattern {
    pub fn value(&self, f: f64, t: f64) -> f64 {
        let mut v = FLOOR;
        for b in &self.blobs {
            let df = (f - b.freq) / b.freq_width;
            let dt = (t - b.time) / b.time_width;
            v += b.amplitude * (-0.5 * (df * df + dt * dt)).exp();
        }
        for c in &self.chirps {
            if t >= c.time_start && t <= c.time_end {
                let center = c.freq_start + c.slope * (t - c.time_start);
                let df = (f - center) / c.width;
                v += c.amplitude * (-0.5 * df * df).exp();
            }
        }
        v
    }

    /// Pattern on the `freq_bins×frames` grid, moved `shift` frames later.
    pub fn render(&self, freq_bins: usize, frames: usize, shift: i64) -> Vec<f64> {
        let mut out = Vec::with_capacity(freq_bins * frames);
        for f in 0..freq_bins {
            for t in 0..frames {
                out.push(self.value(f as f64, t as f64 - shift as f64));
            }
        }
        out
    }
}

/// Full description of a synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub patterns: Vec<ClassPattern>,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    /// Each sample's pattern is moved by a uniform integer shift in
    /// `[-time_jitter, time_jitter]` frames. 0 keeps patterns in place.
    pub time_jitter: usize,
    pub samples_per_class: usize,
    /// Noise seed; sample `i` draws from stream `i` of this seed.
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Random class patterns drawn from `pattern_seed`. Tasks built from
    /// different pattern seeds have disjoint descriptors.
    pub fn random(n_classes: usize, freq_bins: usize, frames: usize, pattern_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed);
        let (fb, tf) = (freq_bins as f64, frames as f64);
        let patterns = (0..n_classes)
            .map(|_| {
                let blobs = (0..2)
                    .map(|_| Blob {
                        freq: rng.random_range(1.0..(fb - 1.0).max(1.5)),
                        time: rng.random_range(0.1 * tf..0.9 * tf),
                        freq_width: rng.random_range(0.04 * fb..0.12 * fb),
                        time_width: rng.random_range(0.03 * tf..0.10 * tf),
                        amplitude: rng.random_range(1.5..3.0),
                    })
                    .collect();
                let time_start = rng.random_range(0.0..0.5 * tf);
                let chirps = vec![Chirp {
                    freq_start: rng.random_range(1.0..(fb - 1.0).max(1.5)),
                    slope: rng.random_range(-0.5..0.5) * fb / tf,
                    time_start,
                    time_end: time_start + rng.random_range(0.25 * tf..0.5 * tf),
                    width: 0.05 * fb,
                    amplitude: rng.random_range(1.0..2.0),
                }];
                ClassPattern { blobs, chirps }
            })
            .collect();
        SyntheticTaskSpec {
            n_classes,
            freq_bins,
            frames,
            patterns,
            noise: 0.5,
            time_jitter: 0,
            samples_per_class: 200,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_samples_per_class(mut self, n: usize) -> Self {
        self.samples_per_class = n;
        self
    }

    pub fn with_time_jitter(mut self, frames: usize) -> Self {
        self.time_jitter = frames;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.freq_bins == 0 || self.frames == 0 {
            return Err(Error::Validation("task dimensions must be positive".into()));
        }
        if self.patterns.len() != self.n_classes {
            return Err(Error::Validation(format!(
                "{} patterns for {} classes",
                self.patterns.len(),
                self.n_classes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Validation(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        for i in 0..self.patterns.len() {
            for j in i + 1..self.patterns.len() {
                if self.patterns[i] == self.patterns[j] {
                    return Err(Error::Validation(format!("classes {i} and {j} share a pattern")));
                }
            }
        }
        Ok(())
    }
}

/// Labelled spectrograms of one fixed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub spectrograms: Vec<Spectrogram>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n_classes: self.n_classes,
            freq_bins: self.freq_bins,
            frames: self.frames,
            spectrograms: indices.iter().map(|&i| self.spectrograms[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = [self.len(), self.n_classes, self.freq_bins, self.frames];
        w.write_all(DATASET_MAGIC)?;
        for v in header {
            let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for (s, &label) in self.spectrograms.iter().zip(&self.labels) {
            w.write_all(&(label as u32).to_le_bytes())?;
            for &v in &s.values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(5, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"SMDS1\""),
            });
        }
        let n_samples = r.u32("n_samples")? as usize;
        let n_classes = r.u32("n_classes")? as usize;
        let freq_bins = r.u32("freq_bins")? as usize;
        let frames = r.u32("frames")? as usize;
        if n_classes == 0 || freq_bins == 0 || frames == 0 {
            return Err(Error::Format {
                offset: 9,
                msg: format!("degenerate header: {n_classes} classes, {freq_bins}x{frames}"),
            });
        }
        let per_sample = 4 + 4 * freq_bins * frames;
        let needed = (r.pos + n_samples * per_sample) as u64;
        if (bytes.len() as u64) < needed {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("truncated: header promises {needed} bytes"),
            });
        }
        let mut spectrograms = Vec::with_capacity(n_samples);
        let mut labels = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let at = r.pos as u64;
            let label = r.u32("label")? as usize;
            if label >= n_classes {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("label {label} >= n_classes {n_classes}"),
                });
            }
            let raw = r.take(4 * freq_bins * frames, "values")?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format {
                    offset: at + 4 + 4 * i as u64,
                    msg: "non-finite value".into(),
                });
            }
            spectrograms.push(Spectrogram {
                freq_bins,
                frames,
                values,
            });
            labels.push(label);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Dataset {
            n_classes,
            freq_bins,
            frames,
            spectrograms,
            labels,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Renders `spec` into a class-interleaved dataset: sample `i` has label
/// `i % n_classes` and its shift and noise come from stream `i` of
/// `spec.seed`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut templates: HashMap<(usize, i64), Vec<f64>> = HashMap::new();
    let n = spec.n_classes * spec.samples_per_class;
    let mut spectrograms = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.n_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let shift = if spec.time_jitter > 0 {
            let j = spec.time_jitter as i64;
            rng.random_range(-j..=j)
        } else {
            0
        };
        let template = templates
            .entry((label, shift))
            .or_insert_with(|| spec.patterns[label].render(spec.freq_bins, spec.frames, shift));
        let values = template
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                ((v + spec.noise * z) as f32) as f64
            })
            .collect();
        spectrograms.push(Spectrogram {
            freq_bins: spec.freq_bins,
            frames: spec.frames,
            values,
        });
        labels.push(label);
    }
    Ok(Dataset {
        n_classes: spec.n_classes,
        freq_bins: spec.freq_bins,
        frames: spec.frames,
        spectrograms,
        labels,
    })
}
