//! Planted-data generators. Every generator keeps its ground truth so that
//! recovery can be scored, and all randomness flows from one seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::grid::SignalGrid;
use crate::palette::{Palette, PaletteEntry};
use crate::transform::Transform;

/// How palettes are drawn: means uniform in `[low, high]^D` with pairwise
/// distance at least `separation * noise_std`, variances `noise_std^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteSpec {
    pub dim: usize,
    pub size: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub low: f64,
    pub high: f64,
}

impl PaletteSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.size == 0 {
            return Err(PimError::Config(
                "palette dim and size must be positive".into(),
            ));
        }
        if !(self.noise_std > 0.0) || !(self.separation >= 0.0) || !(self.high > self.low) {
            return Err(PimError::Config(format!(
                "invalid palette spec: noise_std {}, separation {}, range [{}, {}]",
                self.noise_std, self.separation, self.low, self.high
            )));
        }
        Ok(())
    }

    /// Draws one palette. With `separation = 0` every entry shares one mean.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Palette> {
        self.validate()?;
        let variance = vec![self.noise_std * self.noise_std; self.dim];
        let draw = |rng: &mut R| -> Vec<f64> {
            (0..self.dim)
                .map(|_| rng.random_range(self.low..self.high))
                .collect()
        };
        if self.separation == 0.0 {
            let mean = draw(rng);
            return Palette::new(vec![PaletteEntry::new(mean, variance)?; self.size]);
        }
        let min_dist = self.separation * self.noise_std;
        for _ in 0..200 {
            let mut means: Vec<Vec<f64>> = Vec::with_capacity(self.size);
            let mut tries = 0;
            while means.len() < self.size && tries < 10_000 {
                tries += 1;
                let m = draw(rng);
                if means.iter().all(|o| dist(o, &m) >= min_dist) {
                    means.push(m);
                }
            }
            if means.len() == self.size {
                let entries = means
                    .into_iter()
                    .map(|m| PaletteEntry::new(m, variance.clone()))
                    .collect::<Result<Vec<_>>>()?;
                return Palette::new(entries);
            }
        }
        Err(PimError::Config(format!(
            "cannot place {} means {} apart in [{}, {}]^{}",
            self.size, min_dist, self.low, self.high, self.dim
        )))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Random piecewise-constant label map: `block x block` tiles with uniform
/// labels, every label present at least once when there are enough tiles.
pub fn block_label_map<R: Rng>(
    height: usize,
    width: usize,
    block: usize,
    size: usize,
    rng: &mut R,
) -> Vec<usize> {
    let block = block.max(1);
    let rows = height.div_ceil(block);
    let cols = width.div_ceil(block);
    let tiles = rows * cols;
    let mut labels: Vec<usize> = (0..tiles)
        .map(|n| {
            if n < size {
                n
            } else {
                rng.random_range(0..size)
            }
        })
        .collect();
    labels.shuffle(rng);
    (0..height * width)
        .map(|loc| {
            let (i, j) = (loc / width, loc % width);
            labels[(i / block) * cols + j / block]
        })
        .collect()
}

/// Samples a grid whose location `loc` draws from `palette[labels[loc]]`.
pub fn sample_grid<R: Rng>(
    height: usize,
    width: usize,
    labels: &[usize],
    palette: &Palette,
    rng: &mut R,
) -> Result<SignalGrid> {
    let dim = palette.dim();
    let mut values = Vec::with_capacity(height * width * dim);
    for &s in labels {
        let e = &palette.entries[s];
        for d in 0..dim {
            let n = Normal::new(e.mean[d], e.variance[d].sqrt())
                .map_err(|e| PimError::Config(e.to_string()))?;
            values.push(n.sample(rng));
        }
    }
    SignalGrid::new(height, width, dim, values)
}

/// A collection sharing one hard index map with per-signal palettes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PimPlant {
    pub height: usize,
    pub width: usize,
    pub signals: usize,
    pub block: usize,
    pub palette: PaletteSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedPim {
    #[serde(skip)]
    pub grids: Vec<SignalGrid>,
    pub index_map: Vec<usize>,
    pub palettes: Vec<Palette>,
}

impl PimPlant {
    pub fn generate(&self, seed: u64) -> Result<PlantedPim> {
        if self.signals == 0 || self.height == 0 || self.width == 0 {
            return Err(PimError::Config("planted PIM needs positive sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index_map = block_label_map(
            self.height,
            self.width,
            self.block,
            self.palette.size,
            &mut rng,
        );
        let mut grids = Vec::with_capacity(self.signals);
        let mut palettes = Vec::with_capacity(self.signals);
        for _ in 0..self.signals {
            let pal = self.palette.sample(&mut rng)?;
            grids.push(sample_grid(
                self.height,
                self.width,
                &index_map,
                &pal,
                &mut rng,
            )?);
            palettes.push(pal);
        }
        Ok(PlantedPim {
            grids,
            index_map,
            palettes,
        })
    }
}

/// Two or more classes of index maps observed under random cyclic shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmpimPlant {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub signals: usize,
    pub max_shift: usize,
    pub block: usize,
    pub palette: PaletteSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedTmpim {
    #[serde(skip)]
    pub grids: Vec<SignalGrid>,
    pub class_maps: Vec<Vec<usize>>,
    pub classes: Vec<usize>,
    /// Signed planted shift `(dy, dx)` per signal.
    pub shifts: Vec<(i64, i64)>,
    pub palettes: Vec<Palette>,
}

impl TmpimPlant {
    pub fn generate(&self, seed: u64) -> Result<PlantedTmpim> {
        if self.classes == 0 || self.signals < self.classes {
            return Err(PimError::Config(
                "planted TMPIM needs at least one signal per class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (self.height, self.width);
        let class_maps: Vec<Vec<usize>> = (0..self.classes)
            .map(|_| block_label_map(h, w, self.block, self.palette.size, &mut rng))
            .collect();
        let mut classes: Vec<usize> = (0..self.signals).map(|t| t % self.classes).collect();
        classes.shuffle(&mut rng);
        let m = self.max_shift as i64;
        let mut grids = Vec::with_capacity(self.signals);
        let mut shifts = Vec::with_capacity(self.signals);
        let mut palettes = Vec::with_capacity(self.signals);
        for &c in &classes {
            let shift = (rng.random_range(-m..=m), rng.random_range(-m..=m));
            let t = Transform::new(shift.0, shift.1, h, w);
            let labels: Vec<usize> = (0..h * w)
                .map(|loc| class_maps[c][t.source(loc, h, w)])
                .collect();
            let pal = self.palette.sample(&mut rng)?;
            grids.push(sample_grid(h, w, &labels, &pal, &mut rng)?);
            shifts.push(shift);
            palettes.push(pal);
        }
        Ok(PlantedTmpim {
            grids,
            class_maps,
            classes,
            shifts,
            palettes,
        })
    }
}

/// Background scene: one index map, a base palette, training frames under
/// random global gains, and a small fraction of per-frame label flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPlant {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub block: usize,
    pub palette: PaletteSpec,
    /// Training gains are uniform in `[gain_low, gain_high]`.
    pub gain_low: f64,
    pub gain_high: f64,
    /// Probability that a location takes a random label in one frame.
    pub flip_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedBackground {
    #[serde(skip)]
    pub frames: Vec<SignalGrid>,
    pub index_map: Vec<usize>,
    pub base_palette: Palette,
    pub height: usize,
    pub width: usize,
}

/// A test frame and the planted foreground mask.
#[derive(Debug, Clone)]
pub struct PlantedFrame {
    pub grid: SignalGrid,
    pub foreground: Vec<bool>,
}

fn scaled(palette: &Palette, gain: f64) -> Palette {
    Palette {
        entries: palette
            .entries
            .iter()
            .map(|e| PaletteEntry {
                mean: e.mean.iter().map(|m| m * gain).collect(),
                variance: e.variance.iter().map(|v| v * gain * gain).collect(),
            })
            .collect(),
    }
}

impl BackgroundPlant {
    pub fn generate(&self, seed: u64) -> Result<PlantedBackground> {
        if self.frames == 0 || !(self.gain_high >= self.gain_low) || !(self.gain_low > 0.0) {
            return Err(PimError::Config(
                "background plant needs frames and positive gains".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (self.height, self.width);
        let index_map = block_label_map(h, w, self.block, self.palette.size, &mut rng);
        let base_palette = self.palette.sample(&mut rng)?;
        let mut frames = Vec::with_capacity(self.frames);
        for _ in 0..self.frames {
            let gain = rng.random_range(self.gain_low..=self.gain_high);
            let labels: Vec<usize> = index_map
                .iter()
                .map(|&s| {
                    if rng.random::<f64>() < self.flip_rate {
                        rng.random_range(0..self.palette.size)
                    } else {
                        s
                    }
                })
                .collect();
            frames.push(sample_grid(
                h,
                w,
                &labels,
                &scaled(&base_palette, gain),
                &mut rng,
            )?);
        }
        Ok(PlantedBackground {
            frames,
            index_map,
            base_palette,
            height: h,
            width: w,
        })
    }
}

impl PlantedBackground {
    /// A test frame: background under `gain` (mean and noise both scaled),
    /// optionally with a square foreground patch covering `blob_fraction` of
    /// the frame whose colour is at least `blob_distance` noise deviations
    /// from every palette mean.
    pub fn test_frame(
        &self,
        gain: f64,
        blob_fraction: f64,
        blob_distance: f64,
        seed: u64,
    ) -> Result<PlantedFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (self.height, self.width);
        let palette = scaled(&self.base_palette, gain);
        let mut grid = sample_grid(h, w, &self.index_map, &palette, &mut rng)?;
        let mut foreground = vec![false; h * w];
        if blob_fraction > 0.0 {
            let side =
                ((blob_fraction * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            let dim = palette.dim();
            let std = palette.entries[0].variance[0].sqrt();
            let (lo, hi) = palette
                .entries
                .iter()
                .flat_map(|e| e.mean.iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &m| {
                    (a.min(m), b.max(m))
                });
            let reach = blob_distance * std * 2.0;
            let colour = loop {
                let c: Vec<f64> = (0..dim)
                    .map(|_| rng.random_range(lo - reach..hi + reach))
                    .collect();
                if palette
                    .entries
                    .iter()
                    .all(|e| dist(&e.mean, &c) >= blob_distance * std)
                {
                    break c;
                }
            };
            let noise = Normal::new(0.0, std).map_err(|e| PimError::Config(e.to_string()))?;
            let mut values = grid.values().to_vec();
            for i in top..top + side {
                for j in left..left + side {
                    let loc = i * w + j;
                    foreground[loc] = true;
                    for d in 0..dim {
                        values[loc * dim + d] = colour[d] + noise.sample(&mut rng);
                    }
                }
            }
            grid = SignalGrid::new(h, w, dim, values)?;
        }
        Ok(PlantedFrame { grid, foreground })
    }
}

/// A word: left-to-right state sequence with per-state, per-band index
/// distributions concentrated on one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmPlant {
    pub bands: usize,
    pub states: usize,
    pub palette: PaletteSpec,
    /// Probability mass on the dominant label of each (state, band).
    pub confidence: f64,
    pub min_duration: usize,
    pub max_duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWord {
    pub plant: HmmPlant,
    /// Dominant label per `[state][band]`.
    pub labels: Vec<Vec<usize>>,
}

/// One sampled utterance with its ground truth.
#[derive(Debug, Clone)]
pub struct PlantedUtterance {
    pub grid: SignalGrid,
    pub states: Vec<usize>,
    pub palettes: Vec<Palette>,
}

impl HmmPlant {
    pub fn word(&self, seed: u64) -> Result<PlantedWord> {
        if self.bands == 0
            || self.states == 0
            || self.min_duration == 0
            || self.max_duration < self.min_duration
        {
            return Err(PimError::Config("invalid word plant".into()));
        }
        if self.palette.dim != 1 {
            return Err(PimError::Config(
                "spectrogram palettes are one-dimensional".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.palette.size;
        let mut labels: Vec<Vec<usize>> = Vec::with_capacity(self.states);
        for c in 0..self.states {
            let row = (0..self.bands)
                .map(|i| loop {
                    let s = rng.random_range(0..size);
                    if c == 0 || size == 1 || labels[c - 1][i] != s {
                        break s;
                    }
                })
                .collect();
            labels.push(row);
        }
        Ok(PlantedWord {
            plant: self.clone(),
            labels,
        })
    }
}

impl PlantedWord {
    /// Samples an utterance; `offsets[i]` is added to every energy of band `i`.
    pub fn utterance(&self, offsets: Option<&[f64]>, seed: u64) -> Result<PlantedUtterance> {
        let p = &self.plant;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = Vec::new();
        for c in 0..p.states {
            let d = rng.random_range(p.min_duration..=p.max_duration);
            states.extend(std::iter::repeat_n(c, d));
        }
        let frames = states.len();
        let palettes: Vec<Palette> = (0..p.bands)
            .map(|_| p.palette.sample(&mut rng))
            .collect::<Result<_>>()?;
        let size = p.palette.size;
        let mut values = vec![0.0; p.bands * frames];
        for i in 0..p.bands {
            let offset = offsets.map_or(0.0, |o| o[i]);
            for (j, &c) in states.iter().enumerate() {
                let s = if rng.random::<f64>() < p.confidence {
                    self.labels[c][i]
                } else {
                    rng.random_range(0..size)
                };
                let e = &palettes[i].entries[s];
                let n = Normal::new(e.mean[0], e.variance[0].sqrt())
                    .map_err(|e| PimError::Config(e.to_string()))?;
                values[i * frames + j] = n.sample(&mut rng) + offset;
            }
        }
        Ok(PlantedUtterance {
            grid: SignalGrid::new(p.bands, frames, 1, values)?,
            states,
            palettes,
        })
    }
}

/// Independent per-band constant offsets, uniform in `[-spread, spread]`.
pub fn band_offsets(bands: usize, spread: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..bands)
        .map(|_| {
            if spread > 0.0 {
                rng.random_range(-spread..=spread)
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sep: f64) -> PaletteSpec {
        PaletteSpec {
            dim: 1,
            size: 3,
            separation: sep,
            noise_std: 0.1,
            low: 0.0,
            high: 10.0,
        }
    }

    #[test]
    fn palettes_respect_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = spec(10.0).sample(&mut rng).unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    assert!(dist(&p.entries[a].mean, &p.entries[b].mean) >= 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_separation_collapses_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = spec(0.0).sample(&mut rng).unwrap();
        assert!(p.entries.iter().all(|e| e.mean == p.entries[0].mean));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let plant = PimPlant {
            height: 4,
            width: 4,
            signals: 3,
            block: 2,
            palette: spec(10.0),
        };
        let a = plant.generate(7).unwrap();
        let b = plant.generate(7).unwrap();
        assert_eq!(a.grids, b.grids);
        assert_eq!(a.index_map, b.index_map);
        let c = plant.generate(8).unwrap();
        assert_ne!(a.grids, c.grids);
    }

    #[test]
    fn block_map_uses_every_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = block_label_map(8, 8, 2, 3, &mut rng);
        for s in 0..3 {
            assert!(m.contains(&s));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut bad = spec(1.0);
        bad.noise_std = 0.0;
        assert!(matches!(
            bad.sample(&mut ChaCha8Rng::seed_from_u64(0)),
            Err(PimError::Config(_))
        ));
        let impossible = PaletteSpec {
            size: 5,
            separation: 100.0,
            ..spec(1.0)
        };
        assert!(impossible
            .sample(&mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn blob_has_requested_area() {
        let plant = BackgroundPlant {
            height: 20,
            width: 20,
            frames: 2,
            block: 4,
            palette: PaletteSpec {
                dim: 3,
                size: 4,
                separation: 10.0,
                noise_std: 0.02,
                low: 0.1,
                high: 0.9,
            },
            gain_low: 0.8,
            gain_high: 1.2,
            flip_rate: 0.0,
        };
        let bg = plant.generate(1).unwrap();
        let f = bg.test_frame(1.0, 0.05, 20.0, 2).unwrap();
        assert_eq!(f.foreground.iter().filter(|&&b| b).count(), 16);
    }
}
