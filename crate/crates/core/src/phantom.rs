//! Synthetic needle-insertion recordings.
//!
//! A phantom is a stack of tissue layers along the insertion axis. The needle
//! tip advances at constant velocity and each A-scan looks `depth_samples`
//! positions ahead of the tip. Intensity is class-dependent multiplicative
//! speckle locked to the tissue (so it slides through the M-scan as the needle
//! advances) with exponential depth attenuation and additive noise. Phase is a
//! per-depth accumulator driven by a class-dependent drift plus jitter, wrapped
//! into (-pi, pi]; its noise grows where the backscatter is weak.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tissue::TissueClass;

/// Minimum A-scan length: crops are 250 rows tall.
pub const MIN_DEPTH_SAMPLES: usize = 250;

const DEFAULT_TABLE: &str = include_str!("../data/tissue_params.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleParams {
    pub mean_reflectivity: f32,
    pub grain: u32,
    pub contrast: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseParams {
    /// Mean phase increment per A-scan (radians).
    pub drift: f32,
    /// Standard deviation of the per-A-scan increment (radians).
    pub jitter: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignal {
    pub speckle: SpeckleParams,
    pub phase: PhaseParams,
}

/// Per-class signal statistics, loaded from the shipped parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueTable {
    pub version: u32,
    #[serde(flatten)]
    pub classes: BTreeMap<TissueClass, ClassSignal>,
}

impl TissueTable {
    pub fn parse(text: &str) -> Result<Self> {
        let table: TissueTable =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("tissue table: {e}")))?;
        for class in TissueClass::ALL {
            let sig = table
                .classes
                .get(&class)
                .ok_or_else(|| Error::InvalidConfig(format!("tissue table lacks {class}")))?;
            validate_signal(class, sig)?;
        }
        Ok(table)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped tissue table is valid")
    }

    pub fn signal(&self, class: TissueClass) -> ClassSignal {
        self.classes[&class]
    }

    pub fn layer(&self, class: TissueClass, thickness: Option<u32>) -> TissueLayerSpec {
        let sig = self.signal(class);
        TissueLayerSpec {
            tissue_class: class,
            thickness,
            speckle: sig.speckle,
            phase: sig.phase,
        }
    }
}

fn validate_signal(class: TissueClass, sig: &ClassSignal) -> Result<()> {
    let s = &sig.speckle;
    let unit = |v: f32| (0.0..=1.0).contains(&v);
    if !unit(s.mean_reflectivity) || !unit(s.contrast) {
        return Err(Error::InvalidConfig(format!(
            "{class}: reflectivity and contrast must lie in [0, 1]"
        )));
    }
    if s.grain < 1 {
        return Err(Error::InvalidConfig(format!("{class}: grain must be >= 1")));
    }
    let p = &sig.phase;
    if !p.drift.is_finite() || !p.jitter.is_finite() || p.jitter < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "{class}: phase drift must be finite and jitter >= 0"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueLayerSpec {
    pub tissue_class: TissueClass,
    /// Depth samples; `None` marks a terminal layer that extends indefinitely.
    pub thickness: Option<u32>,
    pub speckle: SpeckleParams,
    pub phase: PhaseParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertionConfig {
    pub layers: Vec<TissueLayerSpec>,
    /// Depth samples advanced per second.
    pub insertion_velocity: f64,
    /// A-scans per second.
    pub a_scan_rate: f64,
    /// Seconds.
    pub duration: f64,
    pub depth_samples: usize,
    /// Standard deviation of additive intensity noise.
    pub noise_floor: f32,
    /// Exponential intensity attenuation per depth sample.
    pub attenuation: f32,
    /// Per-insertion multiplicative gain is drawn from `1 ± gain_spread`.
    pub gain_spread: f32,
    /// Per-insertion drift scale is drawn from `1 ± drift_spread`.
    pub drift_spread: f32,
    pub seed: u64,
}

impl InsertionConfig {
    /// A-scan count `round(a_scan_rate * duration)`.
    pub fn num_ascans(&self) -> usize {
        (self.a_scan_rate * self.duration).round() as usize
    }

    /// Needle tip position (depth samples) at A-scan `t`.
    pub fn tip_position(&self, t: usize) -> f64 {
        t as f64 * self.insertion_velocity / self.a_scan_rate
    }

    fn tip_index(&self, t: usize) -> usize {
        self.tip_position(t).floor() as usize
    }

    /// Layer occupying depth position `p`; positions past a finite stack
    /// belong to the last layer.
    pub fn layer_index_at(&self, p: f64) -> usize {
        let mut end = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.thickness {
                Some(th) => {
                    end += f64::from(th);
                    if p < end {
                        return i;
                    }
                }
                None => return i,
            }
        }
        self.layers.len() - 1
    }

    /// Class in front of the needle at A-scan `t`.
    pub fn class_at_ascan(&self, t: usize) -> TissueClass {
        self.layers[self.layer_index_at(self.tip_position(t))].tissue_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers.is_empty() {
            return bad("layer sequence is empty".into());
        }
        if self.layers[0].tissue_class != TissueClass::Gelatin {
            return bad("first layer must be gelatin".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            validate_signal(
                layer.tissue_class,
                &ClassSignal {
                    speckle: layer.speckle,
                    phase: layer.phase,
                },
            )?;
            match layer.thickness {
                Some(0) => return bad(format!("layer {i} has zero thickness")),
                None if i + 1 != self.layers.len() => {
                    return bad(format!("only the last layer may be terminal (layer {i})"))
                }
                _ => {}
            }
        }
        if !(self.a_scan_rate > 0.0 && self.a_scan_rate.is_finite()) {
            return bad("a_scan_rate must be > 0".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be > 0".into());
        }
        if !(self.insertion_velocity >= 0.0 && self.insertion_velocity.is_finite()) {
            return bad("insertion_velocity must be >= 0".into());
        }
        if self.depth_samples < MIN_DEPTH_SAMPLES {
            return bad(format!(
                "depth_samples must be >= {MIN_DEPTH_SAMPLES}, got {}",
                self.depth_samples
            ));
        }
        if !(self.noise_floor >= 0.0 && self.attenuation >= 0.0) {
            return bad("noise_floor and attenuation must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.gain_spread) || !(0.0..1.0).contains(&self.drift_spread) {
            return bad("gain_spread and drift_spread must lie in [0, 1)".into());
        }
        let t = self.num_ascans();
        if t == 0 {
            return bad("duration * a_scan_rate rounds to zero A-scans".into());
        }
        if self.layers.last().unwrap().thickness.is_some() {
            let total: f64 = self.layers.iter().filter_map(|l| l.thickness).map(f64::from).sum();
            if self.tip_position(t - 1) >= total {
                return bad(format!(
                    "under-specified scene: needle reaches {:.1} samples but layers end at {total} \
                     and no terminal layer is given",
                    self.tip_position(t - 1)
                ));
            }
        }
        Ok(())
    }

    /// `(A-scan index, class entered)` for every change of the class at the tip,
    /// starting with `(0, first class)`.
    pub fn boundary_times(&self) -> Vec<(usize, TissueClass)> {
        let mut out = vec![(0, self.class_at_ascan(0))];
        let mut current = self.layer_index_at(self.tip_position(0));
        for t in 1..self.num_ascans() {
            let layer = self.layer_index_at(self.tip_position(t));
            if layer != current {
                let class = self.layers[layer].tissue_class;
                // Adjacent layers of the same class are one region for labelling.
                if class != self.layers[current].tissue_class {
                    out.push((t, class));
                }
                current = layer;
            }
        }
        out
    }
}

/// A fully materialized recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInsertionRecord {
    /// `depth_samples x T`, values >= 0.
    pub intensity: Array2<f32>,
    /// `depth_samples x T`, wrapped into (-pi, pi].
    pub phase: Array2<f32>,
    pub boundary_times: Vec<(usize, TissueClass)>,
    pub config: InsertionConfig,
}

impl RawInsertionRecord {
    pub fn num_ascans(&self) -> usize {
        self.intensity.ncols()
    }
}

/// Wrap a phase value into (-pi, pi] as stored in `f32`.
pub fn wrap_phase(x: f64) -> f32 {
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    let v = y as f32;
    if v <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        v.min(std::f32::consts::PI)
    }
}

/// Column-by-column generator. `generate_insertion` collects it; the
/// preprocessing pipeline can also consume it directly without holding the
/// full raw record in memory.
pub struct InsertionSynth {
    config: InsertionConfig,
    rng: ChaCha8Rng,
    /// Backscatter along the insertion track, including insertion gain.
    reflectivity: Vec<f32>,
    drift: Vec<f32>,
    jitter: Vec<f32>,
    depth_gain: Vec<f32>,
    phase_state: Vec<f64>,
    t: usize,
    total: usize,
}

impl InsertionSynth {
    pub fn new(config: &InsertionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let gain = 1.0 + config.gain_spread * rng.random_range(-1.0f32..=1.0);
        let drift_scale = 1.0 + config.drift_spread * rng.random_range(-1.0f32..=1.0);

        let total = config.num_ascans();
        let track_len = config.tip_index(total - 1) + config.depth_samples + 1;

        let mut reflectivity = Vec::with_capacity(track_len);
        let mut drift = Vec::with_capacity(track_len);
        let mut jitter = Vec::with_capacity(track_len);
        let mut block_value = 0.0f32;
        let mut block_left = 0u32;
        let mut prev_layer = usize::MAX;
        for p in 0..track_len {
            let li = config.layer_index_at(p as f64);
            let layer = &config.layers[li];
            if li != prev_layer || block_left == 0 {
                let e: f32 = Exp1.sample(&mut rng);
                let s = &layer.speckle;
                block_value = (1.0 - s.contrast) + s.contrast * e;
                block_left = s.grain;
                prev_layer = li;
            }
            block_left -= 1;
            reflectivity.push(gain * layer.speckle.mean_reflectivity * block_value);
            drift.push(drift_scale * layer.phase.drift);
            jitter.push(layer.phase.jitter);
        }

        let depth_gain = (0..config.depth_samples)
            .map(|d| (-(config.attenuation as f64) * d as f64).exp() as f32)
            .collect();
        let phase_state = (0..config.depth_samples)
            .map(|_| rng.random_range(-PI..PI))
            .collect();

        Ok(Self {
            config: config.clone(),
            rng,
            reflectivity,
            drift,
            jitter,
            depth_gain,
            phase_state,
            t: 0,
            total,
        })
    }

    pub fn config(&self) -> &InsertionConfig {
        &self.config
    }

    pub fn num_ascans(&self) -> usize {
        self.total
    }

    /// Write the next A-scan into the two buffers (length `depth_samples`).
    /// Returns `false` once all `T` columns have been produced.
    pub fn next_column(&mut self, intensity: &mut [f32], phase: &mut [f32]) -> bool {
        if self.t >= self.total {
            return false;
        }
        let depth = self.config.depth_samples;
        debug_assert!(intensity.len() == depth && phase.len() == depth);
        let tip = self.config.tip_index(self.t);
        let noise = self.config.noise_floor;
        for d in 0..depth {
            let p = tip + d;
            let clean = self.reflectivity[p] * self.depth_gain[d];
            let n_int: f32 = StandardNormal.sample(&mut self.rng);
            let n_phs: f32 = StandardNormal.sample(&mut self.rng);
            intensity[d] = (clean + noise * n_int).max(0.0);
            let sigma = self.jitter[p] + noise / (clean + noise + 1e-6);
            let step = f64::from(self.drift[p] + sigma * n_phs);
            let wrapped = wrap_phase(self.phase_state[d] + step);
            self.phase_state[d] = f64::from(wrapped);
            phase[d] = wrapped;
        }
        self.t += 1;
        true
    }
}

/// Generate one recording. Deterministic in `config` (including its seed).
pub fn generate_insertion(config: &InsertionConfig) -> Result<RawInsertionRecord> {
    let mut synth = InsertionSynth::new(config)?;
    let depth = config.depth_samples;
    let total = synth.num_ascans();
    // Column-major fill, then one transpose into depth x T row-major.
    let mut int_cols = vec![0.0f32; depth * total];
    let mut phs_cols = vec![0.0f32; depth * total];
    for t in 0..total {
        let range = t * depth..(t + 1) * depth;
        let (a, b) = (&mut int_cols[range.clone()], &mut phs_cols[range]);
        synth.next_column(a, b);
    }
    let to_mscan = |cols: Vec<f32>| {
        Array2::from_shape_vec((total, depth), cols)
            .expect("column buffer shape")
            .reversed_axes()
            .as_standard_layout()
            .into_owned()
    };
    Ok(RawInsertionRecord {
        intensity: to_mscan(int_cols),
        phase: to_mscan(phs_cols),
        boundary_times: config.boundary_times(),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn single_layer(class: TissueClass, seconds: f64) -> InsertionConfig {
        let table = TissueTable::shipped();
        let mut layers = vec![table.layer(TissueClass::Gelatin, None)];
        if class != TissueClass::Gelatin {
            layers[0].thickness = Some(1);
            layers.push(table.layer(class, None));
        }
        InsertionConfig {
            layers,
            insertion_velocity: 0.0,
            a_scan_rate: 1000.0,
            duration: seconds,
            depth_samples: 256,
            noise_floor: 0.05,
            attenuation: 0.002,
            gain_spread: 0.0,
            drift_spread: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn single_gelatin_layer_has_one_boundary() {
        let cfg = single_layer(TissueClass::Gelatin, 1.0);
        let rec = generate_insertion(&cfg).unwrap();
        assert_eq!(rec.num_ascans(), 1000);
        assert_eq!(rec.intensity.dim(), (256, 1000));
        assert_eq!(rec.boundary_times, vec![(0, TissueClass::Gelatin)]);
    }

    #[test]
    fn crossing_time_matches_closed_form() {
        let table = TissueTable::shipped();
        let mut cfg = single_layer(TissueClass::Gelatin, 2.0);
        cfg.layers = vec![
            table.layer(TissueClass::Gelatin, Some(100)),
            table.layer(TissueClass::Beef, None),
        ];
        cfg.insertion_velocity = 100.0;
        // thickness / velocity * rate = 100 / 100 * 1000
        assert_eq!(
            cfg.boundary_times(),
            vec![(0, TissueClass::Gelatin), (1000, TissueClass::Beef)]
        );
        assert_eq!(cfg.class_at_ascan(999), TissueClass::Gelatin);
        assert_eq!(cfg.class_at_ascan(1000), TissueClass::Beef);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = single_layer(TissueClass::Pork, 0.3);
        let a = generate_insertion(&cfg).unwrap();
        let b = generate_insertion(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(generate_insertion(&other).unwrap().intensity, a.intensity);
    }

    #[test]
    fn values_respect_ranges() {
        let mut cfg = single_layer(TissueClass::Turkey, 0.5);
        cfg.insertion_velocity = 40.0;
        let rec = generate_insertion(&cfg).unwrap();
        assert!(rec.intensity.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let pi = std::f32::consts::PI;
        assert!(rec.phase.iter().all(|&v| v > -pi && v <= pi));
    }

    #[test]
    fn wrap_phase_lands_in_half_open_interval() {
        let pi = std::f32::consts::PI;
        for x in [-10.0, -PI, -PI + 1e-12, 0.0, PI, PI + 1e-9, 7.5, 1e6] {
            let w = wrap_phase(x);
            assert!(w > -pi && w <= pi, "{x} -> {w}");
        }
        assert_eq!(wrap_phase(-PI), pi);
        assert!((wrap_phase(0.5 + 2.0 * PI) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_invalid_configs() {
        let base = single_layer(TissueClass::Beef, 1.0);

        let mut c = base.clone();
        c.layers.clear();
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.layers.swap(0, 1);
        assert!(c.validate().is_err(), "first layer must be gelatin");

        let mut c = base.clone();
        c.depth_samples = 249;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.layers[1].speckle.contrast = 1.5;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.layers[0].thickness = None;
        assert!(c.validate().is_err(), "terminal layer before the end");

        // Needle runs off a finite stack.
        let mut c = base.clone();
        c.layers[1].thickness = Some(10);
        c.insertion_velocity = 100.0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("under-specified")));
    }

    #[test]
    fn boundary_labels_agree_with_depth_recomputation() {
        let table = TissueTable::shipped();
        let mut cfg = single_layer(TissueClass::Gelatin, 3.0);
        cfg.layers = vec![
            table.layer(TissueClass::Gelatin, Some(37)),
            table.layer(TissueClass::Pork, Some(53)),
            table.layer(TissueClass::Gelatin, Some(11)),
            table.layer(TissueClass::Turkey, None),
        ];
        cfg.insertion_velocity = 41.0;
        let bounds = cfg.boundary_times();
        assert!(bounds.windows(2).all(|w| w[0].0 < w[1].0));
        let mut k = 0;
        for t in 0..cfg.num_ascans() {
            while k + 1 < bounds.len() && bounds[k + 1].0 <= t {
                k += 1;
            }
            let tip = cfg.tip_position(t);
            let mut acc = 0.0;
            let mut expect = TissueClass::Turkey;
            for l in &cfg.layers {
                match l.thickness {
                    Some(th) if tip < acc + th as f64 => {
                        expect = l.tissue_class;
                        break;
                    }
                    Some(th) => acc += th as f64,
                    None => {
                        expect = l.tissue_class;
                        break;
                    }
                }
            }
            assert_eq!(bounds[k].1, expect, "t = {t}");
        }
    }

    /// Mean column intensity and mean |phase increment| separate every pair of
    /// classes by at least three noise-floor standard deviations.
    #[test]
    fn default_table_separates_classes() {
        let stats: Vec<(TissueClass, f64, f64)> = TissueClass::ALL
            .iter()
            .map(|&class| {
                let cfg = single_layer(class, 1.0);
                let rec = generate_insertion(&cfg).unwrap();
                let mean_int = rec.intensity.iter().map(|&v| v as f64).sum::<f64>()
                    / rec.intensity.len() as f64;
                let mut acc = 0.0;
                let mut n = 0usize;
                for row in rec.phase.rows() {
                    for w in row.as_slice().unwrap().windows(2) {
                        acc += (wrap_phase(f64::from(w[1]) - f64::from(w[0])) as f64).abs();
                        n += 1;
                    }
                }
                (class, mean_int, acc / n as f64)
            })
            .collect();
        let floor = 0.05;
        for (i, a) in stats.iter().enumerate() {
            for b in &stats[i + 1..] {
                assert!((a.1 - b.1).abs() >= 3.0 * floor, "intensity {a:?} vs {b:?}");
                assert!((a.2 - b.2).abs() >= 3.0 * floor, "phase {a:?} vs {b:?}");
            }
        }
    }
}
