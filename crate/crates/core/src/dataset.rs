//! Synthetic dataset generation and the on-disk crop store.
//!
//! Dataset layout: `manifest.json` plus one directory per insertion holding
//! `intensity.octa`, `phase.octa` and `meta.json`. Crop store layout:
//! `crops.json` plus `<insertion>/<window>.int.octa` / `.phs.octa`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{self, read_array, read_json, write_array, write_json};
use crate::phantom::{generate_insertion, InsertionConfig, RawInsertionRecord, TissueTable};
use crate::preprocess::{process_record, process_streaming, CropPair, PreprocessConfig};
use crate::tissue::{Modality, TissueClass};
use crate::{par, seed};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CROP_MANIFEST_FILE: &str = "crops.json";

/// Scene template and counts for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Insertions per meat class.
    pub counts: BTreeMap<TissueClass, usize>,
    /// Layers per scene, alternating gelatin and the phantom's meat.
    pub min_layers: usize,
    pub max_layers: usize,
    /// Inclusive thickness range per layer, depth samples. The needle travels
    /// through every layer, so scene duration follows from the thicknesses.
    pub layer_thickness: [u32; 2],
    pub insertion_velocity: f64,
    pub a_scan_rate: f64,
    pub depth_samples: usize,
    pub noise_floor: f32,
    pub attenuation: f32,
    pub gain_spread: f32,
    pub drift_spread: f32,
    /// Alternative per-class signal table; the shipped table when absent.
    pub tissue_table: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            counts: BTreeMap::from([(TissueClass::Beef, 34), (TissueClass::Pork, 14), (TissueClass::Turkey, 18)]),
            min_layers: 3,
            max_layers: 5,
            layer_thickness: [600, 1400],
            insertion_velocity: 100.0,
            a_scan_rate: 1000.0,
            depth_samples: 256,
            noise_floor: 0.05,
            attenuation: 0.002,
            gain_spread: 0.3,
            drift_spread: 0.3,
            tissue_table: None,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (class, &n) in &self.counts {
            if !class.is_meat() {
                return bad(format!("counts: {class} is not a phantom meat class"));
            }
            if n == 0 {
                return bad(format!("counts: {class} needs at least one insertion"));
            }
        }
        if self.counts.is_empty() {
            return bad("counts: no insertions requested".into());
        }
        if self.min_layers < 1 || self.min_layers > self.max_layers {
            return bad(format!("layer range {}..={} is empty", self.min_layers, self.max_layers));
        }
        let [lo, hi] = self.layer_thickness;
        if lo == 0 || lo > hi {
            return bad(format!("layer_thickness range [{lo}, {hi}] invalid"));
        }
        if !(self.insertion_velocity > 0.0) {
            return bad("insertion_velocity must be > 0".into());
        }
        Ok(())
    }

    pub fn table(&self) -> Result<TissueTable> {
        match &self.tissue_table {
            None => Ok(TissueTable::shipped()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                TissueTable::parse(&text)
            }
        }
    }
}

/// One insertion to synthesize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedInsertion {
    pub id: String,
    pub meat_class: TissueClass,
    pub config: InsertionConfig,
}

/// Deterministic list of insertion scenes for `master_seed`.
pub fn plan_dataset(cfg: &SimulateConfig, master_seed: u64) -> Result<Vec<PlannedInsertion>> {
    cfg.validate()?;
    let table = cfg.table()?;
    let mut out = Vec::new();
    let mut global = 0u64;
    for (&meat, &n) in &cfg.counts {
        for k in 0..n {
            let ins_seed = seed::derive(master_seed, "insertion", global);
            global += 1;
            let mut rng = seed::derived_rng(ins_seed, "scene", 0);
            let n_layers = rng.random_range(cfg.min_layers..=cfg.max_layers);
            let mut layers = Vec::with_capacity(n_layers);
            let mut travel = 0.0;
            for i in 0..n_layers {
                let class = if i % 2 == 0 { TissueClass::Gelatin } else { meat };
                let th = rng.random_range(cfg.layer_thickness[0]..=cfg.layer_thickness[1]);
                travel += f64::from(th);
                let thickness = (i + 1 < n_layers).then_some(th);
                layers.push(table.layer(class, thickness));
            }
            let config = InsertionConfig {
                layers,
                insertion_velocity: cfg.insertion_velocity,
                a_scan_rate: cfg.a_scan_rate,
                duration: travel / cfg.insertion_velocity,
                depth_samples: cfg.depth_samples,
                noise_floor: cfg.noise_floor,
                attenuation: cfg.attenuation,
                gain_spread: cfg.gain_spread,
                drift_spread: cfg.drift_spread,
                seed: ins_seed,
            };
            config.validate()?;
            out.push(PlannedInsertion {
                id: format!("{}-{k:03}", meat.name()),
                meat_class: meat,
                config,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionEntry {
    pub id: String,
    pub meat_class: TissueClass,
    pub seed: u64,
    pub num_ascans: usize,
    pub boundary_times: Vec<(usize, TissueClass)>,
    pub intensity_file: String,
    pub phase_file: String,
    pub meta_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub simulate: SimulateConfig,
    pub insertions: Vec<InsertionEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::InsufficientData(format!("no dataset manifest at {}", path.display())));
        }
        let m: Self = read_json(&path)?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(&path, format!("format version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn insertion_refs(&self) -> Vec<InsertionRef> {
        self.insertions
            .iter()
            .map(|e| InsertionRef {
                id: e.id.clone(),
                meat_class: e.meat_class,
            })
            .collect()
    }

    pub fn load_record(&self, dir: &Path, id: &str) -> Result<RawInsertionRecord> {
        let e = self
            .insertions
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::InsufficientData(format!("insertion {id} not in manifest")))?;
        let config: InsertionConfig = read_json(&dir.join(&e.meta_file))?;
        let (intensity, _) = read_array(&dir.join(&e.intensity_file))?;
        let (phase, _) = read_array(&dir.join(&e.phase_file))?;
        Ok(RawInsertionRecord {
            intensity,
            phase,
            boundary_times: e.boundary_times.clone(),
            config,
        })
    }
}

/// Insertion identity used for splitting.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InsertionRef {
    pub id: String,
    pub meat_class: TissueClass,
}

impl From<&PlannedInsertion> for InsertionRef {
    fn from(p: &PlannedInsertion) -> Self {
        Self {
            id: p.id.clone(),
            meat_class: p.meat_class,
        }
    }
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    Ok(())
}

/// Synthesize and persist every planned insertion.
pub fn generate_dataset(cfg: &SimulateConfig, master_seed: u64, out: &Path, force: bool) -> Result<DatasetManifest> {
    let manifest_path = out.join(MANIFEST_FILE);
    guard(&manifest_path, force)?;
    let plan = plan_dataset(cfg, master_seed)?;
    format::create_dir_all(out)?;
    let entries = par::map_slice(&plan, |p| -> Result<InsertionEntry> {
        let rec = generate_insertion(&p.config)?;
        let dir = out.join(&p.id);
        format::create_dir_all(&dir)?;
        let entry = InsertionEntry {
            id: p.id.clone(),
            meat_class: p.meat_class,
            seed: p.config.seed,
            num_ascans: rec.num_ascans(),
            boundary_times: rec.boundary_times.clone(),
            intensity_file: format!("{}/intensity.octa", p.id),
            phase_file: format!("{}/phase.octa", p.id),
            meta_file: format!("{}/meta.json", p.id),
        };
        write_array(&out.join(&entry.intensity_file), &rec.intensity, Some(Modality::Intensity))?;
        write_array(&out.join(&entry.phase_file), &rec.phase, Some(Modality::Phase))?;
        write_json(&out.join(&entry.meta_file), &p.config)?;
        Ok(entry)
    });
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        master_seed,
        simulate: cfg.clone(),
        insertions: entries.into_iter().collect::<Result<_>>()?,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// A crop pair with its insertion's phantom class.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub id: String,
    pub insertion_id: String,
    pub meat_class: TissueClass,
    pub time_window_index: usize,
    pub label: Option<TissueClass>,
    pub intensity: Array2<f32>,
    pub phase: Array2<f32>,
}

impl Crop {
    fn from_pair(p: CropPair, meat_class: TissueClass) -> Self {
        Self {
            id: format!("{}/{:04}", p.insertion_id, p.time_window_index),
            insertion_id: p.insertion_id,
            meat_class,
            time_window_index: p.time_window_index,
            label: p.label,
            intensity: p.intensity,
            phase: p.phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropEntry {
    pub id: String,
    pub insertion_id: String,
    pub meat_class: TissueClass,
    pub time_window_index: usize,
    pub label: Option<TissueClass>,
    pub intensity_file: String,
    pub phase_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropManifest {
    pub format_version: u32,
    pub preprocess: PreprocessConfig,
    pub insertions: Vec<InsertionRef>,
    pub crops: Vec<CropEntry>,
}

/// In-memory crops plus the insertions they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CropSet {
    pub insertions: Vec<InsertionRef>,
    pub crops: Vec<Crop>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ClassCount {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl CropSet {
    /// Per-class counts keyed by label for labeled crops and by phantom
    /// class for unlabeled ones.
    pub fn counts(&self) -> BTreeMap<TissueClass, ClassCount> {
        let mut out: BTreeMap<TissueClass, ClassCount> = TissueClass::ALL.iter().map(|&c| (c, ClassCount::default())).collect();
        for c in &self.crops {
            match c.label {
                Some(l) => out.get_mut(&l).unwrap().labeled += 1,
                None => out.get_mut(&c.meat_class).unwrap().unlabeled += 1,
            }
        }
        out
    }

    pub fn manifest(&self, preprocess: &PreprocessConfig) -> CropManifest {
        CropManifest {
            format_version: DATASET_FORMAT_VERSION,
            preprocess: preprocess.clone(),
            insertions: self.insertions.clone(),
            crops: self
                .crops
                .iter()
                .map(|c| CropEntry {
                    id: c.id.clone(),
                    insertion_id: c.insertion_id.clone(),
                    meat_class: c.meat_class,
                    time_window_index: c.time_window_index,
                    label: c.label,
                    intensity_file: format!("{}.int.octa", c.id),
                    phase_file: format!("{}.phs.octa", c.id),
                })
                .collect(),
        }
    }

    /// Write arrays and `crops.json`; returns the SHA-256 of the manifest bytes.
    pub fn save(&self, preprocess: &PreprocessConfig, out: &Path, force: bool) -> Result<String> {
        let path = out.join(CROP_MANIFEST_FILE);
        guard(&path, force)?;
        let manifest = self.manifest(preprocess);
        let results = par::map_range(self.crops.len(), |i| -> Result<()> {
            let (c, e) = (&self.crops[i], &manifest.crops[i]);
            format::create_dir_all(&out.join(&c.insertion_id))?;
            write_array(&out.join(&e.intensity_file), &c.intensity, Some(Modality::Intensity))?;
            write_array(&out.join(&e.phase_file), &c.phase, Some(Modality::Phase))
        });
        results.into_iter().collect::<Result<()>>()?;
        write_json(&path, &manifest)?;
        manifest_hash(&path)
    }

    pub fn load(dir: &Path) -> Result<(Self, CropManifest)> {
        let path = dir.join(CROP_MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::InsufficientData(format!("no crop manifest at {}", path.display())));
        }
        let manifest: CropManifest = read_json(&path)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(&path, format!("format version {}", manifest.format_version)));
        }
        let crops = par::map_slice(&manifest.crops, |e| -> Result<Crop> {
            let (intensity, mi) = read_array(&dir.join(&e.intensity_file))?;
            let (phase, mp) = read_array(&dir.join(&e.phase_file))?;
            if mi != Some(Modality::Intensity) || mp != Some(Modality::Phase) {
                return Err(Error::format(dir.join(&e.id), "crop files carry the wrong modality tags"));
            }
            Ok(Crop {
                id: e.id.clone(),
                insertion_id: e.insertion_id.clone(),
                meat_class: e.meat_class,
                time_window_index: e.time_window_index,
                label: e.label,
                intensity,
                phase,
            })
        });
        let set = Self {
            insertions: manifest.insertions.clone(),
            crops: crops.into_iter().collect::<Result<_>>()?,
        };
        Ok((set, manifest))
    }
}

pub fn manifest_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Preprocess a persisted dataset into crops.
pub fn preprocess_dataset(manifest: &DatasetManifest, data_dir: &Path, cfg: &PreprocessConfig) -> Result<CropSet> {
    let per = par::map_slice(&manifest.insertions, |e| -> Result<Vec<Crop>> {
        let rec = manifest.load_record(data_dir, &e.id)?;
        Ok(process_record(&rec, cfg, &e.id)?
            .into_iter()
            .map(|p| Crop::from_pair(p, e.meat_class))
            .collect())
    });
    collect(manifest.insertion_refs(), per)
}

/// Simulate and preprocess in one pass without touching disk.
pub fn build_crops(plan: &[PlannedInsertion], cfg: &PreprocessConfig) -> Result<CropSet> {
    let per = par::map_slice(plan, |p| -> Result<Vec<Crop>> {
        Ok(process_streaming(&p.config, cfg, &p.id)?
            .into_iter()
            .map(|c| Crop::from_pair(c, p.meat_class))
            .collect())
    });
    collect(plan.iter().map(InsertionRef::from).collect(), per)
}

fn collect(insertions: Vec<InsertionRef>, per: Vec<Result<Vec<Crop>>>) -> Result<CropSet> {
    let mut crops = Vec::new();
    for r in per {
        crops.extend(r?);
    }
    Ok(CropSet { insertions, crops })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulateConfig {
        SimulateConfig {
            counts: BTreeMap::from([(TissueClass::Beef, 1), (TissueClass::Pork, 1), (TissueClass::Turkey, 1)]),
            min_layers: 2,
            max_layers: 3,
            layer_thickness: [300, 400],
            ..SimulateConfig::default()
        }
    }

    #[test]
    fn paper_counts_give_66_scenes() {
        let plan = plan_dataset(&SimulateConfig::default(), 1).unwrap();
        assert_eq!(plan.len(), 66);
        let n = |c| plan.iter().filter(|p| p.meat_class == c).count();
        assert_eq!((n(TissueClass::Beef), n(TissueClass::Pork), n(TissueClass::Turkey)), (34, 14, 18));
        for p in &plan {
            assert_eq!(p.config.layers[0].tissue_class, TissueClass::Gelatin);
            assert!(p.config.layers.last().unwrap().thickness.is_none());
            let secs = p.config.duration;
            assert!((18.0..=70.0).contains(&secs), "{secs}");
        }
    }

    #[test]
    fn minimal_dataset_has_distinct_seeds_and_is_deterministic() {
        let a = plan_dataset(&small(), 5).unwrap();
        assert_eq!(a.len(), 3);
        let mut seeds: Vec<u64> = a.iter().map(|p| p.config.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 3);
        assert_eq!(a, plan_dataset(&small(), 5).unwrap());
        assert_ne!(a, plan_dataset(&small(), 6).unwrap());
    }

    #[test]
    fn generate_refuses_overwrite_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), 3, dir.path(), false).unwrap();
        let before = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(matches!(generate_dataset(&small(), 4, dir.path(), false), Err(Error::AlreadyExists(_))));
        assert_eq!(before, std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);

        let plan = plan_dataset(&small(), 3).unwrap();
        let rec = loaded.load_record(dir.path(), &plan[0].id).unwrap();
        assert_eq!(rec, generate_insertion(&plan[0].config).unwrap());

        let cfg = PreprocessConfig::default();
        let from_disk = preprocess_dataset(&loaded, dir.path(), &cfg).unwrap();
        let in_memory = build_crops(&plan, &cfg).unwrap();
        assert_eq!(from_disk, in_memory);
        assert!(!in_memory.crops.is_empty());
    }

    #[test]
    fn crop_store_round_trip_and_stable_hash() {
        let plan = plan_dataset(&small(), 9).unwrap();
        let set = build_crops(&plan, &PreprocessConfig::default()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ha = set.save(&PreprocessConfig::default(), a.path(), false).unwrap();
        let hb = set.save(&PreprocessConfig::default(), b.path(), false).unwrap();
        assert_eq!(ha, hb);
        assert!(set.save(&PreprocessConfig::default(), a.path(), false).is_err());
        let (back, _) = CropSet::load(a.path()).unwrap();
        assert_eq!(back, set);
        let total: usize = set.counts().values().map(|c| c.labeled + c.unlabeled).sum();
        assert_eq!(total, set.crops.len());
    }

    #[test]
    fn counts_parse_from_toml_keys() {
        let cfg: SimulateConfig = toml::from_str("counts = { beef = 2, turkey = 1 }").unwrap();
        assert_eq!(cfg.counts.len(), 2);
        assert!(toml::from_str::<SimulateConfig>("countz = {}").is_err());
        let bad = SimulateConfig {
            counts: BTreeMap::from([(TissueClass::Gelatin, 1)]),
            ..SimulateConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
