//! Synthetic stand-in for a paired T1/T2 cohort with imperfect raters.
//!
//! Each case draws a latent binary condition. Both modalities render the
//! same two-ellipsoid anatomy with modality-specific contrast; positive
//! cases add a band bridging the ellipsoids. Raters are conditionally
//! independent given the latent label. Every case draws from its own RNG
//! streams keyed by `(seed, split, index)`, so any case can be regenerated
//! alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Modality, Record, Split};
use crate::ndtensor::Rng;
use crate::volprep::{write_volume, Orientation, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorProfile {
    pub id: String,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl AnnotatorProfile {
    pub fn new(id: impl Into<String>, sensitivity: f64, specificity: f64) -> Self {
        AnnotatorProfile { id: id.into(), sensitivity, specificity }
    }

    /// Three heterogeneous, imperfect raters.
    pub fn defaults() -> Vec<Self> {
        vec![Self::new("R1", 0.70, 0.85), Self::new("R2", 0.80, 0.80), Self::new("R3", 0.75, 0.60)]
    }

    pub fn chance(k: usize) -> Vec<Self> {
        (1..=k).map(|i| Self::new(format!("R{i}"), 0.5, 0.5)).collect()
    }

    pub fn report(&self, latent: u8, rng: &mut Rng) -> u8 {
        let keep = if latent == 1 { self.sensitivity } else { self.specificity };
        if rng.bernoulli(keep) {
            latent
        } else {
            1 - latent
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_pretrain: usize,
    /// Rater-labelled cases; `n_val` of them form the validation split.
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub prevalence: f64,
    pub signal_amplitude: f64,
    pub noise_sigma: f64,
    /// Raw extents `[z, y, x]`.
    pub volume_extents: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub orientation: Orientation,
    pub annotators: Vec<AnnotatorProfile>,
    /// Required `n_pretrain / n_train`.
    pub min_pretrain_ratio: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_pretrain: 480,
            n_train: 48,
            n_val: 12,
            n_test: 60,
            prevalence: 0.45,
            signal_amplitude: 0.3,
            noise_sigma: 0.08,
            volume_extents: [24, 36, 36],
            spacing_mm: [2.0, 1.0, 1.0],
            orientation: Orientation::RAS,
            annotators: AnnotatorProfile::defaults(),
            min_pretrain_ratio: 10.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return cfg(format!("prevalence must lie in (0, 1), got {}", self.prevalence));
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_pretrain == 0 {
            return cfg("n_pretrain, n_train and n_test must be ≥ 1".into());
        }
        if self.n_val >= self.n_train {
            return cfg(format!("n_val ({}) must be smaller than n_train ({})", self.n_val, self.n_train));
        }
        if !(self.noise_sigma >= 0.0) {
            return cfg(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        if self.volume_extents.iter().any(|&n| n == 0) || self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return cfg("volume extents and spacing must be positive".into());
        }
        if self.annotators.is_empty() {
            return cfg("at least one annotator is required".into());
        }
        for a in &self.annotators {
            if !(0.0..=1.0).contains(&a.sensitivity) || !(0.0..=1.0).contains(&a.specificity) {
                return cfg(format!("annotator `{}` rates must lie in [0, 1]", a.id));
            }
        }
        Ok(())
    }

    fn check_pretrain_ratio(&self) -> Result<()> {
        if (self.n_pretrain as f64) < self.min_pretrain_ratio * self.n_train as f64 {
            return Err(Error::Precondition(format!(
                "n_pretrain ({}) must be at least {} × n_train ({})",
                self.n_pretrain, self.min_pretrain_ratio, self.n_train
            )));
        }
        Ok(())
    }
}

struct Contrast {
    background: f64,
    first: f64,
    second: f64,
    band: f64,
}

fn contrast(m: Modality) -> Contrast {
    match m {
        Modality::T1 => Contrast { background: 0.15, first: 0.55, second: 0.35, band: 0.45 },
        Modality::T2 => Contrast { background: 0.10, first: 0.30, second: 0.75, band: -0.40 },
    }
}

/// Per-case anatomy in normalized RAS coordinates (each axis in [-1, 1]).
#[derive(Clone, Debug)]
struct Anatomy {
    c1: [f64; 3],
    r1: [f64; 3],
    c2: [f64; 3],
    r2: [f64; 3],
    band_radius: f64,
    gain: f64,
}

impl Anatomy {
    fn draw(rng: &mut Rng) -> Self {
        let mut j = |s: f64| rng.uniform_in(-s, s);
        let c1 = [-0.28 + j(0.06), 0.05 + j(0.06), j(0.06)];
        let c2 = [0.30 + j(0.06), -0.10 + j(0.06), j(0.06)];
        let r1 = [0.26 * (1.0 + j(0.1)), 0.32 * (1.0 + j(0.1)), 0.45 * (1.0 + j(0.1))];
        let r2 = [0.22 * (1.0 + j(0.1)), 0.26 * (1.0 + j(0.1)), 0.40 * (1.0 + j(0.1))];
        Anatomy { c1, r1, c2, r2, band_radius: 0.16 * (1.0 + j(0.1)), gain: 1.0 + j(0.1) }
    }

    fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.c1[i] + self.c2[i]))
    }
}

fn soft_inside(q: f64) -> f64 {
    // q = normalized radius; smooth edge of width ~0.08
    1.0 / (1.0 + ((q - 1.0) / 0.04).exp())
}

fn ellipsoid_q(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    ((0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>()).sqrt()
}

fn segment_dist(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / (ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2])).clamp(0.0, 1.0);
    ((0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>()).sqrt()
}

/// Normalized RAS coordinate of every storage index along each storage axis.
fn axis_coords(shape: [usize; 3], orientation: Orientation) -> [(usize, Vec<f64>); 3] {
    [0, 1, 2].map(|a| {
        let (world, positive) = orientation.storage_axis(a);
        let n = shape[a];
        let coords = (0..n)
            .map(|i| {
                let k = if positive { i } else { n - 1 - i };
                2.0 * (k as f64 + 0.5) / n as f64 - 1.0
            })
            .collect();
        (world, coords)
    })
}

fn render(cfg: &GenConfig, anatomy: &Anatomy, latent: u8, modality: Modality, noise: &mut Rng) -> Volume {
    let shape = cfg.volume_extents;
    let c = contrast(modality);
    let axes = axis_coords(shape, cfg.orientation);
    let band = if latent == 1 { cfg.signal_amplitude * c.band } else { 0.0 };
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut p = [0.0; 3];
    for z in 0..shape[0] {
        p[axes[0].0] = axes[0].1[z];
        for y in 0..shape[1] {
            p[axes[1].0] = axes[1].1[y];
            for x in 0..shape[2] {
                p[axes[2].0] = axes[2].1[x];
                let in1 = soft_inside(ellipsoid_q(p, anatomy.c1, anatomy.r1));
                let in2 = soft_inside(ellipsoid_q(p, anatomy.c2, anatomy.r2));
                let mut v = c.background + (c.first - c.background) * in1;
                v += (c.second - v) * in2;
                if band != 0.0 {
                    let d = segment_dist(p, anatomy.c1, anatomy.c2) / anatomy.band_radius;
                    v += band * soft_inside(d);
                }
                v = v * anatomy.gain + cfg.noise_sigma * noise.normal();
                data.push(v as f32);
            }
        }
    }
    Volume::new(shape, cfg.spacing_mm, cfg.orientation, data).expect("valid geometry")
}

fn center_voxel(cfg: &GenConfig, anatomy: &Anatomy) -> [usize; 3] {
    let c = anatomy.center();
    [0, 1, 2].map(|a| {
        let (world, positive) = cfg.orientation.storage_axis(a);
        let n = cfg.volume_extents[a];
        let k = (((c[world] + 1.0) * 0.5 * n as f64 - 0.5).round().max(0.0) as usize).min(n - 1);
        if positive {
            k
        } else {
            n - 1 - k
        }
    })
}

/// RNG stream purposes within one case.
const LATENT: u64 = 0;
const ANATOMY: u64 = 1;
const NOISE_T1: u64 = 2;
const NOISE_T2: u64 = 3;
const RATERS: u64 = 4;
const MODALITY: u64 = 5;

fn split_code(split: Split) -> u64 {
    match split {
        Split::Pretrain => 0,
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Fully rendered labelled case, before it touches disk.
#[derive(Clone, Debug)]
pub struct SynthCase {
    pub case_id: String,
    pub split: Split,
    pub latent: u8,
    pub t1: Volume,
    pub t2: Volume,
    pub rater_labels: Vec<u8>,
    pub center_voxel: [usize; 3],
}

fn case_rng(cfg: &GenConfig, split: Split, index: usize, purpose: u64) -> Rng {
    Rng::keyed(cfg.seed, &[split_code(split), index as u64, purpose])
}

pub fn case_id(split: Split, index: usize) -> String {
    let tag = match split {
        Split::Pretrain => "pre",
        Split::Train => "trn",
        Split::Val => "val",
        Split::Test => "tst",
    };
    format!("{tag}{index:05}")
}

pub fn latent_label(cfg: &GenConfig, split: Split, index: usize) -> u8 {
    case_rng(cfg, split, index, LATENT).bernoulli(cfg.prevalence) as u8
}

/// Rater votes for a given latent label, drawn from the case's rater stream.
pub fn rater_votes(cfg: &GenConfig, split: Split, index: usize, latent: u8) -> Vec<u8> {
    let mut rng = case_rng(cfg, split, index, RATERS);
    cfg.annotators.iter().map(|a| a.report(latent, &mut rng)).collect()
}

pub fn render_case(cfg: &GenConfig, split: Split, index: usize) -> SynthCase {
    let latent = latent_label(cfg, split, index);
    let anatomy = Anatomy::draw(&mut case_rng(cfg, split, index, ANATOMY));
    let t1 = render(cfg, &anatomy, latent, Modality::T1, &mut case_rng(cfg, split, index, NOISE_T1));
    let t2 = render(cfg, &anatomy, latent, Modality::T2, &mut case_rng(cfg, split, index, NOISE_T2));
    SynthCase {
        case_id: case_id(split, index),
        split,
        latent,
        t1,
        t2,
        rater_labels: rater_votes(cfg, split, index, latent),
        center_voxel: center_voxel(cfg, &anatomy),
    }
}

/// Single-modality unlabeled pretraining volume.
pub fn render_pretrain(cfg: &GenConfig, index: usize) -> (Modality, Volume, [usize; 3]) {
    let split = Split::Pretrain;
    let latent = latent_label(cfg, split, index);
    let anatomy = Anatomy::draw(&mut case_rng(cfg, split, index, ANATOMY));
    let modality = if case_rng(cfg, split, index, MODALITY).bernoulli(0.5) { Modality::T1 } else { Modality::T2 };
    let stream = if modality == Modality::T1 { NOISE_T1 } else { NOISE_T2 };
    let v = render(cfg, &anatomy, latent, modality, &mut case_rng(cfg, split, index, stream));
    (modality, v, center_voxel(cfg, &anatomy))
}

fn labelled_splits(cfg: &GenConfig) -> Vec<(Split, usize)> {
    let n_fit = cfg.n_train - cfg.n_val;
    let mut out: Vec<(Split, usize)> = (0..n_fit).map(|i| (Split::Train, i)).collect();
    out.extend((0..cfg.n_val).map(|i| (Split::Val, i)));
    out.extend((0..cfg.n_test).map(|i| (Split::Test, i)));
    out
}

fn rel(p: &str) -> Option<String> {
    Some(p.to_string())
}

fn write_labelled(cfg: &GenConfig, out_dir: &Path, split: Split, index: usize) -> Result<(Record, u8)> {
    let c = render_case(cfg, split, index);
    let t1 = format!("raw/{}_t1.vol", c.case_id);
    let t2 = format!("raw/{}_t2.vol", c.case_id);
    write_volume(&out_dir.join(&t1), &c.t1, Some(c.center_voxel))?;
    write_volume(&out_dir.join(&t2), &c.t2, Some(c.center_voxel))?;
    let surgical = (split == Split::Test).then_some(c.latent);
    let mut r = Record::new(c.case_id, split, c.center_voxel).with_surgical_label(surgical);
    r.t1_path = rel(&t1);
    r.t2_path = rel(&t2);
    r.rater_labels = Some(c.rater_labels);
    Ok((r, c.latent))
}

fn write_pretrain(cfg: &GenConfig, out_dir: &Path, index: usize) -> Result<Record> {
    let (modality, v, center) = render_pretrain(cfg, index);
    let id = case_id(Split::Pretrain, index);
    let path = format!("raw/{id}.vol");
    write_volume(&out_dir.join(&path), &v, Some(center))?;
    let mut r = Record::new(id, Split::Pretrain, center);
    match modality {
        Modality::T1 => r.t1_path = rel(&path),
        Modality::T2 => r.t2_path = rel(&path),
    }
    Ok(r)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("raw")).map_err(|e| Error::io(dir, e))
}

/// Train / val / test cases with rater labels; test records carry the
/// latent label as surgical ground truth.
pub fn gen_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let records = labelled_splits(cfg)
        .into_iter()
        .map(|(s, i)| write_labelled(cfg, out_dir, s, i).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(out_dir, records)
}

/// Unlabeled single-modality volumes, roughly half T1-like and half T2-like.
pub fn gen_pretrain(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    cfg.check_pretrain_ratio()?;
    ensure_dir(out_dir)?;
    let records = (0..cfg.n_pretrain).map(|i| write_pretrain(cfg, out_dir, i)).collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(out_dir, records)
}

/// Latent labels of every labelled case, for offline analysis only. The
/// pipeline never reads this file.
#[derive(Debug, Serialize, Deserialize)]
pub struct LatentTruth {
    pub case_id: String,
    pub latent: u8,
}

/// Pretraining + labelled splits in one manifest at `out_dir/manifest.json`,
/// plus `out_dir/latent.json`.
pub fn gen_all(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let pre = gen_pretrain(cfg, out_dir)?;
    cfg.validate()?;
    let mut records = pre.records().to_vec();
    let mut truth = Vec::new();
    for (s, i) in labelled_splits(cfg) {
        let (r, latent) = write_labelled(cfg, out_dir, s, i)?;
        truth.push(LatentTruth { case_id: r.case_id.clone(), latent });
        records.push(r);
    }
    let m = DatasetManifest::new(out_dir, records)?;
    m.save(&out_dir.join("manifest.json"))?;
    let tp = out_dir.join("latent.json");
    let json = serde_json::to_vec_pretty(&truth).map_err(|e| Error::json(&tp, e))?;
    fs::write(&tp, json).map_err(|e| Error::io(&tp, e))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_pretrain: 20,
            n_train: 2,
            n_val: 1,
            n_test: 2,
            volume_extents: [6, 8, 8],
            ..GenConfig::default()
        }
    }

    #[test]
    fn perfect_annotator_echoes_latent() {
        let cfg = GenConfig { annotators: vec![AnnotatorProfile::new("A", 1.0, 1.0)], ..small() };
        for i in 0..200 {
            let y = latent_label(&cfg, Split::Train, i);
            assert_eq!(rater_votes(&cfg, Split::Train, i, y), vec![y]);
        }
    }

    #[test]
    fn annotator_agreement_concentrates() {
        let cfg = GenConfig { annotators: vec![AnnotatorProfile::new("A", 0.75, 0.75)], ..small() };
        let n = 2000;
        let agree = (0..n)
            .filter(|&i| {
                let y = latent_label(&cfg, Split::Train, i);
                rater_votes(&cfg, Split::Train, i, y)[0] == y
            })
            .count();
        let rate = agree as f64 / n as f64;
        assert!((0.73..=0.77).contains(&rate), "{rate}");
    }

    #[test]
    fn modalities_differ() {
        let cfg = small();
        let c = render_case(&cfg, Split::Train, 0);
        let mad: f64 =
            c.t1.data().iter().zip(c.t2.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / c.t1.len() as f64;
        assert!(mad > 0.0);
    }

    #[test]
    fn zero_amplitude_ignores_latent() {
        let cfg = GenConfig { signal_amplitude: 0.0, noise_sigma: 0.0, ..small() };
        let anatomy = Anatomy::draw(&mut Rng::new(1, 1));
        let mut r = Rng::new(0, 0);
        let a = render(&cfg, &anatomy, 0, Modality::T1, &mut r);
        let b = render(&cfg, &anatomy, 1, Modality::T1, &mut r);
        assert_eq!(a, b);
    }

    #[test]
    fn case_independent_of_batch_size() {
        let a = GenConfig { n_train: 5, ..small() };
        let b = GenConfig { n_train: 50, n_pretrain: 500, ..small() };
        let ca = render_case(&a, Split::Train, 1);
        let cb = render_case(&b, Split::Train, 1);
        assert_eq!(ca.t1, cb.t1);
        assert_eq!(ca.rater_labels, cb.rater_labels);
    }

    #[test]
    fn pretrain_ratio_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { n_pretrain: 100, n_train: 82, n_val: 20, ..small() };
        assert!(matches!(gen_pretrain(&cfg, dir.path()), Err(Error::Precondition(_))));
    }

    #[test]
    fn pretrain_manifest_is_unlabeled_and_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = small();
        let m1 = gen_pretrain(&cfg, d1.path()).unwrap();
        let m2 = gen_pretrain(&cfg, d2.path()).unwrap();
        assert_eq!(m1.records().len(), cfg.n_pretrain);
        assert!(m1.records().iter().all(|r| r.rater_labels.is_none() && !r.has_surgical_label()));
        assert!(m1.records().iter().all(|r| r.t1_path.is_some() != r.t2_path.is_some()));
        assert_eq!(m1.records(), m2.records());
        for r in m1.records() {
            let p = r.t1_path.as_ref().or(r.t2_path.as_ref()).unwrap();
            assert_eq!(fs::read(d1.path().join(p)).unwrap(), fs::read(d2.path().join(p)).unwrap());
        }
    }

    #[test]
    fn only_test_split_has_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_dataset(&small(), dir.path()).unwrap();
        for r in m.records() {
            assert_eq!(r.has_surgical_label(), r.split == Split::Test);
            assert_eq!(r.rater_labels.as_ref().unwrap().len(), 3);
        }
        assert_eq!(m.split(Split::Train).len(), 1);
        assert_eq!(m.split(Split::Val).len(), 1);
    }

    #[test]
    fn center_lies_inside_volume() {
        let cfg = GenConfig { orientation: "LPI".parse().unwrap(), ..small() };
        for i in 0..20 {
            let c = render_case(&cfg, Split::Test, i);
            for a in 0..3 {
                assert!(c.center_voxel[a] < cfg.volume_extents[a]);
            }
        }
    }
}
