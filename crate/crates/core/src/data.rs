//! Synthetic thermal-like segmentation data and non-IID partitioning.
//!
//! Datasets are generated from a [`ClassManifest`] that fixes, per client,
//! the number of images and the number of objects of each class. Every
//! object is a small rectangle or ellipse that never overlaps another object
//! and never touches an object of the same class, so a 4-connected component
//! count of each class recovers the manifest exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, name_tag, rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot place object {object} of class `{class}` for client `{client}` at {height}x{width}")]
    CapacityExceeded { client: String, class: String, object: u64, height: usize, width: usize },
    #[error("client `{client}` lists unknown class `{class}`")]
    UnknownClass { client: String, class: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("dataset too small to split: {0} items")]
    DatasetTooSmall(usize),
    #[error("split fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("invalid shard count {k} for {n} items")]
    InvalidK { k: usize, n: usize },
    #[error("invalid Dirichlet concentration {0}")]
    InvalidAlpha(f64),
    #[error("malformed dataset file at byte {offset}: {reason}")]
    MalformedCache { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub images: usize,
    #[serde(default)]
    pub counts: BTreeMap<String, u64>,
    /// Added to every pixel of this client's images.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub intensity_offset: f32,
}

fn is_zero(v: &f32) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub classes: Vec<String>,
    pub clients: BTreeMap<String, ClientManifest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ClassManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: ClassManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > 254 {
            return Err(DataError::InvalidManifest("class list must hold 1..=254 names".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(DataError::InvalidManifest(format!("duplicate class `{c}`")));
            }
        }
        if self.clients.is_empty() {
            return Err(DataError::InvalidManifest("no clients".into()));
        }
        for (id, client) in &self.clients {
            for class in client.counts.keys() {
                if !self.classes.contains(class) {
                    return Err(DataError::UnknownClass { client: id.clone(), class: class.clone() });
                }
            }
            if client.images == 0 && client.counts.values().any(|&n| n > 0) {
                return Err(DataError::InvalidManifest(format!("client `{id}` has objects but no images")));
            }
        }
        Ok(())
    }

    /// One client holding `images` images with `objects_per_class` objects of each of `num_classes` classes.
    pub fn uniform(client: &str, num_classes: usize, images: usize, objects_per_class: u64) -> Self {
        let classes: Vec<String> = (1..=num_classes).map(|k| format!("class-{k}")).collect();
        let counts = classes.iter().map(|c| (c.clone(), objects_per_class)).collect();
        Self {
            classes,
            clients: BTreeMap::from([(client.to_owned(), ClientManifest { images, counts, intensity_offset: 0.0 })]),
            notes: Vec::new(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn count(&self, client: &str, class: &str) -> u64 {
        self.clients.get(client).and_then(|c| c.counts.get(class)).copied().unwrap_or(0)
    }
}

/// One single-channel image and its label mask (0 = background, k = class k).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub height: usize,
    pub width: usize,
    pub intensity: Vec<f32>,
    pub mask: Vec<u8>,
}

impl SynthImage {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Foreground class covering the most pixels, or 0 for background-only images.
    pub fn dominant_class(&self, num_labels: usize) -> usize {
        let mut counts = vec![0usize; num_labels.max(1)];
        for &m in &self.mask {
            if (m as usize) < counts.len() {
                counts[m as usize] += 1;
            }
        }
        counts
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &n)| n > 0)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(c, _)| c)
    }
}

pub type Dataset = Vec<SynthImage>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
    #[serde(default = "default_max_blob")]
    pub max_blob: usize,
}

fn default_noise() -> f32 {
    0.05
}

fn default_max_blob() -> usize {
    3
}

impl GeneratorParams {
    pub fn square(size: usize) -> Self {
        Self { height: size, width: size, noise_std: default_noise(), max_blob: default_max_blob() }
    }
}

/// Mean intensity of label `label` among `num_labels` labels.
pub fn class_intensity(label: usize, num_labels: usize) -> f32 {
    if label == 0 {
        0.1
    } else {
        0.25 + 0.75 * label as f32 / (num_labels - 1).max(1) as f32
    }
}

const PLACEMENT_TRIES: usize = 24;

struct Canvas {
    height: usize,
    width: usize,
    mask: Vec<u8>,
}

impl Canvas {
    fn new(height: usize, width: usize) -> Self {
        Self { height, width, mask: vec![0; height * width] }
    }

    fn blob_pixels(&self, top: usize, left: usize, h: usize, w: usize, ellipse: bool) -> Vec<usize> {
        let mut out = Vec::with_capacity(h * w);
        let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
        let (ry, rx) = (h as f32 / 2.0, w as f32 / 2.0);
        for dy in 0..h {
            for dx in 0..w {
                if ellipse {
                    let ny = (dy as f32 - cy) / ry;
                    let nx = (dx as f32 - cx) / rx;
                    if ny * ny + nx * nx > 1.0 {
                        continue;
                    }
                }
                out.push((top + dy) * self.width + left + dx);
            }
        }
        out
    }

    fn fits(&self, pixels: &[usize], label: u8) -> bool {
        pixels.iter().all(|&p| {
            if self.mask[p] != 0 {
                return false;
            }
            let (y, x) = (p / self.width, p % self.width);
            let neighbors = [
                (y > 0).then(|| p - self.width),
                (y + 1 < self.height).then(|| p + self.width),
                (x > 0).then(|| p - 1),
                (x + 1 < self.width).then(|| p + 1),
            ];
            neighbors.into_iter().flatten().all(|q| self.mask[q] != label)
        })
    }

    fn try_random<R: Rng>(&mut self, rng: &mut R, label: u8, max_blob: usize) -> bool {
        let max_blob = max_blob.max(1);
        for _ in 0..PLACEMENT_TRIES {
            let h = rng.random_range(1..=max_blob.min(self.height));
            let w = rng.random_range(1..=max_blob.min(self.width));
            let ellipse = h >= 3 && w >= 3 && rng.random_bool(0.5);
            let top = rng.random_range(0..=self.height - h);
            let left = rng.random_range(0..=self.width - w);
            let pixels = self.blob_pixels(top, left, h, w, ellipse);
            if self.fits(&pixels, label) {
                for p in pixels {
                    self.mask[p] = label;
                }
                return true;
            }
        }
        false
    }

    fn try_exhaustive(&mut self, label: u8) -> bool {
        for p in 0..self.mask.len() {
            if self.fits(&[p], label) {
                self.mask[p] = label;
                return true;
            }
        }
        false
    }
}

fn generate_client(
    manifest: &ClassManifest,
    client_id: &str,
    client: &ClientManifest,
    params: &GeneratorParams,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = rng(seed);
    let mut canvases: Vec<Canvas> = (0..client.images).map(|_| Canvas::new(params.height, params.width)).collect();

    let mut objects: Vec<(usize, u64)> = Vec::new();
    for (k, class) in manifest.classes.iter().enumerate() {
        let count = client.counts.get(class).copied().unwrap_or(0);
        objects.extend((0..count).map(|i| (k + 1, i)));
    }
    objects.shuffle(&mut rng);

    for (label, index) in objects {
        let start = rng.random_range(0..canvases.len());
        let n = canvases.len();
        let placed = (0..n).any(|off| canvases[(start + off) % n].try_random(&mut rng, label as u8, params.max_blob))
            || (0..n).any(|off| canvases[(start + off) % n].try_exhaustive(label as u8));
        if !placed {
            return Err(DataError::CapacityExceeded {
                client: client_id.to_owned(),
                class: manifest.classes[label - 1].clone(),
                object: index,
                height: params.height,
                width: params.width,
            });
        }
    }

    let num_labels = manifest.num_labels();
    let noise = Normal::new(0.0f32, params.noise_std.max(0.0)).expect("finite noise");
    Ok(canvases
        .into_iter()
        .map(|canvas| {
            let intensity = canvas
                .mask
                .iter()
                .map(|&m| class_intensity(m as usize, num_labels) + noise.sample(&mut rng) + client.intensity_offset)
                .collect();
            SynthImage { height: canvas.height, width: canvas.width, intensity, mask: canvas.mask }
        })
        .collect())
}

/// Generates every client's dataset. Each client draws from its own stream,
/// derived from `seed` and the client name.
pub fn generate(manifest: &ClassManifest, params: &GeneratorParams, seed: u64) -> Result<BTreeMap<String, Dataset>> {
    manifest.validate()?;
    if params.height == 0 || params.width == 0 {
        return Err(DataError::InvalidManifest("image size must be positive".into()));
    }
    manifest
        .clients
        .iter()
        .map(|(id, client)| {
            let client_seed = derive_seed(seed, &[name_tag(id)]);
            generate_client(manifest, id, client, params, client_seed).map(|d| (id.clone(), d))
        })
        .collect()
}

/// Deterministic disjoint split; the first part holds `round(fraction * n)` items,
/// clamped so neither part is empty.
pub fn split_train_test<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = items.len();
    if n < 2 {
        return Err(DataError::DatasetTooSmall(n));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| items[i].clone()).collect(),
        test_idx.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// Splits `0..n` into `k` disjoint shards whose sizes differ by at most one.
///
/// With `skew = Some((labels, alpha))` each label draws a Dirichlet(alpha)
/// preference over shards and items are routed by that preference among
/// shards that still have room.
pub fn equal_partition_indices(
    n: usize,
    k: usize,
    seed: u64,
    skew: Option<(&[usize], f64)>,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(DataError::InvalidK { k, n });
    }
    let mut rng = rng(seed);
    let mut capacity: Vec<usize> = (0..k).map(|j| n / k + usize::from(j < n % k)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut shards: Vec<Vec<usize>> = capacity.iter().map(|&c| Vec::with_capacity(c)).collect();

    match skew {
        None => {
            let mut j = 0;
            for i in order {
                while capacity[j] == 0 {
                    j += 1;
                }
                shards[j].push(i);
                capacity[j] -= 1;
            }
        }
        Some((labels, alpha)) => {
            if labels.len() != n {
                return Err(DataError::InvalidK { k, n: labels.len() });
            }
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(DataError::InvalidAlpha(alpha));
            }
            let num_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
            let preference: Vec<Vec<f64>> = (0..num_labels).map(|_| dirichlet_symmetric(&mut rng, alpha, k)).collect();
            for i in order {
                let pref = &preference[labels[i]];
                let total: f64 = (0..k).filter(|&j| capacity[j] > 0).map(|j| pref[j]).sum();
                let j = if total > 0.0 && total.is_finite() {
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = None;
                    for j in (0..k).filter(|&j| capacity[j] > 0) {
                        pick = Some(j);
                        if u < pref[j] {
                            break;
                        }
                        u -= pref[j];
                    }
                    pick.expect("some shard has room")
                } else {
                    let open: Vec<usize> = (0..k).filter(|&j| capacity[j] > 0).collect();
                    open[rng.random_range(0..open.len())]
                };
                shards[j].push(i);
                capacity[j] -= 1;
            }
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

fn dirichlet_symmetric<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = rand_distr::Gamma::new(alpha, 1.0).expect("positive alpha");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

pub fn equal_partition<T: Clone>(
    items: &[T],
    k: usize,
    seed: u64,
    skew: Option<(&[usize], f64)>,
) -> Result<Vec<Vec<T>>> {
    let shards = equal_partition_indices(items.len(), k, seed, skew)?;
    Ok(shards.into_iter().map(|idx| idx.into_iter().map(|i| items[i].clone()).collect()).collect())
}

/// Largest ratio, over labels present in the data, between a shard's label
/// frequency and the global label frequency. 1.0 means no skew.
pub fn skew_statistic(labels: &[usize], shards: &[Vec<usize>]) -> f64 {
    let num_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut global = vec![0usize; num_labels];
    for &l in labels {
        global[l] += 1;
    }
    let n = labels.len() as f64;
    let mut worst: f64 = 1.0;
    for shard in shards.iter().filter(|s| !s.is_empty()) {
        let mut counts = vec![0usize; num_labels];
        for &i in shard {
            counts[labels[i]] += 1;
        }
        for l in 0..num_labels {
            if global[l] == 0 {
                continue;
            }
            let local = counts[l] as f64 / shard.len() as f64;
            worst = worst.max(local / (global[l] as f64 / n));
        }
    }
    worst
}

/// Writes a dataset as `H u32 | W u32 | count u32` followed, per image, by
/// an intensity plane (f32 LE) and a mask plane (u8).
pub fn write_dataset<W: Write>(out: &mut W, images: &[SynthImage]) -> Result<()> {
    let (h, w) = images.first().map_or((0, 0), |im| (im.height, im.width));
    if images.iter().any(|im| im.height != h || im.width != w) {
        return Err(DataError::InvalidManifest("images in one cache must share a shape".into()));
    }
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(images.len() as u32).to_le_bytes())?;
    for im in images {
        let mut plane = Vec::with_capacity(im.intensity.len() * 4);
        for v in &im.intensity {
            plane.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&plane)?;
        out.write_all(&im.mask)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: &mut R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let word = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or(DataError::MalformedCache { offset: at, reason: "truncated header".into() })
    };
    let (h, w, count) = (word(0)?, word(4)?, word(8)?);
    let per_image = h * w * 5;
    let expected = 12 + per_image * count;
    if bytes.len() != expected {
        return Err(DataError::MalformedCache {
            offset: bytes.len().min(expected),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok((0..count)
        .map(|i| {
            let base = 12 + i * per_image;
            let intensity = bytes[base..base + h * w * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let mask = bytes[base + h * w * 4..base + per_image].to_vec();
            SynthImage { height: h, width: w, intensity, mask }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_manifest(a: u64, b: u64, images: usize) -> ClassManifest {
        ClassManifest {
            classes: vec!["hot".into(), "cold".into()],
            clients: BTreeMap::from([(
                "c".to_string(),
                ClientManifest {
                    images,
                    counts: BTreeMap::from([("hot".into(), a), ("cold".into(), b)]),
                    intensity_offset: 0.0,
                },
            )]),
            notes: vec![],
        }
    }

    #[test]
    fn zero_counts_give_background_only() {
        let data = generate(&two_class_manifest(0, 0, 3), &GeneratorParams::square(8), 1).unwrap();
        assert!(data["c"].iter().all(|im| im.mask.iter().all(|&m| m == 0)));
        assert_eq!(data["c"].len(), 3);
    }

    #[test]
    fn generation_is_reproducible() {
        let m = two_class_manifest(10, 7, 4);
        let p = GeneratorParams::square(12);
        assert_eq!(generate(&m, &p, 5).unwrap(), generate(&m, &p, 5).unwrap());
        assert_ne!(generate(&m, &p, 5).unwrap(), generate(&m, &p, 6).unwrap());
    }

    #[test]
    fn capacity_is_reported() {
        let err = generate(&two_class_manifest(50, 0, 1), &GeneratorParams::square(4), 1).unwrap_err();
        assert!(matches!(err, DataError::CapacityExceeded { ref class, .. } if class == "hot"));
    }

    #[test]
    fn unknown_class_rejected() {
        let mut m = two_class_manifest(1, 1, 1);
        m.clients.get_mut("c").unwrap().counts.insert("lamp".into(), 1);
        assert!(matches!(m.validate(), Err(DataError::UnknownClass { .. })));
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..793).collect();
        let (train, test) = split_train_test(&items, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (634, 159));
        let (a, b) = split_train_test(&[1, 2], 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_eq!(split_train_test(&items, 0.8, 3).unwrap(), (train, test));
        assert!(matches!(split_train_test(&[1], 0.5, 0), Err(DataError::DatasetTooSmall(1))));
        assert!(matches!(split_train_test(&items, 1.0, 0), Err(DataError::InvalidFraction(_))));
    }

    #[test]
    fn partition_sizes() {
        let shards = equal_partition_indices(10, 5, 0, None).unwrap();
        assert!(shards.iter().all(|s| s.len() == 2));
        assert!(matches!(equal_partition_indices(3, 4, 0, None), Err(DataError::InvalidK { .. })));
        assert!(matches!(equal_partition_indices(3, 0, 0, None), Err(DataError::InvalidK { .. })));
    }

    #[test]
    fn cache_round_trip_and_truncation() {
        let data = generate(&two_class_manifest(3, 2, 2), &GeneratorParams::square(6), 9).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data["c"]).unwrap();
        assert_eq!(buf.len(), 12 + 2 * 36 * 5);
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), data["c"]);
        assert!(matches!(read_dataset(&mut &buf[..buf.len() - 1]), Err(DataError::MalformedCache { .. })));
    }

    #[test]
    fn dominant_class_prefers_largest_area() {
        let im = SynthImage { height: 1, width: 5, intensity: vec![0.0; 5], mask: vec![0, 2, 2, 1, 0] };
        assert_eq!(im.dominant_class(3), 2);
        let bg = SynthImage { height: 1, width: 2, intensity: vec![0.0; 2], mask: vec![0, 0] };
        assert_eq!(bg.dominant_class(3), 0);
    }
}
