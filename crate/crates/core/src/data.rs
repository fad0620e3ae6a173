//! Bags, the binary bag format, dataset manifests, synthetic data and the
//! split / few-shot sampling protocol.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub const BAG_MAGIC: &[u8; 4] = b"VLMB";
pub const BAG_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// One slide: low- and high-magnification patch features plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: usize,
    /// `N_l × d` low-scale patch features.
    pub low: Tensor,
    /// `N_h × d` high-scale patch features.
    pub high: Tensor,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: usize, low: Tensor, high: Tensor) -> Result<Self> {
        let bag = Self {
            id: id.into(),
            label,
            low,
            high,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn d(&self) -> usize {
        self.low.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.low.rows() == 0 || self.high.rows() == 0 {
            return Err(Error::Config(format!("bag {}: empty patch matrix", self.id)));
        }
        if self.low.cols() != self.high.cols() || self.low.cols() == 0 {
            return Err(Error::Config(format!(
                "bag {}: feature dimensions differ ({} vs {})",
                self.id,
                self.low.cols(),
                self.high.cols()
            )));
        }
        if !self.low.is_finite() || !self.high.is_finite() {
            return Err(Error::Config(format!("bag {}: non-finite feature", self.id)));
        }
        if u32::try_from(self.label).is_err() {
            return Err(Error::Config(format!("bag {}: label out of range", self.id)));
        }
        Ok(())
    }
}

/// Serializes a bag:
/// `"VLMB" | version u32 | label u32 | d u32 | N_l u32 | N_h u32 | H_l f64… | H_h f64…`,
/// all little-endian, matrices row-major.
pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    bag.validate()?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Config(format!("bag {}: {what} exceeds u32", bag.id)))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (bag.low.len() + bag.high.len()));
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(bag.label, "label")?.to_le_bytes());
    out.extend_from_slice(&to_u32(bag.d(), "d")?.to_le_bytes());
    out.extend_from_slice(&to_u32(bag.low.rows(), "N_l")?.to_le_bytes());
    out.extend_from_slice(&to_u32(bag.high.rows(), "N_h")?.to_le_bytes());
    for v in bag.low.data().iter().chain(bag.high.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bag(bytes: &[u8], id: &str) -> Result<Bag> {
    let fmt = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    let u32_at = |offset: usize, what: &str| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte slice")))
            .ok_or_else(|| fmt(offset, format!("truncated header reading {what}")))
    };
    match bytes.get(..4) {
        Some(m) if m == BAG_MAGIC => {}
        Some(_) => return Err(fmt(0, "bad magic".into())),
        None => return Err(fmt(0, "truncated magic".into())),
    }
    let version = u32_at(4, "version")?;
    if version != BAG_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let label = u32_at(8, "label")? as usize;
    let d = u32_at(12, "d")? as usize;
    let n_low = u32_at(16, "N_l")? as usize;
    let n_high = u32_at(20, "N_h")? as usize;
    if d == 0 || n_low == 0 || n_high == 0 {
        return Err(fmt(12, format!("degenerate shape d={d}, N_l={n_low}, N_h={n_high}")));
    }
    let mut offset = HEADER_LEN;
    let mut read_matrix = |rows: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows * d {
            let chunk = bytes
                .get(offset..offset + 8)
                .ok_or_else(|| fmt(offset, "truncated feature matrix".into()))?;
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte slice"));
            if !v.is_finite() {
                return Err(fmt(offset, "non-finite feature value".into()));
            }
            data.push(v);
            offset += 8;
        }
        Ok(Tensor::new(rows, d, data)?)
    };
    let low = read_matrix(n_low)?;
    let high = read_matrix(n_high)?;
    if offset != bytes.len() {
        return Err(fmt(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Bag::new(id, label, low, high)
}

pub fn write_bag(bag: &Bag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    write_atomic(path, &bytes)
}

/// Reads a bag; its id is the file stem.
pub fn read_bag(path: &Path) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&bytes, &id)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub d: usize,
    pub seed: u64,
    pub bags: Vec<BagEntry>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Config("manifest: class_names is empty".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("manifest: d must be positive".into()));
        }
        for b in &self.bags {
            if b.label >= self.n_classes() {
                return Err(Error::Config(format!(
                    "manifest: bag {} has label {} but only {} classes",
                    b.id,
                    b.label,
                    self.n_classes()
                )));
            }
        }
        Ok(())
    }
}

/// A manifest together with every bag it references, loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, bags: Vec<Bag>) -> Result<Self> {
        manifest.validate()?;
        if manifest.bags.len() != bags.len() {
            return Err(Error::Config("dataset: manifest and bag counts differ".into()));
        }
        for (entry, bag) in manifest.bags.iter().zip(&bags) {
            if bag.d() != manifest.d {
                return Err(Error::Config(format!(
                    "bag {}: feature dimension {} but manifest declares {}",
                    entry.id,
                    bag.d(),
                    manifest.d
                )));
            }
            if bag.label != entry.label {
                return Err(Error::Config(format!(
                    "bag {}: file label {} disagrees with manifest label {}",
                    entry.id, bag.label, entry.label
                )));
            }
        }
        Ok(Self { manifest, bags })
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let bags = manifest
            .bags
            .iter()
            .map(|entry| {
                let path = root.join(&entry.path);
                let mut bag = read_bag(&path)?;
                bag.id.clone_from(&entry.id);
                Ok(bag)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, bags)
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.labels()
    }
}

/// Split proportions, default 4:3:3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 4,
            val: 3,
            test: 3,
        }
    }
}

impl SplitRatio {
    /// Per-split counts for `n` items: floors first, then the leftover
    /// items go to the largest fractional parts (earlier split on ties).
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let parts = [self.train, self.val, self.test];
        let total: u64 = parts.iter().map(|&p| u64::from(p)).sum();
        let mut counts = [0usize; 3];
        let mut remainders = [0u64; 3];
        for (i, &p) in parts.iter().enumerate() {
            let scaled = n as u64 * u64::from(p);
            counts[i] = (scaled / total) as usize;
            remainders[i] = scaled % total;
        }
        let mut leftover = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            counts[i] += 1;
            leftover -= 1;
        }
        counts
    }
}

/// Stratified split: each class is shuffled with its own derived stream and
/// cut according to `ratio`.
pub fn split_dataset(labels: &[usize], n_classes: usize, ratio: SplitRatio, seed: u64) -> Result<Vec<Split>> {
    if ratio.train + ratio.val + ratio.test == 0 {
        return Err(Error::Config("split ratio sums to zero".into()));
    }
    let mut assignment = vec![Split::Train; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::Protocol(format!("class {class} has no bags to split")));
        }
        members.shuffle(&mut rng_for(seed, "split", class as u64));
        let [n_train, n_val, _] = ratio.counts(members.len());
        for (rank, &i) in members.iter().enumerate() {
            assignment[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(assignment)
}

/// Draws `shots` bags per class, uniformly without replacement, from the
/// candidate indices. Returns dataset indices grouped by class.
pub fn few_shot_sample(
    labels: &[usize],
    candidates: &[usize],
    n_classes: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut picked = Vec::with_capacity(shots * n_classes);
    for class in 0..n_classes {
        let mut pool: Vec<usize> = candidates.iter().copied().filter(|&i| labels[i] == class).collect();
        if pool.len() < shots {
            return Err(Error::Protocol(format!(
                "class {class} has {} training bags, fewer than the {shots} shots requested",
                pool.len()
            )));
        }
        let (chosen, _) = pool.partial_shuffle(&mut rng_for(seed, "shots", class as u64), shots);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Ok(picked)
}

/// Where class-distinguishing signal is planted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSplit {
    /// Every class has its own direction at both scales.
    Both,
    LowOnly,
    HighOnly,
    /// Low scale confuses classes 0 and 1; high scale confuses the last two
    /// classes. Only the combination identifies every class.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub d: usize,
    /// Planted signal directions per class and scale; a signal patch uses
    /// one of them at random.
    pub signal_prototypes: usize,
    /// Inclusive range of low-scale patch counts.
    pub low_patches: [usize; 2],
    /// Inclusive range of high-scale patch counts.
    pub high_patches: [usize; 2],
    pub scale_split: ScaleSplit,
    pub noise_std: f64,
    /// Amplitude of the planted direction in a signal patch.
    pub signal_strength: f64,
    /// Fraction of each bag's patches that carry signal.
    pub signal_fraction: f64,
    pub bags_per_class: usize,
    pub seed: u64,
    /// Optional class names; defaults depend on the class count.
    pub class_names: Option<Vec<String>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            d: 64,
            signal_prototypes: 1,
            low_patches: [16, 32],
            high_patches: [64, 128],
            scale_split: ScaleSplit::Split,
            noise_std: 0.8,
            signal_strength: 6.0,
            signal_fraction: 0.2,
            bags_per_class: 40,
            seed: 0,
            class_names: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("synth.{field}: {msg}")));
        if self.n_classes < 2 {
            return bad("n_classes", format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.scale_split == ScaleSplit::Split && self.n_classes < 3 {
            return bad("scale_split", "split mode needs at least 3 classes".into());
        }
        if self.d < 4 {
            return bad("d", format!("need d >= 4, got {}", self.d));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std", format!("must be a finite value >= 0, got {}", self.noise_std));
        }
        if !self.signal_strength.is_finite() {
            return bad("signal_strength", "must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            return bad("signal_fraction", format!("must lie in [0, 1], got {}", self.signal_fraction));
        }
        if self.signal_prototypes == 0 {
            return bad("signal_prototypes", "must be at least 1".into());
        }
        if 2 * self.n_classes * self.signal_prototypes > self.d {
            return bad(
                "signal_prototypes",
                format!("{} directions do not fit orthogonally in d = {}", 2 * self.n_classes * self.signal_prototypes, self.d),
            );
        }
        for (field, [lo, hi]) in [("low_patches", self.low_patches), ("high_patches", self.high_patches)] {
            if lo == 0 || lo > hi {
                return bad(field, format!("invalid range [{lo}, {hi}]"));
            }
        }
        if self.bags_per_class == 0 {
            return bad("bags_per_class", "must be at least 1".into());
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return bad("class_names", format!("{} names for {} classes", names.len(), self.n_classes));
            }
        }
        Ok(())
    }

    pub fn resolved_class_names(&self) -> Vec<String> {
        if let Some(names) = &self.class_names {
            return names.clone();
        }
        let names: &[&str] = match self.n_classes {
            2 => &["LUAD", "LUSC"],
            3 => &["CCRCC", "PRCC", "CRCC"],
            _ => &[],
        };
        if names.is_empty() {
            (0..self.n_classes).map(|i| format!("class_{i}")).collect()
        } else {
            names.iter().map(|s| s.to_string()).collect()
        }
    }
}

/// Planted directions: `[scale][class]` → list of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDirections {
    pub low: Vec<Vec<Vec<f64>>>,
    pub high: Vec<Vec<Vec<f64>>>,
}

fn orthonormal_set(count: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

pub fn planted_directions(config: &SynthConfig) -> PlantedDirections {
    let c = config.n_classes;
    let k = config.signal_prototypes;
    let mut rng = rng_for(config.seed, "directions", 0);
    let mut basis = orthonormal_set(2 * c * k, config.d, &mut rng).into_iter();
    let mut take = |classes: usize| -> Vec<Vec<Vec<f64>>> {
        (0..classes).map(|_| basis.by_ref().take(k).collect()).collect()
    };
    let mut low = take(c);
    let mut high = take(c);
    if config.scale_split == ScaleSplit::Split {
        low[1] = low[0].clone();
        high[c - 1] = high[c - 2].clone();
    }
    PlantedDirections { low, high }
}

fn synth_matrix(
    rng: &mut impl Rng,
    rows: usize,
    d: usize,
    config: &SynthConfig,
    directions: Option<&[Vec<f64>]>,
) -> Tensor {
    let mut data: Vec<f64> = (0..rows * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            config.noise_std * z
        })
        .collect();
    if let Some(dirs) = directions {
        let n_signal = ((config.signal_fraction * rows as f64).round() as usize)
            .max(usize::from(config.signal_fraction > 0.0))
            .min(rows);
        let mut rows_idx: Vec<usize> = (0..rows).collect();
        rows_idx.shuffle(rng);
        for &r in &rows_idx[..n_signal] {
            let dir = &dirs[rng.random_range(0..dirs.len())];
            for (x, u) in data[r * d..(r + 1) * d].iter_mut().zip(dir) {
                *x += config.signal_strength * u;
            }
        }
    }
    Tensor::new(rows, d, data).expect("shape by construction")
}

/// Generates every bag in memory. Bag `i` draws from its own derived seed,
/// so bags can be produced independently.
pub fn synthesize(config: &SynthConfig) -> Result<(Vec<Bag>, PlantedDirections)> {
    config.validate()?;
    let directions = planted_directions(config);
    let total = config.n_classes * config.bags_per_class;
    let bags = (0..total)
        .map(|i| synth_bag(config, &directions, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((bags, directions))
}

fn synth_bag(config: &SynthConfig, directions: &PlantedDirections, index: usize) -> Result<Bag> {
    let label = index / config.bags_per_class;
    let mut rng = rng_for(config.seed, "bag", index as u64);
    let n_low = rng.random_range(config.low_patches[0]..=config.low_patches[1]);
    let n_high = rng.random_range(config.high_patches[0]..=config.high_patches[1]);
    let low_dirs = match config.scale_split {
        ScaleSplit::HighOnly => None,
        _ => Some(directions.low[label].as_slice()),
    };
    let high_dirs = match config.scale_split {
        ScaleSplit::LowOnly => None,
        _ => Some(directions.high[label].as_slice()),
    };
    let low = synth_matrix(&mut rng, n_low, config.d, config, low_dirs);
    let high = synth_matrix(&mut rng, n_high, config.d, config, high_dirs);
    Bag::new(format!("bag_{index:04}"), label, low, high)
}

/// Accuracy of nearest-planted-direction classifiers on mean-pooled bags:
/// each class scores the projection of the pooled features onto its
/// direction(s); ties resolve to the lowest class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub low_only: f64,
    pub high_only: f64,
    pub dual: f64,
}

pub fn separability(bags: &[Bag], directions: &PlantedDirections) -> SeparabilityReport {
    let score = |m: &Tensor, dirs: &[Vec<f64>]| -> f64 {
        let mut mean = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            mean.iter_mut().zip(m.row(r)).for_each(|(a, b)| *a += b);
        }
        let n = m.rows() as f64;
        dirs.iter()
            .map(|u| u.iter().zip(&mean).map(|(a, b)| a * b / n).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut hits = [0usize; 3];
    for bag in bags {
        let c = directions.low.len();
        let low: Vec<f64> = (0..c).map(|k| score(&bag.low, &directions.low[k])).collect();
        let high: Vec<f64> = (0..c).map(|k| score(&bag.high, &directions.high[k])).collect();
        let dual: Vec<f64> = low.iter().zip(&high).map(|(a, b)| a + b).collect();
        for (slot, scores) in [&low, &high, &dual].into_iter().enumerate() {
            if crate::metrics::argmax(scores) == bag.label {
                hits[slot] += 1;
            }
        }
    }
    let n = bags.len().max(1) as f64;
    SeparabilityReport {
        low_only: hits[0] as f64 / n,
        high_only: hits[1] as f64 / n,
        dual: hits[2] as f64 / n,
    }
}

/// Generates the dataset, writes `bags/<id>.vlmb` and `manifest.json` under
/// `out_dir`, and returns the manifest with the separability check.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<(DatasetManifest, SeparabilityReport)> {
    let (bags, directions) = synthesize(config)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let splits = split_dataset(&labels, config.n_classes, SplitRatio::default(), config.seed)?;
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, split) in bags.iter().zip(splits) {
        let rel = PathBuf::from("bags").join(format!("{}.vlmb", bag.id));
        write_bag(bag, &out_dir.join(&rel))?;
        entries.push(BagEntry {
            id: bag.id.clone(),
            path: rel,
            label: bag.label,
            split,
        });
    }
    let manifest = DatasetManifest {
        class_names: config.resolved_class_names(),
        d: config.d,
        seed: config.seed,
        bags: entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok((manifest, separability(&bags, &directions)))
}

/// In-memory equivalent of [`generate_synthetic`].
pub fn synthetic_dataset(config: &SynthConfig) -> Result<Dataset> {
    let (bags, _) = synthesize(config)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let splits = split_dataset(&labels, config.n_classes, SplitRatio::default(), config.seed)?;
    let entries = bags
        .iter()
        .zip(splits)
        .map(|(bag, split)| BagEntry {
            id: bag.id.clone(),
            path: PathBuf::from("bags").join(format!("{}.vlmb", bag.id)),
            label: bag.label,
            split,
        })
        .collect();
    let manifest = DatasetManifest {
        class_names: config.resolved_class_names(),
        d: config.d,
        seed: config.seed,
        bags: entries,
    };
    Dataset::new(manifest, bags)
}

/// Stable seed for the `index`-th bag of a dataset.
pub fn bag_seed(dataset_seed: u64, index: usize) -> u64 {
    derive_seed(dataset_seed, "bag", index as u64)
}
