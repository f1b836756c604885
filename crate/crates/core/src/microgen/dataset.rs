//! Corpus assembly and the line-delimited scene/question file formats.
//!
//! Each file starts with a JSON header line carrying a `format` tag and
//! the full generation config, followed by one JSON record per line.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::question::{generate_question, Category, QuestionOptions};
use super::{generate_scene, ConditionSpec, Scene, SceneConfig};
use crate::error::{Error, Result};

pub const SCENES_FORMAT: &str = "smac-scenes/1";
pub const QUESTIONS_FORMAT: &str = "smac-questions/1";

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";

/// Fresh scenes tried for one sample before giving up.
const MAX_ATTEMPTS: u64 = 256;
const QUESTION_SALT: u64 = 0x5155_4553_5449_4f4e;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub scene_id: String,
    pub category: Category,
    pub tokens: Vec<String>,
    pub answer: String,
}

/// splitmix64 finalizer over `(seed, index)`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Relative category weights; normalized on use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    weights: BTreeMap<Category, f64>,
}

impl Default for CategoryMix {
    fn default() -> Self {
        Self::uniform()
    }
}

impl CategoryMix {
    pub fn uniform() -> Self {
        Self {
            weights: Category::ALL.iter().map(|&c| (c, 1.0)).collect(),
        }
    }

    pub fn single(category: Category) -> Self {
        Self {
            weights: [(category, 1.0)].into_iter().collect(),
        }
    }

    pub fn from_weights(weights: &[(Category, f64)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for &(c, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::contract(format!("weight for {c} must be finite and non-negative")));
            }
            if w > 0.0 {
                *map.entry(c).or_insert(0.0) += w;
            }
        }
        if map.is_empty() {
            return Err(Error::contract("category mix has no positive weight"));
        }
        Ok(Self { weights: map })
    }

    /// Parses `uniform`, a single category name, or `name=weight,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec == "uniform" {
            return Ok(Self::uniform());
        }
        let mut pairs = Vec::new();
        for part in spec.split(',') {
            let (name, weight) = match part.split_once('=') {
                Some((n, w)) => (
                    n.trim(),
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::contract(format!("bad weight in category mix {part:?}")))?,
                ),
                None => (part.trim(), 1.0),
            };
            let c = Category::from_name(name).ok_or_else(|| Error::contract(format!("unknown category {name:?}")))?;
            pairs.push((c, weight));
        }
        Self::from_weights(&pairs)
    }

    pub fn weight(&self, c: Category) -> f64 {
        let total: f64 = self.weights.values().sum();
        self.weights.get(&c).copied().unwrap_or(0.0) / total
    }

    /// Largest-remainder apportionment of `n` samples; ties go to the
    /// earlier category.
    pub fn allocate(&self, n: usize) -> [usize; 5] {
        let mut counts = [0usize; 5];
        let mut rems = Vec::new();
        for c in Category::ALL {
            let exact = self.weight(c) * n as f64;
            counts[c.index()] = exact.floor() as usize;
            rems.push((exact - exact.floor(), c.index()));
        }
        let mut left = n - counts.iter().sum::<usize>();
        rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, i) in rems {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub condition: String,
    pub n_samples: usize,
    pub mix: CategoryMix,
    pub seed: u64,
    pub scene: SceneConfig,
    pub questions_per_scene: usize,
    pub options: QuestionOptions,
}

impl DatasetConfig {
    pub fn new(condition: &str, n_samples: usize, seed: u64) -> Self {
        Self {
            condition: condition.to_string(),
            n_samples,
            mix: CategoryMix::uniform(),
            seed,
            scene: SceneConfig::default(),
            questions_per_scene: 1,
            options: QuestionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: DatasetConfig,
    pub scenes: Vec<Scene>,
    pub samples: Vec<QASample>,
}

impl Corpus {
    /// Pure function of `config`.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        if config.n_samples == 0 {
            return Err(Error::contract("n_samples must be at least 1"));
        }
        if config.questions_per_scene == 0 {
            return Err(Error::contract("questions_per_scene must be at least 1"));
        }
        let cond = ConditionSpec::by_name(&config.condition)?;
        config.scene.validate()?;

        let counts = config.mix.allocate(config.n_samples);
        let mut order: Vec<Category> = Category::ALL
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, counts[c.index()]))
            .collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

        let mut scenes: Vec<Scene> = Vec::new();
        let mut index_of: HashMap<u64, usize> = HashMap::new();
        let mut samples = Vec::with_capacity(order.len());
        let prefix = config.condition.to_ascii_lowercase();
        for (i, &category) in order.iter().enumerate() {
            let group = (i / config.questions_per_scene) as u64;
            let qseed = child_seed(config.seed ^ QUESTION_SALT, i as u64);
            let mut attempt = 0u64;
            let (scene, mut sample) = loop {
                // Attempt 0 shares the group scene; retries draw a private one.
                let sseed = if attempt == 0 {
                    child_seed(config.seed, group)
                } else {
                    child_seed(child_seed(config.seed, group), (i as u64) << 16 | attempt)
                };
                let scene = generate_scene(&cond, &config.scene, sseed)?;
                match generate_question(&scene, category, child_seed(qseed, attempt), &config.options) {
                    Ok(s) => break (scene, s),
                    Err(Error::Generation(_)) if attempt + 1 < MAX_ATTEMPTS => attempt += 1,
                    Err(e) => return Err(e),
                }
            };
            sample.id = format!("{prefix}-{i:06}");
            if let std::collections::hash_map::Entry::Vacant(v) = index_of.entry(scene.seed) {
                v.insert(scenes.len());
                scenes.push(scene);
            }
            samples.push(sample);
        }
        Ok(Self {
            config: config.clone(),
            scenes,
            samples,
        })
    }

    pub fn scene_map(&self) -> HashMap<&str, &Scene> {
        self.scenes.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps only the given samples and the scenes they reference.
    pub fn subset(&self, samples: Vec<QASample>) -> Self {
        let used: std::collections::HashSet<&str> = samples.iter().map(|s| s.scene_id.as_str()).collect();
        let scenes = self.scenes.iter().filter(|s| used.contains(s.id.as_str())).cloned().collect();
        Self {
            config: self.config.clone(),
            scenes,
            samples,
        }
    }

    /// Writes `scenes.jsonl` and `questions.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let scenes = dir.join(SCENES_FILE);
        let questions = dir.join(QUESTIONS_FILE);
        write_records(&scenes, SCENES_FORMAT, &self.config, &self.scenes)?;
        write_records(&questions, QUESTIONS_FORMAT, &self.config, &self.samples)?;
        Ok((scenes, questions))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (config, scenes) = read_records::<Scene>(&dir.join(SCENES_FILE), SCENES_FORMAT)?;
        let (qconfig, samples) = read_records::<QASample>(&dir.join(QUESTIONS_FILE), QUESTIONS_FORMAT)?;
        if qconfig != config {
            return Err(Error::format("corpus", "scene and question headers disagree"));
        }
        let corpus = Self { config, scenes, samples };
        let map = corpus.scene_map();
        if let Some(s) = corpus.samples.iter().find(|s| !map.contains_key(s.scene_id.as_str())) {
            return Err(Error::format("corpus", format!("sample {} references unknown scene {}", s.id, s.scene_id)));
        }
        Ok(corpus)
    }
}

fn write_records<T: Serialize>(path: &Path, format: &str, config: &DatasetConfig, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = CorpusHeader {
        format: format.to_string(),
        config: config.clone(),
    };
    write_line(&mut out, &header).map_err(|e| Error::io(path, e))?;
    for r in records {
        write_line(&mut out, r).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<(DatasetConfig, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("corpus", format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader = serde_json::from_str(&first)
        .map_err(|e| Error::format("corpus", format!("{} header: {e}", path.display())))?;
    if header.format != format {
        return Err(Error::format(
            "corpus",
            format!("{} has format {:?}, expected {format:?}", path.display(), header.format),
        ));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("corpus", format!("{} line {}: {e}", path.display(), n + 2)))?,
        );
    }
    Ok((header.config, records))
}

/// Generates and writes a corpus.
pub fn build_dataset(config: &DatasetConfig, dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::generate(config)?;
    corpus.write(dir)?;
    Ok(corpus)
}

/// Deterministic shuffle-split: the first shard takes
/// `round(fraction * n)` samples.
pub fn split_shards(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut samples = corpus.samples.clone();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (fraction * samples.len() as f64).round() as usize;
    let rest = samples.split_off(k);
    Ok((corpus.subset(samples), corpus.subset(rest)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_sums_to_n() {
        let mix = CategoryMix::uniform();
        for n in [1, 3, 7, 100, 1001] {
            let c = mix.allocate(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }
        let m = CategoryMix::parse("exist=3,count=1").unwrap();
        assert_eq!(m.allocate(8), [6, 2, 0, 0, 0]);
    }

    #[test]
    fn mix_parse_rejects_unknown() {
        assert!(CategoryMix::parse("exist,bogus").is_err());
        assert!(CategoryMix::parse("exist=0").is_err());
        assert_eq!(CategoryMix::parse("count").unwrap(), CategoryMix::single(Category::Count));
    }

    #[test]
    fn child_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| child_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
