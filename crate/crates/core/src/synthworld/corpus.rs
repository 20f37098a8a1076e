use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::caption::{gen_caption, Level};
use super::qa::{gen_qa, QaItem};
use super::scene::{gen_scene_with_id, Scene};
use super::vocab::Vocab;
use crate::encoder::{ObjectInput, TextInput};
use crate::error::{Error, Result};
use crate::seed;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

const SCENE_STREAM: u64 = 1;
const COARSE_STREAM: u64 = 2;
const FINE_STREAM: u64 = 3;
const QA_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub split: Split,
    pub scene: Scene,
    pub objects: ObjectInput,
    pub coarse: TextInput,
    pub fine: TextInput,
    pub qa: QaItem,
}

impl Record {
    pub fn caption(&self, level: Level) -> &TextInput {
        match level {
            Level::Coarse => &self.coarse,
            Level::Fine => &self.fine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<Record>,
    pub dev: Vec<Record>,
    pub test: Vec<Record>,
}

/// Scene counts per split; train and dev are rounded, test takes the rest.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let train = (n as f64 * ratios[0]).round() as usize;
    let dev = ((n as f64 * ratios[1]).round() as usize).min(n - train);
    Ok([train, dev, n - train - dev])
}

pub fn build_record(rng_seed: u64, scene_id: u64, split: Split, vocab: &Vocab) -> Result<Record> {
    let (scene, objects) = gen_scene_with_id(seed::derive(rng_seed, SCENE_STREAM, scene_id), scene_id);
    let coarse = gen_caption(&scene, Level::Coarse, seed::derive(rng_seed, COARSE_STREAM, scene_id), vocab)?;
    let fine = gen_caption(&scene, Level::Fine, seed::derive(rng_seed, FINE_STREAM, scene_id), vocab)?;
    let qa = gen_qa(&scene, seed::derive(rng_seed, QA_STREAM, scene_id), vocab)?;
    Ok(Record {
        split,
        scene,
        objects,
        coarse,
        fine,
        qa,
    })
}

/// Scene ids are `0..n`, assigned to splits in contiguous blocks.
pub fn build_corpus(n_scenes: usize, ratios: [f64; 3], rng_seed: u64) -> Result<Corpus> {
    let [n_train, n_dev, _] = split_sizes(n_scenes, ratios)?;
    let vocab = Vocab::standard();
    let mut corpus = Corpus {
        vocab: vocab.clone(),
        train: Vec::with_capacity(n_train),
        dev: Vec::with_capacity(n_dev),
        test: Vec::new(),
    };
    for id in 0..n_scenes {
        let split = if id < n_train {
            Split::Train
        } else if id < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let record = build_record(rng_seed, id as u64, split, &vocab)?;
        corpus.split_mut(split).push(record);
    }
    Ok(corpus)
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Record> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Writes `corpus.jsonl` and `vocab.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(CORPUS_FILE))?);
        for r in self.records() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let vocab = serde_json::to_string_pretty(&self.vocab.to_json())?;
        fs::write(dir.join(VOCAB_FILE), vocab + "\n")?;
        Ok(())
    }

    /// Reads a corpus directory and checks every record against its vocab.
    pub fn read(dir: &Path) -> Result<Corpus> {
        let vocab_json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        let vocab = Vocab::from_json(&vocab_json)?;
        let mut corpus = Corpus {
            vocab,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        let reader = BufReader::new(fs::File::open(dir.join(CORPUS_FILE))?);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)?;
            for t in [&r.coarse, &r.fine, &r.qa.question] {
                if let Some(&bad) = t.token_ids.iter().find(|&&i| i >= corpus.vocab.len()) {
                    return Err(Error::Config(format!(
                        "corpus line {}: token id {bad} outside vocab of {}",
                        n + 1,
                        corpus.vocab.len()
                    )));
                }
            }
            corpus.split_mut(r.split).push(r);
        }
        Ok(corpus)
    }
}

/// Hex sha256 of a corpus directory's JSONL file.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join(CORPUS_FILE))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
