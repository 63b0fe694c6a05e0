use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::language::LanguageSpec;
use super::scene::Scene;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub id: String,
    pub split: Split,
    pub lang: String,
    /// Image path relative to the corpus root.
    pub image: String,
    pub src: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt: Option<String>,
}

/// Sizes and languages of a synthetic corpus.
///
/// The high-resource language gets `n_train_high` image-caption-translation
/// triples. Each low-resource language gets `n_train_low` image-caption
/// pairs, a `valid` pool of `n_fewshot` parallel pairs for few-shot
/// finetuning and a `test` set of `n_test` parallel pairs. The high-resource
/// language also gets `n_test` held-out triples.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub high: LanguageSpec,
    pub low: Vec<LanguageSpec>,
    pub target: LanguageSpec,
    pub n_train_high: usize,
    pub n_train_low: usize,
    pub n_test: usize,
    pub n_fewshot: usize,
    /// Probability of dropping each content word from training captions.
    pub caption_dropout: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            high: LanguageSpec::german(),
            low: vec![LanguageSpec::french(), LanguageSpec::czech()],
            target: LanguageSpec::english(),
            n_train_high: 3000,
            n_train_low: 3000,
            n_test: 500,
            n_fewshot: 400,
            caption_dropout: 0.0,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn languages(&self) -> impl Iterator<Item = &LanguageSpec> {
        std::iter::once(&self.high)
            .chain(&self.low)
            .chain(std::iter::once(&self.target))
    }

    pub fn validate(&self) -> Result<()> {
        let mut tags = HashSet::new();
        for l in self.languages() {
            if !tags.insert(l.tag.as_str()) {
                return Err(Error::Config(format!("duplicate language tag {}", l.tag)));
            }
        }
        if self.low.is_empty() {
            return Err(Error::Config("at least one low-resource language is required".into()));
        }
        if self.n_train_high == 0 || self.n_train_low == 0 || self.n_test == 0 {
            return Err(Error::Config("corpus counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.caption_dropout) {
            return Err(Error::Config("caption_dropout must lie in [0, 1)".into()));
        }
        let mut seen = HashSet::new();
        for l in self.languages() {
            for w in l.lexicon() {
                if !seen.insert(w) {
                    return Err(Error::Config(format!("word {w:?} appears in two lexicons")));
                }
            }
        }
        Ok(())
    }
}

/// Samples, their images (index-aligned) and the shared vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub languages: Languages,
    pub vocab: Vocabulary,
    pub samples: Vec<CorpusSample>,
    pub images: Vec<Image>,
}

/// Language roles of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Languages {
    pub high: LanguageSpec,
    pub low: Vec<LanguageSpec>,
    pub target: LanguageSpec,
}

impl Languages {
    pub fn all(&self) -> impl Iterator<Item = &LanguageSpec> {
        std::iter::once(&self.high)
            .chain(&self.low)
            .chain(std::iter::once(&self.target))
    }

    pub fn get(&self, tag: &str) -> Option<&LanguageSpec> {
        self.all().find(|l| l.tag == tag)
    }
}

fn drop_words<R: Rng>(words: Vec<String>, p: f64, rng: &mut R) -> Vec<String> {
    if p == 0.0 {
        return words;
    }
    let mut out = vec![words[0].clone()];
    let content: Vec<&String> = words[1..].iter().filter(|_| rng.random::<f64>() >= p).collect();
    if content.is_empty() {
        out.push(words[1].clone());
    } else {
        out.extend(content.into_iter().cloned());
    }
    out
}

/// Generates the corpus in memory. Every sample has its own scene, so no
/// image is shared between languages.
pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = Vocabulary::from_words(spec.languages().flat_map(|l| l.lexicon()))?;
    let mut samples = Vec::new();
    let mut images = Vec::new();
    let mut plan: Vec<(&LanguageSpec, Split, usize, bool)> = vec![(&spec.high, Split::Train, spec.n_train_high, true)];
    plan.push((&spec.high, Split::Test, spec.n_test, true));
    for l in &spec.low {
        plan.push((l, Split::Train, spec.n_train_low, false));
        plan.push((l, Split::Valid, spec.n_fewshot, true));
        plan.push((l, Split::Test, spec.n_test, true));
    }
    for (lang, split, n, parallel) in plan {
        for i in 0..n {
            let scene = Scene::sample(&mut rng);
            let id = format!("{}-{}-{i:05}", lang.tag, split.as_str());
            let mut words = lang.caption(&scene);
            if split == Split::Train {
                words = drop_words(words, spec.caption_dropout, &mut rng);
            }
            samples.push(CorpusSample {
                image: format!("images/{id}.ppm"),
                id,
                split,
                lang: lang.tag.clone(),
                src: words.join(" "),
                tgt: parallel.then(|| spec.target.caption_text(&scene)),
            });
            images.push(scene.render());
        }
    }
    Ok(Corpus {
        languages: Languages {
            high: spec.high.clone(),
            low: spec.low.clone(),
            target: spec.target.clone(),
        },
        vocab,
        samples,
        images,
    })
}

impl Corpus {
    /// Indices of the samples in `lang` and `split`, in file order.
    pub fn select(&self, lang: &str, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].lang == lang && self.samples[i].split == split)
            .collect()
    }

    /// Sample counts keyed by (language, split).
    pub fn counts(&self) -> BTreeMap<(String, Split), usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry((s.lang.clone(), s.split)).or_insert(0) += 1;
        }
        out
    }

    pub fn counts_table(&self) -> String {
        let mut s = format!("{:<6}{:>8}{:>8}{:>8}\n", "lang", "train", "valid", "test");
        let counts = self.counts();
        for l in self.languages.all() {
            let c = |sp| counts.get(&(l.tag.clone(), sp)).copied().unwrap_or(0);
            if l.tag == self.languages.target.tag {
                continue;
            }
            s.push_str(&format!(
                "{:<6}{:>8}{:>8}{:>8}\n",
                l.tag,
                c(Split::Train),
                c(Split::Valid),
                c(Split::Test)
            ));
        }
        s
    }

    /// Writes `corpus/samples.jsonl`, `corpus/languages.json`,
    /// `images/<id>.ppm` and `vocab.txt` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let cdir = root.join("corpus");
        let idir = root.join("images");
        for d in [&cdir, &idir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut jsonl = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut jsonl, s).expect("sample serializes");
            jsonl.push(b'\n');
        }
        let path = cdir.join("samples.jsonl");
        fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;
        let path = cdir.join("languages.json");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.languages).expect("languages serialize");
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        for (s, img) in self.samples.iter().zip(&self.images) {
            img.save_ppm(&root.join(&s.image))?;
        }
        self.vocab.save(&root.join("vocab.txt"))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("corpus").join("languages.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let languages: Languages = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let vocab = Vocabulary::load(&root.join("vocab.txt"))?;
        let path = root.join("corpus").join("samples.jsonl");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        let mut images = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let s: CorpusSample =
                serde_json::from_str(line).map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
            images.push(Image::load_ppm(&root.join(&s.image))?);
            samples.push(s);
        }
        Ok(Corpus {
            languages,
            vocab,
            samples,
            images,
        })
    }

    /// Checks the properties zero-shot transfer relies on. Returns one
    /// message per violation; an empty list means the corpus is usable.
    pub fn audit(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let langs = &self.languages;
        let mut seen = HashSet::new();
        for l in langs.all() {
            for w in l.lexicon() {
                if !seen.insert(w) {
                    problems.push(format!("word {w:?} is shared between languages"));
                }
                if self.vocab.id(w).is_none() {
                    problems.push(format!("word {w:?} is missing from the vocabulary"));
                }
            }
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(&s.id) || !ids.insert(&s.image) {
                problems.push(format!("sample {} reuses an id or image", s.id));
            }
            let Some(lang) = langs.get(&s.lang) else {
                problems.push(format!("sample {} has unknown language {}", s.id, s.lang));
                continue;
            };
            if s.split != Split::Train || s.tgt.is_some() {
                match (lang.parse(&s.src), &s.tgt) {
                    (Some(c), Some(t)) if langs.target.realize(&c) == *t => {}
                    (_, None) => problems.push(format!("sample {} lacks a reference", s.id)),
                    _ => problems.push(format!("sample {}: reference does not match", s.id)),
                }
            }
        }
        // every low-resource concept must be seen in its own training images
        // and in the high-resource training images
        let concepts_in = |l: &LanguageSpec| -> HashSet<usize> {
            let words: Vec<&str> = l.lexicon().skip(1).collect();
            let mut found = HashSet::new();
            for &i in &self.select(&l.tag, Split::Train) {
                for w in self.samples[i].src.split_whitespace() {
                    if let Some(k) = words.iter().position(|&x| x == w) {
                        found.insert(k);
                    }
                }
            }
            found
        };
        let high = concepts_in(&langs.high);
        for l in &langs.low {
            let own = concepts_in(l);
            for (k, w) in l.lexicon().skip(1).enumerate() {
                if !own.contains(&k) || !high.contains(&k) {
                    problems.push(format!("{}: concept {w:?} never grounded in training", l.tag));
                }
            }
        }
        problems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_train_high: 40,
            n_train_low: 40,
            n_test: 10,
            n_fewshot: 5,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn composition_and_audit() {
        let c = build_corpus(&small()).unwrap();
        assert_eq!(c.select("de", Split::Train).len(), 40);
        assert_eq!(c.select("fr", Split::Valid).len(), 5);
        assert!(c.select("fr", Split::Train).iter().all(|&i| c.samples[i].tgt.is_none()));
        assert!(c.select("de", Split::Train).iter().all(|&i| c.samples[i].tgt.is_some()));
        assert_eq!(c.audit(), Vec::<String>::new());
        assert_eq!(c.vocab.len(), 44);
    }

    #[test]
    fn duplicate_tags_rejected() {
        let spec = CorpusSpec {
            low: vec![LanguageSpec::french(), LanguageSpec::french()],
            ..small()
        };
        assert!(matches!(build_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = build_corpus(&small()).unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.samples, c.samples);
        assert_eq!(back.images, c.images);
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(back.languages, c.languages);
    }

    #[test]
    fn dropout_keeps_determiner() {
        let spec = CorpusSpec {
            caption_dropout: 0.5,
            ..small()
        };
        let c = build_corpus(&spec).unwrap();
        for s in &c.samples {
            let first = s.src.split_whitespace().next().unwrap();
            assert_eq!(c.languages.get(&s.lang).unwrap().determiner, first);
        }
    }
}
