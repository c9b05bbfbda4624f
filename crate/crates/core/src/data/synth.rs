//! Synthetic grounded world.
//!
//! Each content word carries a ground-truth vector `g_w`, a concreteness
//! score and a part of speech. Sentences follow a fixed grammar; content
//! words are chosen with probability `∝ exp(β·cos(g_w, g_prev))`, so the
//! text carries distributional evidence about `g`. An image feature is the
//! mean `g` of the caption's concrete words plus Gaussian noise, so images
//! carry direct evidence about concrete words only.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::formats::{
    to_f32_precision, write_captions, write_features, write_concreteness, write_context, write_norms,
    write_relatedness, write_relations, CaptionRecord, ContextPair, FeatureMatrix, Relation, RelationLabel,
};
use super::DataError;

/// Concreteness above this threshold makes a word visible in images.
pub const CONCRETE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Number of content words.
    pub n_words: usize,
    /// Dimension of `g_w` and of the image features.
    pub feature_dim: usize,
    pub n_clusters: usize,
    /// Within-cluster spread of `g_w` around the cluster centre.
    pub cluster_spread: f64,
    /// Image feature noise std.
    pub image_noise: f64,
    /// Coherence of ungrounded text.
    pub text_beta: f64,
    /// Coherence of captions.
    pub caption_beta: f64,
    /// Derived synonym, antonym and part-of words.
    pub n_syn: usize,
    pub n_ant: usize,
    pub n_part: usize,
    /// Target sizes in whitespace-separated words.
    pub grounded_words: usize,
    pub val_grounded_words: usize,
    pub text_words: usize,
    pub val_text_words: usize,
    pub test_text_words: usize,
    pub n_relatedness_pairs: usize,
    pub n_random_relations: usize,
    pub n_context_pairs: usize,
    pub voken_bank_size: usize,
    /// Multiplies every concreteness score; values ≤ 0.5 leave no concrete words.
    pub concreteness_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_words: 200,
            feature_dim: 32,
            n_clusters: 10,
            cluster_spread: 1.0,
            image_noise: 0.1,
            text_beta: 4.0,
            caption_beta: 1.5,
            n_syn: 20,
            n_ant: 16,
            n_part: 16,
            grounded_words: 200_000,
            val_grounded_words: 10_000,
            text_words: 100_000,
            val_text_words: 20_000,
            test_text_words: 20_000,
            n_relatedness_pairs: 1000,
            n_random_relations: 40,
            n_context_pairs: 300,
            voken_bank_size: 256,
            concreteness_scale: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let derived = self.n_syn + self.n_ant + self.n_part;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(DataError::World(msg.into())) };
        check(self.n_words >= 20, "n_words must be at least 20")?;
        check(self.feature_dim >= 2, "feature_dim must be at least 2")?;
        check(self.n_clusters >= 1, "n_clusters must be at least 1")?;
        check(derived * 2 <= self.n_words, "derived words may be at most half of n_words")?;
        check(
            self.image_noise >= 0.0 && self.cluster_spread >= 0.0,
            "noise parameters must be non-negative",
        )?;
        check(
            self.text_beta.is_finite() && self.caption_beta.is_finite(),
            "coherence parameters must be finite",
        )?;
        check(
            self.grounded_words >= 1000 && self.text_words >= 1000,
            "grounded_words and text_words must be at least 1000",
        )?;
        check(self.voken_bank_size >= 2, "voken_bank_size must be at least 2")?;
        check(
            (0.0..=1.0).contains(&self.concreteness_scale),
            "concreteness_scale must lie in [0, 1]",
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Verb,
    Adj,
}

impl Pos {
    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Noun => "noun",
            Pos::Verb => "verb",
            Pos::Adj => "adj",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordEntry {
    pub text: String,
    pub pos: Pos,
    pub concreteness: f64,
    pub cluster: usize,
    pub g: Vec<f64>,
}

impl WordEntry {
    pub fn is_concrete(&self) -> bool {
        self.concreteness > CONCRETE_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub words: Vec<WordEntry>,
    pub determiners: Vec<String>,
    pub relations: Vec<(usize, usize, RelationLabel)>,
    image_noise: f64,
    text_beta: f64,
    caption_beta: f64,
    #[serde(skip)]
    by_pos: [Vec<usize>; 3],
    #[serde(skip)]
    cosine: Vec<f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn pos_slot(pos: Pos) -> usize {
    pos as usize
}

/// Unique pronounceable strings from consonant-vowel syllables.
fn make_lexicon(n: usize, rng: &mut ChaCha8Rng, reserved: &[&str]) -> Vec<String> {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let mut seen: HashSet<String> = reserved.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self, DataError> {
        config.validate()?;
        let mut rng = stream_rng(seed, 0);
        let d = config.feature_dim;
        let centers: Vec<Vec<f64>> = (0..config.n_clusters).map(|_| normalize(gaussian(&mut rng, d, 1.0))).collect();
        let ant_offset = normalize(gaussian(&mut rng, d, 1.0));
        let part_offset = normalize(gaussian(&mut rng, d, 1.0));
        let determiners = vec!["the".to_string(), "a".to_string()];
        let names = make_lexicon(config.n_words, &mut rng, &["the", "a"]);
        let n_base = config.n_words - config.n_syn - config.n_ant - config.n_part;

        let scale = config.concreteness_scale;
        let concreteness = |pos: Pos, rng: &mut ChaCha8Rng| {
            scale
                * match pos {
                    Pos::Noun => rng.random_range(0.25..1.0),
                    Pos::Adj => rng.random_range(0.0..1.0),
                    Pos::Verb => rng.random_range(0.0..0.75),
                }
        };
        let mut words = Vec::with_capacity(config.n_words);
        for i in 0..n_base {
            // 1/2 nouns, 1/4 verbs, 1/4 adjectives, interleaved so each
            // cluster gets every part of speech.
            let pos = match i % 4 {
                0 | 2 => Pos::Noun,
                1 => Pos::Verb,
                _ => Pos::Adj,
            };
            let cluster = (i / 4) % config.n_clusters;
            let mut g = centers[cluster].clone();
            for (x, z) in g.iter_mut().zip(gaussian(&mut rng, d, config.cluster_spread / (d as f64).sqrt())) {
                *x += z;
            }
            words.push(WordEntry {
                text: String::new(),
                pos,
                concreteness: concreteness(pos, &mut rng),
                cluster,
                g: normalize(g),
            });
        }

        let mut relations = Vec::new();
        let of_pos = |words: &[WordEntry], pos: Pos| -> Vec<usize> {
            (0..n_base).filter(|&i| words[i].pos == pos).collect()
        };
        let nouns = of_pos(&words, Pos::Noun);
        let adjs = of_pos(&words, Pos::Adj);
        let derive = |words: &mut Vec<WordEntry>,
                          relations: &mut Vec<(usize, usize, RelationLabel)>,
                          pool: &[usize],
                          count: usize,
                          label: RelationLabel,
                          rng: &mut ChaCha8Rng| {
            let mut pool = pool.to_vec();
            pool.shuffle(rng);
            for &base in pool.iter().cycle().take(count) {
                let mut g = words[base].g.clone();
                match label {
                    RelationLabel::Syn => {
                        for (x, z) in g.iter_mut().zip(gaussian(rng, d, 0.3 / (d as f64).sqrt())) {
                            *x += z;
                        }
                    }
                    RelationLabel::Ant => g.iter_mut().zip(&ant_offset).for_each(|(x, o)| *x += o),
                    _ => g.iter_mut().zip(&part_offset).for_each(|(x, o)| *x += o),
                }
                let pos = words[base].pos;
                let new = words.len();
                words.push(WordEntry {
                    text: String::new(),
                    pos,
                    concreteness: concreteness(pos, rng),
                    cluster: words[base].cluster,
                    g: normalize(g),
                });
                // part-of pairs read (part, whole)
                relations.push(match label {
                    RelationLabel::PartOf => (new, base, label),
                    _ => (base, new, label),
                });
            }
        };
        let all_base: Vec<usize> = (0..n_base).collect();
        derive(&mut words, &mut relations, &all_base, config.n_syn, RelationLabel::Syn, &mut rng);
        derive(&mut words, &mut relations, &adjs, config.n_ant, RelationLabel::Ant, &mut rng);
        derive(&mut words, &mut relations, &nouns, config.n_part, RelationLabel::PartOf, &mut rng);

        // The first noun of each cluster is its hypernym.
        for c in 0..config.n_clusters {
            let members: Vec<usize> = nouns.iter().copied().filter(|&i| words[i].cluster == c).collect();
            if let Some((&head, rest)) = members.split_first() {
                relations.extend(rest.iter().map(|&m| (m, head, RelationLabel::Hyper)));
            }
        }
        let related: HashSet<(usize, usize)> = relations.iter().flat_map(|&(a, b, _)| [(a, b), (b, a)]).collect();
        let mut added = 0;
        let mut attempts = 0;
        while added < config.n_random_relations && attempts < 100 * config.n_random_relations.max(1) {
            attempts += 1;
            let a = rng.random_range(0..words.len());
            let b = rng.random_range(0..words.len());
            if a != b && words[a].cluster != words[b].cluster && !related.contains(&(a, b)) {
                relations.push((a, b, RelationLabel::Random));
                added += 1;
            }
        }
        for (w, name) in words.iter_mut().zip(names) {
            w.text = name;
        }
        if !words.iter().any(WordEntry::is_concrete) {
            return Err(DataError::World("no concrete words; image features would be empty".into()));
        }
        let mut world = Self {
            words,
            determiners,
            relations,
            image_noise: config.image_noise,
            text_beta: config.text_beta,
            caption_beta: config.caption_beta,
            by_pos: Default::default(),
            cosine: Vec::new(),
        };
        world.index();
        Ok(world)
    }

    fn index(&mut self) {
        let n = self.words.len();
        self.by_pos = Default::default();
        for (i, w) in self.words.iter().enumerate() {
            self.by_pos[pos_slot(w.pos)].push(i);
        }
        self.cosine = (0..n * n)
            .map(|k| cosine(&self.words[k / n].g, &self.words[k % n].g))
            .collect();
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        let mut w: World = serde_json::from_str(s).map_err(|e| DataError::Format(format!("world: {e}")))?;
        w.index();
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn feature_dim(&self) -> usize {
        self.words[0].g.len()
    }

    pub fn relatedness(&self, a: usize, b: usize) -> f64 {
        self.cosine[a * self.words.len() + b]
    }

    pub fn word_index(&self, text: &str) -> Option<usize> {
        self.words.iter().position(|w| w.text == text)
    }

    fn pick(&self, pos: Pos, prev: Option<usize>, beta: f64, rng: &mut ChaCha8Rng) -> usize {
        let pool = &self.by_pos[pos_slot(pos)];
        let Some(p) = prev else {
            return *pool.choose(rng).unwrap();
        };
        let weights: Vec<f64> = pool.iter().map(|&w| (beta * self.relatedness(w, p)).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&w, &wt) in pool.iter().zip(&weights) {
            u -= wt;
            if u <= 0.0 {
                return w;
            }
        }
        *pool.last().unwrap()
    }

    /// One clause `DET [ADJ] NOUN VERB DET [ADJ] NOUN`; `Err(det)` entries
    /// are determiner indices.
    fn clause(&self, prev: &mut Option<usize>, beta: f64, rng: &mut ChaCha8Rng) -> Vec<Result<usize, usize>> {
        let mut out = Vec::with_capacity(7);
        let mut push = |pos: Pos, out: &mut Vec<Result<usize, usize>>, rng: &mut ChaCha8Rng| {
            let w = self.pick(pos, *prev, beta, rng);
            *prev = Some(w);
            out.push(Ok(w));
        };
        for half in 0..2 {
            out.push(Err(rng.random_range(0..self.determiners.len())));
            if rng.random_bool(0.5) {
                push(Pos::Adj, &mut out, rng);
            }
            push(Pos::Noun, &mut out, rng);
            if half == 0 {
                push(Pos::Verb, &mut out, rng);
            }
        }
        out
    }

    fn render(&self, slots: &[Result<usize, usize>]) -> Vec<String> {
        slots
            .iter()
            .map(|s| match *s {
                Ok(w) => self.words[w].text.clone(),
                Err(d) => self.determiners[d].clone(),
            })
            .collect()
    }

    /// Caption words and content-word indices; captions always mention at
    /// least one concrete word.
    pub fn sample_caption(&self, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<usize>) {
        loop {
            let slots = self.clause(&mut None, self.caption_beta, rng);
            let content: Vec<usize> = slots.iter().filter_map(|s| s.ok()).collect();
            if content.iter().any(|&w| self.words[w].is_concrete()) {
                return (self.render(&slots), content);
            }
        }
    }

    /// Mean `g` of the concrete words plus isotropic noise.
    pub fn image_feature(&self, content: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let concrete: Vec<&WordEntry> = content.iter().map(|&w| &self.words[w]).filter(|w| w.is_concrete()).collect();
        let d = self.feature_dim();
        let mut f = vec![0.0; d];
        for w in &concrete {
            f.iter_mut().zip(&w.g).for_each(|(a, b)| *a += b);
        }
        let n = concrete.len().max(1) as f64;
        f.iter_mut().for_each(|x| *x /= n);
        if self.image_noise > 0.0 {
            for (x, z) in f.iter_mut().zip(gaussian(rng, d, self.image_noise)) {
                *x += z;
            }
        }
        f
    }

    /// A paragraph of `sentences` clauses, each terminated by ".".
    fn paragraph(&self, sentences: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Result<usize, usize>>> {
        let mut prev = None;
        (0..sentences).map(|_| self.clause(&mut prev, self.text_beta, rng)).collect()
    }

    fn text(&self, target_words: usize, rng: &mut ChaCha8Rng) -> String {
        let mut out = String::new();
        let mut count = 0;
        while count < target_words {
            let n = rng.random_range(4..=10);
            let para = self.paragraph(n, rng);
            let line: Vec<String> = para
                .iter()
                .map(|s| {
                    count += s.len() + 1;
                    self.render(s).join(" ") + " ."
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Everything emitted by [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub world: World,
    pub captions: Vec<CaptionRecord>,
    pub val_captions: Vec<CaptionRecord>,
    pub features: FeatureMatrix,
    pub voken_bank: FeatureMatrix,
    pub text_train: String,
    pub text_val: String,
    pub text_test: String,
    pub relatedness: Vec<(String, String, f64)>,
    pub norms: Vec<(String, String, f64)>,
    pub relations_train: Vec<Relation>,
    pub relations_test: Vec<Relation>,
    pub context: Vec<ContextPair>,
    pub concreteness: Vec<(String, f64)>,
}

pub mod files {
    pub const CAPTIONS: &str = "captions.jsonl";
    pub const VAL_CAPTIONS: &str = "val_captions.jsonl";
    pub const FEATURES: &str = "features.lcgf";
    pub const VOKEN_BANK: &str = "voken_bank.lcgf";
    pub const TEXT_TRAIN: &str = "text_train.txt";
    pub const TEXT_VAL: &str = "text_val.txt";
    pub const TEXT_TEST: &str = "text_test.txt";
    pub const RELATEDNESS: &str = "relatedness.tsv";
    pub const NORMS: &str = "norms.tsv";
    pub const RELATIONS_TRAIN: &str = "relations_train.tsv";
    pub const RELATIONS_TEST: &str = "relations_test.tsv";
    pub const CONTEXT: &str = "context.tsv";
    pub const CONCRETENESS: &str = "concreteness.tsv";
    pub const WORLD: &str = "world.json";
}

impl SyntheticCorpus {
    /// Plain text for tokenizer training: captions and training text.
    pub fn tokenizer_corpus(&self) -> String {
        let mut s = self.text_train.clone();
        for c in &self.captions {
            s.push_str(&c.caption);
            s.push('\n');
        }
        s
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let p = |f: &str| dir.join(f);
        let write = |f: &str, s: &str| std::fs::write(p(f), s).map_err(|e| DataError::io(&p(f), e));
        write_captions(&p(files::CAPTIONS), &self.captions)?;
        write_captions(&p(files::VAL_CAPTIONS), &self.val_captions)?;
        write_features(&p(files::FEATURES), &self.features)?;
        write_features(&p(files::VOKEN_BANK), &self.voken_bank)?;
        write(files::TEXT_TRAIN, &self.text_train)?;
        write(files::TEXT_VAL, &self.text_val)?;
        write(files::TEXT_TEST, &self.text_test)?;
        write_relatedness(&p(files::RELATEDNESS), &self.relatedness)?;
        write_norms(&p(files::NORMS), &self.norms)?;
        write_relations(&p(files::RELATIONS_TRAIN), &self.relations_train)?;
        write_relations(&p(files::RELATIONS_TEST), &self.relations_test)?;
        write_context(&p(files::CONTEXT), &self.context)?;
        write_concreteness(&p(files::CONCRETENESS), &self.concreteness)?;
        write(files::WORLD, &self.world.to_json())
    }
}

fn sample_captions(
    world: &World,
    target_words: usize,
    first_row: usize,
    rng: &mut ChaCha8Rng,
    features: &mut Vec<f64>,
) -> Vec<CaptionRecord> {
    let mut out = Vec::new();
    let mut count = 0;
    while count < target_words {
        let (words, content) = world.sample_caption(rng);
        count += words.len();
        let mut f = world.image_feature(&content, rng);
        to_f32_precision(&mut f);
        features.extend(f);
        out.push(CaptionRecord {
            caption: words.join(" "),
            feature_row: first_row + out.len(),
        });
    }
    out
}

fn norms_table(world: &World) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    for w in &world.words {
        let mut dims: Vec<usize> = (0..w.g.len()).collect();
        dims.sort_by(|&a, &b| w.g[b].abs().total_cmp(&w.g[a].abs()).then(a.cmp(&b)));
        for &k in dims.iter().take(4) {
            let sign = if w.g[k] >= 0.0 { "pos" } else { "neg" };
            rows.push((w.text.clone(), format!("dim{k}_{sign}"), w.g[k].abs()));
        }
        rows.push((w.text.clone(), format!("cluster{}", w.cluster), 1.0));
    }
    rows
}

fn context_pairs(world: &World, n: usize, rng: &mut ChaCha8Rng) -> Vec<ContextPair> {
    let verbs = &world.by_pos[pos_slot(Pos::Verb)];
    let mut out = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while out.len() < n && attempts < 50 * n.max(1) {
        attempts += 1;
        let slots = world.clause(&mut None, world.text_beta, rng);
        // Targets need a predecessor; the predecessor is swapped for a word
        // that can never precede the target's part of speech.
        let candidates: Vec<usize> = (1..slots.len()).filter(|&i| slots[i].is_ok()).collect();
        let i = *candidates.choose(rng).unwrap();
        let target = slots[i].unwrap();
        let pos = world.words[target].pos;
        let mut modified = slots.clone();
        modified[i - 1] = match pos {
            Pos::Verb => Err(rng.random_range(0..world.determiners.len())),
            Pos::Noun | Pos::Adj => Ok(*verbs.choose(rng).unwrap()),
        };
        let original = world.render(&slots).join(" ") + " .";
        let modified = world.render(&modified).join(" ") + " .";
        if original != modified && seen.insert(original.clone()) {
            out.push(ContextPair {
                original,
                modified,
                target: world.words[target].text.clone(),
                pos: pos.as_str().to_string(),
            });
        }
    }
    out
}

/// Generates a complete synthetic experiment. Pure in `(config, seed)`.
pub fn gen_synthetic(config: &WorldConfig, seed: u64) -> Result<SyntheticCorpus, DataError> {
    let world = World::generate(config, seed)?;
    let mut features = Vec::new();
    let mut rng = stream_rng(seed, 1);
    let captions = sample_captions(&world, config.grounded_words, 0, &mut rng, &mut features);
    let mut rng = stream_rng(seed, 2);
    let val_captions = sample_captions(&world, config.val_grounded_words, captions.len(), &mut rng, &mut features);
    let count = captions.len() + val_captions.len();
    let features = FeatureMatrix::new(count, world.feature_dim(), features)?;

    let mut rng = stream_rng(seed, 3);
    let mut bank = Vec::with_capacity(config.voken_bank_size * world.feature_dim());
    for _ in 0..config.voken_bank_size {
        let (_, content) = world.sample_caption(&mut rng);
        let mut f = world.image_feature(&content, &mut rng);
        to_f32_precision(&mut f);
        bank.extend(f);
    }
    let voken_bank = FeatureMatrix::new(config.voken_bank_size, world.feature_dim(), bank)?;

    let text_train = world.text(config.text_words, &mut stream_rng(seed, 4));
    let text_val = world.text(config.val_text_words, &mut stream_rng(seed, 5));
    let text_test = world.text(config.test_text_words, &mut stream_rng(seed, 6));

    let mut rng = stream_rng(seed, 7);
    let n = world.words.len();
    let mut pairs = BTreeSet::new();
    let max_pairs = n * (n - 1) / 2;
    while pairs.len() < config.n_relatedness_pairs.min(max_pairs) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let relatedness = pairs
        .into_iter()
        .map(|(a, b)| (world.words[a].text.clone(), world.words[b].text.clone(), world.relatedness(a, b)))
        .collect();

    let mut rels: Vec<Relation> = world
        .relations
        .iter()
        .map(|&(a, b, label)| Relation {
            w1: world.words[a].text.clone(),
            w2: world.words[b].text.clone(),
            label,
        })
        .collect();
    rels.shuffle(&mut rng);
    let (mut relations_train, mut relations_test) = (Vec::new(), Vec::new());
    for label in RelationLabel::ALL {
        let of: Vec<Relation> = rels.iter().filter(|r| r.label == label).cloned().collect();
        let cut = (of.len() * 7).div_ceil(10);
        relations_train.extend_from_slice(&of[..cut]);
        relations_test.extend_from_slice(&of[cut..]);
    }

    let context = context_pairs(&world, config.n_context_pairs, &mut stream_rng(seed, 8));
    let concreteness = world.words.iter().map(|w| (w.text.clone(), w.concreteness)).collect();
    let norms = norms_table(&world);
    Ok(SyntheticCorpus {
        world,
        captions,
        val_captions,
        features,
        voken_bank,
        text_train,
        text_val,
        text_test,
        relatedness,
        norms,
        relations_train,
        relations_test,
        context,
        concreteness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::formats::{read_captions, read_features, read_relatedness};

    fn small() -> WorldConfig {
        WorldConfig {
            n_words: 40,
            n_clusters: 4,
            n_syn: 4,
            n_ant: 4,
            n_part: 4,
            grounded_words: 2000,
            val_grounded_words: 200,
            text_words: 2000,
            val_text_words: 500,
            test_text_words: 500,
            n_relatedness_pairs: 100,
            n_random_relations: 8,
            n_context_pairs: 20,
            voken_bank_size: 16,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_pure_in_config_and_seed() {
        let a = gen_synthetic(&small(), 3).unwrap();
        let b = gen_synthetic(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&small(), 4).unwrap();
        assert_ne!(a.text_train, c.text_train);
    }

    #[test]
    fn noiseless_single_concrete_caption_feature_is_g() {
        let cfg = WorldConfig {
            image_noise: 0.0,
            ..small()
        };
        let world = World::generate(&cfg, 1).unwrap();
        let mut rng = stream_rng(0, 0);
        let w = world.words.iter().position(WordEntry::is_concrete).unwrap();
        let abstract_word = world.words.iter().position(|e| !e.is_concrete()).unwrap();
        assert_eq!(world.image_feature(&[w, abstract_word], &mut rng), world.words[w].g);
    }

    #[test]
    fn relatedness_table_is_cosine_of_g() {
        let corpus = gen_synthetic(&small(), 5).unwrap();
        let w = &corpus.world;
        for (a, b, s) in &corpus.relatedness {
            let (ga, gb) = (&w.words[w.word_index(a).unwrap()].g, &w.words[w.word_index(b).unwrap()].g);
            let dot: f64 = ga.iter().zip(gb).map(|(x, y)| x * y).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((s - dot / (norm(ga) * norm(gb))).abs() <= 1e-12);
        }
        for i in 0..w.words.len() {
            assert!((w.relatedness(i, i) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn captions_mention_a_concrete_word_and_sizes_are_met() {
        let corpus = gen_synthetic(&small(), 2).unwrap();
        let words: usize = corpus.captions.iter().map(|c| c.caption.split(' ').count()).sum();
        assert!(words >= 2000);
        for c in &corpus.captions {
            assert!(c
                .caption
                .split(' ')
                .filter_map(|t| corpus.world.word_index(t))
                .any(|i| corpus.world.words[i].is_concrete()));
        }
        assert!(corpus.text_train.split_whitespace().count() >= 2000);
        assert_eq!(corpus.context.len(), 20);
        assert!(corpus.context.iter().all(|p| p.original != p.modified));
        let labels: BTreeSet<_> = corpus.relations_train.iter().map(|r| r.label).collect();
        assert_eq!(labels.len(), 5);
    }

    #[test]
    fn written_files_pass_their_loaders() {
        let corpus = gen_synthetic(&small(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_to_dir(dir.path()).unwrap();
        assert_eq!(read_captions(&dir.path().join(files::CAPTIONS)).unwrap(), corpus.captions);
        assert_eq!(read_features(&dir.path().join(files::FEATURES)).unwrap(), corpus.features);
        let rel = read_relatedness(&dir.path().join(files::RELATEDNESS)).unwrap();
        assert_eq!(rel, corpus.relatedness);
        let world = World::from_json(&std::fs::read_to_string(dir.path().join(files::WORLD)).unwrap()).unwrap();
        assert_eq!(world, corpus.world);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        assert!(World::generate(&WorldConfig { n_words: 10, ..small() }, 0).is_err());
        assert!(World::generate(&WorldConfig { grounded_words: 10, ..small() }, 0).is_err());
        let err = World::generate(&WorldConfig { concreteness_scale: 0.5, ..small() }, 0).unwrap_err();
        assert!(err.to_string().contains("no concrete words"));
    }
}
