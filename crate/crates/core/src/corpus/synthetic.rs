//! Class-structured stand-in corpus: Gaussian feature sequences around a
//! per-class temporal pattern, captioned by a per-class template grammar.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ClipRecord, DatasetSplit, SplitName, REFERENCES_PER_CLIP};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub feat_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            feat_dim: 64,
            min_frames: 24,
            max_frames: 40,
            noise_std: 1.0,
        }
    }
}

/// Train/eval splits plus the hidden class of every clip.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub train: DatasetSplit,
    pub eval: DatasetSplit,
    pub train_labels: Vec<usize>,
    pub eval_labels: Vec<usize>,
}

struct Theme {
    subjects: [&'static str; 4],
    verbs: [&'static str; 4],
    places: [&'static str; 4],
    codas: [&'static str; 4],
}

const SLOT_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

const THEMES: [Theme; 8] = [
    Theme {
        subjects: ["the rain", "heavy rain", "a light rain", "steady rain drops"],
        verbs: ["is falling", "pours down", "is pattering softly", "keeps falling"],
        places: ["on a tin roof", "onto the pavement", "against a window", "on the leaves"],
        codas: ["", "while thunder rumbles", "as the wind blows", "in the background"],
    },
    Theme {
        subjects: ["a dog", "a small dog", "the large dog", "an angry dog"],
        verbs: ["is barking", "barks loudly", "growls and barks", "keeps barking"],
        places: ["in a yard", "behind a fence", "at the door", "near the street"],
        codas: ["", "while people talk", "as cars pass by", "over and over"],
    },
    Theme {
        subjects: ["a car engine", "an old engine", "the motor", "a truck engine"],
        verbs: ["is idling", "revs up", "runs roughly", "starts and stops"],
        places: ["in a garage", "on the road", "near a building", "in the distance"],
        codas: ["", "then slows down", "and then speeds away", "with a loud hum"],
    },
    Theme {
        subjects: ["the birds", "small birds", "many birds", "a few birds"],
        verbs: ["are chirping", "sing sweetly", "are tweeting loudly", "call to each other"],
        places: ["in the trees", "in a park", "near a pond", "outside the house"],
        codas: ["", "in the early morning", "while leaves rustle", "as wind blows gently"],
    },
    Theme {
        subjects: ["a person", "a man", "a woman", "a child"],
        verbs: ["is walking", "walks slowly", "is running", "steps heavily"],
        places: ["on a wooden floor", "across the gravel", "down a hallway", "up the stairs"],
        codas: ["", "wearing hard shoes", "and then stops", "while keys jingle"],
    },
    Theme {
        subjects: ["a stream", "the water", "a small creek", "a river"],
        verbs: ["is flowing", "trickles gently", "rushes quickly", "is bubbling"],
        places: ["over rocks", "through a forest", "under a bridge", "into a pool"],
        codas: ["", "as birds sing", "with a soft gurgle", "in a quiet place"],
    },
    Theme {
        subjects: ["a crowd", "many people", "a group of people", "the audience"],
        verbs: ["is talking", "chatter loudly", "are cheering", "murmur quietly"],
        places: ["in a hall", "at a market", "in a busy room", "inside a restaurant"],
        codas: ["", "while dishes clatter", "and someone laughs", "as music plays"],
    },
    Theme {
        subjects: ["a drill", "a jackhammer", "a power tool", "the machine"],
        verbs: ["is buzzing", "drills loudly", "starts up", "grinds steadily"],
        places: ["on a building site", "in a workshop", "on the street", "into the concrete"],
        codas: ["", "and then slows down", "then starts again", "with a high whine"],
    },
];

/// Extra adjectives that keep classes beyond the theme bank distinguishable.
const VARIANTS: [&str; 8] = [
    "distant", "muffled", "loud", "faint", "echoing", "nearby", "quiet", "sharp",
];

const MIN_WORDS: usize = 6;
const MAX_WORDS: usize = 14;

fn pick<R: Rng>(rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in SLOT_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    SLOT_WEIGHTS.len() - 1
}

fn caption<R: Rng>(class: usize, rng: &mut R) -> Vec<String> {
    let theme = &THEMES[class % THEMES.len()];
    let mut subject: Vec<&str> = theme.subjects[pick(rng)].split(' ').collect();
    if class >= THEMES.len() {
        let adj = VARIANTS[(class / THEMES.len() - 1) % VARIANTS.len()];
        subject.insert(1.min(subject.len()), adj);
    }
    let mut words: Vec<String> = subject.into_iter().map(str::to_owned).collect();
    for slot in [theme.verbs[pick(rng)], theme.places[pick(rng)]] {
        words.extend(slot.split(' ').map(str::to_owned));
    }
    let coda = theme.codas[pick(rng)];
    let coda_len = coda.split_whitespace().count();
    if words.len() + coda_len <= MAX_WORDS {
        words.extend(coda.split_whitespace().map(str::to_owned));
    }
    debug_assert!((MIN_WORDS..=MAX_WORDS).contains(&words.len()));
    words
}

struct ClassPattern {
    base: Vec<f64>,
    amp: Vec<f64>,
    phase: Vec<f64>,
    freq: f64,
}

/// Deterministic corpus of `n_clips` clips over `n_classes` classes; every
/// fifth clip of each class goes to the evaluation split.
pub fn generate_synthetic_corpus(
    cfg: &SyntheticConfig,
    seed: u64,
    n_clips: usize,
    n_classes: usize,
) -> Result<SyntheticCorpus> {
    if n_clips < 10 || n_classes < 2 {
        return Err(Error::Contract(format!(
            "synthetic corpus needs at least 10 clips and 2 classes, got {n_clips} and {n_classes}"
        )));
    }
    if cfg.min_frames == 0 || cfg.min_frames > cfg.max_frames || cfg.feat_dim == 0 {
        return Err(Error::Config("invalid synthetic frame/feature sizes".into()));
    }
    let mut class_rng = rng::stream(seed, "synthetic-classes", 0);
    let patterns: Vec<ClassPattern> = (0..n_classes)
        .map(|_| ClassPattern {
            base: (0..cfg.feat_dim).map(|_| class_rng.sample(StandardNormal)).collect(),
            amp: (0..cfg.feat_dim).map(|_| class_rng.random_range(0.5..1.5)).collect(),
            phase: (0..cfg.feat_dim)
                .map(|_| class_rng.random_range(0.0..std::f64::consts::TAU))
                .collect(),
            freq: class_rng.random_range(1..=3) as f64,
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut train_labels = Vec::new();
    let mut eval_labels = Vec::new();
    for i in 0..n_clips {
        let class = i % n_classes;
        let mut r = rng::stream(seed, "synthetic-clip", i as u64);
        let frames = r.random_range(cfg.min_frames..=cfg.max_frames);
        let p = &patterns[class];
        let mut data = Vec::with_capacity(frames * cfg.feat_dim);
        for t in 0..frames {
            let angle = std::f64::consts::TAU * p.freq * t as f64 / frames as f64;
            for d in 0..cfg.feat_dim {
                let v = p.base[d] + p.amp[d] * (angle + p.phase[d]).sin() + noise.sample(&mut r);
                // stored at f32 precision so in-memory and on-disk corpora agree
                data.push(v as f32 as f64);
            }
        }
        let features = Tensor::matrix(frames, cfg.feat_dim, data)?;
        let references: Vec<Vec<String>> =
            (0..REFERENCES_PER_CLIP).map(|_| caption(class, &mut r)).collect();
        let record = ClipRecord::new(format!("synth_{i:05}"), features, references)?;
        if (i / n_classes) % 5 == 4 {
            eval.push(record);
            eval_labels.push(class);
        } else {
            train.push(record);
            train_labels.push(class);
        }
    }
    Ok(SyntheticCorpus {
        train: DatasetSplit::new(SplitName::Train, train)?,
        eval: DatasetSplit::new(SplitName::Evaluation, eval)?,
        train_labels,
        eval_labels,
    })
}
