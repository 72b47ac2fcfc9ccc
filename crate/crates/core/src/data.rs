//! Synthetic anticipation task and embedding-file ingestion.
//!
//! The generator is a semi-Markov chain: a class dwells for a geometric
//! number of frames (per-class mean duration), then the next class is drawn
//! from that class's transition row. Frame embeddings are class prototypes
//! plus isotropic Gaussian noise, rounded to f32 so episodes survive the
//! binary embedding format bit-exactly.
//!
//! The default task interleaves anchor/successor class pairs whose successor
//! prototypes collide across pairs: the successor frames are ambiguous on
//! their own, and resolving them requires the anchor still sitting in the
//! queue. That makes anticipation genuinely history-dependent rather than a
//! function of the current frame.

use crate::error::{AgaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const AGAE_MAGIC: &[u8; 4] = b"AGAE";
pub const AGAE_VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;

/// Generator description for the synthetic anticipation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Total number of classes, including any background class.
    pub n_c: usize,
    /// Row-stochastic class transition matrix, n_c x n_c.
    pub transition: Vec<Vec<f64>>,
    /// Per-class geometric mean dwell duration in frames (>= 1).
    pub dwell: Vec<f64>,
    /// Per-class prototype embeddings, n_c x d_backbone.
    pub prototype: Vec<Vec<f64>>,
    /// Standard deviation of the per-component Gaussian embedding noise.
    pub noise_sigma: f64,
    /// Frames per episode.
    pub t: usize,
    /// Anticipation index: target at frame t is the class at t + t_a.
    pub t_a: usize,
    pub seed: u64,
    /// Initial class distribution; uniform when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

impl TaskSpec {
    pub fn d_backbone(&self) -> usize {
        self.prototype.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(AgaError::invalid("task n_c", "must be at least 1"));
        }
        if self.t == 0 {
            return Err(AgaError::invalid("task t", "must be at least 1"));
        }
        if self.t_a == 0 {
            return Err(AgaError::invalid("task t_a", "must be at least 1"));
        }
        if self.noise_sigma < 0.0 {
            return Err(AgaError::invalid("noise_sigma", "must be nonnegative"));
        }
        if self.transition.len() != self.n_c {
            return Err(AgaError::invalid(
                "transition",
                format!("expected {} rows, got {}", self.n_c, self.transition.len()),
            ));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != self.n_c {
                return Err(AgaError::invalid(
                    "transition",
                    format!("row {i} has {} entries, expected {}", row.len(), self.n_c),
                ));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(AgaError::invalid("transition", format!("row {i} has negative mass")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(AgaError::invalid(
                    "transition",
                    format!("row {i} sums to {s}, not 1"),
                ));
            }
        }
        if self.dwell.len() != self.n_c || self.dwell.iter().any(|&d| d < 1.0) {
            return Err(AgaError::invalid("dwell", "one entry >= 1 required per class"));
        }
        if self.prototype.len() != self.n_c {
            return Err(AgaError::invalid("prototype", "one row required per class"));
        }
        let d = self.d_backbone();
        if d == 0 || self.prototype.iter().any(|r| r.len() != d) {
            return Err(AgaError::invalid("prototype", "rows must share a positive width"));
        }
        if let Some(init) = &self.initial {
            if init.len() != self.n_c {
                return Err(AgaError::invalid("initial", "length must equal n_c"));
            }
            let s: f64 = init.iter().sum();
            if (s - 1.0).abs() > 1e-9 || init.iter().any(|&p| p < 0.0) {
                return Err(AgaError::invalid("initial", "must be a distribution"));
            }
        }
        Ok(())
    }

    fn paired_task(
        seed: u64,
        dwell_action: f64,
        dwell_background: f64,
        succ_to_bg: f64,
        succ_to_next: f64,
    ) -> Self {
        let n_pairs = 6;
        let n_c = 2 * n_pairs + 1;
        let background = n_c - 1;
        let d_backbone = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);

        let draw_proto = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d_backbone)
                .map(|_| (rng.gen_range(-1.0..=1.0) as f32) as f64)
                .collect()
        };
        let mut prototype = vec![vec![0.0; d_backbone]; n_c];
        for anchor in 0..n_pairs {
            prototype[anchor] = draw_proto(&mut rng);
        }
        let shared_successor = draw_proto(&mut rng);
        for pair in 0..n_pairs {
            prototype[n_pairs + pair] = shared_successor.clone();
        }
        prototype[background] = draw_proto(&mut rng);

        let mut transition = vec![vec![0.0; n_c]; n_c];
        for anchor in 0..n_pairs {
            transition[anchor][n_pairs + anchor] = 1.0;
        }
        let stray = (1.0 - succ_to_bg - succ_to_next) / (n_pairs - 1) as f64;
        for pair in 0..n_pairs {
            let row = &mut transition[n_pairs + pair];
            row[background] = succ_to_bg;
            let next = (pair + 1) % n_pairs;
            row[next] = succ_to_next;
            for other in 0..n_pairs {
                if other != next {
                    row[other] += stray;
                }
            }
        }
        for anchor in 0..n_pairs {
            transition[background][anchor] = 1.0 / n_pairs as f64;
        }

        let mut dwell = vec![dwell_action; n_c];
        dwell[background] = dwell_background;

        let mut initial = vec![0.0; n_c];
        initial[background] = 1.0;

        TaskSpec {
            n_c,
            transition,
            dwell,
            prototype,
            noise_sigma: 0.5,
            t: 30,
            t_a: 1,
            seed,
            initial: Some(initial),
        }
    }

    /// Default desk-scale task: 6 anchor/successor pairs plus a background
    /// class (index 12). Anchors have distinct prototypes; all successors
    /// share one prototype, so telling them apart requires queue history.
    pub fn desk_default(seed: u64) -> Self {
        Self::paired_task(seed, 4.0, 3.0, 0.20, 0.70)
    }

    /// Variant with short dwells: several stale anchor segments share the
    /// queue at any time, so attending to the right one requires a
    /// context-conditioned query rather than a fixed key preference.
    pub fn history_stress(seed: u64) -> Self {
        Self::paired_task(seed, 2.0, 2.0, 0.30, 0.50)
    }

    /// Task with distinct prototypes and spread transition rows: every frame
    /// retained in the queue supports several plausible futures, which gives
    /// counterfactual descent room to promote alternatives.
    pub fn counterfactual_rich(seed: u64) -> Self {
        let n_actions = 12;
        let n_c = n_actions + 1;
        let background = n_actions;
        let d_backbone = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c6f_ac75);

        let prototype: Vec<Vec<f64>> = (0..n_c)
            .map(|_| {
                (0..d_backbone)
                    .map(|_| (rng.gen_range(-1.0..=1.0) as f32) as f64)
                    .collect()
            })
            .collect();

        let mut transition = vec![vec![0.0; n_c]; n_c];
        for x in 0..n_actions {
            let row = &mut transition[x];
            row[background] = 0.15;
            for (offset, p) in [(1usize, 0.35), (3, 0.20), (5, 0.20), (7, 0.10)] {
                row[(x + offset) % n_actions] += p;
            }
        }
        for a in 0..n_actions {
            transition[background][a] = 1.0 / n_actions as f64;
        }

        let mut dwell = vec![3.0; n_c];
        dwell[background] = 2.0;

        let mut initial = vec![0.0; n_c];
        initial[background] = 1.0;

        TaskSpec {
            n_c,
            transition,
            dwell,
            prototype,
            noise_sigma: 0.5,
            t: 30,
            t_a: 1,
            seed,
            initial: Some(initial),
        }
    }

    /// Background class index of the built-in task layouts.
    pub fn desk_background_class() -> usize {
        12
    }
}

/// Generated action sequence with per-frame embeddings and anticipation
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEpisode {
    pub actions: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub targets: Vec<Option<usize>>,
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_geometric(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let p = 1.0 / mean;
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = 1.0 - rng.gen::<f64>();
    let len = 1.0 + (u.ln() / (1.0 - p).ln()).floor();
    (len as usize).clamp(1, 1_000_000)
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate one episode, bit-reproducible per (spec.seed, episode_seed).
pub fn generate_episode(spec: &TaskSpec, episode_seed: u64) -> Result<SyntheticEpisode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(episode_seed);

    let uniform = vec![1.0 / spec.n_c as f64; spec.n_c];
    let initial = spec.initial.as_deref().unwrap_or(&uniform);
    let mut actions = Vec::with_capacity(spec.t);
    let mut current = sample_categorical(&mut rng, initial);
    while actions.len() < spec.t {
        let dwell_len = sample_geometric(&mut rng, spec.dwell[current]);
        for _ in 0..dwell_len {
            if actions.len() == spec.t {
                break;
            }
            actions.push(current);
        }
        if actions.len() < spec.t {
            current = sample_categorical(&mut rng, &spec.transition[current]);
        }
    }

    let d = spec.d_backbone();
    let mut embeddings = Vec::with_capacity(spec.t);
    for &c in &actions {
        let row: Vec<f64> = (0..d)
            .map(|j| {
                let noise = spec.noise_sigma * sample_standard_normal(&mut rng);
                ((spec.prototype[c][j] + noise) as f32) as f64
            })
            .collect();
        embeddings.push(row);
    }

    let targets = (0..spec.t)
        .map(|t| {
            let idx = t + spec.t_a;
            if idx < spec.t {
                Some(actions[idx])
            } else {
                None
            }
        })
        .collect();

    Ok(SyntheticEpisode {
        actions,
        embeddings,
        targets,
    })
}

pub fn generate_dataset(spec: &TaskSpec, n_episodes: usize, first_episode_seed: u64) -> Result<Vec<SyntheticEpisode>> {
    (0..n_episodes)
        .map(|i| generate_episode(spec, first_episode_seed + i as u64))
        .collect()
}

// ── Training dataset view ───────────────────────────────────────────────

/// One episode as the trainer and evaluator consume it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEpisode {
    /// Backbone features, one row per frame.
    pub features: Vec<Vec<f64>>,
    /// Per-frame class labels where known.
    pub labels: Vec<Option<usize>>,
    /// Anticipation targets: `labels[t + t_a]`.
    pub targets: Vec<Option<usize>>,
}

impl TrainEpisode {
    pub fn from_labels(features: Vec<Vec<f64>>, labels: Vec<Option<usize>>, t_a: usize) -> Self {
        let t = features.len();
        let targets = (0..t)
            .map(|i| labels.get(i + t_a).copied().flatten())
            .collect();
        TrainEpisode {
            features,
            labels,
            targets,
        }
    }

    pub fn from_synthetic(ep: &SyntheticEpisode) -> Self {
        TrainEpisode {
            features: ep.embeddings.clone(),
            labels: ep.actions.iter().map(|&a| Some(a)).collect(),
            targets: ep.targets.clone(),
        }
    }
}

/// Count supervised targets per class.
pub fn class_frequencies(episodes: &[TrainEpisode], n_c: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_c];
    for ep in episodes {
        for target in ep.targets.iter().flatten() {
            if *target < n_c {
                counts[*target] += 1;
            }
        }
    }
    counts
}

/// Inverted-frequency class weights: `mean(nonzero counts) / count_c`, zero
/// for classes that never appear (they are excluded from supervision).
pub fn inverted_weights(counts: &[usize]) -> Vec<f64> {
    let nonzero: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    if nonzero.is_empty() {
        return vec![0.0; counts.len()];
    }
    let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
    counts
        .iter()
        .map(|&c| if c > 0 { mean / c as f64 } else { 0.0 })
        .collect()
}

// ── Embedding file format ───────────────────────────────────────────────

/// One episode as stored in an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub embeddings: Vec<Vec<f64>>,
    /// Per-frame class labels; -1 means unlabeled.
    pub labels: Option<Vec<i32>>,
}

/// Parsed embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub d_backbone: usize,
    pub episodes: Vec<EpisodeRecord>,
}

impl EmbeddingFile {
    pub fn from_synthetic(episodes: &[SyntheticEpisode], d_backbone: usize) -> Self {
        EmbeddingFile {
            d_backbone,
            episodes: episodes
                .iter()
                .map(|ep| EpisodeRecord {
                    embeddings: ep.embeddings.clone(),
                    labels: Some(ep.actions.iter().map(|&a| a as i32).collect()),
                })
                .collect(),
        }
    }

    pub fn into_train_episodes(&self, t_a: usize) -> Vec<TrainEpisode> {
        self.episodes
            .iter()
            .map(|ep| {
                let labels: Vec<Option<usize>> = match &ep.labels {
                    Some(ls) => ls
                        .iter()
                        .map(|&l| if l < 0 { None } else { Some(l as usize) })
                        .collect(),
                    None => vec![None; ep.embeddings.len()],
                };
                TrainEpisode::from_labels(ep.embeddings.clone(), labels, t_a)
            })
            .collect()
    }

    /// Serialize to the binary layout: magic, version, episode count,
    /// feature width, flags, then per episode the frame count, f32 features
    /// row-major, and (when present) i32 labels. All little-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let labeled = self.episodes.iter().all(|ep| ep.labels.is_some());
        let any_labeled = self.episodes.iter().any(|ep| ep.labels.is_some());
        if any_labeled && !labeled {
            return Err(AgaError::invalid(
                "embedding file",
                "either all episodes carry labels or none do",
            ));
        }
        let mut out = Vec::new();
        out.extend_from_slice(AGAE_MAGIC);
        out.extend_from_slice(&AGAE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.episodes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_backbone as u32).to_le_bytes());
        let flags: u32 = if labeled { FLAG_LABELS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for ep in &self.episodes {
            let t = ep.embeddings.len();
            out.extend_from_slice(&(t as u32).to_le_bytes());
            for row in &ep.embeddings {
                if row.len() != self.d_backbone {
                    return Err(AgaError::shape(
                        "embedding row",
                        &[row.len()],
                        &[self.d_backbone],
                    ));
                }
                for &v in row {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            if let Some(labels) = &ep.labels {
                if labels.len() != t {
                    return Err(AgaError::shape("labels", &[labels.len()], &[t]));
                }
                for &l in labels {
                    out.extend_from_slice(&l.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != AGAE_MAGIC {
            return Err(AgaError::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"AGAE\""),
            });
        }
        let version = r.read_u32("version")?;
        if version != AGAE_VERSION {
            return Err(AgaError::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let n_episodes = r.read_u32("episode count")? as usize;
        let d_backbone = r.read_u32("d_backbone")? as usize;
        if d_backbone == 0 {
            return Err(AgaError::Format {
                offset: 12,
                msg: "d_backbone must be positive".into(),
            });
        }
        let flags = r.read_u32("flags")?;
        let labeled = flags & FLAG_LABELS != 0;
        let mut episodes = Vec::with_capacity(n_episodes);
        for _ in 0..n_episodes {
            let t = r.read_u32("frame count")? as usize;
            let mut embeddings = Vec::with_capacity(t);
            for _ in 0..t {
                let row: Vec<f64> = (0..d_backbone)
                    .map(|_| r.read_f32("feature").map(|v| v as f64))
                    .collect::<Result<_>>()?;
                embeddings.push(row);
            }
            let labels = if labeled {
                Some(
                    (0..t)
                        .map(|_| r.read_i32("label"))
                        .collect::<Result<Vec<i32>>>()?,
                )
            } else {
                None
            };
            episodes.push(EpisodeRecord { embeddings, labels });
        }
        if !r.at_end() {
            return Err(AgaError::Format {
                offset: r.pos() as u64,
                msg: format!("{} trailing bytes after last episode", bytes.len() - r.pos()),
            });
        }
        Ok(EmbeddingFile {
            d_backbone,
            episodes,
        })
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn pos(&self) -> usize {
        self.pos
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AgaError::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn read_i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn read_f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_spec(noise: f64) -> TaskSpec {
        TaskSpec {
            n_c: 2,
            transition: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            dwell: vec![2.0, 3.0],
            prototype: vec![vec![1.0, 0.0, -1.0], vec![0.0, 2.0, 0.5]],
            noise_sigma: noise,
            t: 12,
            t_a: 1,
            seed: 5,
            initial: None,
        }
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let spec = two_class_spec(0.0);
        let ep = generate_episode(&spec, 0).unwrap();
        for (t, &c) in ep.actions.iter().enumerate() {
            assert_eq!(ep.embeddings[t], spec.prototype[c]);
        }
    }

    #[test]
    fn absorbing_chain_stays_constant() {
        let mut spec = two_class_spec(0.0);
        spec.transition = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let ep = generate_episode(&spec, 3).unwrap();
        let first = ep.actions[0];
        assert!(ep.actions.iter().all(|&a| a == first));
    }

    #[test]
    fn generation_is_deterministic_per_seed_pair() {
        let spec = two_class_spec(0.4);
        let a = generate_episode(&spec, 9).unwrap();
        let b = generate_episode(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(&spec, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn targets_are_shifted_actions() {
        let spec = two_class_spec(0.1);
        let ep = generate_episode(&spec, 1).unwrap();
        for t in 0..spec.t {
            match ep.targets[t] {
                Some(target) => assert_eq!(target, ep.actions[t + spec.t_a]),
                None => assert!(t + spec.t_a >= spec.t),
            }
        }
    }

    #[test]
    fn non_stochastic_row_is_rejected() {
        let mut spec = two_class_spec(0.0);
        spec.transition[0] = vec![0.5, 0.3];
        assert!(matches!(
            generate_episode(&spec, 0),
            Err(AgaError::InvalidParameter { .. })
        ));
    }

    #[test]
    fn inverted_weights_example() {
        let w = inverted_weights(&[2, 1, 1]);
        let expect = [2.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn inverted_weights_uniform_and_zero_cases() {
        assert_eq!(inverted_weights(&[7, 7, 7]), vec![1.0, 1.0, 1.0]);
        let w = inverted_weights(&[3, 0, 3]);
        assert_eq!(w[1], 0.0);
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_file_round_trips_bit_exactly() {
        let spec = two_class_spec(0.7);
        let eps = generate_dataset(&spec, 4, 0).unwrap();
        let file = EmbeddingFile::from_synthetic(&eps, spec.d_backbone());
        let bytes = file.encode().unwrap();
        let back = EmbeddingFile::decode(&bytes).unwrap();
        assert_eq!(file, back);
        assert_eq!(back.encode().unwrap(), bytes);
        // loaded values match the generated ones exactly (f32-rounded source)
        for (ep, rec) in eps.iter().zip(&back.episodes) {
            assert_eq!(ep.embeddings, rec.embeddings);
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let spec = two_class_spec(0.2);
        let eps = generate_dataset(&spec, 2, 0).unwrap();
        let bytes = EmbeddingFile::from_synthetic(&eps, spec.d_backbone())
            .encode()
            .unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match EmbeddingFile::decode(cut) {
            Err(AgaError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = EmbeddingFile::decode(b"NOPE").unwrap_err();
        assert!(matches!(err, AgaError::Format { offset: 0, .. }));
    }

    #[test]
    fn desk_default_is_valid_and_aliased() {
        let spec = TaskSpec::desk_default(1);
        spec.validate().unwrap();
        assert_eq!(spec.n_c, 13);
        // successors share a prototype, anchors do not
        assert_eq!(spec.prototype[6], spec.prototype[11]);
        assert_ne!(spec.prototype[0], spec.prototype[1]);
    }

    #[test]
    fn train_episode_targets_follow_labels() {
        let feats = vec![vec![0.0]; 5];
        let labels = vec![Some(0), Some(1), None, Some(2), Some(0)];
        let ep = TrainEpisode::from_labels(feats, labels, 2);
        assert_eq!(ep.targets, vec![None, Some(2), Some(0), None, None]);
    }
}
