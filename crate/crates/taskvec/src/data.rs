//! Deterministic generators for two labeled signal domains.
//!
//! Domain `S` ("speech-like"): four constant-frequency segments whose
//! frequencies come from a 10-symbol codebook. Each of the 10 pattern
//! families uses a distinct symbol set, and one of 20 speaker profiles
//! shapes the amplitude envelope. Tasks: `seq-class` (10) and
//! `speaker-id` (20).
//!
//! Domain `M` ("music-like"): a fundamental from a 12-tone set plus its
//! second and third harmonics, with harmonic amplitude ratios from one of
//! 20 timbre profiles. Tasks: `pitch-class` (12) and `timbre-id` (20).
//!
//! Domain `A`: unlabeled white-noise bursts, used only as extra
//! distillation data.
//!
//! Generation is a pure function of (domain, split, index, seed): the same
//! tuple always yields the same signal, bit for bit. Labels follow a
//! round-robin schedule, so any prefix of a split is class-balanced
//! within ±1.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::checkpoint::{Kind, ParameterSet};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const SIGNAL_LEN: usize = 2000;
pub const NOISE_SIGMA: f32 = 0.05;

const SEGMENTS: usize = 4;
const SEGMENT_LEN: usize = SIGNAL_LEN / SEGMENTS;
const CODEBOOK: usize = 10;
const SPEAKERS: usize = 20;
const TONES: usize = 12;
const TIMBRES: usize = 20;
const ENVELOPE_NODES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Domain {
    S,
    M,
    A,
}

impl Domain {
    pub fn tasks(self) -> &'static [Task] {
        match self {
            Domain::S => &[Task::SeqClass, Task::SpeakerId],
            Domain::M => &[Task::PitchClass, Task::TimbreId],
            Domain::A => &[],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::S => "S",
            Domain::M => "M",
            Domain::A => "A",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Domain::S),
            "M" | "m" => Ok(Domain::M),
            "A" | "a" => Ok(Domain::A),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    SeqClass,
    SpeakerId,
    PitchClass,
    TimbreId,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::SeqClass => CODEBOOK,
            Task::SpeakerId => SPEAKERS,
            Task::PitchClass => TONES,
            Task::TimbreId => TIMBRES,
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Task::SeqClass | Task::SpeakerId => Domain::S,
            Task::PitchClass | Task::TimbreId => Domain::M,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::SeqClass => "seq-class",
            Task::SpeakerId => "speaker-id",
            Task::PitchClass => "pitch-class",
            Task::TimbreId => "timbre-id",
        }
    }

    pub fn all() -> [Task; 4] {
        [Task::SeqClass, Task::SpeakerId, Task::PitchClass, Task::TimbreId]
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq-class" => Ok(Task::SeqClass),
            "speaker-id" => Ok(Task::SpeakerId),
            "pitch-class" => Ok(Task::PitchClass),
            "timbre-id" => Ok(Task::TimbreId),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub signal: Tensor,
    pub domain: Domain,
    pub labels: BTreeMap<Task, usize>,
}

// ── fixed profile tables ─────────────────────────────────────────────

fn frac(x: f64) -> f32 {
    (x - x.floor()) as f32
}

/// Codebook frequency for symbol k, in cycles per sample.
fn symbol_freq(k: usize) -> f32 {
    0.02 + 0.022 * k as f32
}

/// The four codebook symbols of pattern family `f`. Offsets {0,1,2,4} have
/// no rotational symmetry mod 10, so every family has a distinct symbol set.
fn family_symbols(f: usize) -> [usize; SEGMENTS] {
    [f % 10, (f + 1) % 10, (f + 2) % 10, (f + 4) % 10]
}

/// Envelope node j for speaker s, spread via golden-ratio hashing.
fn speaker_node(s: usize, j: usize) -> f32 {
    0.45 + 0.45 * frac(0.618_033_988_749_895 * (s * ENVELOPE_NODES + j + 3) as f64)
}

/// Fundamental frequency of tone k (12-tone geometric spacing).
fn tone_freq(k: usize) -> f32 {
    0.02 * (2.0f32).powf(k as f32 / 12.0)
}

/// Harmonic amplitude ratios (a1, a2, a3) for timbre t, normalized so the
/// amplitudes sum to 0.85.
fn timbre_ratios(t: usize) -> [f32; 3] {
    let a1 = 1.0;
    let a2 = 0.2 + 0.75 * frac(0.618_033_988_749_895 * (t + 1) as f64);
    let a3 = 0.2 + 0.75 * frac(0.381_966_011_250_105 * (t + 1) as f64 + 0.55);
    let total = a1 + a2 + a3;
    [0.85 * a1 / total, 0.85 * a2 / total, 0.85 * a3 / total]
}

/// Piecewise-linear interpolation over envelope nodes.
fn envelope_at(nodes: &[f32], t: usize, len: usize) -> f32 {
    let pos = t as f32 / (len - 1) as f32 * (nodes.len() - 1) as f32;
    let i = (pos as usize).min(nodes.len() - 2);
    let frac = pos - i as f32;
    nodes[i] * (1.0 - frac) + nodes[i + 1] * frac
}

// ── generation ───────────────────────────────────────────────────────

/// The `index`-th example of a split. Pure in all arguments.
pub fn example(domain: Domain, split: Split, index: usize, seed: u64) -> Example {
    let mut rng = Stream::derive(seed, &format!("data/{domain}/{split}/{index}"));
    let mut signal = vec![0.0f32; SIGNAL_LEN];
    let mut labels = BTreeMap::new();

    match domain {
        Domain::S => {
            let family = index % CODEBOOK;
            let speaker = (index / CODEBOOK) % SPEAKERS;
            labels.insert(Task::SeqClass, family);
            labels.insert(Task::SpeakerId, speaker);

            let nodes: Vec<f32> = (0..ENVELOPE_NODES).map(|j| speaker_node(speaker, j)).collect();
            let symbols = family_symbols(family);
            for (seg, &sym) in symbols.iter().enumerate() {
                let freq = symbol_freq(sym);
                let phase = rng.uniform(0.0, std::f32::consts::TAU);
                for t in 0..SEGMENT_LEN {
                    let idx = seg * SEGMENT_LEN + t;
                    let env = envelope_at(&nodes, idx, SIGNAL_LEN);
                    signal[idx] =
                        env * (std::f32::consts::TAU * freq * t as f32 + phase).sin();
                }
            }
        }
        Domain::M => {
            let pitch = index % TONES;
            let timbre = (index / TONES) % TIMBRES;
            labels.insert(Task::PitchClass, pitch);
            labels.insert(Task::TimbreId, timbre);

            let f0 = tone_freq(pitch);
            let ratios = timbre_ratios(timbre);
            let phases: Vec<f32> = (0..3).map(|_| rng.uniform(0.0, std::f32::consts::TAU)).collect();
            for (t, s) in signal.iter_mut().enumerate() {
                let mut v = 0.0f32;
                for (h, (&a, &ph)) in ratios.iter().zip(&phases).enumerate() {
                    v += a * (std::f32::consts::TAU * f0 * (h + 1) as f32 * t as f32 + ph).sin();
                }
                *s = v;
            }
        }
        Domain::A => {
            let bursts = 4 + rng.below(4);
            for _ in 0..bursts {
                let len = 100 + rng.below(200);
                let start = rng.below(SIGNAL_LEN.saturating_sub(len));
                for t in start..start + len {
                    signal[t] += 0.5 * (2.0 * rng.uniform01() - 1.0);
                }
            }
        }
    }

    for s in &mut signal {
        *s = (*s + NOISE_SIGMA * rng.normal()).clamp(-1.0, 1.0);
    }

    Example {
        signal: Tensor::new(vec![SIGNAL_LEN], signal).expect("signal shape"),
        domain,
        labels,
    }
}

/// Deterministic stream of `n` examples from one domain.
pub fn generate(domain: Domain, split: Split, n: usize, seed: u64) -> Vec<Example> {
    (0..n).map(|i| example(domain, split, i, seed)).collect()
}

/// One (domain, weight) term of a distillation data mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    pub domain: Domain,
    pub weight: f64,
}

/// Parse a mixture string such as `"S:1.0"` or `"S:0.5,M:0.5"`.
pub fn parse_mixture(s: &str) -> Result<Vec<MixSpec>> {
    let mut specs = Vec::new();
    for part in s.split(',') {
        let (d, w) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad mixture term {part:?}, want DOMAIN:WEIGHT")))?;
        let domain: Domain = d.trim().parse()?;
        let weight: f64 = w
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad mixture weight {w:?}")))?;
        specs.push(MixSpec { domain, weight });
    }
    validate_mixture(&specs)?;
    Ok(specs)
}

fn validate_mixture(specs: &[MixSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("empty mixture".into()));
    }
    if specs.iter().any(|s| s.weight <= 0.0) {
        return Err(Error::Config("mixture weights must be positive".into()));
    }
    let total: f64 = specs.iter().map(|s| s.weight).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Interleave domains by largest remainder: after any prefix of length p,
/// each domain has contributed `weight*p` examples, rounded within ±1.
pub fn mixture(specs: &[MixSpec], split: Split, n: usize, seed: u64) -> Result<Vec<Example>> {
    validate_mixture(specs)?;
    let mut emitted = vec![0usize; specs.len()];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pick = specs
            .iter()
            .enumerate()
            .map(|(j, s)| (s.weight * (i + 1) as f64 - emitted[j] as f64, j))
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)))
            .map(|(_, j)| j)
            .expect("non-empty specs");
        out.push(example(specs[pick].domain, split, emitted[pick], seed));
        emitted[pick] += 1;
    }
    Ok(out)
}

// ── dataset container export ─────────────────────────────────────────

/// Pack a generated set into the checkpoint container (signals as one
/// `[n, len]` tensor, labels as per-task f32 class-index vectors).
pub fn dataset_to_params(examples: &[Example], meta_note: &str) -> Result<ParameterSet> {
    if examples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let domain = examples[0].domain;
    let mut signals = Vec::with_capacity(examples.len() * SIGNAL_LEN);
    for ex in examples {
        signals.extend_from_slice(ex.signal.data());
    }
    let mut ps = ParameterSet::new(Kind::Teacher);
    ps.insert(
        "signals",
        Tensor::new(vec![examples.len(), SIGNAL_LEN], signals)?,
    )?;
    for task in domain.tasks() {
        let labels: Vec<f32> = examples.iter().map(|e| e.labels[task] as f32).collect();
        ps.insert(format!("labels.{task}"), Tensor::from_vec(labels))?;
    }
    ps.meta.extra.insert("dataset".into(), meta_note.to_string());
    ps.meta.extra.insert("domain".into(), domain.to_string());
    Ok(ps)
}

pub fn dataset_from_params(ps: &ParameterSet) -> Result<Vec<Example>> {
    let domain: Domain = ps
        .meta
        .extra
        .get("domain")
        .ok_or_else(|| Error::InvalidMetadata("dataset missing domain".into()))?
        .parse()?;
    let signals = ps
        .get("signals")
        .ok_or_else(|| Error::InvalidMetadata("dataset missing signals".into()))?;
    let n = signals.shape()[0];
    let len = signals.shape()[1];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut labels = BTreeMap::new();
        for task in domain.tasks() {
            let lt = ps
                .get(&format!("labels.{task}"))
                .ok_or_else(|| Error::InvalidMetadata(format!("dataset missing labels.{task}")))?;
            labels.insert(*task, lt.data()[i] as usize);
        }
        out.push(Example {
            signal: Tensor::new(vec![len], signals.data()[i * len..(i + 1) * len].to_vec())?,
            domain,
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(Domain::S, Split::Train, 8, 7);
        let b = generate(Domain::S, Split::Train, 8, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.signal.data(), y.signal.data());
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn splits_differ() {
        let a = example(Domain::S, Split::Train, 0, 7);
        let b = example(Domain::S, Split::Dev, 0, 7);
        assert_ne!(a.signal.data(), b.signal.data());
    }

    #[test]
    fn labels_match_domain_tasks() {
        let s = example(Domain::S, Split::Train, 3, 1);
        assert_eq!(s.labels.len(), 2);
        assert!(s.labels.contains_key(&Task::SeqClass));
        assert!(s.labels.contains_key(&Task::SpeakerId));
        let a = example(Domain::A, Split::Train, 3, 1);
        assert!(a.labels.is_empty());
    }

    #[test]
    fn pitch_labels_balanced_over_1200() {
        let examples = generate(Domain::M, Split::Train, 1200, 3);
        let mut counts = [0usize; 12];
        for e in &examples {
            counts[e.labels[&Task::PitchClass]] += 1;
        }
        for &c in &counts {
            assert!((99..=101).contains(&c), "count {c}");
        }
    }

    #[test]
    fn signals_stay_in_unit_range() {
        for domain in [Domain::S, Domain::M, Domain::A] {
            for ex in generate(domain, Split::Test, 16, 11) {
                assert!(ex.signal.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn music_spectrum_peaks_at_harmonics() {
        // DFT oracle: magnitudes near f0, 2f0, 3f0 dominate the background
        let ex = example(Domain::M, Split::Train, 5, 13);
        let pitch = ex.labels[&Task::PitchClass];
        let f0 = tone_freq(pitch);
        let x = ex.signal.data();
        let n = x.len();
        let mag = |bin: f64| -> f64 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * bin * t as f64 / n as f64;
                re += v as f64 * ang.cos();
                im += v as f64 * ang.sin();
            }
            (re * re + im * im).sqrt()
        };
        // median background over off-harmonic bins
        let mut background: Vec<f64> = (0..40)
            .map(|i| mag(300.0 + 7.3 * i as f64))
            .collect();
        background.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = background[background.len() / 2];
        for h in 1..=3 {
            let bin = f0 as f64 * (h as f64) * n as f64;
            let peak = (-1..=1)
                .map(|d| mag(bin + d as f64))
                .fold(0.0f64, f64::max);
            assert!(
                peak > 5.0 * median.max(1e-9),
                "harmonic {h}: peak {peak:.1} vs background {median:.1}"
            );
        }
    }

    #[test]
    fn family_symbol_sets_are_distinct() {
        let sets: Vec<Vec<usize>> = (0..10)
            .map(|f| {
                let mut s = family_symbols(f).to_vec();
                s.sort_unstable();
                s
            })
            .collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(sets[i], sets[j], "families {i} and {j} collide");
            }
        }
    }

    #[test]
    fn single_domain_mixture_equals_generate() {
        let specs = [MixSpec { domain: Domain::S, weight: 1.0 }];
        let mixed = mixture(&specs, Split::Train, 12, 5).unwrap();
        let plain = generate(Domain::S, Split::Train, 12, 5);
        for (a, b) in mixed.iter().zip(&plain) {
            assert_eq!(a.signal.data(), b.signal.data());
        }
    }

    #[test]
    fn even_mixture_is_balanced() {
        let specs = [
            MixSpec { domain: Domain::S, weight: 0.5 },
            MixSpec { domain: Domain::M, weight: 0.5 },
        ];
        let mixed = mixture(&specs, Split::Train, 1000, 5).unwrap();
        let s_count = mixed.iter().filter(|e| e.domain == Domain::S).count();
        assert!((499..=501).contains(&s_count), "s_count {s_count}");
    }

    #[test]
    fn three_way_mixture_includes_noise_domain() {
        let specs = parse_mixture("M:0.3,S:0.4,A:0.3").unwrap();
        let mixed = mixture(&specs, Split::Train, 100, 5).unwrap();
        assert!(mixed.iter().any(|e| e.domain == Domain::A));
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        assert!(parse_mixture("S:0.5,M:0.6").is_err());
        assert!(parse_mixture("S:-1.0,M:2.0").is_err());
        assert!(parse_mixture("").is_err());
    }

    #[test]
    fn dataset_container_roundtrip() {
        let examples = generate(Domain::M, Split::Dev, 24, 9);
        let ps = dataset_to_params(&examples, "test").unwrap();
        let back = dataset_from_params(&ps).unwrap();
        assert_eq!(examples.len(), back.len());
        for (a, b) in examples.iter().zip(&back) {
            assert_eq!(a.signal.data(), b.signal.data());
            assert_eq!(a.labels, b.labels);
        }
    }
}
