//! Annotation tags, dataset manifests, speaker-wise splits and a synthetic
//! stutter-like audio generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{load_wav, write_wav, Fbank, FeatureMatrix, Waveform, SAMPLE_RATE};

/// The five disfluency types, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    #[serde(rename = "/p")]
    Prolongation,
    #[serde(rename = "/b")]
    Block,
    #[serde(rename = "/r")]
    SoundRepetition,
    #[serde(rename = "[]")]
    WordRepetition,
    #[serde(rename = "/i")]
    Interjection,
}

impl Tag {
    pub const ALL: [Tag; 5] = [
        Tag::Prolongation,
        Tag::Block,
        Tag::SoundRepetition,
        Tag::WordRepetition,
        Tag::Interjection,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn marker(self) -> &'static str {
        match self {
            Tag::Prolongation => "/p",
            Tag::Block => "/b",
            Tag::SoundRepetition => "/r",
            Tag::WordRepetition => "[]",
            Tag::Interjection => "/i",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.marker())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "/p" | "p" | "prolongation" => Ok(Tag::Prolongation),
            "/b" | "b" | "block" => Ok(Tag::Block),
            "/r" | "r" | "sound-repetition" | "sound_repetition" => Ok(Tag::SoundRepetition),
            "[]" | "wr" | "word-repetition" | "word_repetition" => Ok(Tag::WordRepetition),
            "/i" | "i" | "interjection" => Ok(Tag::Interjection),
            other => Err(Error::Config(format!("unknown tag '{other}'"))),
        }
    }
}

/// Clip-level presence of each disfluency type, indexed by [`Tag::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelVector(pub [bool; 5]);

impl LabelVector {
    pub fn get(&self, tag: Tag) -> bool {
        self.0[tag.index()]
    }

    pub fn set(&mut self, tag: Tag, value: bool) {
        self.0[tag.index()] = value;
    }

    pub fn from_bits(bits: [u8; 5]) -> Self {
        Self(bits.map(|b| b != 0))
    }

    pub fn bits(&self) -> [u8; 5] {
        self.0.map(u8::from)
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }
}

/// Result of scanning a tagged transcript.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TagScan {
    pub labels: LabelVector,
    /// Slash tags with an unrecognised letter.
    pub unknown_tags: usize,
}

/// Scans for `/p`, `/b`, `/r`, `/i` and bracketed `[...]` repetition spans.
///
/// A slash followed by one ASCII letter is a tag. A `[` that has a matching
/// `]` later in the text marks word repetition, whether or not it encloses
/// text; tags inside brackets still count.
pub fn scan_annotation_tags(transcript: &str) -> TagScan {
    let mut scan = TagScan::default();
    let chars: Vec<char> = transcript.chars().collect();
    let mut open_brackets = 0usize;
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '/' => {
                let Some(&next) = chars.get(i + 1) else { continue };
                if !next.is_ascii_alphabetic() {
                    continue;
                }
                match next.to_ascii_lowercase() {
                    'p' => scan.labels.set(Tag::Prolongation, true),
                    'b' => scan.labels.set(Tag::Block, true),
                    'r' => scan.labels.set(Tag::SoundRepetition, true),
                    'i' => scan.labels.set(Tag::Interjection, true),
                    _ => scan.unknown_tags += 1,
                }
            }
            '[' => open_brackets += 1,
            ']' if open_brackets > 0 => {
                open_brackets -= 1;
                scan.labels.set(Tag::WordRepetition, true);
            }
            _ => {}
        }
    }
    scan
}

pub fn parse_annotation_tags(transcript: &str) -> LabelVector {
    scan_annotation_tags(transcript).labels
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub transcript: Option<String>,
    pub labels: LabelVector,
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    audio: String,
    speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub warnings: Vec<String>,
}

/// Reads a line-delimited JSON manifest. Relative audio paths resolve
/// against the manifest's directory; audio existence is not checked here.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut manifest = Manifest::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse(format!("{}:{lineno}: {msg}", path.display()));
        let raw: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let scan = raw.transcript.as_deref().map(scan_annotation_tags);
        if let Some(s) = scan.filter(|s| s.unknown_tags > 0) {
            manifest.warnings.push(format!(
                "line {lineno} ({}): {} unknown tag(s) ignored",
                raw.id, s.unknown_tags
            ));
        }
        let labels = match (&raw.labels, scan) {
            (Some(bits), scan) => {
                if bits.len() != 5 || bits.iter().any(|&b| b > 1) {
                    return Err(bad(format!("labels must be five 0/1 values, got {bits:?}")));
                }
                let labels = LabelVector::from_bits([bits[0], bits[1], bits[2], bits[3], bits[4]]);
                if let Some(scan) = scan {
                    if scan.labels != labels {
                        manifest.warnings.push(format!(
                            "line {lineno} ({}): labels {:?} disagree with transcript tags {:?}",
                            raw.id,
                            labels.bits(),
                            scan.labels.bits()
                        ));
                    }
                }
                labels
            }
            (None, Some(scan)) => scan.labels,
            (None, None) => return Err(bad("record has neither labels nor transcript".into())),
        };
        let audio = PathBuf::from(&raw.audio);
        manifest.records.push(ClipRecord {
            id: raw.id,
            audio_path: if audio.is_absolute() { audio } else { base.join(audio) },
            speaker_id: raw.speaker,
            transcript: raw.transcript,
            labels,
            split: raw.split,
        });
    }
    Ok(manifest)
}

/// Writes records as a manifest; audio paths under the manifest's directory
/// are stored relative to it.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ClipRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for r in records {
        let audio = r.audio_path.strip_prefix(base).unwrap_or(&r.audio_path);
        let line = ManifestLine {
            id: r.id.clone(),
            audio: audio.to_string_lossy().into_owned(),
            speaker: r.speaker_id.clone(),
            labels: Some(r.labels.bits().to_vec()),
            transcript: r.transcript.clone(),
            split: r.split,
        };
        serde_json::to_writer(&mut out, &line).expect("manifest lines serialize");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Speaker proportions of the reference train/dev/test partition (43/7/20 of 70).
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.614, 0.10, 0.286];

#[derive(Clone, Debug, Default)]
pub struct SpeakerSplit {
    pub train: Vec<ClipRecord>,
    pub dev: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
}

impl SpeakerSplit {
    pub fn get(&self, split: Split) -> &[ClipRecord] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<&str> {
        self.get(split).iter().map(|r| r.speaker_id.as_str()).collect()
    }
}

/// Speaker counts per split by largest remainder, summing to `n`.
pub fn speaker_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let ideal = fractions.map(|f| f * n as f64);
    let mut counts = ideal.map(|x| x.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assigns whole speakers to train/dev/test. Speakers are shuffled with
/// `seed` and cut at the largest-remainder counts of `fractions`.
pub fn split_by_speaker(records: &[ClipRecord], fractions: [f64; 3], seed: u64) -> Result<SpeakerSplit> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must lie in [0,1] and sum to 1")));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&ClipRecord>> = BTreeMap::new();
    for r in records {
        by_speaker.entry(&r.speaker_id).or_default().push(r);
    }
    if by_speaker.len() < 3 {
        return Err(Error::Config(format!(
            "{} distinct speakers; need at least 3 to split three ways",
            by_speaker.len()
        )));
    }
    let mut speakers: Vec<&str> = by_speaker.keys().copied().collect();
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_dev, _] = speaker_counts(speakers.len(), fractions);
    let mut out = SpeakerSplit::default();
    for (i, spk) in speakers.iter().enumerate() {
        let (split, bucket) = if i < n_train {
            (Split::Train, &mut out.train)
        } else if i < n_train + n_dev {
            (Split::Dev, &mut out.dev)
        } else {
            (Split::Test, &mut out.test)
        };
        bucket.extend(by_speaker[spk].iter().map(|&r| ClipRecord {
            split: Some(split),
            ..r.clone()
        }));
    }
    Ok(out)
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_clips: usize,
    pub clip_seconds: f64,
    /// Per-clip probability of each event, canonical tag order.
    pub event_probs: [f64; 5],
    /// Range of speaker pitch (Hz) for carrier syllables.
    pub base_freq_range: (f64, f64),
    pub num_speakers: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clips: 500,
            clip_seconds: 2.0,
            event_probs: [0.3; 5],
            base_freq_range: (120.0, 320.0),
            num_speakers: 70,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.event_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("event probabilities {:?} outside [0,1]", self.event_probs)));
        }
        if self.clip_seconds < 1.0 {
            return Err(Error::Config(format!("clip duration {} s below 1 s", self.clip_seconds)));
        }
        let (lo, hi) = self.base_freq_range;
        if !(lo > 0.0 && lo <= hi && hi * 3.0 < SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::Config(format!("base frequency range {lo}..{hi} Hz invalid")));
        }
        if self.num_speakers == 0 {
            return Err(Error::Config("need at least one speaker".into()));
        }
        Ok(())
    }
}

/// Minimum silence rendered for a block event.
pub const BLOCK_MIN_SECS: f64 = 0.4;

/// Peak amplitude of the background noise under every clip.
pub const NOISE_FLOOR: f64 = 0.002;

enum Segment {
    Syllable { freq: f64, secs: f64 },
    Silence(f64),
    Filler { center: f64, secs: f64 },
}

struct ClipPlan {
    segments: Vec<Segment>,
    transcript: String,
    labels: LabelVector,
}

const SYLLABLES: [&str; 12] = ["ba", "da", "ka", "ma", "na", "la", "pa", "ta", "wo", "ni", "shi", "yu"];

fn plan_clip(spec: &SynthSpec, speaker_pitch: f64, rng: &mut ChaCha8Rng) -> ClipPlan {
    let mut labels = LabelVector::default();
    for tag in Tag::ALL {
        labels.set(tag, rng.gen::<f64>() < spec.event_probs[tag.index()]);
    }
    let syllable = |rng: &mut ChaCha8Rng| Segment::Syllable {
        freq: speaker_pitch * rng.gen_range(0.8..1.25),
        secs: rng.gen_range(0.12..0.22),
    };
    let gap = |rng: &mut ChaCha8Rng| Segment::Silence(rng.gen_range(0.04..0.09));
    let word = |rng: &mut ChaCha8Rng| SYLLABLES[rng.gen_range(0..SYLLABLES.len())];

    // Each unit is a run of segments plus its transcript tokens.
    let mut events: Vec<(Vec<Segment>, String)> = Vec::new();
    if labels.get(Tag::Prolongation) {
        let Segment::Syllable { freq, secs } = syllable(rng) else { unreachable!() };
        let stretch = rng.gen_range(4.0..5.5);
        events.push((vec![Segment::Syllable { freq, secs: secs * stretch }, gap(rng)], format!("{}/p", word(rng))));
    }
    if labels.get(Tag::Block) {
        events.push((vec![Segment::Silence(rng.gen_range(0.45..0.65))], "/b".into()));
    }
    if labels.get(Tag::SoundRepetition) {
        let freq = speaker_pitch * rng.gen_range(0.8..1.25);
        let w = word(rng);
        let reps = rng.gen_range(2..=4);
        let mut segs = Vec::new();
        let mut text = String::new();
        for _ in 0..reps {
            segs.push(Segment::Syllable { freq, secs: rng.gen_range(0.06..0.09) });
            segs.push(Segment::Silence(rng.gen_range(0.04..0.06)));
            text.push_str(&w[..1]);
            text.push_str("/r ");
        }
        segs.push(Segment::Syllable { freq, secs: rng.gen_range(0.12..0.22) });
        segs.push(gap(rng));
        text.push_str(w);
        events.push((segs, text));
    }
    if labels.get(Tag::WordRepetition) {
        let group: Vec<(f64, f64, &str)> = (0..2)
            .map(|_| (speaker_pitch * rng.gen_range(0.8..1.25), rng.gen_range(0.12..0.22), word(rng)))
            .collect();
        let mut segs = Vec::new();
        for _ in 0..2 {
            for &(freq, secs, _) in &group {
                segs.push(Segment::Syllable { freq, secs });
                segs.push(Segment::Silence(0.05));
            }
            segs.push(Segment::Silence(rng.gen_range(0.12..0.2)));
        }
        let text: Vec<&str> = group.iter().map(|g| g.2).collect();
        events.push((segs, format!("[{}] {}", text.join(" "), text.join(" "))));
    }
    if labels.get(Tag::Interjection) {
        events.push((
            vec![
                Segment::Filler {
                    center: rng.gen_range(1500.0..2500.0),
                    secs: rng.gen_range(0.25..0.4),
                },
                gap(rng),
            ],
            "呃/i".into(),
        ));
    }
    events.shuffle(rng);

    let event_secs: f64 = events.iter().flat_map(|e| &e.0).map(segment_secs).sum();
    let budget = (spec.clip_seconds - event_secs - 0.1).max(0.0);
    let mut carrier: Vec<(Vec<Segment>, String)> = Vec::new();
    let mut used = 0.0;
    // Always at least two carrier syllables so events sit mid-utterance.
    loop {
        let s = syllable(rng);
        let g = gap(rng);
        let secs = segment_secs(&s) + segment_secs(&g);
        if carrier.len() >= 2 && used + secs > budget {
            break;
        }
        used += secs;
        carrier.push((vec![s, g], word(rng).into()));
    }
    // Events go between carrier syllables, never first or last.
    let mut slots: Vec<usize> = (0..events.len()).map(|_| rng.gen_range(1..carrier.len())).collect();
    slots.sort_unstable();
    let mut units: Vec<(Vec<Segment>, String)> = Vec::new();
    let mut events = events.into_iter();
    let mut slot_iter = slots.into_iter().peekable();
    for (i, unit) in carrier.into_iter().enumerate() {
        while slot_iter.peek() == Some(&i) {
            slot_iter.next();
            units.push(events.next().expect("one event per slot"));
        }
        units.push(unit);
    }

    let content: f64 = units.iter().flat_map(|u| &u.0).map(segment_secs).sum();
    let pad = ((spec.clip_seconds - content).max(0.0) / 2.0).max(0.02);
    let mut segments = vec![Segment::Silence(pad)];
    let mut transcript = Vec::new();
    for (segs, text) in units {
        segments.extend(segs);
        transcript.push(text);
    }
    segments.push(Segment::Silence(pad));
    ClipPlan {
        segments,
        transcript: transcript.join(" "),
        labels,
    }
}

fn segment_secs(s: &Segment) -> f64 {
    match *s {
        Segment::Syllable { secs, .. } | Segment::Filler { secs, .. } | Segment::Silence(secs) => secs,
    }
}

fn render(plan: &ClipPlan, amplitude: f64, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let mut samples: Vec<f32> = Vec::new();
    let ramp = (0.01 * sr) as usize;
    for seg in &plan.segments {
        let n = (segment_secs(seg) * sr).round() as usize;
        let envelope = |i: usize| {
            let edge = ramp.min(n / 2).max(1);
            (i.min(n - 1 - i) as f64 / edge as f64).min(1.0)
        };
        match *seg {
            Segment::Silence(_) => samples.extend(std::iter::repeat(0.0).take(n)),
            Segment::Syllable { freq, .. } => {
                let w = 2.0 * std::f64::consts::PI * freq / sr;
                samples.extend((0..n).map(|i| {
                    let t = i as f64;
                    let v = (w * t).sin() + 0.5 * (2.0 * w * t).sin() + 0.25 * (3.0 * w * t).sin();
                    (amplitude * envelope(i) * v / 1.75) as f32
                }));
            }
            Segment::Filler { center, .. } => {
                // A handful of random-phase partials within ±60 Hz.
                let partials: Vec<(f64, f64)> = (0..8)
                    .map(|_| {
                        let f = center + rng.gen_range(-60.0..60.0);
                        (2.0 * std::f64::consts::PI * f / sr, rng.gen_range(0.0..std::f64::consts::TAU))
                    })
                    .collect();
                let gain = 0.25 * amplitude / partials.len() as f64;
                samples.extend((0..n).map(|i| {
                    let v: f64 = partials.iter().map(|(w, ph)| (w * i as f64 + ph).sin()).sum();
                    (gain * envelope(i) * v) as f32
                }));
            }
        }
    }
    for s in &mut samples {
        *s += rng.gen_range(-NOISE_FLOOR..NOISE_FLOOR) as f32;
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Per-clip seed, independent of how many clips are generated.
fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut x = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Renders one synthetic clip without touching the filesystem.
pub fn synth_clip(spec: &SynthSpec, index: usize) -> (Waveform, LabelVector, String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(spec.seed, index));
    let speaker = index % spec.num_speakers;
    let mut spk_rng = ChaCha8Rng::seed_from_u64(clip_seed(spec.seed ^ 0x5EED, speaker));
    let (lo, hi) = spec.base_freq_range;
    let pitch = if hi > lo { spk_rng.gen_range(lo..=hi) } else { lo };
    let amplitude = spk_rng.gen_range(0.3..0.6);
    let plan = plan_clip(spec, pitch, &mut rng);
    let wave = render(&plan, amplitude, &mut rng);
    (wave, plan.labels, plan.transcript, format!("spk{speaker:03}"))
}

/// Writes `num_clips` WAV files under `out_dir/wav/` plus `out_dir/all.jsonl`.
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let records = (0..spec.num_clips)
        .into_par_iter()
        .map(|i| {
            let (wave, labels, transcript, speaker) = synth_clip(spec, i);
            let id = format!("synth{i:05}");
            let audio_path = wav_dir.join(format!("{id}.wav"));
            write_wav(&audio_path, &wave)?;
            Ok(ClipRecord {
                id,
                audio_path,
                speaker_id: speaker,
                transcript: Some(transcript),
                labels,
                split: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(out_dir.join("all.jsonl"), &records)?;
    Ok(records)
}

/// A clip with its features computed, ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub speaker_id: String,
    pub features: FeatureMatrix,
    pub labels: LabelVector,
}

/// Loads audio and computes fbank features for every record, in record
/// order. Errors name the failing clip.
pub fn load_examples(records: &[ClipRecord], fbank: &Fbank) -> Result<Vec<Example>> {
    records
        .par_iter()
        .map(|r| {
            let features = load_wav(&r.audio_path)
                .and_then(|w| fbank.compute(&w))
                .map_err(|e| e.in_clip(&r.id))?;
            Ok(Example {
                id: r.id.clone(),
                speaker_id: r.speaker_id.clone(),
                features,
                labels: r.labels,
            })
        })
        .collect()
}
