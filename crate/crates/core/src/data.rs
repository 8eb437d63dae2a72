//! Procedural image/report corpus.
//!
//! Each sample is drawn from a [`SceneSpec`]: up to six findings, each with a
//! severity (rendered as intensity) and, for some findings, a location
//! (rendered as position). Reports are templated from the scene spec so the labeler
//! inverts them exactly; a seeded injector adds the clutter found in raw
//! dictated reports, and [`clean_report`] strips it again.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio::{read_image, write_image};
use crate::tensor::Tensor;

pub const MAX_FINDINGS: usize = 6;
pub const MIN_RESOLUTION: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Finding {
    BlobLeft,
    BlobRight,
    Ring,
    Bar,
    Gradient,
    Speckle,
}

impl Finding {
    pub const ALL: [Finding; MAX_FINDINGS] = [
        Finding::BlobLeft,
        Finding::BlobRight,
        Finding::Ring,
        Finding::Bar,
        Finding::Gradient,
        Finding::Speckle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Finding::BlobLeft => "blob-left",
            Finding::BlobRight => "blob-right",
            Finding::Ring => "ring",
            Finding::Bar => "bar",
            Finding::Gradient => "gradient",
            Finding::Speckle => "speckle",
        }
    }

    pub fn from_word(w: &str) -> Option<Finding> {
        Finding::ALL.into_iter().find(|f| f.word() == w)
    }

    /// Locations this finding can take; empty when it has a fixed position.
    pub fn locations(self) -> &'static [Location] {
        match self {
            Finding::BlobLeft | Finding::BlobRight | Finding::Bar => &[Location::Upper, Location::Lower],
            Finding::Gradient => &[Location::Left, Location::Right],
            Finding::Ring | Finding::Speckle => &[],
        }
    }

    /// Shape of the finding at unit amplitude, in normalized coordinates
    /// (`u` across, `v` down, both in [0, 1]). Exactly zero off-support.
    fn profile(self, location: Option<Location>, u: f64, v: f64) -> f64 {
        match self {
            Finding::BlobLeft | Finding::BlobRight => {
                let cu = if self == Finding::BlobLeft { 0.22 } else { 0.78 };
                let cv = if location == Some(Location::Lower) { 0.75 } else { 0.25 };
                let r2 = (u - cu).powi(2) + (v - cv).powi(2);
                if r2 < 0.15 * 0.15 {
                    (-r2 / (2.0 * 0.06 * 0.06)).exp()
                } else {
                    0.0
                }
            }
            Finding::Ring => {
                let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                (1.0 - (r - 0.16).abs() / 0.05).max(0.0)
            }
            Finding::Bar => {
                let (lo, hi) = if location == Some(Location::Lower) { (0.84, 0.94) } else { (0.06, 0.16) };
                if (0.35..0.65).contains(&u) && (lo..hi).contains(&v) {
                    1.0
                } else {
                    0.0
                }
            }
            Finding::Gradient => {
                let (lo, hi) = if location == Some(Location::Right) { (0.88, 0.98) } else { (0.02, 0.12) };
                if (lo..hi).contains(&u) && (0.1..0.9).contains(&v) {
                    v
                } else {
                    0.0
                }
            }
            Finding::Speckle => {
                let (du, dv) = (u - 0.375, v - 0.375);
                if (0.0..0.25).contains(&du) && (0.0..0.25).contains(&dv) {
                    let (cu, cv) = ((du * 8.0) as usize, (dv * 8.0) as usize);
                    if (cu + cv) % 2 == 0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn amplitude(self) -> f64 {
        match self {
            Severity::Mild => 0.4,
            Severity::Moderate => 0.7,
            Severity::Severe => 1.0,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }

    pub fn from_word(w: &str) -> Option<Severity> {
        Severity::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Location {
    Upper,
    Lower,
    Left,
    Right,
}

impl Location {
    pub const ALL: [Location; 4] = [Location::Upper, Location::Lower, Location::Left, Location::Right];

    pub fn word(self) -> &'static str {
        match self {
            Location::Upper => "upper",
            Location::Lower => "lower",
            Location::Left => "left",
            Location::Right => "right",
        }
    }

    pub fn from_word(w: &str) -> Option<Location> {
        Location::ALL.into_iter().find(|l| l.word() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FindingState {
    pub severity: Severity,
    pub location: Option<Location>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// One slot per finding in [`Finding::ALL`] order, truncated to K.
    pub findings: Vec<Option<FindingState>>,
    /// Standard deviation of the additive pixel noise.
    pub noise_level: f64,
    /// Absent finding mentioned as a hedged possibility in the report.
    pub hedge: Option<Finding>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn num_findings(&self) -> usize {
        self.findings.len()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.findings.iter().map(Option::is_some).collect()
    }

    pub fn present(&self) -> impl Iterator<Item = (Finding, FindingState)> + '_ {
        self.findings
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (Finding::ALL[i], s)))
    }

    /// Render as a `[res, res, 1]` image. Depends only on the scene spec and `res`.
    pub fn render(&self, res: usize) -> Result<Tensor> {
        if res < MIN_RESOLUTION {
            return Err(Error::Invalid(format!("resolution {res} below minimum {MIN_RESOLUTION}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(res as u64);
        let mut data = Vec::with_capacity(res * res);
        for y in 0..res {
            for x in 0..res {
                let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
                let mut p = background(u, v);
                for (f, s) in self.present() {
                    p += s.severity.amplitude() * f.profile(s.location, u, v);
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(p + self.noise_level * z);
            }
        }
        Tensor::new(vec![res, res, 1], data)
    }

    pub fn clean_report(&self) -> String {
        let mut sentences: Vec<String> = self
            .present()
            .map(|(f, s)| match s.location {
                Some(l) => format!("{} {} {} .", s.severity.word(), f.word(), l.word()),
                None => format!("{} {} .", s.severity.word(), f.word()),
            })
            .collect();
        if sentences.is_empty() {
            sentences.push("no finding .".to_string());
        }
        if let Some(h) = self.hedge {
            sentences.push(format!("possible {} .", h.word()));
        }
        sentences.join(" ")
    }
}

/// Support of a finding: pixels where its rendered contribution is nonzero.
pub fn footprint(finding: Finding, location: Option<Location>, res: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
            out.push(finding.profile(location, u, v) != 0.0);
        }
    }
    out
}

fn background(u: f64, v: f64) -> f64 {
    0.1 + 0.2 * (-((u - 0.5).powi(2) / 0.08 + (v - 0.5).powi(2) / 0.12)).exp()
}

/// Text form used in `specs.txt`: `seed noise hedge slot…` where each slot is
/// `-`, `severity` or `severity/location`.
impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?} {}", self.seed, self.noise_level, self.hedge.map_or("-", Finding::word))?;
        for slot in &self.findings {
            match slot {
                None => write!(f, " -")?,
                Some(FindingState { severity, location: None }) => write!(f, " {}", severity.word())?,
                Some(FindingState { severity, location: Some(l) }) => write!(f, " {}/{}", severity.word(), l.word())?,
            }
        }
        Ok(())
    }
}

impl FromStr for SceneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("malformed scene spec {s:?}"));
        let mut it = s.split_whitespace();
        let seed = it.next().and_then(|w| w.parse().ok()).ok_or_else(bad)?;
        let noise_level = it.next().and_then(|w| w.parse().ok()).ok_or_else(bad)?;
        let hedge = match it.next().ok_or_else(bad)? {
            "-" => None,
            w => Some(Finding::from_word(w).ok_or_else(bad)?),
        };
        let mut findings = Vec::new();
        for w in it {
            findings.push(match w {
                "-" => None,
                w => {
                    let (sev, loc) = match w.split_once('/') {
                        Some((a, b)) => (a, Some(Location::from_word(b).ok_or_else(bad)?)),
                        None => (w, None),
                    };
                    Some(FindingState {
                        severity: Severity::from_word(sev).ok_or_else(bad)?,
                        location: loc,
                    })
                }
            });
        }
        if findings.len() > MAX_FINDINGS {
            return Err(bad());
        }
        Ok(SceneSpec {
            findings,
            noise_level,
            hedge,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub num_findings: usize,
    pub finding_prob: f64,
    pub hedge_prob: f64,
    pub noise_range: (f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_findings: MAX_FINDINGS,
            finding_prob: 0.3,
            hedge_prob: 0.05,
            noise_range: (0.01, 0.03),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_findings == 0 || self.num_findings > MAX_FINDINGS {
            return Err(Error::Config(format!("num_findings must be in 1..={MAX_FINDINGS}")));
        }
        if !(0.0..=1.0).contains(&self.finding_prob) || !(0.0..=1.0).contains(&self.hedge_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Draw the scene spec for sample `index`. Keyed on `(seed, index)` only.
    pub fn draw_spec(&self, seed: u64, index: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let findings: Vec<Option<FindingState>> = Finding::ALL[..self.num_findings]
            .iter()
            .map(|f| {
                let present = rng.random_bool(self.finding_prob);
                let severity = Severity::ALL[rng.random_range(0..3)];
                let locs = f.locations();
                let location = (!locs.is_empty()).then(|| locs[rng.random_range(0..locs.len())]);
                present.then_some(FindingState { severity, location })
            })
            .collect();
        let (lo, hi) = self.noise_range;
        let noise_level = lo + (hi - lo) * rng.random::<f64>();
        let absent: Vec<Finding> = (0..self.num_findings)
            .filter(|&i| findings[i].is_none())
            .map(|i| Finding::ALL[i])
            .collect();
        let hedge_roll = rng.random_bool(self.hedge_prob);
        let hedge_pick = rng.random_range(0..MAX_FINDINGS);
        let hedge = (hedge_roll && !absent.is_empty()).then(|| absent[hedge_pick % absent.len()]);
        SceneSpec {
            findings,
            noise_level,
            hedge,
            seed: rng.next_u64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub spec: SceneSpec,
    pub image: Tensor,
    pub clean_report: String,
    pub noisy_report: String,
    pub labels: Vec<bool>,
}

impl SyntheticSample {
    pub fn from_spec(index: usize, spec: SceneSpec, res: usize) -> Result<Self> {
        let image = spec.render(res)?;
        let clean_report = spec.clean_report();
        let noisy_report = inject_noise(&clean_report, spec.seed);
        let labels = spec.labels();
        Ok(SyntheticSample {
            index,
            spec,
            image,
            clean_report,
            noisy_report,
            labels,
        })
    }
}

pub fn gen_corpus(n: usize, seed: u64, resolution: usize) -> Result<Vec<SyntheticSample>> {
    gen_corpus_with(&CorpusConfig::default(), n, seed, resolution)
}

pub fn gen_corpus_with(cfg: &CorpusConfig, n: usize, seed: u64, resolution: usize) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Invalid("corpus size must be at least 1".into()));
    }
    (0..n)
        .map(|i| SyntheticSample::from_spec(i, cfg.draw_spec(seed, i), resolution))
        .collect()
}

/// Every twentieth sample (index ≡ 19 mod 20) is held out.
pub fn is_test_index(index: usize) -> bool {
    index % 20 == 19
}

pub fn split(samples: &[SyntheticSample]) -> (Vec<&SyntheticSample>, Vec<&SyntheticSample>) {
    samples.iter().partition(|s| !is_test_index(s.index))
}

const FILLERS: &[&str] = &[
    "FINAL REPORT",
    "as discussed with the team",
    "please note",
    "thank you",
    "signed electronically",
    "dictated but not read",
];

/// Add underscores, bracketed metadata lines and filler phrases.
pub fn inject_noise(clean: &str, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500);
    let mut out = String::new();
    if rng.random_bool(0.5) {
        out.push_str(&format!(
            "[ACC {:06} | EXAM 20{:02}-{:02}-{:02}]\n",
            rng.random_range(0..1_000_000),
            rng.random_range(10..30),
            rng.random_range(1..13),
            rng.random_range(1..29)
        ));
    }
    if rng.random_bool(0.5) {
        out.push_str("___ FINAL REPORT\n");
    }
    for (i, word) in clean.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        if rng.random_bool(0.1) {
            out.push_str("___ ");
        }
        out.push_str(word);
        if rng.random_bool(0.05) {
            out.push_str("__");
        }
        if word == "." && rng.random_bool(0.25) {
            out.push(' ');
            out.push_str(FILLERS[1 + rng.random_range(0..FILLERS.len() - 1)]);
        }
    }
    if rng.random_bool(0.3) {
        out.push_str(&format!("\n[SIGNED DR {:04}]", rng.random_range(0..10_000)));
    }
    out
}

/// Rule-based cleaner: drops bracketed metadata lines, underscore runs and
/// filler phrases, then normalizes whitespace. Applied to a fixed point.
pub fn clean_report(noisy: &str) -> String {
    let mut cur = clean_pass(noisy);
    loop {
        let next = clean_pass(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn clean_pass(text: &str) -> String {
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| {
            let t = l.trim();
            !(t.starts_with('[') && t.ends_with(']'))
        })
        .collect();
    let joined = kept.join(" ").replace('_', " ");
    let words: Vec<&str> = joined.split_whitespace().collect();
    let fillers: Vec<Vec<&str>> = FILLERS.iter().map(|f| f.split_whitespace().collect()).collect();
    let mut out: Vec<&str> = Vec::with_capacity(words.len());
    let mut i = 0;
    'scan: while i < words.len() {
        for f in &fillers {
            if words[i..].starts_with(f) {
                i += f.len();
                continue 'scan;
            }
        }
        out.push(words[i]);
        i += 1;
    }
    out.join(" ")
}

/// How hedged mentions ("possible ring") are labeled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum UncertainMode {
    #[default]
    AsNegative,
    AsPositive,
}

/// Template-inverting labeler over the closed report vocabulary.
pub fn extract_labels(report: &str, num_findings: usize, mode: UncertainMode) -> Vec<bool> {
    let mut labels = vec![false; num_findings];
    let spaced = report.replace('.', " . ");
    let words: Vec<&str> = spaced.split_whitespace().collect();
    for sentence in words.split(|w| *w == ".") {
        if sentence.contains(&"no") {
            continue;
        }
        let hedged = sentence.contains(&"possible");
        if hedged && mode == UncertainMode::AsNegative {
            continue;
        }
        for w in sentence {
            if let Some(f) = Finding::from_word(w) {
                if f.index() < num_findings {
                    labels[f.index()] = true;
                }
            }
        }
    }
    labels
}

/// Closed word list of the clean-report language.
pub fn report_words() -> Vec<&'static str> {
    let mut w = vec![".", "no", "finding", "possible"];
    w.extend(Severity::ALL.iter().map(|s| s.word()));
    w.extend(Location::ALL.iter().map(|l| l.word()));
    w.extend(Finding::ALL.iter().map(|f| f.word()));
    w
}

/// Stable hash over specs and resolution; identifies a corpus in manifests.
pub fn corpus_hash(samples: &[SyntheticSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.spec.to_string().as_bytes());
        h.update(b"\n");
        for x in &s.image.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub resolution: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Corpus {
    pub fn generate(cfg: CorpusConfig, n: usize, seed: u64, resolution: usize) -> Result<Self> {
        let samples = gen_corpus_with(&cfg, n, seed, resolution)?;
        Ok(Corpus {
            config: cfg,
            seed,
            resolution,
            samples,
        })
    }

    pub fn train(&self) -> Vec<&SyntheticSample> {
        split(&self.samples).0
    }

    pub fn test(&self) -> Vec<&SyntheticSample> {
        split(&self.samples).1
    }

    pub fn hash(&self) -> String {
        corpus_hash(&self.samples)
    }

    /// Directory layout: `manifest.txt`, `specs.txt`, `labels.txt`,
    /// `reports_clean.txt`, `reports_noisy.txt` (one sample per line, noisy
    /// newlines escaped as `\n`) and `images/NNNNNN.fimg`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let manifest = [
            format!("n={}", self.samples.len()),
            format!("seed={}", self.seed),
            format!("resolution={}", self.resolution),
            format!("num_findings={}", self.config.num_findings),
            format!("finding_prob={:?}", self.config.finding_prob),
            format!("hedge_prob={:?}", self.config.hedge_prob),
            format!("noise_min={:?}", self.config.noise_range.0),
            format!("noise_max={:?}", self.config.noise_range.1),
            format!("hash={}", self.hash()),
        ];
        fs::write(dir.join("manifest.txt"), manifest.join("\n") + "\n")?;
        let lines = |f: &dyn Fn(&SyntheticSample) -> String| -> String {
            self.samples.iter().map(|s| f(s) + "\n").collect()
        };
        fs::write(dir.join("specs.txt"), lines(&|s| format!("{} {}", s.index, s.spec)))?;
        fs::write(
            dir.join("labels.txt"),
            lines(&|s| s.labels.iter().map(|&b| if b { '1' } else { '0' }).collect()),
        )?;
        fs::write(dir.join("reports_clean.txt"), lines(&|s| s.clean_report.clone()))?;
        fs::write(
            dir.join("reports_noisy.txt"),
            lines(&|s| s.noisy_report.replace('\\', "\\\\").replace('\n', "\\n")),
        )?;
        for s in &self.samples {
            write_image(&dir.join("images").join(format!("{:06}.fimg", s.index)), &s.image)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let kv = crate::config::parse_kv(&fs::read_to_string(&mpath)?, &mpath)?;
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format("corpus manifest", &mpath, format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("corpus manifest", &mpath, format!("bad value for {k}")))
        };
        let config = CorpusConfig {
            num_findings: num("num_findings")? as usize,
            finding_prob: num("finding_prob")?,
            hedge_prob: num("hedge_prob")?,
            noise_range: (num("noise_min")?, num("noise_max")?),
        };
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::format("corpus manifest", &mpath, "bad seed"))?;
        let resolution = num("resolution")? as usize;
        let read_lines = |name: &str| -> Result<Vec<String>> {
            Ok(fs::read_to_string(dir.join(name))?.lines().map(str::to_string).collect())
        };
        let specs = read_lines("specs.txt")?;
        let labels = read_lines("labels.txt")?;
        let clean = read_lines("reports_clean.txt")?;
        let noisy = read_lines("reports_noisy.txt")?;
        let n = specs.len();
        if labels.len() != n || clean.len() != n || noisy.len() != n {
            return Err(Error::format("corpus", dir, "line counts differ between files"));
        }
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let (idx, spec) = specs[i]
                .split_once(' ')
                .ok_or_else(|| Error::format("corpus", dir, format!("bad spec line {}", i + 1)))?;
            let index: usize = idx
                .parse()
                .map_err(|_| Error::format("corpus", dir, format!("bad index on line {}", i + 1)))?;
            let spec: SceneSpec = spec.parse()?;
            let image = read_image(&dir.join("images").join(format!("{index:06}.fimg")))?;
            samples.push(SyntheticSample {
                index,
                spec,
                image,
                clean_report: clean[i].clone(),
                noisy_report: unescape(&noisy[i]),
                labels: labels[i].chars().map(|c| c == '1').collect(),
            });
        }
        let corpus = Corpus {
            config,
            seed,
            resolution,
            samples,
        };
        if let Ok(h) = get("hash") {
            if h != corpus.hash() {
                return Err(Error::format("corpus", dir, "content hash does not match manifest"));
            }
        }
        Ok(corpus)
    }
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_round_trip() {
        let cfg = CorpusConfig {
            hedge_prob: 0.5,
            ..CorpusConfig::default()
        };
        for i in 0..50 {
            let s = cfg.draw_spec(3, i);
            assert_eq!(s.to_string().parse::<SceneSpec>().unwrap(), s);
        }
    }

    #[test]
    fn escape_round_trip() {
        let s = "a\\b\nc\\n";
        let esc = s.replace('\\', "\\\\").replace('\n', "\\n");
        assert_eq!(unescape(&esc), s);
    }
}
