//! Spike datasets: latency encoding, synthetic classification tasks, IDX
//! ingestion and the line-oriented event file format.
//!
//! Event file layout (UTF-8, LF):
//!
//! ```text
//! #channels=<n> #T=<steps> #samples=<m>
//! label <c>
//! <t> <channel>
//! ...
//!
//! ```
//!
//! Each sample ends with a blank line; times are integer bins sorted
//! non-decreasingly within a sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

/// One labelled spike train. `events` holds `(t, channel)` pairs sorted by
/// time, then channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeSequence {
    pub steps: usize,
    pub channels: usize,
    pub events: Vec<(u32, u32)>,
    pub label: usize,
}

impl SpikeSequence {
    pub fn new(steps: usize, channels: usize, mut events: Vec<(u32, u32)>, label: usize) -> Result<Self> {
        events.sort_unstable();
        let seq = SpikeSequence { steps, channels, events, label };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.events.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Format(format!("duplicate event {:?}", w[0])));
            }
        }
        for &(t, c) in &self.events {
            if t as usize >= self.steps || c as usize >= self.channels {
                return Err(Error::Format(format!(
                    "event ({t}, {c}) outside {} steps × {} channels",
                    self.steps, self.channels
                )));
            }
        }
        Ok(())
    }

    /// Binary `steps × channels` matrix.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.steps, self.channels);
        for &(t, c) in &self.events {
            m.set(t as usize, c as usize, 1.0);
        }
        m
    }

    pub fn from_dense(m: &Matrix, label: usize) -> Result<Self> {
        let mut events = Vec::new();
        for t in 0..m.rows() {
            for (c, &v) in m.row(t).iter().enumerate() {
                if v != 0.0 {
                    events.push((t as u32, c as u32));
                }
            }
        }
        SpikeSequence::new(m.rows(), m.cols(), events, label)
    }

    /// Number of events per channel.
    pub fn channel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.channels];
        for &(_, c) in &self.events {
            counts[c as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub steps: usize,
    pub channels: usize,
    pub samples: Vec<SpikeSequence>,
}

impl Dataset {
    pub fn empty(steps: usize, channels: usize) -> Self {
        Dataset { steps, channels, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn stats(&self) -> Result<DatasetStats> {
        DatasetStats::compute(self)
    }

    /// Split into the first `n` samples and the rest.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        let rest = self.samples.split_off(n);
        let tail = Dataset { steps: self.steps, channels: self.channels, samples: rest };
        (self, tail)
    }
}

/// Mean and population variance of the binary input over every
/// `(t, channel, sample)` entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub mean_z: f64,
    pub var_z: f64,
}

impl DatasetStats {
    pub fn compute(data: &Dataset) -> Result<Self> {
        let cells = data.samples.len() * data.steps * data.channels;
        if cells == 0 {
            return Err(Error::Domain("statistics of an empty dataset".into()));
        }
        let events: usize = data.samples.iter().map(|s| s.events.len()).sum();
        let mean = events as f64 / cells as f64;
        // entries are 0/1, so E[z²] = E[z]
        Ok(DatasetStats { mean_z: mean, var_z: mean - mean * mean })
    }
}

/// Spike time `τ·ln(x/(x − ϑ))` for `x > ϑ`, none otherwise. `x` is clipped to
/// `[0, 1]`.
pub fn latency_encode(x: f64, theta: f64, tau: f64) -> Option<f64> {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x > theta).then(|| tau * (x / (x - theta)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyParams {
    pub theta: f64,
    pub tau: f64,
    pub steps: usize,
    pub dt: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams { theta: 0.2, tau: 50.0, steps: 50, dt: 1.0 }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Parameter(format!("latency threshold must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.tau > 0.0 && self.dt > 0.0) || self.steps == 0 {
            return Err(Error::Parameter("latency time constants must be positive".into()));
        }
        Ok(())
    }
}

/// Encode pixel intensities as one spike per channel at bin `⌊T(x)/dt⌋`.
/// Returns the sequence and the number of pixels clipped into `[0, 1]`.
pub fn encode_image(pixels: &[f64], label: usize, p: &LatencyParams) -> Result<(SpikeSequence, usize)> {
    p.validate()?;
    let mut clipped = 0;
    let mut events = Vec::new();
    for (c, &x) in pixels.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) {
            clipped += 1;
        }
        if let Some(t) = latency_encode(x, p.theta, p.tau) {
            let bin = (t / p.dt).floor();
            if bin < p.steps as f64 {
                events.push((bin as u32, c as u32));
            }
        }
    }
    Ok((SpikeSequence::new(p.steps, pixels.len(), events, label)?, clipped))
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Read an unsigned-byte IDX file: returns the dimensions and the raw bytes.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic >> 8 != 0x08 {
        return Err(Error::Format(format!("{}: not an unsigned-byte IDX file", path.display())));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32_be(&bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    if bytes.len() - offset.min(bytes.len()) != expected {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header implies {expected}",
            path.display(),
            bytes.len().saturating_sub(offset)
        )));
    }
    Ok((dims, bytes[offset..].to_vec()))
}

/// Latency-encode an IDX image/label pair, using `n` samples drawn uniformly
/// without replacement (all when `n` is `None`).
pub fn load_sl_mnist(images: &Path, labels: &Path, n: Option<usize>, p: &LatencyParams, rng: &mut Rng) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images)?;
    let (ldims, labs) = read_idx(labels)?;
    if idims.len() < 2 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Format("IDX image and label files do not match".into()));
    }
    let per: usize = idims[1..].iter().product();
    let mut order: Vec<usize> = (0..idims[0]).collect();
    rng.shuffle(&mut order);
    order.truncate(n.unwrap_or(order.len()).min(order.len()));
    let mut data = Dataset::empty(p.steps, per);
    for i in order {
        let img: Vec<f64> = pixels[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0).collect();
        data.samples.push(encode_image(&img, labs[i] as usize, p)?.0);
    }
    Ok(data)
}

/// Synthetic classification task: each class has a rate template over
/// `steps × channels`, built from `segments` time windows in which a random
/// subset of channels fires at `rate_on` and the rest at `rate_off`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub steps: usize,
    pub segments: usize,
    pub active_fraction: f64,
    pub rate_on: f64,
    pub rate_off: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            channels: 40,
            steps: 50,
            segments: 5,
            active_fraction: 0.25,
            rate_on: 0.2,
            rate_off: 0.02,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.channels == 0 || self.steps == 0 || self.segments == 0 || self.segments > self.steps {
            return Err(Error::Parameter(format!("invalid synthetic task sizes {self:?}")));
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.rate_on) || !rate_ok(self.rate_off) || !rate_ok(self.active_fraction) {
            return Err(Error::Parameter("rates and fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-class Bernoulli rate templates (`steps × channels` each).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub templates: Vec<Matrix>,
}

impl SynthTask {
    pub fn generate(spec: &SynthSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let active = ((spec.active_fraction * spec.channels as f64).round() as usize).min(spec.channels);
        let mut templates = Vec::with_capacity(spec.classes);
        for _ in 0..spec.classes {
            let mut m = Matrix::zeros(spec.steps, spec.channels);
            m.fill(spec.rate_off);
            for seg in 0..spec.segments {
                let t0 = seg * spec.steps / spec.segments;
                let t1 = (seg + 1) * spec.steps / spec.segments;
                let mut chans: Vec<usize> = (0..spec.channels).collect();
                rng.shuffle(&mut chans);
                for &c in &chans[..active] {
                    for t in t0..t1 {
                        m.set(t, c, spec.rate_on);
                    }
                }
            }
            templates.push(m);
        }
        Ok(SynthTask { templates })
    }

    pub fn from_templates(templates: Vec<Matrix>) -> Result<Self> {
        let first = templates
            .first()
            .ok_or_else(|| Error::Parameter("at least one template required".into()))?
            .shape();
        if templates.iter().any(|t| t.shape() != first) {
            return Err(Error::Shape("templates must share one shape".into()));
        }
        if templates.iter().any(|t| t.as_slice().iter().any(|r| !(0.0..=1.0).contains(r))) {
            return Err(Error::Parameter("template rates must lie in [0, 1]".into()));
        }
        Ok(SynthTask { templates })
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    pub fn mean_rate(&self) -> f64 {
        self.templates.iter().map(|t| crate::numkit::mean(t.as_slice())).sum::<f64>() / self.classes() as f64
    }

    pub fn sample(&self, label: usize, rng: &mut Rng) -> Result<SpikeSequence> {
        let t = &self.templates[label];
        let mut events = Vec::new();
        for step in 0..t.rows() {
            for (c, &r) in t.row(step).iter().enumerate() {
                if rng.bernoulli(r) {
                    events.push((step as u32, c as u32));
                }
            }
        }
        SpikeSequence::new(t.rows(), t.cols(), events, label)
    }

    /// `n` samples with balanced, shuffled labels.
    pub fn dataset(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes()).collect();
        rng.shuffle(&mut labels);
        let (steps, channels) = self.templates[0].shape();
        let samples = labels.into_iter().map(|l| self.sample(l, rng)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { steps, channels, samples })
    }

    /// Log-likelihood of a sequence under each class template.
    pub fn log_likelihoods(&self, seq: &SpikeSequence) -> Vec<f64> {
        let dense = seq.to_dense();
        self.templates
            .iter()
            .map(|t| {
                t.as_slice()
                    .iter()
                    .zip(dense.as_slice())
                    .map(|(&r, &z)| {
                        let p = if z != 0.0 { r } else { 1.0 - r };
                        if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }
                    })
                    .sum()
            })
            .collect()
    }

    /// Monte-Carlo estimate of the Bayes-optimal accuracy under equal priors:
    /// the mean of the largest class posterior over `n` fresh samples.
    pub fn bayes_accuracy(&self, n: usize, rng: &mut Rng) -> Result<f64> {
        if n == 0 {
            return Err(Error::Parameter("need at least one sample".into()));
        }
        let mut total = 0.0;
        for i in 0..n {
            let seq = self.sample(i % self.classes(), rng)?;
            let ll = self.log_likelihoods(&seq);
            let top = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = ll.iter().map(|l| (l - top).exp()).sum();
            total += 1.0 / norm;
        }
        Ok(total / n as f64)
    }
}

/// Write a dataset in the event file format.
pub fn write_events<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "#channels={} #T={} #samples={}", data.channels, data.steps, data.samples.len())?;
    for s in &data.samples {
        writeln!(w, "label {}", s.label)?;
        for &(t, c) in &s.events {
            writeln!(w, "{t} {c}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events_file(data: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_events(data, f)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn header_field(token: &str, key: &str, line: usize) -> Result<usize> {
    token
        .strip_prefix(key)
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(line, format!("expected '{key}=<n>', got '{token}'")))
}

/// Streaming reader yielding one sample at a time.
pub struct EventReader<R: BufRead> {
    lines: std::io::Lines<R>,
    line_no: usize,
    pub channels: usize,
    pub steps: usize,
    pub declared: usize,
    read: usize,
}

impl<R: BufRead> EventReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "missing header"))??;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(1, "header must be '#channels=<n> #T=<steps> #samples=<m>'"));
        }
        Ok(EventReader {
            channels: header_field(tokens[0], "#channels", 1)?,
            steps: header_field(tokens[1], "#T", 1)?,
            declared: header_field(tokens[2], "#samples", 1)?,
            lines,
            line_no: 1,
            read: 0,
        })
    }

    fn next_line(&mut self) -> Option<Result<String>> {
        self.line_no += 1;
        self.lines.next().map(|r| r.map_err(Error::from))
    }

    fn read_sample(&mut self) -> Result<Option<SpikeSequence>> {
        let label_line = loop {
            match self.next_line() {
                None => return Ok(None),
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
            }
        };
        let label = label_line
            .strip_prefix("label ")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| parse_err(self.line_no, format!("expected 'label <c>', got '{label_line}'")))?;
        let mut events = Vec::new();
        let mut last_t = 0u32;
        loop {
            let line = match self.next_line() {
                None => break,
                Some(l) => l?,
            };
            if line.trim().is_empty() {
                break;
            }
            let mut parts = line.split_whitespace();
            let (t, c) = match (parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(c), None) => (t.parse::<u32>(), c.parse::<u32>()),
                _ => return Err(parse_err(self.line_no, format!("expected '<t> <channel>', got '{line}'"))),
            };
            let (t, c) = match (t, c) {
                (Ok(t), Ok(c)) => (t, c),
                _ => return Err(parse_err(self.line_no, format!("non-integer event '{line}'"))),
            };
            if t < last_t {
                return Err(Error::Format(format!("line {}: time {t} after {last_t}", self.line_no)));
            }
            if c as usize >= self.channels {
                return Err(Error::Format(format!(
                    "line {}: channel {c} exceeds header channel count {}",
                    self.line_no, self.channels
                )));
            }
            if t as usize >= self.steps {
                return Err(Error::Format(format!("line {}: time {t} exceeds #T={}", self.line_no, self.steps)));
            }
            last_t = t;
            events.push((t, c));
        }
        self.read += 1;
        SpikeSequence::new(self.steps, self.channels, events, label).map(Some)
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<SpikeSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.read_sample() {
            Ok(Some(s)) => Some(Ok(s)),
            Ok(None) => {
                if self.read != self.declared {
                    let msg = format!("header declares {} samples, found {}", self.declared, self.read);
                    self.read = self.declared;
                    Some(Err(Error::Format(msg)))
                } else {
                    None
                }
            }
            Err(e) => Some(Err(e)),
        }
    }
}

pub fn read_events<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut r = EventReader::new(reader)?;
    let (steps, channels) = (r.steps, r.channels);
    let samples = r.by_ref().collect::<Result<Vec<_>>>()?;
    Ok(Dataset { steps, channels, samples })
}

pub fn read_events_file(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_events(BufReader::new(f))
}
