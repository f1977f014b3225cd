//! Synthetic workload traces: Poisson arrivals, configurable length
//! distributions, a decoding-algorithm mix, and JSON-lines trace files.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::types::{DecodingConfig, DecodingKind, TokenId};

/// One client request: when it arrives, how long its prompt and output are,
/// and how it decodes. `output_len` is authoritative; generation
/// force-stops there.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub arrival_time: f64,
    pub prompt_len: usize,
    pub output_len: usize,
    pub decoding: DecodingConfig,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// How one length (prompt or output) is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LengthSpec {
    Fixed { value: usize },
    Uniform { lo: usize, hi: usize },
    /// Log-normal over the underlying normal with the given parameters.
    LogNormal { mu: f64, sigma: f64 },
    /// Weighted bins, uniform within a bin.
    Histogram { bins: Vec<HistogramBin> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub weight: f64,
}

impl LengthSpec {
    /// Log-normal spec whose mean is exactly `mean` for the given sigma.
    pub fn log_normal_with_mean(mean: f64, sigma: f64) -> Self {
        LengthSpec::LogNormal {
            mu: mean.ln() - sigma * sigma / 2.0,
            sigma,
        }
    }

    fn draw(&self, rng: &mut SplitMix64) -> usize {
        match self {
            LengthSpec::Fixed { value } => *value,
            LengthSpec::Uniform { lo, hi } => {
                assert!(hi >= lo);
                *lo + rng.next_below((hi - lo + 1) as u64) as usize
            }
            LengthSpec::LogNormal { mu, sigma } => {
                let x = (mu + sigma * rng.next_normal()).exp();
                x.round().max(1.0) as usize
            }
            LengthSpec::Histogram { bins } => {
                let total: f64 = bins.iter().map(|b| b.weight).sum();
                let mut u = rng.next_f64() * total;
                for b in bins {
                    u -= b.weight;
                    if u < 0.0 {
                        return b.lo + rng.next_below((b.hi - b.lo + 1) as u64) as usize;
                    }
                }
                bins.last().map_or(1, |b| b.hi)
            }
        }
    }
}

/// Independent draws for prompt and output lengths, clipped to the model
/// window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub prompt: LengthSpec,
    pub output: LengthSpec,
}

/// Share of requests per decoding algorithm. Weights need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingMix {
    pub greedy_weight: f64,
    pub sample_weight: f64,
    pub beam_weight: f64,
    pub sample_n: usize,
    pub temperature: f64,
    pub beam_k: usize,
}

impl Default for DecodingMix {
    fn default() -> Self {
        Self {
            greedy_weight: 1.0,
            sample_weight: 0.0,
            beam_weight: 0.0,
            sample_n: 2,
            temperature: 0.8,
            beam_k: 2,
        }
    }
}

impl DecodingMix {
    pub fn greedy_only() -> Self {
        Self::default()
    }

    fn pick(&self, rng: &mut SplitMix64, max_new_tokens: usize) -> DecodingConfig {
        let total = self.greedy_weight + self.sample_weight + self.beam_weight;
        assert!(total > 0.0, "decoding mix needs positive weight");
        let u = rng.next_f64() * total;
        let kind = if u < self.greedy_weight {
            DecodingKind::Greedy
        } else if u < self.greedy_weight + self.sample_weight {
            DecodingKind::Sample {
                n: self.sample_n,
                temperature: self.temperature,
            }
        } else {
            DecodingKind::Beam { k: self.beam_k }
        };
        DecodingConfig {
            kind,
            max_new_tokens,
            eos_token: TokenId(0),
        }
    }
}

/// Named workload shapes. The long profile has 8.4x the mean prompt length
/// and 5.8x the mean output length of the short profile, with higher
/// variance, mirroring the spread between chat-style and instruction-style
/// request logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Short,
    Long,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "short" => Ok(Profile::Short),
            "long" => Ok(Profile::Long),
            other => Err(format!("unknown profile '{other}' (expected short|long)")),
        }
    }

    pub fn distribution(self) -> LengthDistribution {
        match self {
            Profile::Short => LengthDistribution {
                prompt: LengthSpec::log_normal_with_mean(20.0, 0.6),
                output: LengthSpec::log_normal_with_mean(55.0, 0.6),
            },
            Profile::Long => LengthDistribution {
                prompt: LengthSpec::log_normal_with_mean(168.0, 0.9),
                output: LengthSpec::log_normal_with_mean(319.0, 0.9),
            },
        }
    }

    pub fn mean_prompt(self) -> f64 {
        match self {
            Profile::Short => 20.0,
            Profile::Long => 168.0,
        }
    }
}

/// Everything the generator needs.
#[derive(Debug, Clone)]
pub struct TraceGenConfig {
    pub rate: f64,
    pub duration: f64,
    pub dist: LengthDistribution,
    pub mix: DecodingMix,
    pub max_seq_len: usize,
    pub seed: u64,
}

/// Draw a trace: inter-arrival gaps are iid Exponential(rate); lengths and
/// decoding kinds come from the seeded stream. Pure in its arguments.
pub fn generate_trace(cfg: &TraceGenConfig) -> Vec<TraceRecord> {
    assert!(cfg.rate > 0.0, "rate must be positive");
    assert!(cfg.max_seq_len >= 4, "window too small for any request");
    let mut rng = SplitMix64::new(cfg.seed);
    let mut records = Vec::new();
    let mut t = 0.0;
    loop {
        t += rng.next_exponential(cfg.rate);
        if t > cfg.duration {
            break;
        }
        let prompt_len = cfg
            .dist
            .prompt
            .draw(&mut rng)
            .clamp(1, cfg.max_seq_len - 2);
        let output_len = cfg
            .dist
            .output
            .draw(&mut rng)
            .clamp(1, cfg.max_seq_len - prompt_len);
        let decoding = cfg.mix.pick(&mut rng, output_len);
        let seed = rng.next_u64();
        records.push(TraceRecord {
            arrival_time: t,
            prompt_len,
            output_len,
            decoding,
            seed,
        });
    }
    records
}

#[derive(Serialize, Deserialize)]
struct DecodingJson {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    max_new_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    arrival_time: f64,
    prompt_len: usize,
    output_len: usize,
    decoding: DecodingJson,
    seed: u64,
}

fn to_json(r: &TraceRecord) -> RecordJson {
    let (kind, n, k, temperature) = match r.decoding.kind {
        DecodingKind::Greedy => ("greedy", None, None, None),
        DecodingKind::Sample { n, temperature } => ("sample", Some(n), None, Some(temperature)),
        DecodingKind::Beam { k } => ("beam", None, Some(k), None),
    };
    RecordJson {
        arrival_time: r.arrival_time,
        prompt_len: r.prompt_len,
        output_len: r.output_len,
        decoding: DecodingJson {
            kind: kind.to_string(),
            n,
            k,
            temperature,
            max_new_tokens: r.decoding.max_new_tokens,
        },
        seed: r.seed,
    }
}

fn from_json(j: RecordJson, line: usize) -> Result<TraceRecord, TraceError> {
    let bad = |message: String| TraceError::Malformed { line, message };
    let kind = match j.decoding.kind.as_str() {
        "greedy" => DecodingKind::Greedy,
        "sample" => DecodingKind::Sample {
            n: j.decoding.n.ok_or_else(|| bad("sample needs 'n'".into()))?,
            temperature: j
                .decoding
                .temperature
                .ok_or_else(|| bad("sample needs 'temperature'".into()))?,
        },
        "beam" => DecodingKind::Beam {
            k: j.decoding.k.ok_or_else(|| bad("beam needs 'k'".into()))?,
        },
        other => return Err(bad(format!("unknown decoding kind '{other}'"))),
    };
    Ok(TraceRecord {
        arrival_time: j.arrival_time,
        prompt_len: j.prompt_len,
        output_len: j.output_len,
        decoding: DecodingConfig {
            kind,
            max_new_tokens: j.decoding.max_new_tokens,
            eos_token: TokenId(0),
        },
        seed: j.seed,
    })
}

/// Write one JSON object per line.
pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<(), TraceError> {
    let mut f = File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, &to_json(r))
            .map_err(|e| TraceError::Malformed { line: 0, message: e.to_string() })?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Read and validate a JSON-lines trace. Violations report the 1-based
/// line number.
pub fn read_trace(path: &Path, max_seq_len: usize) -> Result<Vec<TraceRecord>, TraceError> {
    let f = File::open(path)?;
    let reader = BufReader::new(f);
    let mut records = Vec::new();
    let mut prev_arrival = f64::NEG_INFINITY;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: RecordJson = serde_json::from_str(&text).map_err(|e| {
            TraceError::Malformed { line: line_no, message: e.to_string() }
        })?;
        let record = from_json(parsed, line_no)?;
        let bad = |message: String| TraceError::Malformed { line: line_no, message };
        if record.prompt_len < 1 {
            return Err(bad("prompt_len must be >= 1".into()));
        }
        if record.output_len < 1 {
            return Err(bad("output_len must be >= 1".into()));
        }
        if record.prompt_len + record.output_len > max_seq_len {
            return Err(bad(format!(
                "prompt_len + output_len = {} exceeds max_seq_len {}",
                record.prompt_len + record.output_len,
                max_seq_len
            )));
        }
        if record.arrival_time < prev_arrival {
            return Err(bad("arrival times must be nondecreasing".into()));
        }
        prev_arrival = record.arrival_time;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_cfg(rate: f64, duration: f64, seed: u64) -> TraceGenConfig {
        TraceGenConfig {
            rate,
            duration,
            dist: Profile::Short.distribution(),
            mix: DecodingMix::greedy_only(),
            max_seq_len: 2048,
            seed,
        }
    }

    #[test]
    fn poisson_count_matches_mean_within_three_sigma() {
        let records = generate_trace(&gen_cfg(2.0, 600.0, 42));
        let n = records.len() as f64;
        let mean = 1200.0_f64;
        let sigma = mean.sqrt();
        assert!((n - mean).abs() <= 3.0 * sigma, "count {n}");
    }

    #[test]
    fn fixed_distribution_is_constant() {
        let cfg = TraceGenConfig {
            dist: LengthDistribution {
                prompt: LengthSpec::Fixed { value: 7 },
                output: LengthSpec::Fixed { value: 10 },
            },
            ..gen_cfg(5.0, 20.0, 1)
        };
        for r in generate_trace(&cfg) {
            assert_eq!((r.prompt_len, r.output_len), (7, 10));
        }
    }

    #[test]
    fn long_profile_prompts_are_8_4x_short_profile() {
        let short = generate_trace(&TraceGenConfig {
            dist: Profile::Short.distribution(),
            ..gen_cfg(4.0, 2000.0, 9)
        });
        let long = generate_trace(&TraceGenConfig {
            dist: Profile::Long.distribution(),
            ..gen_cfg(4.0, 2000.0, 9)
        });
        let mean = |rs: &[TraceRecord], f: fn(&TraceRecord) -> usize| {
            rs.iter().map(f).sum::<usize>() as f64 / rs.len() as f64
        };
        let prompt_ratio = mean(&long, |r| r.prompt_len) / mean(&short, |r| r.prompt_len);
        assert!((prompt_ratio - 8.4).abs() / 8.4 < 0.15, "prompt ratio {prompt_ratio}");
        let output_ratio = mean(&long, |r| r.output_len) / mean(&short, |r| r.output_len);
        assert!((output_ratio - 5.8).abs() / 5.8 < 0.15, "output ratio {output_ratio}");
    }

    #[test]
    fn histogram_lengths_stay_in_their_bins() {
        let bins = vec![
            HistogramBin { lo: 2, hi: 4, weight: 1.0 },
            HistogramBin { lo: 50, hi: 60, weight: 3.0 },
        ];
        let cfg = TraceGenConfig {
            dist: LengthDistribution {
                prompt: LengthSpec::Histogram { bins: bins.clone() },
                output: LengthSpec::Fixed { value: 5 },
            },
            ..gen_cfg(20.0, 100.0, 13)
        };
        let records = generate_trace(&cfg);
        assert!(records.len() > 500);
        let mut high = 0usize;
        for r in &records {
            let in_low = (2..=4).contains(&r.prompt_len);
            let in_high = (50..=60).contains(&r.prompt_len);
            assert!(in_low || in_high, "prompt {} outside bins", r.prompt_len);
            if in_high {
                high += 1;
            }
        }
        // 3:1 weighting puts roughly three quarters of draws in the
        // high bin.
        let frac = high as f64 / records.len() as f64;
        assert!((frac - 0.75).abs() < 0.1, "high-bin fraction {frac}");
    }

    #[test]
    fn generation_is_pure_in_the_seed() {
        let a = generate_trace(&gen_cfg(3.0, 100.0, 7));
        let b = generate_trace(&gen_cfg(3.0, 100.0, 7));
        assert_eq!(a, b);
        let c = generate_trace(&gen_cfg(3.0, 100.0, 8));
        assert_ne!(a, c);
    }

    #[test]
    fn gap_mean_converges_to_inverse_rate() {
        let records = generate_trace(&gen_cfg(20.0, 600.0, 3));
        assert!(records.len() >= 10_000);
        let mut prev = 0.0;
        let mut total = 0.0;
        for r in &records {
            total += r.arrival_time - prev;
            prev = r.arrival_time;
        }
        let mean_gap = total / records.len() as f64;
        assert!((mean_gap - 0.05).abs() / 0.05 < 0.05, "mean gap {mean_gap}");
    }

    #[test]
    fn pair_sum_respects_the_model_window() {
        let cfg = TraceGenConfig {
            dist: LengthDistribution {
                prompt: LengthSpec::Uniform { lo: 1000, hi: 2000 },
                output: LengthSpec::Uniform { lo: 500, hi: 2000 },
            },
            ..gen_cfg(5.0, 50.0, 4)
        };
        for r in generate_trace(&cfg) {
            assert!(r.prompt_len + r.output_len <= 2048);
        }
    }

    #[test]
    fn trace_round_trips_through_file() {
        let dir = std::env::temp_dir().join("pagedkv_trace_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.jsonl");
        let cfg = TraceGenConfig {
            mix: DecodingMix {
                greedy_weight: 1.0,
                sample_weight: 1.0,
                beam_weight: 1.0,
                ..DecodingMix::default()
            },
            ..gen_cfg(5.0, 30.0, 11)
        };
        let records = generate_trace(&cfg);
        write_trace(&records, &path).unwrap();
        let back = read_trace(&path, 2048).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn empty_file_reads_as_empty_trace() {
        let dir = std::env::temp_dir().join("pagedkv_trace_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_trace(&path, 2048).unwrap().is_empty());
    }

    #[test]
    fn pair_sum_violation_rejected_with_line_number() {
        let dir = std::env::temp_dir().join("pagedkv_trace_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        let good = r#"{"arrival_time":0.5,"prompt_len":7,"output_len":10,"decoding":{"kind":"greedy","max_new_tokens":10},"seed":1}"#;
        let bad = r#"{"arrival_time":1.0,"prompt_len":2000,"output_len":100,"decoding":{"kind":"greedy","max_new_tokens":100},"seed":2}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = read_trace(&path, 2048).unwrap_err();
        match err {
            TraceError::Malformed { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("max_seq_len"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
