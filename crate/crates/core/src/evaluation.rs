//! Agreement metrics, evaluation reports and latency benchmarking.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::audio::{ingest, AudioBuffer, IngestOptions};
use crate::error::{Error, Result};
use crate::features::Stft;
use crate::labels::ManifestEntry;
use crate::model::Model;

fn check_pair(preds: &[f64], targets: &[f64], min: usize) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.len() < min {
        return Err(Error::Degenerate(format!(
            "need at least {min} pairs, got {}",
            preds.len()
        )));
    }
    Ok(())
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets, 1)?;
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Pearson correlation. Constant inputs are an error, not NaN.
pub fn lcc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets, 2)?;
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let (mut spt, mut spp, mut stt) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let (dp, dt) = (p - mp, t - mt);
        spt += dp * dt;
        spp += dp * dp;
        stt += dt * dt;
    }
    if spp == 0.0 {
        return Err(Error::Degenerate("predictions are constant".into()));
    }
    if stt == 0.0 {
        return Err(Error::Degenerate("targets are constant".into()));
    }
    Ok((spt / (spp.sqrt() * stt.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of fractional ranks.
pub fn srcc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets, 2)?;
    lcc(&fractional_ranks(preds), &fractional_ranks(targets))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    /// Seconds per utterance.
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    /// Utterances per second.
    pub throughput: f64,
}

/// Linear interpolation between closest ranks.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl LatencyStats {
    pub fn from_samples(secs: &[f64]) -> Result<Self> {
        if secs.is_empty() {
            return Err(Error::Degenerate("no latency measurements".into()));
        }
        let mut sorted = secs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let total: f64 = secs.iter().sum();
        let mean = total / secs.len() as f64;
        Ok(LatencyStats {
            count: secs.len(),
            mean,
            p50: percentile(&sorted, 0.5),
            p95: percentile(&sorted, 0.95),
            throughput: secs.len() as f64 / total,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub condition: String,
    pub pairs: Vec<Pair>,
    pub mse: f64,
    pub lcc: f64,
    pub srcc: f64,
    pub latency: LatencyStats,
    /// Files that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    /// Metrics over `pairs`; errors if they are empty or constant.
    pub fn new(
        condition: impl Into<String>,
        pairs: Vec<Pair>,
        latency: LatencyStats,
        failures: Vec<(String, String)>,
    ) -> Result<Self> {
        let p: Vec<f64> = pairs.iter().map(|x| x.prediction).collect();
        let t: Vec<f64> = pairs.iter().map(|x| x.target).collect();
        Ok(EvalReport {
            condition: condition.into(),
            mse: mse(&p, &t)?,
            lcc: lcc(&p, &t)?,
            srcc: srcc(&p, &t)?,
            pairs,
            latency,
            failures,
        })
    }

    /// `id,prediction,target` rows.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("id,prediction,target\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(&p.id),
                p.prediction,
                p.target
            ));
        }
        out
    }

    /// Key-value summary followed by the failure list and the scatter data.
    pub fn to_text(&self) -> String {
        let l = &self.latency;
        let mut out = format!(
            "condition = {}\ncount = {}\nfailures = {}\nmse = {}\nlcc = {}\nsrcc = {}\n\
             latency_mean_s = {}\nlatency_p50_s = {}\nlatency_p95_s = {}\nthroughput_per_s = {}\n",
            self.condition,
            self.pairs.len(),
            self.failures.len(),
            self.mse,
            self.lcc,
            self.srcc,
            l.mean,
            l.p50,
            l.p95,
            l.throughput,
        );
        out.push_str("\n[failures]\nid,error\n");
        for (id, err) in &self.failures {
            out.push_str(&format!("{},{}\n", csv_field(id), csv_field(err)));
        }
        out.push_str("\n[scatter]\n");
        out.push_str(&self.scatter_csv());
        out
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Scores every entry, in parallel on up to `threads` workers. Unreadable
/// files are recorded in `failures` and skipped.
pub fn evaluate(
    model: &Model<f32>,
    entries: &[ManifestEntry],
    opts: &IngestOptions,
    condition: &str,
    threads: Option<usize>,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::Config(format!("split `{condition}` is empty")));
    }
    let stft = Stft::new(model.stft)?;
    let results: Vec<std::result::Result<(Pair, f64), (String, String)>> = thread_pool(threads)?
        .install(|| {
            entries
                .par_iter()
                .map(|e| {
                    let id = e.audio_path.display().to_string();
                    let scored = ingest(&e.audio_path, opts).and_then(|buf| {
                        let t0 = Instant::now();
                        let s = model.predict(&buf, &stft)?;
                        Ok((s.utterance as f64, t0.elapsed().as_secs_f64()))
                    });
                    match scored {
                        Ok((prediction, secs)) => Ok((
                            Pair {
                                id,
                                prediction,
                                target: e.target,
                            },
                            secs,
                        )),
                        Err(err) => Err((id, err.to_string())),
                    }
                })
                .collect()
        });
    let (mut pairs, mut secs, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok((p, s)) => {
                pairs.push(p);
                secs.push(s);
            }
            Err(f) => failures.push(f),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate(format!(
            "no utterance in `{condition}` could be scored ({} failures)",
            failures.len()
        )));
    }
    EvalReport::new(
        condition,
        pairs,
        LatencyStats::from_samples(&secs)?,
        failures,
    )
}

pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = &report.condition;
    crate::write_atomic(
        dir.join(format!("report_{stem}.txt")),
        report.to_text().as_bytes(),
    )?;
    crate::write_atomic(
        dir.join(format!("scatter_{stem}.csv")),
        report.scatter_csv().as_bytes(),
    )
}

/// What a benchmark iteration times.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchScope {
    /// Feature extraction plus the network.
    EndToEnd,
    /// The network on precomputed features.
    ForwardOnly,
}

/// Per-utterance latency of `repetitions` passes over `buffers` on the
/// calling thread, after `warmup` untimed passes over the first buffer.
pub fn bench(
    model: &Model<f32>,
    buffers: &[AudioBuffer],
    repetitions: usize,
    warmup: usize,
    scope: BenchScope,
) -> Result<LatencyStats> {
    if buffers.is_empty() || repetitions == 0 {
        return Err(Error::Config(
            "benchmark needs at least one utterance and one repetition".into(),
        ));
    }
    let stft = Stft::new(model.stft)?;
    let features = match scope {
        BenchScope::ForwardOnly => buffers
            .iter()
            .map(|b| model.features(b, &stft))
            .collect::<Result<Vec<_>>>()?,
        BenchScope::EndToEnd => Vec::new(),
    };
    let run = |i: usize| -> Result<f32> {
        Ok(match scope {
            BenchScope::EndToEnd => model.predict(&buffers[i], &stft)?.utterance,
            BenchScope::ForwardOnly => model.forward_utterance(&features[i])?.utterance,
        })
    };
    for _ in 0..warmup {
        std::hint::black_box(run(0)?);
    }
    let mut secs = Vec::with_capacity(repetitions * buffers.len());
    for _ in 0..repetitions {
        for i in 0..buffers.len() {
            let t0 = Instant::now();
            std::hint::black_box(run(i)?);
            secs.push(t0.elapsed().as_secs_f64());
        }
    }
    LatencyStats::from_samples(&secs)
}

#[cfg(test)]
mod tests;
