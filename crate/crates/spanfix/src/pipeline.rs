//! Explain-and-correct orchestration: detect spans, assess quality, build the
//! prompt, complete and parse. Successful runs are cached on disk.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use sha2::{Digest, Sha256};
use spanfix_client::{DetectError, Detector, LlmClient};
use spanfix_core::model::{QualityAssessment, Sample};
use spanfix_core::parser::parse_output_lenient;
use spanfix_core::prompting::{build_explain_prompt, LanguageNames, Prompt, PromptSpec};
use spanfix_core::run::{DetectionResult, Failure, PipelineRun, Stage, Timings};
use spanfix_core::scoring::{mqm_raw_score, BucketConfig, PenaltyWeights};

/// Everything except the sample, detector and spec that a run depends on.
pub struct ExplainContext {
    pub client: LlmClient,
    pub names: LanguageNames,
    pub buckets: BucketConfig,
    pub weights: PenaltyWeights,
    pub max_in_flight: usize,
    pub cache: Option<RunCache>,
}

/// Quality fed to the prompt: the sample's gold score if present, else the
/// detector's score, else an MQM-style score from the detected spans.
pub fn assess_quality(
    sample: &Sample,
    detection: &DetectionResult,
    buckets: &BucketConfig,
    weights: &PenaltyWeights,
) -> Result<QualityAssessment, String> {
    if let Some(gold) = sample.gold_quality {
        return Ok(gold);
    }
    let raw = match &detection.score {
        Some(score) => score.value,
        None => mqm_raw_score(&detection.spans, weights),
    };
    buckets.assess(raw).map_err(|e| e.to_string())
}

fn failed(
    sample: &Sample,
    detection: Option<DetectionResult>,
    stage: Stage,
    message: String,
    backend: bool,
) -> PipelineRun {
    PipelineRun {
        sample_id: sample.id.clone(),
        translation: sample.translation.clone(),
        detection,
        quality: None,
        prompt: None,
        report: None,
        failure: Some(Failure {
            stage,
            message,
            backend,
        }),
        timings: Timings::default(),
    }
}

fn detect_failure(sample: &Sample, err: &DetectError) -> PipelineRun {
    let backend = matches!(
        err,
        DetectError::ServiceUnavailable { .. } | DetectError::BadServiceResponse { .. }
    );
    failed(sample, None, Stage::Detect, err.to_string(), backend)
}

/// A run that has a prompt and awaits its completion.
struct Pending {
    run: PipelineRun,
    prompt: Prompt,
}

// Failed runs are returned by value; they are built once per sample.
#[allow(clippy::result_large_err)]
fn prepare(
    sample: &Sample,
    detection: DetectionResult,
    spec: &PromptSpec,
    ctx: &ExplainContext,
) -> Result<Pending, PipelineRun> {
    let quality = match assess_quality(sample, &detection, &ctx.buckets, &ctx.weights) {
        Ok(q) => q,
        Err(message) => return Err(failed(sample, Some(detection), Stage::Score, message, false)),
    };
    let mut query = sample.clone();
    query.spans = detection.spans.clone();
    let prompt = match build_explain_prompt(&query, spec, &quality, &ctx.names) {
        Ok(p) => p,
        Err(e) => return Err(failed(sample, Some(detection), Stage::Prompt, e.to_string(), false)),
    };
    Ok(Pending {
        run: PipelineRun {
            sample_id: sample.id.clone(),
            translation: sample.translation.clone(),
            detection: Some(detection),
            quality: Some(quality),
            prompt: Some(prompt.clone()),
            report: None,
            failure: None,
            timings: Timings::default(),
        },
        prompt,
    })
}

/// Detects spans and builds prompts without calling the LLM.
#[allow(clippy::result_large_err)]
pub async fn build_prompts(
    ctx: &ExplainContext,
    samples: &[Sample],
    detector: &Detector,
    specs: &[PromptSpec],
) -> Vec<Result<PipelineRun, PipelineRun>> {
    assert_eq!(samples.len(), specs.len(), "one prompt spec per sample");
    let detections = detector.detect_batch(samples, ctx.max_in_flight).await;
    samples
        .iter()
        .zip(specs)
        .zip(detections)
        .map(|((sample, spec), detection)| match detection {
            Ok(d) => prepare(sample, d, spec, ctx).map(|p| p.run),
            Err(e) => Err(detect_failure(sample, &e)),
        })
        .collect()
}

/// Runs the full pipeline over `samples` with `specs[i]` for `samples[i]`;
/// results are aligned with the input.
pub async fn explain_batch(
    ctx: &ExplainContext,
    samples: &[Sample],
    detector: &Detector,
    specs: &[PromptSpec],
) -> Vec<PipelineRun> {
    assert_eq!(samples.len(), specs.len(), "one prompt spec per sample");
    let started = Instant::now();
    let keys: Vec<String> = samples
        .iter()
        .zip(specs)
        .map(|(s, spec)| cache_key(s, detector, spec, ctx))
        .collect();
    let mut out: Vec<Option<PipelineRun>> = samples
        .iter()
        .zip(&keys)
        .map(|(_, key)| ctx.cache.as_ref().and_then(|c| c.get(key)))
        .collect();
    let misses: Vec<usize> = (0..samples.len()).filter(|&i| out[i].is_none()).collect();
    let miss_samples: Vec<Sample> = misses.iter().map(|&i| samples[i].clone()).collect();

    let detect_started = Instant::now();
    let detections = detector.detect_batch(&miss_samples, ctx.max_in_flight).await;
    let detect_time = detect_started.elapsed();

    let mut pending = Vec::new();
    for (&i, detection) in misses.iter().zip(detections) {
        match detection {
            Ok(d) => match prepare(&samples[i], d, &specs[i], ctx) {
                Ok(p) => pending.push((i, p)),
                Err(run) => out[i] = Some(run),
            },
            Err(e) => out[i] = Some(detect_failure(&samples[i], &e)),
        }
    }

    let requests: Vec<(String, String)> = pending
        .iter()
        .map(|(i, p)| (samples[*i].id.clone(), p.prompt.text.clone()))
        .collect();
    let complete_started = Instant::now();
    let completions = ctx.client.complete_batch(&requests).await;
    let complete_time = complete_started.elapsed();

    for ((i, p), completion) in pending.into_iter().zip(completions) {
        let mut run = p.run;
        match completion {
            Ok(c) => {
                run.report = Some(parse_output_lenient(&c.text, p.prompt.n_spans));
                if let Some(cache) = &ctx.cache {
                    if let Err(e) = cache.put(&keys[i], &run) {
                        tracing::warn!("run cache write failed for {}: {e}", run.sample_id);
                    }
                }
            }
            Err(e) => {
                run.failure = Some(Failure {
                    stage: Stage::Complete,
                    message: e.to_string(),
                    backend: true,
                });
            }
        }
        out[i] = Some(run);
    }

    let n = samples.len().max(1) as u32;
    out.into_iter()
        .map(|run| {
            let mut run = run.expect("every sample yields a run");
            run.timings = Timings {
                detect: detect_time / n,
                complete: complete_time / n,
                total: started.elapsed() / n,
            };
            run
        })
        .collect()
}

pub async fn explain_and_correct(
    ctx: &ExplainContext,
    sample: &Sample,
    detector: &Detector,
    spec: &PromptSpec,
) -> PipelineRun {
    explain_batch(ctx, std::slice::from_ref(sample), detector, std::slice::from_ref(spec))
        .await
        .pop()
        .expect("one run per sample")
}

/// Cache key over everything that determines a run's output.
pub fn cache_key(sample: &Sample, detector: &Detector, spec: &PromptSpec, ctx: &ExplainContext) -> String {
    let mut h = Sha256::new();
    let mut field = |s: &str| {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    };
    field(&sample.id);
    field(&sample.source);
    field(&sample.translation);
    field(sample.reference.as_deref().unwrap_or(""));
    field(&serde_json::to_string(&sample.spans).unwrap_or_default());
    field(&serde_json::to_string(&sample.gold_quality).unwrap_or_default());
    field(&detector.reference().summary());
    field(&format!("{:?}|{}|{}", spec.mode, spec.use_reference, spec.k));
    for demo in &spec.demos {
        field(&demo.source);
        field(&demo.translation);
        field(&demo.correction);
    }
    field(&serde_json::to_string(ctx.client.params()).unwrap_or_default());
    field(&format!("{:?}|{:?}", ctx.buckets.cuts, ctx.weights));
    hex::encode(h.finalize())
}

/// One JSON file per successful run; writes are serialized.
pub struct RunCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl RunCache {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<PipelineRun> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, key: &str, run: &PipelineRun) -> std::io::Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = self.dir.join(format!("{key}.tmp"));
        fs::write(&tmp, serde_json::to_vec(run)?)?;
        fs::rename(tmp, self.path(key))
    }
}
