//! The five subcommands. Each writes its report(s) under `out` and returns them.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ugsep_core::numeric::{ParamRef, Params};
use ugsep_core::quant::{dequantize, footprint, quantize_stack, FootprintReport, QuantFormat, QuantScheme, QuantizedMatrix};
use ugsep_core::serving::{bench, random_request, serve_cached, serve_naive, BenchReport, CachedOptions, Request};
use ugsep_core::synthetic::{
    ablate_both, evaluate_auc, generate, scores, train, AblationTable, SyntheticDataset, TracePoint, Variant,
};
use ugsep_core::ugsep::{verify_separability, SeparabilityReport, Stack};
use ugsep_core::{Scalar, Tensor};

use crate::checkpoint::{self, Model};
use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    write_text(out, name, &(serde_json::to_string_pretty(value).expect("report serialises") + "\n"))
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Stack for `verify` and `train`, initialised from the run seed.
pub fn model_stack(cfg: &RunConfig) -> Result<Stack<f64>, CliError> {
    let mut stack = Stack::<f64>::init(cfg.stack_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if cfg.model.fault_inject_mask {
        let opened = stack.blocks.iter_mut().find_map(|b| b.mask.flip_first_zero());
        if opened.is_none() {
            return Err(CliError::Usage("fault_inject_mask needs a model with masked entries".into()));
        }
    }
    Ok(stack)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServingCheck {
    pub requests: usize,
    pub candidates: usize,
    pub pass: bool,
    /// Index of the first request whose cached scores differ from the naive ones.
    pub first_failure: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub fault_inject_mask: bool,
    pub separability: SeparabilityReport,
    pub serving: ServingCheck,
    pub pass: bool,
}

fn same_bits<S: Scalar>(a: &[S], b: &[S]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits() == y.bits())
}

/// Random requests with `1..=max_users` users of `1..=max_candidates` candidates each.
pub fn random_requests(
    stack: &Stack<f64>,
    count: usize,
    max_users: usize,
    max_candidates: usize,
    seed: u64,
) -> Vec<Request<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let users = rng.random_range(1..=max_users);
            let sizes: Vec<usize> = (0..users).map(|_| rng.random_range(1..=max_candidates)).collect();
            random_request(&stack.cfg, &sizes, &mut rng)
        })
        .collect()
}

pub fn check_serving(stack: &Stack<f64>, requests: &[Request<f64>]) -> Result<ServingCheck, CliError> {
    let mut first_failure = None;
    let mut candidates = 0;
    for (i, req) in requests.iter().enumerate() {
        candidates += req.total_candidates();
        let naive = serve_naive(stack, req)?;
        let cached = serve_cached(stack, req, CachedOptions::default())?;
        if first_failure.is_none() && !same_bits(&naive, &cached) {
            first_failure = Some(i);
        }
    }
    Ok(ServingCheck {
        requests: requests.len(),
        candidates,
        pass: first_failure.is_none(),
        first_failure,
    })
}

pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<VerifyReport, CliError> {
    let stack = model_stack(cfg)?;
    let separability = verify_separability(&stack, cfg.verify.trials, cfg.seed)?;
    let v = &cfg.verify;
    let requests = random_requests(&stack, v.requests, v.max_users, v.max_candidates, cfg.seed ^ 0xA5A5);
    let serving = check_serving(&stack, &requests)?;
    let report = VerifyReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        fault_inject_mask: cfg.model.fault_inject_mask,
        pass: separability.pass && serving.pass,
        separability,
        serving,
    };
    write_json(out, "verify.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub seed: u64,
    pub variant: Variant,
    pub steps: usize,
    pub initial_test_auc: f64,
    pub test_auc: f64,
    pub trace: Vec<TracePoint>,
    pub checkpoint: String,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const QUANT_FILE: &str = "model.q8.ckpt";

pub fn dataset(cfg: &RunConfig) -> Result<SyntheticDataset, CliError> {
    Ok(generate(&cfg.data)?)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport, CliError> {
    let data = dataset(cfg)?;
    let tc = cfg.train_config();
    let result = train(&data, &cfg.model.model_config(), &tc)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", out.display())))?;
    checkpoint::save(&out.join(MODEL_FILE), cfg, &result.stack)?;
    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        variant: tc.variant,
        steps: tc.steps,
        initial_test_auc: result.initial_test_auc,
        test_auc: result.test_auc,
        trace: result.trace,
        checkpoint: MODEL_FILE.into(),
    };
    write_json(out, "train.json", &report)?;
    Ok(report)
}

/// Test AUC of a saved model on the dataset recorded in its checkpoint.
pub fn evaluate_checkpoint(path: &Path) -> Result<f64, CliError> {
    let ck = checkpoint::load(path)?;
    let data = dataset(&ck.run)?;
    Ok(match &ck.model {
        Model::F32(s) => evaluate_auc(s, &data, &data.test)?,
        Model::F64(s) => evaluate_auc(s, &data, &data.test)?,
        Model::Q8F32(s) => evaluate_auc(s, &data, &data.test)?,
        Model::Q8F64(s) => evaluate_auc(s, &data, &data.test)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblateWhich {
    Ratios,
    Compensation,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateReport {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub ratios: Option<AblationTable>,
    pub compensation: Option<AblationTable>,
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, which: AblateWhich) -> Result<AblateReport, CliError> {
    let data = dataset(cfg)?;
    let model = cfg.model.model_config();
    let tc = cfg.train_config();
    let want_r = which != AblateWhich::Compensation;
    let want_c = which != AblateWhich::Ratios;
    let ratios = if want_r { cfg.ratio_specs(&cfg.ablate.ratios)? } else { Vec::new() };
    let comp = if want_c {
        cfg.ratio_specs(&cfg.ablate.compensation_ratios)?
    } else {
        Vec::new()
    };
    let (r, c) = ablate_both(&data, &model, &tc, &ratios, &comp, &cfg.ablate.seeds)?;
    let report = AblateReport {
        schema_version: SCHEMA_VERSION,
        seeds: cfg.ablate.seeds.clone(),
        ratios: want_r.then_some(r),
        compensation: want_c.then_some(c),
    };
    if let Some(t) = &report.ratios {
        write_json(out, "ablate_ratios.json", t)?;
        write_text(out, "ablate_ratios.txt", &t.to_text())?;
    }
    if let Some(t) = &report.compensation {
        write_json(out, "ablate_compensation.json", t)?;
        write_text(out, "ablate_compensation.txt", &t.to_text())?;
    }
    write_json(out, "ablate.json", &report)?;
    Ok(report)
}

/// Benchmarks the serve-section model (random weights from the run seed) or a
/// dense checkpoint, in `f32`.
pub fn cmd_bench(
    cfg: &RunConfig,
    out: &Path,
    flops_only: bool,
    checkpoint_path: Option<&Path>,
) -> Result<BenchReport, CliError> {
    let stack: Stack<f32> = match checkpoint_path {
        None => Stack::<f32>::init(cfg.bench_stack_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
        Some(p) => match checkpoint::load(p)?.model {
            Model::F32(s) => s,
            Model::F64(s) => s.cast(),
            _ => return Err(CliError::Failure("bench needs a dense checkpoint".into())),
        },
    };
    let report = bench(&stack, &cfg.serve.workload, cfg.serve.repetitions, flops_only)?;
    write_json(out, "bench.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixError {
    pub name: String,
    pub shape: [usize; 2],
    pub max_round_trip_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDrift {
    pub examples: usize,
    pub max_abs_score_drift: f64,
    pub test_auc_dense: f64,
    pub test_auc_quantized: f64,
    pub auc_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub schema_version: u32,
    pub format: QuantFormat,
    pub footprint: FootprintReport,
    pub matrices: Vec<MatrixError>,
    pub drift: ScoreDrift,
    pub checkpoint: String,
}

/// Number of test examples in the fixed score-drift batch.
pub const DRIFT_BATCH: usize = 256;

fn round_trip_errors<S: Scalar>(dense: &Stack<S>, q: &Stack<S, QuantizedMatrix>) -> Vec<MatrixError> {
    let mut ws: Vec<(String, Tensor<S>)> = Vec::new();
    dense.visit("", &mut |name, r| {
        if let ParamRef::Weight(t) = r {
            ws.push((name, t.clone()));
        }
    });
    let mut qs: Vec<QuantizedMatrix> = Vec::new();
    Params::<S, QuantizedMatrix>::visit(q, "", &mut |_, r| {
        if let ParamRef::Weight(m) = r {
            qs.push(m.clone());
        }
    });
    ws.into_iter()
        .zip(qs)
        .map(|((name, w), qm)| MatrixError {
            name,
            shape: qm.shape(),
            max_round_trip_error: w.cast::<f64>().max_abs_diff(&dequantize::<f64>(&qm)),
        })
        .collect()
}

fn drift<S: Scalar>(dense: &Stack<S>, q: &Stack<S, QuantizedMatrix>, data: &SyntheticDataset) -> Result<ScoreDrift, CliError> {
    let batch: Vec<usize> = data.test.iter().copied().take(DRIFT_BATCH).collect();
    let a = scores(dense, data, &batch)?;
    let b = scores(q, data, &batch)?;
    let max_abs_score_drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let test_auc_dense = evaluate_auc(dense, data, &data.test)?;
    let test_auc_quantized = evaluate_auc(q, data, &data.test)?;
    Ok(ScoreDrift {
        examples: batch.len(),
        max_abs_score_drift,
        test_auc_dense,
        test_auc_quantized,
        auc_drift: (test_auc_quantized - test_auc_dense).abs(),
    })
}

fn quantize_model<S: Scalar>(
    run: &RunConfig,
    dense: &Stack<S>,
    format: QuantFormat,
    out: &Path,
) -> Result<QuantizeReport, CliError> {
    let q = quantize_stack(dense, QuantScheme { format })?;
    let data = dataset(run)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", out.display())))?;
    checkpoint::save(&out.join(QUANT_FILE), run, &q)?;
    let report = QuantizeReport {
        schema_version: SCHEMA_VERSION,
        format,
        footprint: footprint(dense),
        matrices: round_trip_errors(dense, &q),
        drift: drift(dense, &q, &data)?,
        checkpoint: QUANT_FILE.into(),
    };
    write_json(out, "quantize.json", &report)?;
    Ok(report)
}

pub fn cmd_quantize(input: &Path, format: Option<QuantFormat>, out: &Path) -> Result<QuantizeReport, CliError> {
    let ck = checkpoint::load(input)?;
    let format = format.unwrap_or(ck.run.model.quant);
    match &ck.model {
        Model::F32(s) => quantize_model(&ck.run, s, format, out),
        Model::F64(s) => quantize_model(&ck.run, s, format, out),
        Model::Q8F32(_) | Model::Q8F64(_) => Err(CliError::Failure(format!(
            "{} is already quantized",
            input.display()
        ))),
    }
}
