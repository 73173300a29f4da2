//! In-request U-side caching, FLOPs accounting and the serving benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Linear, Scalar, Tensor};
use crate::quant::{quantize_stack, QuantScheme};
use crate::ugsep::{ResidualMode, Stack, StackConfig, USide};

/// One user with their U tokens and candidate G tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct UserRecord<S: Scalar> {
    pub u_tokens: Tensor<S>,
    pub candidates: Vec<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Request<S: Scalar> {
    pub users: Vec<UserRecord<S>>,
}

impl<S: Scalar> Request<S> {
    pub fn candidate_sizes(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.candidates.len()).collect()
    }

    pub fn total_candidates(&self) -> usize {
        self.users.iter().map(|u| u.candidates.len()).sum()
    }

    /// Naive layout: each user's U tokens repeated once per candidate, `N×n×D`.
    pub fn replicated_u(&self) -> Result<Tensor<S>> {
        let first = self
            .users
            .first()
            .ok_or_else(|| Error::config("request has no users"))?;
        let shape = first.u_tokens.shape().to_vec();
        let mut data = Vec::new();
        for u in &self.users {
            if u.u_tokens.shape() != shape.as_slice() {
                return Err(Error::shape("request u tokens", u.u_tokens.shape(), &shape));
            }
            for _ in &u.candidates {
                data.extend_from_slice(u.u_tokens.data());
            }
        }
        Tensor::new(vec![self.total_candidates(), shape[0], shape[1]], data)
    }

    /// Candidate G tokens in request order, `N×m×D`.
    pub fn stacked_g(&self) -> Result<Tensor<S>> {
        let all: Vec<&Tensor<S>> = self.users.iter().flat_map(|u| u.candidates.iter()).collect();
        let first = all.first().ok_or_else(|| Error::config("request has no candidates"))?;
        let shape = first.shape().to_vec();
        let mut data = Vec::new();
        for g in &all {
            if g.shape() != shape.as_slice() {
                return Err(Error::shape("request g tokens", g.shape(), &shape));
            }
            data.extend_from_slice(g.data());
        }
        Tensor::new(vec![all.len(), shape[0], shape[1]], data)
    }
}

/// Exclusive prefix sum: index of each user's first replicated row.
pub fn cumsum_offsets(sizes: &[usize]) -> Result<Vec<usize>> {
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::config(format!("candidate size of user {i} must be at least 1")));
    }
    let mut acc = 0;
    Ok(sizes
        .iter()
        .map(|&s| {
            let o = acc;
            acc += s;
            o
        })
        .collect())
}

/// Rows `offsets[i]` of a replicated tensor, stacked.
pub fn gather_unique_u<S: Scalar>(replicated: &Tensor<S>, offsets: &[usize]) -> Result<Tensor<S>> {
    let n = replicated.shape()[0];
    let mut parts = Vec::with_capacity(offsets.len());
    for &o in offsets {
        if o >= n {
            return Err(Error::shape("gather_unique_u offset", &[o], &[n]));
        }
        parts.push(replicated.slice_rows(o, o + 1));
    }
    if parts.is_empty() {
        return Err(Error::config("gather of zero users"));
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Row `i` repeated `sizes[i]` times, in order.
pub fn repeat_u_outputs<S: Scalar>(unique: &Tensor<S>, sizes: &[usize]) -> Result<Tensor<S>> {
    if unique.shape()[0] != sizes.len() {
        return Err(Error::shape("repeat_u_outputs", unique.shape(), &[sizes.len()]));
    }
    let mut parts = Vec::new();
    for (i, &s) in sizes.iter().enumerate() {
        let row = unique.slice_rows(i, i + 1);
        parts.extend(std::iter::repeat_n(row, s));
    }
    if parts.is_empty() {
        return Err(Error::config("repeat to zero rows"));
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn slab<S: Scalar>(t: &Tensor<S>, i: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    Tensor::new(vec![s[1], s[2]], t.row(i).to_vec())
}

/// Full forward per (user, candidate) pair on the replicated layout.
pub fn serve_naive<S: Scalar, W: Linear<S>>(stack: &Stack<S, W>, req: &Request<S>) -> Result<Vec<S>> {
    let u = req.replicated_u()?;
    let g = req.stacked_g()?;
    (0..req.total_candidates())
        .map(|i| {
            let x = Tensor::concat_rows(&[&slab(&u, i)?, &slab(&g, i)?])?;
            stack.score(&x)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CachedOptions {
    /// Recompute every block's U side per candidate and compare with the cache.
    pub cross_check: bool,
}

fn compare_sides<S: Scalar>(block: usize, cached: &USide<S>, fresh: &USide<S>) -> Result<()> {
    let pairs = [
        ("mixed", &cached.mixed, &fresh.mixed),
        ("reusable_ffn", &cached.ffn_out, &fresh.ffn_out),
        ("output", &cached.out, &fresh.out),
    ];
    for (stage, a, b) in pairs {
        if let Some(idx) = a.first_bit_difference(b) {
            return Err(Error::Integrity {
                block,
                detail: format!("cached U side differs from recomputation at {stage} element {idx}"),
            });
        }
    }
    Ok(())
}

/// Cumsum offsets, gather the unique U inputs, run the U side once per user,
/// then only the G side per candidate.
pub fn serve_cached<S: Scalar, W: Linear<S>>(
    stack: &Stack<S, W>,
    req: &Request<S>,
    opts: CachedOptions,
) -> Result<Vec<S>> {
    let sizes = req.candidate_sizes();
    let offsets = cumsum_offsets(&sizes)?;
    let replicated = req.replicated_u()?;
    let unique = gather_unique_u(&replicated, &offsets)?;
    let sides = (0..sizes.len())
        .map(|i| stack.u_phase(&slab(&unique, i)?))
        .collect::<Result<Vec<_>>>()?;

    let g = req.stacked_g()?;
    let mut scores = Vec::with_capacity(req.total_candidates());
    let mut row = 0;
    for (user, &size) in sizes.iter().enumerate() {
        let u_tokens = slab(&unique, user)?;
        for _ in 0..size {
            let g_tokens = slab(&g, row)?;
            row += 1;
            let out = if opts.cross_check {
                let mut x = Tensor::concat_rows(&[&u_tokens, &g_tokens])?;
                for (bi, (b, side)) in stack.blocks.iter().zip(&sides[user]).enumerate() {
                    compare_sides(bi, side, &b.u_side(&x)?)?;
                    let gout = b.g_side(&x, side)?;
                    x = Tensor::concat_rows(&[&side.out, &gout])?;
                }
                x
            } else {
                stack.g_phase(&u_tokens, &g_tokens, &sides[user])?
            };
            scores.push(stack.readout.score(&out));
        }
    }
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsMode {
    Naive,
    Cached,
}

/// Multiply-adds of one block split into the reusable (U) and per-candidate (G) paths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub block_index: usize,
    pub ffn_u: u64,
    pub ffn_g: u64,
    pub layer_norm_u: u64,
    pub layer_norm_g: u64,
    pub compensation: u64,
    pub attention_u: u64,
    pub attention_g: u64,
    pub f_u: u64,
    pub f_g: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub blocks: Vec<BlockFlops>,
    pub readout: u64,
    /// Per-user reusable cost.
    pub f_u: u64,
    /// Per-candidate cost.
    pub f_g: u64,
    pub users: u64,
    pub candidates: u64,
    pub naive_total: u64,
    pub cached_total: u64,
    pub cached_over_naive: f64,
    pub ffn_u: u64,
    pub ffn_g: u64,
    /// `ffn_u / (ffn_u + ffn_g)` of one forward pass.
    pub reusable_ffn_fraction: f64,
}

impl FlopsLedger {
    pub fn total(&self, mode: FlopsMode) -> u64 {
        match mode {
            FlopsMode::Naive => self.naive_total,
            FlopsMode::Cached => self.cached_total,
        }
    }
}

fn block_flops(cfg: &StackConfig, i: usize) -> BlockFlops {
    let b = cfg.block_config(i);
    let d = b.d_model as u64;
    let l = b.mixed_dim() as u64;
    let dh = b.d_hidden as u64;
    let da = b.d_attn as u64;
    let (c_u, c_g) = (b.c_u() as u64, b.c_g() as u64);
    let (n, m) = (b.partition.n as u64, b.partition.m as u64);
    let t = n + m;
    let ffn_row = l * dh + dh * d;
    let ln_row = 2 * l + 2 * d;
    let compensation = if b.compensation { c_u * d * c_g * d } else { 0 };
    let (attention_u, attention_g) = match b.residual {
        ResidualMode::Plain => (0, 0),
        ResidualMode::Separated => {
            let kv_u = 2 * n * d * da;
            let kv_g = 2 * m * d * da;
            let per_query = |keys: u64| d * da + 2 * keys * da + da * d;
            (kv_u + c_u * per_query(n), kv_g + c_g * per_query(t))
        }
    };
    let ffn_u = c_u * ffn_row;
    let ffn_g = c_g * ffn_row;
    let layer_norm_u = c_u * ln_row;
    let layer_norm_g = c_g * ln_row;
    BlockFlops {
        block_index: i,
        ffn_u,
        ffn_g,
        layer_norm_u,
        layer_norm_g,
        compensation,
        attention_u,
        attention_g,
        f_u: ffn_u + layer_norm_u + compensation + attention_u,
        f_g: ffn_g + layer_norm_g + attention_g,
    }
}

/// Analytic multiply-add counts. Mixup, masking and additions are free;
/// a layer norm over `k` values costs `2k`; softmax exponentials are not counted.
pub fn flops_count(cfg: &StackConfig, sizes: &[usize]) -> Result<FlopsLedger> {
    cfg.validate()?;
    cumsum_offsets(sizes)?;
    let blocks: Vec<BlockFlops> = (0..cfg.blocks.len()).map(|i| block_flops(cfg, i)).collect();
    let readout = cfg.d_model as u64;
    let f_u: u64 = blocks.iter().map(|b| b.f_u).sum();
    let f_g: u64 = blocks.iter().map(|b| b.f_g).sum::<u64>() + readout;
    let ffn_u: u64 = blocks.iter().map(|b| b.ffn_u).sum();
    let ffn_g: u64 = blocks.iter().map(|b| b.ffn_g).sum();
    let users = sizes.len() as u64;
    let candidates: u64 = sizes.iter().map(|&s| s as u64).sum();
    let naive_total = (f_u + f_g) * candidates;
    let cached_total = f_u * users + f_g * candidates;
    Ok(FlopsLedger {
        blocks,
        readout,
        f_u,
        f_g,
        users,
        candidates,
        naive_total,
        cached_total,
        cached_over_naive: cached_total as f64 / naive_total as f64,
        ffn_u,
        ffn_g,
        reusable_ffn_fraction: ffn_u as f64 / (ffn_u + ffn_g) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CandidateDist {
    Fixed { size: usize },
    Uniform { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub users: usize,
    pub candidates: CandidateDist,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::config("workload needs at least one user"));
        }
        match self.candidates {
            CandidateDist::Fixed { size: 0 } => Err(Error::config("candidate size must be at least 1")),
            CandidateDist::Uniform { min, max } if min == 0 || min > max => {
                Err(Error::config(format!("invalid candidate range [{min}, {max}]")))
            }
            _ => Ok(()),
        }
    }

    pub fn sizes(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.users)
            .map(|_| match self.candidates {
                CandidateDist::Fixed { size } => size,
                CandidateDist::Uniform { min, max } => rng.random_range(min..=max),
            })
            .collect())
    }
}

/// Random request with Gaussian tokens shaped for `cfg`.
pub fn random_request<S: Scalar, R: Rng + ?Sized>(cfg: &StackConfig, sizes: &[usize], rng: &mut R) -> Request<S> {
    let part = cfg.input_partition();
    let d = cfg.d_model;
    let users = sizes
        .iter()
        .map(|&s| UserRecord {
            u_tokens: Tensor::normal(&[part.n, d], 1.0, rng),
            candidates: (0..s).map(|_| Tensor::normal(&[part.m, d], 1.0, rng)).collect(),
        })
        .collect();
    Request { users }
}

pub fn workload_request<S: Scalar>(cfg: &StackConfig, spec: &WorkloadSpec) -> Result<Request<S>> {
    let sizes = spec.sizes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005E_ED0F_u64);
    Ok(random_request(cfg, &sizes, &mut rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wallclock {
    pub p50: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub wallclock_ms: Option<Wallclock>,
    pub flops: u64,
    /// Scores bitwise equal to the reference path of the same weights.
    pub equivalence: bool,
}

pub const BENCH_NOTE: &str = "Wall-clock figures measure single-process CPU compute at desk scale. \
They are not comparable to production serving latency figures such as the paper's -20.0% (Table 1).";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub note: String,
    pub workload: WorkloadSpec,
    pub repetitions: usize,
    pub modes: Vec<ModeReport>,
    pub flops: FlopsLedger,
}

/// Nearest-rank percentile of `samples` (sorted in place).
pub fn percentile(samples: &mut [f64], p: f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    if samples.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * samples.len() as f64).ceil().max(1.0) as usize;
    samples[rank.min(samples.len()) - 1]
}

fn time_it<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, Wallclock)> {
    let mut ms = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let start = Instant::now();
        let v = f()?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(v);
    }
    let p50 = percentile(&mut ms, 50.0);
    let p90 = percentile(&mut ms, 90.0);
    Ok((last.expect("reps >= 1"), Wallclock { p50, p90 }))
}

fn same_bits<S: Scalar>(a: &[S], b: &[S]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits() == y.bits())
}

/// Naive vs cached vs cached+W8A16 on one workload. With `flops_only` no
/// timing is done and `wallclock_ms` is null.
pub fn bench<S: Scalar>(
    stack: &Stack<S>,
    workload: &WorkloadSpec,
    repetitions: usize,
    flops_only: bool,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::config(format!("bench needs at least 3 repetitions, got {repetitions}")));
    }
    let req: Request<S> = workload_request(&stack.cfg, workload)?;
    let ledger = flops_count(&stack.cfg, &req.candidate_sizes())?;
    let quantized = quantize_stack(stack, QuantScheme::int8())?;
    let opts = CachedOptions::default();

    let reps = if flops_only { 1 } else { repetitions };
    let (naive, t_naive) = time_it(reps, || serve_naive(stack, &req))?;
    let (cached, t_cached) = time_it(reps, || serve_cached(stack, &req, opts))?;
    let (q_cached, t_q) = time_it(reps, || serve_cached(&quantized, &req, opts))?;
    let q_naive = serve_naive(&quantized, &req)?;

    let wall = |w: Wallclock| (!flops_only).then_some(w);
    let modes = vec![
        ModeReport {
            mode: "naive".into(),
            wallclock_ms: wall(t_naive),
            flops: ledger.naive_total,
            equivalence: true,
        },
        ModeReport {
            mode: "cached".into(),
            wallclock_ms: wall(t_cached),
            flops: ledger.cached_total,
            equivalence: same_bits(&naive, &cached),
        },
        ModeReport {
            mode: "cached+w8a16".into(),
            wallclock_ms: wall(t_q),
            flops: ledger.cached_total,
            equivalence: same_bits(&q_naive, &q_cached),
        },
    ];
    Ok(BenchReport {
        schema_version: 1,
        note: BENCH_NOTE.into(),
        workload: workload.clone(),
        repetitions,
        modes,
        flops: ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::flat_tensors_mut;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn offsets() {
        assert_eq!(cumsum_offsets(&[2, 3, 1]).unwrap(), vec![0, 2, 5]);
        assert_eq!(cumsum_offsets(&[1]).unwrap(), vec![0]);
        assert!(cumsum_offsets(&[2, 0]).is_err());
        let mut r = rng(0);
        let sizes: Vec<usize> = (0..20).map(|_| r.random_range(1..10)).collect();
        let o = cumsum_offsets(&sizes).unwrap();
        for i in 0..19 {
            assert_eq!(o[i + 1] - o[i], sizes[i]);
        }
    }

    fn markers(sizes: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
        let unique = Tensor::new(
            vec![sizes.len(), 2, 3],
            (0..sizes.len()).flat_map(|u| std::iter::repeat_n(u as f64 + 1.0, 6)).collect(),
        )
        .unwrap();
        let rep = repeat_u_outputs(&unique, sizes).unwrap();
        (unique, rep)
    }

    #[test]
    fn gather_and_repeat_are_inverse() {
        let sizes = [2, 3, 1];
        let (unique, rep) = markers(&sizes);
        assert_eq!(rep.shape(), &[6, 2, 3]);
        let offsets = cumsum_offsets(&sizes).unwrap();
        let back = gather_unique_u(&rep, &offsets).unwrap();
        assert!(back.bitwise_eq(&unique));
        assert!(repeat_u_outputs(&back, &sizes).unwrap().bitwise_eq(&rep));
        assert!(gather_unique_u(&rep, &[0]).unwrap().bitwise_eq(&unique.slice_rows(0, 1)));
        assert!(gather_unique_u(&rep, &[6]).is_err());
        assert!(repeat_u_outputs(&unique, &[1, 1]).is_err());
        let (u1, r1) = markers(&[1, 1, 1]);
        assert!(u1.bitwise_eq(&r1));
        let (u3, r3) = markers(&[3]);
        for i in 0..3 {
            assert_eq!(r3.row(i), u3.row(0));
        }
    }

    fn model(c_u: usize, comp: bool, seed: u64) -> Stack<f64> {
        let cfg = StackConfig::ugsep(4, 4, c_u, 8 - c_u, 3, 16, 8).unwrap().with_compensation(comp);
        let mut s = Stack::init(cfg, &mut rng(seed)).unwrap();
        let mut r = rng(seed + 1);
        for b in &mut s.blocks {
            for t in flat_tensors_mut(&mut b.params) {
                *t = Tensor::normal(t.shape(), 0.3, &mut r);
            }
        }
        s
    }

    #[test]
    fn cached_equals_naive() {
        let mut r = rng(1);
        for (c_u, comp) in [(4, false), (4, true), (6, true), (2, false)] {
            let s = model(c_u, comp, 10 + c_u as u64);
            for _ in 0..5 {
                let m = r.random_range(1..=4);
                let sizes: Vec<usize> = (0..m).map(|_| r.random_range(1..=6)).collect();
                let req = random_request(&s.cfg, &sizes, &mut r);
                let naive = serve_naive(&s, &req).unwrap();
                let cached = serve_cached(&s, &req, CachedOptions { cross_check: true }).unwrap();
                assert!(same_bits(&naive, &cached));
                assert!(naive.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn single_pair_and_duplicates() {
        let s = model(4, false, 2);
        let mut r = rng(3);
        let mut req = random_request::<f64, _>(&s.cfg, &[1], &mut r);
        let x = Tensor::concat_rows(&[&req.users[0].u_tokens, &req.users[0].candidates[0]]).unwrap();
        let full = s.score(&x).unwrap();
        assert_eq!(serve_cached(&s, &req, CachedOptions::default()).unwrap(), vec![full]);
        let dup = req.users[0].candidates[0].clone();
        req.users[0].candidates.push(dup);
        let scores = serve_naive(&s, &req).unwrap();
        assert_eq!(scores[0].to_bits(), scores[1].to_bits());
    }

    #[test]
    fn fault_injection_names_block() {
        let mut s = model(4, false, 4);
        s.blocks[2].mask.flip_first_zero();
        let mut r = rng(5);
        let req = random_request(&s.cfg, &[3, 2], &mut r);
        let naive = serve_naive(&s, &req).unwrap();
        let cached = serve_cached(&s, &req, CachedOptions::default()).unwrap();
        assert!(!same_bits(&naive, &cached));
        match serve_cached(&s, &req, CachedOptions { cross_check: true }) {
            Err(Error::Integrity { block, .. }) => assert_eq!(block, 2),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn ledger_identities() {
        let cfg = StackConfig::ugsep(4, 4, 4, 4, 2, 16, 8).unwrap();
        let l = flops_count(&cfg, &[512, 512, 512, 512]).unwrap();
        assert_eq!(l.reusable_ffn_fraction, 0.5);
        assert_eq!(l.cached_total, l.f_u * 4 + l.f_g * 2048);
        assert_eq!(l.naive_total - l.cached_total, l.f_u * (2048 - 4));
        let one = flops_count(&cfg, &[1, 1, 1]).unwrap();
        assert_eq!(one.cached_total, one.naive_total);
        // FFN per row: L·d_h + d_h·D with L = 8·2.
        assert_eq!(l.blocks[0].ffn_u, 4 * (16 * 8 + 8 * 16));
    }

    #[test]
    fn ledger_attention_and_compensation() {
        let cfg = StackConfig::ugsep(4, 4, 6, 2, 2, 16, 8).unwrap().with_compensation(true);
        let l = flops_count(&cfg, &[2]).unwrap();
        let b0 = &l.blocks[0];
        assert_eq!(b0.compensation, 6 * 16 * 2 * 16);
        // keys/values for 4 U tokens, then 6 queries over 4 keys.
        assert_eq!(b0.attention_u, 2 * 4 * 16 * 16 + 6 * (16 * 16 + 2 * 4 * 16 + 16 * 16));
        assert_eq!(l.blocks[1].attention_u, 0);
    }

    #[test]
    fn asymptotic_ratio() {
        let cfg = StackConfig::ugsep(4, 4, 4, 4, 2, 16, 8).unwrap();
        let l = flops_count(&cfg, &[1_000_000]).unwrap();
        let limit = l.f_g as f64 / (l.f_u + l.f_g) as f64;
        assert!((l.cached_over_naive - limit).abs() < 1e-5);
    }

    #[test]
    fn workload_sizes() {
        let w = WorkloadSpec {
            seed: 1,
            users: 5,
            candidates: CandidateDist::Uniform { min: 2, max: 4 },
        };
        let s = w.sizes().unwrap();
        assert!(s.iter().all(|&v| (2..=4).contains(&v)));
        assert_eq!(s, w.sizes().unwrap());
        let bad = WorkloadSpec {
            candidates: CandidateDist::Uniform { min: 3, max: 2 },
            ..w
        };
        assert!(bad.sizes().is_err());
    }

    #[test]
    fn bench_report_contract() {
        let s: Stack<f32> = model(4, false, 6).cast();
        let w = WorkloadSpec {
            seed: 2,
            users: 2,
            candidates: CandidateDist::Fixed { size: 4 },
        };
        assert!(bench(&s, &w, 2, false).is_err());
        let r = bench(&s, &w, 3, true).unwrap();
        assert_eq!(r.modes.len(), 3);
        assert!(r.modes.iter().all(|m| m.equivalence && m.wallclock_ms.is_none()));
        assert_eq!(r.modes[1].flops, r.modes[2].flops);
        assert_eq!(r.modes[0].flops, r.flops.naive_total);
        let again = bench(&s, &w, 3, true).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn percentiles() {
        let mut v = vec![5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&mut v, 50.0), 3.0);
        assert_eq!(percentile(&mut v, 90.0), 5.0);
    }
}
