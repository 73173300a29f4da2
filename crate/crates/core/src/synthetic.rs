//! Synthetic CTR data with a U×G teacher, desk-scale training, AUC and ablations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{flat_tensors, flat_tensors_mut, Linear, Scalar, Tensor};
use crate::ugsep::{sigmoid, ResidualMode, Stack, StackConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Logits are divided by this before the sigmoid.
    pub temperature: f64,
    /// Weight of the standardised pooled-U × pooled-G bilinear term.
    pub interaction: f64,
    /// Weight of the standardised linear term.
    pub linear: f64,
    /// The bilinear form is block-diagonal over this many contiguous feature groups.
    pub groups: usize,
    /// Target positive rate; the teacher bias is bisected to hit it.
    pub base_rate: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            interaction: 2.5,
            linear: 2.0,
            groups: 1,
            base_rate: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub users: usize,
    pub candidates_per_user: usize,
    pub u_tokens: usize,
    pub g_tokens: usize,
    pub d_model: usize,
    pub teacher: TeacherConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            users: 4000,
            candidates_per_user: 8,
            u_tokens: 4,
            g_tokens: 4,
            d_model: 32,
            teacher: TeacherConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub user: usize,
    pub g_tokens: Tensor<f64>,
    pub label: f64,
    /// The teacher's own click probability.
    pub teacher_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub users: Vec<Tensor<f64>>,
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub teacher_bias: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Test split membership: one in five examples by index hash.
pub fn is_test_index(index: usize) -> bool {
    splitmix64(index as u64).is_multiple_of(5)
}

fn pooled(t: &Tensor<f64>) -> Vec<f64> {
    let mut out = vec![0.0; t.row_len()];
    for r in 0..t.rows() {
        for (o, &v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out.iter().map(|v| v / t.rows() as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    var.sqrt().max(1e-12)
}

fn mean_prob(logits: &[f64], bias: f64) -> f64 {
    logits.iter().map(|&z| sigmoid(z + bias)).sum::<f64>() / logits.len() as f64
}

/// Deterministic dataset from `cfg`.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    let t = &cfg.teacher;
    if cfg.users == 0 || cfg.candidates_per_user == 0 || cfg.g_tokens == 0 || cfg.u_tokens == 0 || cfg.d_model == 0 {
        return Err(Error::config("synthetic shapes must be positive"));
    }
    if !(t.temperature > 0.0) || !(t.base_rate > 0.0 && t.base_rate < 1.0) || t.groups == 0 || !cfg.d_model.is_multiple_of(t.groups) {
        return Err(Error::config("invalid teacher configuration (groups must divide d_model)"));
    }
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = d / t.groups;
    let a = Tensor::<f64>::normal(&[d], 1.0, &mut rng);
    let b = Tensor::<f64>::normal(&[d], 1.0, &mut rng);
    let wu = Tensor::<f64>::normal(&[d], 1.0, &mut rng);
    let wg = Tensor::<f64>::normal(&[d], 1.0, &mut rng);

    let users: Vec<Tensor<f64>> = (0..cfg.users)
        .map(|_| Tensor::normal(&[cfg.u_tokens, d], 1.0, &mut rng))
        .collect();
    let mut cands = Vec::with_capacity(cfg.users * cfg.candidates_per_user);
    let mut bil = Vec::with_capacity(cands.capacity());
    let mut lin = Vec::with_capacity(cands.capacity());
    for (ui, u) in users.iter().enumerate() {
        let pu = pooled(u);
        for _ in 0..cfg.candidates_per_user {
            let g = Tensor::normal(&[cfg.g_tokens, d], 1.0, &mut rng);
            let pg = pooled(&g);
            bil.push(
                (0..t.groups)
                    .map(|k| {
                        let r = k * width..(k + 1) * width;
                        dot(&a.data()[r.clone()], &pu[r.clone()]) * dot(&b.data()[r.clone()], &pg[r])
                    })
                    .sum::<f64>(),
            );
            lin.push(dot(wu.data(), &pu) + dot(wg.data(), &pg));
            cands.push((ui, g));
        }
    }
    let (sb, sl) = (std_dev(&bil), std_dev(&lin));
    let logits: Vec<f64> = bil
        .iter()
        .zip(&lin)
        .map(|(x, y)| (t.interaction * x / sb + t.linear * y / sl) / t.temperature)
        .collect();

    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(&logits, mid) < t.base_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bias = 0.5 * (lo + hi);

    let mut examples = Vec::with_capacity(cands.len());
    for ((user, g), z) in cands.into_iter().zip(&logits) {
        let p = sigmoid(z + bias);
        let label = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        examples.push(Example {
            user,
            g_tokens: g,
            label,
            teacher_prob: p,
        });
    }
    let positives = examples.iter().filter(|e| e.label == 1.0).count();
    if positives == 0 || positives == examples.len() {
        return Err(Error::Generation(format!(
            "all {} labels are {}; recalibrate the teacher bias",
            examples.len(),
            if positives == 0 { 0 } else { 1 }
        )));
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..examples.len()).partition(|&i| is_test_index(i));
    Ok(SyntheticDataset {
        config: cfg.clone(),
        users,
        examples,
        train,
        test,
        teacher_bias: bias,
    })
}

impl SyntheticDataset {
    pub fn input(&self, i: usize) -> Tensor<f64> {
        let e = &self.examples[i];
        Tensor::concat_rows(&[&self.users[e.user], &e.g_tokens]).expect("consistent token widths")
    }

    pub fn base_rate(&self) -> f64 {
        self.examples.iter().map(|e| e.label).sum::<f64>() / self.examples.len() as f64
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.examples[i].label).collect()
    }

    /// AUC of the teacher's own probabilities against the sampled labels.
    pub fn teacher_auc(&self) -> Result<f64> {
        let all: Vec<usize> = (0..self.examples.len()).collect();
        let scores: Vec<f64> = self.examples.iter().map(|e| e.teacher_prob).collect();
        auc(&scores, &self.labels(&all))
    }
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l > 0.5).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs at least one positive and one negative label".into()));
    }
    // Twice the pair count, to keep ties exact in integers.
    let mut twice: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group_pos = idx[i..j].iter().filter(|&&k| labels[k] > 0.5).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        twice += group_pos as u128 * (2 * neg_below as u128 + group_neg as u128);
        neg_below += group_neg;
        i = j;
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Ugsep {
        c_u: usize,
        c_g: usize,
        #[serde(default)]
        compensation: bool,
        #[serde(default)]
        residual: Option<ResidualMode>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub d_attn: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_hidden: 32,
            d_attn: 16,
            layers: 2,
        }
    }
}

/// Stack configuration for `variant` on data shaped like `data`. Heads equal
/// the input token count.
pub fn stack_config(variant: &Variant, model: &ModelConfig, data: &SyntheticConfig) -> Result<StackConfig> {
    let (n, m, d) = (data.u_tokens, data.g_tokens, data.d_model);
    let mut cfg = match variant {
        Variant::Baseline => StackConfig::baseline(n + m, model.layers, d, model.d_hidden)?,
        Variant::Ugsep {
            c_u,
            c_g,
            compensation,
            residual,
        } => {
            if c_u + c_g != n + m {
                return Err(Error::config(format!(
                    "c_u + c_g = {} must equal the token count {}",
                    c_u + c_g,
                    n + m
                )));
            }
            let mut cfg = StackConfig::ugsep(n, m, *c_u, *c_g, model.layers, d, model.d_hidden)?
                .with_compensation(*compensation);
            if let Some(r) = residual {
                cfg = cfg.with_residual(0, *r);
            }
            cfg
        }
    };
    cfg.d_attn = model.d_attn;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
            steps: 2000,
            seed: 1,
            log_every: 50,
            variant: Variant::Baseline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub stack: Stack<f64>,
    pub trace: Vec<TracePoint>,
    pub initial_test_auc: f64,
    pub test_auc: f64,
}

pub fn scores<S: Scalar, W: Linear<S>>(stack: &Stack<S, W>, data: &SyntheticDataset, idx: &[usize]) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| stack.score(&data.input(i).cast::<S>()).map(|p| p.as_f64()))
        .collect()
}

pub fn evaluate_auc<S: Scalar, W: Linear<S>>(stack: &Stack<S, W>, data: &SyntheticDataset, idx: &[usize]) -> Result<f64> {
    auc(&scores(stack, data, idx)?, &data.labels(idx))
}

/// Momentum SGD on the logistic loss. The model is initialised from `cfg.seed`.
pub fn train(data: &SyntheticDataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::config("batch_size and log_every must be positive"));
    }
    if !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config("learning_rate must be positive and momentum in [0, 1)"));
    }
    let scfg = stack_config(&cfg.variant, model, &data.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stack = Stack::<f64>::init(scfg, &mut rng)?;
    let initial_test_auc = evaluate_auc(&stack, data, &data.test)?;

    let mut velocity: Vec<Tensor<f64>> = flat_tensors(&stack).iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut order = data.train.clone();
    let mut cursor = order.len();
    let mut trace = Vec::new();
    let mut window = 0.0;
    let mut window_n = 0usize;
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        let mut grad: Option<crate::ugsep::StackGrads<f64>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let (loss, _, g) = stack.loss_grad(&data.input(i), data.examples[i].label)?;
            batch_loss += loss;
            match &mut grad {
                None => grad = Some(g),
                Some(acc) => {
                    for (a, b) in flat_tensors_mut(acc).into_iter().zip(flat_tensors(&g)) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        let loss = batch_loss * inv_batch;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grad = grad.expect("batch_size >= 1");
        for ((p, v), g) in flat_tensors_mut(&mut stack)
            .into_iter()
            .zip(velocity.iter_mut())
            .zip(flat_tensors(&grad))
        {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = cfg.momentum * *vv + gv * inv_batch;
                *pv -= cfg.learning_rate * *vv;
            }
        }
        window += loss;
        window_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            trace.push(TracePoint {
                step: step + 1,
                loss: window / window_n as f64,
            });
            window = 0.0;
            window_n = 0;
        }
    }
    let test_auc = evaluate_auc(&stack, data, &data.test)?;
    Ok(TrainResult {
        stack,
        trace,
        initial_test_auc,
        test_auc,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A `U:G` ratio and the head split it maps to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioSpec {
    pub label: String,
    pub c_u: usize,
    pub c_g: usize,
}

impl RatioSpec {
    /// `u:g` over `heads` rows: `c_u = round(heads·u/(u+g))`, kept in `[0, heads-1]`.
    pub fn from_ratio(u: usize, g: usize, heads: usize) -> Result<Self> {
        if g == 0 || heads < 2 {
            return Err(Error::config(format!("invalid ratio {u}:{g} for {heads} heads")));
        }
        let c_u = ((heads * u) as f64 / (u + g) as f64).round() as usize;
        let c_u = c_u.min(heads - 1);
        Ok(Self {
            label: format!("{u}:{g}"),
            c_u,
            c_g: heads - c_u,
        })
    }

    /// Parses `"u:g"`.
    pub fn parse(s: &str, heads: usize) -> Result<Self> {
        let (u, g) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("ratio '{s}' is not of the form u:g")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("ratio '{s}' is not of the form u:g")))
        };
        Self::from_ratio(parse(u)?, parse(g)?, heads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub c_u: usize,
    pub c_g: usize,
    pub compensation: bool,
    pub seeds: Vec<u64>,
    pub test_auc: Vec<f64>,
    pub median_auc: f64,
    /// Median AUC minus the baseline median AUC.
    pub delta_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub title: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str, compensation: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label && r.compensation == compensation)
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.title);
        out.push_str(&format!(
            "{:<10} {:>4} {:>4} {:>5} {:>10} {:>10}\n",
            "U:G", "c_u", "c_g", "comp", "AUC", "dAUC"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>4} {:>4} {:>5} {:>10.5} {:>+10.5}\n",
                r.label,
                r.c_u,
                r.c_g,
                if r.compensation { "Y" } else { "N" },
                r.median_auc,
                r.delta_auc
            ));
        }
        out
    }
}

/// Trains each distinct variant once per seed and remembers the AUCs.
struct Runner<'a> {
    data: &'a SyntheticDataset,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    seeds: &'a [u64],
    done: Vec<(Variant, Vec<f64>)>,
}

impl<'a> Runner<'a> {
    fn new(data: &'a SyntheticDataset, model: &'a ModelConfig, train: &'a TrainConfig, seeds: &'a [u64]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::config("ablation needs at least one seed"));
        }
        Ok(Self {
            data,
            model,
            train,
            seeds,
            done: Vec::new(),
        })
    }

    fn aucs(&mut self, variant: Variant) -> Result<Vec<f64>> {
        if let Some((_, a)) = self.done.iter().find(|(v, _)| *v == variant) {
            return Ok(a.clone());
        }
        let aucs = self
            .seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    seed,
                    variant: variant.clone(),
                    ..self.train.clone()
                };
                Ok(train(self.data, self.model, &cfg)?.test_auc)
            })
            .collect::<Result<Vec<f64>>>()?;
        self.done.push((variant, aucs.clone()));
        Ok(aucs)
    }

    fn row(&mut self, label: &str, c_u: usize, c_g: usize, compensation: bool) -> Result<AblationRow> {
        let variant = if label == "baseline" {
            Variant::Baseline
        } else {
            Variant::Ugsep {
                c_u,
                c_g,
                compensation,
                residual: None,
            }
        };
        let aucs = self.aucs(variant)?;
        Ok(AblationRow {
            label: label.into(),
            c_u,
            c_g,
            compensation,
            seeds: self.seeds.to_vec(),
            median_auc: median(&aucs),
            test_auc: aucs,
            delta_auc: 0.0,
        })
    }

    fn baseline(&mut self) -> Result<AblationRow> {
        let tokens = self.data.config.u_tokens + self.data.config.g_tokens;
        self.row("baseline", 0, tokens, false)
    }

    fn ratios(&mut self, ratios: &[RatioSpec]) -> Result<AblationTable> {
        let mut rows = vec![self.baseline()?];
        for r in ratios {
            rows.push(self.row(&r.label, r.c_u, r.c_g, false)?);
        }
        Ok(finish("U:G ratio ablation (compensation off)", rows))
    }

    fn compensation(&mut self, ratios: &[RatioSpec]) -> Result<AblationTable> {
        let mut rows = vec![self.baseline()?];
        for r in ratios {
            for comp in [false, true] {
                rows.push(self.row(&r.label, r.c_u, r.c_g, comp)?);
            }
        }
        Ok(finish("Information compensation ablation", rows))
    }
}

fn finish(title: &str, mut rows: Vec<AblationRow>) -> AblationTable {
    let base = rows[0].median_auc;
    for r in &mut rows {
        r.delta_auc = r.median_auc - base;
    }
    rows[0].delta_auc = 0.0;
    AblationTable {
        schema_version: 1,
        title: title.into(),
        rows,
    }
}

/// Baseline plus one UG-Sep model per ratio, compensation off.
pub fn ablate_ratios(
    data: &SyntheticDataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    ratios: &[RatioSpec],
    seeds: &[u64],
) -> Result<AblationTable> {
    Runner::new(data, model, train_cfg, seeds)?.ratios(ratios)
}

/// Paired compensation off/on runs per ratio, plus the baseline.
pub fn ablate_compensation(
    data: &SyntheticDataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    ratios: &[RatioSpec],
    seeds: &[u64],
) -> Result<AblationTable> {
    Runner::new(data, model, train_cfg, seeds)?.compensation(ratios)
}

/// Both tables; variants that appear in both are trained once.
pub fn ablate_both(
    data: &SyntheticDataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    ratios: &[RatioSpec],
    compensation_ratios: &[RatioSpec],
    seeds: &[u64],
) -> Result<(AblationTable, AblationTable)> {
    let mut runner = Runner::new(data, model, train_cfg, seeds)?;
    Ok((runner.ratios(ratios)?, runner.compensation(compensation_ratios)?))
}
