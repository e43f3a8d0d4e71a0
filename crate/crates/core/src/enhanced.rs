//! Weak-to-strong training of softmax heads on a synthetic
//! spurious-correlation classification task, with confidence-based
//! retraining of the student.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GeometryTargets, ProblemConfig};
use crate::error::{Error, Result};
use crate::geometry::GroupGeometry;
use crate::rng::{derive_seed, rng_for, stream};
use crate::synth_data::{draw_beta_star, draw_gaussian_rows, draw_group_feats, group_block, row_kron};

pub const CSV_HEADER: &str = "setting,p,q,seed,teacher_avg,vanilla_avg,enhanced_avg,teacher_wga,vanilla_wga,enhanced_wga,subset_minority_frac";

pub const P_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const Q_GRID: [f64; 3] = [0.0, 0.2, 0.7];
/// Selection fractions searched when the unlabeled pool is the balanced one.
pub const RESTRICTED_P_GRID: [f64; 3] = [0.2, 0.4, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadHyper {
    pub step: f64,
    pub epochs: usize,
    /// `None` for full-batch descent; otherwise consecutive fixed-size batches.
    pub batch_size: Option<usize>,
}

impl Default for HeadHyper {
    fn default() -> Self {
        HeadHyper {
            step: 0.1,
            epochs: 500,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Ce,
    Gce(f64),
}

impl Loss {
    fn q(self) -> f64 {
        match self {
            Loss::Ce => 0.0,
            Loss::Gce(q) => q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Imbalanced labeled set, balanced unlabeled pool.
    #[serde(rename = "a")]
    A,
    /// Balanced labeled set, imbalanced unlabeled pool.
    #[serde(rename = "b")]
    B,
}

impl Setting {
    pub fn etas(self, eta_o: f64) -> (f64, f64) {
        match self {
            Setting::A => (eta_o, 0.5),
            Setting::B => (0.5, eta_o),
        }
    }

    pub fn search_p(self) -> &'static [f64] {
        match self {
            Setting::A => &RESTRICTED_P_GRID,
            Setting::B => &P_GRID,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::A => "a",
            Setting::B => "b",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Setting::A),
            "b" => Ok(Setting::B),
            other => Err(Error::Precondition(format!("unknown setting `{other}` (expected a or b)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifConfig {
    pub problem: ProblemConfig,
    pub targets: GeometryTargets,
    pub eta_o: f64,
    /// Size of the balanced evaluation pool; the leading share is held out for validation.
    pub test_count: usize,
    pub validation_fraction: f64,
    pub hyper: HeadHyper,
    pub selection: f64,
    pub gce_q: f64,
    /// Continue from the vanilla student head instead of zeros.
    pub warm_start: bool,
    /// Append a constant coordinate to `z` so the head also sees `[1; Fᵀξ]` directly.
    pub core_intercept: bool,
}

impl ClassifConfig {
    pub fn toy_default() -> Self {
        let (p_t, p_s) = (3, 2);
        ClassifConfig {
            problem: ProblemConfig {
                d_z: 64,
                p: ProblemConfig::default_ambient(p_t, p_s),
                p_t,
                p_s,
                sigma_y: 1.0,
                sigma_xi: 1.0,
                eta_l: 0.05,
                eta_u: 0.5,
                eta_t: 0.5,
                n: 2000,
                n_unlabeled: 20_000,
                beta_star_norm: 1.0,
            },
            targets: GeometryTargets {
                xi_frob_sq: 0.2,
                mu_t_sq: 10.0,
                mu_s_sq: 0.1,
            },
            eta_o: 0.05,
            test_count: 4000,
            validation_fraction: 0.2,
            hyper: HeadHyper::default(),
            selection: 0.4,
            gce_q: 0.7,
            warm_start: true,
            core_intercept: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_pq(self.selection, self.gce_q)?;
        check_hyper(&self.hyper)?;
        if !(self.eta_o > 0.0 && self.eta_o <= 0.5) {
            return Err(Error::Precondition(format!("eta_o = {} outside (0, 1/2]", self.eta_o)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Precondition("validation_fraction must lie in (0, 1)".into()));
        }
        let held = self.validation_rows();
        if held == 0 || held >= self.test_count {
            return Err(Error::Precondition("test pool too small to split".into()));
        }
        Ok(())
    }

    pub fn validation_rows(&self) -> usize {
        (self.validation_fraction * self.test_count as f64).round() as usize
    }

    pub fn is_vanilla_equivalent(&self) -> bool {
        is_vanilla_equivalent(self.selection, self.gce_q)
    }
}

pub fn is_vanilla_equivalent(p: f64, q: f64) -> bool {
    p == 1.0 && q == 0.0
}

fn check_pq(p: f64, q: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Precondition(format!("selection fraction p = {p} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Precondition(format!("GCE q = {q} outside [0, 1]")));
    }
    Ok(())
}

fn check_hyper(h: &HeadHyper) -> Result<()> {
    if !(h.step > 0.0 && h.step.is_finite()) || h.epochs == 0 || h.batch_size == Some(0) {
        return Err(Error::Precondition("step size, epochs and batch size must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    /// `2 × d`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl SoftmaxHead {
    pub fn zeros(dim: usize) -> Self {
        SoftmaxHead {
            weights: DMatrix::zeros(2, dim),
            bias: DVector::zeros(2),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut l = x * self.weights.transpose();
        for mut row in l.row_iter_mut() {
            row[0] += self.bias[0];
            row[1] += self.bias[1];
        }
        l
    }

    /// Row-wise log-softmax of the logits.
    pub fn log_probs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut l = self.logits(x);
        for mut row in l.row_iter_mut() {
            let m = row[0].max(row[1]);
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            row[0] -= lse;
            row[1] -= lse;
        }
        l
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<u8> {
        self.logits(x).row_iter().map(|r| u8::from(r[1] > r[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifDataset {
    pub z: DMatrix<f64>,
    pub group_feats: DMatrix<f64>,
    pub c: Vec<u8>,
    pub g: Vec<u8>,
    pub eta: f64,
    pub seed: u64,
}

impl ClassifDataset {
    pub fn count(&self) -> usize {
        self.c.len()
    }

    /// Minority rows are those whose group disagrees with the class.
    pub fn is_minority(&self, i: usize) -> bool {
        self.c[i] != self.g[i]
    }

    pub fn minority_fraction(&self) -> f64 {
        (0..self.count()).filter(|&i| self.is_minority(i)).count() as f64 / self.count() as f64
    }

    pub fn rows(&self, start: usize, len: usize) -> ClassifDataset {
        ClassifDataset {
            z: self.z.rows(start, len).into_owned(),
            group_feats: self.group_feats.rows(start, len).into_owned(),
            c: self.c[start..start + len].to_vec(),
            g: self.g[start..start + len].to_vec(),
            eta: self.eta,
            seed: self.seed,
        }
    }

    /// Head inputs `[z; 1]⊗[1; Fᵀξ]` (or `z⊗[1; Fᵀξ]` without the intercept).
    pub fn features(&self, frame: &DMatrix<f64>, core_intercept: bool) -> Result<DMatrix<f64>> {
        let w = group_block(&self.group_feats, frame);
        if core_intercept {
            let z = self.z.clone().insert_column(self.z.ncols(), 1.0);
            row_kron(&z, &w)
        } else {
            row_kron(&self.z, &w)
        }
    }
}

/// `c = 1{zᵀβ_* ≥ 0}`; `g = c` with probability `1 − η`; `ξ ~ N(gμ_ξ, σ_ξ²I)`.
pub fn gen_classif(
    config: &ProblemConfig,
    geom: &GroupGeometry,
    eta: f64,
    count: usize,
    seed: u64,
    beta: &DVector<f64>,
) -> Result<ClassifDataset> {
    if !(0.0..=0.5).contains(&eta) {
        return Err(Error::Precondition(format!("eta = {eta} outside [0, 1/2]")));
    }
    if count == 0 {
        return Err(Error::Precondition("count must be at least 1".into()));
    }
    if beta.len() != config.d_z || geom.ambient() != config.p {
        return Err(Error::Dimension("β_* or geometry does not match the config".into()));
    }
    let mut rng = rng_for(seed);
    let z = draw_gaussian_rows(&mut rng, count, config.d_z);
    let c: Vec<u8> = (&z * beta).iter().map(|&u| u8::from(u >= 0.0)).collect();
    let g: Vec<u8> = c
        .iter()
        .map(|&ci| if rng.random::<f64>() < eta { 1 - ci } else { ci })
        .collect();
    let group_feats = draw_group_feats(&mut rng, &g, &geom.mu_xi, config.sigma_xi);
    Ok(ClassifDataset {
        z,
        group_feats,
        c,
        g,
        eta,
        seed,
    })
}

/// `(1 − p^q)/q`, and `−ln p` at `q = 0`.
pub fn gce_loss(prob_correct: f64, q: f64) -> Result<f64> {
    if !(prob_correct > 0.0 && prob_correct <= 1.0) {
        return Err(Error::Domain(format!("probability {prob_correct} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("q = {q} outside [0, 1]")));
    }
    Ok(gce_from_log(prob_correct.ln(), q))
}

fn gce_from_log(log_p: f64, q: f64) -> f64 {
    if q == 0.0 {
        -log_p
    } else {
        -(q * log_p).exp_m1() / q
    }
}

fn check_labels(x: &DMatrix<f64>, labels: &[u8]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::Dimension(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if x.nrows() == 0 {
        return Err(Error::Precondition("no training rows".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Precondition("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean loss and its gradient with respect to the head parameters.
pub fn loss_and_grad(head: &SoftmaxHead, x: &DMatrix<f64>, labels: &[u8], loss: Loss) -> Result<(f64, SoftmaxHead)> {
    check_labels(x, labels)?;
    if head.dim() != x.ncols() {
        return Err(Error::Dimension(format!("head expects {} features, got {}", head.dim(), x.ncols())));
    }
    let q = loss.q();
    let n = x.nrows() as f64;
    let lp = head.log_probs(x);
    let mut total = 0.0;
    // d loss_i / d logits = p_y^q (π − e_y)
    let mut g = DMatrix::zeros(x.nrows(), 2);
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        let log_py = lp[(i, y)];
        total += gce_from_log(log_py, q);
        let w = if q == 0.0 { 1.0 } else { (q * log_py).exp() };
        for k in 0..2 {
            let target = if k == y { 1.0 } else { 0.0 };
            g[(i, k)] = w * (lp[(i, k)].exp() - target) / n;
        }
    }
    let grad = SoftmaxHead {
        weights: g.tr_mul(x),
        bias: DVector::from_fn(2, |k, _| g.column(k).sum()),
    };
    Ok((total / n, grad))
}

/// Gradient descent from `init` (or zeros) for the configured epochs.
pub fn train_head(
    x: &DMatrix<f64>,
    labels: &[u8],
    hyper: &HeadHyper,
    init: Option<&SoftmaxHead>,
    loss: Loss,
) -> Result<SoftmaxHead> {
    check_hyper(hyper)?;
    check_labels(x, labels)?;
    if !(0.0..=1.0).contains(&loss.q()) {
        return Err(Error::Precondition(format!("GCE q = {} outside [0, 1]", loss.q())));
    }
    let mut head = match init {
        Some(h) if h.dim() != x.ncols() => {
            return Err(Error::Dimension(format!("initial head has {} features, data {}", h.dim(), x.ncols())))
        }
        Some(h) => h.clone(),
        None => SoftmaxHead::zeros(x.ncols()),
    };
    let n = x.nrows();
    let batch = hyper.batch_size.unwrap_or(n).min(n);
    let mut iteration = 0;
    for _ in 0..hyper.epochs {
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let (value, grad) = if len == n {
                loss_and_grad(&head, x, labels, loss)?
            } else {
                let xb = x.rows(start, len).into_owned();
                loss_and_grad(&head, &xb, &labels[start..start + len], loss)?
            };
            if !value.is_finite() || grad.weights.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { iteration, loss: value });
            }
            head.weights -= grad.weights * hyper.step;
            head.bias -= grad.bias * hyper.step;
            iteration += 1;
            start += len;
        }
    }
    let (value, _) = loss_and_grad(&head, x, labels, loss)?;
    if !value.is_finite() || head.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iteration, loss: value });
    }
    Ok(head)
}

/// Per-sample predictive entropy.
pub fn entropies(head: &SoftmaxHead, x: &DMatrix<f64>) -> Vec<f64> {
    head.log_probs(x)
        .row_iter()
        .map(|r| -(r[0].exp() * r[0] + r[1].exp() * r[1]))
        .collect()
}

pub fn selection_size(p: f64, count: usize) -> usize {
    ((p * count as f64 - 1e-9).ceil() as usize).clamp(1, count)
}

/// Indices of the `⌈p·count⌉` lowest-entropy rows, in selection order
/// (entropy ascending, ties by index).
pub fn entropy_select(head: &SoftmaxHead, x: &DMatrix<f64>, p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Precondition(format!("selection fraction p = {p} outside (0, 1]")));
    }
    if head.dim() != x.ncols() {
        return Err(Error::Dimension(format!("head expects {} features, got {}", head.dim(), x.ncols())));
    }
    let mut order = entropy_ranking(&entropies(head, x));
    order.truncate(selection_size(p, x.nrows()));
    Ok(order)
}

fn entropy_ranking(h: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub average: f64,
    /// Minimum over the non-empty `(c, g)` cells.
    pub worst_group: f64,
    /// `cells[c][g]`, NaN when empty.
    pub cells: [[f64; 2]; 2],
}

pub fn group_accuracy(pred: &[u8], c: &[u8], g: &[u8]) -> Result<GroupAccuracy> {
    if pred.len() != c.len() || c.len() != g.len() || c.is_empty() {
        return Err(Error::Dimension("prediction, class and group lengths differ or are empty".into()));
    }
    let mut hits = [[0usize; 2]; 2];
    let mut sizes = [[0usize; 2]; 2];
    for ((&p, &ci), &gi) in pred.iter().zip(c).zip(g) {
        sizes[ci as usize][gi as usize] += 1;
        hits[ci as usize][gi as usize] += usize::from(p == ci);
    }
    let mut cells = [[f64::NAN; 2]; 2];
    let mut worst = f64::INFINITY;
    for a in 0..2 {
        for b in 0..2 {
            if sizes[a][b] > 0 {
                cells[a][b] = hits[a][b] as f64 / sizes[a][b] as f64;
                worst = worst.min(cells[a][b]);
            }
        }
    }
    let total: usize = hits.iter().flatten().sum();
    Ok(GroupAccuracy {
        average: total as f64 / c.len() as f64,
        worst_group: worst,
        cells,
    })
}

/// Everything a grid cell needs that does not depend on `(p, q)`.
struct SeedContext {
    seed: u64,
    student_unlabeled: DMatrix<f64>,
    pseudo: Vec<u8>,
    unlabeled_minority: Vec<bool>,
    vanilla: SoftmaxHead,
    ranking: Vec<usize>,
    val: (DMatrix<f64>, ClassifDataset),
    test: (DMatrix<f64>, ClassifDataset),
    teacher_test: GroupAccuracy,
    vanilla_test: GroupAccuracy,
    vanilla_val: GroupAccuracy,
}

fn eval(head: &SoftmaxHead, split: &(DMatrix<f64>, ClassifDataset)) -> Result<GroupAccuracy> {
    group_accuracy(&head.predict(&split.0), &split.1.c, &split.1.g)
}

fn prepare_seed(cfg: &ClassifConfig, setting: Setting, geom: &GroupGeometry, seed: u64) -> Result<SeedContext> {
    cfg.validate()?;
    let (eta_l, eta_u) = setting.etas(cfg.eta_o);
    let pc = &cfg.problem;
    let beta = draw_beta_star(pc.d_z, 1.0, derive_seed(seed, &[stream::BETA_STAR]));
    let labeled = gen_classif(pc, geom, eta_l, pc.n, derive_seed(seed, &[stream::LABELED]), &beta)?;
    let unlabeled = gen_classif(pc, geom, eta_u, pc.n_unlabeled, derive_seed(seed, &[stream::UNLABELED]), &beta)?;
    let pool = gen_classif(pc, geom, 0.5, cfg.test_count, derive_seed(seed, &[stream::TEST]), &beta)?;
    let held = cfg.validation_rows();
    let val_set = pool.rows(0, held);
    let test_set = pool.rows(held, cfg.test_count - held);
    let ci = cfg.core_intercept;

    let teacher = train_head(&labeled.features(&geom.t, ci)?, &labeled.c, &cfg.hyper, None, Loss::Ce)?;
    let pseudo = teacher.predict(&unlabeled.features(&geom.t, ci)?);
    let teacher_test = eval(&teacher, &(test_set.features(&geom.t, ci)?, test_set.clone()))?;

    let student_unlabeled = unlabeled.features(&geom.s, ci)?;
    let vanilla = train_head(&student_unlabeled, &pseudo, &cfg.hyper, None, Loss::Ce)?;
    let ranking = entropy_ranking(&entropies(&vanilla, &student_unlabeled));
    let val = (val_set.features(&geom.s, ci)?, val_set);
    let test = (test_set.features(&geom.s, ci)?, test_set);
    Ok(SeedContext {
        seed,
        unlabeled_minority: (0..unlabeled.count()).map(|i| unlabeled.is_minority(i)).collect(),
        pseudo,
        vanilla_test: eval(&vanilla, &test)?,
        vanilla_val: eval(&vanilla, &val)?,
        teacher_test,
        student_unlabeled,
        vanilla,
        ranking,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineRow {
    pub setting: Setting,
    pub p: f64,
    pub q: f64,
    pub seed: u64,
    pub teacher: GroupAccuracy,
    pub vanilla: GroupAccuracy,
    pub enhanced: GroupAccuracy,
    pub enhanced_val_wga: f64,
    pub vanilla_val_wga: f64,
    pub subset_minority_frac: f64,
    pub pool_minority_frac: f64,
    pub vanilla_equivalent: bool,
}

fn run_cell(cfg: &ClassifConfig, setting: Setting, ctx: &SeedContext, p: f64, q: f64) -> Result<PipelineRow> {
    check_pq(p, q)?;
    let k = selection_size(p, ctx.ranking.len());
    let subset = &ctx.ranking[..k];
    let x = ctx.student_unlabeled.select_rows(subset);
    let labels: Vec<u8> = subset.iter().map(|&i| ctx.pseudo[i]).collect();
    let init = cfg.warm_start.then_some(&ctx.vanilla);
    let loss = if q == 0.0 { Loss::Ce } else { Loss::Gce(q) };
    let head = train_head(&x, &labels, &cfg.hyper, init, loss)?;
    let minority = |idx: &mut dyn Iterator<Item = usize>, len: usize| {
        idx.filter(|&i| ctx.unlabeled_minority[i]).count() as f64 / len as f64
    };
    Ok(PipelineRow {
        setting,
        p,
        q,
        seed: ctx.seed,
        teacher: ctx.teacher_test,
        vanilla: ctx.vanilla_test,
        enhanced: eval(&head, &ctx.test)?,
        enhanced_val_wga: eval(&head, &ctx.val)?.worst_group,
        vanilla_val_wga: ctx.vanilla_val.worst_group,
        subset_minority_frac: minority(&mut subset.iter().copied(), k),
        pool_minority_frac: minority(&mut (0..ctx.ranking.len()), ctx.ranking.len()),
        vanilla_equivalent: is_vanilla_equivalent(p, q),
    })
}

/// Teacher SFT, vanilla W2S with cross-entropy on pseudolabels, then
/// retraining on the `p` most confident pseudolabels with GCE(`q`).
/// One row per seed; seeds run concurrently.
pub fn enhanced_pipeline(
    cfg: &ClassifConfig,
    setting: Setting,
    geom: &GroupGeometry,
    p: f64,
    q: f64,
    seeds: &[u64],
) -> Result<Vec<PipelineRow>> {
    check_pq(p, q)?;
    if seeds.is_empty() {
        return Err(Error::Precondition("no seeds given".into()));
    }
    seeds
        .par_iter()
        .map(|&s| run_cell(cfg, setting, &prepare_seed(cfg, setting, geom, s)?, p, q))
        .collect()
}

/// Cells evaluated for a setting: the search grid plus the full-data cells.
pub fn grid_cells(setting: Setting) -> Vec<(f64, f64)> {
    let mut cells: Vec<(f64, f64)> = setting
        .search_p()
        .iter()
        .flat_map(|&p| Q_GRID.iter().map(move |&q| (p, q)))
        .filter(|&(p, q)| !is_vanilla_equivalent(p, q))
        .collect();
    for &q in &Q_GRID {
        if !is_vanilla_equivalent(1.0, q) && !cells.contains(&(1.0, q)) {
            cells.push((1.0, q));
        }
    }
    cells
}

fn in_search(setting: Setting, p: f64, q: f64) -> bool {
    setting.search_p().contains(&p) && !is_vanilla_equivalent(p, q)
}

/// Validation-selected cell per seed for one comparison arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Selection {
    pub p: f64,
    pub q: f64,
    pub test_wga: f64,
    pub test_avg: f64,
    pub subset_minority_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub teacher_wga: f64,
    pub vanilla_wga: f64,
    pub best: Selection,
    pub ce_only: Selection,
    pub full_data: Selection,
    pub pool_minority_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingSummary {
    pub setting: Setting,
    pub seeds: Vec<SeedSummary>,
    pub mean_teacher_wga: f64,
    pub mean_vanilla_wga: f64,
    pub mean_best_wga: f64,
    pub mean_ce_only_wga: f64,
    pub mean_full_data_wga: f64,
    pub best_beats_vanilla: usize,
    pub subset_below_pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<PipelineRow>,
    pub settings: Vec<SettingSummary>,
}

fn select(rows: &[&PipelineRow], keep: impl Fn(&PipelineRow) -> bool) -> Result<Selection> {
    rows.iter()
        .filter(|r| keep(r))
        .fold(None::<&PipelineRow>, |best, r| match best {
            Some(b) if b.enhanced_val_wga >= r.enhanced_val_wga => Some(b),
            _ => Some(r),
        })
        .map(|r| Selection {
            p: r.p,
            q: r.q,
            test_wga: r.enhanced.worst_group,
            test_avg: r.enhanced.average,
            subset_minority_frac: r.subset_minority_frac,
        })
        .ok_or_else(|| Error::Precondition("no grid cell matches the selection rule".into()))
}

fn summarize(setting: Setting, rows: &[PipelineRow], seeds: &[u64]) -> Result<SettingSummary> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mine: Vec<&PipelineRow> = rows.iter().filter(|r| r.seed == seed && r.setting == setting).collect();
        let first = mine.first().ok_or_else(|| Error::Precondition(format!("no rows for seed {seed}")))?;
        per_seed.push(SeedSummary {
            seed,
            teacher_wga: first.teacher.worst_group,
            vanilla_wga: first.vanilla.worst_group,
            best: select(&mine, |r| in_search(setting, r.p, r.q))?,
            ce_only: select(&mine, |r| r.q == 0.0 && in_search(setting, r.p, r.q))?,
            full_data: select(&mine, |r| r.p == 1.0)?,
            pool_minority_frac: first.pool_minority_frac,
        });
    }
    let mean = |f: &dyn Fn(&SeedSummary) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64;
    Ok(SettingSummary {
        setting,
        mean_teacher_wga: mean(&|s| s.teacher_wga),
        mean_vanilla_wga: mean(&|s| s.vanilla_wga),
        mean_best_wga: mean(&|s| s.best.test_wga),
        mean_ce_only_wga: mean(&|s| s.ce_only.test_wga),
        mean_full_data_wga: mean(&|s| s.full_data.test_wga),
        best_beats_vanilla: per_seed.iter().filter(|s| s.best.test_wga > s.vanilla_wga).count(),
        subset_below_pool: per_seed
            .iter()
            .filter(|s| s.best.subset_minority_frac < s.pool_minority_frac)
            .count(),
        seeds: per_seed,
    })
}

/// Runs [`grid_cells`] for the requested settings, selecting cells by
/// validation worst-group accuracy per seed.
pub fn ablation_grid(
    cfg: &ClassifConfig,
    geom: &GroupGeometry,
    settings: &[Setting],
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() || settings.is_empty() {
        return Err(Error::Precondition("no seeds or settings given".into()));
    }
    let jobs: Vec<(Setting, u64)> = settings.iter().flat_map(|&s| seeds.iter().map(move |&x| (s, x))).collect();
    let per_job: Vec<Vec<PipelineRow>> = jobs
        .par_iter()
        .map(|&(setting, seed)| {
            let ctx = prepare_seed(cfg, setting, geom, seed)?;
            grid_cells(setting)
                .into_iter()
                .map(|(p, q)| run_cell(cfg, setting, &ctx, p, q))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<PipelineRow> = per_job.into_iter().flatten().collect();
    let summaries = settings
        .iter()
        .map(|&s| summarize(s, &rows, seeds))
        .collect::<Result<_>>()?;
    Ok(AblationReport { rows, settings: summaries })
}

pub fn rows_to_csv(rows: &[PipelineRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.setting,
            r.p,
            r.q,
            r.seed,
            r.teacher.average,
            r.vanilla.average,
            r.enhanced.average,
            r.teacher.worst_group,
            r.vanilla.worst_group,
            r.enhanced.worst_group,
            r.subset_minority_frac
        );
    }
    out
}
