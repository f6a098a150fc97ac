//! Threshold sweeps and weight search used to pick `(tau1, omega, tau2)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::{validate_config, DecisionConfig, DEFAULT_TAU2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLabel {
    Copy,
    Noncopy,
    Retrieve,
    Style,
}

impl ScoreLabel {
    /// Whether the copy gate should fire for this label.
    pub fn is_copy(self) -> bool {
        !matches!(self, ScoreLabel::Noncopy)
    }
}

/// Similarities of one labeled pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub s_fus: f64,
    pub s_vis: f64,
    pub s_clip: f64,
    pub s_tex: f64,
    pub label: ScoreLabel,
}

impl ScoreEntry {
    pub fn new(s_fus: f64, streams: [f64; 3], label: ScoreLabel) -> Self {
        Self {
            query: None,
            reference: None,
            s_fus,
            s_vis: streams[0],
            s_clip: streams[1],
            s_tex: streams[2],
            label,
        }
    }

    pub fn streams(&self) -> [f64; 3] {
        [self.s_vis, self.s_clip, self.s_tex]
    }

    fn weighted(&self, w: [f64; 3]) -> f64 {
        w[0] * self.s_vis + w[1] * self.s_clip + w[2] * self.s_tex
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl LabeledScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            for s in [e.s_fus, e.s_vis, e.s_clip, e.s_tex] {
                if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
                    return Err(Error::data(format!("entry {i}: score {s} outside [-1, 1]")));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Parses one [`ScoreEntry`] per non-blank line.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScoreEntry = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("scores line {}: {e}", n + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    fn gate_samples(&self, score: impl Fn(&ScoreEntry) -> f64) -> Vec<(f64, bool)> {
        self.entries
            .iter()
            .map(|e| (score(e), e.label.is_copy()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Accuracy,
    F1,
}

/// Evenly spaced thresholds `k / n` with `n = 1/step`, clipped to `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            lo: 0.5,
            hi: 1.0,
            step: 0.001,
        }
    }
}

fn steps_per_unit(step: f64, what: &str) -> Result<u64> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config(format!(
            "{what} step {step} must lie in (0, 1]"
        )));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "{what} step {step} does not divide 1 evenly"
        )));
    }
    Ok(n as u64)
}

impl ThresholdGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        let n = steps_per_unit(self.step, "threshold")? as f64;
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo >= self.hi {
            return Err(Error::config(format!(
                "threshold grid [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        let first = (self.lo * n - 1e-9).ceil() as i64;
        let last = (self.hi * n + 1e-9).floor() as i64;
        let values: Vec<f64> = (first..=last).map(|k| k as f64 / n).collect();
        if values.len() < 2 {
            return Err(Error::config("threshold grid needs at least two points"));
        }
        Ok(values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub best_tau: f64,
    pub best_accuracy: f64,
    pub best_f1: f64,
    pub objective: Objective,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`; 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts under the rule `predicted copy = score > tau`.
pub fn confusion_at(samples: &[(f64, bool)], tau: f64) -> Confusion {
    let mut c = Confusion::default();
    for &(s, positive) in samples {
        match (s > tau, positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

fn check_two_labels(samples: &[(f64, bool)]) -> Result<()> {
    let positives = samples.iter().filter(|s| s.1).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::Degenerate(format!(
            "need both copy and non-copy samples, got {positives} copies out of {}",
            samples.len()
        )));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::config("threshold grid needs at least two points"));
    }
    if grid
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::config("threshold grid must be strictly ascending"));
    }
    Ok(())
}

/// Scores every threshold in `grid` under `predicted copy = score > tau`.
///
/// Ties in the objective resolve to the smallest threshold.
pub fn sweep_threshold(
    samples: &[(f64, bool)],
    grid: &[f64],
    objective: Objective,
) -> Result<SweepResult> {
    check_two_labels(samples)?;
    check_grid(grid)?;
    let mut pos: Vec<f64> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    let mut neg: Vec<f64> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let n = samples.len() as f64;

    let points: Vec<SweepPoint> = grid
        .iter()
        .map(|&tau| {
            let pos_below = pos.partition_point(|&s| s <= tau);
            let neg_below = neg.partition_point(|&s| s <= tau);
            let c = Confusion {
                tp: pos.len() - pos_below,
                fn_: pos_below,
                tn: neg_below,
                fp: neg.len() - neg_below,
            };
            SweepPoint {
                tau,
                accuracy: (c.tp + c.tn) as f64 / n,
                f1: c.f1(),
            }
        })
        .collect();

    let key = |p: &SweepPoint| match objective {
        Objective::Accuracy => p.accuracy,
        Objective::F1 => p.f1,
    };
    let mut best = points[0];
    for p in &points[1..] {
        if key(p) > key(&best) {
            best = *p;
        }
    }
    Ok(SweepResult {
        best_tau: best.tau,
        best_accuracy: best.accuracy,
        best_f1: best.f1,
        points,
        objective,
    })
}

/// Sweep of the copy gate on `s_fus`.
pub fn sweep_fused(
    set: &LabeledScoreSet,
    grid: &[f64],
    objective: Objective,
) -> Result<SweepResult> {
    sweep_threshold(&set.gate_samples(|e| e.s_fus), grid, objective)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightCell {
    pub w_vis: f64,
    pub w_clip: f64,
    pub w_tex: f64,
    /// Best threshold on the weighted score for this cell.
    pub tau: f64,
    pub accuracy: f64,
    pub f1: f64,
}

impl WeightCell {
    pub fn omega(&self) -> [f64; 3] {
        [self.w_vis, self.w_clip, self.w_tex]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightGridResult {
    /// Cells in lexicographic `(w_vis, w_clip)` order.
    pub cells: Vec<WeightCell>,
    pub best: WeightCell,
    pub step: f64,
    pub objective: Objective,
}

/// Simplex points `(i/n, j/n, (n-i-j)/n)` in lexicographic order.
pub fn simplex_cells(step: f64) -> Result<Vec<[f64; 3]>> {
    let n = steps_per_unit(step, "weight")?;
    let nf = n as f64;
    let mut out = Vec::with_capacity(((n + 1) * (n + 2) / 2) as usize);
    for i in 0..=n {
        for j in 0..=(n - i) {
            out.push([i as f64 / nf, j as f64 / nf, (n - i - j) as f64 / nf]);
        }
    }
    Ok(out)
}

/// Exhaustive search over weight simplex cells for the copy gate on
/// `S_w = w_vis·s_vis + w_clip·s_clip + w_tex·s_tex`.
///
/// Each cell gets its own best threshold from `tau_grid`. Ties resolve to
/// the lexicographically smallest `(w_vis, w_clip)`.
pub fn grid_search_weights(
    set: &LabeledScoreSet,
    step: f64,
    tau_grid: &[f64],
    objective: Objective,
) -> Result<WeightGridResult> {
    check_two_labels(&set.gate_samples(|e| e.s_fus))?;
    check_grid(tau_grid)?;
    let cells = simplex_cells(step)?;
    let evaluated: Vec<WeightCell> = cells
        .par_iter()
        .map(|&w| {
            let samples = set.gate_samples(|e| e.weighted(w));
            let sweep = sweep_threshold(&samples, tau_grid, objective)?;
            Ok(WeightCell {
                w_vis: w[0],
                w_clip: w[1],
                w_tex: w[2],
                tau: sweep.best_tau,
                accuracy: sweep.best_accuracy,
                f1: sweep.best_f1,
            })
        })
        .collect::<Result<_>>()?;

    let key = |c: &WeightCell| match objective {
        Objective::Accuracy => c.accuracy,
        Objective::F1 => c.f1,
    };
    let mut best = evaluated[0];
    for c in &evaluated[1..] {
        if key(c) > key(&best) {
            best = *c;
        }
    }
    Ok(WeightGridResult {
        cells: evaluated,
        best,
        step,
        objective,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeThreshold {
    pub tau: f64,
    /// True when every retrieve score exceeds every style score.
    pub clean: bool,
    pub accuracy: f64,
}

fn type_accuracy(retrieve: &[f64], style: &[f64], tau: f64) -> f64 {
    let correct =
        retrieve.iter().filter(|&&s| s > tau).count() + style.iter().filter(|&&s| s <= tau).count();
    correct as f64 / (retrieve.len() + style.len()) as f64
}

/// Retrieve/style boundary on already-weighted scores.
///
/// Separable inputs get the midpoint of the gap. Otherwise the candidate
/// cut (just below the minimum, each midpoint between consecutive distinct
/// scores, or the maximum) with the best accuracy wins, smallest first.
pub fn select_type_threshold_scores(retrieve: &[f64], style: &[f64]) -> Result<TypeThreshold> {
    if retrieve.is_empty() || style.is_empty() {
        return Err(Error::Degenerate(format!(
            "need both retrieve and style pairs, got {} retrieve and {} style",
            retrieve.len(),
            style.len()
        )));
    }
    let min_r = retrieve.iter().copied().fold(f64::INFINITY, f64::min);
    let max_s = style.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min_r > max_s {
        let tau = (max_s + min_r) / 2.0;
        return Ok(TypeThreshold {
            tau,
            clean: true,
            accuracy: type_accuracy(retrieve, style, tau),
        });
    }
    let mut all: Vec<f64> = retrieve.iter().chain(style).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = vec![all[0] - 1e-3];
    candidates.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(*all.last().unwrap());
    let mut best = TypeThreshold {
        tau: candidates[0],
        clean: false,
        accuracy: type_accuracy(retrieve, style, candidates[0]),
    };
    for &tau in &candidates[1..] {
        let accuracy = type_accuracy(retrieve, style, tau);
        if accuracy > best.accuracy {
            best = TypeThreshold {
                tau,
                clean: false,
                accuracy,
            };
        }
    }
    Ok(best)
}

/// Retrieve/style boundary on `S_w` for the retrieve- and style-labelled
/// entries of `set`; other labels are ignored.
pub fn select_type_threshold(set: &LabeledScoreSet, omega: [f64; 3]) -> Result<TypeThreshold> {
    let pick = |label| -> Vec<f64> {
        set.entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.weighted(omega))
            .collect()
    };
    select_type_threshold_scores(&pick(ScoreLabel::Retrieve), &pick(ScoreLabel::Style))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub tau_grid: ThresholdGrid,
    pub weight_step: f64,
    pub objective: Objective,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            tau_grid: ThresholdGrid::default(),
            weight_step: 0.02,
            objective: Objective::Accuracy,
        }
    }
}

/// Chosen operating point plus the evidence behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub decision: DecisionConfig,
    pub objective: Objective,
    pub tau1_accuracy: f64,
    pub tau1_f1: f64,
    pub weight_accuracy: f64,
    /// `None` when the input had no retrieve/style labels and `tau2` kept its default.
    pub tau2_clean: Option<bool>,
    pub n_entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRun {
    pub sweep: SweepResult,
    pub weights: WeightGridResult,
    pub type_threshold: Option<TypeThreshold>,
    pub summary: CalibrationSummary,
}

/// Picks `tau1` by sweeping `s_fus`, `omega` by simplex search, and
/// `tau2` on the weighted score of retrieve/style pairs when present.
pub fn calibrate(set: &LabeledScoreSet, settings: &CalibrationSettings) -> Result<CalibrationRun> {
    let grid = settings.tau_grid.values()?;
    let sweep = sweep_fused(set, &grid, settings.objective)?;
    let weights = grid_search_weights(set, settings.weight_step, &grid, settings.objective)?;
    let omega = weights.best.omega();
    let has_types = set.entries.iter().any(|e| e.label == ScoreLabel::Retrieve)
        && set.entries.iter().any(|e| e.label == ScoreLabel::Style);
    let type_threshold = if has_types {
        Some(select_type_threshold(set, omega)?)
    } else {
        None
    };
    let decision = DecisionConfig {
        tau1: sweep.best_tau,
        tau2: type_threshold.map_or(DEFAULT_TAU2, |t| t.tau),
        omega,
    };
    let violations = validate_config(&decision);
    if !violations.is_empty() {
        let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Degenerate(format!(
            "calibrated operating point is invalid: {}",
            msg.join("; ")
        )));
    }
    let summary = CalibrationSummary {
        decision,
        objective: settings.objective,
        tau1_accuracy: sweep.best_accuracy,
        tau1_f1: sweep.best_f1,
        weight_accuracy: weights.best.accuracy,
        tau2_clean: type_threshold.map(|t| t.clean),
        n_entries: set.entries.len(),
    };
    Ok(CalibrationRun {
        sweep,
        weights,
        type_threshold,
        summary,
    })
}

pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `tau,accuracy,f1` rows.
pub fn emit_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    if result.points.is_empty() {
        return Err(Error::data("sweep result has no grid points"));
    }
    let mut out = String::from("tau,accuracy,f1\n");
    for p in &result.points {
        out.push_str(&format!("{},{},{}\n", p.tau, p.accuracy, p.f1));
    }
    write_atomic(path, out.as_bytes())
}

/// Writes `w_vis,w_clip,accuracy` rows.
pub fn emit_weight_csv(result: &WeightGridResult, path: &Path) -> Result<()> {
    if result.cells.is_empty() {
        return Err(Error::data("weight grid result has no cells"));
    }
    let mut out = String::from("w_vis,w_clip,accuracy\n");
    for c in &result.cells {
        out.push_str(&format!("{},{},{}\n", c.w_vis, c.w_clip, c.accuracy));
    }
    write_atomic(path, out.as_bytes())
}

fn save_rgb(path: &Path, width: u32, height: u32, raw: Vec<u8>) -> Result<()> {
    let img = ::image::RgbImage::from_raw(width, height, raw).expect("buffer sized");
    img.save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Best-effort accuracy-vs-threshold line plot.
pub fn render_sweep_png(result: &SweepResult, path: &Path) -> Result<()> {
    const W: usize = 400;
    const H: usize = 240;
    if result.points.len() < 2 {
        return Err(Error::data("need at least two sweep points to plot"));
    }
    let mut raw = vec![255u8; W * H * 3];
    let mut put = |x: usize, y: usize, rgb: [u8; 3]| {
        if x < W && y < H {
            raw[(y * W + x) * 3..(y * W + x) * 3 + 3].copy_from_slice(&rgb);
        }
    };
    let n = result.points.len();
    let to_y = |acc: f64| ((1.0 - acc) * (H - 1) as f64).round() as usize;
    for x in 0..W {
        let i = x * (n - 1) / (W - 1);
        let y = to_y(result.points[i].accuracy);
        for dy in 0..2 {
            put(x, (y + dy).min(H - 1), [20, 60, 200]);
        }
    }
    let best = result
        .points
        .iter()
        .position(|p| p.tau == result.best_tau)
        .unwrap_or(0);
    let bx = best * (W - 1) / (n - 1);
    for y in 0..H {
        put(bx, y, [200, 40, 40]);
    }
    save_rgb(path, W as u32, H as u32, raw)
}

/// Best-effort accuracy heatmap over `(w_vis, w_clip)`.
pub fn render_weight_png(result: &WeightGridResult, path: &Path) -> Result<()> {
    const CELL: usize = 8;
    let n = steps_per_unit(result.step, "weight")? as usize;
    let side = (n + 1) * CELL;
    let mut raw = vec![255u8; side * side * 3];
    let (lo, hi) = result
        .cells
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| {
            (l.min(c.accuracy), h.max(c.accuracy))
        });
    let span = (hi - lo).max(1e-12);
    for c in &result.cells {
        let i = (c.w_vis * n as f64).round() as usize;
        let j = (c.w_clip * n as f64).round() as usize;
        let t = (c.accuracy - lo) / span;
        let rgb = [(255.0 * t) as u8, 40, (255.0 * (1.0 - t)) as u8];
        // w_clip grows upward, w_vis to the right
        let y0 = (n - j) * CELL;
        for y in y0..y0 + CELL {
            for x in i * CELL..(i + 1) * CELL {
                raw[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    save_rgb(path, side as u32, side as u32, raw)
}
