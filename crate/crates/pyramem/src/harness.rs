//! Evaluation harness: segmentation and depth metrics, scale-augmented
//! prediction, a seeded scene generator, and the continual-learning
//! scenario runner with its retention report.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::grid::GridTensor;
use crate::labels::{LabelKind, LabelMap};
use crate::ptns::INVALID_CLASS;
use crate::memory::MemoryStore;
use crate::predict::{predict_input, PredictSettings};
use crate::pyramid::FeaturePyramid;
use crate::resample::{center_crop, linear_resample, reflect_pad_to};
use crate::{Error, Result};

/// Micro intersection and union counts for `classes`, summed over nodes.
///
/// Nodes that are masked out or carry an invalid ground-truth label do not
/// contribute. An invalid prediction at a counted node misses every class,
/// so it grows the union without growing the intersection.
pub fn miou_counts(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: &[u8],
    ignore: Option<&[bool]>,
) -> Result<(u64, u64)> {
    if matches!(pred.kind(), LabelKind::Scalar) || matches!(gt.kind(), LabelKind::Scalar) {
        return Err(Error::domain("intersection over union needs class labels"));
    }
    if pred.res() != gt.res() {
        return Err(Error::domain(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.res(),
            gt.res()
        )));
    }
    let nodes = gt.node_count();
    if ignore.is_some_and(|m| m.len() != nodes) {
        return Err(Error::domain("ignore mask length does not match the grid"));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for v in 0..nodes {
        if ignore.is_some_and(|m| m[v]) || !gt.is_valid(v) {
            continue;
        }
        let g = gt.argmax_class(v);
        let p = pred.argmax_class(v);
        for &c in classes {
            let in_g = g == Some(c);
            let in_p = p == Some(c);
            inter += u64::from(in_g && in_p);
            union += u64::from(in_g || in_p);
        }
    }
    Ok((inter, union))
}

/// Micro-averaged intersection over union; NaN when nothing was counted.
pub fn miou(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: &[u8],
    ignore: Option<&[bool]>,
) -> Result<f64> {
    let (inter, union) = miou_counts(pred, gt, classes, ignore)?;
    if union == 0 {
        return Ok(f64::NAN);
    }
    Ok(inter as f64 / union as f64)
}

/// Root mean squared error over nodes where both maps are valid and not
/// masked out; NaN when no node qualifies.
pub fn rmse_depth(pred: &LabelMap, gt: &LabelMap, ignore: Option<&[bool]>) -> Result<f64> {
    if !matches!(pred.kind(), LabelKind::Scalar) || !matches!(gt.kind(), LabelKind::Scalar) {
        return Err(Error::domain("depth error needs scalar labels on both sides"));
    }
    if pred.res() != gt.res() {
        return Err(Error::domain(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.res(),
            gt.res()
        )));
    }
    let nodes = gt.node_count();
    if ignore.is_some_and(|m| m.len() != nodes) {
        return Err(Error::domain("ignore mask length does not match the grid"));
    }
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for v in 0..nodes {
        if ignore.is_some_and(|m| m[v]) {
            continue;
        }
        let (Some(p), Some(g)) = (pred.scalar_value(v), gt.scalar_value(v)) else {
            continue;
        };
        let d = f64::from(p) - f64::from(g);
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Ok(f64::NAN);
    }
    Ok((sum / count as f64).sqrt())
}

fn map_panel(map: &LabelMap) -> Result<GridTensor> {
    match map {
        LabelMap::Categorical { res, classes, probs } => {
            GridTensor::new(res.clone(), *classes, probs.clone())
        }
        LabelMap::Scalar { res, values } => GridTensor::new(res.clone(), 1, values.clone()),
        LabelMap::Classes { .. } => {
            Err(Error::domain("scale averaging needs probabilities or scalars"))
        }
    }
}

fn panel_map(panel: GridTensor, template: &LabelMap) -> Result<LabelMap> {
    let res = panel.res().to_vec();
    match template {
        LabelMap::Categorical { classes, .. } => {
            let mut map = LabelMap::categorical(res, *classes, panel.into_data())?;
            map.renormalize_categorical();
            Ok(map)
        }
        LabelMap::Scalar { .. } => LabelMap::scalar(res, panel.into_data()),
        LabelMap::Classes { .. } => unreachable!("panels only come from soft maps"),
    }
}

fn scaled_res(res: &[usize], factor: f64) -> Vec<usize> {
    res.iter()
        .map(|&r| ((r as f64 * factor).round() as usize).max(1))
        .collect()
}

/// Predicts under a set of input scales and averages the per-scale fields.
///
/// Each scale in `(0, 1]` shrinks the input, pads it back to the working
/// resolution by reflection, predicts, and registers the prediction onto
/// the original grid by rescaling and center-cropping. Nodes average over
/// the scales that produced a valid value there. A lone scale of one
/// returns the plain prediction unchanged.
pub fn tta_predict(
    store: &MemoryStore,
    input: &GridTensor,
    scales: &[f64],
    settings: &PredictSettings,
) -> Result<LabelMap> {
    if scales.is_empty() {
        return Err(Error::domain("scale set is empty"));
    }
    if let Some(&s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0 && **s <= 1.0)) {
        return Err(Error::domain(format!("scale {s} is outside (0, 1]")));
    }
    if scales == [1.0] {
        return Ok(predict_input(store, input, settings)?.labels);
    }
    let res = input.res().to_vec();
    let mut acc: Option<(Vec<f64>, Vec<u32>, LabelMap)> = None;
    for &s in scales {
        let down = linear_resample(input, &scaled_res(&res, s), false)?;
        let padded = reflect_pad_to(&down, &res)?;
        let pred = predict_input(store, &padded, settings)?.labels;
        let panel = map_panel(&pred)?;
        let up = linear_resample(&panel, &scaled_res(&res, 1.0 / s), true)?;
        let registered = center_crop(&up, &res)?;
        let channels = registered.channels();
        let (sums, hits, _) = acc.get_or_insert_with(|| {
            (
                vec![0.0; registered.node_count() * channels],
                vec![0; registered.node_count()],
                pred.clone(),
            )
        });
        for v in 0..registered.node_count() {
            let row = registered.node(v);
            if row[0].is_nan() {
                continue;
            }
            hits[v] += 1;
            for (a, x) in sums[v * channels..(v + 1) * channels].iter_mut().zip(row) {
                *a += f64::from(*x);
            }
        }
    }
    let (sums, hits, template) = acc.expect("at least one scale ran");
    let channels = sums.len() / hits.len();
    let mut data = vec![f32::NAN; sums.len()];
    for (v, &h) in hits.iter().enumerate() {
        if h == 0 {
            continue;
        }
        for (d, a) in data[v * channels..(v + 1) * channels]
            .iter_mut()
            .zip(&sums[v * channels..(v + 1) * channels])
        {
            *d = (a / f64::from(h)) as f32;
        }
    }
    panel_map(GridTensor::new(res, channels, data)?, &template)
}

/// A generated input and its ground-truth class map.
#[derive(Debug, Clone)]
pub struct ShapeScene {
    /// Three-channel rendered input.
    pub input: GridTensor,
    /// Per-node class labels.
    pub gt: LabelMap,
}

fn class_palette(class: u8) -> [f32; 3] {
    let c = f64::from(class);
    [
        (0.17 + 0.61 * c).fract() as f32,
        (0.43 + 0.29 * c).fract() as f32,
        (0.71 + 0.47 * c).fract() as f32,
    ]
}

/// Draws a two-axis scene of colored rectangles and discs over a dark
/// textured background. All randomness comes from `rng` in a fixed order,
/// so equal seeds reproduce the scene exactly.
pub fn shape_scene(
    res: &[usize],
    class_ids: &[u8],
    classes: usize,
    background: u8,
    shapes: usize,
    rng: &mut ChaCha20Rng,
) -> Result<ShapeScene> {
    if res.len() != 2 {
        return Err(Error::domain("scene generation is two-axis only"));
    }
    if class_ids.is_empty() || shapes == 0 {
        return Err(Error::domain("a scene needs at least one class and one shape"));
    }
    if usize::from(background) >= classes
        || class_ids
            .iter()
            .any(|&c| usize::from(c) >= classes || c == background)
    {
        return Err(Error::domain("scene classes must be distinct ids below the class count"));
    }
    let nodes = res[0] * res[1];
    let mut input = GridTensor::zeros(res.to_vec(), 3)?;
    for v in 0..nodes {
        for (ch, base) in input.node_mut(v).iter_mut().zip([0.10f32, 0.12, 0.14]) {
            *ch = base + rng.gen_range(0.0..0.15);
        }
    }
    let mut idx = vec![background; nodes];
    for _ in 0..shapes {
        let class = class_ids[rng.gen_range(0..class_ids.len())];
        let disc = rng.gen_bool(0.5);
        let c0 = rng.gen_range(0..res[0]);
        let c1 = rng.gen_range(0..res[1]);
        let r0 = rng.gen_range(res[0].div_ceil(8).max(1)..=res[0].div_ceil(3).max(1));
        let r1 = rng.gen_range(res[1].div_ceil(8).max(1)..=res[1].div_ceil(3).max(1));
        let palette = class_palette(class);
        let jitter: [f32; 3] = [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        for x0 in c0.saturating_sub(r0)..(c0 + r0 + 1).min(res[0]) {
            for x1 in c1.saturating_sub(r1)..(c1 + r1 + 1).min(res[1]) {
                if disc {
                    let d0 = (x0 as f64 - c0 as f64) / r0 as f64;
                    let d1 = (x1 as f64 - c1 as f64) / r1 as f64;
                    if d0 * d0 + d1 * d1 > 1.0 {
                        continue;
                    }
                }
                let v = x0 * res[1] + x1;
                idx[v] = class;
                for ((ch, p), j) in input.node_mut(v).iter_mut().zip(palette).zip(jitter) {
                    *ch = (p + j + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                }
            }
        }
    }
    let gt = LabelMap::classes(res.to_vec(), classes, idx)?;
    Ok(ShapeScene { input, gt })
}

/// Re-labels every node whose class is not in `available` as invalid.
/// Background is never available, so it is stored as invalid too.
pub fn restrict_labels(gt: &LabelMap, available: &[u8], background: u8) -> Result<LabelMap> {
    if matches!(gt.kind(), LabelKind::Scalar) {
        return Err(Error::domain("class restriction needs class labels"));
    }
    let LabelKind::Classes(classes) = gt.kind() else {
        unreachable!("scalar kind was rejected above");
    };
    let idx = (0..gt.node_count())
        .map(|v| match gt.argmax_class(v) {
            Some(c) if c != background && available.contains(&c) => c,
            _ => INVALID_CLASS,
        })
        .collect();
    LabelMap::classes(gt.res().to_vec(), classes, idx)
}

/// Class introduction plan of a continual-learning run.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    /// Classes that become available at each step; disjoint across steps.
    pub steps: Vec<Vec<u8>>,
    /// Background class id, never stored and never scored.
    pub background: u8,
}

impl ScenarioSpec {
    fn validate(&self, classes: usize) -> Result<()> {
        if self.steps.is_empty() || self.steps.iter().any(Vec::is_empty) {
            return Err(Error::domain("every scenario step must introduce a class"));
        }
        if usize::from(self.background) >= classes {
            return Err(Error::domain("background id is outside the label space"));
        }
        let mut seen = BTreeSet::new();
        for c in self.steps.iter().flatten() {
            if usize::from(*c) >= classes {
                return Err(Error::domain(format!("class {c} is outside the label space")));
            }
            if *c == self.background || !seen.insert(*c) {
                return Err(Error::domain(format!(
                    "class {c} repeats or collides with the background"
                )));
            }
        }
        Ok(())
    }

    /// Classes scored on a step's evaluation split: everything introduced
    /// up to and including that step.
    pub fn seen_classes(&self, step: usize) -> Vec<u8> {
        self.steps[..=step]
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<u8>>()
            .into_iter()
            .collect()
    }
}

/// Training and evaluation data of one scenario step. Ground truth carries
/// the full labeling; the runner restricts it to the available classes.
#[derive(Debug, Clone)]
pub struct StepData {
    /// Samples to consolidate or relabel, as `(id, input, ground truth)`.
    pub train: Vec<(String, GridTensor, LabelMap)>,
    /// Held-out pairs scored after every step.
    pub eval: Vec<(GridTensor, LabelMap)>,
}

/// Runner knobs.
#[derive(Debug, Clone, Default)]
pub struct ScenarioConfig {
    /// Sample ceiling of the store; additions past it are skipped.
    pub memory_cap: Option<usize>,
    /// Prediction settings used for every evaluation.
    pub settings: PredictSettings,
    /// Scale set for augmented prediction; `None` predicts plainly.
    pub scales: Option<Vec<f64>>,
}

/// One label update applied to an already stored sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationRecord {
    /// Step at which the update ran.
    pub step: usize,
    /// Stored sample id.
    pub id: String,
    /// Leaf labels the update actually rewrote.
    pub changed: usize,
}

/// Retention of one step's evaluation split.
#[derive(Debug, Clone)]
pub struct StepRetention {
    /// Step index.
    pub step: usize,
    /// Classes scored on this step's evaluation split.
    pub classes: Vec<u8>,
    /// Score right after the step was learned.
    pub initial: f64,
    /// Score after the final step.
    pub last: f64,
    /// `last - initial`; absent on the final step, which has no later
    /// evaluation.
    pub delta: Option<f64>,
}

/// Full record of a continual-learning run.
#[derive(Debug, Clone)]
pub struct RetentionReport {
    /// `matrix[i][j]` scores step `j`'s evaluation split after learning
    /// step `i`, always over step `j`'s own class set.
    pub matrix: Vec<Vec<f64>>,
    /// Retention summary per step.
    pub per_step: Vec<StepRetention>,
    /// Every label update, in execution order.
    pub mutations: Vec<MutationRecord>,
    /// Additions refused by the memory cap, as `(step, id)`.
    pub skipped_adds: Vec<(usize, String)>,
    /// Mean of the per-step deltas; NaN for a single-step run.
    pub delta_avg: f64,
    /// Population standard deviation of the per-step deltas.
    pub delta_std: f64,
}

fn eval_step(
    store: &MemoryStore,
    data: &StepData,
    classes: &[u8],
    background: u8,
    config: &ScenarioConfig,
) -> Result<f64> {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (input, gt) in &data.eval {
        let pred = match &config.scales {
            Some(scales) => tta_predict(store, input, scales, &config.settings)?,
            None => predict_input(store, input, &config.settings)?.labels,
        };
        let ignore: Vec<bool> = (0..gt.node_count())
            .map(|v| !gt.is_valid(v) || gt.argmax_class(v) == Some(background))
            .collect();
        let (i, u) = miou_counts(&pred, gt, classes, Some(&ignore))?;
        inter += i;
        union += u;
    }
    if union == 0 {
        return Ok(f64::NAN);
    }
    Ok(inter as f64 / union as f64)
}

/// Plays a scenario against `store`: per step, restricts the training
/// labels to the classes available so far, updates stored samples or adds
/// new ones under the cap, then scores every step seen so far.
pub fn run_scenario(
    spec: &ScenarioSpec,
    store: &mut MemoryStore,
    steps: &[StepData],
    config: &ScenarioConfig,
) -> Result<RetentionReport> {
    let LabelKind::Classes(classes) = store.label_kind() else {
        return Err(Error::domain("scenario runs need a class-labeled store"));
    };
    spec.validate(classes)?;
    if steps.len() != spec.steps.len() {
        return Err(Error::domain(format!(
            "scenario has {} steps but {} data bundles",
            spec.steps.len(),
            steps.len()
        )));
    }
    let mut matrix: Vec<Vec<f64>> = Vec::with_capacity(steps.len());
    let mut mutations = Vec::new();
    let mut skipped_adds = Vec::new();
    for (i, data) in steps.iter().enumerate() {
        let available = spec.seen_classes(i);
        for (id, input, gt) in &data.train {
            let restricted = restrict_labels(gt, &available, spec.background)?;
            if store.position(id).is_some() {
                let mask: Vec<bool> = (0..restricted.node_count())
                    .map(|v| restricted.is_valid(v))
                    .collect();
                let changed = store.update_labels(id, &restricted, Some(&mask))?;
                mutations.push(MutationRecord {
                    step: i,
                    id: id.clone(),
                    changed,
                });
            } else if config.memory_cap.is_some_and(|cap| store.len() >= cap) {
                skipped_adds.push((i, id.clone()));
            } else {
                let extractor = store
                    .extractor()
                    .ok_or_else(|| Error::domain("scenario store records no extractor"))?
                    .clone();
                let pyramid =
                    crate::features::synth_extract(input, store.schedule(), &extractor)?;
                store.consolidate_add(id, &pyramid, &restricted, &format!("step {i}"))?;
            }
        }
        let mut row = Vec::with_capacity(i + 1);
        for (j, past) in steps[..=i].iter().enumerate() {
            row.push(eval_step(
                store,
                past,
                &spec.seen_classes(j),
                spec.background,
                config,
            )?);
        }
        matrix.push(row);
    }
    let last = steps.len() - 1;
    let per_step: Vec<StepRetention> = (0..steps.len())
        .map(|j| StepRetention {
            step: j,
            classes: spec.seen_classes(j),
            initial: matrix[j][j],
            last: matrix[last][j],
            delta: (j < last).then(|| matrix[last][j] - matrix[j][j]),
        })
        .collect();
    let deltas: Vec<f64> = per_step.iter().filter_map(|s| s.delta).collect();
    let (delta_avg, delta_std) = if deltas.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let avg = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var = deltas.iter().map(|d| (d - avg) * (d - avg)).sum::<f64>() / deltas.len() as f64;
        (avg, var.sqrt())
    };
    Ok(RetentionReport {
        matrix,
        per_step,
        mutations,
        skipped_adds,
        delta_avg,
        delta_std,
    })
}

/// Wall-clock cost of consolidating `samples` into `store`.
#[derive(Debug, Clone)]
pub struct TimingStats {
    /// Samples consolidated.
    pub n: usize,
    /// Mean seconds per sample; NaN when nothing ran.
    pub mean_s: f64,
    /// Median seconds per sample; NaN when nothing ran.
    pub median_s: f64,
    /// Seconds over all samples.
    pub total_s: f64,
}

/// Times each consolidation individually; learning time is additive, so
/// the projected cost of `n` samples is `n` times the mean.
pub fn measure_learning_time(
    store: &mut MemoryStore,
    samples: Vec<(String, FeaturePyramid, LabelMap)>,
) -> Result<TimingStats> {
    let mut times = Vec::with_capacity(samples.len());
    for (id, pyramid, labels) in &samples {
        let t0 = Instant::now();
        store.consolidate_add(id, pyramid, labels, "timing")?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let n = times.len();
    if n == 0 {
        return Ok(TimingStats {
            n: 0,
            mean_s: f64::NAN,
            median_s: f64::NAN,
            total_s: 0.0,
        });
    }
    let total_s = times.iter().sum::<f64>();
    let mut sorted = times;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let median_s = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(TimingStats {
        n,
        mean_s: total_s / n as f64,
        median_s,
        total_s,
    })
}

/// Formats a metric value; NaN prints as `no-data`.
pub fn fmt_metric(value: f64) -> String {
    if value.is_nan() {
        "no-data".to_string()
    } else {
        format!("{value:.6}")
    }
}

/// One `key value` line per pair.
pub fn kv_lines(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push(' ');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Renders a retention report as line-oriented text.
pub fn retention_table(report: &RetentionReport) -> String {
    let mut out = String::from("step classes initial last delta\n");
    for s in &report.per_step {
        let classes = s
            .classes
            .iter()
            .map(u8::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let delta = match s.delta {
            Some(d) => fmt_metric(d),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            s.step,
            classes,
            fmt_metric(s.initial),
            fmt_metric(s.last),
            delta
        ));
    }
    out.push_str(&format!("delta_avg {}\n", fmt_metric(report.delta_avg)));
    out.push_str(&format!("delta_std {}\n", fmt_metric(report.delta_std)));
    for m in &report.mutations {
        out.push_str(&format!(
            "mutation step={} id={} changed={}\n",
            m.step, m.id, m.changed
        ));
    }
    for (step, id) in &report.skipped_adds {
        out.push_str(&format!("skipped_add step={step} id={id}\n"));
    }
    out
}
