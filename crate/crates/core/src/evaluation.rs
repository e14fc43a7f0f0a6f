//! n-way k-shot evaluation: per-task seeded episodes, binomial standard
//! errors, the nearest-neighbour baseline and context-length sweeps.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use shotlab_tensor::{Scalar, Tensor};

use crate::datasets::{Image, LabeledImageSet};
use crate::encoders::Encoder;
use crate::episodes::{batch_episodes, sample_episode, Episode};
use crate::error::{validation, Result};
use crate::icl::{icl_forward, predict, IclModel};
use crate::seed::{derive_rng, derive_seed, rng_from};

/// Maps episodes to predicted label slots. `task_seeds[i]` is the seed the
/// i-th episode was sampled from; stochastic predictors derive from it.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict_batch(&self, episodes: &[Episode], task_seeds: &[u64]) -> Result<Vec<usize>>;
}

pub struct IclPredictor<'a, T: Scalar> {
    pub model: &'a IclModel<T>,
    pub encoder: &'a Encoder<T>,
}

impl<T: Scalar> Predictor for IclPredictor<'_, T> {
    fn name(&self) -> &str {
        "icl"
    }

    fn predict_batch(&self, episodes: &[Episode], _: &[u64]) -> Result<Vec<usize>> {
        let batch = batch_episodes(episodes.to_vec())?;
        let logits = icl_forward(self.model, &batch, self.encoder)?;
        episodes
            .iter()
            .enumerate()
            .map(|(i, e)| predict(logits.row(i), &e.active_slots()))
            .collect()
    }
}

pub struct KnnPredictor<'a, T: Scalar> {
    pub encoder: &'a Encoder<T>,
    pub k_neighbors: usize,
}

impl<T: Scalar> Predictor for KnnPredictor<'_, T> {
    fn name(&self) -> &str {
        "knn"
    }

    fn predict_batch(&self, episodes: &[Episode], _: &[u64]) -> Result<Vec<usize>> {
        let images: Vec<&Image> = episodes.iter().flat_map(|e| e.images().map(|i| &**i)).collect();
        let emb = self.encoder.encode_chunked(&images, 256)?;
        let d = emb.cols();
        let mut row = 0;
        let mut out = Vec::with_capacity(episodes.len());
        for e in episodes {
            let m = e.m();
            let sup = Tensor::new(vec![m, d], emb.data()[row * d..(row + m) * d].to_vec());
            let q = emb.row(row + m);
            out.push(knn_predict(&sup, &e.support_slots(), q, self.k_neighbors)?);
            row += m + 1;
        }
        Ok(out)
    }
}

/// Always answers the true slot.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict_batch(&self, episodes: &[Episode], _: &[u64]) -> Result<Vec<usize>> {
        Ok(episodes.iter().map(Episode::query_slot).collect())
    }
}

/// Guesses uniformly among the active slots.
pub struct RandomPredictor;

impl Predictor for RandomPredictor {
    fn name(&self) -> &str {
        "random"
    }

    fn predict_batch(&self, episodes: &[Episode], task_seeds: &[u64]) -> Result<Vec<usize>> {
        Ok(episodes
            .iter()
            .zip(task_seeds)
            .map(|(e, &s)| {
                let active = e.active_slots();
                active[derive_rng(s, "random-guess", &[]).gen_range(0..active.len())]
            })
            .collect())
    }
}

/// Majority slot among the `k_neighbors` nearest supports (Euclidean).
/// Distance ties go to the lower support index; a majority tie goes to the
/// tied slot holding the nearest neighbour.
pub fn knn_predict<T: Scalar>(
    support_embeddings: &Tensor<T>,
    support_slots: &[usize],
    query: &[T],
    k_neighbors: usize,
) -> Result<usize> {
    let m = support_slots.len();
    if k_neighbors == 0 || m < k_neighbors {
        return Err(validation(format!("{k_neighbors} neighbours requested from {m} supports")));
    }
    if support_embeddings.rows() != m || support_embeddings.cols() != query.len() {
        return Err(validation("support embeddings do not match slots or query width"));
    }
    let mut order: Vec<(f64, usize)> = (0..m)
        .map(|i| {
            let d: f64 = support_embeddings
                .row(i)
                .iter()
                .zip(query)
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            (d, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = &order[..k_neighbors];
    let count = |slot: usize| nearest.iter().filter(|&&(_, i)| support_slots[i] == slot).count();
    let best = nearest.iter().map(|&(_, i)| count(support_slots[i])).max().unwrap_or(0);
    let winner = nearest
        .iter()
        .map(|&(_, i)| support_slots[i])
        .find(|&s| count(s) == best)
        .expect("at least one neighbour");
    Ok(winner)
}

/// Mean and binomial standard error `sqrt(p (1 - p) / N)`.
pub fn mean_and_se(outcomes: &[bool]) -> Result<(f64, f64)> {
    if outcomes.is_empty() {
        return Err(validation("no outcomes to average"));
    }
    let n = outcomes.len() as f64;
    let mean = outcomes.iter().filter(|&&o| o).count() as f64 / n;
    Ok((mean, (mean * (1.0 - mean) / n).sqrt()))
}

/// `"20.8 ± 0.6"`: percentages with one decimal, rounded half up.
pub fn format_percent(mean: f64, std_err: f64) -> String {
    let r = |x: f64| (x * 1000.0 + 1e-9).round() / 10.0;
    format!("{:.1} ± {:.1}", r(mean), r(std_err))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub dataset: String,
    pub n: usize,
    pub k: usize,
    pub tasks: usize,
    pub mean_acc: f64,
    pub std_err: f64,
    pub seed: u64,
    pub model_id: String,
    pub predictor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    #[serde(skip)]
    pub per_task_outcomes: Vec<bool>,
}

impl AccuracyReport {
    pub fn formatted(&self) -> String {
        format_percent(self.mean_acc, self.std_err)
    }
}

const EVAL_CHUNK: usize = 16;

pub fn task_seed(seed: u64, task: usize) -> u64 {
    derive_seed(seed, "eval-task", &[task as u64])
}

/// Runs `tasks` independently seeded episodes through `predictor`.
pub fn evaluate(
    predictor: &dyn Predictor,
    dataset: &LabeledImageSet,
    n: usize,
    k: usize,
    tasks: usize,
    n_max: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    if tasks == 0 {
        return Err(validation("evaluation needs at least one task"));
    }
    let starts: Vec<usize> = (0..tasks).step_by(EVAL_CHUNK).collect();
    let chunks: Vec<Vec<bool>> = starts
        .par_iter()
        .map(|&start| -> Result<Vec<bool>> {
            let end = (start + EVAL_CHUNK).min(tasks);
            let seeds: Vec<u64> = (start..end).map(|t| task_seed(seed, t)).collect();
            let episodes = seeds
                .iter()
                .map(|&s| sample_episode(dataset, n, k, n_max, &mut rng_from(s)))
                .collect::<Result<Vec<_>>>()?;
            let preds = predictor.predict_batch(&episodes, &seeds)?;
            Ok(episodes.iter().zip(preds).map(|(e, p)| e.query_slot() == p).collect())
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<bool> = chunks.into_iter().flatten().collect();
    let (mean_acc, std_err) = mean_and_se(&outcomes)?;
    Ok(AccuracyReport {
        dataset: String::new(),
        n,
        k,
        tasks,
        mean_acc,
        std_err,
        seed,
        model_id: String::new(),
        predictor: predictor.name().to_string(),
        created_at: None,
        per_task_outcomes: outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mean_acc: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub n: usize,
    pub tasks: usize,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

pub fn sweep_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, "sweep", &[k as u64])
}

/// One [`evaluate`] per shot count, each with a seed derived from `k`.
pub fn context_sweep(
    predictor: &dyn Predictor,
    dataset: &LabeledImageSet,
    n: usize,
    k_values: &[usize],
    tasks: usize,
    n_max: usize,
    seed: u64,
) -> Result<SweepTable> {
    if k_values.is_empty() || k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(validation("k values must be non-empty and strictly increasing"));
    }
    let rows = k_values
        .iter()
        .map(|&k| {
            let r = evaluate(predictor, dataset, n, k, tasks, n_max, sweep_seed(seed, k))?;
            Ok(SweepRow { k, mean_acc: r.mean_acc, std_err: r.std_err })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { n, tasks, seed, rows })
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,mean_acc,std_err\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.k, r.mean_acc, r.std_err);
        }
        s
    }

    /// Accuracy against shots as a standalone SVG line plot with SE bars.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 48.0);
        let kmin = self.rows.first().map_or(1, |r| r.k) as f64;
        let kmax = self.rows.last().map_or(1, |r| r.k) as f64;
        let x = |k: usize| pad + (k as f64 - kmin) / (kmax - kmin).max(1.0) * (w - 2.0 * pad);
        let y = |a: f64| h - pad - a.clamp(0.0, 1.0) * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{pad} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
            t = pad,
            b = h - pad,
            r = w - pad
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{}%</text>"#,
                pad - 6.0,
                y(tick) + 4.0,
                (tick * 100.0) as u32
            );
        }
        for r in &self.rows {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
                x(r.k),
                h - pad + 16.0,
                r.k
            );
            let _ = writeln!(
                s,
                r#"<line x1="{0:.1}" x2="{0:.1}" y1="{1:.1}" y2="{2:.1}" stroke="gray"/>"#,
                x(r.k),
                y(r.mean_acc - r.std_err),
                y(r.mean_acc + r.std_err)
            );
        }
        let points: Vec<String> = self.rows.iter().map(|r| format!("{:.1},{:.1}", x(r.k), y(r.mean_acc))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, points.join(" "));
        for r in &self.rows {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, x(r.k), y(r.mean_acc));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">shots per class (k), {}-way, {} tasks</text>"#,
            w / 2.0,
            h - 10.0,
            self.n,
            self.tasks
        );
        s.push_str("</svg>\n");
        s
    }
}
