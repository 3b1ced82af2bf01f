//! Post-run analytics over the structured log: accuracy-within-budget,
//! the layer-pair affinity of negative rewards, and attention
//! differences between the best and the degrading layers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::log::RunRecord;
use super::search::BestModel;
use super::RunError;
use crate::space::LayerKind;

/// Best accuracy reachable within a wall-clock budget, with the spread
/// of the top-k models inside that budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcctimeReport {
    pub budget_s: f64,
    pub models_in_budget: usize,
    pub best_accuracy: Option<f64>,
    pub top_k: usize,
    pub top_k_mean: Option<f64>,
    pub top_k_sd: Option<f64>,
    pub status: String,
}

pub const NO_MODELS_IN_BUDGET: &str = "no models in budget";

/// Distinct models (by digest) completed within `budget_s`, best first.
fn models_in_budget(records: &[RunRecord], budget_s: f64) -> Vec<BestModel> {
    let mut by_digest: BTreeMap<String, BestModel> = BTreeMap::new();
    for r in records {
        if let RunRecord::Model { arch_json, arch_digest, accuracy, layers, param_count, t_s, .. } = r
        {
            if *t_s <= budget_s {
                by_digest.entry(arch_digest.clone()).or_insert_with(|| BestModel {
                    digest: arch_digest.clone(),
                    accuracy: *accuracy,
                    layers: *layers,
                    param_count: *param_count,
                    t_s: *t_s,
                    arch_json: arch_json.clone(),
                });
            }
        }
    }
    let mut models: Vec<BestModel> = by_digest.into_values().collect();
    models.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.t_s.total_cmp(&b.t_s)));
    models
}

pub fn metric_acctime(records: &[RunRecord], budget_s: f64, top_k: usize) -> AcctimeReport {
    let models = models_in_budget(records, budget_s);
    if models.is_empty() {
        return AcctimeReport {
            budget_s,
            models_in_budget: 0,
            best_accuracy: None,
            top_k,
            top_k_mean: None,
            top_k_sd: None,
            status: NO_MODELS_IN_BUDGET.to_string(),
        };
    }
    let top: Vec<f64> = models.iter().take(top_k).map(|m| m.accuracy).collect();
    let mean = top.iter().sum::<f64>() / top.len() as f64;
    let sd = if top.len() > 1 {
        (top.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (top.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    AcctimeReport {
        budget_s,
        models_in_budget: models.len(),
        best_accuracy: Some(models[0].accuracy),
        top_k,
        top_k_mean: Some(mean),
        top_k_sd: Some(sd),
        status: "ok".to_string(),
    }
}

/// `(previous layer kind, current layer kind)` histogram over steps with
/// negative reward; first layers pair with the START sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffinityEntry {
    pub prev: String,
    pub current: String,
    pub count: usize,
}

pub const START_SENTINEL: &str = "START";

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv2D => "Conv2D",
        LayerKind::FCL => "FCL",
        LayerKind::MaxPool => "MaxPool",
    }
}

/// Per-rollout step sequences, keyed `(episode, rollout)` and ordered by
/// step index.
fn rollout_steps(records: &[RunRecord]) -> BTreeMap<(usize, usize), Vec<&RunRecord>> {
    let mut map: BTreeMap<(usize, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if let RunRecord::Step { episode, rollout, .. } = r {
            map.entry((*episode, *rollout)).or_default().push(r);
        }
    }
    for steps in map.values_mut() {
        steps.sort_by_key(|r| match r {
            RunRecord::Step { step, .. } => *step,
            _ => unreachable!(),
        });
    }
    map
}

pub fn report_layer_affinity(records: &[RunRecord]) -> Vec<AffinityEntry> {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for steps in rollout_steps(records).values() {
        let mut prev_kind: Option<LayerKind> = None;
        for r in steps {
            let RunRecord::Step { layer, reward, .. } = r else { unreachable!() };
            if *reward < 0.0 {
                let prev = prev_kind.map_or(START_SENTINEL.to_string(), |k| kind_name(k).into());
                *counts.entry((prev, kind_name(layer.kind()).into())).or_insert(0) += 1;
            }
            prev_kind = Some(layer.kind());
        }
    }
    let mut entries: Vec<AffinityEntry> = counts
        .into_iter()
        .map(|((prev, current), count)| AffinityEntry { prev, current, count })
        .collect();
    entries.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.prev.cmp(&b.prev))
            .then_with(|| a.current.cmp(&b.current))
    });
    entries
}

/// Distribution of differences between the attention received by each
/// rollout's best-reward layer and by its negative-reward layers.
///
/// The attention a slot receives is the head-averaged final-block weight
/// on that slot, averaged over every logged acting position that can see
/// it (its own decision row included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiffReport {
    pub count: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// 20 bins over [-1, 1).
    pub histogram: Vec<usize>,
    pub status: String,
}

pub const INSUFFICIENT_DATA: &str = "insufficient data";
pub const ATTN_BINS: usize = 20;

pub fn report_attention_diff(records: &[RunRecord]) -> AttentionDiffReport {
    let mut diffs = Vec::new();
    for steps in rollout_steps(records).values() {
        let parsed: Vec<(usize, f64, &[f64])> = steps
            .iter()
            .map(|r| {
                let RunRecord::Step { step, reward, attention, .. } = r else { unreachable!() };
                (*step, *reward, attention.as_slice())
            })
            .collect();
        if parsed.is_empty() {
            continue;
        }
        // attention received by slot j, averaged over rows that see it
        let slots = parsed.iter().map(|(_, _, a)| a.len()).max().unwrap_or(0);
        let received: Vec<Option<f64>> = (0..slots)
            .map(|j| {
                let vals: Vec<f64> = parsed
                    .iter()
                    .filter(|(k, _, a)| *k >= j && a.len() > j)
                    .map(|(_, _, a)| a[j])
                    .collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect();
        let best = parsed
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _, _)| *k);
        let Some(best_slot) = best else { continue };
        let Some(Some(best_attn)) = received.get(best_slot) else { continue };
        for (k, reward, _) in &parsed {
            if *reward < 0.0 && *k != best_slot {
                if let Some(Some(neg_attn)) = received.get(*k) {
                    diffs.push(best_attn - neg_attn);
                }
            }
        }
    }
    if diffs.is_empty() {
        return AttentionDiffReport {
            count: 0,
            mean: None,
            sd: None,
            histogram: vec![0; ATTN_BINS],
            status: INSUFFICIENT_DATA.to_string(),
        };
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let sd = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let mut histogram = vec![0usize; ATTN_BINS];
    for d in &diffs {
        let pos = ((d + 1.0) / 2.0 * ATTN_BINS as f64).floor();
        let bin = (pos as usize).min(ATTN_BINS - 1);
        histogram[bin] += 1;
    }
    AttentionDiffReport {
        count: diffs.len(),
        mean: Some(mean),
        sd: Some(sd),
        histogram,
        status: "ok".to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportedPaths {
    pub acctime: PathBuf,
    pub layer_affinity: PathBuf,
    pub attention_diff: PathBuf,
    pub best_models: PathBuf,
}

/// Writes `acctime.json`, `layer_affinity.csv`, `attention_diff.csv` and
/// `best_models.json` under `outdir`. All content is rendered before the
/// first byte is written, and the directory is probed for writability
/// first, so a failure cannot leave a partial export behind.
pub fn export_reports(
    records: &[RunRecord],
    outdir: &Path,
    budget_s: f64,
    top_k: usize,
) -> Result<ExportedPaths, RunError> {
    let acctime = metric_acctime(records, budget_s, top_k);
    let affinity = report_layer_affinity(records);
    let attention = report_attention_diff(records);
    let best: Vec<BestModel> = models_in_budget(records, f64::INFINITY)
        .into_iter()
        .take(top_k)
        .collect();

    let acctime_json = serde_json::to_string_pretty(&acctime)?;
    let mut affinity_csv = String::from("prev,current,count\n");
    for e in &affinity {
        affinity_csv.push_str(&format!("{},{},{}\n", e.prev, e.current, e.count));
    }
    let mut attention_csv = String::from("stat,lo,hi,value\n");
    attention_csv.push_str(&format!("count,,,{}\n", attention.count));
    attention_csv.push_str(&format!("mean,,,{}\n", fmt_opt(attention.mean)));
    attention_csv.push_str(&format!("sd,,,{}\n", fmt_opt(attention.sd)));
    for (i, c) in attention.histogram.iter().enumerate() {
        let lo = -1.0 + 2.0 * i as f64 / ATTN_BINS as f64;
        let hi = lo + 2.0 / ATTN_BINS as f64;
        attention_csv.push_str(&format!("bin,{lo},{hi},{c}\n"));
    }
    let best_json = serde_json::to_string_pretty(&best)?;

    fs::create_dir_all(outdir)?;
    let probe = outdir.join(".write_probe");
    fs::write(&probe, b"probe")?;
    fs::remove_file(&probe)?;

    let paths = ExportedPaths {
        acctime: outdir.join("acctime.json"),
        layer_affinity: outdir.join("layer_affinity.csv"),
        attention_diff: outdir.join("attention_diff.csv"),
        best_models: outdir.join("best_models.json"),
    };
    fs::write(&paths.acctime, acctime_json)?;
    fs::write(&paths.layer_affinity, affinity_csv)?;
    fs::write(&paths.attention_diff, attention_csv)?;
    fs::write(&paths.best_models, best_json)?;
    Ok(paths)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}
