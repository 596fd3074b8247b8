//! Evaluation kit: classification metrics, the environment-diversity report,
//! and multi-run comparison tables.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::backbones::{BackboneConfig, ParameterSet, PreparedGraph};
use crate::error::{LisaError, Result};
use crate::generator::{generate_view, GeneratorConfig, SampleMode};
use crate::graph::Graph;
use crate::objectives::{energy_score, env_pair_distance};
use crate::trainer::MetricsRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub roc_auc: Option<f64>,
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(k, _)| k)
        .unwrap_or(0)
}

fn softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z = exps.sum();
    exps.mapv(|e| e / z)
}

/// Rank-based AUC of `scores` against binary `positives`, ties averaged.
fn binary_auc(scores: &[f64], positives: &[bool]) -> f64 {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg_rank;
        }
        i = j + 1;
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    let rank_sum: f64 = (0..n).filter(|&i| positives[i]).map(|i| ranks[i]).sum();
    (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Accuracy, macro-F1 over label classes, and ROC-AUC (binary, or
/// one-vs-rest macro for more classes). Degenerate single-class labels make
/// ROC-AUC undefined and error out.
pub fn metrics(logits: &Array2<f64>, labels: &[usize]) -> Result<Metrics> {
    if logits.nrows() != labels.len() {
        return Err(LisaError::LengthMismatch {
            what: "logit rows vs labels",
            left: logits.nrows(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(LisaError::LengthMismatch { what: "labels", left: 0, right: 0 });
    }
    let num_classes = logits.ncols();
    for &y in labels {
        if y >= num_classes {
            return Err(LisaError::LabelOutOfRange { label: y, num_classes });
        }
    }
    let preds: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
    let accuracy =
        preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;

    // Macro-F1 over the classes that occur in the labels.
    let mut label_classes: Vec<usize> = labels.to_vec();
    label_classes.sort_unstable();
    label_classes.dedup();
    let mut f1_sum = 0.0;
    for &c in &label_classes {
        let tp = preds.iter().zip(labels).filter(|(&p, &y)| p == c && y == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(&p, &y)| p == c && y != c).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|(&p, &y)| p != c && y == c).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        f1_sum += f1;
    }
    let macro_f1 = f1_sum / label_classes.len() as f64;

    if label_classes.len() < 2 {
        return Err(LisaError::SingleClassAuc);
    }
    let probs: Vec<Array1<f64>> = logits.rows().into_iter().map(softmax_row).collect();
    let roc_auc = if num_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let positives: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        Some(binary_auc(&scores, &positives))
    } else {
        // One-vs-rest macro over label classes.
        let mut auc_sum = 0.0;
        for &c in &label_classes {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positives: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auc_sum += binary_auc(&scores, &positives);
        }
        Some(auc_sum / label_classes.len() as f64)
    };

    Ok(Metrics { accuracy, macro_f1, roc_auc })
}

/// Environment-diversity summary computed from normalized energy scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Distance between the original environment and each augmented one.
    pub d_orig_to_aug: Vec<f64>,
    /// Mean pairwise distance among augmented environments (needs >= 2).
    pub d_intra: Option<f64>,
    /// Min-max normalization bounds of the pooled scores.
    pub norm_min: f64,
    pub norm_max: f64,
    /// Pooled scores were constant; everything mapped to zero.
    pub degenerate: bool,
}

/// Build the report from raw per-environment score vectors (index 0 is the
/// original environment). Scores are min-max normalized over the pooled
/// sample before distancing so reports are comparable across runs.
pub fn report_from_scores(scores: &[Vec<f64>]) -> Result<DiversityReport> {
    if scores.len() < 2 {
        return Err(LisaError::TooFewEnvironments { got: scores.len() });
    }
    let pooled: Vec<f64> = scores.iter().flatten().copied().collect();
    let min = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(max > min);
    let normalize = |v: f64| if degenerate { 0.0 } else { (v - min) / (max - min) };
    let normed: Vec<Vec<f64>> =
        scores.iter().map(|env| env.iter().map(|&v| normalize(v)).collect()).collect();

    let d_orig_to_aug: Vec<f64> = (1..normed.len())
        .map(|i| env_pair_distance(&normed[0], &normed[i]))
        .collect::<Result<_>>()?;
    let n_aug = normed.len() - 1;
    let d_intra = if n_aug >= 2 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for j in 1..normed.len() {
            for k in (j + 1)..normed.len() {
                total += env_pair_distance(&normed[j], &normed[k])?;
                pairs += 1.0;
            }
        }
        Some(total / pairs)
    } else {
        None
    };
    Ok(DiversityReport { d_orig_to_aug, d_intra, norm_min: min, norm_max: max, degenerate })
}

fn graph_energy_scores(
    clf_cfg: &BackboneConfig,
    clf_params: &ParameterSet,
    graphs: &[Graph],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(256) {
        let refs: Vec<&Graph> = chunk.iter().collect();
        let (union, membership) = crate::graph::batch(&refs)?;
        let pg = PreparedGraph::from_union(&union, membership, chunk.len());
        let mut tape = crate::autodiff::Tape::new();
        let x = tape.constant(pg.x.clone());
        let w = tape.constant_col(&pg.weights);
        let cv = clf_params.push_on(&mut tape, false);
        let logits = crate::backbones::graph_logits_var(&mut tape, clf_cfg, &cv, &pg, x, w)?;
        let values = tape.value(logits);
        for i in 0..chunk.len() {
            out.push(energy_score(values.row(i)));
        }
    }
    Ok(out)
}

/// Energy scores of every sample through the shared classifier, per
/// environment: the original graphs and one deterministic view (noise fixed
/// at one half) per generator.
pub fn diversity_report(
    clf_cfg: &BackboneConfig,
    clf_params: &ParameterSet,
    gen_cfgs: &[GeneratorConfig],
    gen_params: &[ParameterSet],
    sample_graphs: &[Arc<Graph>],
) -> Result<DiversityReport> {
    if sample_graphs.is_empty() {
        return Err(LisaError::DataError("diversity report needs sample graphs".into()));
    }
    let originals: Vec<Graph> = sample_graphs.iter().map(|g| g.as_ref().clone()).collect();
    let mut scores = vec![graph_energy_scores(clf_cfg, clf_params, &originals)?];
    for (cfg, params) in gen_cfgs.iter().zip(gen_params) {
        let views: Vec<Graph> = sample_graphs
            .iter()
            .map(|g| {
                let r = generate_view(cfg, params, g, SampleMode::Deterministic)?;
                r.view.apply()
            })
            .collect::<Result<_>>()?;
        scores.push(graph_energy_scores(clf_cfg, clf_params, &views)?);
    }
    report_from_scores(&scores)
}

pub fn write_diversity_csv<W: std::io::Write>(out: &mut W, report: &DiversityReport) -> Result<()> {
    writeln!(out, "metric,value")?;
    for (i, d) in report.d_orig_to_aug.iter().enumerate() {
        writeln!(out, "d_{},{}", i + 1, d)?;
    }
    if let Some(d) = report.d_intra {
        writeln!(out, "d_intra,{d}")?;
    }
    writeln!(out, "norm_min,{}", report.norm_min)?;
    writeln!(out, "norm_max,{}", report.norm_max)?;
    writeln!(out, "degenerate,{}", report.degenerate)?;
    Ok(())
}

/// Per-method aggregate over seeds: accuracies are taken at each run's
/// best-validation epoch.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub method: String,
    pub runs: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_val_acc: f64,
}

/// The accuracies a single run reports: those of its best-validation epoch.
pub fn best_epoch_accuracy(records: &[MetricsRecord]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for r in records.iter().filter(|r| r.phase == "eval") {
        if let (Some(val), Some(test)) = (r.val_acc, r.test_acc) {
            let better = match best {
                None => true,
                Some((bv, _)) => val > bv,
            };
            if better {
                best = Some((val, test));
            }
        }
    }
    best.ok_or_else(|| LisaError::SchemaMismatch {
        field: "val_acc".into(),
        detail: "log contains no eval records with accuracies".into(),
    })
}

pub fn compare_runs(runs: &[(String, Vec<MetricsRecord>)]) -> Result<Vec<RunSummary>> {
    if runs.is_empty() {
        return Err(LisaError::DataError("no run logs given".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for (method, records) in runs {
        let pair = best_epoch_accuracy(records)?;
        if !grouped.contains_key(method) {
            order.push(method.clone());
        }
        grouped.entry(method.clone()).or_default().push(pair);
    }
    let mut out = Vec::new();
    for method in order {
        let accs = &grouped[&method];
        let n = accs.len() as f64;
        let mean_test = accs.iter().map(|(_, t)| t).sum::<f64>() / n;
        let std_test =
            (accs.iter().map(|(_, t)| (t - mean_test) * (t - mean_test)).sum::<f64>() / n).sqrt();
        let mean_val = accs.iter().map(|(v, _)| v).sum::<f64>() / n;
        out.push(RunSummary {
            method,
            runs: accs.len(),
            mean_test_acc: mean_test,
            std_test_acc: std_test,
            mean_val_acc: mean_val,
        });
    }
    Ok(out)
}

pub fn write_comparison_csv<W: std::io::Write>(out: &mut W, rows: &[RunSummary]) -> Result<()> {
    writeln!(out, "method,runs,mean_test_acc,std_test_acc,mean_val_acc")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.method, r.runs, r.mean_test_acc, r.std_test_acc, r.mean_val_acc
        )?;
    }
    Ok(())
}

/// Aligned text table of a comparison.
pub fn render_comparison(rows: &[RunSummary]) -> String {
    let mut width = "method".len();
    for r in rows {
        width = width.max(r.method.len());
    }
    let mut s = format!(
        "{:<width$}  {:>4}  {:>18}  {:>12}\n",
        "method", "runs", "test acc (mean+-std)", "val acc",
    );
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>4}  {:>9.4} +- {:>6.4}  {:>12.4}\n",
            r.method, r.runs, r.mean_test_acc, r.std_test_acc, r.mean_val_acc,
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{init_params, BackboneKind, Readout};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_score_one() {
        let logits = array![[5.0, 0.0], [0.0, 5.0], [5.0, 0.0]];
        let m = metrics(&logits, &[0, 1, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.roc_auc, Some(1.0));
    }

    #[test]
    fn binary_auc_from_probability_scores() {
        // Class-1 probabilities 0.9 and 0.1 for labels 1 and 0.
        let logits = array![[0.0, (9.0f64).ln()], [0.0, (1.0f64 / 9.0).ln()]];
        let m = metrics(&logits, &[1, 0]).unwrap();
        assert_eq!(m.roc_auc, Some(1.0));
    }

    #[test]
    fn confusion_matrix_macro_f1() {
        // Confusion matrix (rows true, cols predicted):
        //   [[2,0,0],[0,1,1],[1,0,1]]
        // Oracle, per class c: F1 = 2 TP / (2 TP + FP + FN):
        //   class 0: 4/(4+1+0) = 0.8; class 1: 2/(2+0+1) = 2/3;
        //   class 2: 2/(2+1+1) = 0.5; macro = 0.6555...
        let onehot = |c: usize| -> [f64; 3] {
            let mut row = [0.0; 3];
            row[c] = 5.0;
            row
        };
        let pairs = [(0, 0), (0, 0), (1, 1), (1, 2), (2, 0), (2, 2)];
        let mut logits = Array2::zeros((6, 3));
        let mut labels = Vec::new();
        for (i, &(y, p)) in pairs.iter().enumerate() {
            labels.push(y);
            let row = onehot(p);
            for k in 0..3 {
                logits[[i, k]] = row[k];
            }
        }
        let m = metrics(&logits, &labels).unwrap();
        assert_abs_diff_eq!(m.accuracy, 4.0 / 6.0, epsilon = 1e-12);
        let oracle = (0.8 + 2.0 / 3.0 + 0.5) / 3.0;
        assert_abs_diff_eq!(m.macro_f1, oracle, epsilon = 1e-12);
    }

    #[test]
    fn metrics_agree_with_naive_counting_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 30;
            let c = 3;
            let logits = Array2::from_shape_fn((n, c), |_| rng.random::<f64>());
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            if labels.iter().collect::<std::collections::HashSet<_>>().len() < 2 {
                continue;
            }
            let m = metrics(&logits, &labels).unwrap();
            // Exhaustive-count oracle for accuracy.
            let mut correct = 0;
            for (i, &y) in labels.iter().enumerate() {
                let mut best = 0;
                for k in 1..c {
                    if logits[[i, k]] > logits[[i, best]] {
                        best = k;
                    }
                }
                if best == y {
                    correct += 1;
                }
            }
            assert_abs_diff_eq!(m.accuracy, correct as f64 / n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_labels_error_for_auc() {
        let logits = array![[1.0, 0.0], [2.0, 0.0]];
        assert!(matches!(metrics(&logits, &[0, 0]).unwrap_err(), LisaError::SingleClassAuc));
    }

    #[test]
    fn length_mismatch_detected() {
        let logits = array![[1.0, 0.0]];
        assert!(matches!(
            metrics(&logits, &[0, 1]).unwrap_err(),
            LisaError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn normalized_constant_gap_pair_distance() {
        // Pool spans [0, 1] already, so normalization is the identity; a
        // constant 0.5 gap gives 0.5^2 / 2 = 0.125.
        let scores = vec![vec![0.0, 0.5], vec![0.5, 1.0]];
        let report = report_from_scores(&scores).unwrap();
        assert_abs_diff_eq!(report.d_orig_to_aug[0], 0.125, epsilon = 1e-12);
        assert_eq!(report.d_intra, None);
        assert_eq!(report.norm_min, 0.0);
        assert_eq!(report.norm_max, 1.0);
    }

    #[test]
    fn normalization_maps_pool_into_unit_interval() {
        let scores = vec![vec![-3.0, 5.0], vec![1.0, 2.0], vec![0.0, -1.0]];
        let report = report_from_scores(&scores).unwrap();
        assert_eq!(report.norm_min, -3.0);
        assert_eq!(report.norm_max, 5.0);
        assert!(!report.degenerate);
        assert!(report.d_intra.is_some());
    }

    #[test]
    fn degenerate_constant_scores_map_to_zero_with_warning() {
        let scores = vec![vec![2.0, 2.0], vec![2.0, 2.0], vec![2.0, 2.0]];
        let report = report_from_scores(&scores).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.d_orig_to_aug, vec![0.0, 0.0]);
        assert_eq!(report.d_intra, Some(0.0));
    }

    #[test]
    fn d_intra_is_permutation_invariant() {
        let scores = vec![
            vec![0.1, 0.9, 0.3],
            vec![0.5, 0.2, 0.8],
            vec![0.7, 0.4, 0.1],
            vec![0.0, 1.0, 0.6],
        ];
        let base = report_from_scores(&scores).unwrap().d_intra.unwrap();
        let permuted = vec![
            scores[0].clone(),
            scores[3].clone(),
            scores[1].clone(),
            scores[2].clone(),
        ];
        let p = report_from_scores(&permuted).unwrap().d_intra.unwrap();
        assert_abs_diff_eq!(base, p, epsilon = 1e-12);
    }

    #[test]
    fn identical_generators_have_zero_intra_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clf_cfg = BackboneConfig {
            kind: BackboneKind::GinLike,
            num_layers: 2,
            hidden_dim: 6,
            out_dim: 3,
            readout: Readout::Sum,
        };
        let gen_bb = BackboneConfig { out_dim: 1, ..clf_cfg };
        let clf = init_params(&clf_cfg, 4, &mut rng);
        let gp = init_params(&gen_bb, 4, &mut rng);
        let gen_cfgs: Vec<GeneratorConfig> = (0..2)
            .map(|i| GeneratorConfig {
                temperature: 1.0,
                backbone: gen_bb,
                generator_id: i + 1,
                standard_concrete: false,
            })
            .collect();
        let cfg = crate::data::SpMotifConfig {
            n_train: 12,
            n_val: 1,
            n_test: 1,
            seed: 5,
            ..Default::default()
        };
        let (graphs, _) = crate::data::spmotif_generate(&cfg, 1).unwrap();
        let sample: Vec<Arc<Graph>> = graphs.into_iter().take(12).map(Arc::new).collect();
        let report =
            diversity_report(&clf_cfg, &clf, &gen_cfgs, &[gp.clone(), gp], &sample).unwrap();
        assert_abs_diff_eq!(report.d_intra.unwrap(), 0.0, epsilon = 1e-15);
    }

    fn eval_record(epoch: usize, val: f64, test: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            phase: "eval".into(),
            batch: 0,
            env_losses: vec![],
            l_cls: 0.0,
            l_info: 0.0,
            l_e: 0.0,
            l_var: 0.0,
            train_acc: Some(0.0),
            val_acc: Some(val),
            test_acc: Some(test),
        }
    }

    #[test]
    fn single_run_has_zero_std() {
        let runs = vec![("erm".to_string(), vec![eval_record(1, 0.5, 0.42)])];
        let rows = compare_runs(&runs).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].runs, 1);
        assert_eq!(rows[0].std_test_acc, 0.0);
        assert_abs_diff_eq!(rows[0].mean_test_acc, 0.42, epsilon = 1e-12);
    }

    #[test]
    fn three_seeds_population_std() {
        // Oracle: population std of {0.40, 0.45, 0.50} is sqrt(1/600).
        let runs: Vec<(String, Vec<MetricsRecord>)> = [0.40, 0.45, 0.50]
            .iter()
            .map(|&t| ("lisa".to_string(), vec![eval_record(1, 0.6, t)]))
            .collect();
        let rows = compare_runs(&runs).unwrap();
        assert_abs_diff_eq!(rows[0].mean_test_acc, 0.45, epsilon = 1e-12);
        let oracle = (((0.40f64 - 0.45).powi(2) + 0.0 + (0.50f64 - 0.45).powi(2)) / 3.0).sqrt();
        assert_abs_diff_eq!(rows[0].std_test_acc, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(rows[0].std_test_acc, 0.040825, epsilon = 1e-6);
    }

    #[test]
    fn best_epoch_selection_uses_validation() {
        let records = vec![
            eval_record(1, 0.5, 0.40),
            eval_record(2, 0.8, 0.55),
            eval_record(3, 0.7, 0.99),
        ];
        let (val, test) = best_epoch_accuracy(&records).unwrap();
        assert_eq!(val, 0.8);
        assert_eq!(test, 0.55);
    }

    #[test]
    fn missing_eval_records_name_the_field() {
        let runs = vec![("x".to_string(), vec![])];
        match compare_runs(&runs).unwrap_err() {
            LisaError::SchemaMismatch { field, .. } => assert_eq!(field, "val_acc"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn comparison_renders_csv_and_table() {
        let runs = vec![
            ("erm".to_string(), vec![eval_record(1, 0.5, 0.4)]),
            ("lisa".to_string(), vec![eval_record(1, 0.6, 0.5)]),
        ];
        let rows = compare_runs(&runs).unwrap();
        let mut csv = Vec::new();
        write_comparison_csv(&mut csv, &rows).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("method,runs,"));
        assert_eq!(text.lines().count(), 3);
        let table = render_comparison(&rows);
        assert!(table.contains("erm"));
        assert!(table.contains("lisa"));
    }
}
