//! RMSE metric, blind baselines and CSV report emission.

use crate::error::{Error, Result};
use std::io::{BufWriter, Write};
use std::path::Path;

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "rmse over {} predictions vs {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    let mse: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// RMSE of the constant-zero predictor.
pub fn baseline_zero(gt: &[f64]) -> Result<f64> {
    rmse(&vec![0.0; gt.len()], gt)
}

/// RMSE on `test_gt` of the predictor that always outputs the mean of
/// `train_gt`.
pub fn baseline_mean(train_gt: &[f64], test_gt: &[f64]) -> Result<f64> {
    if train_gt.is_empty() {
        return Err(Error::Data("baseline_mean needs nonempty training angles".into()));
    }
    let mean = train_gt.iter().sum::<f64>() / train_gt.len() as f64;
    rmse(&vec![mean; test_gt.len()], test_gt)
}

/// Per-frame ground truth and one prediction trajectory per model, all in
/// standardized angle units.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub frame_indices: Vec<usize>,
    pub gt_angles: Vec<f64>,
    /// (model name, predicted angles aligned with `gt_angles`)
    pub models: Vec<(String, Vec<f64>)>,
}

impl EvalReport {
    pub fn summary(&self) -> Result<Vec<(String, f64)>> {
        self.models
            .iter()
            .map(|(name, pred)| Ok((name.clone(), rmse(pred, &self.gt_angles)?)))
            .collect()
    }
}

/// Write `trajectory.csv` (frame_index, gt_angle, one column per model) and
/// `summary.csv` (model, rmse) under `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    for (name, pred) in &report.models {
        if pred.len() != report.gt_angles.len() {
            return Err(Error::ShapeMismatch(format!(
                "model {name}: {} predictions for {} frames",
                pred.len(),
                report.gt_angles.len()
            )));
        }
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("mkdir {}: {e}", out_dir.display())))?;
    let open = |name: &str| -> Result<BufWriter<std::fs::File>> {
        let path = out_dir.join(name);
        Ok(BufWriter::new(std::fs::File::create(&path).map_err(
            |e| Error::Data(format!("create {}: {e}", path.display())),
        )?))
    };
    let wr = |e: std::io::Error| Error::Data(format!("write report: {e}"));

    let mut traj = open("trajectory.csv")?;
    let mut header = String::from("frame_index,gt_angle");
    for (name, _) in &report.models {
        header.push(',');
        header.push_str(&format!("pred_{name}"));
    }
    writeln!(traj, "{header}").map_err(wr)?;
    for (row, (&idx, &gt)) in report
        .frame_indices
        .iter()
        .zip(report.gt_angles.iter())
        .enumerate()
    {
        let mut line = format!("{idx},{gt}");
        for (_, pred) in &report.models {
            line.push(',');
            line.push_str(&pred[row].to_string());
        }
        writeln!(traj, "{line}").map_err(wr)?;
    }

    let mut summary = open("summary.csv")?;
    writeln!(summary, "model,rmse").map_err(wr)?;
    for (name, r) in report.summary()? {
        writeln!(summary, "{name},{r}").map_err(wr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn identical_lists_give_zero() {
        let v = vec![0.3, -0.2, 1.5];
        assert_eq!(rmse(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn hand_case_unit_error() {
        assert!((rmse(&[1.0, 1.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_and_mismatched_rejected() {
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_is_symmetric_and_translation_covariant() {
        let p = vec![0.1, 0.7, -0.3, 2.0];
        let g = vec![0.0, 0.5, 0.5, 1.0];
        assert_eq!(rmse(&p, &g).unwrap(), rmse(&g, &p).unwrap());
        let c = 3.25;
        let ps: Vec<f64> = p.iter().map(|v| v + c).collect();
        let gs: Vec<f64> = g.iter().map(|v| v + c).collect();
        assert!((rmse(&ps, &gs).unwrap() - rmse(&p, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn baselines_hand_cases() {
        assert_eq!(baseline_zero(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        let gt = vec![1.0, -1.0];
        assert!((baseline_zero(&gt).unwrap() - 1.0).abs() < 1e-15);
        assert!((baseline_mean(&[0.0], &gt).unwrap() - 1.0).abs() < 1e-15);
        // mean 0 training set makes the two baselines identical
        let train = vec![0.4, -0.4, 0.2, -0.2];
        assert_eq!(
            baseline_mean(&train, &gt).unwrap(),
            baseline_zero(&gt).unwrap()
        );
    }

    #[test]
    fn report_emission_is_self_consistent() {
        let report = EvalReport {
            frame_indices: vec![14, 15, 16],
            gt_angles: vec![0.1, 0.2, -0.1],
            models: vec![
                ("model".into(), vec![0.15, 0.1, -0.2]),
                ("zero".into(), vec![0.0, 0.0, 0.0]),
            ],
        };
        let dir = tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();

        let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let mut lines = traj.lines();
        assert_eq!(lines.next().unwrap(), "frame_index,gt_angle,pred_model,pred_zero");
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 3);

        // recompute each model's rmse from the emitted rows and compare with
        // summary.csv
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let mut summary_lines = summary.lines();
        assert_eq!(summary_lines.next().unwrap(), "model,rmse");
        for (col, line) in summary_lines.enumerate() {
            let (name, value) = line.split_once(',').unwrap();
            assert_eq!(name, report.models[col].0);
            let gt: Vec<f64> = rows.iter().map(|r| r[1]).collect();
            let pred: Vec<f64> = rows.iter().map(|r| r[2 + col]).collect();
            let expect = rmse(&pred, &gt).unwrap();
            assert!((value.parse::<f64>().unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_model_set_gives_header_only_summary() {
        let report = EvalReport {
            frame_indices: vec![0],
            gt_angles: vec![0.5],
            models: vec![],
        };
        let dir = tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary, "model,rmse\n");
    }
}
