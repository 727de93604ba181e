//! Distance and accuracy metrics, evaluation reports and embedding export.
//!
//! Distances are meters internally and centimeters in every report.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IkError, Result};
use crate::exec::{derive_seed, kahan_sum, Exec};
use crate::kinematics::{JointAngles, KinematicChain, Pose};
use crate::model::IkModel;
use crate::numerics::{Mode, Tensor};

/// Poses per hypernetwork batch during evaluation.
const EVAL_CHUNK: usize = 64;

/// `|FK(solution) − target|` in cm for each pair.
pub fn distances_cm(
    chain: &KinematicChain,
    solutions: &[JointAngles],
    targets: &[Pose],
) -> Result<Vec<f64>> {
    if solutions.len() != targets.len() {
        return Err(IkError::shape("distances", &[solutions.len()], &[targets.len()]));
    }
    if solutions.is_empty() {
        return Err(IkError::Empty);
    }
    solutions
        .iter()
        .zip(targets)
        .map(|(y, x)| Ok(chain.forward_kinematics(y)?.distance(x) * 100.0))
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(IkError::Empty);
    }
    let n = values.len() as f64;
    let mean = kahan_sum(values.iter().copied()) / n;
    let var = kahan_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    Ok((mean, var.sqrt()))
}

/// `(mean, std)` of the FK distance in cm.
pub fn mean_distance(
    chain: &KinematicChain,
    solutions: &[JointAngles],
    targets: &[Pose],
) -> Result<(f64, f64)> {
    mean_std(&distances_cm(chain, solutions, targets)?)
}

/// Fraction of solutions strictly closer than `threshold_cm`.
pub fn accuracy_at(
    chain: &KinematicChain,
    solutions: &[JointAngles],
    targets: &[Pose],
    threshold_cm: f64,
) -> Result<f64> {
    fraction_below(&distances_cm(chain, solutions, targets)?, threshold_cm)
}

pub fn fraction_below(dist_cm: &[f64], threshold_cm: f64) -> Result<f64> {
    if !(threshold_cm > 0.0) {
        return Err(IkError::Config("accuracy threshold must be > 0".into()));
    }
    if dist_cm.is_empty() {
        return Err(IkError::Empty);
    }
    let hits = dist_cm.iter().filter(|&&d| d < threshold_cm).count();
    Ok(hits as f64 / dist_cm.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mean_distance_cm: f64,
    pub std_cm: f64,
    pub accuracy: f64,
    pub threshold_cm: f64,
    /// Mean wall-clock seconds per solve.
    pub runtime_s: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn from_records(
        method: &str,
        records: &[SampleRecord],
        threshold_cm: f64,
        runtime_s: f64,
    ) -> Result<Self> {
        let dist: Vec<f64> = records.iter().map(|r| r.dist_cm).collect();
        let (mean, std) = mean_std(&dist)?;
        Ok(EvalReport {
            method: method.to_string(),
            mean_distance_cm: mean,
            std_cm: std,
            accuracy: fraction_below(&dist, threshold_cm)?,
            threshold_cm,
            runtime_s,
            n: records.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Recomputes the aggregates from per-sample records with a plain
    /// two-pass sum and checks they agree with this report.
    pub fn cross_check(&self, records: &[SampleRecord]) -> Result<()> {
        if records.len() != self.n || records.is_empty() {
            return Err(IkError::Format(format!(
                "report counts {} samples, records hold {}",
                self.n,
                records.len()
            )));
        }
        let n = records.len() as f64;
        let mean = records.iter().map(|r| r.dist_cm).sum::<f64>() / n;
        let var = records
            .iter()
            .map(|r| (r.dist_cm - mean).powi(2))
            .sum::<f64>()
            / n;
        let acc = records
            .iter()
            .filter(|r| r.dist_cm < self.threshold_cm)
            .count() as f64
            / n;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12);
        if !close(mean, self.mean_distance_cm) || !close(var.sqrt(), self.std_cm) || acc != self.accuracy
        {
            return Err(IkError::Format(format!(
                "records give mean {mean} std {} acc {acc}, report says {} {} {}",
                var.sqrt(),
                self.mean_distance_cm,
                self.std_cm,
                self.accuracy
            )));
        }
        Ok(())
    }
}

/// One row of the per-sample CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub target_x: f64,
    pub target_y: f64,
    pub target_z: f64,
    pub dist_cm: f64,
    /// Log-likelihood of the solution under the model; NaN for solvers
    /// without one.
    pub ll: f64,
}

impl SampleRecord {
    pub fn new(target: &Pose, dist_cm: f64, ll: f64) -> Self {
        let [x, y, z] = target.to_array();
        SampleRecord {
            target_x: x,
            target_y: y,
            target_z: z,
            dist_cm,
            ll,
        }
    }
}

pub fn write_records<W: Write>(records: &[SampleRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<SampleRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|rec| rec.map_err(IkError::from))
        .collect()
}

pub fn save_records(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    write_records(records, std::fs::File::create(path)?)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    read_records(std::fs::File::open(path)?)
}

/// Samples `per_pose` solutions for every target and scores them. Pose `i`
/// draws from the stream `(seed, i)`, so the records do not depend on how
/// the work is split.
pub fn evaluate_model(
    model: &IkModel,
    chain: &KinematicChain,
    targets: &[Pose],
    per_pose: usize,
    threshold_cm: f64,
    seed: u64,
    exec: Exec,
) -> Result<(EvalReport, Vec<SampleRecord>, Vec<Vec<JointAngles>>)> {
    if targets.is_empty() || per_pose == 0 {
        return Err(IkError::Empty);
    }
    let chunks: Vec<&[Pose]> = targets.chunks(EVAL_CHUNK).collect();
    let start = Instant::now();
    let sampled = exec.map(chunks.len(), |c| -> Result<Vec<(Vec<JointAngles>, Vec<f64>)>> {
        let poses = chunks[c];
        let thetas = model.hyper_forward(poses, Mode::Infer)?;
        (0..poses.len())
            .map(|i| {
                let index = c * EVAL_CHUNK + i;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
                let sols = model.sample_solutions_with_theta(&thetas, i, per_pose, &mut rng)?;
                let lls = sols
                    .iter()
                    .map(|y| model.log_likelihood_with_theta(&thetas, i, y))
                    .collect::<Result<Vec<_>>>()?;
                Ok((sols, lls))
            })
            .collect()
    });
    let elapsed = start.elapsed().as_secs_f64();
    let mut records = Vec::with_capacity(targets.len() * per_pose);
    let mut solutions = Vec::with_capacity(targets.len());
    let per_target = sampled.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten();
    for (x, (sols, lls)) in targets.iter().zip(per_target) {
        for (y, ll) in sols.iter().zip(lls) {
            let d = chain.forward_kinematics(y)?.distance(x) * 100.0;
            records.push(SampleRecord::new(x, d, ll));
        }
        solutions.push(sols);
    }
    let runtime = elapsed / records.len() as f64;
    let report = EvalReport::from_records("iknet", &records, threshold_cm, runtime)?;
    Ok((report, records, solutions))
}

/// Scores one solution per target from an arbitrary solver, timing each
/// call.
pub fn evaluate_solver<F>(
    method: &str,
    chain: &KinematicChain,
    targets: &[Pose],
    threshold_cm: f64,
    exec: Exec,
    solve: F,
) -> Result<(EvalReport, Vec<SampleRecord>)>
where
    F: Fn(usize, &Pose) -> Result<JointAngles> + Sync + Send,
{
    if targets.is_empty() {
        return Err(IkError::Empty);
    }
    let start = Instant::now();
    let sols = exec.map(targets.len(), |i| solve(i, &targets[i]));
    let elapsed = start.elapsed().as_secs_f64();
    let sols = sols.into_iter().collect::<Result<Vec<_>>>()?;
    let dist = distances_cm(chain, &sols, targets)?;
    let records: Vec<SampleRecord> = targets
        .iter()
        .zip(dist)
        .map(|(x, d)| SampleRecord::new(x, d, f64::NAN))
        .collect();
    let report = EvalReport::from_records(method, &records, threshold_cm, elapsed / targets.len() as f64)?;
    Ok((report, records))
}

/// Last trunk activations (before the per-joint heads), one row per pose.
pub fn export_embedding(model: &IkModel, poses: &[Pose]) -> Result<Tensor> {
    if poses.is_empty() {
        return Err(IkError::Empty);
    }
    model.trunk_forward(poses, Mode::Infer)
}

pub fn write_matrix_csv<W: Write>(m: &Tensor, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..m.cols()).map(|c| format!("h{c}")))?;
    for r in 0..m.rows() {
        out.write_record(m.row(r).iter().map(f64::to_string))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planar2() -> KinematicChain {
        KinematicChain::preset("planar2").unwrap()
    }

    #[test]
    fn exact_solutions_score_zero() {
        let chain = planar2();
        let sols = vec![vec![0.1, 0.2], vec![-1.0, 2.0]];
        let targets: Vec<Pose> = sols.iter().map(|y| chain.fk_unchecked(y)).collect();
        assert_eq!(mean_distance(&chain, &sols, &targets).unwrap(), (0.0, 0.0));
        assert_eq!(accuracy_at(&chain, &sols, &targets, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn constant_offset() {
        let chain = planar2();
        let sols = vec![vec![0.1, 0.2]; 4];
        let targets: Vec<Pose> = sols
            .iter()
            .map(|y| {
                let mut p = chain.fk_unchecked(y);
                p.position.z += 0.05;
                p
            })
            .collect();
        let (m, s) = mean_distance(&chain, &sols, &targets).unwrap();
        assert!((m - 5.0).abs() < 1e-12);
        assert!(s < 1e-12);
    }

    #[test]
    fn half_inside_threshold() {
        let chain = planar2();
        let sols = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let x = chain.fk_unchecked(&sols[0]);
        let far = Pose::new(x.position.x, x.position.y + 0.5, 0.0);
        assert_eq!(accuracy_at(&chain, &sols, &[x, far], 2.0).unwrap(), 0.5);
    }

    #[test]
    fn empty_and_bad_threshold() {
        let chain = planar2();
        assert!(matches!(mean_distance(&chain, &[], &[]), Err(IkError::Empty)));
        assert!(fraction_below(&[1.0], 0.0).is_err());
    }

    #[test]
    fn records_round_trip_and_cross_check() {
        let recs = vec![
            SampleRecord::new(&Pose::new(1.0, 0.0, 0.0), 1.5, -0.3),
            SampleRecord::new(&Pose::new(0.0, 1.0, 0.0), 2.5, f64::NAN),
        ];
        let report = EvalReport::from_records("x", &recs, 2.0, 0.0).unwrap();
        assert_eq!(report.accuracy, 0.5);
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("target_x,target_y,target_z,dist_cm,ll\n"));
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back[0], recs[0]);
        assert!(back[1].ll.is_nan());
        report.cross_check(&back).unwrap();
        let mut tampered = report.clone();
        tampered.mean_distance_cm += 0.1;
        assert!(tampered.cross_check(&back).is_err());
    }
}
