//! Relative poses, trajectory integration, the pose loss and the recurrent
//! pose regressor.

use std::io::Write;

use nalgebra::{Matrix3, Rotation3, Vector3};
use svio_autodiff::{Graph, ParamStore, Tensor, Var};

use crate::error::{Result, SvioError};
use crate::layers::{BiLstm, Linear, RecurrentState};

/// Motion over one frame interval, expressed in the earlier body frame.
///
/// `rotation` is `[roll, pitch, yaw]` in radians with
/// `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseDelta {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl PoseDelta {
    pub fn new(translation: [f64; 3], rotation: [f64; 3]) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5]],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        let [a, b, c] = self.translation;
        let [d, e, f] = self.rotation;
        [a, b, c, d, e, f]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        let [roll, pitch, yaw] = self.rotation;
        Rotation3::from_euler_angles(roll, pitch, yaw)
    }

    /// Delta that carries `from` onto `to`.
    pub fn between(from: &GlobalPose, to: &GlobalPose) -> Self {
        let rt = from.orientation.transpose();
        let dr = Rotation3::from_matrix_unchecked(rt * to.orientation);
        let (roll, pitch, yaw) = dr.euler_angles();
        let dt = rt * (to.position - from.position);
        Self {
            translation: [dt.x, dt.y, dt.z],
            rotation: [roll, pitch, yaw],
        }
    }

    pub fn translation_norm(&self) -> f64 {
        Vector3::from(self.translation).norm()
    }

    /// Angle of the rotation, radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation_matrix().into_inner())
    }
}

/// Angle of a rotation matrix via `atan2`, accurate near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    (0.5 * v.norm()).atan2(0.5 * (trace - 1.0))
}

/// Angle of `a⁻¹·b`, radians.
pub fn relative_rotation_angle(a: &PoseDelta, b: &PoseDelta) -> f64 {
    let ra = a.rotation_matrix().into_inner();
    let rb = b.rotation_matrix().into_inner();
    rotation_angle(&(ra.transpose() * rb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalPose {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
}

impl GlobalPose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: Matrix3::identity(),
        }
    }
}

/// Gram–Schmidt on the columns, third column rebuilt as a cross product.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = m.column(0).normalize();
    let c1 = m.column(1) - c0 * c0.dot(&m.column(1));
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

/// `p' = p + R·Δt`, `R' = orthonormalize(R·ΔR)`.
pub fn compose(pose: &GlobalPose, delta: &PoseDelta) -> GlobalPose {
    let dt = Vector3::from(delta.translation);
    GlobalPose {
        position: pose.position + pose.orientation * dt,
        orientation: orthonormalize(&(pose.orientation * delta.rotation_matrix().into_inner())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<GlobalPose>,
}

impl Trajectory {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step", "px", "py", "pz", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33",
        ])?;
        for (i, p) in self.poses.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(p.position.iter().map(f64::to_string));
            for r in 0..3 {
                for c in 0..3 {
                    row.push(p.orientation[(r, c)].to_string());
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Chains deltas from the identity pose; the result has `deltas.len() + 1` poses.
pub fn integrate_trajectory(deltas: &[PoseDelta]) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(deltas.len() + 1);
    let mut pose = GlobalPose::identity();
    poses.push(pose);
    for (i, d) in deltas.iter().enumerate() {
        if !d.is_finite() {
            return Err(SvioError::Contract(format!("non-finite delta at step {i}: {d:?}")));
        }
        pose = compose(&pose, d);
        poses.push(pose);
    }
    Ok(Trajectory { poses })
}

/// Mean over steps of `‖Δt_pred − Δt_true‖² + κ·‖r_pred − r_true‖²`.
pub fn pose_loss(pred: &[PoseDelta], truth: &[PoseDelta], rotation_weight: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(SvioError::Contract(format!(
            "pose_loss: {} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let (pa, ta) = (p.as_array(), t.as_array());
            (0..6)
                .map(|k| {
                    let w = if k < 3 { 1.0 } else { rotation_weight };
                    w * (pa[k] - ta[k]).powi(2)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Graph form of [`pose_loss`] over an N×6 prediction.
pub fn pose_loss_graph(g: &mut Graph, pred: Var, truth: &Tensor, rotation_weight: f64) -> Result<Var> {
    if g.shape(pred) != truth.shape() || truth.rank() != 2 || truth.shape()[1] != 6 {
        return Err(SvioError::Contract(format!(
            "pose_loss: prediction {:?} vs target {:?}",
            g.shape(pred),
            truth.shape()
        )));
    }
    let n = truth.shape()[0];
    let t = g.constant(truth.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.square(diff)?;
    let k = rotation_weight;
    let w = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0, k, k, k]));
    let weighted = g.mul(sq, w)?;
    let total = g.sum(weighted)?;
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Bidirectional recurrent model over fused features plus a linear pose head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalModel {
    pub rnn: BiLstm,
    pub head: Linear,
}

impl TemporalModel {
    pub fn new(input: usize, hidden: usize, layers: usize) -> Self {
        Self {
            rnn: BiLstm {
                prefix: "temporal.rnn".into(),
                input,
                hidden,
                layers,
            },
            head: Linear::new("temporal.head", 2 * hidden, 6),
        }
    }

    /// One batch×6 pose tensor per step of `fused` (each batch×input).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: &[Var],
        h0: Option<&RecurrentState>,
    ) -> Result<Vec<Var>> {
        if fused.is_empty() {
            return Err(SvioError::Contract("temporal_regress: empty sequence".into()));
        }
        let out = self.rnn.forward(g, store, fused, h0)?;
        out.outputs
            .iter()
            .map(|&o| self.head.forward(g, store, o))
            .collect()
    }

    /// Single-sequence convenience: fused feature vectors in, pose deltas out.
    pub fn regress(
        &self,
        store: &ParamStore,
        fused: &[Vec<f64>],
        h0: Option<&RecurrentState>,
    ) -> Result<Vec<PoseDelta>> {
        let mut g = Graph::new();
        let steps = fused
            .iter()
            .map(|z| {
                Ok(g.constant(Tensor::new(vec![1, z.len()], z.clone())?))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut g, store, &steps, h0)?;
        Ok(out
            .iter()
            .map(|&v| {
                let d = g.value(v).data();
                PoseDelta::from_array([d[0], d[1], d[2], d[3], d[4], d[5]])
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;

    #[test]
    fn zero_deltas_stay_at_origin() {
        let t = integrate_trajectory(&[PoseDelta::default(); 5]).unwrap();
        for p in &t.poses {
            assert_eq!(p.position, Vector3::zeros());
            assert_eq!(p.orientation, Matrix3::identity());
        }
    }

    #[test]
    fn two_translations() {
        let d = PoseDelta::new([1.0, 0.0, 0.0], [0.0; 3]);
        let t = integrate_trajectory(&[d, d]).unwrap();
        assert_eq!(t.poses.last().unwrap().position, Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn closed_square_returns_to_origin() {
        let d = PoseDelta::new([1.0, 0.0, 0.0], [0.0, 0.0, FRAC_PI_2]);
        let t = integrate_trajectory(&[d; 4]).unwrap();
        let end = t.poses.last().unwrap();
        assert!(end.position.norm() < 1e-9, "{}", end.position);
        assert!((end.orientation - Matrix3::identity()).norm() < 1e-9);
        // Intermediate corners of the unit square.
        assert!((t.poses[2].position - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn non_finite_delta_rejected() {
        let d = PoseDelta::new([f64::NAN, 0.0, 0.0], [0.0; 3]);
        assert!(matches!(integrate_trajectory(&[d]), Err(SvioError::Contract(_))));
    }

    #[test]
    fn loss_examples() {
        let zero = PoseDelta::default();
        let a = PoseDelta::new([0.3, -1.0, 2.0], [0.01, 0.02, -0.03]);
        assert_eq!(pose_loss(&[a], &[a], 100.0).unwrap(), 0.0);
        let t_err = PoseDelta::new([1.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!(pose_loss(&[t_err], &[zero], 7.0).unwrap(), 1.0);
        let r_err = PoseDelta::new([0.0; 3], [0.1, 0.0, 0.0]);
        assert!((pose_loss(&[r_err], &[zero], 100.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(pose_loss(&[a, a], &[a], 1.0).is_err());
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let pred = [
            PoseDelta::new([0.5, 0.1, -0.2], [0.01, 0.0, 0.05]),
            PoseDelta::new([1.0, 0.0, 0.0], [0.0, -0.02, 0.0]),
        ];
        let truth = [PoseDelta::default(), PoseDelta::new([0.9, 0.0, 0.1], [0.0, 0.0, 0.01])];
        let flat = |d: &[PoseDelta]| {
            Tensor::new(vec![d.len(), 6], d.iter().flat_map(|p| p.as_array()).collect()).unwrap()
        };
        let mut g = Graph::new();
        let p = g.constant(flat(&pred));
        let l = pose_loss_graph(&mut g, p, &flat(&truth), 100.0).unwrap();
        let expected = pose_loss(&pred, &truth, 100.0).unwrap();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn between_inverts_compose() {
        let a = GlobalPose::identity();
        let d = PoseDelta::new([0.4, -0.2, 0.1], [0.05, -0.03, 0.3]);
        let b = compose(&a, &d);
        let back = PoseDelta::between(&a, &b);
        for (x, y) in back.as_array().iter().zip(d.as_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_angle_of_identity_is_exactly_zero() {
        let d = PoseDelta::new([0.0; 3], [0.1, 0.2, 0.3]);
        assert_eq!(relative_rotation_angle(&d, &d), 0.0);
        let yaw = PoseDelta::new([0.0; 3], [0.0, 0.0, 0.25]);
        assert!((yaw.rotation_angle() - 0.25).abs() < 1e-14);
    }
}
