//! Distillation objectives: the label-guided attention transfer loss and
//! the three comparison losses (deep supervision, deep mutual learning,
//! feature-map distillation).
//!
//! Teacher activations always enter these losses as detached constants, so
//! gradients flow only into the student. The layer-wise attention loss sums
//! the per-pair attention discrepancies over the selected tap positions; the
//! final objective is `L_seg + alpha * L_AT`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::netlib::{NetworkConfig, TAP_NAMES};
use crate::numcore::{ops, ClassMask, Dims, NumError, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation plan: {0}")]
    Plan(String),
    #[error("tap '{0}' not found")]
    MissingTap(String),
    #[error("non-finite loss term: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// Which transfer loss a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Lgad,
    Ds,
    Dml,
    Fmd,
    None,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Lgad => "LGAD",
            Family::Ds => "DS",
            Family::Dml => "DML",
            Family::Fmd => "FMD",
            Family::None => "NONE",
        }
    }

    /// Families whose loss is wired to specific tap positions.
    pub fn uses_positions(&self) -> bool {
        matches!(self, Family::Lgad | Family::Ds | Family::Fmd)
    }
}

impl std::str::FromStr for Family {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LGAD" => Ok(Family::Lgad),
            "DS" => Ok(Family::Ds),
            "DML" => Ok(Family::Dml),
            "FMD" => Ok(Family::Fmd),
            "NONE" => Ok(Family::None),
            other => Err(DistillError::Plan(format!("unknown family '{other}'"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which tap pairs are distilled, with which loss family and coefficient.
#[derive(Debug, Clone)]
pub struct DistillPlan {
    pub family: Family,
    pub positions: Vec<String>,
    /// Loss coefficient on the transfer term.
    pub alpha: f32,
    /// Attention statistic exponent.
    pub p: f32,
    /// Divide each attention map by its L2 norm before the distance.
    pub normalize_maps: bool,
}

impl Default for DistillPlan {
    fn default() -> Self {
        DistillPlan {
            family: Family::None,
            positions: vec!["stage2".to_string()],
            alpha: 0.5,
            p: 1.0,
            normalize_maps: false,
        }
    }
}

impl DistillPlan {
    pub fn lgad(positions: &[&str]) -> Self {
        DistillPlan {
            family: Family::Lgad,
            positions: positions.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(DistillError::Plan(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if self.p < 1.0 || !self.p.is_finite() {
            return Err(DistillError::Plan(format!("p {} must be finite and >= 1", self.p)));
        }
        if self.family.uses_positions() {
            if self.positions.is_empty() {
                return Err(DistillError::Plan(format!(
                    "family {} needs at least one tap position",
                    self.family
                )));
            }
            for p in &self.positions {
                if !TAP_NAMES.contains(&p.as_str()) {
                    return Err(DistillError::Plan(format!(
                        "unknown tap position '{p}' (expected one of {TAP_NAMES:?})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn find_var(taps: &[(&str, Var)], name: &str) -> Result<Var> {
    taps.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| DistillError::MissingTap(name.to_string()))
}

fn find_tensor<'a, T: Scalar>(taps: &'a [(&str, &Tensor<T>)], name: &str) -> Result<&'a Tensor<T>> {
    taps.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| DistillError::MissingTap(name.to_string()))
}

/// Layer-wise attention transfer loss: sum over the planned positions of the
/// mean squared difference between student and teacher attention maps.
/// Teacher taps are detached constants.
pub fn lat_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_taps: &[(&str, Var)],
    teacher_taps: &[(&str, &Tensor<T>)],
    plan: &DistillPlan,
) -> Result<Var> {
    if plan.family != Family::Lgad {
        return Err(DistillError::Plan(format!("lat_loss called with family {}", plan.family)));
    }
    plan.validate()?;
    let p = T::from_f64_lossy(plan.p as f64);
    let mut total: Option<Var> = None;
    for pos in &plan.positions {
        let s_tap = find_var(student_taps, pos)?;
        let t_tap = find_tensor(teacher_taps, pos)?;
        let mut s_map = tape.channel_abs_pow_mean(s_tap, p)?;
        let mut t_map = ops::channel_abs_pow_mean_forward(t_tap, p)?;
        if plan.normalize_maps {
            s_map = tape.l2_normalize(s_map);
            t_map = ops::l2_normalize_forward(&t_map).0;
        }
        let pair = tape.mse_to(s_map, t_map)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, pair)?,
            None => pair,
        });
    }
    Ok(total.expect("positions validated nonempty"))
}

/// Final objective value: `seg + alpha * lat`, exactly.
pub fn total_loss(seg: f32, lat: f32, alpha: f32) -> Result<f32> {
    if !seg.is_finite() {
        return Err(DistillError::NonFinite(format!("seg = {seg}")));
    }
    if !lat.is_finite() {
        return Err(DistillError::NonFinite(format!("lat = {lat}")));
    }
    Ok(seg + alpha * lat)
}

/// Tape composition of the final objective: `seg + alpha * transfer`.
pub fn combine_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    seg: Var,
    transfer: Option<Var>,
    alpha: f32,
) -> Result<Var> {
    match transfer {
        Some(t) => {
            let scaled = tape.scale(t, T::from_f64_lossy(alpha as f64));
            Ok(tape.add(seg, scaled)?)
        }
        None => Ok(seg),
    }
}

/// Auxiliary 1x1 classifier heads for deep supervision, one per supervised
/// tap. Trained jointly with the student and discarded at inference.
#[derive(Debug, Clone)]
pub struct DsHeads {
    params: Vec<(String, Tensor<f32>)>,
}

impl DsHeads {
    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }
}

/// Deterministic aux-head initialization matching the network's scheme.
pub fn build_ds_heads(cfg: &NetworkConfig, positions: &[String], seed: u64) -> Result<DsHeads> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for pos in positions {
        let idx = TAP_NAMES
            .iter()
            .position(|n| n == pos)
            .ok_or_else(|| DistillError::MissingTap(pos.clone()))?;
        let cin = cfg.stage_widths[idx];
        let dims = Dims::new(cfg.num_classes, cin, 1, 1);
        let std = (2.0 / cin as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut data = Vec::with_capacity(dims.len());
        for _ in 0..dims.len() {
            data.push(normal.sample(&mut rng) as f32);
        }
        params.push((format!("ds.{pos}.weight"), Tensor::new(dims, data)?));
        params.push((format!("ds.{pos}.bias"), Tensor::zeros(Dims::new(1, cfg.num_classes, 1, 1))));
    }
    Ok(DsHeads { params })
}

/// Deep-supervision loss: mean over supervised taps of the cross-entropy of
/// the upsampled aux logits (1x1 conv then bilinear upsample) against the
/// labels.
pub fn ds_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_taps: &[(&str, Var)],
    targets: &[ClassMask],
    aux: &[(&str, Var, Var)],
) -> Result<Var> {
    if aux.is_empty() {
        return Err(DistillError::Plan("deep supervision needs at least one aux head".into()));
    }
    let (label_h, label_w) = (targets[0].height(), targets[0].width());
    let mut total: Option<Var> = None;
    for (pos, w, b) in aux {
        let tap = find_var(student_taps, pos)?;
        let logits_small = tape.conv2d(tap, *w, *b, 1, 0)?;
        let logits = tape.bilinear_upsample(logits_small, label_h, label_w)?;
        let ce = tape.softmax_cross_entropy(logits, targets, None)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let total = total.expect("aux nonempty");
    Ok(tape.scale(total, T::from_f64_lossy(1.0 / aux.len() as f64)))
}

/// Mutual-mimicry loss: symmetric per-pixel KL divergence between this
/// network's logits and the peer's detached logits, averaged over pixels.
pub fn dml_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, peer_logits: Tensor<T>) -> Result<Var> {
    Ok(tape.sym_kl_to(logits, peer_logits)?)
}

/// Value of the mutual-mimicry loss on two plain tensors (symmetric).
pub fn dml_loss_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    Ok(ops::sym_kl_forward(a, b)?)
}

/// Feature-map distillation: sum over positions of the mean squared
/// difference of the raw activations. Teacher taps are detached constants.
pub fn fmd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_taps: &[(&str, Var)],
    teacher_taps: &[(&str, &Tensor<T>)],
    positions: &[String],
) -> Result<Var> {
    if positions.is_empty() {
        return Err(DistillError::Plan("feature-map distillation needs at least one position".into()));
    }
    let mut total: Option<Var> = None;
    for pos in positions {
        let s_tap = find_var(student_taps, pos)?;
        let t_tap = find_tensor(teacher_taps, pos)?;
        let pair = tape.mse_to(s_tap, t_tap.clone())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, pair)?,
            None => pair,
        });
    }
    Ok(total.expect("positions nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(dims: Dims, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.5..1.5))
    }

    fn eval_lat(
        student: &[(&str, &Tensor<f64>)],
        teacher: &[(&str, &Tensor<f64>)],
        plan: &DistillPlan,
    ) -> f64 {
        let mut tape = Tape::<f64>::new();
        let student_vars: Vec<(&str, Var)> =
            student.iter().map(|(n, t)| (*n, tape.leaf((*t).clone(), true))).collect();
        let loss = lat_loss(&mut tape, &student_vars, teacher, plan).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn identical_taps_give_zero_lat_loss() {
        let t1 = random_tensor(Dims::new(1, 4, 6, 6), 1);
        let t2 = random_tensor(Dims::new(1, 8, 3, 3), 2);
        let plan = DistillPlan::lgad(&["stage1", "stage2"]);
        let v = eval_lat(
            &[("stage1", &t1), ("stage2", &t2)],
            &[("stage1", &t1), ("stage2", &t2)],
            &plan,
        );
        assert_eq!(v, 0.0);
    }

    #[test]
    fn unit_map_offset_gives_one() {
        // Single channel, nonnegative values: attention map == |tap| == tap,
        // so a tap offset of +1 shifts the map by exactly 1.
        let teacher = Tensor::<f64>::from_fn(Dims::new(1, 1, 4, 4), |_, _, y, x| (y + x) as f64);
        let student =
            Tensor::new(teacher.dims(), teacher.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let plan = DistillPlan::lgad(&["stage3"]);
        let v = eval_lat(&[("stage3", &student)], &[("stage3", &teacher)], &plan);
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn lat_loss_is_additive_over_positions() {
        let s: Vec<Tensor<f64>> = (0..3).map(|i| random_tensor(Dims::new(1, 3, 5, 5), 10 + i)).collect();
        let t: Vec<Tensor<f64>> = (0..3).map(|i| random_tensor(Dims::new(1, 3, 5, 5), 20 + i)).collect();
        let names = ["stage1", "stage2", "stage4"];
        let student: Vec<(&str, &Tensor<f64>)> = names.iter().zip(&s).map(|(n, t)| (*n, t)).collect();
        let teacher: Vec<(&str, &Tensor<f64>)> = names.iter().zip(&t).map(|(n, t)| (*n, t)).collect();

        let joint = eval_lat(&student, &teacher, &DistillPlan::lgad(&names));
        let mut sum = 0.0;
        for (i, name) in names.iter().enumerate() {
            sum += eval_lat(
                &[(*name, &s[i])],
                &[(*name, &t[i])],
                &DistillPlan::lgad(&[name]),
            );
        }
        assert!((joint - sum).abs() < 1e-12, "joint {joint} vs sum {sum}");
    }

    #[test]
    fn lat_loss_rejects_missing_tap_and_bad_plan() {
        let t = random_tensor(Dims::new(1, 2, 4, 4), 5);
        let plan = DistillPlan::lgad(&["stage2"]);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(t.clone(), true);
        assert!(matches!(
            lat_loss(&mut tape, &[("stage1", v)], &[("stage1", &t)], &plan),
            Err(DistillError::MissingTap(_))
        ));

        let mut bad = DistillPlan::lgad(&["stage2"]);
        bad.alpha = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = DistillPlan::lgad(&["nowhere"]);
        bad.alpha = 0.5;
        assert!(bad.validate().is_err());
        let empty = DistillPlan { family: Family::Fmd, positions: vec![], ..Default::default() };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn gradient_reaches_student_only() {
        let t_student = random_tensor(Dims::new(1, 3, 4, 4), 6);
        let t_teacher = random_tensor(Dims::new(1, 3, 4, 4), 7);
        let plan = DistillPlan::lgad(&["stage1"]);
        let mut tape = Tape::<f64>::new();
        let sv = tape.leaf(t_student, true);
        let loss = lat_loss(&mut tape, &[("stage1", sv)], &[("stage1", &t_teacher)], &plan).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(sv).unwrap();
        assert!(grad.iter().any(|&g| g != 0.0));
        // The teacher tensor never joins the tape; its grad slot stays empty.
        assert!(t_teacher.grad().is_none());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.4, 0.5).unwrap(), 1.2);
        assert_eq!(total_loss(0.7, 9.9, 0.0).unwrap(), 0.7);
        assert_eq!(total_loss(0.7, 0.0, 0.5).unwrap(), 0.7);
        assert!(total_loss(f32::NAN, 0.0, 0.5).is_err());
        assert!(total_loss(0.0, f32::INFINITY, 0.5).is_err());
    }

    #[test]
    fn ds_uniform_aux_logits_give_ln_two() {
        // Zero aux weights produce uniform logits over K = 2 classes.
        let tap = random_tensor(Dims::new(1, 3, 4, 4), 8);
        let targets = vec![ClassMask::zeros(8, 8)];
        let mut tape = Tape::<f64>::new();
        let tv = tape.leaf(tap, true);
        let w = tape.leaf(Tensor::zeros(Dims::new(2, 3, 1, 1)), true);
        let b = tape.leaf(Tensor::zeros(Dims::new(1, 2, 1, 1)), true);
        let loss = ds_loss(&mut tape, &[("stage2", tv)], &targets, &[("stage2", w, b)]).unwrap();
        assert!((tape.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ds_loss_matches_manual_composition() {
        // Same pipeline assembled by hand: 1x1 conv, upsample, cross-entropy.
        let tap = random_tensor(Dims::new(2, 3, 4, 4), 9);
        let w = random_tensor(Dims::new(2, 3, 1, 1), 10);
        let b = random_tensor(Dims::new(1, 2, 1, 1), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let targets: Vec<ClassMask> = (0..2)
            .map(|_| ClassMask::new(8, 8, (0..64).map(|_| rng.gen_range(0..2u16)).collect()).unwrap())
            .collect();

        let mut tape = Tape::<f64>::new();
        let tv = tape.leaf(tap.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let bv = tape.leaf(b.clone(), true);
        let loss = ds_loss(&mut tape, &[("stage2", tv)], &targets, &[("stage2", wv, bv)]).unwrap();
        let got = tape.value(loss).item();

        let logits_small = ops::conv2d_forward(&tap, &w, &b, 1, 0).unwrap();
        let logits = ops::upsample_forward(&logits_small, 8, 8).unwrap();
        let (want, _) = ops::softmax_ce_forward(&logits, &targets, None).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ds_perfect_aux_logits_drive_loss_to_zero() {
        let targets = vec![ClassMask::new(8, 8, vec![1; 64]).unwrap()];
        let mut prev = f64::INFINITY;
        for margin in [3.0, 8.0, 20.0] {
            let tap = Tensor::<f64>::from_fn(Dims::new(1, 2, 4, 4), |_, c, _, _| {
                if c == 1 { margin } else { 0.0 }
            });
            let mut tape = Tape::<f64>::new();
            let tv = tape.leaf(tap, true);
            // Identity 1x1 conv.
            let w = tape.leaf(
                Tensor::from_fn(Dims::new(2, 2, 1, 1), |n, c, _, _| if n == c { 1.0 } else { 0.0 }),
                true,
            );
            let b = tape.leaf(Tensor::zeros(Dims::new(1, 2, 1, 1)), true);
            let loss = ds_loss(&mut tape, &[("stage4", tv)], &targets, &[("stage4", w, b)]).unwrap();
            let v = tape.value(loss).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn dml_zero_on_identical_and_symmetric() {
        let a = random_tensor(Dims::new(1, 3, 4, 4), 13);
        let b = random_tensor(Dims::new(1, 3, 4, 4), 14);
        assert!(dml_loss_value(&a, &a).unwrap().abs() < 1e-12);
        let ab = dml_loss_value(&a, &b).unwrap();
        let ba = dml_loss_value(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(dml_loss_value(&a, &random_tensor(Dims::new(1, 3, 5, 5), 15)).is_err());
    }

    #[test]
    fn dml_matches_hand_computed_kl_sum() {
        // Two 1x2x1x1 logit pairs: softmax pairs (0.25, 0.75) vs (0.5, 0.5).
        let a = Tensor::<f64>::new(Dims::new(1, 2, 1, 1), vec![0.0, (3.0f64).ln()]).unwrap();
        let b = Tensor::<f64>::new(Dims::new(1, 2, 1, 1), vec![0.0, 0.0]).unwrap();
        let got = dml_loss_value(&a, &b).unwrap();
        let (p0, p1, q0, q1) = (0.25f64, 0.75f64, 0.5f64, 0.5f64);
        let want = p0 * (p0 / q0).ln() + p1 * (p1 / q1).ln() + q0 * (q0 / p0).ln() + q1 * (q1 / p1).ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn fmd_zero_identical_and_counts_unit_offsets() {
        let t1 = random_tensor(Dims::new(1, 4, 3, 3), 16);
        let t2 = random_tensor(Dims::new(1, 2, 6, 6), 17);
        let positions = vec!["stage1".to_string(), "stage3".to_string()];

        let mut tape = Tape::<f64>::new();
        let v1 = tape.leaf(t1.clone(), true);
        let v2 = tape.leaf(t2.clone(), true);
        let loss = fmd_loss(
            &mut tape,
            &[("stage1", v1), ("stage3", v2)],
            &[("stage1", &t1), ("stage3", &t2)],
            &positions,
        )
        .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // Taps offset by a constant 1 -> each pair contributes exactly 1.
        let o1 = Tensor::new(t1.dims(), t1.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let o2 = Tensor::new(t2.dims(), t2.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let v1 = tape.leaf(o1, true);
        let v2 = tape.leaf(o2, true);
        let loss = fmd_loss(
            &mut tape,
            &[("stage1", v1), ("stage3", v2)],
            &[("stage1", &t1), ("stage3", &t2)],
            &positions,
        )
        .unwrap();
        assert!((tape.value(loss).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fmd_matches_scalar_reimplementation() {
        let s = random_tensor(Dims::new(2, 3, 4, 4), 18);
        let t = random_tensor(Dims::new(2, 3, 4, 4), 19);
        let mut tape = Tape::<f64>::new();
        let sv = tape.leaf(s.clone(), true);
        let loss =
            fmd_loss(&mut tape, &[("stage2", sv)], &[("stage2", &t)], &["stage2".to_string()])
                .unwrap();
        let got = tape.value(loss).item();
        let mut acc = 0.0;
        for (a, b) in s.data().iter().zip(t.data()) {
            acc += (a - b) * (a - b);
        }
        let want = acc / s.dims().len() as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn family_parsing_round_trips() {
        for f in [Family::Lgad, Family::Ds, Family::Dml, Family::Fmd, Family::None] {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
        }
        assert!("SAD".parse::<Family>().is_err());
    }
}
