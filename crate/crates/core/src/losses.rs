//! Region-focused regression losses, the smoothed Dice loss, the weighted
//! multi-task composite and its analytic gradients.
//!
//! Everything here works on flat row-major planes so the same code serves the
//! `f32` training path and the `f64` gradient checks. Accumulation is always
//! done in `f64`.
//!
//! Gradient conventions: the subgradient of `|e|` at `e = 0` is 0, and an empty
//! region contributes neither loss nor gradient.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::image::{BinaryMask, HuImage, Image2D};
use crate::sample::Prediction;
use crate::variant::Variant;

/// Smoothing constant used for the classification term during training.
pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;

/// Task weights `w1` (body regression), `w2` (bone classification) and `w3`
/// (bone regression).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl LossWeights {
    pub const fn new(w1: f64, w2: f64, w3: f64) -> Self {
        LossWeights { w1, w2, w3 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::contract(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Variant::ThreeTask.default_weights()
    }
}

/// Per-term values of the composite objective. Terms of tasks absent from the
/// variant are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub body_reg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_class: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_reg: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Number of terms present.
    pub fn active_terms(&self) -> usize {
        1 + self.bone_class.is_some() as usize + self.bone_reg.is_some() as usize
    }

    /// Component-wise mean of several breakdowns sharing the same active terms.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg_opt = |f: fn(&LossBreakdown) -> Option<f64>| {
            items
                .iter()
                .map(f)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n)
        };
        LossBreakdown {
            body_reg: items.iter().map(|b| b.body_reg).sum::<f64>() / n,
            bone_class: avg_opt(|b| b.bone_class),
            bone_reg: avg_opt(|b| b.bone_reg),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: (1, a),
            got: (1, b),
        })
    }
}

fn sign(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of `|y - yhat|` over the pixels where `region == want`, and their count.
fn abs_sum<T: Copy + Into<f64>>(y: &[T], yhat: &[T], region: &[u8], want: u8) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for ((&a, &b), &r) in y.iter().zip(yhat).zip(region) {
        if r == want {
            sum += (a.into() - b.into()).abs();
            n += 1;
        }
    }
    (sum, n)
}

/// Mean absolute error over the pixels where `region` is set; 0 for an empty
/// region.
pub fn regional_mae_slice<T: Copy + Into<f64>>(y: &[T], yhat: &[T], region: &[u8]) -> Result<f64> {
    check_len(y.len(), yhat.len())?;
    check_len(y.len(), region.len())?;
    let (sum, n) = abs_sum(y, yhat, region, 1);
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Plain MAE over every pixel.
pub fn global_mae_slice<T: Copy + Into<f64>>(y: &[T], yhat: &[T]) -> Result<f64> {
    check_len(y.len(), yhat.len())?;
    let sum: f64 = y
        .iter()
        .zip(yhat)
        .map(|(&a, &b)| (a.into() - b.into()).abs())
        .sum();
    Ok(sum / y.len().max(1) as f64)
}

/// Two-region weighted MAE: each region's MAE is weighted by the relative
/// volume of the *other* region, so a sparse region is boosted to parity.
pub fn weighted_mae_slice<T: Copy + Into<f64>>(y: &[T], yhat: &[T], region_k: &[u8]) -> Result<f64> {
    check_len(y.len(), yhat.len())?;
    check_len(y.len(), region_k.len())?;
    let (sum_k, n_k) = abs_sum(y, yhat, region_k, 1);
    let (sum_c, n_c) = abs_sum(y, yhat, region_k, 0);
    let n = (n_k + n_c) as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let mae_k = if n_k == 0 { 0.0 } else { sum_k / n_k as f64 };
    let mae_c = if n_c == 0 { 0.0 } else { sum_c / n_c as f64 };
    Ok((n_c as f64 / n) * mae_k + (n_k as f64 / n) * mae_c)
}

/// `1 - (2 Σ x·x̂ + s) / (Σ x² + Σ x̂² + s)`. When both sums vanish with
/// `s = 0` the masks agree trivially and the loss is 0.
pub fn dice_loss_slice<T: Copy + Into<f64>>(x: &[T], xhat: &[T], smooth: f64) -> Result<f64> {
    check_len(x.len(), xhat.len())?;
    if !(smooth >= 0.0) {
        return Err(Error::contract("dice smoothing must be >= 0"));
    }
    let (num, den) = dice_sums(x, xhat, smooth);
    Ok(if den == 0.0 { 0.0 } else { 1.0 - num / den })
}

fn dice_sums<T: Copy + Into<f64>>(x: &[T], xhat: &[T], smooth: f64) -> (f64, f64) {
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(xhat) {
        let (a, b) = (a.into(), b.into());
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    (2.0 * sxy + smooth, sxx + syy + smooth)
}

pub fn regional_mae(y: &Image2D, yhat: &Image2D, region: &BinaryMask) -> Result<f64> {
    check_dims(y.dims(), yhat.dims())?;
    check_dims(y.dims(), region.dims())?;
    regional_mae_slice(y.values(), yhat.values(), region.values())
}

pub fn weighted_mae(y: &Image2D, yhat: &Image2D, region_k: &BinaryMask) -> Result<f64> {
    check_dims(y.dims(), yhat.dims())?;
    check_dims(y.dims(), region_k.dims())?;
    weighted_mae_slice(y.values(), yhat.values(), region_k.values())
}

pub fn dice_loss(x: &Image2D, xhat: &Image2D, smooth: f64) -> Result<f64> {
    check_dims(x.dims(), xhat.dims())?;
    dice_loss_slice(x.values(), xhat.values(), smooth)
}

/// Borrowed head planes of one case, in the space the loss is evaluated in.
#[derive(Debug, Clone, Copy)]
pub struct HeadPlanes<'a, T> {
    pub sct: &'a [T],
    pub bone: Option<&'a [T]>,
    pub mask: Option<&'a [T]>,
}

/// Reference planes for one case: target values (same space as the heads),
/// body mask and bone target mask.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a, T> {
    pub ct: &'a [T],
    pub body: &'a [u8],
    pub bone: &'a [u8],
}

/// Full configuration of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub variant: Variant,
    pub weights: LossWeights,
    pub dice_smooth: f64,
}

impl Objective {
    pub fn new(variant: Variant, weights: LossWeights) -> Self {
        Objective {
            variant,
            weights,
            dice_smooth: DEFAULT_DICE_SMOOTH,
        }
    }

    fn check<T>(&self, heads: &HeadPlanes<'_, T>, t: &Targets<'_, T>) -> Result<()> {
        self.weights.validate()?;
        let n = t.ct.len();
        check_len(n, heads.sct.len())?;
        check_len(n, t.body.len())?;
        check_len(n, t.bone.len())?;
        if self.variant.has_bone_head() {
            let b = heads
                .bone
                .ok_or_else(|| Error::contract("variant needs a bone head"))?;
            check_len(n, b.len())?;
        }
        if self.variant.has_mask_head() {
            let m = heads
                .mask
                .ok_or_else(|| Error::contract("variant needs a mask head"))?;
            check_len(n, m.len())?;
        }
        Ok(())
    }

    /// Composite loss `w1·L_body + w2·L_class + w3·L_bone` restricted to the
    /// variant's terms.
    pub fn loss<T: Copy + Into<f64>>(
        &self,
        heads: &HeadPlanes<'_, T>,
        t: &Targets<'_, T>,
    ) -> Result<LossBreakdown> {
        self.check(heads, t)?;
        let w = self.weights;
        let body_reg = match self.variant {
            Variant::OneTaskGlobal => global_mae_slice(t.ct, heads.sct)?,
            _ => weighted_mae_slice(t.ct, heads.sct, t.body)?,
        };
        let bone_class = match (self.variant.has_mask_head(), heads.mask) {
            (true, Some(mask)) => {
                let target: Vec<f64> = t.bone.iter().map(|&b| b as f64).collect();
                let m: Vec<f64> = mask.iter().map(|&v| v.into()).collect();
                Some(dice_loss_slice(&target, &m, self.dice_smooth)?)
            }
            _ => None,
        };
        let bone_reg = match (self.variant.has_bone_head(), heads.bone) {
            (true, Some(bone)) => Some(regional_mae_slice(t.ct, bone, t.bone)?),
            _ => None,
        };
        let total = w.w1 * body_reg
            + bone_class.map_or(0.0, |v| w.w2 * v)
            + bone_reg.map_or(0.0, |v| w.w3 * v);
        Ok(LossBreakdown {
            body_reg,
            bone_class,
            bone_reg,
            total,
        })
    }

    /// Loss plus the analytic gradient of `total` with respect to every pixel
    /// of every present head.
    pub fn loss_and_gradients<T: Copy + Into<f64>>(
        &self,
        heads: &HeadPlanes<'_, T>,
        t: &Targets<'_, T>,
    ) -> Result<(LossBreakdown, LossGradients)> {
        let breakdown = self.loss(heads, t)?;
        let w = self.weights;
        let n = t.ct.len();

        let mut sct = vec![0.0; n];
        match self.variant {
            Variant::OneTaskGlobal => {
                let scale = w.w1 / n as f64;
                for (g, (&y, &p)) in sct.iter_mut().zip(t.ct.iter().zip(heads.sct)) {
                    *g = scale * sign(p.into() - y.into());
                }
            }
            _ => {
                let n_k = t.body.iter().filter(|&&b| b == 1).count() as f64;
                let n_c = n as f64 - n_k;
                let total = n as f64;
                // d/dŷ of (N_c/N)·MAE_k is sign(ŷ-y)·N_c/(N·N_k) on region k, and
                // symmetrically on the complement.
                let in_k = if n_k > 0.0 { w.w1 * n_c / (total * n_k) } else { 0.0 };
                let in_c = if n_c > 0.0 { w.w1 * n_k / (total * n_c) } else { 0.0 };
                for (i, g) in sct.iter_mut().enumerate() {
                    let s = sign(heads.sct[i].into() - t.ct[i].into());
                    *g = s * if t.body[i] == 1 { in_k } else { in_c };
                }
            }
        }

        let bone = match (self.variant.has_bone_head(), heads.bone) {
            (true, Some(b)) => {
                let n_bone = t.bone.iter().filter(|&&v| v == 1).count();
                let mut g = vec![0.0; n];
                if n_bone > 0 {
                    let scale = w.w3 / n_bone as f64;
                    for i in 0..n {
                        if t.bone[i] == 1 {
                            g[i] = scale * sign(b[i].into() - t.ct[i].into());
                        }
                    }
                }
                Some(g)
            }
            _ => None,
        };

        let mask = match (self.variant.has_mask_head(), heads.mask) {
            (true, Some(m)) => {
                let xs: Vec<f64> = t.bone.iter().map(|&v| v as f64).collect();
                let ps: Vec<f64> = m.iter().map(|&v| v.into()).collect();
                let (num, den) = dice_sums(&xs, &ps, self.dice_smooth);
                let mut g = vec![0.0; n];
                if den > 0.0 {
                    // L = 1 - num/den; dL/dp_i = -(2 x_i den - num 2 p_i) / den²
                    let inv = w.w2 / (den * den);
                    for i in 0..n {
                        g[i] = -(2.0 * xs[i] * den - num * 2.0 * ps[i]) * inv;
                    }
                }
                Some(g)
            }
            _ => None,
        };

        Ok((breakdown, LossGradients { sct, bone, mask }))
    }
}

/// Gradient planes of the composite total with respect to each head.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub sct: Vec<f64>,
    pub bone: Option<Vec<f64>>,
    pub mask: Option<Vec<f64>>,
}

/// Composite loss of a prediction given in HU against a reference CT, with
/// regression terms evaluated on values multiplied by `value_scale`.
pub fn composite_loss(
    pred: &Prediction,
    ct: &HuImage,
    body: &BinaryMask,
    bone_target: &BinaryMask,
    objective: &Objective,
    value_scale: f64,
) -> Result<LossBreakdown> {
    check_dims(ct.dims(), pred.sct.dims())?;
    check_dims(ct.dims(), body.dims())?;
    check_dims(ct.dims(), bone_target.dims())?;
    let scale = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64 * value_scale).collect() };
    let ct_s = scale(ct.values());
    let sct_s = scale(pred.sct.values());
    let bone_s = pred.bone.as_ref().map(|b| scale(b.values()));
    let mask_s: Option<Vec<f64>> = pred
        .mask
        .as_ref()
        .map(|m| m.values().iter().map(|&v| v as f64).collect());
    objective.loss(
        &HeadPlanes {
            sct: &sct_s,
            bone: bone_s.as_deref(),
            mask: mask_s.as_deref(),
        },
        &Targets {
            ct: &ct_s,
            body: body.values(),
            bone: bone_target.values(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(v: &[f32]) -> Image2D {
        Image2D::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn mask(v: &[u8]) -> BinaryMask {
        BinaryMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn regional_mae_examples() {
        let y = img(&[0.0, 0.0, 10.0, 10.0]);
        let p = img(&[1.0, 3.0, 10.0, 6.0]);
        assert_eq!(regional_mae(&y, &p, &mask(&[0, 0, 1, 1])).unwrap(), 2.0);
        assert_eq!(regional_mae(&y, &y, &mask(&[1, 1, 1, 1])).unwrap(), 0.0);
        assert_eq!(regional_mae(&y, &p, &mask(&[0, 0, 0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn weighted_mae_examples() {
        let y = img(&[0.0, 0.0, 0.0, 10.0]);
        let p = img(&[1.0, 1.0, 1.0, 6.0]);
        let v = weighted_mae(&y, &p, &mask(&[0, 0, 0, 1])).unwrap();
        assert!((v - 3.25).abs() < 1e-12);
        // equal volumes: arithmetic mean of 2 and 4
        let y = img(&[0.0, 0.0, 0.0, 0.0]);
        let p = img(&[2.0, -2.0, 4.0, 4.0]);
        assert!((weighted_mae(&y, &p, &mask(&[1, 1, 0, 0])).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(weighted_mae(&y, &y, &mask(&[1, 0, 1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn dice_examples() {
        let x = img(&[1.0, 1.0, 0.0, 0.0]);
        let p = img(&[1.0, 0.0, 0.0, 0.0]);
        assert!((dice_loss(&x, &p, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice_loss(&x, &x, 0.0).unwrap(), 0.0);
        let z = img(&[0.0; 4]);
        assert_eq!(dice_loss(&z, &z, 1.0).unwrap(), 0.0);
        assert_eq!(dice_loss(&z, &z, 0.0).unwrap(), 0.0);
        assert!(dice_loss(&x, &p, -1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let y = img(&[0.0, 1.0]);
        let p = img(&[0.0, 1.0, 2.0]);
        assert!(matches!(
            regional_mae(&y, &p, &mask(&[1, 1])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(weighted_mae(&y, &y, &mask(&[1])).is_err());
        assert!(dice_loss(&y, &p, 1.0).is_err());
    }

    #[test]
    fn composite_weighted_sum() {
        let w = LossWeights::new(1.0, 1.5, 1.3);
        let total = w.w1 * 10.0 + w.w2 * 0.2 + w.w3 * 50.0;
        assert!((total - 75.3).abs() < 1e-12);
    }

    fn case() -> (Vec<f64>, Vec<u8>, Vec<u8>) {
        let ct = vec![-1.0, 0.05, 0.9, 1.2, 0.0, -1.0];
        let body = vec![0, 1, 1, 1, 1, 0];
        let bone = vec![0, 0, 1, 1, 0, 0];
        (ct, body, bone)
    }

    #[test]
    fn perfect_outputs_give_zero_total() {
        let (ct, body, bone) = case();
        let mask: Vec<f64> = bone.iter().map(|&b| b as f64).collect();
        let obj = Objective {
            dice_smooth: 0.0,
            ..Objective::new(Variant::ThreeTask, LossWeights::default())
        };
        let heads = HeadPlanes {
            sct: &ct,
            bone: Some(&ct),
            mask: Some(&mask),
        };
        let t = Targets {
            ct: &ct,
            body: &body,
            bone: &bone,
        };
        let (l, g) = obj.loss_and_gradients(&heads, &t).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.sct.iter().all(|&v| v == 0.0));
        assert!(g.bone.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_task_weights_isolate_body_term() {
        let (ct, body, bone) = case();
        let sct: Vec<f64> = ct.iter().map(|v| v + 0.3).collect();
        let b: Vec<f64> = ct.iter().map(|v| v * 0.5).collect();
        let m = vec![0.4; 6];
        let obj = Objective::new(Variant::ThreeTask, LossWeights::new(1.0, 0.0, 0.0));
        let l = obj
            .loss(
                &HeadPlanes {
                    sct: &sct,
                    bone: Some(&b),
                    mask: Some(&m),
                },
                &Targets {
                    ct: &ct,
                    body: &body,
                    bone: &bone,
                },
            )
            .unwrap();
        assert_eq!(l.total, l.body_reg);
    }

    #[test]
    fn variant_terms() {
        let (ct, body, bone) = case();
        let sct: Vec<f64> = ct.iter().map(|v| v + 0.3).collect();
        let t = Targets {
            ct: &ct,
            body: &body,
            bone: &bone,
        };
        let two = Objective::new(Variant::TwoTask, Variant::TwoTask.default_weights())
            .loss(
                &HeadPlanes {
                    sct: &sct,
                    bone: Some(&sct),
                    mask: None,
                },
                &t,
            )
            .unwrap();
        assert_eq!(two.active_terms(), 2);
        assert!(two.bone_class.is_none());

        let global = Objective::new(Variant::OneTaskGlobal, Variant::OneTaskGlobal.default_weights())
            .loss(
                &HeadPlanes {
                    sct: &sct,
                    bone: None,
                    mask: None,
                },
                &t,
            )
            .unwrap();
        assert_eq!(global.active_terms(), 1);
        assert!((global.total - 0.3).abs() < 1e-12);

        let missing = Objective::new(Variant::ThreeTask, LossWeights::default()).loss(
            &HeadPlanes {
                sct: &sct,
                bone: None,
                mask: None,
            },
            &t,
        );
        assert!(missing.is_err());
    }

    #[test]
    fn bone_gradient_zero_outside_target() {
        let (ct, body, bone) = case();
        let p: Vec<f64> = ct.iter().map(|v| v + 0.25).collect();
        let m = vec![0.3; 6];
        let obj = Objective::new(Variant::ThreeTask, LossWeights::default());
        let (_, g) = obj
            .loss_and_gradients(
                &HeadPlanes {
                    sct: &p,
                    bone: Some(&p),
                    mask: Some(&m),
                },
                &Targets {
                    ct: &ct,
                    body: &body,
                    bone: &bone,
                },
            )
            .unwrap();
        let gb = g.bone.unwrap();
        for i in 0..6 {
            if bone[i] == 0 {
                assert_eq!(gb[i], 0.0);
            } else {
                assert!(gb[i] != 0.0);
            }
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(LossWeights::new(-1.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(1.0, f64::NAN, 0.0).validate().is_err());
    }

    fn planes(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<u8>)> {
        (
            proptest::collection::vec(-1000.0f64..3000.0, n),
            proptest::collection::vec(-1000.0f64..3000.0, n),
            proptest::collection::vec(0u8..2, n),
        )
    }

    proptest! {
        #[test]
        fn wmae_homogeneous((y, p, m) in planes(16), s in 0.01f64..100.0) {
            let a = weighted_mae_slice(&y, &p, &m).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| v * s).collect();
            let ps: Vec<f64> = p.iter().map(|v| v * s).collect();
            let b = weighted_mae_slice(&ys, &ps, &m).unwrap();
            prop_assert!((b - s * a).abs() <= 1e-9 * (s * a).abs().max(1e-300));
        }

        #[test]
        fn wmae_swap_symmetric((y, p, m) in planes(16)) {
            let c: Vec<u8> = m.iter().map(|v| 1 - v).collect();
            let a = weighted_mae_slice(&y, &p, &m).unwrap();
            let b = weighted_mae_slice(&y, &p, &c).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn dice_in_unit_interval(
            x in proptest::collection::vec(0.0f64..=1.0, 16),
            p in proptest::collection::vec(0.0f64..=1.0, 16),
            s in 0.0f64..5.0,
        ) {
            let d = dice_loss_slice(&x, &p, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn dice_self_zero(x in proptest::collection::vec(0u8..2, 16), s in 0.001f64..5.0) {
            let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            prop_assert!(dice_loss_slice(&xf, &xf, s).unwrap().abs() < 1e-15);
        }

        #[test]
        fn doubling_weight_doubles_term(
            (y, p, m) in planes(12),
            which in 0usize..3,
        ) {
            let bone: Vec<u8> = y.iter().map(|&v| (v >= 250.0) as u8).collect();
            let mask: Vec<f64> = p.iter().map(|v| (v + 1000.0) / 4000.0).collect();
            let base = LossWeights::new(1.0, 1.5, 1.3);
            let mut doubled = base;
            match which { 0 => doubled.w1 *= 2.0, 1 => doubled.w2 *= 2.0, _ => doubled.w3 *= 2.0 }
            let heads = HeadPlanes { sct: &p, bone: Some(&p), mask: Some(&mask) };
            let t = Targets { ct: &y, body: &m, bone: &bone };
            let a = Objective::new(Variant::ThreeTask, base).loss(&heads, &t).unwrap();
            let b = Objective::new(Variant::ThreeTask, doubled).loss(&heads, &t).unwrap();
            let term = match which {
                0 => base.w1 * a.body_reg,
                1 => base.w2 * a.bone_class.unwrap(),
                _ => base.w3 * a.bone_reg.unwrap(),
            };
            prop_assert!((b.total - a.total - term).abs() <= 1e-9 * b.total.abs().max(1.0));
        }
    }
}
