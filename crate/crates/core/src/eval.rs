//! Head aggregation and region-wise evaluation.
//!
//! MAE regions come from the reference CT's partition inside the reference
//! body mask. Dice regions compare independently derived partitions of the
//! reference and of the synthetic CT. Reports list regions in the order body,
//! bone, tissue, air.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::image::{
    binarize, derive_body_mask, partition_regions, BinaryMask, HuImage, Image2D, RegionPartition,
    BONE_MIN_HU, HU_MAX, HU_MIN,
};
use crate::sample::{Case, Prediction};
use crate::variant::Variant;

pub const DEFAULT_MASK_THRESHOLD: f32 = 0.5;
pub const DEFAULT_DICE_THRESHOLDS: [f64; 6] = [250.0, 450.0, 600.0, 900.0, 1200.0, 1500.0];

/// Final sCT from the head outputs (in HU).
///
/// Three-task: bone head inside `binarize(mask, threshold)`, sCT head
/// elsewhere. Two-task: bone head where the sCT head is at least 250 HU.
/// One-task: the sCT head. The result is clamped to the HU range.
pub fn aggregate_sct(pred: &Prediction, variant: Variant, mask_threshold: f32) -> Result<HuImage> {
    let dims = pred.sct.dims();
    let sct = pred.sct.values();
    let need_bone = || {
        pred.bone
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{variant} aggregation needs a bone head")))
    };
    let values: Vec<f32> = match variant {
        Variant::ThreeTask => {
            let bone = need_bone()?;
            let mask = pred
                .mask
                .as_ref()
                .ok_or_else(|| Error::contract("3tn aggregation needs a mask head"))?;
            check_dims(dims, bone.dims())?;
            check_dims(dims, mask.dims())?;
            let sel = binarize(mask, mask_threshold)?;
            sct.iter()
                .zip(bone.values())
                .zip(sel.values())
                .map(|((&s, &b), &m)| if m == 1 { b } else { s })
                .collect()
        }
        Variant::TwoTask => {
            let bone = need_bone()?;
            check_dims(dims, bone.dims())?;
            sct.iter()
                .zip(bone.values())
                .map(|(&s, &b)| if s >= BONE_MIN_HU { b } else { s })
                .collect()
        }
        Variant::OneTaskFocused | Variant::OneTaskGlobal => sct.to_vec(),
    };
    let clamped = values.into_iter().map(|v| v.clamp(HU_MIN, HU_MAX)).collect();
    Ok(HuImage::clamped(Image2D::new(dims.0, dims.1, clamped)?))
}

/// Pixelwise `sct - ct`.
pub fn difference_map(sct: &HuImage, ct: &HuImage) -> Result<Image2D> {
    check_dims(ct.dims(), sct.dims())?;
    let (h, w) = ct.dims();
    Image2D::new(
        h,
        w,
        sct.values().iter().zip(ct.values()).map(|(s, c)| s - c).collect(),
    )
}

/// Hard Dice `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn hard_dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let inter = a.values().iter().zip(b.values()).filter(|(&x, &y)| x == 1 && y == 1).count();
    let total = a.count() + b.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Per-region values in report order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regions<T> {
    pub body: T,
    pub bone: T,
    pub tissue: T,
    pub air: T,
}

impl<T: Copy> Regions<T> {
    pub const NAMES: [&'static str; 4] = ["body", "bone", "tissue", "air"];

    pub fn as_array(&self) -> [T; 4] {
        [self.body, self.bone, self.tissue, self.air]
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Regions {
            body: v[0],
            bone: v[1],
            tissue: v[2],
            air: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl DiceCurve {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub mae: Regions<Option<f64>>,
    pub dice: Regions<f64>,
    pub dice_curve: DiceCurve,
}

/// Hard Dice of `{ct >= t}` against `{sct >= t}` inside the union of both
/// derived body masks, for every threshold.
pub fn dice_at_thresholds(sct: &HuImage, ct: &HuImage, thresholds: &[f64]) -> Result<DiceCurve> {
    check_dims(ct.dims(), sct.dims())?;
    if thresholds.is_empty() {
        return Err(Error::contract("empty threshold list"));
    }
    let union = derive_body_mask(ct).or(&derive_body_mask(sct))?;
    let (h, w) = ct.dims();
    let above = |img: &HuImage, t: f64| {
        BinaryMask::new(
            h,
            w,
            img.values()
                .iter()
                .zip(union.values())
                .map(|(&v, &u)| (u == 1 && v as f64 >= t) as u8)
                .collect(),
        )
    };
    let values = thresholds
        .iter()
        .map(|&t| hard_dice(&above(ct, t)?, &above(sct, t)?))
        .collect::<Result<_>>()?;
    Ok(DiceCurve {
        thresholds: thresholds.to_vec(),
        values,
    })
}

fn masked_mae(sct: &HuImage, ct: &HuImage, region: &BinaryMask) -> Option<f64> {
    let n = region.count();
    (n > 0).then(|| {
        let sum: f64 = sct
            .values()
            .iter()
            .zip(ct.values())
            .zip(region.values())
            .filter(|(_, &m)| m == 1)
            .map(|((&s, &c), _)| (s as f64 - c as f64).abs())
            .sum();
        sum / n as f64
    })
}

fn derived_partition(img: &HuImage) -> Result<RegionPartition> {
    partition_regions(img, &derive_body_mask(img))
}

pub fn evaluate_case(
    sct: &HuImage,
    ct: &HuImage,
    body_ref: &BinaryMask,
    thresholds: &[f64],
) -> Result<CaseMetrics> {
    check_dims(ct.dims(), sct.dims())?;
    check_dims(ct.dims(), body_ref.dims())?;
    let reference = partition_regions(ct, body_ref)?;
    let mae = Regions {
        body: masked_mae(sct, ct, &reference.body),
        bone: masked_mae(sct, ct, &reference.bone),
        tissue: masked_mae(sct, ct, &reference.tissue),
        air: masked_mae(sct, ct, &reference.air),
    };
    let pr = derived_partition(ct)?;
    let ps = derived_partition(sct)?;
    let dice = Regions {
        body: hard_dice(&pr.body, &ps.body)?,
        bone: hard_dice(&pr.bone, &ps.bone)?,
        tissue: hard_dice(&pr.tissue, &ps.tissue)?,
        air: hard_dice(&pr.air, &ps.air)?,
    };
    Ok(CaseMetrics {
        mae,
        dice,
        dice_curve: dice_at_thresholds(sct, ct, thresholds)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; `None` for no values.
pub fn mean_std(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(Stat { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub thresholds: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mae: Regions<Option<Stat>>,
    pub dice: Regions<Option<Stat>>,
    pub dice_curve: CurveSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub cases: Vec<CaseReport>,
    pub summary: Summary,
}

/// Summary over cases; null MAE entries are skipped per region. Cases are
/// ordered by id first, so the result does not depend on input order.
pub fn summarize(cases: &[CaseReport], metadata: ReportMetadata) -> Result<Report> {
    if cases.is_empty() {
        return Err(Error::contract("cannot summarize zero cases"));
    }
    let mut cases = cases.to_vec();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let thresholds = cases[0].metrics.dice_curve.thresholds.clone();
    if cases.iter().any(|c| c.metrics.dice_curve.thresholds != thresholds) {
        return Err(Error::contract("cases use different Dice thresholds"));
    }
    let per_region = |f: &dyn Fn(&CaseMetrics) -> [Option<f64>; 4]| {
        let mut out = [None; 4];
        for (r, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = cases.iter().filter_map(|c| f(&c.metrics)[r]).collect();
            *slot = mean_std(&vals);
        }
        Regions::from_array(out)
    };
    let mae = per_region(&|m| m.mae.as_array());
    let dice = per_region(&|m| m.dice.as_array().map(Some));
    let mut curve = CurveSummary {
        thresholds: thresholds.clone(),
        mean: Vec::new(),
        std: Vec::new(),
    };
    for i in 0..thresholds.len() {
        let vals: Vec<f64> = cases.iter().map(|c| c.metrics.dice_curve.values[i]).collect();
        let s = mean_std(&vals).expect("non-empty");
        curve.mean.push(s.mean);
        curve.std.push(s.std);
    }
    Ok(Report {
        metadata,
        summary: Summary {
            mae,
            dice,
            dice_curve: curve,
        },
        cases,
    })
}

/// Summary of a variant over several runs: each statistic is the mean of the
/// per-run statistics.
pub fn mean_of_summaries(summaries: &[Summary]) -> Result<Summary> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::contract("no summaries to combine"))?;
    let avg_stat = |pick: &dyn Fn(&Summary) -> Option<Stat>| {
        let present: Vec<Stat> = summaries.iter().filter_map(pick).collect();
        (!present.is_empty()).then(|| {
            let n = present.len() as f64;
            Stat {
                mean: present.iter().map(|s| s.mean).sum::<f64>() / n,
                std: present.iter().map(|s| s.std).sum::<f64>() / n,
            }
        })
    };
    let regions = |pick: &dyn Fn(&Summary) -> Regions<Option<Stat>>| {
        let mut out = [None; 4];
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = avg_stat(&|s| pick(s).as_array()[r]);
        }
        Regions::from_array(out)
    };
    let n = summaries.len() as f64;
    let k = first.dice_curve.thresholds.len();
    if summaries.iter().any(|s| s.dice_curve.thresholds != first.dice_curve.thresholds) {
        return Err(Error::contract("summaries use different Dice thresholds"));
    }
    let avg_vec = |pick: &dyn Fn(&Summary) -> &Vec<f64>| {
        (0..k)
            .map(|i| summaries.iter().map(|s| pick(s)[i]).sum::<f64>() / n)
            .collect()
    };
    Ok(Summary {
        mae: regions(&|s| s.mae),
        dice: regions(&|s| s.dice),
        dice_curve: CurveSummary {
            thresholds: first.dice_curve.thresholds.clone(),
            mean: avg_vec(&|s| &s.dice_curve.mean),
            std: avg_vec(&|s| &s.dice_curve.std),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::contract(format!("unknown report format {other:?}"))),
        }
    }
}

/// Column names of the summary table after `variant`.
pub fn csv_header() -> String {
    let mut cols = vec!["variant".to_string()];
    for metric in ["mae", "dice"] {
        for r in Regions::<f64>::NAMES {
            cols.push(format!("{metric}_{r}_mean"));
            cols.push(format!("{metric}_{r}_std"));
        }
    }
    cols.join(",")
}

fn csv_row(variant: &str, s: &Summary) -> String {
    let mut cols = vec![variant.to_string()];
    for regions in [&s.mae, &s.dice] {
        for stat in regions.as_array() {
            match stat {
                Some(st) => {
                    cols.push(format!("{:.6}", st.mean));
                    cols.push(format!("{:.6}", st.std));
                }
                None => {
                    cols.push(String::new());
                    cols.push(String::new());
                }
            }
        }
    }
    cols.join(",")
}

fn cell(stat: Option<Stat>, digits: usize) -> String {
    match stat {
        Some(s) => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std),
        None => "n/a".to_string(),
    }
}

/// Summary table with one row per `(label, summary)`.
pub fn render_table(rows: &[(String, &Summary)], format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&csv_header());
            out.push('\n');
            for (label, s) in rows {
                out.push_str(&csv_row(label, s));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Variant | MAE body | MAE bone | MAE tissue | MAE air | Dice body | Dice bone | Dice tissue | Dice air |\n");
            out.push_str("|---|---|---|---|---|---|---|---|---|\n");
            for (label, s) in rows {
                let _ = write!(out, "| {label} ");
                for st in s.mae.as_array() {
                    let _ = write!(out, "| {} ", cell(st, 1));
                }
                for st in s.dice.as_array() {
                    let _ = write!(out, "| {} ", cell(st, 3));
                }
                out.push_str("|\n");
            }
        }
        ReportFormat::Json => {
            return Err(Error::contract("a table cannot be rendered as json"));
        }
    }
    Ok(out)
}

pub fn render_report(report: &Report, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        _ => render_table(&[(report.metadata.variant.clone(), &report.summary)], format),
    }
}

/// Pixel-intensity-only regressor: each MR value maps to the CT value of the
/// training pixel with the nearest MR intensity.
#[derive(Debug, Clone)]
pub struct NearestIntensityBaseline {
    mr: Vec<f32>,
    ct: Vec<f32>,
}

impl NearestIntensityBaseline {
    pub fn fit(cases: &[Case]) -> Result<Self> {
        let mut pairs: Vec<(f32, f32)> = cases
            .iter()
            .flat_map(|c| {
                c.sample
                    .mr
                    .values()
                    .iter()
                    .copied()
                    .zip(c.sample.ct.values().iter().copied())
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::contract("baseline needs at least one training case"));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let (mr, ct) = pairs.into_iter().unzip();
        Ok(NearestIntensityBaseline { mr, ct })
    }

    fn lookup(&self, v: f32) -> f32 {
        let i = self.mr.partition_point(|&m| m < v);
        let pick = if i == 0 {
            0
        } else if i == self.mr.len() {
            i - 1
        } else if (v - self.mr[i - 1]).abs() <= (self.mr[i] - v).abs() {
            i - 1
        } else {
            i
        };
        self.ct[pick]
    }

    pub fn predict(&self, mr: &crate::image::MrImage) -> Result<HuImage> {
        let (h, w) = mr.dims();
        let v = mr.values().iter().map(|&x| self.lookup(x)).collect();
        Ok(HuImage::clamped(Image2D::new(h, w, v)?))
    }
}
