use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Ablation configuration of the network: which heads exist and which loss
/// terms drive them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// sCT + bone image + bone mask; body wMAE, Dice, bone MAE.
    #[serde(rename = "3tn")]
    ThreeTask,
    /// sCT + bone image; body wMAE, bone MAE.
    #[serde(rename = "2tn")]
    TwoTask,
    /// sCT only, trained with the body-weighted MAE.
    #[serde(rename = "1tn-fl")]
    OneTaskFocused,
    /// sCT only, trained with plain MAE over the whole image.
    #[serde(rename = "1tn-gl")]
    OneTaskGlobal,
}

impl Variant {
    /// Table order used by every report.
    pub const ALL: [Variant; 4] = [
        Variant::ThreeTask,
        Variant::TwoTask,
        Variant::OneTaskFocused,
        Variant::OneTaskGlobal,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::ThreeTask => "3tn",
            Variant::TwoTask => "2tn",
            Variant::OneTaskFocused => "1tn-fl",
            Variant::OneTaskGlobal => "1tn-gl",
        }
    }

    pub fn has_bone_head(self) -> bool {
        matches!(self, Variant::ThreeTask | Variant::TwoTask)
    }

    pub fn has_mask_head(self) -> bool {
        self == Variant::ThreeTask
    }

    pub fn head_count(self) -> usize {
        1 + self.has_bone_head() as usize + self.has_mask_head() as usize
    }

    pub fn default_weights(self) -> LossWeights {
        match self {
            Variant::ThreeTask => LossWeights::new(1.0, 1.5, 1.3),
            Variant::TwoTask => LossWeights::new(1.0, 0.0, 1.3),
            Variant::OneTaskFocused | Variant::OneTaskGlobal => LossWeights::new(1.0, 0.0, 0.0),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3tn" | "three-task" => Ok(Variant::ThreeTask),
            "2tn" | "two-task" => Ok(Variant::TwoTask),
            "1tn-fl" | "one-task-focused" => Ok(Variant::OneTaskFocused),
            "1tn-gl" | "one-task-global" => Ok(Variant::OneTaskGlobal),
            other => Err(Error::contract(format!("unknown variant `{other}`"))),
        }
    }
}

/// Resolves a variant name to the variant and its default task weights.
pub fn make_variant(kind: &str) -> Result<(Variant, LossWeights)> {
    let v: Variant = kind.parse()?;
    Ok((v, v.default_weights()))
}
