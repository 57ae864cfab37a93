//! Failure taxonomy shared by every module: sample kinds, category slugs and
//! ground-truth labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Plan,
    Execution,
}

impl Kind {
    pub const ALL: [Kind; 2] = [Kind::Plan, Kind::Execution];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Plan => "plan",
            Kind::Execution => "execution",
        }
    }

    /// Category menu for this kind, `success` first.
    pub fn categories(self) -> &'static [Category] {
        match self {
            Kind::Plan => &PLAN_CATEGORIES,
            Kind::Execution => &EXEC_CATEGORIES,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Success,
    WrongObjectManipulated,
    WrongStateOrPlacement,
    WrongOrder,
    MissingSubtask,
    ContradictorySubtasks,
    NoGripperClose,
    ImpreciseGraspOrPush,
    NoProgress,
}

const PLAN_CATEGORIES: [Category; 6] = [
    Category::Success,
    Category::WrongObjectManipulated,
    Category::WrongStateOrPlacement,
    Category::WrongOrder,
    Category::MissingSubtask,
    Category::ContradictorySubtasks,
];

const EXEC_CATEGORIES: [Category; 6] = [
    Category::Success,
    Category::NoGripperClose,
    Category::WrongStateOrPlacement,
    Category::WrongObjectManipulated,
    Category::ImpreciseGraspOrPush,
    Category::NoProgress,
];

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Success,
        Category::WrongObjectManipulated,
        Category::WrongStateOrPlacement,
        Category::WrongOrder,
        Category::MissingSubtask,
        Category::ContradictorySubtasks,
        Category::NoGripperClose,
        Category::ImpreciseGraspOrPush,
        Category::NoProgress,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Category::Success => "success",
            Category::WrongObjectManipulated => "wrong_object_manipulated",
            Category::WrongStateOrPlacement => "wrong_state_or_placement",
            Category::WrongOrder => "wrong_order",
            Category::MissingSubtask => "missing_subtask",
            Category::ContradictorySubtasks => "contradictory_subtasks",
            Category::NoGripperClose => "no_gripper_close",
            Category::ImpreciseGraspOrPush => "imprecise_grasp_or_push",
            Category::NoProgress => "no_progress",
        }
    }

    /// Human-readable label used in tables and confusion-matrix headers.
    pub fn display_name(self) -> &'static str {
        match self {
            Category::Success => "Success",
            Category::WrongObjectManipulated => "Wrong object manipulated",
            Category::WrongStateOrPlacement => "Wrong object state or placement",
            Category::WrongOrder => "Wrong order",
            Category::MissingSubtask => "Missing subtask",
            Category::ContradictorySubtasks => "Contradictory subtasks",
            Category::NoGripperClose => "No gripper close",
            Category::ImpreciseGraspOrPush => "Imprecise grasping/pushing",
            Category::NoProgress => "No progress",
        }
    }

    pub fn is_valid_for(self, kind: Kind) -> bool {
        kind.categories().contains(&self)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.slug() == s)
            .ok_or_else(|| format!("unknown category slug {s:?}"))
    }
}

/// Ground-truth outcome of a sample: binary flag plus fine-grained category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLabel")]
pub struct FailureLabel {
    success: bool,
    category: Category,
}

#[derive(Deserialize)]
struct RawLabel {
    success: bool,
    category: Category,
}

impl TryFrom<RawLabel> for FailureLabel {
    type Error = String;

    fn try_from(raw: RawLabel) -> std::result::Result<Self, Self::Error> {
        if raw.success != (raw.category == Category::Success) {
            return Err(format!(
                "label success={} inconsistent with category {}",
                raw.success, raw.category
            ));
        }
        Ok(FailureLabel {
            success: raw.success,
            category: raw.category,
        })
    }
}

impl FailureLabel {
    pub const SUCCESS: FailureLabel = FailureLabel {
        success: true,
        category: Category::Success,
    };

    pub fn failure(category: Category) -> Result<Self> {
        if category == Category::Success {
            return Err(Error::Config("failure label cannot carry category success".into()));
        }
        Ok(FailureLabel {
            success: false,
            category,
        })
    }

    pub fn from_category(category: Category) -> Self {
        FailureLabel {
            success: category == Category::Success,
            category,
        }
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn category(&self) -> Category {
        self.category
    }
}
