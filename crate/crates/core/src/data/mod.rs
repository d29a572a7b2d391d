//! Scan ingestion, geometry normalization, multi-scale patch sampling,
//! augmentation and synthetic case generation.

pub mod augment;
pub mod blur;
pub mod dataset;
pub mod geometry;
pub mod manifest;
pub mod resample;
pub mod sampling;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Side of the square base crop taken around the nipple.
pub const BASE_SIDE: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Laterality {
    Left,
    Right,
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::Left => "L",
            Laterality::Right => "R",
        })
    }
}

impl FromStr for Laterality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "left" | "LEFT" => Ok(Laterality::Left),
            "R" | "right" | "RIGHT" => Ok(Laterality::Right),
            _ => Err(Error::invalid(format!("unknown laterality {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Cc,
    Mlo,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Cc => "CC",
            View::Mlo => "MLO",
        })
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CC" | "cc" => Ok(View::Cc),
            "MLO" | "mlo" => Ok(View::Mlo),
            _ => Err(Error::invalid(format!("unknown view {s}"))),
        }
    }
}

/// Hand-drawn finding outline and its BI-RADS assessment.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub mask: Array2<bool>,
    pub grade: u8,
}

impl Annotation {
    /// Grades of 2 and above count as findings-positive.
    pub fn is_finding(&self) -> bool {
        self.grade >= 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub case_id: String,
    pub laterality: Laterality,
    pub view: View,
    pub pixels: Array2<u16>,
    pub annotation: Option<Annotation>,
}

impl Scan {
    pub fn new(
        case_id: impl Into<String>,
        laterality: Laterality,
        view: View,
        pixels: Array2<u16>,
        annotation: Option<Annotation>,
    ) -> Result<Self> {
        if let Some(a) = &annotation {
            if a.mask.dim() != pixels.dim() {
                return Err(Error::shape("scan mask", a.mask.shape(), pixels.shape()));
            }
            if a.grade > 5 {
                return Err(Error::invalid(format!("assessment grade {} outside 0..=5", a.grade)));
            }
        }
        Ok(Scan {
            case_id: case_id.into(),
            laterality,
            view,
            pixels,
            annotation,
        })
    }

    /// BI-RADS assessment; scans without an outline read as grade 1.
    pub fn grade(&self) -> u8 {
        self.annotation.as_ref().map_or(1, |a| a.grade)
    }

    /// Mask of a findings-positive annotation, if any.
    pub fn finding_mask(&self) -> Option<&Array2<bool>> {
        self.annotation.as_ref().filter(|a| a.is_finding()).map(|a| &a.mask)
    }

    pub fn unit_pixels(&self) -> Array2<f32> {
        self.pixels.mapv(|v| v as f32 / 65535.0)
    }

    /// Identifier unique per image: case, side and view.
    pub fn scan_id(&self) -> String {
        format!("{}_{}{}", self.case_id, self.laterality, self.view)
    }
}

/// Magnification relative to the base crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Magnification {
    Half,
    Third,
    Quarter,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::Half, Magnification::Third, Magnification::Quarter];

    /// `Third` is exactly 0.33, not 1/3.
    pub fn factor(self) -> f64 {
        match self {
            Magnification::Half => 0.5,
            Magnification::Third => 0.33,
            Magnification::Quarter => 0.25,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Magnification::Half => "0.5",
            Magnification::Third => "0.33",
            Magnification::Quarter => "0.25",
        }
    }

    /// Scaled length of a base-frame dimension.
    pub fn scaled(self, len: usize) -> usize {
        (len as f64 * self.factor()).round() as usize
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches('x') {
            "0.5" | "0.50" => Ok(Magnification::Half),
            "0.33" => Ok(Magnification::Third),
            "0.25" => Ok(Magnification::Quarter),
            other => Err(Error::invalid(format!("magnification must be one of 0.5, 0.33, 0.25; got {other}"))),
        }
    }
}

/// A base crop resampled to one magnification, as floats in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledScan {
    pub case_id: String,
    pub scale: Magnification,
    pub image: Array2<f32>,
    /// Any-coverage downsampled annotation mask.
    pub mask: Option<Array2<bool>>,
    pub grade: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative" | "0" => Ok(Label::Negative),
            "positive" | "1" => Ok(Label::Positive),
            _ => Err(Error::invalid(format!("unknown label {s}"))),
        }
    }
}

/// Square tissue tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Array2<f32>,
    pub label: Label,
    /// Top-left corner `(row, col)` in the base-crop frame.
    pub offset: (usize, usize),
    pub scale: Magnification,
    pub case_id: String,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }
}
