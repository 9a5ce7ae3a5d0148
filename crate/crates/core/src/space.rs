//! BSSC encodings and per-family constraint tables.
//!
//! A code is a fixed-length integer tuple. Dimension order follows the
//! published tuple order for each family:
//!
//! | family            | dims | order                              |
//! |-------------------|------|------------------------------------|
//! | ResNet basic      | 8    | C2..C5, L2..L5                     |
//! | ResNet bottleneck | 12   | C2..C5, L2..L5, B2..B5             |
//! | MobileNetV2       | 18   | C3..C8, L3..L8, T3..T8             |
//! | EfficientNet      | 18   | C3..C8, L3..L8, T3..T8             |
//!
//! Bottleneck widths are stored as the numerator `n` of `n/8 * C_i`, so every
//! dimension has a code-independent value grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ResNetBasic,
    ResNetBottleneck,
    MobileNetV2Style,
    EfficientNetStyle,
}

impl Family {
    /// Stage numbers covered by the code, in tuple order.
    pub fn coded_stages(self) -> std::ops::RangeInclusive<u32> {
        match self {
            Family::ResNetBasic | Family::ResNetBottleneck => 2..=5,
            Family::MobileNetV2Style | Family::EfficientNetStyle => 3..=8,
        }
    }

    pub fn dim_count(self) -> usize {
        match self {
            Family::ResNetBasic => 8,
            Family::ResNetBottleneck => 12,
            Family::MobileNetV2Style | Family::EfficientNetStyle => 18,
        }
    }

    fn roles(self) -> &'static [DimRole] {
        match self {
            Family::ResNetBasic => &[DimRole::Channels, DimRole::Blocks],
            Family::ResNetBottleneck => &[DimRole::Channels, DimRole::Blocks, DimRole::Bottleneck],
            Family::MobileNetV2Style | Family::EfficientNetStyle => {
                &[DimRole::Channels, DimRole::Blocks, DimRole::Expansion]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimRole {
    Channels,
    Blocks,
    /// Bottleneck width numerator over 8.
    Bottleneck,
    Expansion,
}

impl DimRole {
    fn symbol(self) -> char {
        match self {
            DimRole::Channels => 'C',
            DimRole::Blocks => 'L',
            DimRole::Bottleneck => 'B',
            DimRole::Expansion => 'T',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub role: DimRole,
    pub stage: u32,
    /// Legal values, strictly increasing and positive.
    pub values: Vec<u32>,
}

impl DimensionSpec {
    pub fn new(role: DimRole, stage: u32, values: Vec<u32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config(format!("{}{stage}: empty value set", role.symbol())));
        }
        if values[0] == 0 || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "{}{stage}: values must be positive and strictly increasing",
                role.symbol()
            )));
        }
        Ok(Self { role, stage, values })
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.role.symbol(), self.stage)
    }

    pub fn position(&self, value: u32) -> Option<usize> {
        self.values.binary_search(&value).ok()
    }
}

/// Network presets with a published reference code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[serde(rename = "resnet18")]
    ResNet18,
    #[serde(rename = "resnet50")]
    ResNet50,
    #[serde(rename = "mobilenetv2")]
    MobileNetV2,
    #[serde(rename = "efficientnet-b0")]
    EfficientNetB0,
    #[serde(rename = "efficientnet-b1")]
    EfficientNetB1,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::ResNet18, Preset::ResNet50, Preset::MobileNetV2, Preset::EfficientNetB0, Preset::EfficientNetB1];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ResNet18 => "resnet18",
            Preset::ResNet50 => "resnet50",
            Preset::MobileNetV2 => "mobilenetv2",
            Preset::EfficientNetB0 => "efficientnet-b0",
            Preset::EfficientNetB1 => "efficientnet-b1",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Preset::ResNet18 => Family::ResNetBasic,
            Preset::ResNet50 => Family::ResNetBottleneck,
            Preset::MobileNetV2 => Family::MobileNetV2Style,
            Preset::EfficientNetB0 | Preset::EfficientNetB1 => Family::EfficientNetStyle,
        }
    }

    pub fn input_resolution(self) -> u32 {
        match self {
            Preset::EfficientNetB1 => 240,
            _ => 224,
        }
    }

    pub fn space(self) -> SearchSpace {
        SearchSpace::preset(self.family()).with_resolution(self.input_resolution())
    }

    /// The hand-designed code of the reference network.
    pub fn original_code(self) -> Bssc {
        Bssc(match self {
            Preset::ResNet18 => vec![64, 128, 256, 512, 2, 2, 2, 2],
            Preset::ResNet50 => vec![256, 512, 1024, 2048, 3, 4, 6, 3, 2, 2, 2, 2],
            Preset::MobileNetV2 => vec![24, 32, 64, 96, 160, 320, 2, 3, 4, 3, 3, 1, 6, 6, 6, 6, 6, 6],
            Preset::EfficientNetB0 => vec![24, 40, 80, 112, 192, 320, 2, 2, 3, 3, 4, 1, 6, 6, 6, 6, 6, 6],
            Preset::EfficientNetB1 => vec![24, 40, 80, 112, 192, 320, 3, 3, 4, 4, 5, 2, 6, 6, 6, 6, 6, 6],
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown family {s:?}; expected one of resnet18, resnet50, mobilenetv2, efficientnet-b0, efficientnet-b1"
                ))
            })
    }
}

fn default_resolution() -> u32 {
    224
}

fn default_classes() -> u32 {
    1000
}

fn default_width_multiplier() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub family: Family,
    pub dims: Vec<DimensionSpec>,
    #[serde(default = "default_resolution")]
    pub input_resolution: u32,
    #[serde(default = "default_classes")]
    pub num_classes: u32,
    /// Width multiplier for the fixed stem and stage-2 layers of the MBConv
    /// families. Uniformly rescaled (compressed) networks shrink these too.
    #[serde(default = "default_width_multiplier")]
    pub fixed_width_multiplier: f64,
}

fn multiples(step: u32, min: u32, max: u32) -> Vec<u32> {
    (min..=max).step_by(step as usize).collect()
}

fn powers_of_two(min_exp: u32, max_exp: u32) -> Vec<u32> {
    (min_exp..=max_exp).map(|e| 1u32 << e).collect()
}

impl SearchSpace {
    /// Constraint table for one family.
    pub fn preset(family: Family) -> Self {
        let (channels, max_blocks, third): (Vec<Vec<u32>>, Vec<u32>, Vec<u32>) = match family {
            Family::ResNetBasic => (
                [(5, 8), (5, 10), (6, 11), (7, 11)].iter().map(|&(lo, hi)| powers_of_two(lo, hi)).collect(),
                vec![16; 4],
                vec![],
            ),
            Family::ResNetBottleneck => (
                [(64, 320), (128, 768), (256, 1536), (512, 3072)]
                    .iter()
                    .map(|&(step, hi)| multiples(step, step, hi))
                    .collect(),
                vec![11; 4],
                vec![1, 2, 3, 4],
            ),
            Family::MobileNetV2Style => (
                [(4, 12, 32), (8, 16, 64), (16, 32, 128), (24, 48, 192), (40, 80, 320), (80, 160, 640)]
                    .iter()
                    .map(|&(step, lo, hi)| multiples(step, lo, hi))
                    .collect(),
                vec![5, 6, 7, 6, 6, 4],
                vec![3, 6],
            ),
            Family::EfficientNetStyle => (
                [(4, 16, 32), (8, 24, 64), (16, 48, 160), (28, 56, 280), (48, 144, 480), (80, 160, 640)]
                    .iter()
                    .map(|&(step, lo, hi)| multiples(step, lo, hi))
                    .collect(),
                vec![6, 6, 7, 7, 8, 5],
                vec![3, 6],
            ),
        };

        let stages: Vec<u32> = family.coded_stages().collect();
        let mut dims = Vec::with_capacity(family.dim_count());
        for (&stage, values) in stages.iter().zip(channels) {
            dims.push(DimensionSpec { role: DimRole::Channels, stage, values });
        }
        for (&stage, &cap) in stages.iter().zip(&max_blocks) {
            dims.push(DimensionSpec { role: DimRole::Blocks, stage, values: (1..=cap).collect() });
        }
        if let Some(&role) = family.roles().get(2) {
            for &stage in &stages {
                dims.push(DimensionSpec { role, stage, values: third.clone() });
            }
        }
        debug_assert_eq!(dims.len(), family.dim_count());

        Self {
            family,
            dims,
            input_resolution: default_resolution(),
            num_classes: default_classes(),
            fixed_width_multiplier: default_width_multiplier(),
        }
    }

    pub fn with_resolution(mut self, pixels: u32) -> Self {
        self.input_resolution = pixels;
        self
    }

    pub fn with_fixed_width_multiplier(mut self, multiplier: f64) -> Self {
        self.fixed_width_multiplier = multiplier;
        self
    }

    /// Checks structural invariants after deserialization.
    pub fn check(&self) -> Result<()> {
        if self.dims.len() != self.family.dim_count() {
            return Err(Error::Config(format!(
                "{:?} needs {} dimensions, found {}",
                self.family,
                self.family.dim_count(),
                self.dims.len()
            )));
        }
        let stages: Vec<u32> = self.family.coded_stages().collect();
        let per_role = stages.len();
        for (i, d) in self.dims.iter().enumerate() {
            DimensionSpec::new(d.role, d.stage, d.values.clone())?;
            let role = self.family.roles()[i / per_role];
            let stage = stages[i % per_role];
            if d.role != role || d.stage != stage {
                return Err(Error::Config(format!(
                    "dimension {i} is {}, expected {}{stage}",
                    d.label(),
                    role.symbol()
                )));
            }
        }
        if self.input_resolution == 0 || self.num_classes == 0 {
            return Err(Error::Config("resolution and class count must be positive".into()));
        }
        if !(self.fixed_width_multiplier > 0.0 && self.fixed_width_multiplier.is_finite()) {
            return Err(Error::Config("fixed width multiplier must be positive".into()));
        }
        Ok(())
    }

    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    /// Number of coded stages (each stage contributes one value per role).
    pub fn stage_count(&self) -> usize {
        self.family.coded_stages().count()
    }

    pub fn validate(&self, code: &Bssc) -> std::result::Result<(), Vec<Violation>> {
        self.validate_values(&code.0)
    }

    pub fn validate_values(&self, values: &[u32]) -> std::result::Result<(), Vec<Violation>> {
        if values.len() != self.dims.len() {
            return Err(vec![Violation::Length { expected: self.dims.len(), found: values.len() }]);
        }
        let violations: Vec<Violation> = self
            .dims
            .iter()
            .zip(values)
            .enumerate()
            .filter(|(_, (d, v))| d.position(**v).is_none())
            .map(|(dim, (d, &value))| Violation::IllegalValue { dim, label: d.label(), value })
            .collect();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    pub fn max_code(&self) -> Bssc {
        Bssc(self.dims.iter().map(|d| *d.values.last().unwrap()).collect())
    }

    pub fn min_code(&self) -> Bssc {
        Bssc(self.dims.iter().map(|d| d.values[0]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Length { expected: usize, found: usize },
    IllegalValue { dim: usize, label: String, value: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Length { expected, found } => {
                write!(f, "expected {expected} values, found {found}")
            }
            Violation::IllegalValue { dim, label, value } => {
                write!(f, "dimension {dim} ({label}): illegal value {value}")
            }
        }
    }
}

/// A block stacking style code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bssc(pub Vec<u32>);

impl Bssc {
    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<u32>> for Bssc {
    fn from(v: Vec<u32>) -> Self {
        Bssc(v)
    }
}

impl fmt::Display for Bssc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for Bssc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('{').trim_end_matches('}');
        s.split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|e| Error::Config(format!("bad code element {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(Bssc)
    }
}

/// Per-dimension Z-score statistics over a candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant dimensions.
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl StandardizationStats {
    pub fn from_codes(codes: &[Bssc]) -> Self {
        let m = codes.first().map_or(0, Bssc::len);
        let n = codes.len() as f64;
        let mut mean = vec![0.0; m];
        for c in codes {
            for (acc, &v) in mean.iter_mut().zip(&c.0) {
                *acc += v as f64;
            }
        }
        mean.iter_mut().for_each(|x| *x /= n);

        let mut var = vec![0.0; m];
        for c in codes {
            for ((acc, &v), mu) in var.iter_mut().zip(&c.0).zip(&mean) {
                let d = v as f64 - mu;
                *acc += d * d;
            }
        }
        let mut constant = vec![false; m];
        let std = (0..m)
            .map(|i| {
                let first = codes[0].0[i];
                if codes.iter().all(|c| c.0[i] == first) {
                    constant[i] = true;
                    1.0
                } else {
                    (var[i] / n).sqrt()
                }
            })
            .collect();
        Self { mean, std, constant }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, code: &Bssc) -> Vec<f64> {
        code.0
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.constant[i] { 0.0 } else { (v as f64 - self.mean[i]) / self.std[i] })
            .collect()
    }

    /// Inverse of [`standardize`](Self::standardize); constant dimensions map
    /// back to their mean.
    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &x)| if self.constant[i] { self.mean[i] } else { x * self.std[i] + self.mean[i] })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet_basic_table() {
        let s = SearchSpace::preset(Family::ResNetBasic);
        assert_eq!(s.dims[0].values, vec![32, 64, 128, 256]);
        assert_eq!(s.dims[3].values, vec![128, 256, 512, 1024, 2048]);
        assert_eq!(s.dims[4].values, (1..=16).collect::<Vec<_>>());
        for d in s.dims.iter().filter(|d| d.role == DimRole::Channels) {
            assert!(d.values.iter().all(|v| v.is_power_of_two()));
        }
        assert_eq!(s.dims[1].label(), "C3");
        assert_eq!(s.dims[7].label(), "L5");
    }

    #[test]
    fn resnet_bottleneck_table() {
        let s = SearchSpace::preset(Family::ResNetBottleneck);
        assert_eq!(s.dims.len(), 12);
        assert_eq!(s.dims[0].values, vec![64, 128, 192, 256, 320]);
        assert_eq!(*s.dims[3].values.last().unwrap(), 3072);
        assert_eq!(s.dims[4].values, (1..=11).collect::<Vec<_>>());
        assert_eq!(s.dims[8].values, vec![1, 2, 3, 4]);
        assert_eq!(s.dims[11].label(), "B5");
    }

    #[test]
    fn mbconv_tables() {
        let s = SearchSpace::preset(Family::MobileNetV2Style);
        assert_eq!(s.dims[12].values, vec![3, 6]);
        assert_eq!(s.dims[12].label(), "T3");
        assert_eq!(s.dims[0].values, vec![12, 16, 20, 24, 28, 32]);
        assert_eq!(s.dims[5].values, vec![160, 240, 320, 400, 480, 560, 640]);
        let caps: Vec<u32> = s.dims[6..12].iter().map(|d| *d.values.last().unwrap()).collect();
        assert_eq!(caps, vec![5, 6, 7, 6, 6, 4]);

        let e = SearchSpace::preset(Family::EfficientNetStyle);
        assert_eq!(e.dims[3].values, vec![56, 84, 112, 140, 168, 196, 224, 252, 280]);
        let caps: Vec<u32> = e.dims[6..12].iter().map(|d| *d.values.last().unwrap()).collect();
        assert_eq!(caps, vec![6, 6, 7, 7, 8, 5]);
        assert!(e.check().is_ok());
    }

    #[test]
    fn validate_cases() {
        let s = Preset::ResNet18.space();
        assert!(s.validate(&Preset::ResNet18.original_code()).is_ok());

        let bad = Bssc(vec![64, 128, 256, 512, 2, 2, 2, 17]);
        let v = s.validate(&bad).unwrap_err();
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::IllegalValue { dim: 7, value: 17, .. }));

        let short = Bssc(vec![64, 128, 256, 512, 2, 2, 2]);
        assert_eq!(s.validate(&short).unwrap_err(), vec![Violation::Length { expected: 8, found: 7 }]);
    }

    #[test]
    fn published_codes_validate() {
        for p in Preset::ALL {
            assert!(p.space().validate(&p.original_code()).is_ok(), "{p}");
        }
        let s = Preset::ResNet50.space();
        for code in ["128,640,1024,3072,8,7,4,3,3,1,2,1", "128,256,768,2048,9,6,9,3,3,4,2,2"] {
            assert!(s.validate(&code.parse().unwrap()).is_ok(), "{code}");
        }
    }

    #[test]
    fn standardize_two_values() {
        let codes = vec![Bssc(vec![4, 7]), Bssc(vec![8, 7])];
        let st = StandardizationStats::from_codes(&codes);
        assert_eq!(st.mean, vec![6.0, 7.0]);
        assert_eq!(st.std[0], 2.0);
        assert!(st.constant[1]);
        assert_eq!(st.standardize(&codes[0]), vec![-1.0, 0.0]);
        assert_eq!(st.standardize(&codes[1]), vec![1.0, 0.0]);
        assert_eq!(st.standardize(&Bssc(vec![6, 7]))[0], 0.0);
    }

    #[test]
    fn code_text_round_trip() {
        let c: Bssc = "{32,32,128,1024,4,14,14,1}".parse().unwrap();
        assert_eq!(c.to_string(), "32,32,128,1024,4,14,14,1");
        assert!("1,x".parse::<Bssc>().is_err());
    }

    #[test]
    fn preset_space_serializes() {
        let s = Preset::MobileNetV2.space();
        let json = serde_json::to_string(&s).unwrap();
        let back: SearchSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn check_rejects_reordered_dims() {
        let mut s = SearchSpace::preset(Family::ResNetBasic);
        s.dims.swap(0, 4);
        assert!(s.check().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn standardize_round_trips(raw in proptest::collection::vec(proptest::collection::vec(1u32..500, 3), 2..30)) {
                let codes: Vec<Bssc> = raw.into_iter().map(Bssc).collect();
                let st = StandardizationStats::from_codes(&codes);
                for c in &codes {
                    let back = st.destandardize(&st.standardize(c));
                    for (i, (&v, b)) in c.0.iter().zip(&back).enumerate() {
                        if !st.constant[i] {
                            prop_assert_eq!(b.round() as u32, v);
                            prop_assert!((b - v as f64).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }
}
