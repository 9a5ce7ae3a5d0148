//! Decoding a code into a concrete per-stage network plan.
//!
//! Fixed layout per family:
//!
//! * ResNet: 7x7/2 stem conv + 3x3/2 max-pool, stages 2..5 with first-block
//!   strides 1,2,2,2, global pool and a fully connected classifier. The basic
//!   family's stem width follows C2; the bottleneck family uses a 64-wide stem.
//! * MobileNetV2 / EfficientNet: 3x3/2 stem (32), fixed stage 2 (MBConv t=1,
//!   16 out), coded stages 3..8 with strides 2,2,2,1,2,1, a 1x1 head conv to
//!   1280 and a classifier. EfficientNet adds squeeze-excitation to every
//!   block and uses 5x5 depthwise kernels in stages 4, 6 and 7.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Bssc, Family, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
    MbConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: u32,
    pub stride: u32,
    pub out_channels: u32,
    /// 3x3 stride-2 max-pool after the stem conv.
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: u32,
    pub kind: BlockKind,
    pub repeats: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    /// Bottleneck width (bottleneck blocks only).
    pub bottleneck: Option<u32>,
    /// Expansion factor (MBConv only).
    pub expansion: Option<u32>,
    pub kernel: u32,
    pub stride: u32,
    pub se: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub conv_channels: Option<u32>,
    pub classifier_in: u32,
    pub classes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub family: Family,
    pub input_resolution: u32,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

const MBCONV_STRIDES: [u32; 6] = [2, 2, 2, 1, 2, 1];
const EFFICIENTNET_KERNELS: [u32; 6] = [3, 5, 3, 5, 5, 3];
const MBCONV_HEAD: u32 = 1280;

fn scaled(width: u32, multiplier: f64) -> u32 {
    ((width as f64 * multiplier).round() as u32).max(1)
}

pub(crate) fn stem_of(space: &SearchSpace, values: &[u32]) -> StemSpec {
    match space.family {
        Family::ResNetBasic => StemSpec { kernel: 7, stride: 2, out_channels: values[0], max_pool: true },
        Family::ResNetBottleneck => StemSpec { kernel: 7, stride: 2, out_channels: 64, max_pool: true },
        Family::MobileNetV2Style | Family::EfficientNetStyle => {
            StemSpec { kernel: 3, stride: 2, out_channels: scaled(32, space.fixed_width_multiplier), max_pool: false }
        }
    }
}

/// Calls `f` for every stage in order without allocating.
pub(crate) fn for_each_stage(space: &SearchSpace, values: &[u32], mut f: impl FnMut(StageSpec)) {
    let stem = stem_of(space, values);
    let n = space.stage_count();
    let first = *space.family.coded_stages().start();
    let mut cin = stem.out_channels;
    match space.family {
        Family::ResNetBasic | Family::ResNetBottleneck => {
            let bottleneck = space.family == Family::ResNetBottleneck;
            for s in 0..n {
                let cout = values[s];
                f(StageSpec {
                    stage: first + s as u32,
                    kind: if bottleneck { BlockKind::Bottleneck } else { BlockKind::Basic },
                    repeats: values[n + s],
                    in_channels: cin,
                    out_channels: cout,
                    bottleneck: bottleneck.then(|| values[2 * n + s] * cout / 8),
                    expansion: None,
                    kernel: 3,
                    stride: if s == 0 { 1 } else { 2 },
                    se: false,
                });
                cin = cout;
            }
        }
        Family::MobileNetV2Style | Family::EfficientNetStyle => {
            let se = space.family == Family::EfficientNetStyle;
            let fixed_out = scaled(16, space.fixed_width_multiplier);
            f(StageSpec {
                stage: 2,
                kind: BlockKind::MbConv,
                repeats: 1,
                in_channels: cin,
                out_channels: fixed_out,
                bottleneck: None,
                expansion: Some(1),
                kernel: 3,
                stride: 1,
                se,
            });
            cin = fixed_out;
            for s in 0..n {
                let cout = values[s];
                f(StageSpec {
                    stage: first + s as u32,
                    kind: BlockKind::MbConv,
                    repeats: values[n + s],
                    in_channels: cin,
                    out_channels: cout,
                    bottleneck: None,
                    expansion: Some(values[2 * n + s]),
                    kernel: if se { EFFICIENTNET_KERNELS[s] } else { 3 },
                    stride: MBCONV_STRIDES[s],
                    se,
                });
                cin = cout;
            }
        }
    }
}

pub(crate) fn head_of(space: &SearchSpace, values: &[u32]) -> HeadSpec {
    let last = values[space.stage_count() - 1];
    match space.family {
        Family::ResNetBasic | Family::ResNetBottleneck => {
            HeadSpec { conv_channels: None, classifier_in: last, classes: space.num_classes }
        }
        Family::MobileNetV2Style | Family::EfficientNetStyle => {
            HeadSpec { conv_channels: Some(MBCONV_HEAD), classifier_in: MBCONV_HEAD, classes: space.num_classes }
        }
    }
}

impl NetworkPlan {
    /// Validates `code` against `space` and decodes it.
    pub fn decode(code: &Bssc, space: &SearchSpace) -> Result<Self> {
        space.validate(code).map_err(Error::InvalidCode)?;
        Ok(Self::from_values(space, &code.0))
    }

    /// Decodes without checking grid membership. Only the code length must
    /// match; used for published codes that lie off a preset grid.
    pub fn from_values(space: &SearchSpace, values: &[u32]) -> Self {
        assert_eq!(values.len(), space.dim_count(), "code length mismatch");
        let mut stages = Vec::with_capacity(space.stage_count() + 1);
        for_each_stage(space, values, |s| stages.push(s));
        Self {
            family: space.family,
            input_resolution: space.input_resolution,
            stem: stem_of(space, values),
            stages,
            head: head_of(space, values),
        }
    }

    pub fn stage(&self, stage: u32) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Preset;

    #[test]
    fn mobilenetv2_original_stage4() {
        let p = Preset::MobileNetV2;
        let plan = NetworkPlan::decode(&p.original_code(), &p.space()).unwrap();
        let s4 = plan.stage(4).unwrap();
        assert_eq!(s4.kind, BlockKind::MbConv);
        assert_eq!((s4.repeats, s4.out_channels, s4.expansion), (3, 32, Some(6)));
        assert_eq!(plan.stage(2).unwrap().out_channels, 16);
        assert_eq!(plan.stem.out_channels, 32);
        assert_eq!(plan.head.conv_channels, Some(1280));
        let strides: Vec<u32> = plan.stages.iter().map(|s| s.stride).collect();
        assert_eq!(strides, vec![1, 2, 2, 2, 1, 2, 1]);
    }

    #[test]
    fn resnet18_original_stage5() {
        let p = Preset::ResNet18;
        let plan = NetworkPlan::decode(&p.original_code(), &p.space()).unwrap();
        let s5 = plan.stage(5).unwrap();
        assert_eq!((s5.kind, s5.repeats, s5.out_channels), (BlockKind::Basic, 2, 512));
        assert_eq!(plan.head.classifier_in, 512);
    }

    #[test]
    fn bottleneck_width_from_numerator() {
        let p = Preset::ResNet50;
        let code: Bssc = "128,256,768,2048,9,6,9,3,3,4,2,2".parse().unwrap();
        let plan = NetworkPlan::decode(&code, &p.space()).unwrap();
        assert_eq!(plan.stage(2).unwrap().bottleneck, Some(48));
        assert_eq!(plan.stage(3).unwrap().bottleneck, Some(128));
        assert_eq!(plan.stage(4).unwrap().bottleneck, Some(192));
        assert_eq!(plan.stem.out_channels, 64);
    }

    #[test]
    fn efficientnet_kernels_and_se() {
        let p = Preset::EfficientNetB0;
        let plan = NetworkPlan::decode(&p.original_code(), &p.space()).unwrap();
        let k: Vec<u32> = plan.stages.iter().map(|s| s.kernel).collect();
        assert_eq!(k, vec![3, 3, 5, 3, 5, 5, 3]);
        assert!(plan.stages.iter().all(|s| s.se));
    }

    #[test]
    fn decode_rejects_invalid() {
        let p = Preset::ResNet18;
        let bad = Bssc(vec![64, 128, 256, 512, 2, 2, 2, 17]);
        assert!(matches!(NetworkPlan::decode(&bad, &p.space()), Err(Error::InvalidCode(_))));
    }

    #[test]
    fn decode_is_deterministic() {
        let p = Preset::EfficientNetB1;
        let a = NetworkPlan::decode(&p.original_code(), &p.space()).unwrap();
        let b = NetworkPlan::decode(&p.original_code(), &p.space()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.input_resolution, 240);
    }
}
