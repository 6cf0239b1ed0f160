use serde::{Deserialize, Serialize};
use spast_tensor::Tensor;

use super::{
    attention_weighted_stats, channel_norm_tensor, from_blocks, from_tokens, rearrange_regions, region_attention,
    region_match, to_blocks, to_tokens, BlockedTensor, RegionGrid, StylizationParams,
};
use crate::error::{Result, SpastError};
use crate::feature_codec::FeatureMap;

/// Which halves of the module are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub local: bool,
    pub global: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches {
            local: true,
            global: true,
        }
    }
}

fn check_pair(fc: &FeatureMap, fs: &FeatureMap, params: &StylizationParams) -> Result<()> {
    if fc.level() != fs.level() {
        return Err(SpastError::LevelMismatch(format!(
            "content is {} but style is {}",
            fc.level(),
            fs.level()
        )));
    }
    if fc.channels() != fs.channels() || fc.channels() != params.channels() {
        return Err(SpastError::Shape(format!(
            "channel counts differ: content {}, style {}, projections {}",
            fc.channels(),
            fs.channels(),
            params.channels()
        )));
    }
    Ok(())
}

/// Region-matched attention: each content region attends only to the style
/// region picked by [`region_match`]. The result is returned in the spatial
/// layout of `fc`, before the unblocking projection.
pub fn lwssm_forward(fc: &FeatureMap, fs: &FeatureMap, params: &StylizationParams, b: usize) -> Result<FeatureMap> {
    check_pair(fc, fs, params)?;
    let grid_c = RegionGrid::new(b, fc.height(), fc.width())?;
    let grid_s = RegionGrid::new(b, fs.height(), fs.width())?;
    let nc = channel_norm_tensor(fc.tensor());
    let ns = channel_norm_tensor(fs.tensor());
    let blocked = |x: &Tensor, grid| BlockedTensor {
        data: to_blocks(&params.block.apply(x), grid),
        grid,
    };
    let qb = blocked(&nc, grid_c);
    let kb = blocked(&ns, grid_s);
    let vb = blocked(fs.tensor(), grid_s);
    let idx = region_match(&qb, &kb)?;
    let (kb, vb) = rearrange_regions(&kb, &vb, &idx)?;
    let a = region_attention(qb.data(), kb.data());
    let (m, s) = attention_weighted_stats(vb.data(), &a);
    let out = s.mul(&to_blocks(&nc, grid_c)).add(&m);
    FeatureMap::new(from_blocks(&out, grid_c), fc.level())
}

/// Full attention over all style positions: `S·N(Fc) + M` with
/// `A = softmax(f(N(Fc)) · g(N(Fs))ᵀ)` and values `h(Fs)`.
pub fn gwssm_forward(fc: &FeatureMap, fs: &FeatureMap, params: &StylizationParams) -> Result<FeatureMap> {
    check_pair(fc, fs, params)?;
    let nc = channel_norm_tensor(fc.tensor());
    let ns = channel_norm_tensor(fs.tensor());
    let q = to_tokens(&params.f.apply(&nc));
    let k = to_tokens(&params.g.apply(&ns));
    let v = to_tokens(&params.h.apply(fs.tensor()));
    let a = region_attention(&q, &k);
    let (m, s) = attention_weighted_stats(&v, &a);
    let out = s.mul(&to_tokens(&nc)).add(&m);
    FeatureMap::new(from_tokens(&out, fc.height(), fc.width()), fc.level())
}

/// `unblock(local) + global`, either term dropped when its branch is off.
pub fn lgwssm_forward(
    fc: &FeatureMap,
    fs: &FeatureMap,
    params: &StylizationParams,
    b: usize,
    branches: Branches,
) -> Result<FeatureMap> {
    let local = if branches.local {
        Some(params.unblock.apply(lwssm_forward(fc, fs, params, b)?.tensor()))
    } else {
        None
    };
    let global = if branches.global {
        Some(gwssm_forward(fc, fs, params)?.into_tensor())
    } else {
        None
    };
    let out = match (local, global) {
        (Some(l), Some(g)) => l.add(&g),
        (Some(t), None) | (None, Some(t)) => t,
        (None, None) => return Err(SpastError::Config("both stylization branches are disabled".into())),
    };
    FeatureMap::new(out, fc.level())
}
