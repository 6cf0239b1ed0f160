//! Local-global window-size stylization: region-matched attention
//! statistics on a b×b grid plus full attention statistics, summed.
//!
//! Token tensors are laid out `tokens × C`. A blocked tensor stacks regions
//! along a leading axis: `(b·b) × (region_h·region_w) × C`, regions and the
//! tokens inside each region both in row-major order.

mod forward;

use rand::Rng;
use spast_tensor::{BoundParams, ParamSet, Tensor};

use crate::error::{Result, SpastError};
use crate::feature_codec::FeatureMap;
use crate::init;

pub use forward::{gwssm_forward, lgwssm_forward, lwssm_forward, Branches};

/// Added to the variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Per-channel spatial mean and population std (with [`NORM_EPS`]) of a
/// `C×H×W` tensor, each shaped `C×1`.
pub fn channel_stats(x: &Tensor) -> (Tensor, Tensor) {
    let c = x.dim(0);
    let flat = x.reshape(&[c, x.numel() / c]);
    let mean = flat.mean_keepdim(1);
    let var = flat.sub(&mean).square().mean_keepdim(1);
    (mean, var.add_scalar(NORM_EPS).sqrt())
}

pub(crate) fn channel_norm_tensor(x: &Tensor) -> Tensor {
    let c = x.dim(0);
    let flat = x.reshape(&[c, x.numel() / c]);
    let (mean, std) = channel_stats(x);
    flat.sub(&mean).div(&std).reshape(x.shape())
}

/// Mean-variance normalisation of every channel over its spatial extent.
pub fn channel_norm(f: &FeatureMap) -> FeatureMap {
    FeatureMap::new(channel_norm_tensor(f.tensor()), f.level()).expect("shape preserved")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionGrid {
    pub b: usize,
    pub region_h: usize,
    pub region_w: usize,
}

impl RegionGrid {
    pub fn new(b: usize, height: usize, width: usize) -> Result<Self> {
        if b == 0 || height % b != 0 || width % b != 0 || height == 0 || width == 0 {
            return Err(SpastError::Divisibility { b, height, width });
        }
        Ok(RegionGrid {
            b,
            region_h: height / b,
            region_w: width / b,
        })
    }

    pub fn regions(&self) -> usize {
        self.b * self.b
    }

    pub fn tokens(&self) -> usize {
        self.region_h * self.region_w
    }

    pub fn height(&self) -> usize {
        self.b * self.region_h
    }

    pub fn width(&self) -> usize {
        self.b * self.region_w
    }
}

#[derive(Clone, Debug)]
pub struct BlockedTensor {
    data: Tensor,
    grid: RegionGrid,
}

impl BlockedTensor {
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn grid(&self) -> RegionGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.data.dim(2)
    }

    /// Tokens of region `n` as a `tokens × C` tensor.
    pub fn region(&self, n: usize) -> Tensor {
        let (t, c) = (self.data.dim(1), self.data.dim(2));
        self.data.narrow(0, n, 1).reshape(&[t, c])
    }
}

/// Pure layout change `C×H×W → (b·b)×(rh·rw)×C`.
pub fn to_blocks(x: &Tensor, grid: RegionGrid) -> Tensor {
    let c = x.dim(0);
    let RegionGrid { b, region_h, region_w } = grid;
    x.reshape(&[c, b, region_h, b, region_w])
        .permute(&[1, 3, 2, 4, 0])
        .reshape(&[b * b, region_h * region_w, c])
}

/// Inverse of [`to_blocks`].
pub fn from_blocks(x: &Tensor, grid: RegionGrid) -> Tensor {
    let c = x.dim(2);
    let RegionGrid { b, region_h, region_w } = grid;
    x.reshape(&[b, b, region_h, region_w, c])
        .permute(&[4, 0, 2, 1, 3])
        .reshape(&[c, b * region_h, b * region_w])
}

/// `C×H×W → (H·W)×C`.
pub fn to_tokens(x: &Tensor) -> Tensor {
    let c = x.dim(0);
    x.reshape(&[c, x.numel() / c]).transpose()
}

/// `(H·W)×C → C×H×W`.
pub fn from_tokens(x: &Tensor, height: usize, width: usize) -> Tensor {
    x.transpose().reshape(&[x.dim(1), height, width])
}

/// Learnable `1×1` convolution `C → C`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for i in 0..channels {
            w[i * channels + i] = 1.0;
        }
        Projection {
            weight: Tensor::from_vec(w, &[channels, channels, 1, 1]),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn zero(channels: usize) -> Self {
        Projection {
            weight: Tensor::zeros(&[channels, channels, 1, 1]),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, Some(&self.bias), 1)
    }
}

/// Projections of one stylization level: `f`, `g`, `h` on the global path,
/// `block` (shared by the blocked queries, keys and values) and `unblock`
/// on the local path.
#[derive(Clone, Debug)]
pub struct StylizationParams {
    pub f: Projection,
    pub g: Projection,
    pub h: Projection,
    pub block: Projection,
    pub unblock: Projection,
}

impl StylizationParams {
    pub const NAMES: [&'static str; 5] = ["f", "g", "h", "block", "unblock"];

    /// Adds `{prefix}.{f,g,h,block,unblock}.{weight,bias}` to `set`.
    pub fn init(set: &mut ParamSet, rng: &mut impl Rng, prefix: &str, channels: usize) {
        for name in ["f", "g"] {
            let std = 1.0 / (channels as f64).sqrt();
            let w = init::normal_vec(rng, channels * channels, std);
            set.insert(format!("{prefix}.{name}.weight"), spast_tensor::Param::new(&[channels, channels, 1, 1], w));
            set.insert(format!("{prefix}.{name}.bias"), spast_tensor::Param::new(&[channels], vec![0.0; channels]));
        }
        for name in ["h", "block", "unblock"] {
            init::near_identity(set, rng, &format!("{prefix}.{name}"), channels, 0.02);
        }
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> Self {
        let proj = |name: &str| Projection {
            weight: p.get(&format!("{prefix}.{name}.weight")).clone(),
            bias: p.get(&format!("{prefix}.{name}.bias")).clone(),
        };
        StylizationParams {
            f: proj("f"),
            g: proj("g"),
            h: proj("h"),
            block: proj("block"),
            unblock: proj("unblock"),
        }
    }

    pub fn identity(channels: usize) -> Self {
        StylizationParams {
            f: Projection::identity(channels),
            g: Projection::identity(channels),
            h: Projection::identity(channels),
            block: Projection::identity(channels),
            unblock: Projection::identity(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.f.weight.dim(0)
    }
}

/// Projects with the blocking projection (after channel normalisation when
/// `normalize`) and splits into regions.
pub fn block(f: &FeatureMap, params: &StylizationParams, b: usize, normalize: bool) -> Result<BlockedTensor> {
    let grid = RegionGrid::new(b, f.height(), f.width())?;
    check_channels(f.channels(), params)?;
    let x = if normalize {
        channel_norm_tensor(f.tensor())
    } else {
        f.tensor().clone()
    };
    Ok(BlockedTensor {
        data: to_blocks(&params.block.apply(&x), grid),
        grid,
    })
}

/// Restores the spatial layout, then applies the unblocking projection.
pub fn unblock(bt: &BlockedTensor, params: &StylizationParams, level: crate::feature_codec::Level) -> Result<FeatureMap> {
    check_channels(bt.channels(), params)?;
    FeatureMap::new(params.unblock.apply(&from_blocks(&bt.data, bt.grid)), level)
}

fn check_channels(c: usize, params: &StylizationParams) -> Result<()> {
    if c != params.channels() {
        return Err(SpastError::Shape(format!(
            "feature has {c} channels, projections expect {}",
            params.channels()
        )));
    }
    Ok(())
}

/// For each content region, the style region it is matched to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionIndexMap {
    idx: Vec<usize>,
}

impl RegionIndexMap {
    pub fn new(idx: Vec<usize>, style_regions: usize) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= style_regions) {
            return Err(SpastError::IndexOutOfRange {
                index: bad,
                len: style_regions,
            });
        }
        Ok(RegionIndexMap { idx })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }
}

/// Mean token of every region, `regions × C`, as plain values.
fn region_descriptors(bt: &BlockedTensor) -> Vec<Vec<f64>> {
    let (n, t, c) = (bt.data.dim(0), bt.data.dim(1), bt.data.dim(2));
    let d = bt.data.data();
    (0..n)
        .map(|r| {
            let mut acc = vec![0.0; c];
            for tok in 0..t {
                let row = &d[(r * t + tok) * c..(r * t + tok + 1) * c];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / t as f64).collect()
        })
        .collect()
}

/// Cosine similarity, zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Matches each content region to the style region whose mean token is
/// most cosine-similar; ties go to the lowest index. The result carries no
/// gradient.
pub fn region_match(qb: &BlockedTensor, kb: &BlockedTensor) -> Result<RegionIndexMap> {
    if qb.grid.b != kb.grid.b || qb.channels() != kb.channels() {
        return Err(SpastError::Shape(format!(
            "cannot match a b={} grid with {} channels against b={} with {}",
            qb.grid.b,
            qb.channels(),
            kb.grid.b,
            kb.channels()
        )));
    }
    let dq = region_descriptors(qb);
    let dk = region_descriptors(kb);
    let idx = dq
        .iter()
        .map(|q| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (m, k) in dk.iter().enumerate() {
                let s = cosine(q, k);
                if s > best_sim {
                    best = m;
                    best_sim = s;
                }
            }
            best
        })
        .collect();
    RegionIndexMap::new(idx, dk.len())
}

/// Gathers regions `idx[n]` of both `kb` and `vb` into slot `n`.
pub fn rearrange_regions(
    kb: &BlockedTensor,
    vb: &BlockedTensor,
    idx: &RegionIndexMap,
) -> Result<(BlockedTensor, BlockedTensor)> {
    let len = kb.data.dim(0).min(vb.data.dim(0));
    if let Some(&bad) = idx.idx.iter().find(|&&i| i >= len) {
        return Err(SpastError::IndexOutOfRange { index: bad, len });
    }
    let take = |bt: &BlockedTensor| BlockedTensor {
        data: bt.data.index_select(&idx.idx),
        grid: bt.grid,
    };
    Ok((take(kb), take(vb)))
}

/// Row-stochastic attention weights, optionally batched over a leading axis.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    scores: Tensor,
}

impl AttentionMap {
    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        let cols = *self.scores.shape().last().unwrap();
        self.scores
            .data()
            .chunks(cols)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `softmax(q · kᵀ)` over the key axis, unscaled.
pub fn region_attention(qn: &Tensor, kn: &Tensor) -> AttentionMap {
    AttentionMap {
        scores: qn.matmul_nt(kn).softmax(),
    }
}

/// Attention-weighted mean and standard deviation of the value tokens:
/// `M = A·V`, `S = sqrt(max(0, A·(V⊙V) − M⊙M))`.
pub fn attention_weighted_stats(v: &Tensor, a: &AttentionMap) -> (Tensor, Tensor) {
    let m = a.scores.matmul(v);
    let second = a.scores.matmul(&v.square());
    let s = second.sub(&m.square()).sqrt_clamped();
    (m, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_codec::Level;

    fn map(values: Vec<f64>, shape: &[usize]) -> FeatureMap {
        FeatureMap::new(Tensor::from_vec(values, shape), Level::Relu4_1).unwrap()
    }

    #[test]
    fn channel_norm_of_short_ramp() {
        let out = channel_norm(&map(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]));
        let std = (1.25f64 + NORM_EPS).sqrt();
        let expect = [-1.5 / std, -0.5 / std, 0.5 / std, 1.5 / std];
        for (a, b) in out.tensor().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.tensor().data()[3] - 1.3416).abs() < 1e-4);
    }

    #[test]
    fn channel_norm_of_constant_channel_is_zero() {
        let out = channel_norm(&map(vec![5.0; 4], &[1, 2, 2]));
        assert!(out.tensor().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_layout_of_ramp() {
        let f = map((0..16).map(f64::from).collect(), &[1, 4, 4]);
        let bt = block(&f, &StylizationParams::identity(1), 2, false).unwrap();
        assert_eq!(bt.data().shape(), &[4, 4, 1]);
        assert_eq!(bt.region(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(bt.region(3).to_vec(), vec![10.0, 11.0, 14.0, 15.0]);
        let one = block(&f, &StylizationParams::identity(1), 1, false).unwrap();
        assert_eq!(one.region(0).to_vec(), f.tensor().to_vec());
        let back = unblock(&bt, &StylizationParams::identity(1), Level::Relu4_1).unwrap();
        assert_eq!(back.tensor().to_vec(), f.tensor().to_vec());
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let f = map(vec![0.0; 12], &[1, 3, 4]);
        assert!(matches!(
            block(&f, &StylizationParams::identity(1), 2, true),
            Err(SpastError::Divisibility { b: 2, height: 3, width: 4 })
        ));
    }

    #[test]
    fn unblock_of_zeros_with_zero_bias_is_zero() {
        let grid = RegionGrid::new(2, 4, 4).unwrap();
        let bt = BlockedTensor {
            data: Tensor::zeros(&[4, 4, 3]),
            grid,
        };
        let mut p = StylizationParams::identity(3);
        p.unblock.weight = Tensor::from_vec((0..9).map(f64::from).collect(), &[3, 3, 1, 1]);
        let out = unblock(&bt, &p, Level::Relu4_1).unwrap();
        assert_eq!(out.tensor().shape(), &[3, 4, 4]);
        assert!(out.tensor().data().iter().all(|v| *v == 0.0));
    }

    fn blocked(rows: &[[f64; 2]]) -> BlockedTensor {
        let n = rows.len();
        BlockedTensor {
            data: Tensor::from_vec(rows.iter().flatten().copied().collect(), &[n, 1, 2]),
            grid: RegionGrid {
                b: (n as f64).sqrt() as usize,
                region_h: 1,
                region_w: 1,
            },
        }
    }

    #[test]
    fn region_match_swaps_orthogonal_pairs() {
        let q = blocked(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]]);
        let k = blocked(&[[0.0, 1.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]);
        assert_eq!(region_match(&q, &k).unwrap().as_slice(), &[1, 0, 3, 0]);
        let self_match = region_match(&q, &q).unwrap();
        assert_eq!(self_match.as_slice(), &[0, 1, 2, 3]);
    }

    #[test]
    fn rearrange_swaps_and_repeats() {
        let k = blocked(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        let v = blocked(&[[9.0, 9.5], [8.0, 8.5], [7.0, 7.5], [6.0, 6.5]]);
        let idx = RegionIndexMap::new(vec![1, 0, 0, 3], 4).unwrap();
        let (k2, v2) = rearrange_regions(&k, &v, &idx).unwrap();
        assert_eq!(k2.data().to_vec(), vec![3.0, 4.0, 1.0, 2.0, 1.0, 2.0, 7.0, 8.0]);
        assert_eq!(v2.data().to_vec(), vec![8.0, 8.5, 9.0, 9.5, 9.0, 9.5, 6.0, 6.5]);
        let ident = RegionIndexMap::new(vec![0, 1, 2, 3], 4).unwrap();
        let (k3, _) = rearrange_regions(&k, &v, &ident).unwrap();
        assert_eq!(k3.data().to_vec(), k.data().to_vec());
        assert!(matches!(
            RegionIndexMap::new(vec![0, 4], 4),
            Err(SpastError::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn attention_special_cases() {
        let one = region_attention(&Tensor::from_vec(vec![0.3, -2.0], &[1, 2]), &Tensor::from_vec(vec![1.0, 4.0], &[1, 2]));
        assert_eq!(one.scores().to_vec(), vec![1.0]);
        let uniform = region_attention(&Tensor::zeros(&[2, 3]), &Tensor::from_vec(vec![1.0; 12], &[4, 3]));
        assert!(uniform.scores().data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn stats_of_one_hot_and_uniform_attention() {
        let v = Tensor::from_vec(vec![1.0, 7.0, 3.0], &[3, 1]);
        let one_hot = AttentionMap {
            scores: Tensor::from_vec(vec![0.0, 1.0, 0.0], &[1, 3]),
        };
        let (m, s) = attention_weighted_stats(&v, &one_hot);
        assert_eq!(m.to_vec(), vec![7.0]);
        assert_eq!(s.to_vec(), vec![0.0]);
        let v2 = Tensor::from_vec(vec![1.0, 3.0], &[2, 1]);
        let uniform = AttentionMap {
            scores: Tensor::from_vec(vec![0.5, 0.5], &[1, 2]),
        };
        let (m, s) = attention_weighted_stats(&v2, &uniform);
        assert_eq!(m.to_vec(), vec![2.0]);
        assert!((s.item() - 1.0).abs() < 1e-15);
    }
}
