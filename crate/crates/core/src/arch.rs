//! Hierarchy descriptors and network planning.
//!
//! A hierarchy is the list of convolution counts between successive pooling
//! operations, written `[1,1,2,2]`. The admissibility check accepts exactly
//! the hierarchies whose shallow stages (indices ≤ k) each hold strictly
//! fewer convolutions than every deep stage, the structural condition behind
//! downsampling acceleration. The stage-scale calculator scores hierarchies
//! by convolution mass weighted with squared feature-map resolution, so the
//! accelerated candidates sort first.

use crate::error::{Error, Result};
use crate::nn::PoolSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Plain,
    Residual,
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockKind::Plain => write!(f, "plain"),
            BlockKind::Residual => write!(f, "residual"),
        }
    }
}

/// Stage descriptor: convolutions per pooling stage plus widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchySpec {
    /// Convolutions per stage, the bracketed hierarchy notation.
    pub stage_convs: Vec<usize>,
    /// Output channels per stage.
    pub stage_channels: Vec<usize>,
    pub block_kind: BlockKind,
    /// Stage index separating shallow from deep stages (1-based count of
    /// shallow stages).
    pub shallow_depth: usize,
    pub input_resolution: usize,
    pub pool_stride: usize,
}

impl HierarchySpec {
    pub fn new(
        stage_convs: Vec<usize>,
        stage_channels: Vec<usize>,
        block_kind: BlockKind,
        input_resolution: usize,
    ) -> Result<Self> {
        let k = default_shallow_depth(stage_convs.len());
        Self::with_shallow_depth(stage_convs, stage_channels, block_kind, input_resolution, k)
    }

    pub fn with_shallow_depth(
        stage_convs: Vec<usize>,
        stage_channels: Vec<usize>,
        block_kind: BlockKind,
        input_resolution: usize,
        shallow_depth: usize,
    ) -> Result<Self> {
        let spec = HierarchySpec {
            stage_convs,
            stage_channels,
            block_kind,
            shallow_depth,
            input_resolution,
            pool_stride: 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.stage_convs.len();
        if m < 2 {
            return Err(Error::Hierarchy(format!("need at least 2 stages, got {m}")));
        }
        if self.stage_channels.len() != m {
            return Err(Error::Hierarchy(format!(
                "{} channel widths for {m} stages",
                self.stage_channels.len()
            )));
        }
        if self.stage_convs.iter().any(|&d| d == 0) || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Hierarchy("stage entries must be positive".into()));
        }
        if self.shallow_depth == 0 || self.shallow_depth >= m {
            return Err(Error::Hierarchy(format!(
                "shallow depth k={} must satisfy 1 <= k < m={m}",
                self.shallow_depth
            )));
        }
        if self.pool_stride < 1 {
            return Err(Error::Hierarchy("pool stride must be >= 1".into()));
        }
        // Stages 2..m each enter after one stride-s reduction, so the input
        // must survive m-1 of them.
        let needed = self.pool_stride.pow(m as u32 - 1);
        if self.input_resolution < needed {
            return Err(Error::Hierarchy(format!(
                "input resolution {} underflows: {m} stages at stride {} need >= {needed}",
                self.input_resolution, self.pool_stride
            )));
        }
        Ok(())
    }

    /// Number of stages m.
    pub fn num_stages(&self) -> usize {
        self.stage_convs.len()
    }

    /// Total convolutions n = Σ d_i.
    pub fn total_convs(&self) -> usize {
        self.stage_convs.iter().sum()
    }

    /// The bracketed table notation, e.g. `[1,1,2,2]`.
    pub fn hierarchy_string(&self) -> String {
        render_hierarchy(&self.stage_convs)
    }
}

/// Default shallow/deep split at half the stage count.
pub fn default_shallow_depth(m: usize) -> usize {
    (m / 2).max(1)
}

/// Parse the table notation `[1,1,2,2]` into stage conv counts.
pub fn parse_hierarchy(text: &str) -> Result<Vec<usize>> {
    let t = text.trim();
    let inner = t
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::Hierarchy(format!("expected [a,b,...], got {text:?}")))?;
    let mut out = Vec::new();
    for part in inner.split(',') {
        let d: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Hierarchy(format!("bad stage count {part:?} in {text:?}")))?;
        if d == 0 {
            return Err(Error::Hierarchy(format!("zero stage count in {text:?}")));
        }
        out.push(d);
    }
    if out.is_empty() {
        return Err(Error::Hierarchy(format!("empty hierarchy {text:?}")));
    }
    Ok(out)
}

/// Render stage conv counts in the table notation.
pub fn render_hierarchy(stage_convs: &[usize]) -> String {
    let parts: Vec<String> = stage_convs.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

/// Downsampling-acceleration admissibility: every shallow stage must hold
/// strictly fewer convolutions than every deep stage, and the shallow split
/// may cover at most half the stages.
pub fn check_acceleration(spec: &HierarchySpec) -> bool {
    let m = spec.num_stages();
    let k = spec.shallow_depth;
    if 2 * k > m {
        return false;
    }
    let shallow_max = spec.stage_convs[..k].iter().max().copied().unwrap_or(0);
    let deep_min = spec.stage_convs[k..].iter().min().copied().unwrap_or(0);
    shallow_max < deep_min
}

/// Feature-map resolution entering each stage: element i is
/// `input_resolution / pool_stride^(i-1)` (integer division).
pub fn stage_scales(spec: &HierarchySpec) -> Vec<usize> {
    let mut scales = Vec::with_capacity(spec.num_stages());
    let mut r = spec.input_resolution;
    for _ in 0..spec.num_stages() {
        scales.push(r);
        r /= spec.pool_stride;
    }
    scales
}

/// Convolution mass weighted by squared stage resolution:
/// `Σ d_i · scale_i²`. Smaller means downsampling happens earlier.
pub fn conv_mass_score(spec: &HierarchySpec) -> u64 {
    stage_scales(spec)
        .iter()
        .zip(&spec.stage_convs)
        .map(|(&s, &d)| d as u64 * (s * s) as u64)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierarchyConstraint {
    Any,
    Accelerated,
}

/// All compositions of `total_convs` into `stages` positive parts, filtered
/// by the admissibility check when requested, sorted ascending by
/// conv-mass score (ties broken lexicographically for determinism).
pub fn enumerate_hierarchies(
    total_convs: usize,
    stages: usize,
    constraint: HierarchyConstraint,
    template: &HierarchySpec,
) -> Result<Vec<Vec<usize>>> {
    if stages == 0 || total_convs < stages {
        return Err(Error::Hierarchy(format!(
            "cannot split {total_convs} convolutions into {stages} positive stages"
        )));
    }
    let mut out = Vec::new();
    let mut cur = vec![0usize; stages];
    compositions(total_convs, stages, 0, &mut cur, &mut out);
    let mut scored: Vec<(u64, Vec<usize>)> = out
        .into_iter()
        .filter_map(|d| {
            let mut spec = template.clone();
            spec.stage_convs = d.clone();
            if spec.stage_channels.len() != stages {
                spec.stage_channels = vec![template.stage_channels[0]; stages];
            }
            if spec.shallow_depth >= stages {
                spec.shallow_depth = default_shallow_depth(stages);
            }
            if constraint == HierarchyConstraint::Accelerated && !check_acceleration(&spec) {
                return None;
            }
            Some((conv_mass_score(&spec), d))
        })
        .collect();
    scored.sort();
    Ok(scored.into_iter().map(|(_, d)| d).collect())
}

fn compositions(rem: usize, stages: usize, idx: usize, cur: &mut [usize], out: &mut Vec<Vec<usize>>) {
    if idx == stages - 1 {
        cur[idx] = rem;
        out.push(cur.to_vec());
        return;
    }
    let max = rem - (stages - idx - 1);
    for d in 1..=max {
        cur[idx] = d;
        compositions(rem - d, stages, idx + 1, cur, out);
    }
}

/// One trainable unit of the base network: a plain conv or a residual pair,
/// plus where pooling happens and whether a local classifier attaches.
#[derive(Debug, Clone)]
pub struct UnitPlan {
    pub stage: usize,
    /// Kernel-3 convolutions inside the unit (1 for plain, 2 for a pair).
    pub convs: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Resolution of the unit's input feature map.
    pub in_resolution: usize,
    /// Stride of the unit's first convolution (2 on residual stage entry).
    pub stride: usize,
    /// Identity shortcut around the unit (residual pairs only).
    pub shortcut: bool,
    /// 1×1 projection on the shortcut (channel or stride change).
    pub projection: bool,
    /// Stage-closing pool after this unit (plain networks).
    pub pool_after: Option<PoolSpec>,
}

impl UnitPlan {
    pub fn out_resolution(&self) -> usize {
        let r = self.in_resolution.div_ceil(self.stride);
        match self.pool_after {
            Some(p) => (r - p.window) / p.stride + 1,
            None => r,
        }
    }
}

/// A fully resolved network: ordered units, each with a local classifier
/// slot; the last unit's classifier is the network head (global average
/// pooling plus a linear layer).
#[derive(Debug, Clone)]
pub struct NetworkPlan {
    pub spec: HierarchySpec,
    pub units: Vec<UnitPlan>,
    pub num_classes: usize,
    /// Aux branches pool to this spatial target before their classifier.
    pub aux_pool_target: usize,
    pub final_resolution: usize,
}

impl NetworkPlan {
    /// Number of local classifiers: one aux branch per unit except the
    /// last, whose classifier is the output head.
    pub fn classifier_count(&self) -> usize {
        self.units.len()
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Stage-closing pool count (the head's global pooling not included).
    pub fn pool_count(&self) -> usize {
        match self.spec.block_kind {
            BlockKind::Plain => self.units.iter().filter(|u| u.pool_after.is_some()).count(),
            BlockKind::Residual => self.units.iter().filter(|u| u.stride > 1).count() + 1,
        }
    }
}

/// Expand a hierarchy spec into an ordered unit list.
///
/// Plain networks close every stage with a stride-2 max pool (window
/// clamped at tiny resolutions); residual networks downsample through the
/// stride-2 first conv of each later stage. Both feed a global-average
/// head after the last stage.
pub fn build_network(spec: &HierarchySpec, num_classes: usize) -> Result<NetworkPlan> {
    spec.validate()?;
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    let m = spec.num_stages();
    let mut units = Vec::new();
    let mut channels = 3usize;
    let mut resolution = spec.input_resolution;
    for stage in 0..m {
        let d = spec.stage_convs[stage];
        let out_c = spec.stage_channels[stage];
        match spec.block_kind {
            BlockKind::Plain => {
                for u in 0..d {
                    let last_in_stage = u + 1 == d;
                    let pool_after = last_in_stage.then(|| {
                        let window = spec.pool_stride.min(resolution);
                        PoolSpec::max(window, window)
                    });
                    let unit = UnitPlan {
                        stage,
                        convs: 1,
                        in_channels: channels,
                        out_channels: out_c,
                        in_resolution: resolution,
                        stride: 1,
                        shortcut: false,
                        projection: false,
                        pool_after,
                    };
                    resolution = unit.out_resolution();
                    channels = out_c;
                    units.push(unit);
                }
            }
            BlockKind::Residual => {
                let pairs = d / 2;
                let singles = d % 2;
                let mut first = true;
                for _ in 0..pairs {
                    let stride = if first && stage > 0 { spec.pool_stride } else { 1 };
                    let projection = stride > 1 || channels != out_c;
                    let unit = UnitPlan {
                        stage,
                        convs: 2,
                        in_channels: channels,
                        out_channels: out_c,
                        in_resolution: resolution,
                        stride,
                        shortcut: true,
                        projection,
                        pool_after: None,
                    };
                    resolution = unit.out_resolution();
                    channels = out_c;
                    units.push(unit);
                    first = false;
                }
                for _ in 0..singles {
                    let stride = if first && stage > 0 { spec.pool_stride } else { 1 };
                    let unit = UnitPlan {
                        stage,
                        convs: 1,
                        in_channels: channels,
                        out_channels: out_c,
                        in_resolution: resolution,
                        stride,
                        shortcut: false,
                        projection: false,
                        pool_after: None,
                    };
                    resolution = unit.out_resolution();
                    channels = out_c;
                    units.push(unit);
                    first = false;
                }
            }
        }
    }
    Ok(NetworkPlan {
        spec: spec.clone(),
        units,
        num_classes,
        aux_pool_target: 4,
        final_resolution: resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: Vec<usize>, kind: BlockKind, res: usize) -> HierarchySpec {
        let ch: Vec<usize> = (0..d.len()).map(|i| 8 << i.min(3)).collect();
        HierarchySpec::new(d, ch, kind, res).unwrap()
    }

    fn spec_k(d: Vec<usize>, k: usize) -> HierarchySpec {
        let ch: Vec<usize> = (0..d.len()).map(|i| 8 << i.min(3)).collect();
        HierarchySpec::with_shallow_depth(d, ch, BlockKind::Residual, 32, k).unwrap()
    }

    #[test]
    fn parse_render_round_trip() {
        for s in ["[1,1,2,2]", "[2,2,2,2]", "[1,2,8,5]", "[5,5,7,7,7]"] {
            assert_eq!(render_hierarchy(&parse_hierarchy(s).unwrap()), s);
        }
        assert!(parse_hierarchy("1,1,2,2").is_err());
        assert!(parse_hierarchy("[1,0,2]").is_err());
        assert!(parse_hierarchy("[]").is_err());
    }

    #[test]
    fn acceleration_table_rows() {
        assert!(check_acceleration(&spec_k(vec![1, 1, 2, 2], 2)));
        assert!(!check_acceleration(&spec_k(vec![2, 2, 1, 1], 2)));
        assert!(check_acceleration(&spec_k(vec![1, 2, 8, 5], 2)));
        assert!(!check_acceleration(&spec_k(vec![3, 4, 6, 3], 2)));
        assert!(!check_acceleration(&spec_k(vec![2, 3, 6, 3], 2))); // 3 ≮ 3
        assert!(check_acceleration(&spec_k(vec![1, 2, 6, 3], 2)));
    }

    #[test]
    fn acceleration_needs_shallow_half() {
        // k may cover at most half the stages.
        assert!(!check_acceleration(&spec_k(vec![1, 1, 1, 9], 3)));
    }

    #[test]
    fn acceleration_invariant_under_deep_growth() {
        let base = spec_k(vec![1, 1, 2, 2], 2);
        assert!(check_acceleration(&base));
        for deep_stage in 2..4 {
            for extra in 1..4 {
                let mut d = base.stage_convs.clone();
                d[deep_stage] += extra;
                assert!(check_acceleration(&spec_k(d, 2)));
            }
        }
    }

    #[test]
    fn stage_scales_repeated_halving() {
        let s = spec(vec![1, 1, 1, 1], BlockKind::Plain, 32);
        assert_eq!(stage_scales(&s), vec![32, 16, 8, 4]);
    }

    #[test]
    fn conv_mass_prefers_accelerated() {
        let a = spec_k(vec![1, 1, 2, 2], 2);
        let b = spec_k(vec![2, 2, 1, 1], 2);
        assert_eq!(conv_mass_score(&a), 1440);
        assert_eq!(conv_mass_score(&b), 2640);
        assert!(conv_mass_score(&a) < conv_mass_score(&b));
    }

    #[test]
    fn enumerate_counts_and_filter() {
        let template = spec_k(vec![1, 1, 1, 1], 2);
        let all = enumerate_hierarchies(4, 4, HierarchyConstraint::Any, &template).unwrap();
        assert_eq!(all, vec![vec![1, 1, 1, 1]]);
        let all8 = enumerate_hierarchies(8, 4, HierarchyConstraint::Any, &template).unwrap();
        assert_eq!(all8.len(), 35); // C(7,3)
        let acc = enumerate_hierarchies(6, 4, HierarchyConstraint::Accelerated, &template).unwrap();
        assert!(acc.contains(&vec![1, 1, 2, 2]));
        assert!(enumerate_hierarchies(3, 4, HierarchyConstraint::Any, &template).is_err());
    }

    #[test]
    fn build_plain_unit_and_pool_counts() {
        let s = HierarchySpec::new(
            vec![1, 1, 1, 1],
            vec![64, 128, 256, 512],
            BlockKind::Plain,
            32,
        )
        .unwrap();
        let plan = build_network(&s, 10).unwrap();
        assert_eq!(plan.num_units(), 4);
        assert_eq!(plan.pool_count(), 4);
        assert_eq!(plan.classifier_count(), 4);
    }

    #[test]
    fn build_residual_resnet18_pattern() {
        let s = spec(vec![2, 2, 2, 2], BlockKind::Residual, 32);
        let plan = build_network(&s, 10).unwrap();
        assert_eq!(plan.num_units(), 4);
        assert!(plan.units.iter().all(|u| u.shortcut && u.convs == 2));
        assert_eq!(
            plan.units.iter().map(|u| u.stride).collect::<Vec<_>>(),
            vec![1, 2, 2, 2]
        );
        assert_eq!(plan.final_resolution, 4);
    }

    #[test]
    fn build_small_plain_resolutions() {
        let s = HierarchySpec::new(vec![1, 1], vec![4, 8], BlockKind::Plain, 8).unwrap();
        let plan = build_network(&s, 10).unwrap();
        assert_eq!(plan.units[0].in_resolution, 8);
        assert_eq!(plan.units[0].out_resolution(), 4);
        assert_eq!(plan.units[1].in_resolution, 4);
        assert_eq!(plan.units[1].out_resolution(), 2);
        assert_eq!(plan.final_resolution, 2);
    }

    #[test]
    fn build_rejects_resolution_underflow() {
        let bad = HierarchySpec::new(vec![1, 1, 1, 1], vec![4, 4, 4, 4], BlockKind::Plain, 4);
        assert!(bad.is_err());
    }

    #[test]
    fn build_rejects_bad_shallow_depth() {
        let bad = HierarchySpec::with_shallow_depth(
            vec![1, 1, 2, 2],
            vec![4, 4, 4, 4],
            BlockKind::Plain,
            32,
            4,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn odd_residual_stage_keeps_conv_count() {
        let s = spec(vec![3, 4, 6, 3], BlockKind::Residual, 32);
        let plan = build_network(&s, 10).unwrap();
        let convs: usize = plan.units.iter().map(|u| u.convs).sum();
        assert_eq!(convs, 16);
    }
}
