//! Self-supervised mask generation.
//!
//! `N` learnable object queries act as clusters. Six decoder layers (two per
//! decoder scale, coarsest first) each
//!
//! 1. hard-assign every pixel to its most similar *active* query,
//! 2. update the queries as `MHSA(q) + A . F` (raw sums of assigned features),
//! 3. score pixels against the updated queries (pixel-to-cluster map),
//! 4. project every query to `K + 1` class logits (cluster-to-class map),
//! 5. multiply the two maps and softmax over classes to get a pseudo mask.
//!
//! From the second layer on, a query stays active only if the pixels it
//! claims overlap one class region of the previous layer's pseudo mask by
//! more than `tau`, where `tau` follows [`tau_schedule`] over epochs.

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::numerics::graph::matmul_raw;
use crate::numerics::{argmax, resize, Graph, Interpolation, Mhsa, Mlp, ParamId, ParamStore, Tensor, Var};

/// Similarity used for the pixel-to-cluster map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    /// `f . q / sqrt(d_q)`.
    #[default]
    ScaledDot,
    Cosine,
}

/// How the overlap threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum FilterMode {
    /// `tau` follows [`tau_schedule`].
    #[default]
    Schedule,
    /// Constant `tau`.
    Fixed(f64),
    /// Every cluster is active at every layer.
    Off,
}

impl FilterMode {
    pub fn tau(&self, epoch: usize) -> Option<f64> {
        match *self {
            FilterMode::Schedule => Some(tau_schedule(epoch)),
            FilterMode::Fixed(t) => Some(t),
            FilterMode::Off => None,
        }
    }
}

/// `min(epoch / 50, 1) * 0.4 + 0.1`.
pub fn tau_schedule(epoch: usize) -> f64 {
    (epoch as f64 / 50.0).min(1.0) * 0.4 + 0.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmgConfig {
    /// Number of object queries `N`; must exceed `num_classes`.
    pub num_queries: usize,
    /// Foreground classes `K`.
    pub num_classes: usize,
    pub d_q: usize,
    pub heads: usize,
    /// Decoder strides, coarsest first. Six layers are spread evenly.
    pub scales: Vec<usize>,
    pub num_layers: usize,
    pub similarity: Similarity,
    pub filter: FilterMode,
    /// Restrict the overlap maximum to foreground classes.
    pub foreground_only_overlap: bool,
    pub mask_resize: Interpolation,
}

impl SmgConfig {
    pub fn new(num_classes: usize, d_q: usize, scales: Vec<usize>) -> Self {
        SmgConfig {
            num_queries: 32,
            num_classes,
            d_q,
            heads: 4,
            scales,
            num_layers: 6,
            similarity: Similarity::ScaledDot,
            filter: FilterMode::Schedule,
            foreground_only_overlap: false,
            mask_resize: Interpolation::Trilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries <= self.num_classes {
            return Err(Error::Config(format!(
                "query count {} must exceed the class count {}",
                self.num_queries, self.num_classes
            )));
        }
        if self.scales.is_empty() || !self.num_layers.is_multiple_of(self.scales.len()) {
            return Err(Error::Config(format!(
                "{} decoder layers cannot be spread evenly over scales {:?}",
                self.num_layers, self.scales
            )));
        }
        if let FilterMode::Fixed(t) = self.filter {
            check_tau(t)?;
        }
        Ok(())
    }

    /// Stride used by each decoder layer, e.g. `[32, 32, 16, 16, 8, 8]`.
    pub fn layer_strides(&self) -> Vec<usize> {
        let per = self.num_layers / self.scales.len();
        self.scales.iter().flat_map(|&s| std::iter::repeat_n(s, per)).collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("overlap threshold {tau} outside [0, 1]")));
    }
    Ok(())
}

/// Queries after a decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct QueryState {
    pub q: Var,
    /// Number of decoder layers applied (0 = initial queries).
    pub layer_index: usize,
}

/// Hard pixel-to-cluster assignment of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Winning cluster per pixel.
    pub cluster_of_pixel: Vec<usize>,
    pub active: Vec<bool>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    /// One-hot `[N, P]` matrix (rows are clusters).
    pub fn one_hot(&self) -> Tensor {
        let p = self.cluster_of_pixel.len();
        let mut t = Tensor::zeros([self.num_clusters, p]);
        for (px, &n) in self.cluster_of_pixel.iter().enumerate() {
            t.data_mut()[n * p + px] = 1.0;
        }
        t
    }
}

/// Outputs of one decoder layer.
#[derive(Debug, Clone)]
pub struct MaskLayer {
    pub stride: usize,
    pub extents: [usize; 3],
    /// Pixel-to-cluster scores, `[P, N]`.
    pub m_pc: Var,
    /// Cluster-to-class logits, `[N, K + 1]`.
    pub m_cc: Var,
    /// Class-normalised pseudo mask, `[P, K + 1]`.
    pub m: Var,
    pub assignment: ClusterAssignment,
    pub tau: Option<f64>,
}

impl MaskLayer {
    /// Pseudo mask as a channels-last volume `[x, y, z, K + 1]`.
    pub fn mask_volume(&self, g: &Graph) -> Tensor {
        let k1 = g.shape(self.m)[1];
        let [x, y, z] = self.extents;
        g.value(self.m).reshape([x, y, z, k1]).expect("mask extents")
    }
}

/// Per-layer pseudo masks, in decoder order.
#[derive(Debug, Clone, Default)]
pub struct PseudoMaskStack {
    pub layers: Vec<MaskLayer>,
}

impl PseudoMaskStack {
    pub fn last(&self) -> Option<&MaskLayer> {
        self.layers.last()
    }
}

// ---- single operations -------------------------------------------------------

/// Pixel-to-cluster score map `[P, N]`.
pub fn pixel_to_cluster(g: &mut Graph, f_d: Var, q: Var, sim: Similarity) -> Result<Var> {
    let (fs, qs) = (g.shape(f_d).to_vec(), g.shape(q).to_vec());
    if fs.len() != 2 || qs.len() != 2 || fs[1] != qs[1] {
        return Err(Error::dim("pixel_to_cluster", &fs, &qs));
    }
    match sim {
        Similarity::ScaledDot => {
            let qt = g.transpose(q)?;
            let s = g.matmul(f_d, qt)?;
            Ok(g.scale(s, 1.0 / (fs[1] as f64).sqrt()))
        }
        Similarity::Cosine => {
            let fn_ = g.normalize_rows(f_d)?;
            let qn = g.normalize_rows(q)?;
            let qt = g.transpose(qn)?;
            g.matmul(fn_, qt)
        }
    }
}

/// Cluster-to-class logits `[N, K + 1]`.
pub fn cluster_to_class(g: &mut Graph, head: &Mlp, q: Var) -> Result<Var> {
    head.forward(g, q)
}

/// `softmax_rows(m_pc . m_cc)`, shape `[P, K + 1]`.
pub fn aggregate_masks(g: &mut Graph, m_pc: Var, m_cc: Var) -> Result<Var> {
    let m = g.matmul(m_pc, m_cc)?;
    g.softmax(m, 1)
}

/// Assigns each row (pixel) of `scores` `[P, N]` to its highest-scoring active
/// cluster, ties to the lowest index.
pub fn hard_assignment(scores: &Tensor, active: &[bool]) -> Result<ClusterAssignment> {
    let (p, n) = scores.rows_cols();
    if active.len() != n {
        return Err(Error::dim("hard_assignment", &[p, n], &[active.len()]));
    }
    if !active.iter().any(|&a| a) {
        return Err(Error::Schedule("every cluster is inactive".into()));
    }
    let cluster_of_pixel = (0..p)
        .map(|r| {
            let row = scores.row(r);
            let mut best: Option<usize> = None;
            for (i, &v) in row.iter().enumerate() {
                if active[i] && best.is_none_or(|b| v > row[b]) {
                    best = Some(i);
                }
            }
            best.expect("at least one active cluster")
        })
        .collect();
    Ok(ClusterAssignment {
        cluster_of_pixel,
        active: active.to_vec(),
        num_clusters: n,
    })
}

/// `MHSA(q_prev) + A . f_d`, with `A` the hard assignment of pixels to active
/// clusters under `q_prev . f_d^T`. `A` is a constant on the tape.
pub fn update_queries(
    g: &mut Graph,
    attn: &Mhsa,
    q_prev: Var,
    f_d: Var,
    active: &[bool],
) -> Result<(Var, ClusterAssignment)> {
    let (qs, fs) = (g.shape(q_prev).to_vec(), g.shape(f_d).to_vec());
    if qs.len() != 2 || fs.len() != 2 || qs[1] != fs[1] {
        return Err(Error::dim("update_queries", &qs, &fs));
    }
    let scores = raw_scores(g.value(f_d), g.value(q_prev));
    let assignment = hard_assignment(&scores, active)?;
    let a = g.constant(assignment.one_hot());
    let pooled = g.matmul(a, f_d)?;
    let mixed = attn.forward(g, q_prev)?;
    Ok((g.add(mixed, pooled)?, assignment))
}

/// `f . q^T` on plain values, `[P, N]`.
fn raw_scores(f: &Tensor, q: &Tensor) -> Tensor {
    let (p, d) = f.rows_cols();
    let (n, _) = q.rows_cols();
    let mut qt = vec![0.0; d * n];
    for r in 0..n {
        for c in 0..d {
            qt[c * n + r] = q.data()[r * d + c];
        }
    }
    Tensor::new([p, n], matmul_raw(f.data(), &qt, p, d, n)).expect("score shape")
}

/// Options shared by [`overlap_ratio`] and [`select_active_clusters`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverlapOptions {
    pub foreground_only: bool,
    pub resize: Interpolation,
}

/// Binarised previous-layer classes and current-layer clusters on a common
/// grid.
fn binarize(m_prev: &Tensor, m_pc: &Tensor, opts: OverlapOptions) -> Result<(Vec<usize>, Vec<usize>, usize, usize)> {
    let target = m_pc.spatial()?;
    m_prev.spatial()?;
    let prev = resize(m_prev, target, opts.resize)?;
    let classes = crate::numerics::argmax_rows(&prev);
    let clusters = crate::numerics::argmax_rows(m_pc);
    Ok((classes, clusters, prev.shape()[3], m_pc.shape()[3]))
}

fn overlap_all(classes: &[usize], clusters: &[usize], k1: usize, n: usize, foreground_only: bool) -> Vec<f64> {
    let mut counts = vec![0usize; n * k1];
    let mut sizes = vec![0usize; n];
    for (&k, &c) in classes.iter().zip(clusters) {
        counts[c * k1 + k] += 1;
        sizes[c] += 1;
    }
    let usable = if foreground_only { k1 - 1 } else { k1 };
    (0..n)
        .map(|c| {
            if sizes[c] == 0 {
                return 0.0;
            }
            let best = counts[c * k1..c * k1 + usable].iter().copied().max().unwrap_or(0);
            best as f64 / sizes[c] as f64
        })
        .collect()
}

/// Largest fraction of cluster `n`'s pixels that fall in a single class region
/// of `m_prev`. Both masks are binarised by per-pixel argmax; `m_prev`
/// (`[x, y, z, K + 1]`) is first resized to the grid of `m_pc`
/// (`[X, Y, Z, N]`). An empty cluster scores 0.
pub fn overlap_ratio(m_prev: &Tensor, m_pc: &Tensor, n: usize, opts: OverlapOptions) -> Result<f64> {
    let (classes, clusters, k1, num) = binarize(m_prev, m_pc, opts)?;
    if n >= num {
        return Err(Error::Usage(format!("cluster {n} out of range for {num} clusters")));
    }
    Ok(overlap_all(&classes, &clusters, k1, num, opts.foreground_only)[n])
}

/// Overlap ratio of every cluster.
pub fn overlap_ratios(m_prev: &Tensor, m_pc: &Tensor, opts: OverlapOptions) -> Result<Vec<f64>> {
    let (classes, clusters, k1, num) = binarize(m_prev, m_pc, opts)?;
    Ok(overlap_all(&classes, &clusters, k1, num, opts.foreground_only))
}

/// Clusters whose overlap ratio exceeds `tau`. If none does, only the cluster
/// with the highest ratio stays active.
pub fn select_active_clusters(m_prev: &Tensor, m_pc: &Tensor, tau: f64, opts: OverlapOptions) -> Result<Vec<bool>> {
    check_tau(tau)?;
    let ratios = overlap_ratios(m_prev, m_pc, opts)?;
    Ok(active_from_ratios(&ratios, tau))
}

pub fn active_from_ratios(ratios: &[f64], tau: f64) -> Vec<bool> {
    let mut active: Vec<bool> = ratios.iter().map(|&r| r > tau).collect();
    if !active.iter().any(|&a| a) {
        active[argmax(ratios)] = true;
    }
    active
}

// ---- decoder -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SmgDecoder {
    pub config: SmgConfig,
    pub queries: ParamId,
    layers: Vec<Mhsa>,
    class_head: Mlp,
}

impl SmgDecoder {
    pub fn new(store: &mut ParamStore, config: SmgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let queries = store.init("smg.queries", &[config.num_queries, config.d_q], config.d_q, seed);
        let layers = (0..config.num_layers)
            .map(|l| Mhsa::new(store, &format!("smg.layer.{l}.attn"), config.d_q, config.heads, seed))
            .collect::<Result<_>>()?;
        let class_head = Mlp::new(
            store,
            "smg.class_head",
            &[config.d_q, config.d_q, config.num_classes + 1],
            seed,
        );
        Ok(SmgDecoder {
            config,
            queries,
            layers,
            class_head,
        })
    }

    pub fn class_head(&self) -> &Mlp {
        &self.class_head
    }

    /// Runs all decoder layers over `pyramid`.
    pub fn run(&self, g: &mut Graph, pyramid: &FeaturePyramid, epoch: usize) -> Result<(QueryState, PseudoMaskStack)> {
        let cfg = &self.config;
        let tau = cfg.filter.tau(epoch);
        if let Some(t) = tau {
            check_tau(t)?;
        }
        let opts = OverlapOptions {
            foreground_only: cfg.foreground_only_overlap,
            resize: cfg.mask_resize,
        };
        let mut q = g.param(self.queries);
        let mut stack = PseudoMaskStack::default();
        for (l, stride) in cfg.layer_strides().into_iter().enumerate() {
            let feat = *pyramid
                .f_scales
                .get(&stride)
                .ok_or_else(|| Error::Config(format!("feature pyramid has no 1/{stride} scale")))?;
            let extents = g.value(feat).spatial()?;
            let p: usize = extents.iter().product();
            let f_d = g.reshape(feat, [p, cfg.d_q])?;

            let active = match (stack.last(), tau) {
                (Some(prev), Some(t)) => {
                    let scores = raw_scores(g.value(f_d), g.value(q));
                    let grid = scores.reshape([extents[0], extents[1], extents[2], cfg.num_queries])?;
                    select_active_clusters(&prev.mask_volume(g), &grid, t, opts)?
                }
                _ => vec![true; cfg.num_queries],
            };

            let (q_new, assignment) = update_queries(g, &self.layers[l], q, f_d, &active)?;
            q = q_new;
            let m_pc = pixel_to_cluster(g, f_d, q, cfg.similarity)?;
            let m_cc = cluster_to_class(g, &self.class_head, q)?;
            let m = aggregate_masks(g, m_pc, m_cc)?;
            stack.layers.push(MaskLayer {
                stride,
                extents,
                m_pc,
                m_cc,
                m,
                assignment,
                tau: if l == 0 { None } else { tau },
            });
        }
        let state = QueryState {
            q,
            layer_index: stack.layers.len(),
        };
        Ok((state, stack))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_schedule_values() {
        assert_eq!(tau_schedule(0), 0.1);
        assert!((tau_schedule(25) - 0.3).abs() < 1e-12);
        assert_eq!(tau_schedule(200), 0.5);
        assert_eq!(tau_schedule(50), 0.5);
    }

    #[test]
    fn layer_strides_spread_evenly() {
        let cfg = SmgConfig::new(3, 8, vec![32, 16, 8]);
        assert_eq!(cfg.layer_strides(), vec![32, 32, 16, 16, 8, 8]);
        let single = SmgConfig::new(3, 8, vec![16]);
        assert_eq!(single.layer_strides(), vec![16; 6]);
        let bad = SmgConfig::new(3, 8, vec![32, 16, 8, 4]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn queries_must_exceed_classes() {
        let mut cfg = SmgConfig::new(3, 8, vec![8]);
        cfg.num_queries = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&[vec![0.6, 0.8, 0.0, 0.0]]));
        let q = g.constant(Tensor::from_rows(&[
            vec![0.6, 0.8, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.8, 0.6, 0.0, 0.0],
        ]));
        let s = pixel_to_cluster(&mut g, f, q, Similarity::ScaledDot).unwrap();
        let row = g.value(s).row(0).to_vec();
        assert!((row[0] - 0.5).abs() < 1e-15); // |f|^2 / sqrt(4)
        assert_eq!(row[1], 0.0);
        assert!(row[0] > row[2]);
        let bad = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(
            pixel_to_cluster(&mut g, f, bad, Similarity::ScaledDot),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn all_inactive_is_schedule_error() {
        let scores = Tensor::zeros([3, 2]);
        assert!(matches!(
            hard_assignment(&scores, &[false, false]),
            Err(Error::Schedule(_))
        ));
    }

    fn volume(extents: [usize; 3], labels: &[usize], channels: usize) -> Tensor {
        let mut t = Tensor::zeros([extents[0], extents[1], extents[2], channels]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[i * channels + l] = 1.0;
        }
        t
    }

    #[test]
    fn overlap_examples() {
        let opts = OverlapOptions::default();
        // 4-pixel grid: classes [1, 0, 0, 2] of K+1 = 3; cluster 0 covers pixels 0 and 1
        let prev = volume([2, 2, 1], &[1, 0, 0, 2], 3);
        let pc = volume([2, 2, 1], &[0, 0, 1, 1], 2);
        assert_eq!(overlap_ratio(&prev, &pc, 0, opts).unwrap(), 0.5);

        // cluster entirely inside one class
        let pc = volume([2, 2, 1], &[1, 0, 0, 1], 2);
        assert_eq!(overlap_ratio(&prev, &pc, 0, opts).unwrap(), 1.0);

        // everything background: background-aligned cluster scores 1, 0 against foreground
        let bg = volume([2, 2, 1], &[2, 2, 2, 2], 3);
        assert_eq!(overlap_ratio(&bg, &pc, 0, opts).unwrap(), 1.0);
        let fg = OverlapOptions {
            foreground_only: true,
            ..opts
        };
        assert_eq!(overlap_ratio(&bg, &pc, 0, fg).unwrap(), 0.0);

        // empty cluster
        let pc = volume([2, 2, 1], &[0, 0, 0, 0], 2);
        assert_eq!(overlap_ratio(&prev, &pc, 1, opts).unwrap(), 0.0);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(active_from_ratios(&[0.9, 0.2], 0.5), vec![true, false]);
        assert_eq!(active_from_ratios(&[0.1, 0.3, 0.2], 0.5), vec![false, true, false]);
        assert_eq!(active_from_ratios(&[0.4, 0.0, 1.0], 0.0), vec![true, false, true]);
    }
}
