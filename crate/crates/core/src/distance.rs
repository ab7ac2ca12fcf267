//! Interactive distance under a uniform element shuffle.
//!
//! A group volume `[H, W, d_i]` is viewed as the flat `H × (W·d_i)` grid. After
//! a shuffle, an element interacts with every element that lands in the same
//! attention window; the interactive distance is the Euclidean distance
//! between their pre-shuffle grid coordinates. Pairs that never share a
//! window simply do not enter that draw's average.
//!
//! Under a uniform shuffle every other element is equally likely to be a
//! window partner, so the expected distance of element `t = (t_h, t_w)` is
//!
//! ```text
//! d(t) = 1/(H·W·d_i − 1) · Σ_h Σ_w √((h − t_h)² + (w − t_w)²)
//! ```
//!
//! where the sum runs over the full grid; the `(t_h, t_w)` term is zero, so
//! this equals the mean over the other elements. Applying
//! `√((x² + y²)/2) ≥ (x + y)/2` and summing the absolute deviations in closed
//! form gives the lower bound in [`lower_bound`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tdsm::{make_shuffle_spec, FeatureGeometry, GroupWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceQuery {
    pub h: usize,
    pub w: usize,
    pub d_i: usize,
    /// Row on the flattened grid, `< h`.
    pub t_h: usize,
    /// Column on the flattened grid, `< w · d_i`.
    pub t_w: usize,
}

impl DistanceQuery {
    pub fn new(h: usize, w: usize, d_i: usize, t_h: usize, t_w: usize) -> Result<Self> {
        let q = Self {
            h,
            w,
            d_i,
            t_h,
            t_w,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d_i == 0 {
            return invalid("grid extents must be positive");
        }
        if self.cells() < 2 {
            return invalid("a grid with a single element has no interaction partners");
        }
        if self.t_h >= self.h || self.t_w >= self.cols() {
            return invalid(format!(
                "element ({}, {}) outside the {}×{} grid",
                self.t_h,
                self.t_w,
                self.h,
                self.cols()
            ));
        }
        Ok(())
    }

    pub fn cols(&self) -> usize {
        self.w * self.d_i
    }

    pub fn cells(&self) -> usize {
        self.h * self.cols()
    }

    /// Flat row-major offset of the queried element.
    pub fn offset(&self) -> usize {
        self.t_h * self.cols() + self.t_w
    }
}

fn grid_distance(a: usize, b: usize, cols: usize) -> f64 {
    let dh = (a / cols) as f64 - (b / cols) as f64;
    let dw = (a % cols) as f64 - (b % cols) as f64;
    (dh * dh + dw * dw).sqrt()
}

/// Exact expectation by direct double sum.
pub fn exact_expected_distance(q: &DistanceQuery) -> Result<f64> {
    q.validate()?;
    let me = q.offset();
    let total: f64 = (0..q.cells()).map(|p| grid_distance(p, me, q.cols())).sum();
    Ok(total / (q.cells() - 1) as f64)
}

/// `Σ_{x=0}^{n−1} |x − t|` in closed form.
pub fn abs_deviation_sum(n: usize, t: usize) -> usize {
    t * (t + 1) / 2 + (n - t) * (n - t - 1) / 2
}

/// Closed-form lower bound on the expected interactive distance.
pub fn lower_bound(q: &DistanceQuery) -> Result<f64> {
    q.validate()?;
    let h = q.h as f64;
    let wd = q.cols() as f64;
    let th = q.t_h as f64;
    let tw = q.t_w as f64;
    let bracket = h * tw * (tw + 1.0)
        + wd * th * (th + 1.0)
        + h * (wd - tw) * (wd - tw - 1.0)
        + wd * (h - th) * (h - th - 1.0);
    Ok(std::f64::consts::SQRT_2 / (4.0 * (h * wd - 1.0)) * bracket)
}

/// Where the queried group sits inside a full channel partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupContext {
    pub total_channels: usize,
    pub n_groups: usize,
    pub group: usize,
}

impl GroupContext {
    /// The group is the whole volume.
    pub fn single(d_i: usize) -> Self {
        Self {
            total_channels: d_i,
            n_groups: 1,
            group: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub exact: f64,
    pub lower_bound: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub samples: usize,
}

/// Per-draw seed: SplitMix64 over `root + k·γ`.
pub fn sample_seed(root: u64, k: u64) -> u64 {
    let mut z = root.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean and standard error via Welford updates in index order.
fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let n = values.len();
    let stderr = if n > 1 {
        (m2 / (n - 1) as f64 / n as f64).sqrt()
    } else {
        0.0
    };
    (mean, stderr)
}

struct DrawSetup {
    geom: FeatureGeometry,
    n_groups: usize,
    group: usize,
    d_i: usize,
    windows: Vec<Vec<usize>>,
    window_of: Vec<usize>,
}

fn setup(
    h: usize,
    w: usize,
    d_i: usize,
    ctx: GroupContext,
    window: GroupWindow,
) -> Result<DrawSetup> {
    window.validate(h, w)?;
    if ctx.group >= ctx.n_groups {
        return invalid(format!("group {} outside [0, {})", ctx.group, ctx.n_groups));
    }
    let geom = FeatureGeometry::new(h, w, ctx.total_channels)?;
    let widths = crate::tdsm::split_widths(ctx.total_channels, ctx.n_groups)?;
    if widths[ctx.group] != d_i {
        return invalid(format!(
            "group {} has width {}, query expects {d_i}",
            ctx.group, widths[ctx.group]
        ));
    }
    if window.s * window.s * d_i < 2 {
        return invalid("a window holding a single element has no interaction partners");
    }
    Ok(DrawSetup {
        geom,
        n_groups: ctx.n_groups,
        group: ctx.group,
        d_i,
        windows: window.token_lists(h, w)?,
        window_of: window.window_of(h, w)?,
    })
}

impl DrawSetup {
    /// Pre-shuffle offsets of the elements that land in window `win`.
    fn members(&self, perm: &[usize], win: usize) -> Vec<usize> {
        let d = self.d_i;
        let mut m: Vec<usize> = self.windows[win]
            .iter()
            .flat_map(|&tok| (0..d).map(move |c| perm[tok * d + c]))
            .collect();
        m.sort_unstable();
        m
    }
}

fn mean_distance_to(members: &[usize], me: usize, cols: usize) -> f64 {
    let total: f64 = members
        .iter()
        .filter(|&&p| p != me)
        .map(|&p| grid_distance(p, me, cols))
        .sum();
    total / (members.len() - 1) as f64
}

/// Monte-Carlo interactive distance of one element over `samples` independent
/// shuffle draws.
pub fn mc_distance(
    q: &DistanceQuery,
    ctx: GroupContext,
    window: GroupWindow,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    q.validate()?;
    if samples == 0 {
        return invalid("Monte-Carlo estimate needs at least one sample");
    }
    let st = setup(q.h, q.w, q.d_i, ctx, window)?;
    let me = q.offset();
    let values: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let spec = make_shuffle_spec(st.geom, st.n_groups, sample_seed(seed, k))?;
            let perm = spec.element_perm(st.group);
            let post = spec.inverse_perm(st.group)[me];
            let win = st.window_of[post / st.d_i];
            Ok(mean_distance_to(&st.members(perm, win), me, q.cols()))
        })
        .collect::<Result<_>>()?;
    let (estimate, stderr) = mean_and_stderr(&values);
    Ok(McEstimate {
        estimate,
        stderr,
        samples,
    })
}

/// Per-element Monte-Carlo interactive distances over the whole
/// `H × (W·d_i)` grid, all elements sharing the same draws.
pub fn per_element_mc(
    h: usize,
    w: usize,
    d_i: usize,
    window: GroupWindow,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return invalid("Monte-Carlo estimate needs at least one sample");
    }
    if h * w * d_i < 2 {
        return invalid("a grid with a single element has no interaction partners");
    }
    let st = setup(h, w, d_i, GroupContext::single(d_i), window)?;
    let cols = w * d_i;
    let cells = h * cols;
    let draws: Vec<Vec<f64>> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let spec = make_shuffle_spec(st.geom, 1, sample_seed(seed, k))?;
            let perm = spec.element_perm(0);
            let mut out = vec![0.0; cells];
            for win in 0..st.windows.len() {
                let members = st.members(perm, win);
                for &me in &members {
                    out[me] = mean_distance_to(&members, me, cols);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; cells];
    for d in &draws {
        for (a, v) in acc.iter_mut().zip(d) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / samples as f64).collect())
}

/// Average interactive distance over every element of the grid.
pub fn average_distance(
    h: usize,
    w: usize,
    d_i: usize,
    window: GroupWindow,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let per = per_element_mc(h, w, d_i, window, samples, seed)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Exact expectation for every element, row-major.
pub fn exact_grid(h: usize, w: usize, d_i: usize) -> Result<Vec<f64>> {
    let cols = w * d_i;
    (0..h * cols)
        .map(|p| exact_expected_distance(&DistanceQuery::new(h, w, d_i, p / cols, p % cols)?))
        .collect()
}

/// Exact value, bound and Monte-Carlo estimate for one element.
pub fn report(
    q: &DistanceQuery,
    ctx: GroupContext,
    window: GroupWindow,
    samples: usize,
    seed: u64,
) -> Result<DistanceReport> {
    let mc = mc_distance(q, ctx, window, samples, seed)?;
    Ok(DistanceReport {
        exact: exact_expected_distance(q)?,
        lower_bound: lower_bound(q)?,
        mc_estimate: mc.estimate,
        mc_stderr: mc.stderr,
        samples,
    })
}
