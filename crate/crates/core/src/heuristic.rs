//! Non-learned baselines: residual thresholding, and residual thresholding
//! followed by a free-space check and region growing.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::label::{LabelGrid, MovingLabel};
use crate::projection::RangeImage;
use crate::residual::ResidualStack;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicParams {
    /// Residual above which a channel votes for motion.
    pub threshold: f64,
    pub min_votes: usize,
    /// Metres by which the past ray must overshoot the current return.
    pub free_space_margin: f64,
    /// Maximum range step between 4-neighbours while growing, metres.
    pub grow_tolerance: f64,
    pub min_region_size: usize,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            min_votes: 1,
            free_space_margin: 0.3,
            grow_tolerance: 0.5,
            min_region_size: 10,
        }
    }
}

impl HeuristicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config("residual threshold must be positive".into()));
        }
        if !(self.free_space_margin > 0.0) {
            return Err(Error::Config("free-space margin must be positive".into()));
        }
        if !(self.grow_tolerance > 0.0) {
            return Err(Error::Config("region-grow tolerance must be positive".into()));
        }
        if self.min_region_size == 0 {
            return Err(Error::Config("minimum region size must be at least 1".into()));
        }
        if self.min_votes == 0 {
            return Err(Error::Config("minimum votes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Moving where at least `min_votes` channels exceed the threshold; invalid
/// pixels are `Ignore`.
pub fn segment_residual(stack: &ResidualStack, params: &HeuristicParams) -> Result<LabelGrid> {
    if stack.is_empty() {
        return Err(Error::Precondition("residual thresholding needs at least one channel".into()));
    }
    let labels = (0..stack.height * stack.width)
        .map(|idx| {
            if !stack.valid[idx] {
                return MovingLabel::Ignore;
            }
            let votes = stack
                .channels
                .iter()
                .filter(|c| f64::from(c[idx]) > params.threshold)
                .count();
            if votes >= params.min_votes {
                MovingLabel::Moving
            } else {
                MovingLabel::Static
            }
        })
        .collect();
    Ok(LabelGrid {
        height: stack.height,
        width: stack.width,
        labels,
    })
}

/// Keeps a candidate only where the past ray travelled strictly beyond the
/// current return, i.e. the space now occupied was observed free before.
pub fn free_space_check(
    current: &RangeImage,
    past_ranges: &[f32],
    candidates: &[bool],
    margin: f64,
) -> Result<Vec<bool>> {
    let n = current.range.len();
    if past_ranges.len() != n || candidates.len() != n {
        return Err(Error::Precondition("free-space inputs differ in shape".into()));
    }
    Ok((0..n)
        .map(|i| {
            candidates[i]
                && current.is_valid(i)
                && past_ranges[i] > 0.0
                && f64::from(past_ranges[i]) > f64::from(current.range[i]) + margin
        })
        .collect())
}

/// 4-connected flood fill from `seeds` over range-coherent valid pixels,
/// wrapping in azimuth. Regions smaller than `min_region_size` are dropped.
pub fn region_grow(
    seeds: &[bool],
    current: &RangeImage,
    tolerance: f64,
    min_region_size: usize,
) -> Result<LabelGrid> {
    if !(tolerance > 0.0) {
        return Err(Error::Precondition("region-grow tolerance must be positive".into()));
    }
    let (h, w) = (current.height(), current.width());
    if seeds.len() != h * w {
        return Err(Error::Precondition("seed mask differs in shape from the image".into()));
    }
    let mut labels: Vec<MovingLabel> = current
        .source
        .iter()
        .map(|s| if s.is_some() { MovingLabel::Static } else { MovingLabel::Ignore })
        .collect();
    let mut visited = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut region = Vec::new();

    for start in 0..h * w {
        if !seeds[start] || visited[start] || !current.is_valid(start) {
            continue;
        }
        region.clear();
        visited[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            region.push(idx);
            let r = current.range[idx];
            for nb in neighbours4(idx, h, w).into_iter().flatten() {
                if visited[nb] || !current.is_valid(nb) {
                    continue;
                }
                if f64::from((current.range[nb] - r).abs()) <= tolerance {
                    visited[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        if region.len() >= min_region_size {
            for &idx in &region {
                labels[idx] = MovingLabel::Moving;
            }
        }
    }
    Ok(LabelGrid {
        height: h,
        width: w,
        labels,
    })
}

/// Up, down, left, right; left/right wrap around the azimuth seam.
#[inline]
pub(crate) fn neighbours4(idx: usize, h: usize, w: usize) -> [Option<usize>; 4] {
    let (v, u) = (idx / w, idx % w);
    [
        (v > 0).then(|| idx - w),
        (v + 1 < h).then(|| idx + w),
        Some(v * w + (u + w - 1) % w),
        Some(v * w + (u + 1) % w),
    ]
}

/// Residual thresholding on all channels, free-space check against the most
/// recent past scan, then region growing.
pub fn segment_residual_rg(
    current: &RangeImage,
    stack: &ResidualStack,
    params: &HeuristicParams,
) -> Result<LabelGrid> {
    let candidates: Vec<bool> = segment_residual(stack, params)?
        .labels
        .iter()
        .map(|l| l.is_moving())
        .collect();
    let seeds = free_space_check(current, &stack.past_ranges[0], &candidates, params.free_space_margin)?;
    region_grow(&seeds, current, params.grow_tolerance, params.min_region_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, Scan};
    use crate::projection::{project_scan, ProjectionConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(h: usize, w: usize) -> ProjectionConfig {
        ProjectionConfig {
            height: h,
            width: w,
            fov_up: 10f64.to_radians(),
            fov_down: 10f64.to_radians(),
        }
    }

    /// Range image with one point per pixel centre at the given ranges.
    fn image_from_ranges(c: &ProjectionConfig, ranges: &[f64]) -> RangeImage {
        let mut points = Vec::new();
        for v in 0..c.height {
            for u in 0..c.width {
                let r = ranges[v * c.width + u];
                if r > 0.0 {
                    let d = c.pixel_center_direction(u, v);
                    points.push(Point::new(r * d[0], r * d[1], r * d[2], 0.0));
                }
            }
        }
        let img = project_scan(&Scan::new(points, 0), c).image;
        for (i, &r) in ranges.iter().enumerate() {
            assert_eq!(img.is_valid(i), r > 0.0);
        }
        img
    }

    fn stack_of(channels: Vec<Vec<f32>>, valid: Vec<bool>, h: usize, w: usize) -> ResidualStack {
        let n = channels.len();
        ResidualStack {
            height: h,
            width: w,
            past_ranges: vec![vec![-1.0; h * w]; n],
            channels,
            valid,
            current_frame: 0,
            source_frames: vec![None; n],
        }
    }

    #[test]
    fn zero_stack_has_no_moving_pixels() {
        let s = stack_of(vec![vec![0.0; 32]; 2], vec![true; 32], 4, 8);
        let g = segment_residual(&s, &HeuristicParams::default()).unwrap();
        assert_eq!(g.count(MovingLabel::Moving), 0);
    }

    #[test]
    fn strong_pixel_is_moving() {
        let p = HeuristicParams::default();
        let mut ch = vec![0.0f32; 32];
        ch[9] = (2.0 * p.threshold) as f32;
        let mut valid = vec![true; 32];
        valid[3] = false;
        let s = stack_of(vec![ch.clone(), ch], valid, 4, 8);
        let g = segment_residual(&s, &p).unwrap();
        assert_eq!(g.labels[9], MovingLabel::Moving);
        assert_eq!(g.count(MovingLabel::Moving), 1);
        assert_eq!(g.labels[3], MovingLabel::Ignore);
    }

    #[test]
    fn empty_stack_is_an_error() {
        let s = stack_of(vec![], vec![true; 4], 2, 2);
        assert!(matches!(
            segment_residual(&s, &HeuristicParams::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn min_votes_counts_channels() {
        let p = HeuristicParams { min_votes: 2, ..Default::default() };
        let mut a = vec![0.0f32; 4];
        let mut b = vec![0.0f32; 4];
        a[0] = 1.0;
        a[1] = 1.0;
        b[1] = 1.0;
        let g = segment_residual(&stack_of(vec![a, b], vec![true; 4], 2, 2), &p).unwrap();
        assert_eq!(g.labels[0], MovingLabel::Static);
        assert_eq!(g.labels[1], MovingLabel::Moving);
    }

    #[test]
    fn free_space_examples() {
        let c = cfg(4, 8);
        let img = image_from_ranges(&c, &[10.0; 32]);
        let cand = vec![true; 32];
        let same = vec![10.0f32; 32];
        assert!(free_space_check(&img, &same, &cand, 0.5).unwrap().iter().all(|&k| !k));
        let mut past = same.clone();
        past[5] = 15.0;
        past[6] = -1.0;
        past[7] = 10.4;
        let kept = free_space_check(&img, &past, &cand, 0.5).unwrap();
        assert!(kept[5]);
        assert_eq!(kept.iter().filter(|&&k| k).count(), 1);
    }

    #[test]
    fn empty_seeds_give_empty_output() {
        let c = cfg(4, 8);
        let img = image_from_ranges(&c, &[10.0; 32]);
        let g = region_grow(&[false; 32], &img, 1.0, 1).unwrap();
        assert_eq!(g.count(MovingLabel::Moving), 0);
    }

    #[test]
    fn seed_fills_uniform_patch() {
        let c = cfg(9, 16);
        let mut ranges = vec![30.0; 9 * 16];
        for v in 2..7 {
            for u in 5..10 {
                ranges[v * 16 + u] = 8.0;
            }
        }
        let img = image_from_ranges(&c, &ranges);
        let mut seeds = vec![false; 9 * 16];
        seeds[4 * 16 + 7] = true;
        let g = region_grow(&seeds, &img, 1.0, 1).unwrap();
        assert_eq!(g.count(MovingLabel::Moving), 25);
        for v in 2..7 {
            for u in 5..10 {
                assert!(g.get(u, v).is_moving());
            }
        }
        // same seed, but the patch is below the minimum size
        let g = region_grow(&seeds, &img, 1.0, 26).unwrap();
        assert_eq!(g.count(MovingLabel::Moving), 0);
    }

    #[test]
    fn growth_wraps_around_azimuth() {
        let c = cfg(4, 16);
        let mut ranges = vec![30.0; 64];
        for v in 0..4 {
            ranges[v * 16] = 5.0;
            ranges[v * 16 + 15] = 5.0;
        }
        let img = image_from_ranges(&c, &ranges);
        let mut seeds = vec![false; 64];
        seeds[0] = true;
        let g = region_grow(&seeds, &img, 0.5, 1).unwrap();
        assert_eq!(g.count(MovingLabel::Moving), 8);
        assert!(g.get(15, 2).is_moving());
    }

    /// Plain BFS over an explicit adjacency, one seed at a time.
    fn grow_oracle(seeds: &[bool], ranges: &[f64], h: usize, w: usize, tol: f64, min: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for s in 0..h * w {
            if !seeds[s] || ranges[s] <= 0.0 {
                continue;
            }
            let mut seen = vec![false; h * w];
            let mut stack = vec![s];
            seen[s] = true;
            let mut comp = vec![];
            while let Some(i) = stack.pop() {
                comp.push(i);
                let (v, u) = ((i / w) as i64, (i % w) as i64);
                for (dv, du) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let nv = v + dv;
                    if nv < 0 || nv >= h as i64 {
                        continue;
                    }
                    let nu = (u + du).rem_euclid(w as i64);
                    let j = (nv * w as i64 + nu) as usize;
                    if !seen[j] && ranges[j] > 0.0 && (ranges[j] as f32 - ranges[i] as f32).abs() as f64 <= tol {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            if comp.len() >= min {
                for i in comp {
                    out[i] = true;
                }
            }
        }
        out
    }

    #[test]
    fn region_grow_matches_bfs_oracle() {
        let (h, w) = (16, 48);
        let c = cfg(h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let ranges: Vec<f64> = (0..h * w)
                .map(|_| if rng.gen_bool(0.1) { -1.0 } else { f64::from(rng.gen_range(0u8..6)) * 0.4 + 5.0 })
                .collect();
            let img = image_from_ranges(&c, &ranges);
            let stored: Vec<f64> = img.range.iter().map(|&r| f64::from(r)).collect();
            let seeds: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.02)).collect();
            let min = trial % 7 + 1;
            let g = region_grow(&seeds, &img, 0.5, min).unwrap();
            let oracle = grow_oracle(&seeds, &stored, h, w, 0.5, min);
            let got: Vec<bool> = g.labels.iter().map(|l| l.is_moving()).collect();
            assert_eq!(got, oracle, "trial {trial}");
        }
    }

    proptest! {
        #[test]
        fn threshold_monotonicity(values in prop::collection::vec(0.0f32..1.0, 64), t1 in 0.01..0.5f64, dt in 0.0..0.5f64) {
            let s = stack_of(vec![values[..32].to_vec(), values[32..].to_vec()], vec![true; 32], 4, 8);
            let lo = segment_residual(&s, &HeuristicParams { threshold: t1, ..Default::default() }).unwrap();
            let hi = segment_residual(&s, &HeuristicParams { threshold: t1 + dt, ..Default::default() }).unwrap();
            for (a, b) in lo.labels.iter().zip(&hi.labels) {
                prop_assert!(!b.is_moving() || a.is_moving());
            }
        }

        #[test]
        fn grown_output_contains_surviving_seeds(seed in 0u64..500) {
            let (h, w) = (8, 32);
            let c = cfg(h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ranges: Vec<f64> = (0..h * w)
                .map(|_| if rng.gen_bool(0.15) { -1.0 } else { rng.gen_range(4.0..6.0) })
                .collect();
            let img = image_from_ranges(&c, &ranges);
            let seeds: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.05)).collect();
            let g = region_grow(&seeds, &img, 0.3, 1).unwrap();
            for i in 0..h * w {
                if seeds[i] && img.is_valid(i) {
                    prop_assert!(g.labels[i].is_moving());
                }
                if !img.is_valid(i) {
                    prop_assert_eq!(g.labels[i], MovingLabel::Ignore);
                }
            }
        }
    }
}
