//! `(n, ε)` separated and spanning sets of leaf points in the Bowen metric
//! `max_{k<n} d(f^k y, f^k z)`.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::entropy::bowen::check_ball;
use crate::entropy::rays::BaseOrbit;
use crate::error::{Error, Result};
use crate::leaf::LeafPatch;
use crate::linalg::max_singular_value;
use crate::systems::{wrap_diff, Dynamics};

pub const DEFAULT_CANDIDATE_BUDGET: usize = 1_000_000;
/// Patch points at which the stretch of `f^{n-1}` is sampled.
const STRETCH_SAMPLES: usize = 33;
const STRETCH_MARGIN: f64 = 1.1;
/// Halvings of the automatic spacing tried before giving up.
const REFINEMENTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountKind {
    Separated,
    Spanning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthCount {
    pub kind: CountKind,
    pub value: usize,
    pub n: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Candidate grid spacing in fast coordinates.
    pub spacing: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CountOptions {
    /// Candidate spacing; chosen from the stretch of `f^{n-1}` when absent.
    pub spacing: Option<f64>,
    pub candidate_budget: usize,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            spacing: None,
            candidate_budget: DEFAULT_CANDIDATE_BUDGET,
        }
    }
}

/// Regular grid of patch points in lexicographic order with their first `n`
/// forward iterates.
pub struct CandidateSet {
    n: usize,
    d: usize,
    spacing: f64,
    delta: f64,
    /// `n * d` coordinates per candidate.
    orbits: Vec<f64>,
    /// Pairs of grid neighbours.
    neighbours: Vec<(u32, u32)>,
}

impl CandidateSet {
    pub fn build<M: Dynamics + ?Sized>(
        map: &M,
        patch: &LeafPatch,
        n: usize,
        spacing: f64,
        budget: usize,
    ) -> Result<Self> {
        if n == 0 || !(spacing > 0.0) {
            return Err(Error::InvalidParameter(
                "candidate sets need n >= 1 and positive spacing".into(),
            ));
        }
        let k = patch.fast_dim();
        let half = (patch.radius / spacing).floor() as usize;
        let side = 2 * half + 1;
        let total = check_budget(patch, spacing, budget)?;
        let total = total as usize;
        let coords = |idx: usize| -> Vec<f64> {
            let mut rest = idx;
            let mut w = vec![0.0; k];
            for a in (0..k).rev() {
                w[a] = ((rest % side) as f64 - half as f64) * spacing;
                rest /= side;
            }
            w
        };
        let mut slot = vec![u32::MAX; total];
        let mut members = Vec::new();
        for (idx, s) in slot.iter_mut().enumerate() {
            if patch.contains(&coords(idx)) {
                *s = members.len() as u32;
                members.push(idx);
            }
        }
        let mut neighbours = Vec::new();
        for &idx in &members {
            let mut stride = 1;
            for _ in 0..k {
                let digit = (idx / stride) % side;
                if digit + 1 < side && slot[idx + stride] != u32::MAX {
                    neighbours.push((slot[idx], slot[idx + stride]));
                }
                stride *= side;
            }
        }
        let d = map.dim();
        let orbit = BaseOrbit::new(map, &patch.anchor(), n);
        let per: Vec<Vec<f64>> = members
            .par_iter()
            .map(|&idx| {
                let mut y = patch.point_at(&coords(idx));
                let mut out = Vec::with_capacity(n * d);
                for step in 0..n {
                    out.extend(y.iter());
                    if step + 1 < n {
                        y = orbit.advance(map, &y, step);
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            n,
            d,
            spacing,
            delta: patch.radius,
            orbits: per.concat(),
            neighbours,
        })
    }

    pub fn len(&self) -> usize {
        self.orbits.len() / (self.n * self.d)
    }

    pub fn is_empty(&self) -> bool {
        self.orbits.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn orbit(&self, i: usize) -> &[f64] {
        &self.orbits[i * self.n * self.d..(i + 1) * self.n * self.d]
    }

    pub fn bowen_distance(&self, a: usize, b: usize) -> f64 {
        let (oa, ob) = (self.orbit(a), self.orbit(b));
        oa.chunks(self.d)
            .zip(ob.chunks(self.d))
            .map(|(p, q)| p.iter().zip(q).map(|(x, y)| wrap_diff(x - y).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    fn closer_than(&self, a: usize, b: usize, epsilon: f64) -> bool {
        let e2 = epsilon * epsilon;
        let (oa, ob) = (self.orbit(a), self.orbit(b));
        oa.chunks(self.d).zip(ob.chunks(self.d)).all(|(p, q)| {
            p.iter().zip(q).map(|(x, y)| wrap_diff(x - y).powi(2)).sum::<f64>() < e2
        })
    }

    /// Largest Bowen distance between grid neighbours.
    pub fn resolution(&self) -> f64 {
        self.neighbours
            .par_iter()
            .map(|&(a, b)| self.bowen_distance(a as usize, b as usize))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn check_resolution(&self, epsilon: f64) -> Result<()> {
        let measured = self.resolution();
        if measured > epsilon / 10.0 {
            return Err(Error::ResolutionTooCoarse {
                spacing: measured,
                limit: epsilon / 10.0,
            });
        }
        Ok(())
    }

    /// Greedy maximal `(n, ε)` separated subset in candidate order.
    pub fn separated(&self, epsilon: f64) -> usize {
        let buckets = Buckets::new(self, epsilon);
        let mut accepted: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut around = Vec::new();
        let mut count = 0;
        for c in 0..self.len() {
            let key = buckets.key(c);
            buckets.around(key, &mut around);
            let clash = around
                .iter()
                .filter_map(|b| accepted.get(b))
                .flatten()
                .any(|&a| self.closer_than(a, c, epsilon));
            if !clash {
                accepted.entry(key).or_default().push(c);
                count += 1;
            }
        }
        count
    }

    /// Size of a greedy cover of the candidates by Bowen balls of radius ε:
    /// the first uncovered candidate picks the last candidate within ε of it
    /// as centre. The smaller of this and the separated count is reported,
    /// as a maximal separated set also spans.
    pub fn spanning(&self, epsilon: f64) -> usize {
        let buckets = Buckets::new(self, epsilon);
        let mut order: Vec<(u64, u32)> = (0..self.len()).map(|c| (buckets.key(c), c as u32)).collect();
        order.sort_unstable();
        let members = |key: u64| -> &[(u64, u32)] {
            let lo = order.partition_point(|&(k, _)| k < key);
            let hi = order.partition_point(|&(k, _)| k <= key);
            &order[lo..hi]
        };
        let mut around = Vec::new();
        let mut covered = vec![false; self.len()];
        let mut count = 0;
        for c in 0..self.len() {
            if covered[c] {
                continue;
            }
            buckets.around(buckets.key(c), &mut around);
            let mut centre = c;
            for &b in &around {
                for &(_, j) in members(b) {
                    let j = j as usize;
                    if j > centre && self.closer_than(c, j, epsilon) {
                        centre = j;
                    }
                }
            }
            buckets.around(buckets.key(centre), &mut around);
            for &b in &around {
                for &(_, j) in members(b) {
                    let j = j as usize;
                    if !covered[j] && self.closer_than(centre, j, epsilon) {
                        covered[j] = true;
                    }
                }
            }
            covered[c] = true;
            count += 1;
        }
        count.min(self.separated(epsilon))
    }
}

/// Size of the regular candidate grid, checked against the budget.
pub fn check_budget(patch: &LeafPatch, spacing: f64, budget: usize) -> Result<f64> {
    let side = 2.0 * (patch.radius / spacing).floor() + 1.0;
    let total = side.powi(patch.fast_dim() as i32);
    if total > budget as f64 {
        return Err(Error::CandidateBudgetExceeded(total.min(usize::MAX as f64) as usize));
    }
    Ok(total)
}

/// Buckets of side `1/floor(1/ε) >= ε` on the torus at time `n - 1`.
struct Buckets {
    cells: u64,
    d: usize,
    keys: Vec<u64>,
}

impl Buckets {
    fn new(set: &CandidateSet, epsilon: f64) -> Self {
        let cells = ((1.0 / epsilon).floor() as u64).max(1);
        let d = set.d;
        let keys = (0..set.len())
            .map(|c| {
                let last = &set.orbit(c)[(set.n - 1) * d..];
                last.iter().rev().fold(0u64, |acc, &x| {
                    let cell = ((crate::systems::reduce(x) * cells as f64).floor() as u64).min(cells - 1);
                    acc * cells + cell
                })
            })
            .collect();
        Self { cells, d, keys }
    }

    fn key(&self, c: usize) -> u64 {
        self.keys[c]
    }

    /// Keys of the bucket and its neighbours, each once.
    fn around(&self, key: u64, out: &mut Vec<u64>) {
        let m = self.cells;
        out.clear();
        out.push(0);
        let mut rest = key;
        let mut scale = 1u64;
        for _ in 0..self.d {
            let digit = rest % m;
            rest /= m;
            let offsets = [digit, (digit + 1) % m, (digit + m - 1) % m];
            let unique = &offsets[..m.min(3) as usize];
            let len = out.len();
            for i in 0..len {
                let acc = out[i];
                for (t, &o) in unique.iter().enumerate() {
                    if t == 0 {
                        out[i] = acc + o * scale;
                    } else {
                        out.push(acc + o * scale);
                    }
                }
            }
            scale *= m;
        }
    }
}

/// Automatic candidate spacing `ε / (10 · stretch)` with the largest
/// stretch of `f^{n-1}` on the leaf tangent over sampled patch points.
pub fn auto_spacing<M: Dynamics + ?Sized>(map: &M, patch: &LeafPatch, n: usize, epsilon: f64) -> f64 {
    let k = patch.fast_dim();
    let mut stretch: f64 = 1.0;
    for j in 0..STRETCH_SAMPLES {
        let t = 2.0 * j as f64 / (STRETCH_SAMPLES - 1) as f64 - 1.0;
        let w: Vec<f64> = (0..k)
            .map(|a| if a == j % k { t * patch.radius } else { 0.0 })
            .collect();
        let start = patch.point_at(&w);
        let orbit = BaseOrbit::new(map, &start, n);
        let jac = orbit.jacobian(map) * patch.tangent_at(&w);
        stretch = stretch.max(max_singular_value(&jac));
    }
    epsilon / (10.0 * STRETCH_MARGIN * stretch)
}

/// Candidate set resolving ε, refining the automatic spacing if needed.
pub fn resolved_candidates<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    n: usize,
    epsilon: f64,
    options: &CountOptions,
) -> Result<CandidateSet> {
    check_ball(patch, n, epsilon)?;
    match options.spacing {
        Some(h) => {
            let set = CandidateSet::build(map, patch, n, h, options.candidate_budget)?;
            set.check_resolution(epsilon)?;
            Ok(set)
        }
        None => {
            let mut h = auto_spacing(map, patch, n, epsilon);
            let mut attempt = 0;
            loop {
                let set = CandidateSet::build(map, patch, n, h, options.candidate_budget)?;
                match set.check_resolution(epsilon) {
                    Ok(()) => return Ok(set),
                    Err(e) if attempt >= REFINEMENTS => return Err(e),
                    Err(_) => {
                        attempt += 1;
                        h /= 2.0;
                    }
                }
            }
        }
    }
}

fn growth_count(set: &CandidateSet, kind: CountKind, n: usize, epsilon: f64) -> GrowthCount {
    let value = match kind {
        CountKind::Separated => set.separated(epsilon),
        CountKind::Spanning => set.spanning(epsilon),
    };
    GrowthCount {
        kind,
        value,
        n,
        epsilon,
        delta: set.delta,
        spacing: set.spacing,
        candidates: set.len(),
    }
}

pub fn separated_count<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    n: usize,
    epsilon: f64,
    options: &CountOptions,
) -> Result<GrowthCount> {
    let set = resolved_candidates(map, patch, n, epsilon, options)?;
    Ok(growth_count(&set, CountKind::Separated, n, epsilon))
}

pub fn spanning_count<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    n: usize,
    epsilon: f64,
    options: &CountOptions,
) -> Result<GrowthCount> {
    let set = resolved_candidates(map, patch, n, epsilon, options)?;
    Ok(growth_count(&set, CountKind::Spanning, n, epsilon))
}

/// Count of the given kind on an existing candidate set.
pub fn count_on(set: &CandidateSet, kind: CountKind, epsilon: f64) -> GrowthCount {
    growth_count(set, kind, set.n, epsilon)
}
