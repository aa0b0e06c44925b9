//! Discrete boolean model on `Z^d`: per-slot occupancy fields, clump
//! extraction, the clump-height recursion that upper-bounds the aggregated
//! lattice model, subcriticality diagnostics, and the resampling extension
//! that produces an independent copy of a second clump.
//!
//! A site holds a sup-norm ball when at least one aggregated customer
//! arrived there in the slot; two balls overlap iff the center distance is
//! at most the sum of the radii (tangency connects, matching closed sets).

use crate::dist::Dist;
use crate::error::{HailError, Result};
use crate::rng::{site_rng, SeedSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};

/// Finite axis-aligned box of lattice sites, bounds inclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticeBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl LatticeBox {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
        LatticeBox { lo, hi }
    }

    pub fn centered(d: usize, half_width: i64) -> Self {
        LatticeBox::new(vec![-half_width; d], vec![half_width; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn side(&self, axis: usize) -> usize {
        (self.hi[axis] - self.lo[axis] + 1) as usize
    }

    pub fn len(&self) -> usize {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, z: &[i64]) -> bool {
        z.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| a <= v && v <= b)
    }

    pub fn index_of(&self, z: &[i64]) -> Option<usize> {
        if !self.contains(z) {
            return None;
        }
        let mut idx = 0usize;
        for i in 0..self.dim() {
            idx = idx * self.side(i) + (z[i] - self.lo[i]) as usize;
        }
        Some(idx)
    }

    pub fn site_at(&self, mut idx: usize) -> Vec<i64> {
        let d = self.dim();
        let mut z = vec![0i64; d];
        for i in (0..d).rev() {
            let s = self.side(i);
            z[i] = self.lo[i] + (idx % s) as i64;
            idx /= s;
        }
        z
    }

    pub fn sites(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        (0..self.len()).map(move |i| self.site_at(i))
    }
}

/// Integer ball-radius distribution for the boolean model.
#[derive(Clone, Debug, PartialEq)]
pub enum RadiusDist {
    Fixed(u64),
    UniformInt { lo: u64, hi: u64 },
    /// Radius of the lattice cube enclosing a footprint of the given
    /// Euclidean diameter: `floor(diameter) + 1`.
    FromDiameter(Dist),
}

impl RadiusDist {
    pub fn validate(&self) -> Result<()> {
        match self {
            RadiusDist::Fixed(r) => {
                if *r == 0 {
                    return Err(HailError::config("ball radius must be at least 1"));
                }
            }
            RadiusDist::UniformInt { lo, hi } => {
                if *lo == 0 || lo > hi {
                    return Err(HailError::config("need 1 <= lo <= hi for integer radius"));
                }
            }
            RadiusDist::FromDiameter(d) => d.validate_nonneg("diameter")?,
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        match self {
            RadiusDist::Fixed(r) => *r,
            RadiusDist::UniformInt { lo, hi } => rng.gen_range(*lo..=*hi),
            RadiusDist::FromDiameter(d) => d.sample(rng).floor() as u64 + 1,
        }
    }

    /// Probability of radius exactly `k`. For `FromDiameter` the diameter
    /// law is assumed continuous (atom boundaries have measure zero).
    pub fn pmf(&self, k: u64) -> f64 {
        match self {
            RadiusDist::Fixed(r) => {
                if k == *r {
                    1.0
                } else {
                    0.0
                }
            }
            RadiusDist::UniformInt { lo, hi } => {
                if k >= *lo && k <= *hi {
                    1.0 / (hi - lo + 1) as f64
                } else {
                    0.0
                }
            }
            RadiusDist::FromDiameter(d) => {
                if k == 0 {
                    0.0
                } else {
                    (d.cdf(k as f64) - d.cdf(k as f64 - 1.0)).max(0.0)
                }
            }
        }
    }

    /// Largest radius with positive probability, if the law is bounded.
    pub fn max_radius(&self) -> Option<u64> {
        match self {
            RadiusDist::Fixed(r) => Some(*r),
            RadiusDist::UniformInt { hi, .. } => Some(*hi),
            RadiusDist::FromDiameter(d) => d.upper_bound().map(|b| b.floor() as u64 + 1),
        }
    }
}

/// Occupancy probability of a site under arrival intensity `lambda`.
pub fn occupancy_probability(lambda: f64) -> f64 {
    1.0 - (-lambda).exp()
}

/// Intensity producing the given occupancy probability.
pub fn intensity_for_occupancy(p: f64) -> f64 {
    assert!((0.0..1.0).contains(&p));
    -(1.0 - p).ln()
}

/// Marks of one site in one slot.
#[derive(Clone, Debug, Default)]
pub struct SiteMarks {
    pub count: u32,
    pub r_max: u64,
    pub sigma_sum: f64,
    /// Per-radius totals `(radius, height sum)`, sorted by radius.
    pub layers: Vec<(u64, f64)>,
}

/// Draw the marks of one site: a Poisson number of customers, each with an
/// integer radius and a height. The count is realized as the number of
/// unit-exponential partial sums below `lambda`, so that a shared stream
/// yields a monotone coupling across intensities.
pub fn sample_site_marks(
    rng: &mut ChaCha8Rng,
    lambda: f64,
    radius: &RadiusDist,
    sigma: &Dist,
) -> SiteMarks {
    let mut marks = SiteMarks::default();
    if lambda <= 0.0 {
        return marks;
    }
    let mut acc = 0.0f64;
    let mut layer_map: HashMap<u64, f64> = HashMap::new();
    loop {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        acc -= u.ln();
        if acc > lambda {
            break;
        }
        let r = radius.sample(rng);
        let s = sigma.sample(rng);
        marks.count += 1;
        marks.r_max = marks.r_max.max(r);
        marks.sigma_sum += s;
        *layer_map.entry(r).or_insert(0.0) += s;
    }
    let mut layers: Vec<(u64, f64)> = layer_map.into_iter().collect();
    layers.sort_unstable_by_key(|(k, _)| *k);
    marks.layers = layers;
    marks
}

/// One time slot of the boolean model over a finite region.
#[derive(Clone, Debug)]
pub struct SlotField {
    pub region: LatticeBox,
    pub alpha: Vec<bool>,
    pub r_max: Vec<u64>,
    pub sigma_sum: Vec<f64>,
    pub layers: Vec<Vec<(u64, f64)>>,
}

impl SlotField {
    pub fn empty(region: LatticeBox) -> Self {
        let n = region.len();
        SlotField {
            region,
            alpha: vec![false; n],
            r_max: vec![0; n],
            sigma_sum: vec![0.0; n],
            layers: vec![Vec::new(); n],
        }
    }

    /// Independent per-site draws over the whole region. Site streams are
    /// keyed by coordinates, so a site's marks do not depend on the region
    /// bounds.
    pub fn sample(
        region: LatticeBox,
        lambda: f64,
        radius: &RadiusDist,
        sigma: &Dist,
        seed: &SeedSpec,
    ) -> Result<SlotField> {
        radius.validate()?;
        sigma.validate_nonneg("sigma")?;
        let mut field = SlotField::empty(region);
        for idx in 0..field.region.len() {
            let z = field.region.site_at(idx);
            let mut rng = site_rng(seed, 0, &z);
            let m = sample_site_marks(&mut rng, lambda, radius, sigma);
            field.set_site(idx, m);
        }
        Ok(field)
    }

    pub fn set_site(&mut self, idx: usize, m: SiteMarks) {
        self.alpha[idx] = m.count > 0;
        self.r_max[idx] = m.r_max;
        self.sigma_sum[idx] = m.sigma_sum;
        self.layers[idx] = m.layers;
    }

    /// Recompute the per-site aggregates from the layer decomposition.
    pub fn recompose_site(&mut self, idx: usize) {
        self.layers[idx].retain(|(_, s)| *s != 0.0 || true);
        self.layers[idx].sort_unstable_by_key(|(k, _)| *k);
        let occupied = !self.layers[idx].is_empty();
        self.alpha[idx] = occupied;
        self.r_max[idx] = self.layers[idx].iter().map(|(k, _)| *k).max().unwrap_or(0);
        self.sigma_sum[idx] = self.layers[idx].iter().map(|(_, s)| *s).sum();
    }

    pub fn occupied_sites(&self) -> Vec<usize> {
        (0..self.alpha.len()).filter(|&i| self.alpha[i]).collect()
    }
}

/// A maximal connected union of balls in one slot.
#[derive(Clone, Debug)]
pub struct Clump {
    /// Region indices of the occupied member sites.
    pub ball_centers: Vec<usize>,
    /// Region indices covered by the union of member balls (clipped).
    pub covered: Vec<usize>,
    /// Total number of lattice sites in the union, including any that fall
    /// outside the region.
    pub l: u64,
    /// Total height of all customers in the clump.
    pub sigma_hat: f64,
    /// True when the union of balls leaves the region, i.e. the clump may
    /// be incomplete.
    pub censored: bool,
}

/// Clump partition of one slot field.
#[derive(Clone, Debug)]
pub struct ClumpDecomposition {
    pub clumps: Vec<Clump>,
    /// For every region site: the clump covering it, if any.
    pub site_clump: Vec<Option<u32>>,
}

impl ClumpDecomposition {
    pub fn clump_at(&self, field: &SlotField, z: &[i64]) -> Option<&Clump> {
        let idx = field.region.index_of(z)?;
        self.site_clump[idx].map(|c| &self.clumps[c as usize])
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }
    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[rb as usize] = ra;
        }
    }
}

/// Partition the occupied sites of a slot into clumps: two balls belong to
/// the same clump iff they are connected through the overlap relation
/// `|y - z|_inf <= R_y + R_z`.
pub fn find_clumps(field: &SlotField) -> ClumpDecomposition {
    let occupied = field.occupied_sites();
    let rank: HashMap<usize, u32> = occupied
        .iter()
        .enumerate()
        .map(|(r, &idx)| (idx, r as u32))
        .collect();
    let r_sup = occupied
        .iter()
        .map(|&i| field.r_max[i])
        .max()
        .unwrap_or(0) as i64;
    let mut uf = UnionFind::new(occupied.len());
    let d = field.region.dim();
    for (a_rank, &a_idx) in occupied.iter().enumerate() {
        let za = field.region.site_at(a_idx);
        let ra = field.r_max[a_idx] as i64;
        let reach = ra + r_sup;
        // scan the reach box for occupied partners
        let mut off = vec![-reach; d];
        'outer: loop {
            let zb: Vec<i64> = za.iter().zip(&off).map(|(a, o)| a + o).collect();
            if let Some(b_idx) = field.region.index_of(&zb) {
                if field.alpha[b_idx] && b_idx != a_idx {
                    let rb = field.r_max[b_idx] as i64;
                    let dist = za
                        .iter()
                        .zip(&zb)
                        .map(|(p, q)| (p - q).abs())
                        .max()
                        .unwrap();
                    if dist <= ra + rb {
                        uf.union(a_rank as u32, rank[&b_idx]);
                    }
                }
            }
            let mut k = 0;
            loop {
                if k == d {
                    break 'outer;
                }
                off[k] += 1;
                if off[k] > reach {
                    off[k] = -reach;
                    k += 1;
                } else {
                    break;
                }
            }
        }
    }
    // group members by root
    let mut groups: HashMap<u32, Vec<usize>> = HashMap::new();
    for (r, &idx) in occupied.iter().enumerate() {
        groups.entry(uf.find(r as u32)).or_default().push(idx);
    }
    let mut clumps = Vec::with_capacity(groups.len());
    let mut site_clump = vec![None; field.region.len()];
    let mut roots: Vec<u32> = groups.keys().copied().collect();
    roots.sort_unstable();
    for root in roots {
        let members = &groups[&root];
        let mut covered_set: HashSet<Vec<i64>> = HashSet::new();
        let mut censored = false;
        let mut sigma_hat = 0.0;
        for &m_idx in members {
            sigma_hat += field.sigma_sum[m_idx];
            let z = field.region.site_at(m_idx);
            let r = field.r_max[m_idx] as i64;
            let mut off = vec![-r; d];
            'ball: loop {
                let site: Vec<i64> = z.iter().zip(&off).map(|(a, o)| a + o).collect();
                if !field.region.contains(&site) {
                    censored = true;
                }
                covered_set.insert(site);
                let mut k = 0;
                loop {
                    if k == d {
                        break 'ball;
                    }
                    off[k] += 1;
                    if off[k] > r {
                        off[k] = -r;
                        k += 1;
                    } else {
                        break;
                    }
                }
            }
        }
        let l = covered_set.len() as u64;
        let mut covered: Vec<usize> = covered_set
            .iter()
            .filter_map(|s| field.region.index_of(s))
            .collect();
        covered.sort_unstable();
        let clump_id = clumps.len() as u32;
        for &c in &covered {
            site_clump[c] = Some(clump_id);
        }
        clumps.push(Clump {
            ball_centers: members.clone(),
            covered,
            l,
            sigma_hat,
            censored,
        });
    }
    ClumpDecomposition { clumps, site_clump }
}

/// Run the clump-height recursion over a sequence of slot fields, starting
/// from the zero row. Slot `n`'s row assigns to every covered site the
/// clump height plus the best previous-row value over the clump, and
/// carries uncovered sites over unchanged. Returns one row per slot.
///
/// Feeding the slots most-recent-first yields the backward scheme.
pub fn boolean_rows(fields: &[SlotField], initial: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(fields.len());
    let mut prev: Vec<f64> = match initial {
        Some(row) => row.to_vec(),
        None => vec![0.0; fields.first().map(|f| f.region.len()).unwrap_or(0)],
    };
    for field in fields {
        assert_eq!(field.region.len(), prev.len(), "fields must share a region");
        let decomp = find_clumps(field);
        let mut row = prev.clone();
        for clump in &decomp.clumps {
            let m = clump
                .covered
                .iter()
                .map(|&i| prev[i])
                .fold(0.0f64, f64::max);
            let val = clump.sigma_hat + m;
            for &i in &clump.covered {
                row[i] = val;
            }
        }
        rows.push(row.clone());
        prev = row;
    }
    rows
}

/// One lazily grown clump at the origin.
#[derive(Clone, Debug)]
pub struct OriginClump {
    pub l: u64,
    pub sigma_hat: f64,
    pub member_sites: Vec<Vec<i64>>,
    pub touched_boundary: bool,
}

/// Grow the clump containing the origin, generating site marks on demand.
/// Sites outside the box `|z|_inf <= box_half_width` are treated as the
/// edge of the modeled universe; reaching them sets `touched_boundary`.
/// Requires a bounded radius law.
pub fn sample_origin_clump(
    lambda: f64,
    radius: &RadiusDist,
    sigma: &Dist,
    d: usize,
    box_half_width: i64,
    seed: &SeedSpec,
) -> Result<OriginClump> {
    let r_sup = radius.max_radius().ok_or_else(|| {
        HailError::config("origin-clump sampling needs a bounded radius law")
    })? as i64;
    let mut memo: HashMap<Vec<i64>, (bool, u64, f64)> = HashMap::new();
    let mut marks_of = |z: &[i64]| -> (bool, u64, f64) {
        if let Some(v) = memo.get(z) {
            return *v;
        }
        let mut rng = site_rng(seed, 0, z);
        let m = sample_site_marks(&mut rng, lambda, radius, sigma);
        let v = (m.count > 0, m.r_max, m.sigma_sum);
        memo.insert(z.to_vec(), v);
        v
    };

    let mut touched = false;
    let mut members: Vec<(Vec<i64>, i64)> = Vec::new();
    let mut member_set: HashSet<Vec<i64>> = HashSet::new();
    // seed members: occupied sites whose ball covers the origin
    let mut queue: Vec<(Vec<i64>, i64)> = Vec::new();
    let mut scan_box = |center: &[i64],
                        reach: i64,
                        filter_overlap: Option<i64>,
                        touched: &mut bool,
                        member_set: &mut HashSet<Vec<i64>>,
                        queue: &mut Vec<(Vec<i64>, i64)>,
                        marks_of: &mut dyn FnMut(&[i64]) -> (bool, u64, f64)| {
        let mut off = vec![-reach; center.len()];
        loop {
            let z: Vec<i64> = center.iter().zip(&off).map(|(a, o)| a + o).collect();
            if z.iter().any(|c| c.abs() > box_half_width) {
                *touched = true;
            } else if !member_set.contains(&z) {
                let (occ, r, _) = marks_of(&z);
                if occ {
                    let dist = center
                        .iter()
                        .zip(&z)
                        .map(|(a, b)| (a - b).abs())
                        .max()
                        .unwrap_or(0);
                    let limit = match filter_overlap {
                        // ball must reach the center site itself
                        None => r as i64,
                        // ball must overlap the member's ball
                        Some(rm) => rm + r as i64,
                    };
                    if dist <= limit {
                        member_set.insert(z.clone());
                        queue.push((z, r as i64));
                    }
                }
            }
            let mut k = 0;
            loop {
                if k == center.len() {
                    return;
                }
                off[k] += 1;
                if off[k] > reach {
                    off[k] = -reach;
                    k += 1;
                } else {
                    break;
                }
            }
        }
    };

    let origin = vec![0i64; d];
    scan_box(
        &origin,
        r_sup,
        None,
        &mut touched,
        &mut member_set,
        &mut queue,
        &mut marks_of,
    );
    while let Some((z, r)) = queue.pop() {
        members.push((z.clone(), r));
        scan_box(
            &z,
            r + r_sup,
            Some(r),
            &mut touched,
            &mut member_set,
            &mut queue,
            &mut marks_of,
        );
    }

    // union of balls
    let mut covered: HashSet<Vec<i64>> = HashSet::new();
    let mut sigma_hat = 0.0;
    for (z, r) in &members {
        sigma_hat += marks_of(z).2;
        let mut off = vec![-*r; d];
        'ball: loop {
            covered.insert(z.iter().zip(&off).map(|(a, o)| a + o).collect());
            let mut k = 0;
            loop {
                if k == d {
                    break 'ball;
                }
                off[k] += 1;
                if off[k] > *r {
                    off[k] = -*r;
                    k += 1;
                } else {
                    break;
                }
            }
        }
    }
    Ok(OriginClump {
        l: covered.len() as u64,
        sigma_hat,
        member_sites: members.into_iter().map(|(z, _)| z).collect(),
        touched_boundary: touched,
    })
}

/// Empirical tail statistics of the clump at the origin.
#[derive(Clone, Debug)]
pub struct TailStats {
    pub samples: u64,
    pub censored: u64,
    /// `(k, P(L > k), standard error)` over uncensored samples.
    pub survival: Vec<(u64, f64, f64)>,
    /// Fitted exponential decay rate of the size tail with a 95% CI,
    /// when enough positive mass is available.
    pub decay_rate: Option<(f64, f64, f64)>,
    /// High censoring indicates the subcritical assumption failed.
    pub supercritical: bool,
    pub l_samples: Vec<u64>,
    pub sigma_samples: Vec<f64>,
}

pub fn clump_tail_stats(
    lambda: f64,
    radius: &RadiusDist,
    sigma: &Dist,
    d: usize,
    n_samples: u64,
    box_half_width: i64,
    seed: &SeedSpec,
) -> Result<TailStats> {
    let mut l_samples = Vec::with_capacity(n_samples as usize);
    let mut sigma_samples = Vec::with_capacity(n_samples as usize);
    let mut censored = 0u64;
    for rep in 0..n_samples {
        let c = sample_origin_clump(lambda, radius, sigma, d, box_half_width, &seed.replication(rep as usize))?;
        if c.touched_boundary {
            censored += 1;
            continue;
        }
        l_samples.push(c.l);
        sigma_samples.push(c.sigma_hat);
    }
    let n = l_samples.len() as f64;
    let mut survival = Vec::new();
    if n > 0.0 {
        let lmax = l_samples.iter().copied().max().unwrap_or(0);
        let mut k = 0u64;
        while k <= lmax {
            let above = l_samples.iter().filter(|&&l| l > k).count() as f64;
            let p = above / n;
            let se = (p * (1.0 - p) / n).sqrt();
            survival.push((k, p, se));
            if p == 0.0 {
                break;
            }
            k = if k == 0 { 1 } else { k * 2 };
        }
    }
    let positives: Vec<f64> = l_samples
        .iter()
        .filter(|&&l| l > 0)
        .map(|&l| l as f64)
        .collect();
    let decay_rate = if positives.len() >= 100 {
        crate::stats::fit_exp_tail(&positives, 30)
            .map(|(rate, se)| (rate, rate - 1.96 * se, rate + 1.96 * se))
    } else {
        None
    };
    Ok(TailStats {
        samples: n_samples,
        censored,
        survival,
        decay_rate,
        supercritical: censored as f64 / n_samples as f64 > 0.1,
        l_samples,
        sigma_samples,
    })
}

/// Bracket for the critical intensity, driven by the boundary-touch
/// diagnostic: an intensity passes when the touch probability at the
/// largest region is below 1% and does not grow under region doubling.
#[derive(Clone, Debug)]
pub struct CriticalBracket {
    pub lo: f64,
    /// `None` when no tested intensity failed the diagnostic (no
    /// supercritical phase was found below `max_lambda`).
    pub hi: Option<f64>,
    /// `(lambda, per-size (size, touch probability, se))` evaluations.
    pub table: Vec<(f64, Vec<(i64, f64, f64)>)>,
}

fn touch_probability(
    lambda: f64,
    radius: &RadiusDist,
    sigma: &Dist,
    d: usize,
    size: i64,
    samples: u64,
    seed: &SeedSpec,
) -> Result<(f64, f64)> {
    let mut touched = 0u64;
    for rep in 0..samples {
        let c = sample_origin_clump(lambda, radius, sigma, d, size, &seed.replication(rep as usize))?;
        if c.touched_boundary {
            touched += 1;
        }
    }
    let (p, lo, _hi) = crate::stats::proportion_ci95(touched, samples);
    Ok((p, (p - lo) / 1.96))
}

pub fn estimate_critical_intensity(
    radius: &RadiusDist,
    sigma: &Dist,
    d: usize,
    sizes: &[i64],
    samples: u64,
    max_lambda: f64,
    bisect_iters: usize,
    seed: &SeedSpec,
) -> Result<CriticalBracket> {
    if sizes.len() < 2 {
        return Err(HailError::usage(
            "critical-intensity estimation needs at least two region sizes",
        ));
    }
    let mut table = Vec::new();
    let mut eval = |lambda: f64, table: &mut Vec<(f64, Vec<(i64, f64, f64)>)>| -> Result<bool> {
        let s = seed.child(format!("lambda{lambda:.6}"));
        let mut rows = Vec::new();
        for (k, &size) in sizes.iter().enumerate() {
            let (p, se) = touch_probability(lambda, radius, sigma, d, size, samples, &s.child(format!("size{k}")))?;
            rows.push((size, p, se));
        }
        // pass: smallest at the largest region, and stable (not growing) in size
        let last = rows.last().unwrap();
        let mut pass = last.1 + 2.0 * last.2 < 0.01;
        for w in rows.windows(2) {
            if w[1].1 > w[0].1 + 2.0 * (w[0].2 + w[1].2) {
                pass = false;
            }
        }
        table.push((lambda, rows));
        Ok(pass)
    };

    if eval(max_lambda, &mut table)? {
        return Ok(CriticalBracket {
            lo: max_lambda,
            hi: None,
            table,
        });
    }
    let mut lo = 0.0f64;
    let mut hi = max_lambda;
    for _ in 0..bisect_iters {
        let mid = 0.5 * (lo + hi);
        if eval(mid, &mut table)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CriticalBracket {
        lo,
        hi: Some(hi),
        table,
    })
}

/// Summary of one clump for the resampling construction.
#[derive(Clone, Debug)]
pub struct ClumpStats {
    pub l: u64,
    pub sigma_hat: f64,
    pub covered: Vec<Vec<i64>>,
    pub censored: bool,
}

fn clump_stats_at(field: &SlotField, decomp: &ClumpDecomposition, z: &[i64]) -> ClumpStats {
    match decomp.clump_at(field, z) {
        Some(c) => ClumpStats {
            l: c.l,
            sigma_hat: c.sigma_hat,
            covered: c.covered.iter().map(|&i| field.region.site_at(i)).collect(),
            censored: c.censored,
        },
        None => ClumpStats {
            l: 0,
            sigma_hat: 0.0,
            covered: Vec::new(),
            censored: false,
        },
    }
}

/// Result of the resampling extension.
#[derive(Clone, Debug)]
pub struct ResampleOutcome {
    pub clump_x: ClumpStats,
    /// Clump of `y` in the original field.
    pub clump_y: ClumpStats,
    /// Clump of `y` after resampling every ball coordinate that can touch
    /// the clump of `x`.
    pub clump_y_resampled: ClumpStats,
    /// Number of `(site, radius)` coordinates that were redrawn.
    pub resampled_coords: usize,
    pub underline: SlotField,
}

/// Resampling extension: let `A` be the clump of `x`. Every `(site, radius)`
/// coordinate whose ball can intersect `A` is replaced by an independent
/// fresh copy; the rest of the field is kept. The clump of `y` re-derived in
/// the modified field is then independent of `(A, sigma_hat(A))`, has the
/// law of an ordinary clump, and the union of the original two clumps is
/// contained in the union of the original `x`-clump and the new `y`-clump.
pub fn independent_resample(
    field: &SlotField,
    lambda: f64,
    radius: &RadiusDist,
    sigma: &Dist,
    x: &[i64],
    y: &[i64],
    fresh: &SeedSpec,
) -> Result<ResampleOutcome> {
    let r_sup = radius.max_radius().ok_or_else(|| {
        HailError::config("resampling extension needs a bounded radius law")
    })?;
    let decomp = find_clumps(field);
    let clump_x = clump_stats_at(field, &decomp, x);
    let clump_y = clump_stats_at(field, &decomp, y);
    if clump_x.censored {
        return Err(HailError::usage(
            "clump of x is censored by the region boundary; enlarge the region",
        ));
    }

    let mut underline = field.clone();
    let mut resampled = 0usize;
    if !clump_x.covered.is_empty() {
        let a_set: HashSet<&Vec<i64>> = clump_x.covered.iter().collect();
        // distance from each candidate site to A, over the dilation by r_sup
        let d = field.region.dim();
        let mut affected: HashMap<Vec<i64>, i64> = HashMap::new();
        for a in &clump_x.covered {
            let mut off = vec![-(r_sup as i64); d];
            'dil: loop {
                let z: Vec<i64> = a.iter().zip(&off).map(|(p, o)| p + o).collect();
                let dist = a.iter().zip(&z).map(|(p, q)| (p - q).abs()).max().unwrap();
                affected
                    .entry(z)
                    .and_modify(|m| *m = (*m).min(dist))
                    .or_insert(dist);
                let mut k = 0;
                loop {
                    if k == d {
                        break 'dil;
                    }
                    off[k] += 1;
                    if off[k] > r_sup as i64 {
                        off[k] = -(r_sup as i64);
                        k += 1;
                    } else {
                        break;
                    }
                }
            }
        }
        let _ = a_set;
        for (z, dist) in affected {
            let idx = field.region.index_of(&z).ok_or_else(|| {
                HailError::usage(
                    "hit set leaves the region; enlarge the region around the clump of x",
                )
            })?;
            // keep layers whose ball cannot reach A, redraw the rest
            let mut new_layers: Vec<(u64, f64)> = underline.layers[idx]
                .iter()
                .copied()
                .filter(|(k, _)| (*k as i64) < dist)
                .collect();
            for k in 1..=r_sup {
                let pk = radius.pmf(k);
                if pk <= 0.0 || (k as i64) < dist {
                    continue;
                }
                resampled += 1;
                let mut rng = site_rng(fresh, k as i64, &z);
                let marks = sample_site_marks(&mut rng, lambda * pk, &RadiusDist::Fixed(k), sigma);
                if marks.count > 0 {
                    new_layers.push((k, marks.sigma_sum));
                }
            }
            underline.layers[idx] = new_layers;
            underline.recompose_site(idx);
        }
    }
    let decomp_u = find_clumps(&underline);
    let clump_y_resampled = clump_stats_at(&underline, &decomp_u, y);
    Ok(ResampleOutcome {
        clump_x,
        clump_y,
        clump_y_resampled,
        resampled_coords: resampled,
        underline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_with_balls(half: i64, balls: &[(Vec<i64>, u64, f64)]) -> SlotField {
        let d = balls.first().map(|(z, _, _)| z.len()).unwrap_or(2);
        let mut f = SlotField::empty(LatticeBox::centered(d, half));
        for (z, r, s) in balls {
            let idx = f.region.index_of(z).unwrap();
            f.set_site(
                idx,
                SiteMarks {
                    count: 1,
                    r_max: *r,
                    sigma_sum: *s,
                    layers: vec![(*r, *s)],
                },
            );
        }
        f
    }

    #[test]
    fn single_ball_clump() {
        let f = field_with_balls(5, &[(vec![0, 0], 1, 2.0)]);
        let d = find_clumps(&f);
        assert_eq!(d.clumps.len(), 1);
        assert_eq!(d.clumps[0].l, 9);
        assert_eq!(d.clumps[0].sigma_hat, 2.0);
        assert!(!d.clumps[0].censored);
    }

    #[test]
    fn overlap_and_separation() {
        // distance 2 with radii 1: balls touch -> one clump, L = 15
        let f = field_with_balls(6, &[(vec![0, 0], 1, 1.0), (vec![2, 0], 1, 1.0)]);
        let d = find_clumps(&f);
        assert_eq!(d.clumps.len(), 1);
        assert_eq!(d.clumps[0].l, 15);
        // distance 5: two clumps
        let f = field_with_balls(8, &[(vec![0, 0], 1, 1.0), (vec![5, 0], 1, 1.0)]);
        let d = find_clumps(&f);
        assert_eq!(d.clumps.len(), 2);
    }

    #[test]
    fn empty_and_zero_intensity() {
        let region = LatticeBox::centered(2, 10);
        let f = SlotField::sample(
            region,
            0.0,
            &RadiusDist::Fixed(1),
            &Dist::Fixed(1.0),
            &SeedSpec::new(4),
        )
        .unwrap();
        assert!(f.occupied_sites().is_empty());
        let d = find_clumps(&f);
        assert!(d.clumps.is_empty());
    }

    #[test]
    fn occupancy_probability_matches() {
        let lambda = 0.2;
        let region = LatticeBox::centered(2, 40); // 81^2 = 6561 sites
        let mut occ = 0u64;
        let mut total = 0u64;
        for rep in 0..160 {
            let f = SlotField::sample(
                region.clone(),
                lambda,
                &RadiusDist::Fixed(1),
                &Dist::Fixed(1.0),
                &SeedSpec::new(900).replication(rep),
            )
            .unwrap();
            occ += f.occupied_sites().len() as u64;
            total += region.len() as u64;
        }
        let p_hat = occ as f64 / total as f64;
        let p = occupancy_probability(lambda);
        let se = (p * (1.0 - p) / total as f64).sqrt();
        assert!((p_hat - p).abs() < 3.0 * se, "p_hat={p_hat} p={p}");
    }

    #[test]
    fn rows_carry_and_stack() {
        let region = LatticeBox::centered(2, 4);
        let mut slot1 = SlotField::empty(region.clone());
        let idx = slot1.region.index_of(&[0, 0]).unwrap();
        slot1.set_site(
            idx,
            SiteMarks {
                count: 1,
                r_max: 1,
                sigma_sum: 2.0,
                layers: vec![(1, 2.0)],
            },
        );
        let empty = SlotField::empty(region.clone());
        let rows = boolean_rows(&[slot1, empty.clone(), empty], None);
        for n in 0..3 {
            let v = rows[n][region.index_of(&[1, 1]).unwrap()];
            assert_eq!(v, 2.0, "slot {n}");
            assert_eq!(rows[n][region.index_of(&[3, 3]).unwrap()], 0.0);
        }
    }

    #[test]
    fn lazy_origin_clump_matches_eager_field() {
        // same seed: lazy growth and eager region sampling share site streams
        let seed = SeedSpec::new(321);
        let lambda = intensity_for_occupancy(0.15);
        let radius = RadiusDist::Fixed(1);
        let sigma = Dist::Exponential { mean: 1.0 };
        for rep in 0..50 {
            let s = seed.replication(rep);
            let field = SlotField::sample(
                LatticeBox::centered(2, 12),
                lambda,
                &radius,
                &sigma,
                &s,
            )
            .unwrap();
            let decomp = find_clumps(&field);
            let lazy = sample_origin_clump(lambda, &radius, &sigma, 2, 12, &s).unwrap();
            let eager = clump_stats_at(&field, &decomp, &[0, 0]);
            if lazy.touched_boundary || eager.censored {
                continue;
            }
            assert_eq!(lazy.l, eager.l, "rep {rep}");
            assert!((lazy.sigma_hat - eager.sigma_hat).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_empty_clump_changes_nothing() {
        let f = field_with_balls(6, &[(vec![4, 4], 1, 1.0)]);
        let out = independent_resample(
            &f,
            0.05,
            &RadiusDist::Fixed(1),
            &Dist::Fixed(1.0),
            &[0, 0],
            &[4, 4],
            &SeedSpec::new(5),
        )
        .unwrap();
        assert_eq!(out.clump_x.l, 0);
        assert_eq!(out.resampled_coords, 0);
        assert_eq!(out.clump_y_resampled.l, out.clump_y.l);
    }

    #[test]
    fn minimal_clump_size() {
        // with radius >= 1, a nonempty clump covers at least 3^d sites
        let lambda = intensity_for_occupancy(0.2);
        for rep in 0..200 {
            let c = sample_origin_clump(
                lambda,
                &RadiusDist::Fixed(1),
                &Dist::Fixed(1.0),
                2,
                20,
                &SeedSpec::new(77).replication(rep),
            )
            .unwrap();
            if c.l > 0 {
                assert!(c.l >= 9, "rep {rep}: {}", c.l);
            }
        }
    }

    #[test]
    fn touch_diagnostic_monotone_in_lambda() {
        // shared site streams couple the fields across intensities
        let radius = RadiusDist::Fixed(1);
        let sigma = Dist::Fixed(1.0);
        for rep in 0..300 {
            let seed = SeedSpec::new(555).replication(rep);
            let small = sample_origin_clump(0.05, &radius, &sigma, 2, 8, &seed).unwrap();
            let large = sample_origin_clump(0.25, &radius, &sigma, 2, 8, &seed).unwrap();
            if small.touched_boundary {
                assert!(large.touched_boundary, "rep {rep}");
            }
            assert!(small.l <= large.l || large.touched_boundary, "rep {rep}");
        }
    }
}
