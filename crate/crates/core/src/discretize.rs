//! Reduction chain from the continuum model to the boolean model.
//!
//! Stage by stage: snap centers to `Z^d` and footprints to enclosing
//! lattice cubes (lattice stage), move arrival times back to slot starts
//! (slotted stage), aggregate each occupied site-slot cell into a single
//! cube of maximal half-side carrying the summed height (aggregated
//! stage), and finally merge the overlapping balls of one slot into clumps
//! (boolean stage). Each stage dominates the previous one pointwise on a
//! coupled sample, which `chain_check` verifies at arbitrary query points.

use crate::clumps::{boolean_rows, LatticeBox, SiteMarks, SlotField};
use crate::error::Result;
use crate::precedence::{build_dag, growth_heights, height_at};
use crate::rain::{Arrival, Shape, WindowBox};
use crate::rng::SeedSpec;
use rand::Rng;
use std::collections::HashMap;

/// A customer snapped to the lattice: center floored componentwise, the
/// footprint replaced by the cube of half-side `floor(diameter) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeArrival {
    pub z: Vec<i64>,
    /// Slot start `floor(t)`; the arrival instant in the slotted stage.
    pub slot: i64,
    pub half_side: u64,
    pub sigma: f64,
    /// Original continuous arrival time; orders arrivals within a slot.
    pub tie_rank: f64,
}

/// Per-cell aggregate of one `(site, slot)` group.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedCell {
    pub z: Vec<i64>,
    pub slot: i64,
    /// Maximal half-side among the cell's arrivals.
    pub r_max: u64,
    /// Summed height of the cell's arrivals.
    pub sigma_sum: f64,
    pub count: u32,
}

/// Lattice stage: snap each arrival. The enclosing cube always contains
/// the lattice image of the footprint; it contains the footprint itself as
/// a subset of `R^d` whenever the diameter is zero or at least one.
pub fn to_model2(arrivals: &[Arrival]) -> Vec<LatticeArrival> {
    arrivals
        .iter()
        .map(|a| {
            let d = a.x.len();
            LatticeArrival {
                z: a.x.iter().map(|v| v.floor() as i64).collect(),
                slot: a.t.floor() as i64,
                half_side: a.shape.diameter(d).floor() as u64 + 1,
                sigma: a.sigma,
                tie_rank: a.t,
            }
        })
        .collect()
}

/// Slotted stage: all arrivals of a slot arrive at the slot start, ties
/// resolved by the original continuous order. Snapping times backward can
/// only raise the heights, so this stage dominates the lattice stage.
pub fn to_model3(lattice: &[LatticeArrival]) -> Vec<LatticeArrival> {
    let mut out = lattice.to_vec();
    out.sort_by(|a, b| (a.slot, a.tie_rank).partial_cmp(&(b.slot, b.tie_rank)).unwrap());
    out
}

/// Aggregated stage: one cell per occupied `(site, slot)`.
pub fn to_model4(slotted: &[LatticeArrival]) -> Vec<AggregatedCell> {
    let mut cells: HashMap<(Vec<i64>, i64), AggregatedCell> = HashMap::new();
    for a in slotted {
        let cell = cells
            .entry((a.z.clone(), a.slot))
            .or_insert_with(|| AggregatedCell {
                z: a.z.clone(),
                slot: a.slot,
                r_max: 0,
                sigma_sum: 0.0,
                count: 0,
            });
        cell.r_max = cell.r_max.max(a.half_side);
        cell.sigma_sum += a.sigma;
        cell.count += 1;
    }
    let mut out: Vec<AggregatedCell> = cells.into_values().collect();
    out.sort_by(|a, b| (a.slot, a.z.clone()).cmp(&(b.slot, b.z.clone())));
    out
}

/// Aggregated stage as an arrival system: every slotted arrival keeps its
/// position in the slot order but takes its cell's maximal cube. Heights
/// then telescope within a cell, so the system carries each cell's summed
/// height on the widened footprint while still dominating the slotted
/// stage arrival by arrival.
pub fn expand_aggregates(slotted: &[LatticeArrival]) -> Vec<LatticeArrival> {
    let cells = to_model4(slotted);
    let r_of: HashMap<(Vec<i64>, i64), u64> = cells
        .into_iter()
        .map(|c| ((c.z, c.slot), c.r_max))
        .collect();
    slotted
        .iter()
        .map(|a| {
            let mut b = a.clone();
            b.half_side = r_of[&(a.z.clone(), a.slot)];
            b
        })
        .collect()
}

/// How lattice arrivals are timed when fed to the precedence engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatticeTiming {
    /// Original continuous times (lattice stage).
    Continuous,
    /// Slot starts (slotted and aggregated stages).
    Slotted,
}

/// View lattice arrivals as engine arrivals (cubes at integer centers).
pub fn lattice_to_arrivals(lattice: &[LatticeArrival], timing: LatticeTiming) -> Vec<Arrival> {
    let mut out: Vec<Arrival> = lattice
        .iter()
        .map(|a| Arrival {
            id: 0,
            t: match timing {
                LatticeTiming::Continuous => a.tie_rank,
                LatticeTiming::Slotted => a.slot as f64,
            },
            x: a.z.iter().map(|&c| c as f64).collect(),
            shape: Shape::Cube {
                half_side: a.half_side as f64,
            },
            sigma: a.sigma,
        })
        .collect();
    // stable: preserves within-slot tie order
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    for (i, a) in out.iter_mut().enumerate() {
        a.id = i as u64;
    }
    out
}

/// Does the original footprint sit inside its lattice cube as a subset of
/// `R^d`? Guaranteed for diameters in `{0} U [1, inf)`; sub-unit diameters
/// near a cell boundary can poke out even though the lattice image is
/// still enclosed.
pub fn footprint_contained(arrival: &Arrival, lattice: &LatticeArrival) -> bool {
    let d = arrival.x.len();
    (0..d).all(|i| {
        let ext = arrival.shape.extent_on_axis(i);
        let lo = arrival.x[i] - ext;
        let hi = arrival.x[i] + ext;
        let h = lattice.half_side as f64;
        lo >= lattice.z[i] as f64 - h && hi <= lattice.z[i] as f64 + h
    })
}

/// Boolean-stage slot fields built from the aggregated cells of a sample.
/// Slot `n` (1-based) holds the arrivals with slot start `n - 1`. The
/// region is the bounding box of all ball sites united with the lattice
/// image of `window`, so no clump is ever censored.
pub fn slot_fields_from_cells(
    cells: &[AggregatedCell],
    window: &WindowBox,
    n_slots: usize,
    first_slot_start: i64,
) -> Vec<SlotField> {
    let d = window.dim();
    let mut lo: Vec<i64> = window.lo.iter().map(|v| v.floor() as i64).collect();
    let mut hi: Vec<i64> = window.hi.iter().map(|v| v.floor() as i64).collect();
    for c in cells {
        for i in 0..d {
            lo[i] = lo[i].min(c.z[i] - c.r_max as i64);
            hi[i] = hi[i].max(c.z[i] + c.r_max as i64);
        }
    }
    let region = LatticeBox::new(lo, hi);
    let mut fields: Vec<SlotField> = (0..n_slots)
        .map(|_| SlotField::empty(region.clone()))
        .collect();
    for c in cells {
        let slot_index = (c.slot - first_slot_start) as usize;
        if slot_index >= n_slots {
            continue;
        }
        let idx = region.index_of(&c.z).expect("region covers all cells");
        fields[slot_index].set_site(
            idx,
            SiteMarks {
                count: c.count,
                r_max: c.r_max,
                sigma_sum: c.sigma_sum,
                layers: vec![(c.r_max, c.sigma_sum)],
            },
        );
    }
    fields
}

/// Heights of the five stages at one query point.
#[derive(Clone, Debug)]
pub struct ChainHeights {
    pub point: Vec<f64>,
    pub t: f64,
    /// `[continuum, lattice, slotted, aggregated, boolean]`
    pub heights: [f64; 5],
}

impl ChainHeights {
    pub fn ordered(&self) -> bool {
        self.heights.windows(2).all(|w| w[0] <= w[1] + 1e-12)
    }
}

#[derive(Clone, Debug)]
pub struct ChainReport {
    pub queries: usize,
    pub violations: Vec<ChainHeights>,
    /// Minimum slack of each of the four inequalities over all queries.
    pub min_margins: [f64; 4],
}

/// Evaluate the full domination chain on one sample at the given query
/// points (continuum positions with fractional query times). Discrete
/// stages are read at the lattice image of the position and at the slot
/// index `ceil(t)`.
pub fn chain_check(
    arrivals: &[Arrival],
    window: &WindowBox,
    horizon: f64,
    queries: &[(Vec<f64>, f64)],
) -> Result<ChainReport> {
    let dag1 = build_dag(arrivals)?;
    let g1 = growth_heights(&dag1, arrivals);

    let lattice = to_model2(arrivals);
    let m2 = lattice_to_arrivals(&lattice, LatticeTiming::Continuous);
    let dag2 = build_dag(&m2)?;
    let g2 = growth_heights(&dag2, &m2);

    let slotted = to_model3(&lattice);
    let m3 = lattice_to_arrivals(&slotted, LatticeTiming::Slotted);
    let dag3 = build_dag(&m3)?;
    let g3 = growth_heights(&dag3, &m3);

    let expanded = expand_aggregates(&slotted);
    let m4 = lattice_to_arrivals(&expanded, LatticeTiming::Slotted);
    let dag4 = build_dag(&m4)?;
    let g4 = growth_heights(&dag4, &m4);

    let n_slots = horizon.ceil() as usize;
    let cells = to_model4(&slotted);
    let fields = slot_fields_from_cells(&cells, window, n_slots, 0);
    let rows = boolean_rows(&fields, None);
    let region = fields
        .first()
        .map(|f| f.region.clone())
        .unwrap_or_else(|| LatticeBox::centered(window.dim(), 1));

    let mut report = ChainReport {
        queries: queries.len(),
        violations: Vec::new(),
        min_margins: [f64::INFINITY; 4],
    };
    for (x, t) in queries {
        debug_assert!(t.fract() != 0.0, "query times must be fractional");
        let z: Vec<i64> = x.iter().map(|v| v.floor() as i64).collect();
        let zf: Vec<f64> = z.iter().map(|&c| c as f64).collect();
        let h1 = height_at(&dag1, arrivals, &g1, x, *t);
        let h2 = height_at(&dag2, &m2, &g2, &zf, *t);
        // slotted stages: arrivals with slot start strictly before ceil(t)
        let slot_cut = (t.ceil() - 1.0).max(-1.0);
        let h3 = height_at(&dag3, &m3, &g3, &zf, slot_cut);
        let h4 = height_at(&dag4, &m4, &g4, &zf, slot_cut);
        let slot_index = (t.ceil() as usize).min(rows.len());
        let h5 = if slot_index == 0 {
            0.0
        } else {
            region
                .index_of(&z)
                .map(|i| rows[slot_index - 1][i])
                .unwrap_or(0.0)
        };
        let heights = ChainHeights {
            point: x.clone(),
            t: *t,
            heights: [h1, h2, h3, h4, h5],
        };
        for k in 0..4 {
            let margin = heights.heights[k + 1] - heights.heights[k];
            report.min_margins[k] = report.min_margins[k].min(margin);
        }
        if !heights.ordered() {
            report.violations.push(heights);
        }
    }
    Ok(report)
}

/// Standard query set for chain verification: every lattice point of the
/// window plus a number of uniform continuum points per unit cell, each
/// paired with fractional times spread over the horizon.
pub fn chain_query_points(
    window: &WindowBox,
    horizon: f64,
    per_cell: usize,
    seed: &SeedSpec,
) -> Vec<(Vec<f64>, f64)> {
    let d = window.dim();
    let mut rng = seed.child("queries").rng();
    let times = [0.37 * horizon, 0.71 * horizon, 0.998 * horizon];
    let mut points: Vec<Vec<f64>> = Vec::new();
    // lattice points
    let lo: Vec<i64> = window.lo.iter().map(|v| v.ceil() as i64).collect();
    let hi: Vec<i64> = window.hi.iter().map(|v| v.floor() as i64).collect();
    let mut z = lo.clone();
    'lattice: loop {
        points.push(z.iter().map(|&c| c as f64).collect());
        let mut k = 0;
        loop {
            if k == d {
                break 'lattice;
            }
            z[k] += 1;
            if z[k] > hi[k] {
                z[k] = lo[k];
                k += 1;
            } else {
                break;
            }
        }
    }
    // random continuum points, per_cell per unit volume
    let cells = window.volume().round() as usize;
    for _ in 0..cells * per_cell {
        points.push(
            (0..d)
                .map(|i| rng.gen_range(window.lo[i]..window.hi[i]))
                .collect(),
        );
    }
    let mut queries = Vec::with_capacity(points.len() * times.len());
    for p in points {
        for &t in &times {
            let t = if t.fract() == 0.0 { t + 0.0001 } else { t };
            queries.push((p.clone(), t));
        }
    }
    queries
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Dist;
    use crate::rain::{sample_rain, RainConfig, ShapeDist, DEFAULT_MAX_ARRIVALS};

    fn ball(t: f64, x: Vec<f64>, r: f64, sigma: f64) -> Arrival {
        Arrival {
            id: 0,
            t,
            x,
            shape: Shape::Ball { radius: r },
            sigma,
        }
    }

    #[test]
    fn lattice_snap_formula() {
        // diameter 1.4 at (1.7, -0.3): center (1, -1), half side 2
        let a = ball(2.73, vec![1.7, -0.3], 0.7, 1.0);
        let l = &to_model2(&[a])[0];
        assert_eq!(l.z, vec![1, -1]);
        assert_eq!(l.half_side, 2);
        assert_eq!(l.slot, 2);
        // point footprint: half side 1
        let a = ball(0.1, vec![0.5, 0.5], 0.0, 1.0);
        assert_eq!(to_model2(&[a])[0].half_side, 1);
    }

    #[test]
    fn containment_for_unit_or_larger_diameters() {
        let cfg = RainConfig {
            d: 2,
            lambda: 2.0,
            window: WindowBox::new(vec![0.0, 0.0], vec![6.0, 6.0]),
            pad: 2.0,
            t0: 0.0,
            t1: 20.0,
            shape_dist: ShapeDist::Ball {
                radius: Dist::Uniform { lo: 0.5, hi: 1.8 },
            },
            sigma_dist: Dist::Exponential { mean: 1.0 },
            max_arrivals: DEFAULT_MAX_ARRIVALS,
        };
        let arrivals = sample_rain(&cfg, &SeedSpec::new(8)).unwrap();
        assert!(arrivals.len() > 900);
        let lattice = to_model2(&arrivals);
        for (a, l) in arrivals.iter().zip(&lattice) {
            assert!(footprint_contained(a, l), "{a:?} vs {l:?}");
        }
    }

    #[test]
    fn slot_counts_are_poisson() {
        // unit cell, lambda = 0.5 per slot: P(cell occupied) = 1 - exp(-0.5)
        let lambda = 0.5;
        let cfg = RainConfig {
            d: 2,
            lambda,
            window: WindowBox::new(vec![0.0, 0.0], vec![1.0, 1.0]),
            pad: 0.0,
            t0: 0.0,
            t1: 100_000.0,
            shape_dist: ShapeDist::Ball {
                radius: Dist::Fixed(0.4),
            },
            sigma_dist: Dist::Fixed(1.0),
            max_arrivals: DEFAULT_MAX_ARRIVALS,
        };
        let arrivals = sample_rain(&cfg, &SeedSpec::new(17)).unwrap();
        let slotted = to_model3(&to_model2(&arrivals));
        let mut counts: HashMap<i64, u64> = HashMap::new();
        for a in &slotted {
            *counts.entry(a.slot).or_insert(0) += 1;
        }
        let n_slots = 100_000u64;
        let occupied = counts.len() as f64;
        let p = 1.0 - (-lambda_of(&cfg)).exp();
        let se = (p * (1.0 - p) / n_slots as f64).sqrt();
        let p_hat = occupied / n_slots as f64;
        assert!((p_hat - p).abs() < 3.0 * se, "p_hat={p_hat} p={p}");

        fn lambda_of(cfg: &RainConfig) -> f64 {
            cfg.lambda * cfg.window.volume()
        }
        // within-slot tie order is the continuous order
        for w in slotted.windows(2) {
            if w[0].slot == w[1].slot {
                assert!(w[0].tie_rank <= w[1].tie_rank);
            }
        }
    }

    #[test]
    fn aggregation_matches_group_by() {
        let arrivals = vec![
            ball(0.2, vec![0.1, 0.2], 0.6, 2.0),
            ball(0.7, vec![0.4, 0.3], 1.6, 5.0),
            ball(1.4, vec![0.2, 0.9], 0.6, 1.0),
        ];
        let cells = to_model4(&to_model3(&to_model2(&arrivals)));
        assert_eq!(cells.len(), 2);
        let c0 = &cells[0];
        assert_eq!(c0.slot, 0);
        assert_eq!(c0.count, 2);
        assert_eq!(c0.r_max, 4); // floor(3.2)+1
        assert_eq!(c0.sigma_sum, 7.0);
        let c1 = &cells[1];
        assert_eq!(c1.count, 1);
        assert_eq!(c1.sigma_sum, 1.0);
    }

    #[test]
    fn aggregation_preserves_total_height() {
        let cfg = RainConfig {
            d: 2,
            lambda: 1.0,
            window: WindowBox::new(vec![0.0, 0.0], vec![4.0, 4.0]),
            pad: 1.0,
            t0: 0.0,
            t1: 10.0,
            shape_dist: ShapeDist::Cube {
                half_side: Dist::Uniform { lo: 0.5, hi: 1.0 },
            },
            sigma_dist: Dist::Exponential { mean: 1.0 },
            max_arrivals: DEFAULT_MAX_ARRIVALS,
        };
        let arrivals = sample_rain(&cfg, &SeedSpec::new(19)).unwrap();
        let slotted = to_model3(&to_model2(&arrivals));
        let cells = to_model4(&slotted);
        let total_cells: f64 = cells.iter().map(|c| c.sigma_sum).sum();
        let total: f64 = arrivals.iter().map(|a| a.sigma).sum();
        assert!((total - total_cells).abs() < 1e-9);
    }

    #[test]
    fn retiming_only_advances() {
        let arrivals = vec![ball(2.73, vec![0.0, 0.0], 0.5, 1.0)];
        let slotted = to_model3(&to_model2(&arrivals));
        assert_eq!(slotted[0].slot, 2);
        assert!(slotted[0].slot as f64 <= slotted[0].tie_rank);
    }

    #[test]
    fn single_arrival_chain_equalities() {
        let arrivals = vec![ball(0.4, vec![2.3, 2.6], 0.9, 3.0)];
        let window = WindowBox::new(vec![0.0, 0.0], vec![5.0, 5.0]);
        let queries = chain_query_points(&window, 2.0, 2, &SeedSpec::new(3));
        let report = chain_check(&arrivals, &window, 2.0, &queries).unwrap();
        assert!(report.violations.is_empty());
        // lattice through boolean stages agree for one customer at its own site
        let z = vec![2.0, 2.0];
        let t = 1.5;
        let lattice = to_model2(&arrivals);
        let m2 = lattice_to_arrivals(&lattice, LatticeTiming::Continuous);
        let dag2 = build_dag(&m2).unwrap();
        let g2 = growth_heights(&dag2, &m2);
        let h2 = height_at(&dag2, &m2, &g2, &z, t);
        assert_eq!(h2, 3.0);
    }

    #[test]
    fn chain_holds_on_random_sample() {
        let cfg = RainConfig {
            d: 2,
            lambda: 0.15,
            window: WindowBox::new(vec![0.0, 0.0], vec![6.0, 6.0]),
            pad: 1.5,
            t0: 0.0,
            t1: 10.0,
            shape_dist: ShapeDist::Ball {
                radius: Dist::Uniform { lo: 0.5, hi: 1.2 },
            },
            sigma_dist: Dist::Exponential { mean: 1.0 },
            max_arrivals: DEFAULT_MAX_ARRIVALS,
        };
        for rep in 0..5 {
            let arrivals = sample_rain(&cfg, &SeedSpec::new(100).replication(rep)).unwrap();
            let queries =
                chain_query_points(&cfg.window, 10.0, 3, &SeedSpec::new(200).replication(rep));
            let report = chain_check(&arrivals, &cfg.window, 10.0, &queries).unwrap();
            assert!(
                report.violations.is_empty(),
                "rep {rep}: {:?}",
                report.violations.first()
            );
        }
    }
}
