//! Problem instances and their generation.
//!
//! Instances live on the unit square with the depot at node 0. Travel time
//! equals Euclidean distance (unit vehicle speed), so time windows and the
//! duration limit share units with tour length. Attributes of inactive
//! constraint families hold fixed defaults: zero backhaul demands, an
//! infinite duration limit, and `[0, inf)` time windows with zero service
//! time.

use crate::error::{CoreError, Result};
use crate::rng::StreamRng;
use crate::vrp::variant::VariantId;

/// Knobs of the instance sampler. Defaults follow the in-distribution
/// evaluation configuration: service times from `[0.15, 0.18]`, window
/// lengths from `[0.18, 0.20]`, duration-limit cap 2.8 (≈ 2√2), backhaul
/// probability 0.2. The depot closing time is not fixed anywhere
/// authoritative; 3.0 comfortably exceeds any single round trip plus
/// service on the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// `[I1, I2, I3]`: service duration ~ U(I1, I2), window length ~ U(I2, I3).
    pub tw_intervals: [f64; 3],
    /// Upper bound of the duration-limit sample.
    pub dur_limit_max: f64,
    /// Probability that a customer is a backhaul (B variants only).
    pub backhaul_prob: f64,
    /// Probability that an O-variant instance is actually open.
    pub open_prob: f64,
    /// Depot closing time `w0_end` (TW variants only).
    pub depot_end_time: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            tw_intervals: [0.15, 0.18, 0.20],
            dur_limit_max: 2.8,
            backhaul_prob: 0.2,
            open_prob: 1.0,
            depot_end_time: 3.0,
        }
    }
}

/// Static data of one VRP instance. Node 0 is the depot.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub variant: VariantId,
    pub n: usize,
    pub seed: u64,
    /// `[x, y]` per node, inside the unit square.
    pub coords: Vec<[f64; 2]>,
    /// Nonnegative delivery demands; index 0 is 0.
    pub linehaul: Vec<f64>,
    /// Nonpositive pickup demands; index 0 is 0. All zero unless B is active.
    pub backhaul: Vec<f64>,
    pub capacity: f64,
    pub open: bool,
    /// Per-subtour length bound; `f64::INFINITY` when L is inactive.
    pub dur_limit: f64,
    pub tw_beg: Vec<f64>,
    /// `tw_end[0]` is the system end time; `f64::INFINITY` when TW is inactive.
    pub tw_end: Vec<f64>,
    pub tw_dur: Vec<f64>,
}

/// Vehicle capacity as a function of instance size.
pub fn capacity_for(n: usize) -> f64 {
    if n > 1000 {
        30.0 + (1000.0 / 5.0 + (n as f64 - 1000.0) / 33.3).floor()
    } else if n > 20 {
        30.0 + (n as f64 / 5.0).floor()
    } else {
        30.0
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

impl ProblemInstance {
    pub fn node_count(&self) -> usize {
        self.n + 1
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        dist(self.coords[i], self.coords[j])
    }

    pub fn max_depot_dist(&self) -> f64 {
        (1..=self.n)
            .map(|i| self.dist(0, i))
            .fold(0.0, f64::max)
    }

    pub fn is_backhaul_customer(&self, j: usize) -> bool {
        self.backhaul[j] < 0.0
    }

    /// Structural invariants shared by generated and hand-built instances.
    pub fn validate(&self) -> Result<()> {
        let nodes = self.node_count();
        let arrays = [
            ("coords", self.coords.len()),
            ("linehaul", self.linehaul.len()),
            ("backhaul", self.backhaul.len()),
            ("tw_beg", self.tw_beg.len()),
            ("tw_end", self.tw_end.len()),
            ("tw_dur", self.tw_dur.len()),
        ];
        for (name, len) in arrays {
            if len != nodes {
                return Err(CoreError::InvalidInstance(format!(
                    "{name} has {len} entries, expected {nodes}"
                )));
            }
        }
        for (i, c) in self.coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]) {
                return Err(CoreError::InvalidInstance(format!(
                    "coords[{i}] outside the unit square"
                )));
            }
        }
        if self.capacity <= 0.0 {
            return Err(CoreError::InvalidInstance("nonpositive capacity".into()));
        }
        if self.linehaul[0] != 0.0 || self.backhaul[0] != 0.0 {
            return Err(CoreError::InvalidInstance("depot has demand".into()));
        }
        for j in 1..=self.n {
            if self.linehaul[j] < 0.0 || self.backhaul[j] > 0.0 {
                return Err(CoreError::InvalidInstance(format!(
                    "demand signs wrong at customer {j}"
                )));
            }
            if self.linehaul[j] * self.backhaul[j] != 0.0 {
                return Err(CoreError::InvalidInstance(format!(
                    "customer {j} is both linehaul and backhaul"
                )));
            }
        }
        if !self.variant.backhaul && self.backhaul.iter().any(|q| *q != 0.0) {
            return Err(CoreError::InvalidInstance(
                "backhaul demands on a no-B variant".into(),
            ));
        }
        if !self.variant.duration_limit && self.dur_limit.is_finite() {
            return Err(CoreError::InvalidInstance(
                "finite duration limit on a no-L variant".into(),
            ));
        }
        if !self.variant.time_window {
            let inert = self.tw_beg.iter().all(|v| *v == 0.0)
                && self.tw_end.iter().all(|v| v.is_infinite())
                && self.tw_dur.iter().all(|v| *v == 0.0);
            if !inert {
                return Err(CoreError::InvalidInstance(
                    "time-window attributes on a no-TW variant".into(),
                ));
            }
        }
        if self.tw_beg[0] != 0.0 || self.tw_dur[0] != 0.0 {
            return Err(CoreError::InvalidInstance("depot window malformed".into()));
        }
        if self.open && !self.variant.open {
            return Err(CoreError::InvalidInstance(
                "open flag set on a no-O variant".into(),
            ));
        }
        Ok(())
    }
}

/// Samples one instance. Pure in `(seed, n, variant, cfg)`.
///
/// The draw order is fixed and identical for every variant — depot and
/// customer coordinates, linehaul magnitudes, backhaul magnitudes, backhaul
/// flags, per-customer `(service, window length, position)` triples, the
/// duration limit, then the open flag — with inactive attributes overwritten
/// by their defaults afterwards. Instances of different variants therefore
/// share coordinates and demands for the same `(seed, n)`.
pub fn generate_instance(
    n: usize,
    variant: VariantId,
    seed: u64,
    cfg: &GenConfig,
) -> Result<ProblemInstance> {
    if n == 0 {
        return Err(CoreError::Generation("need at least one customer".into()));
    }
    let [i1, i2, i3] = cfg.tw_intervals;
    if !(0.0 < i1 && i1 <= i2 && i2 <= i3) {
        return Err(CoreError::Generation(format!(
            "time-window intervals must satisfy 0 < I1 <= I2 <= I3, got [{i1}, {i2}, {i3}]"
        )));
    }
    let mut rng = StreamRng::new(seed, 0);

    let coords: Vec<[f64; 2]> = (0..=n)
        .map(|_| {
            let x = rng.uniform();
            let y = rng.uniform();
            [x, y]
        })
        .collect();

    let mut linehaul = vec![0.0];
    linehaul.extend((1..=n).map(|_| rng.int_in(1, 9) as f64));
    let mut backhaul_mag = vec![0.0];
    backhaul_mag.extend((1..=n).map(|_| rng.int_in(1, 9) as f64));
    let bh_flags: Vec<bool> = (1..=n).map(|_| rng.bernoulli(cfg.backhaul_prob)).collect();

    let max_depot = (1..=n)
        .map(|i| dist(coords[0], coords[i]))
        .fold(0.0, f64::max);

    let mut tw_beg = vec![0.0; n + 1];
    let mut tw_end = vec![0.0; n + 1];
    let mut tw_dur = vec![0.0; n + 1];
    tw_end[0] = cfg.depot_end_time;
    for j in 1..=n {
        let service = rng.uniform_in(i1, i2);
        let window_len = rng.uniform_in(i2, i3);
        let u = rng.uniform();
        let d = dist(coords[0], coords[j]);
        let beg = if d > 0.0 {
            let upper = (cfg.depot_end_time - service - window_len) / d - 1.0;
            (1.0 + (upper - 1.0) * u) * d
        } else {
            0.0
        };
        tw_beg[j] = beg;
        tw_end[j] = beg + window_len;
        tw_dur[j] = service;
    }

    let dur_limit_draw = if cfg.dur_limit_max > 2.0 * max_depot {
        rng.uniform_in(2.0 * max_depot, cfg.dur_limit_max)
    } else {
        // Draw is consumed below only on the active path; flag the empty
        // interval there so non-L variants of the same seed still generate.
        f64::NAN
    };
    let open_draw = rng.bernoulli(cfg.open_prob);

    let backhaul: Vec<f64> = if variant.backhaul {
        (0..=n)
            .map(|j| {
                if j >= 1 && bh_flags[j - 1] {
                    -backhaul_mag[j]
                } else {
                    0.0
                }
            })
            .collect()
    } else {
        vec![0.0; n + 1]
    };
    let linehaul: Vec<f64> = linehaul
        .iter()
        .enumerate()
        .map(|(j, q)| {
            if variant.backhaul && j >= 1 && bh_flags[j - 1] {
                0.0
            } else {
                *q
            }
        })
        .collect();

    let dur_limit = if variant.duration_limit {
        if dur_limit_draw.is_nan() {
            return Err(CoreError::Generation(format!(
                "duration-limit interval is empty: l_max {} <= 2 * max depot distance {}",
                cfg.dur_limit_max,
                2.0 * max_depot
            )));
        }
        dur_limit_draw
    } else {
        f64::INFINITY
    };

    if !variant.time_window {
        tw_beg.iter_mut().for_each(|v| *v = 0.0);
        tw_end.iter_mut().for_each(|v| *v = f64::INFINITY);
        tw_dur.iter_mut().for_each(|v| *v = 0.0);
    }

    let inst = ProblemInstance {
        variant,
        n,
        seed,
        coords,
        linehaul,
        backhaul,
        capacity: capacity_for(n),
        open: variant.open && open_draw,
        dur_limit,
        tw_beg,
        tw_end,
        tw_dur,
    };
    inst.validate()?;
    check_serviceable(&inst)?;
    Ok(inst)
}

/// Every customer must be individually serviceable on a fresh subtour from
/// the depot, otherwise no feasible complete tour exists and rollouts could
/// never terminate. The window construction guarantees this except for
/// vanishing-measure corner geometries (depot and customer in opposite
/// corners with `2·dist + service > w0_end`), which are rejected here.
fn check_serviceable(inst: &ProblemInstance) -> Result<()> {
    for j in 1..=inst.n {
        let d = inst.dist(0, j);
        let service_start = d.max(inst.tw_beg[j]);
        let mut ok = d <= inst.tw_end[j] + crate::vrp::env::FEAS_EPS;
        ok &= d <= inst.dur_limit + crate::vrp::env::FEAS_EPS;
        if !inst.open {
            ok &= service_start + inst.tw_dur[j] + d <= inst.tw_end[0] + crate::vrp::env::FEAS_EPS;
            ok &= 2.0 * d <= inst.dur_limit + crate::vrp::env::FEAS_EPS;
        }
        if !ok {
            return Err(CoreError::Generation(format!(
                "customer {j} cannot be serviced on its own subtour"
            )));
        }
    }
    Ok(())
}

/// The eight symmetries of the unit square, indexed 0..8 with 0 = identity.
pub fn dihedral_augment(inst: &ProblemInstance, k: usize) -> ProblemInstance {
    assert!(k < 8, "dihedral index must be in 0..8");
    let mut out = inst.clone();
    for c in &mut out.coords {
        let [x, y] = *c;
        *c = match k {
            0 => [x, y],
            1 => [y, x],
            2 => [1.0 - x, y],
            3 => [x, 1.0 - y],
            4 => [1.0 - x, 1.0 - y],
            5 => [y, 1.0 - x],
            6 => [1.0 - y, x],
            _ => [1.0 - y, 1.0 - x],
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_formula_branches() {
        assert_eq!(capacity_for(100), 50.0);
        assert_eq!(capacity_for(20), 30.0);
        assert_eq!(capacity_for(4), 30.0);
        assert_eq!(capacity_for(21), 34.0);
        assert_eq!(capacity_for(1000), 230.0);
        // N > 1000 branch: 30 + floor(200 + 333/33.3) = 30 + 210.
        assert_eq!(capacity_for(1333), 240.0);
    }

    #[test]
    fn cvrp_instance_has_inactive_defaults() {
        let inst = generate_instance(4, VariantId::CVRP, 123, &GenConfig::default()).unwrap();
        assert!(inst.backhaul.iter().all(|q| *q == 0.0));
        assert!(inst.tw_end.iter().all(|v| v.is_infinite()));
        assert!(inst.dur_limit.is_infinite());
        assert!(!inst.open);
        inst.validate().unwrap();
    }

    #[test]
    fn window_start_upper_bound_formula() {
        // depot (0.5, 0.5), customer (0.5, 0.9): dist 0.4; w0_end 3,
        // service 0.1, window length 0.2 => upper bound (3-0.1-0.2)/0.4 - 1.
        let upper: f64 = (3.0 - 0.1 - 0.2) / 0.4 - 1.0;
        assert!((upper - 5.75).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_demand_bounded() {
        let cfg = GenConfig::default();
        let a = generate_instance(30, VariantId::VRPB, 9, &cfg).unwrap();
        let b = generate_instance(30, VariantId::VRPB, 9, &cfg).unwrap();
        assert_eq!(a, b);
        for j in 1..=a.n {
            let lh = a.linehaul[j];
            let bh = a.backhaul[j];
            assert!(lh == 0.0 || (1.0..=9.0).contains(&lh));
            assert!(bh == 0.0 || (-9.0..=-1.0).contains(&bh));
            assert!(lh * bh == 0.0);
        }
    }

    #[test]
    fn variants_share_coordinates_per_seed() {
        let cfg = GenConfig::default();
        let a = generate_instance(12, VariantId::CVRP, 5, &cfg).unwrap();
        let b = generate_instance(12, VariantId::parse("OVRPBLTW").unwrap(), 5, &cfg).unwrap();
        assert_eq!(a.coords, b.coords);
    }

    #[test]
    fn backhaul_fraction_near_one_fifth() {
        let cfg = GenConfig::default();
        let mut backhauls = 0usize;
        let mut total = 0usize;
        for seed in 0..200 {
            let inst = generate_instance(60, VariantId::VRPB, seed, &cfg).unwrap();
            backhauls += (1..=inst.n).filter(|&j| inst.is_backhaul_customer(j)).count();
            total += inst.n;
        }
        let frac = backhauls as f64 / total as f64;
        assert!(total >= 10_000);
        assert!((frac - 0.2).abs() < 0.02, "backhaul fraction {frac}");
    }

    #[test]
    fn duration_limit_spans_every_customer() {
        let cfg = GenConfig::default();
        for seed in 0..50 {
            let inst = generate_instance(25, VariantId::VRPL, seed, &cfg).unwrap();
            assert!(inst.dur_limit >= 2.0 * inst.max_depot_dist());
            assert!(inst.dur_limit <= cfg.dur_limit_max);
        }
    }

    #[test]
    fn empty_duration_interval_is_an_error() {
        let cfg = GenConfig {
            dur_limit_max: 0.0,
            ..GenConfig::default()
        };
        assert!(generate_instance(5, VariantId::VRPL, 1, &cfg).is_err());
        // Same config still generates for variants without L.
        assert!(generate_instance(5, VariantId::CVRP, 1, &cfg).is_ok());
    }

    #[test]
    fn dihedral_maps() {
        let inst = generate_instance(3, VariantId::CVRP, 2, &GenConfig::default()).unwrap();
        assert_eq!(dihedral_augment(&inst, 0), inst);
        let mut probe = inst.clone();
        probe.coords[1] = [0.2, 0.7];
        let mapped = dihedral_augment(&probe, 2);
        assert!((mapped.coords[1][0] - 0.8).abs() < 1e-15);
        assert!((mapped.coords[1][1] - 0.7).abs() < 1e-15);
        for k in 0..8 {
            let aug = dihedral_augment(&probe, k);
            for i in 0..aug.node_count() {
                for j in 0..aug.node_count() {
                    assert!((aug.dist(i, j) - probe.dist(i, j)).abs() < 1e-12);
                }
            }
        }
    }
}
