//! Procedural reference routes. Each family stands in for one map and differs
//! in its curvature statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{CoreError, Result};
use crate::mpc::ReferenceWindow;

pub const SPACING: f64 = 1.0;
pub const MAX_CURVATURE: f64 = 0.1;
pub const DEFAULT_TARGET_SPEED: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RouteFamily {
    Straight,
    /// Gentle arcs between straights.
    Town01,
    /// Right-angle corners of radius 10–14 m.
    Town02,
    /// Long sweeping curves.
    Town04,
    /// Lane-change S-curves.
    Town06,
}

impl RouteFamily {
    pub const TOWNS: [RouteFamily; 4] = [Self::Town01, Self::Town02, Self::Town04, Self::Town06];

    pub fn name(self) -> &'static str {
        match self {
            Self::Straight => "Straight",
            Self::Town01 => "Town01",
            Self::Town02 => "Town02",
            Self::Town04 => "Town04",
            Self::Town06 => "Town06",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Self::Straight => 0x5eed_0000,
            Self::Town01 => 0x5eed_0001,
            Self::Town02 => 0x5eed_0002,
            Self::Town04 => 0x5eed_0004,
            Self::Town06 => 0x5eed_0006,
        }
    }
}

impl fmt::Display for RouteFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouteFamily {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Straight, Self::Town01, Self::Town02, Self::Town04, Self::Town06]
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::Config(format!("unknown route family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub waypoints: Vec<[f64; 2]>,
    pub target_speed: f64,
    pub family: RouteFamily,
    pub seed: u64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Curvature sequence (one entry per 1 m step) for a family.
fn curvature_profile(family: RouteFamily, rng: &mut ChaCha8Rng, steps: usize) -> Vec<f64> {
    let mut k = Vec::with_capacity(steps);
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let push = |k: &mut Vec<f64>, value: f64, len: usize| {
        k.extend(std::iter::repeat(value).take(len));
    };
    match family {
        RouteFamily::Straight => push(&mut k, 0.0, steps),
        RouteFamily::Town01 => {
            push(&mut k, 0.0, 8);
            while k.len() < steps {
                let arc = sign(rng) * rng.gen_range(0.01..0.04);
                push(&mut k, arc, rng.gen_range(10..25));
                push(&mut k, 0.0, rng.gen_range(8..20));
            }
        }
        RouteFamily::Town02 => {
            push(&mut k, 0.0, 8);
            while k.len() < steps {
                push(&mut k, 0.0, rng.gen_range(8..18));
                let radius = rng.gen_range(10.0..14.0);
                let len = (FRAC_PI_2 * radius / SPACING).round() as usize;
                push(&mut k, sign(rng) / radius, len);
            }
        }
        RouteFamily::Town04 => {
            let amp = rng.gen_range(0.015..0.03);
            let wavelength = rng.gen_range(40.0..70.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            push(&mut k, 0.0, 8);
            let start = k.len();
            for i in start..steps {
                let s = (i - start) as f64;
                k.push(amp * (2.0 * PI * s / wavelength + phase).sin());
            }
        }
        RouteFamily::Town06 => {
            push(&mut k, 0.0, 8);
            while k.len() < steps {
                push(&mut k, 0.0, rng.gen_range(6..14));
                let c = sign(rng) * rng.gen_range(0.04..0.08);
                let len = rng.gen_range(5..9);
                push(&mut k, c, len);
                push(&mut k, -c, len);
            }
        }
    }
    k.truncate(steps);
    k
}

/// Deterministic route for `(seed, family)` with the default target speed.
pub fn generate_route(seed: u64, family: RouteFamily, target_speed: f64) -> Route {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family.stream().rotate_left(17));
    let length = rng.gen_range(60..=80);
    let mut heading = rng.gen_range(-PI..PI);
    let curv = curvature_profile(family, &mut rng, length);
    let mut pts = Vec::with_capacity(length + 1);
    let mut pos = [0.0, 0.0];
    pts.push(pos);
    for kappa in curv {
        // Advance along the arc: half the turn before, half after the chord.
        heading += 0.5 * kappa * SPACING;
        pos = [pos[0] + SPACING * heading.cos(), pos[1] + SPACING * heading.sin()];
        heading += 0.5 * kappa * SPACING;
        pts.push(pos);
    }
    Route {
        waypoints: pts,
        target_speed,
        family,
        seed,
    }
}

impl Route {
    pub fn new(waypoints: Vec<[f64; 2]>, target_speed: f64) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(CoreError::Contract("a route needs at least 2 waypoints".into()));
        }
        Ok(Self {
            waypoints,
            target_speed,
            family: RouteFamily::Straight,
            seed: 0,
        })
    }

    pub fn goal(&self) -> [f64; 2] {
        *self.waypoints.last().expect("non-empty route")
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn heading_at(&self, i: usize) -> f64 {
        let n = self.waypoints.len();
        let (a, b) = if i + 1 < n { (i, i + 1) } else { (n - 2, n - 1) };
        let (pa, pb) = (self.waypoints[a], self.waypoints[b]);
        (pb[1] - pa[1]).atan2(pb[0] - pa[0])
    }

    /// Global nearest waypoint `(index, distance)`.
    pub fn nearest(&self, pos: [f64; 2]) -> (usize, f64) {
        self.waypoints
            .iter()
            .enumerate()
            .map(|(i, w)| (i, dist(pos, *w)))
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
    }

    /// Nearest waypoint within a band around `hint`, so progress does not
    /// jump between nearby sections of the same route.
    pub fn nearest_index_near(&self, pos: [f64; 2], hint: usize) -> usize {
        let lo = hint.saturating_sub(10);
        let hi = (hint + 40).min(self.waypoints.len() - 1);
        (lo..=hi)
            .map(|i| (i, dist(pos, self.waypoints[i])))
            .fold((lo, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
            .0
    }

    /// The `k` waypoints following index `idx` (the goal alone at the end).
    pub fn window(&self, idx: usize, k: usize) -> Result<ReferenceWindow> {
        let last = self.waypoints.len() - 1;
        let start = (idx + 1).min(last);
        let end = (idx + k).min(last);
        ReferenceWindow::new(self.waypoints[start..=end].to_vec(), self.target_speed)
    }

    pub fn route_error(&self, pos: [f64; 2]) -> f64 {
        self.nearest(pos).1
    }

    pub fn goal_error(&self, pos: [f64; 2]) -> f64 {
        dist(pos, self.goal())
    }

    /// Max turning angle per unit length between consecutive segments.
    pub fn max_curvature(&self) -> f64 {
        self.waypoints
            .windows(3)
            .map(|w| {
                let h1 = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
                let h2 = (w[2][1] - w[1][1]).atan2(w[2][0] - w[1][0]);
                let mut d = h2 - h1;
                while d > PI {
                    d -= 2.0 * PI;
                }
                while d < -PI {
                    d += 2.0 * PI;
                }
                d.abs() / (0.5 * (dist(w[0], w[1]) + dist(w[1], w[2])))
            })
            .fold(0.0, f64::max)
    }

    pub fn spacing_range(&self) -> (f64, f64) {
        self.waypoints
            .windows(2)
            .map(|w| dist(w[0], w[1]))
            .fold((f64::INFINITY, 0.0), |(lo, hi), d| (lo.min(d), hi.max(d)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y\n");
        for w in &self.waypoints {
            s.push_str(&format!("{},{}\n", w[0], w[1]));
        }
        s
    }
}

pub fn route_error_step(pos: [f64; 2], route: &Route) -> f64 {
    route.route_error(pos)
}

pub fn goal_error(pos: [f64; 2], route: &Route) -> f64 {
    route.goal_error(pos)
}
