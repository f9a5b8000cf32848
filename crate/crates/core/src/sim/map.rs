use std::f64::consts::PI;

use rand::Rng;

/// Sample spacing along the route centerline, metres.
pub const ROUTE_STEP: f64 = 0.5;
/// Minimum generated route length, metres.
pub const ROUTE_LENGTH: f64 = 420.0;
pub const LANE_WIDTH: f64 = 7.0;
/// Curvature bound for generated arcs, 1/m.
pub const MAX_CURVATURE: f64 = 0.05;
const MAX_TOTAL_TURN: f64 = 2.0 * PI / 3.0;

/// Nearest-point query result against the centerline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the closest centerline point.
    pub s: f64,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: f64,
    pub distance: f64,
}

/// A single route centerline made of straights and arcs.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneMap {
    points: Vec<[f64; 2]>,
    cum: Vec<f64>,
    lane_width: f64,
}

impl LaneMap {
    /// Builds a map from a centerline polyline. Consecutive points must be
    /// distinct.
    pub fn from_points(points: Vec<[f64; 2]>, lane_width: f64) -> Self {
        assert!(points.len() >= 2, "route needs at least two points");
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            let d = dist(w[0], w[1]);
            cum.push(cum.last().unwrap() + d);
        }
        LaneMap {
            points,
            cum,
            lane_width,
        }
    }

    /// Straight route along +x starting at the origin.
    pub fn straight(length: f64) -> Self {
        let n = (length / ROUTE_STEP).ceil() as usize;
        let pts = (0..=n).map(|i| [i as f64 * ROUTE_STEP, 0.0]).collect();
        Self::from_points(pts, LANE_WIDTH)
    }

    /// Straight lead-in of `lead` metres followed by a constant-curvature arc
    /// of `arc` metres (positive curvature turns left).
    pub fn straight_then_arc(lead: f64, arc: f64, curvature: f64) -> Self {
        let mut b = Builder::new([0.0, 0.0], 0.0);
        b.straight(lead);
        b.arc(arc, curvature);
        Self::from_points(b.points, LANE_WIDTH)
    }

    pub fn generate<R: Rng>(rng: &mut R) -> Self {
        let heading0 = rng.gen_range(0.0..2.0 * PI);
        let mut b = Builder::new([0.0, 0.0], heading0);
        b.straight(rng.gen_range(40.0..70.0));
        while b.length < ROUTE_LENGTH {
            if rng.gen_bool(0.5) {
                b.straight(rng.gen_range(20.0..70.0));
            } else {
                let radius = rng.gen_range(1.0 / MAX_CURVATURE..80.0);
                let sweep = rng.gen_range(15f64..75.0).to_radians();
                let turned = b.heading - heading0;
                let mut sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                if (turned + sign * sweep).abs() > MAX_TOTAL_TURN {
                    sign = -sign;
                }
                b.arc(radius * sweep, sign / radius);
            }
        }
        Self::from_points(b.points, LANE_WIDTH)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn lane_width(&self) -> f64 {
        self.lane_width
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let seg = self.cum[i + 1] - self.cum[i];
        (i, ((s - self.cum[i]) / seg).clamp(0.0, 1.0))
    }

    /// Centerline point at arc length `s` (clamped to the route).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let (i, t) = self.locate(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Closest centerline point. With a hint, only segments within 80 m of
    /// arc length of it are searched.
    pub fn project(&self, p: [f64; 2], hint: Option<f64>) -> Projection {
        let (lo, hi) = match hint {
            Some(s) => {
                let (a, _) = self.locate(s - 80.0);
                let (b, _) = self.locate(s + 80.0);
                (a, b + 1)
            }
            None => (0, self.points.len() - 1),
        };
        let mut best = Projection {
            s: 0.0,
            lateral: 0.0,
            distance: f64::INFINITY,
        };
        for i in lo..hi {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (t, d) = segment_param(p, a, b);
            if d < best.distance {
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
                best = Projection {
                    s: self.cum[i] + t * (self.cum[i + 1] - self.cum[i]),
                    lateral: if cross >= 0.0 { d } else { -d },
                    distance: d,
                };
            }
        }
        best
    }

    /// Exhaustive distance from `p` to the centerline polyline.
    pub fn distance_to_route(&self, p: [f64; 2]) -> f64 {
        self.points
            .windows(2)
            .map(|w| segment_param(p, w[0], w[1]).1)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn drivable(&self, p: [f64; 2]) -> bool {
        self.distance_to_route(p) <= self.lane_width / 2.0
    }

    /// Max curvature estimated from heading changes between samples.
    pub fn max_curvature(&self) -> f64 {
        self.points
            .windows(3)
            .map(|w| {
                let h0 = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
                let h1 = (w[2][1] - w[1][1]).atan2(w[2][0] - w[1][0]);
                wrap_angle(h1 - h0).abs() / dist(w[0], w[1])
            })
            .fold(0.0, f64::max)
    }
}

struct Builder {
    points: Vec<[f64; 2]>,
    heading: f64,
    length: f64,
}

impl Builder {
    fn new(start: [f64; 2], heading: f64) -> Self {
        Builder {
            points: vec![start],
            heading,
            length: 0.0,
        }
    }

    fn advance(&mut self, len: f64, curvature: f64) {
        let n = (len / ROUTE_STEP).ceil().max(1.0) as usize;
        let ds = len / n as f64;
        for _ in 0..n {
            let mid = self.heading + 0.5 * curvature * ds;
            let p = *self.points.last().unwrap();
            self.points
                .push([p[0] + ds * mid.cos(), p[1] + ds * mid.sin()]);
            self.heading += curvature * ds;
            self.length += ds;
        }
    }

    fn straight(&mut self, len: f64) {
        self.advance(len, 0.0);
    }

    fn arc(&mut self, len: f64, curvature: f64) {
        self.advance(len, curvature);
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Clamped projection parameter of `p` on segment `ab` and the distance.
pub(crate) fn segment_param(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * dx, a[1] + t * dy];
    (t, dist(p, q))
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}
