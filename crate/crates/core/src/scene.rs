//! Scene data types, coordinate frames and rigid-transform augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

pub const DEFAULT_LANE_HALF_WIDTH: f64 = 2.0;
pub const DEFAULT_CROP_RADIUS: f64 = 50.0;
const UNIT_TOL: f64 = 1e-6;

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[inline]
fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Rigid planar transform: rotate by `rotation` radians about the origin,
/// then translate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Se2Transform {
    pub rotation: f64,
    pub translation: Point,
}

impl Default for Se2Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se2Transform {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn translation(t: Point) -> Self {
        Self {
            rotation: 0.0,
            translation: t,
        }
    }

    pub fn rotation(theta: f64) -> Self {
        Self {
            rotation: theta,
            translation: [0.0, 0.0],
        }
    }

    pub fn rotate(&self, v: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn apply(&self, p: Point) -> Point {
        let r = self.rotate(p);
        [r[0] + self.translation[0], r[1] + self.translation[1]]
    }

    pub fn inverse(&self) -> Self {
        let back = Se2Transform::rotation(-self.rotation);
        let t = back.rotate(self.translation);
        Self {
            rotation: -self.rotation,
            translation: [-t[0], -t[1]],
        }
    }

    /// `self.then(other)` applies `self` first, then `other`.
    pub fn then(&self, other: &Se2Transform) -> Self {
        let t = other.apply(self.translation);
        Self {
            rotation: self.rotation + other.rotation,
            translation: t,
        }
    }
}

/// Random augmentation transform: rotation uniform in `[0, 2 pi)`,
/// translation components uniform in `[-10, 10]` m.
pub fn sample_random_se2(seed: u64) -> Se2Transform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_se2_with(&mut rng)
}

pub fn sample_se2_with(rng: &mut impl Rng) -> Se2Transform {
    Se2Transform {
        rotation: rng.gen_range(0.0..std::f64::consts::TAU),
        translation: [rng.gen_range(-10.0..=10.0), rng.gen_range(-10.0..=10.0)],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    pub positions: Vec<Point>,
    pub valid: Vec<bool>,
    pub timestamps: Vec<f64>,
    /// Filled by preprocessing; empty until then.
    #[serde(default)]
    pub velocities: Vec<Point>,
    #[serde(default)]
    pub accelerations: Vec<Point>,
}

impl AgentTrack {
    pub fn new(id: impl Into<String>, positions: Vec<Point>, timestamps: Vec<f64>) -> Self {
        let n = positions.len();
        Self {
            id: id.into(),
            positions,
            valid: vec![true; n],
            timestamps,
            velocities: Vec::new(),
            accelerations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.valid.len() != self.positions.len() || self.timestamps.len() != self.positions.len() {
            return Err(Error::InvalidScene(format!(
                "track {}: positions/valid/timestamps lengths {}/{}/{} differ",
                self.id,
                self.positions.len(),
                self.valid.len(),
                self.timestamps.len()
            )));
        }
        if let Some(w) = self.timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidScene(format!(
                "track {}: timestamps not strictly increasing at step {}",
                self.id,
                w + 1
            )));
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidScene(format!("track {}: non-finite position", self.id)));
        }
        Ok(())
    }
}

/// Lane centerline with a unit tangent per point and a corridor half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
    pub directions: Vec<Point>,
    pub width: f64,
}

/// Closest point on a polyline to a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub distance: f64,
    pub point: Point,
    /// Unit direction of the segment holding the closest point.
    pub tangent: Point,
}

impl Polyline {
    pub fn new(points: Vec<Point>, width: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidScene(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        let directions = tangents(&points)?;
        Ok(Self {
            points,
            directions,
            width,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 || self.directions.len() != self.points.len() {
            return Err(Error::InvalidScene("malformed polyline".into()));
        }
        if self
            .directions
            .iter()
            .any(|d| ((d[0] * d[0] + d[1] * d[1]).sqrt() - 1.0).abs() > UNIT_TOL)
        {
            return Err(Error::InvalidScene("polyline direction not unit length".into()));
        }
        if !(self.width > 0.0) {
            return Err(Error::InvalidScene("polyline width must be positive".into()));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    pub fn project(&self, p: Point) -> Projection {
        let mut best = Projection {
            distance: f64::INFINITY,
            point: self.points[0],
            tangent: self.directions[0],
        };
        for w in self.points.windows(2) {
            let seg = sub(w[1], w[0]);
            let len2 = dot(seg, seg);
            let t = if len2 > 0.0 {
                (dot(sub(p, w[0]), seg) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [w[0][0] + t * seg[0], w[0][1] + t * seg[1]];
            let d = dist(p, q);
            if d < best.distance && len2 > 0.0 {
                let l = len2.sqrt();
                best = Projection {
                    distance: d,
                    point: q,
                    tangent: [seg[0] / l, seg[1] / l],
                };
            }
        }
        best
    }

    /// Point-to-segment distance from `p` to the centerline.
    pub fn distance_to(&self, p: Point) -> f64 {
        self.project(p).distance
    }

    /// Resample to `n` points at uniform arclength.
    pub fn resample(&self, n: usize) -> Polyline {
        assert!(n >= 2);
        let total = self.length();
        let mut cum = vec![0.0];
        for w in self.points.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        let mut points = Vec::with_capacity(n);
        let mut seg = 0;
        for i in 0..n {
            let s = total * i as f64 / (n - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let l = cum[seg + 1] - cum[seg];
            let t = if l > 0.0 { ((s - cum[seg]) / l).clamp(0.0, 1.0) } else { 0.0 };
            let (a, b) = (self.points[seg], self.points[seg + 1]);
            points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
        let directions = tangents(&points).unwrap_or_else(|_| vec![self.directions[0]; n]);
        Polyline {
            points,
            directions,
            width: self.width,
        }
    }
}

/// Central-difference unit tangents, one-sided at the ends.
fn tangents(points: &[Point]) -> Result<Vec<Point>> {
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    let mut last: Option<Point> = None;
    for i in 0..n {
        let a = points[i.saturating_sub(1)];
        let b = points[(i + 1).min(n - 1)];
        let d = sub(b, a);
        let l = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if l > 1e-12 {
            let u = [d[0] / l, d[1] / l];
            out.push(u);
            last = Some(u);
        } else {
            out.push([f64::NAN, f64::NAN]);
        }
    }
    let fallback = last.ok_or_else(|| Error::InvalidScene("degenerate polyline".into()))?;
    // back-fill degenerate entries from the nearest valid neighbour
    let mut prev = None;
    for u in out.iter_mut() {
        if u[0].is_nan() {
            *u = prev.unwrap_or(fallback);
        } else {
            prev = Some(*u);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub dt: f64,
    pub n_obs: usize,
    pub n_pred: usize,
    pub anchor_id: String,
    pub agents: Vec<AgentTrack>,
    pub polylines: Vec<Polyline>,
    /// Transform from the original coordinates to the current ones.
    #[serde(default)]
    pub frame: Se2Transform,
}

impl Scene {
    pub fn anchor_index(&self) -> Result<usize> {
        let mut hits = self.agents.iter().enumerate().filter(|(_, a)| a.id == self.anchor_id);
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Ok(i),
            (None, _) => Err(Error::InvalidScene(format!(
                "anchor {} not among the agents",
                self.anchor_id
            ))),
            (Some(_), Some(_)) => Err(Error::InvalidScene(format!(
                "anchor id {} appears more than once",
                self.anchor_id
            ))),
        }
    }

    pub fn anchor(&self) -> Result<&AgentTrack> {
        Ok(&self.agents[self.anchor_index()?])
    }

    /// True when every track also covers the prediction horizon.
    pub fn has_future(&self) -> bool {
        self.n_pred > 0 && self.agents.iter().all(|a| a.len() == self.n_obs + self.n_pred)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidScene("dt must be positive".into()));
        }
        if self.n_obs < 2 {
            return Err(Error::InvalidScene("n_obs must be at least 2".into()));
        }
        self.anchor_index()?;
        let obs_only = self.n_obs;
        let full = self.n_obs + self.n_pred;
        let base = self.anchor()?.timestamps.clone();
        for a in &self.agents {
            a.validate()?;
            if a.len() != obs_only && a.len() != full {
                return Err(Error::InvalidScene(format!(
                    "track {} has {} steps, expected {} or {}",
                    a.id,
                    a.len(),
                    obs_only,
                    full
                )));
            }
            let shared = a.len().min(base.len());
            if a.timestamps[..shared]
                .iter()
                .zip(&base[..shared])
                .any(|(x, y)| (x - y).abs() > 1e-6)
            {
                return Err(Error::InvalidScene(format!(
                    "track {} does not share the anchor's time base",
                    a.id
                )));
            }
        }
        for p in &self.polylines {
            p.validate()?;
        }
        Ok(())
    }

    /// Apply a rigid transform: positions rotate then translate;
    /// velocities, accelerations and lane directions only rotate.
    pub fn apply_se2(&self, t: &Se2Transform) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            for p in &mut a.positions {
                *p = t.apply(*p);
            }
            for v in &mut a.velocities {
                *v = t.rotate(*v);
            }
            for v in &mut a.accelerations {
                *v = t.rotate(*v);
            }
        }
        for l in &mut out.polylines {
            for p in &mut l.points {
                *p = t.apply(*p);
            }
            for d in &mut l.directions {
                *d = t.rotate(*d);
            }
        }
        out.frame = self.frame.then(t);
        out
    }

    /// Translate so the anchor's last observed position is the origin.
    pub fn normalize_frame(&self) -> Result<Scene> {
        let anchor = self.anchor()?;
        let last = self.n_obs - 1;
        if anchor.len() <= last || !anchor.valid[last] {
            return Err(Error::UnusableTrack {
                track: anchor.id.clone(),
                reason: "anchor has no valid last observation".into(),
            });
        }
        let p = anchor.positions[last];
        Ok(self.apply_se2(&Se2Transform::translation([-p[0], -p[1]])))
    }

    /// Drop polylines with no point within `radius` of the anchor's last
    /// observed position.
    pub fn crop_polylines(&self, radius: f64) -> Result<Scene> {
        let anchor = self.anchor()?;
        let c = anchor.positions[self.n_obs - 1];
        let mut out = self.clone();
        out.polylines
            .retain(|l| l.points.iter().any(|p| dist(*p, c) <= radius) || l.distance_to(c) <= radius);
        Ok(out)
    }

    /// Observation-only copy (futures stripped).
    pub fn observed(&self) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            let n = self.n_obs.min(a.len());
            a.positions.truncate(n);
            a.valid.truncate(n);
            a.timestamps.truncate(n);
            a.velocities.truncate(n);
            a.accelerations.truncate(n);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_scene(anchor_last: Point) -> Scene {
        let n = 5;
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let a = AgentTrack::new(
            "a",
            (0..n)
                .map(|i| [anchor_last[0] + i as f64 - 2.0, anchor_last[1]])
                .collect(),
            ts.clone(),
        );
        let b = AgentTrack::new("b", (0..n).map(|i| [i as f64, 3.0]).collect(), ts);
        Scene {
            scene_id: "s".into(),
            dt: 0.1,
            n_obs: 3,
            n_pred: 2,
            anchor_id: "a".into(),
            agents: vec![a, b],
            polylines: vec![Polyline::new(vec![[0.0, 0.0], [10.0, 0.0]], 2.0).unwrap()],
            frame: Se2Transform::identity(),
        }
    }

    #[test]
    fn transform_inverse_is_identity() {
        let t = Se2Transform {
            rotation: 1.3,
            translation: [4.0, -2.5],
        };
        let id = t.then(&t.inverse());
        assert!(id.rotation.abs() < 1e-9);
        assert!(id.translation[0].abs() < 1e-9 && id.translation[1].abs() < 1e-9);
        let p = [3.0, 7.0];
        let q = t.inverse().apply(t.apply(p));
        assert!(dist(p, q) < 1e-9);
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let q = Se2Transform::rotation(std::f64::consts::FRAC_PI_2).apply([1.0, 0.0]);
        assert!(q[0].abs() < 1e-15 && (q[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_translates_anchor_to_origin() {
        let s = line_scene([5.0, -3.0]);
        let n = s.normalize_frame().unwrap();
        assert_eq!(n.agents[0].positions[2], [0.0, 0.0]);
        assert_eq!(n.agents[1].positions[0], [-5.0, 6.0]);
        let back = n.apply_se2(&n.frame.inverse());
        for (a, b) in back.agents.iter().zip(&s.agents) {
            for (p, q) in a.positions.iter().zip(&b.positions) {
                assert!(dist(*p, *q) < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_at_origin_is_identity() {
        let s = line_scene([0.0, 0.0]);
        let n = s.normalize_frame().unwrap();
        assert_eq!(n.agents, s.agents);
        assert_eq!(n.polylines, s.polylines);
    }

    #[test]
    fn missing_anchor_is_rejected() {
        let mut s = line_scene([0.0, 0.0]);
        s.anchor_id = "zzz".into();
        assert!(s.normalize_frame().is_err());
        assert!(s.validate().is_err());
    }

    #[test]
    fn identity_transform_keeps_scene() {
        let s = line_scene([1.0, 2.0]);
        let t = s.apply_se2(&Se2Transform::identity());
        assert_eq!(t.agents, s.agents);
        assert_eq!(t.polylines, s.polylines);
    }

    #[test]
    fn random_se2_is_seeded() {
        assert_eq!(sample_random_se2(9), sample_random_se2(9));
        assert_ne!(sample_random_se2(9), sample_random_se2(10));
        let t = sample_random_se2(1);
        assert!((0.0..std::f64::consts::TAU).contains(&t.rotation));
        assert!(t.translation.iter().all(|x| x.abs() <= 10.0));
    }

    #[test]
    fn resample_is_uniform() {
        let l = Polyline::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 9.0]], 2.0).unwrap();
        let r = l.resample(11);
        assert_eq!(r.points.len(), 11);
        for w in r.points.windows(2) {
            assert!((dist(w[0], w[1]) - 1.0).abs() < 1e-9);
        }
        r.validate().unwrap();
    }

    #[test]
    fn projection_uses_segments() {
        let l = Polyline::new(vec![[0.0, 0.0], [10.0, 0.0]], 2.0).unwrap();
        let p = l.project([5.0, 3.0]);
        assert!((p.distance - 3.0).abs() < 1e-12);
        assert_eq!(p.tangent, [1.0, 0.0]);
        assert!((l.distance_to([-3.0, 4.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn crop_keeps_nearby_lanes() {
        let mut s = line_scene([0.0, 0.0]);
        s.polylines
            .push(Polyline::new(vec![[200.0, 0.0], [210.0, 0.0]], 2.0).unwrap());
        let c = s.crop_polylines(50.0).unwrap();
        assert_eq!(c.polylines.len(), 1);
    }
}
