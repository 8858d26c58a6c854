//! Deterministic synthetic driving scenes: straight roads, curves and
//! T-junctions with car-following traffic.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_scene, scene_to_json};
use crate::scene::{dist, sample_se2_with, AgentTrack, Point, Polyline, Scene, Se2Transform, DEFAULT_LANE_HALF_WIDTH};

pub const SCENE_STEPS: usize = 50;
pub const OBS_STEPS: usize = 20;
pub const DT: f64 = 0.1;
const LANE_OFFSET: f64 = 1.75;
const JUNCTION_HALF: f64 = 6.0;
const ROAD_LENGTH: f64 = 150.0;
const DENSE_STEP: f64 = 0.25;
const MAP_STEP: f64 = 2.0;
const MAP_PIECE: f64 = 24.0;
/// Lanes further than this from the anchor's last observation are left out.
const MAP_RADIUS: f64 = 60.0;
const LATERAL_ACCEL: f64 = 3.0;
const COMFORT_DECEL: f64 = 2.0;
const IDM_ACCEL: f64 = 2.5;
const IDM_DECEL: f64 = 3.0;
const IDM_HEADWAY: f64 = 1.2;
const IDM_MIN_GAP: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Straight,
    Curve,
    TJunction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub layout: Layout,
    /// Agents including the anchor.
    pub agents: usize,
    /// Cruise speed range, m/s.
    pub speed_range: (f64, f64),
    /// Observation noise, metres.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Probability of the left branch at a junction.
    pub left_prob: f64,
    /// Anchor waits at the junction during the observed window.
    pub stopped: bool,
}

impl ScenarioSpec {
    pub fn new(layout: Layout, seed: u64) -> Self {
        Self {
            layout,
            agents: 3,
            speed_range: (5.0, 14.0),
            noise_sigma: 0.1,
            seed,
            left_prob: 0.5,
            stopped: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::Config("scenario needs at least one agent".into()));
        }
        let (lo, hi) = self.speed_range;
        if !(lo >= 0.0 && hi >= lo) || self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.left_prob) {
            return Err(Error::Config("invalid speed range, noise or branch probability".into()));
        }
        Ok(())
    }
}

/// Densely sampled route with arclength and curvature speed limits.
#[derive(Clone, Debug)]
struct Route {
    pts: Vec<Point>,
    cum: Vec<f64>,
    vmax: Vec<f64>,
}

impl Route {
    fn new(pts: Vec<Point>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        let n = pts.len();
        let mut vmax = vec![f64::INFINITY; n];
        for i in 1..n.saturating_sub(1) {
            let a = heading(pts[i - 1], pts[i]);
            let b = heading(pts[i], pts[i + 1]);
            let turn = wrap(b - a).abs();
            let len = 0.5 * (cum[i + 1] - cum[i - 1]);
            if turn > 1e-9 && len > 0.0 {
                vmax[i] = (LATERAL_ACCEL * len / turn).sqrt();
            }
        }
        Self { pts, cum, vmax }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> Point {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => return self.pts[i],
            Err(i) => i.clamp(1, self.pts.len() - 1),
        };
        let (a, b) = (self.pts[i - 1], self.pts[i]);
        let t = (s - self.cum[i - 1]) / (self.cum[i] - self.cum[i - 1]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Highest speed from which every curve ahead can be taken with
    /// comfortable braking.
    fn speed_limit(&self, s: f64) -> f64 {
        let start = self.cum.partition_point(|&c| c < s);
        let mut lim = f64::INFINITY;
        for i in start..self.pts.len() {
            let d = self.cum[i] - s;
            if d > 80.0 {
                break;
            }
            lim = lim.min((self.vmax[i].powi(2) + 2.0 * COMFORT_DECEL * d).sqrt());
        }
        lim
    }
}

fn heading(a: Point, b: Point) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn segment(a: Point, b: Point) -> Vec<Point> {
    let n = (dist(a, b) / DENSE_STEP).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

/// Arc around `center` from angle `from`, sweeping `sweep` radians
/// (positive counter-clockwise).
fn arc(center: Point, radius: f64, from: f64, sweep: f64) -> Vec<Point> {
    let n = (radius * sweep.abs() / DENSE_STEP).ceil().max(2.0) as usize;
    (0..=n)
        .map(|k| {
            let a = from + sweep * k as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

fn join(parts: &[&[Point]]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    for p in parts {
        let skip = match (out.last(), p.first()) {
            (Some(a), Some(b)) if dist(*a, *b) < 1e-9 => 1,
            _ => 0,
        };
        out.extend_from_slice(&p[skip..]);
    }
    out
}

/// Offset a path sideways; positive is to the left of travel.
fn offset(pts: &[Point], d: f64) -> Vec<Point> {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let a = pts[i.saturating_sub(1)];
            let b = pts[(i + 1).min(n - 1)];
            let h = heading(a, b);
            [pts[i][0] - d * h.sin(), pts[i][1] + d * h.cos()]
        })
        .collect()
}

fn reversed(pts: &[Point]) -> Vec<Point> {
    pts.iter().rev().copied().collect()
}

/// Cut a dense lane into map polylines of bounded length.
fn lane_pieces(pts: &[Point]) -> Vec<Polyline> {
    let r = Route::new(pts.to_vec());
    let total = r.length();
    let pieces = (total / MAP_PIECE).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(pieces);
    for k in 0..pieces {
        let (s0, s1) = (total * k as f64 / pieces as f64, total * (k + 1) as f64 / pieces as f64);
        let n = ((s1 - s0) / MAP_STEP).ceil().max(1.0) as usize;
        let pts: Vec<Point> = (0..=n).map(|j| r.at(s0 + (s1 - s0) * j as f64 / n as f64)).collect();
        if let Ok(p) = Polyline::new(pts, DEFAULT_LANE_HALF_WIDTH) {
            out.push(p);
        }
    }
    out
}

/// Road network in a local frame: map lanes plus the routes agents drive.
struct Network {
    lanes: Vec<Vec<Point>>,
    /// Routes the anchor may take, with branch labels for junctions.
    anchor_routes: Vec<Route>,
    /// Other routes for surrounding traffic.
    other_routes: Vec<Route>,
    /// Where the anchor starts measuring along its route.
    anchor_start: (f64, f64),
    /// Arclength of the stop line on anchor routes (junctions only).
    stop_line: Option<f64>,
}

fn straight_network() -> Network {
    let axis = segment([-ROAD_LENGTH, 0.0], [ROAD_LENGTH, 0.0]);
    let east = [offset(&axis, -LANE_OFFSET), offset(&axis, -3.0 * LANE_OFFSET)];
    let west = [reversed(&offset(&axis, LANE_OFFSET)), reversed(&offset(&axis, 3.0 * LANE_OFFSET))];
    Network {
        lanes: east.iter().chain(&west).cloned().collect(),
        anchor_routes: vec![Route::new(east[0].clone())],
        other_routes: vec![Route::new(east[1].clone()), Route::new(west[0].clone()), Route::new(west[1].clone())],
        anchor_start: (70.0, 150.0),
        stop_line: None,
    }
}

fn curve_network(rng: &mut ChaCha8Rng) -> Network {
    let radius = rng.gen_range(15.0..50.0);
    let sweep = rng.gen_range(0.25 * PI..0.65 * PI) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let start = [0.0, 0.0];
    let center = [0.0, radius * sweep.signum()];
    let from = -sweep.signum() * FRAC_PI_2;
    let bend = arc(center, radius, from, sweep);
    let end = *bend.last().unwrap();
    let h = heading(bend[bend.len() - 2], end);
    let exit = [end[0] + ROAD_LENGTH * h.cos(), end[1] + ROAD_LENGTH * h.sin()];
    let axis = join(&[&segment([-ROAD_LENGTH, 0.0], start), &bend, &segment(end, exit)]);
    let fwd = offset(&axis, -LANE_OFFSET);
    let back = reversed(&offset(&axis, LANE_OFFSET));
    Network {
        lanes: vec![fwd.clone(), back.clone()],
        anchor_routes: vec![Route::new(fwd)],
        other_routes: vec![Route::new(back)],
        // last observation between 50 m before and 20 m into the bend
        anchor_start: (100.0, 170.0),
        stop_line: None,
    }
}

/// Junction at the origin; the anchor drives north on the stem and turns
/// left (west) or right (east).
fn t_junction_network() -> Network {
    let j = JUNCTION_HALF;
    let l = LANE_OFFSET;
    let stem_in = segment([l, -ROAD_LENGTH], [l, -j]);
    let stem_out = segment([-l, -j], [-l, -ROAD_LENGTH]);
    let east_in = segment([-ROAD_LENGTH, -l], [-j, -l]);
    let east_out = segment([j, -l], [ROAD_LENGTH, -l]);
    let west_in = segment([ROAD_LENGTH, l], [j, l]);
    let west_out = segment([-j, l], [-ROAD_LENGTH, l]);
    let stem_right = arc([j, -j], j - l, PI, -FRAC_PI_2);
    let stem_left = arc([-j, -j], j + l, 0.0, FRAC_PI_2);
    let east_through = segment([-j, -l], [j, -l]);
    let west_through = segment([j, l], [-j, l]);
    let east_to_stem = arc([-j, -j], j - l, FRAC_PI_2, -FRAC_PI_2);
    let west_to_stem = arc([j, -j], j + l, FRAC_PI_2, FRAC_PI_2);
    let left = join(&[&stem_in, &stem_left, &west_out]);
    let right = join(&[&stem_in, &stem_right, &east_out]);
    let others = vec![
        Route::new(join(&[&east_in, &east_through, &east_out])),
        Route::new(join(&[&west_in, &west_through, &west_out])),
        Route::new(join(&[&east_in, &east_to_stem, &stem_out])),
        Route::new(join(&[&west_in, &west_to_stem, &stem_out])),
    ];
    Network {
        lanes: vec![
            stem_in,
            stem_out,
            east_in,
            east_out,
            west_in,
            west_out,
            stem_right,
            stem_left,
            east_through,
            west_through,
            east_to_stem,
            west_to_stem,
        ],
        anchor_routes: vec![Route::new(left), Route::new(right)],
        other_routes: others,
        anchor_start: (105.0, ROAD_LENGTH - j - 2.0),
        stop_line: Some(ROAD_LENGTH - j),
    }
}

/// Longitudinal behaviour of one simulated vehicle.
#[derive(Clone, Debug)]
struct Driver {
    route: usize,
    s: f64,
    v: f64,
    cruise: f64,
    /// Index of the vehicle ahead on the same route.
    leader: Option<usize>,
    /// Hold still until this step.
    wait_until: usize,
    /// Start braking to a stop from this step on.
    brake_from: Option<usize>,
    /// Stop (and stay) at this arclength.
    stop_at: Option<f64>,
}

fn idm_accel(v: f64, desired: f64, gap: Option<(f64, f64)>) -> f64 {
    let free = if desired <= 0.0 { -IDM_DECEL } else { IDM_ACCEL * (1.0 - (v / desired).powi(4)) };
    match gap {
        Some((g, dv)) => {
            let s_star = IDM_MIN_GAP + v * IDM_HEADWAY + v * dv / (2.0 * (IDM_ACCEL * IDM_DECEL).sqrt());
            let g = g.max(0.1);
            free - IDM_ACCEL * (s_star.max(0.0) / g).powi(2)
        }
        None => free,
    }
}

/// Simulate all drivers jointly; returns arclength per driver per step.
fn simulate(routes: &[Route], drivers: &mut [Driver]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(SCENE_STEPS); drivers.len()];
    for k in 0..SCENE_STEPS {
        for (i, d) in drivers.iter().enumerate() {
            out[i].push(d.s);
        }
        let snapshot: Vec<(f64, f64)> = drivers.iter().map(|d| (d.s, d.v)).collect();
        for d in drivers.iter_mut() {
            if k < d.wait_until {
                d.v = 0.0;
                continue;
            }
            let r = &routes[d.route];
            let mut desired = d.cruise.min(r.speed_limit(d.s));
            if d.brake_from.is_some_and(|b| k >= b) {
                desired = 0.0;
            }
            let mut gap = d.leader.map(|l| {
                let (sl, vl) = snapshot[l];
                (sl - d.s, d.v - vl)
            });
            if let Some(stop) = d.stop_at {
                let g = stop - d.s + IDM_MIN_GAP;
                if gap.map_or(true, |(x, _)| g < x) {
                    gap = Some((g, d.v));
                }
            }
            let a = idm_accel(d.v, desired, gap).clamp(-8.0, IDM_ACCEL);
            d.v = (d.v + a * DT).max(0.0);
            d.s = (d.s + d.v * DT).min(r.length());
        }
    }
    out
}

/// A generated scene with the alternative anchor futures it could have had
/// at a junction (one per branch, same speed profile).
#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub scene: Scene,
    /// Left branch chosen (junctions only).
    pub left: Option<bool>,
    /// Anchor futures for `[left, right]` (junctions only).
    pub branch_futures: Option<[Vec<Point>; 2]>,
}

pub fn generate_scene(spec: &ScenarioSpec) -> Result<Scene> {
    Ok(generate(spec)?.scene)
}

pub fn generate(spec: &ScenarioSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let net = match spec.layout {
        Layout::Straight => straight_network(),
        Layout::Curve => curve_network(&mut rng),
        Layout::TJunction => t_junction_network(),
    };
    let (lo, hi) = spec.speed_range;
    let speed = |rng: &mut ChaCha8Rng| if hi > lo { rng.gen_range(lo..hi) } else { lo };

    let branch = if net.anchor_routes.len() > 1 {
        usize::from(!rng.gen_bool(spec.left_prob))
    } else {
        0
    };
    let mut routes: Vec<Route> = net.anchor_routes.clone();
    let first_other = routes.len();
    routes.extend(net.other_routes.iter().cloned());

    let cruise = speed(&mut rng);
    let mut anchor = Driver {
        route: branch,
        s: 0.0,
        v: 0.0,
        cruise,
        leader: None,
        wait_until: 0,
        brake_from: None,
        stop_at: None,
    };
    if spec.stopped {
        let stop = net.stop_line.unwrap_or(net.anchor_start.1);
        anchor.s = stop - rng.gen_range(0.2..1.0);
        anchor.wait_until = OBS_STEPS;
        anchor.cruise = rng.gen_range(6.0..9.0);
    } else {
        // pick the state at the first step so that the anchor is moving
        // and in range when the observation ends
        let (a, b) = net.anchor_start;
        anchor.s = rng.gen_range(a..b) - 1.6 * cruise;
        anchor.v = cruise * rng.gen_range(0.7..1.0);
    }
    let mut drivers = vec![anchor.clone()];

    let mut remaining = spec.agents - 1;
    if remaining > 0 && !spec.stopped && rng.gen_bool(0.6) {
        // lead vehicle on the anchor's route
        let gap = rng.gen_range(12.0..40.0);
        let lead_speed = cruise * rng.gen_range(0.3..0.9);
        let mut lead = Driver {
            route: branch,
            s: anchor.s + gap,
            v: lead_speed,
            cruise: lead_speed,
            leader: None,
            wait_until: 0,
            brake_from: None,
            stop_at: None,
        };
        match rng.gen_range(0..3) {
            0 => lead.brake_from = Some(rng.gen_range(5..OBS_STEPS + 5)),
            1 if net.stop_line.is_some() => lead.stop_at = net.stop_line,
            _ => {}
        }
        drivers.push(lead);
        drivers[0].leader = Some(1);
        remaining -= 1;
    }
    if spec.stopped && remaining > 0 && rng.gen_bool(0.7) {
        // crossing traffic passing the junction while the anchor waits
        let r = first_other + rng.gen_range(0..2);
        let v = speed(&mut rng);
        let s = routes[r].length() * 0.5 - rng.gen_range(0.5..2.5) * v;
        drivers.push(Driver {
            route: r,
            s,
            v,
            cruise: v,
            leader: None,
            wait_until: 0,
            brake_from: None,
            stop_at: None,
        });
        remaining -= 1;
    }
    for _ in 0..remaining {
        let r = first_other + rng.gen_range(0..net.other_routes.len());
        let v = speed(&mut rng);
        let origin = routes[branch].at(drivers[0].s);
        let mut s = 0.0;
        for _ in 0..20 {
            s = rng.gen_range(20.0..routes[r].length() - 60.0);
            if dist(routes[r].at(s), origin) < 50.0 {
                break;
            }
        }
        drivers.push(Driver {
            route: r,
            s,
            v: v * rng.gen_range(0.7..1.0),
            cruise: v,
            leader: None,
            wait_until: 0,
            brake_from: None,
            stop_at: None,
        });
    }

    let initial = drivers.clone();
    let arclengths = simulate(&routes, &mut drivers);

    // random placement in the world
    let world = Se2Transform {
        translation: [rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)],
        ..sample_se2_with(&mut rng)
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).expect("finite sigma");
    let timestamps: Vec<f64> = (0..SCENE_STEPS).map(|k| k as f64 * DT).collect();
    let mut agents = Vec::with_capacity(drivers.len());
    for (i, d) in drivers.iter().enumerate() {
        let positions = arclengths[i]
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let mut p = routes[d.route].at(s);
                if k < OBS_STEPS && spec.noise_sigma > 0.0 {
                    p[0] += noise.sample(&mut rng);
                    p[1] += noise.sample(&mut rng);
                }
                world.apply(p)
            })
            .collect();
        agents.push(AgentTrack::new(format!("agent_{i}"), positions, timestamps.clone()));
    }

    let anchor_last = routes[branch].at(arclengths[0][OBS_STEPS - 1]);
    let mut polylines = Vec::new();
    for lane in &net.lanes {
        for piece in lane_pieces(lane) {
            if piece.distance_to(anchor_last) <= MAP_RADIUS {
                let pts = piece.points.iter().map(|p| world.apply(*p)).collect();
                polylines.push(Polyline::new(pts, piece.width)?);
            }
        }
    }

    let (left, branch_futures) = if net.anchor_routes.len() > 1 {
        // replay with every vehicle on the anchor's route sent down branch b
        let fut = |b: usize| -> Vec<Point> {
            let mut alt = initial.clone();
            for d in alt.iter_mut().filter(|d| d.route == branch) {
                d.route = b;
            }
            let s = simulate(&routes, &mut alt);
            s[0][OBS_STEPS..].iter().map(|&s| world.apply(routes[b].at(s))).collect()
        };
        (Some(branch == 0), Some([fut(0), fut(1)]))
    } else {
        (None, None)
    };

    let scene = Scene {
        scene_id: format!("synth_{:016x}", spec.seed),
        dt: DT,
        n_obs: OBS_STEPS,
        n_pred: SCENE_STEPS - OBS_STEPS,
        anchor_id: "agent_0".into(),
        agents,
        polylines,
        frame: Se2Transform::identity(),
    };
    scene.validate()?;
    Ok(GeneratedScene {
        scene,
        left,
        branch_futures,
    })
}

/// Stopped-at-junction probe: the anchor stands still in front of a
/// T-junction during the observation and then turns.
pub fn junction_probe(seed: u64) -> Result<GeneratedScene> {
    let spec = ScenarioSpec {
        stopped: true,
        ..ScenarioSpec::new(Layout::TJunction, seed)
    };
    generate(&spec)
}

/// Scenario kinds a dataset mixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Straight,
    Curve,
    TJunction,
    StoppedJunction,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Straight => "straight",
            Scenario::Curve => "curve",
            Scenario::TJunction => "t_junction",
            Scenario::StoppedJunction => "stopped_junction",
        }
    }

    pub fn spec(self, seed: u64) -> ScenarioSpec {
        let layout = match self {
            Scenario::Straight => Layout::Straight,
            Scenario::Curve => Layout::Curve,
            Scenario::TJunction | Scenario::StoppedJunction => Layout::TJunction,
        };
        let mut s = ScenarioSpec::new(layout, seed);
        s.stopped = self == Scenario::StoppedJunction;
        s
    }

    pub fn is_junction(self) -> bool {
        matches!(self, Scenario::TJunction | Scenario::StoppedJunction)
    }
}

/// Relative frequencies of scenario kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mix(pub Vec<(Scenario, f64)>);

impl Default for Mix {
    fn default() -> Self {
        Mix(vec![
            (Scenario::Straight, 0.25),
            (Scenario::Curve, 0.3),
            (Scenario::TJunction, 0.3),
            (Scenario::StoppedJunction, 0.15),
        ])
    }
}

impl std::str::FromStr for Mix {
    type Err = Error;
    /// `straight=1,curve=1,t_junction=2,stopped_junction=0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mix entry {part:?} is not name=weight")))?;
            let kind = match k.trim() {
                "straight" => Scenario::Straight,
                "curve" => Scenario::Curve,
                "t_junction" => Scenario::TJunction,
                "stopped_junction" => Scenario::StoppedJunction,
                other => return Err(Error::Config(format!("unknown scenario {other:?} in mix"))),
            };
            let w: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("mix weight {v:?} is not a number")))?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("mix weight {w} must be non-negative")));
            }
            out.push((kind, w));
        }
        if out.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(Error::Config("mix weights sum to zero".into()));
        }
        Ok(Mix(out))
    }
}

impl Mix {
    fn pick(&self, u: f64) -> Scenario {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut acc = 0.0;
        for (k, w) in &self.0 {
            acc += w / total;
            if u < acc {
                return *k;
            }
        }
        self.0.iter().rev().find(|(_, w)| *w > 0.0).unwrap().0
    }
}

/// Per-scene seed from the dataset seed and scene index (splitmix64).
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: String,
    pub scenario: Scenario,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub n: usize,
    pub mix: Mix,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Scene list for a dataset; every tenth scene is held out.
    pub fn plan(n: usize, mix: &Mix, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        let scenes = (0..n)
            .map(|i| {
                let s = scene_seed(seed, i);
                let kind = mix.pick(ChaCha8Rng::seed_from_u64(s ^ 0x5eed).gen::<f64>());
                let split = if i % 10 == 9 { "val" } else { "train" };
                ManifestEntry {
                    file: format!("{split}/scene_{i:05}.json"),
                    split: split.into(),
                    scenario: kind,
                    seed: s,
                }
            })
            .collect();
        Ok(Self {
            version: 1,
            seed,
            n,
            mix: mix.clone(),
            scenes,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

/// Write every scene of `manifest` plus the manifest itself under `out`.
pub fn write_dataset(manifest: &DatasetManifest, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(manifest.scenes.len() + 1);
    for split in ["train", "val"] {
        let d = out.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for e in &manifest.scenes {
        let scene = generate_scene(&e.scenario.spec(e.seed))?;
        let path = out.join(&e.file);
        save_scene(&scene, &path)?;
        written.push(path);
    }
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialises") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn generate_dataset(n: usize, mix: &Mix, seed: u64, out: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::plan(n, mix, seed)?;
    write_dataset(&m, out)?;
    Ok(m)
}

/// Regenerate one manifest entry in memory and compare with its JSON text.
pub fn regenerate_json(entry: &ManifestEntry) -> Result<String> {
    scene_to_json(&generate_scene(&entry.scenario.spec(entry.seed))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(layout: Layout, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            noise_sigma: 0.0,
            ..ScenarioSpec::new(layout, seed)
        }
    }

    #[test]
    fn straight_future_lies_on_a_centerline() {
        for seed in 0..20 {
            let s = generate_scene(&clean(Layout::Straight, seed)).unwrap();
            for p in &s.agents[0].positions[OBS_STEPS..] {
                let d = s.polylines.iter().map(|l| l.distance_to(*p)).fold(f64::INFINITY, f64::min);
                assert!(d < 1e-9, "seed {seed}: {d}");
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        for layout in [Layout::Straight, Layout::Curve, Layout::TJunction] {
            let a = scene_to_json(&generate_scene(&ScenarioSpec::new(layout, 9)).unwrap()).unwrap();
            let b = scene_to_json(&generate_scene(&ScenarioSpec::new(layout, 9)).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn junction_branches_are_balanced() {
        let n = 1000;
        let left = (0..n)
            .filter(|&i| generate(&ScenarioSpec::new(Layout::TJunction, i)).unwrap().left.unwrap())
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((left - 500.0).abs() <= 3.0 * sigma, "left {left}");
    }

    #[test]
    fn futures_stay_on_the_road() {
        for seed in 0..30 {
            for layout in [Layout::Straight, Layout::Curve, Layout::TJunction] {
                let s = generate_scene(&ScenarioSpec::new(layout, seed)).unwrap();
                for a in &s.agents {
                    let fut = &a.positions[OBS_STEPS..];
                    let ok = fut
                        .iter()
                        .all(|p| s.polylines.iter().any(|l| l.distance_to(*p) <= l.width));
                    // agents far from the anchor may leave the cropped map
                    if a.id == s.anchor_id {
                        assert!(ok, "{layout:?} seed {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn straight_speed_matches_finite_differences() {
        let routes = vec![Route::new(straight_network().anchor_routes[0].pts.clone())];
        let mut d = vec![Driver {
            route: 0,
            s: 50.0,
            v: 10.0,
            cruise: 12.0,
            leader: None,
            wait_until: 0,
            brake_from: None,
            stop_at: None,
        }];
        let s = simulate(&routes, &mut d);
        let mut v = 10.0;
        for k in 1..SCENE_STEPS {
            let a = idm_accel(v, 12.0, None).clamp(-8.0, IDM_ACCEL);
            v = (v + a * DT).max(0.0);
            let p0 = routes[0].at(s[0][k - 1]);
            let p1 = routes[0].at(s[0][k]);
            assert!((dist(p0, p1) / DT - v).abs() < 1e-6);
        }
    }

    #[test]
    fn stopped_probe_waits_then_turns() {
        for seed in 0..10 {
            let g = junction_probe(seed).unwrap();
            let a = &g.scene.agents[0];
            let moved = dist(a.positions[0], a.positions[OBS_STEPS - 1]);
            assert!(moved < 1.0, "observation should be stationary up to noise");
            let [l, r] = g.branch_futures.unwrap();
            assert!(dist(*l.last().unwrap(), *r.last().unwrap()) > 4.0);
        }
    }

    #[test]
    fn mix_parses_and_rejects() {
        let m: Mix = "straight=1, t_junction=3".parse().unwrap();
        assert_eq!(m.0.len(), 2);
        assert!("bogus=1".parse::<Mix>().is_err());
        assert!("straight=x".parse::<Mix>().is_err());
        assert!("straight=0".parse::<Mix>().is_err());
    }

    #[test]
    fn ten_scenes_split_nine_to_one() {
        let m = DatasetManifest::plan(10, &Mix::default(), 1).unwrap();
        assert_eq!(m.scenes.iter().filter(|e| e.split == "train").count(), 9);
        assert_eq!(m.scenes.iter().filter(|e| e.split == "val").count(), 1);
    }
}
