//! Node kinematics and velocity sensing.
//!
//! Random-waypoint draws consume the stream in a fixed order: waypoint `x`,
//! waypoint `y`, then speed, each as one `f64` in `[0, 1)` scaled to its range
//! (`x * width`, `y * height`, `v_min + u * (v_max - v_min)`).

use std::ops::{Add, Mul, Sub};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2::new(a[0], a[1])
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub width: f64,
    pub height: f64,
}

impl World {
    pub fn contains(&self, p: Vec2) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityModel {
    Static,
    ConstantVelocity,
    #[default]
    RandomWaypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityConfig {
    pub model: MobilityModel,
    pub v_min: f64,
    pub v_max: f64,
    pub pause_time: f64,
    /// Standard deviation of the per-axis velocity sensing error, m/s.
    pub sensing_noise: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            model: MobilityModel::RandomWaypoint,
            v_min: 0.0,
            v_max: 5.0,
            pause_time: 0.0,
            sensing_noise: 0.0,
        }
    }
}

/// Random-waypoint legs never go slower than this (or `v_max`, if smaller),
/// otherwise a zero speed draw would park the node forever.
pub const MIN_LEG_SPEED: f64 = 0.1;

impl MobilityConfig {
    fn leg_speed(&self, u: f64) -> f64 {
        let s = self.v_min + u * (self.v_max - self.v_min);
        s.max(MIN_LEG_SPEED.min(self.v_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: Vec2,
    pub velocity: Vec2,
    pub waypoint: Option<Vec2>,
    /// Speed of the current random-waypoint leg.
    pub leg_speed: f64,
    pub pause_until: f64,
}

impl Kinematics {
    pub fn at_rest(position: Vec2) -> Self {
        Self {
            position,
            velocity: Vec2::ZERO,
            waypoint: None,
            leg_speed: 0.0,
            pause_until: 0.0,
        }
    }

    /// Initial kinematics for a node placed at `position`.
    ///
    /// Constant-velocity nodes draw a heading and a speed; random-waypoint
    /// nodes draw their first leg so they are moving from time zero.
    pub fn spawn<R: Rng + ?Sized>(position: Vec2, cfg: &MobilityConfig, world: &World, rng: &mut R) -> Self {
        let mut k = Self::at_rest(position);
        match cfg.model {
            MobilityModel::Static => {}
            MobilityModel::ConstantVelocity => {
                let heading = rng.random::<f64>() * std::f64::consts::TAU;
                let speed = cfg.v_min + rng.random::<f64>() * (cfg.v_max - cfg.v_min);
                k.velocity = Vec2::new(heading.cos(), heading.sin()) * speed;
            }
            MobilityModel::RandomWaypoint => k.start_leg(cfg, world, rng),
        }
        k
    }

    fn start_leg<R: Rng + ?Sized>(&mut self, cfg: &MobilityConfig, world: &World, rng: &mut R) {
        let wx = rng.random::<f64>() * world.width;
        let wy = rng.random::<f64>() * world.height;
        let speed = cfg.leg_speed(rng.random::<f64>());
        let target = Vec2::new(wx, wy);
        self.waypoint = Some(target);
        self.leg_speed = speed;
        self.velocity = direction(target - self.position) * speed;
    }
}

fn direction(d: Vec2) -> Vec2 {
    let n = d.norm();
    if n > 0.0 {
        d * (1.0 / n)
    } else {
        Vec2::ZERO
    }
}

/// Fold `p + v*dt` back into `[0, len]` with specular reflection.
fn reflect_axis(p: f64, v: f64, dt: f64, len: f64) -> (f64, f64) {
    let unfolded = p + v * dt;
    let band = (unfolded / len).floor();
    if band.rem_euclid(2.0) == 0.0 {
        (unfolded - band * len, v)
    } else {
        ((band + 1.0) * len - unfolded, -v)
    }
}

/// Advance `k` by `dt` seconds starting at simulation time `now`.
pub fn step_kinematics<R: Rng + ?Sized>(
    k: &Kinematics,
    cfg: &MobilityConfig,
    world: &World,
    now: f64,
    dt: f64,
    rng: &mut R,
) -> Kinematics {
    let mut k = *k;
    match cfg.model {
        MobilityModel::Static => {}
        MobilityModel::ConstantVelocity => {
            let (x, vx) = reflect_axis(k.position.x, k.velocity.x, dt, world.width);
            let (y, vy) = reflect_axis(k.position.y, k.velocity.y, dt, world.height);
            k.position = Vec2::new(x, y);
            k.velocity = Vec2::new(vx, vy);
        }
        MobilityModel::RandomWaypoint => {
            let end = now + dt;
            let mut t = now;
            // Bounded so that degenerate zero-length legs cannot spin forever.
            for _ in 0..10_000 {
                if t >= end {
                    break;
                }
                if t < k.pause_until {
                    k.velocity = Vec2::ZERO;
                    t = k.pause_until.min(end);
                    continue;
                }
                let target = match k.waypoint {
                    Some(w) => w,
                    None => {
                        k.start_leg(cfg, world, rng);
                        continue;
                    }
                };
                let remaining = target.distance(k.position);
                let arrive = if k.leg_speed > 0.0 { remaining / k.leg_speed } else { f64::INFINITY };
                if t + arrive <= end {
                    k.position = target;
                    t += arrive;
                    k.waypoint = None;
                    k.pause_until = t + cfg.pause_time;
                    k.velocity = Vec2::ZERO;
                } else {
                    k.velocity = direction(target - k.position) * k.leg_speed;
                    k.position = k.position + k.velocity * (end - t);
                    t = end;
                }
            }
            k.position = Vec2::new(k.position.x.clamp(0.0, world.width), k.position.y.clamp(0.0, world.height));
        }
    }
    k
}

/// Magnitude of the velocity difference, m/s.
pub fn relative_speed(a: &Kinematics, b: &Kinematics) -> f64 {
    (a.velocity - b.velocity).norm()
}

/// Velocity as reported by the node's motion sensor.
pub fn sense_velocity<R: Rng + ?Sized>(k: &Kinematics, noise_std: f64, rng: &mut R) -> Vec2 {
    if noise_std <= 0.0 {
        return k.velocity;
    }
    let noise = Normal::new(0.0, noise_std).expect("finite positive std");
    Vec2::new(k.velocity.x + noise.sample(rng), k.velocity.y + noise.sample(rng))
}
