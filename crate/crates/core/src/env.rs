//! Obstacle-avoidance navigation environment with per-step interval restrictions.
//!
//! The agent moves a fixed distance per step in the direction `perspective + action`.
//! Every step returns, besides the usual observation and reward, the allowed action set
//! for the next step, derived geometrically from walls and obstacles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    canonical_polygon, inflate, normalize_180, normalize_360, restricted_angles, walls, ConvexPolygon, Form, Obstacle,
    Point2, Pose,
};
use crate::intervals::{difference, ActionSpace, IntervalSet, RestrictionSet};
use crate::rng::{stream, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Reward on entering the goal region.
    pub goal: f64,
    /// Magnitude of the (negative) reward on collision.
    pub collision: f64,
    /// Scale `c` of the distance-improvement term.
    pub improvement_scale: f64,
    /// Scale `p` of the step-index penalty.
    pub step_penalty_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            goal: 50.0,
            collision: 20.0,
            improvement_scale: 5.0,
            step_penalty_scale: 0.05,
        }
    }
}

/// Parameters of the random obstacle generator.
///
/// Second moments of scalar normals are variances; the waypoint direction takes a
/// standard deviation in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleGen {
    pub count: usize,
    pub location_mean: [f64; 2],
    pub location_cov: [[f64; 2]; 2],
    pub radius_mean: f64,
    pub radius_var: f64,
    pub radius_clip: [f64; 2],
    pub waypoints: usize,
    pub waypoint_distance_mean: f64,
    pub waypoint_distance_var: f64,
    #[serde(default)]
    pub waypoint_direction_mean: f64,
    #[serde(default = "default_direction_std")]
    pub waypoint_direction_std: f64,
    pub waypoint_step: f64,
    /// Minimum gap between raw obstacle polygons and to the start and goal points.
    /// Defaults to `agent_radius + safety_distance`, which keeps start and goal outside
    /// every collision zone.
    #[serde(default)]
    pub min_clearance: Option<f64>,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_direction_std() -> f64 {
    180.0
}

fn default_attempts() -> usize {
    1000
}

impl ObstacleGen {
    /// Four obstacles moving between two waypoints.
    pub fn moving_four() -> Self {
        Self {
            count: 4,
            location_mean: [7.5, 7.5],
            location_cov: [[7.5, 0.0], [0.0, 7.5]],
            radius_mean: 1.0,
            radius_var: 0.25,
            radius_clip: [0.25, 1.75],
            waypoints: 1,
            waypoint_distance_mean: 4.0,
            waypoint_distance_var: 0.25,
            waypoint_direction_mean: 0.0,
            waypoint_direction_std: default_direction_std(),
            waypoint_step: 0.1,
            min_clearance: None,
            max_attempts: default_attempts(),
        }
    }

    /// Fourteen static obstacles biased towards the map center.
    pub fn complex() -> Self {
        Self {
            count: 14,
            location_cov: [[4.0, 0.0], [0.0, 4.0]],
            radius_clip: [0.5, 1.5],
            waypoints: 0,
            waypoint_step: 0.0,
            ..Self::moving_four()
        }
    }
}

/// How obstacles are laid out at reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObstacleLayout {
    None,
    /// One obstacle at the map center with diameter `~ U(size_min, size_max)`.
    Simple {
        size_min: f64,
        size_max: f64,
    },
    Random(ObstacleGen),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub width: f64,
    pub height: f64,
    pub max_steps: usize,
    pub agent_step: f64,
    pub agent_radius: f64,
    pub safety_distance: f64,
    pub action_min: f64,
    pub action_max: f64,
    pub start: Point2,
    pub start_perspective: f64,
    pub goal: Point2,
    pub goal_threshold: f64,
    pub reward: RewardConfig,
    pub obstacles: ObstacleLayout,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 15.0,
            height: 15.0,
            max_steps: 40,
            agent_step: 1.0,
            agent_radius: 0.4,
            safety_distance: 0.05,
            action_min: -110.0,
            action_max: 110.0,
            start: Point2::new(1.0, 1.0),
            start_perspective: 90.0,
            goal: Point2::new(12.0, 12.0),
            goal_threshold: 0.5,
            reward: RewardConfig::default(),
            obstacles: ObstacleLayout::None,
        }
    }
}

impl EnvConfig {
    pub fn with_obstacles(layout: ObstacleLayout) -> Self {
        Self {
            obstacles: layout,
            ..Self::default()
        }
    }

    /// Evaluation scenarios by name: `none`, `simple`, `complex`, `moving`.
    pub fn scenario(name: &str) -> Result<Self> {
        let layout = match name {
            "none" => ObstacleLayout::None,
            "simple" => ObstacleLayout::Simple {
                size_min: 0.2,
                size_max: 6.8,
            },
            "complex" => ObstacleLayout::Random(ObstacleGen::complex()),
            "moving" => ObstacleLayout::Random(ObstacleGen::moving_four()),
            other => return Err(Error::InvalidArgument(format!("unknown scenario '{other}'"))),
        };
        Ok(Self::with_obstacles(layout))
    }

    pub fn action_space(&self) -> Result<ActionSpace> {
        ActionSpace::new(self.action_min, self.action_max)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("height", self.height),
            ("agent_step", self.agent_step),
            ("agent_radius", self.agent_radius),
            ("goal_threshold", self.goal_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.safety_distance >= 0.0) {
            return Err(Error::InvalidArgument("safety_distance must be >= 0".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
        }
        self.action_space()?;
        let inside = |p: Point2| p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height;
        if !inside(self.start) || !inside(self.goal) {
            return Err(Error::InvalidArgument("start and goal must lie inside the map".into()));
        }
        Ok(())
    }

    /// Distance that keeps the agent's body plus safety margin clear of an obstacle.
    pub fn zone_margin(&self) -> f64 {
        self.agent_radius + self.safety_distance
    }
}

/// The six-component observation `(x, y, δ_goal, d_goal, perspective, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    /// Angle to the goal relative to the heading, degrees in (−180, 180].
    pub goal_angle: f64,
    pub goal_distance: f64,
    /// Heading in degrees, `[0, 360)`.
    pub perspective: f64,
    pub t: usize,
}

impl Observation {
    pub const LEN: usize = 6;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.x,
            self.y,
            self.goal_angle,
            self.goal_distance,
            self.perspective,
            self.t as f64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pose: Pose,
    pub obstacles: Vec<Obstacle>,
    pub t: usize,
    pub prev_goal_distance: f64,
    pub goal_reached: bool,
    pub collided: bool,
    pub truncated: bool,
}

impl EnvState {
    pub fn is_done(&self) -> bool {
        self.goal_reached || self.collided || self.truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collided: bool,
    pub goal_reached: bool,
    pub executed_action: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Allowed actions for the next step.
    pub allowed: IntervalSet,
    pub info: StepInfo,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// One line of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub perspective: f64,
    pub action: f64,
    pub reward: f64,
    pub allowed: IntervalSet,
}

fn polygon_distance(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    if a.vertices().iter().any(|v| b.contains(*v)) || b.vertices().iter().any(|v| a.contains(*v)) {
        return 0.0;
    }
    a.edges()
        .map(|(p, q)| b.distance_to_segment(p, q))
        .fold(f64::INFINITY, f64::min)
}

fn sample_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    if std <= 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("finite std").sample(rng)
}

/// Draws obstacles following the configured distributions, rejecting invalid placements.
pub fn generate_obstacles<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Result<Vec<Obstacle>> {
    match &cfg.obstacles {
        ObstacleLayout::None => Ok(Vec::new()),
        ObstacleLayout::Simple { size_min, size_max } => {
            let form = Form::ALL[rng.random_range(0..Form::ALL.len())];
            let size = rng.random_range(*size_min..=*size_max);
            let center = Point2::new(cfg.width / 2.0, cfg.height / 2.0);
            Ok(vec![Obstacle::fixed(form, center, size / 2.0)?])
        }
        ObstacleLayout::Random(g) => generate_random(cfg, g, rng),
    }
}

fn generate_random<R: Rng + ?Sized>(cfg: &EnvConfig, g: &ObstacleGen, rng: &mut R) -> Result<Vec<Obstacle>> {
    let clearance = g.min_clearance.unwrap_or(cfg.zone_margin());
    let [[s11, s12], [_, s22]] = g.location_cov;
    // Cholesky factor of the 2×2 covariance.
    let l11 = s11.max(0.0).sqrt();
    let l21 = if l11 > 0.0 { s12 / l11 } else { 0.0 };
    let l22 = (s22 - l21 * l21).max(0.0).sqrt();
    let inside = |poly: &ConvexPolygon| {
        poly.vertices()
            .iter()
            .all(|v| v.x >= 0.0 && v.x <= cfg.width && v.y >= 0.0 && v.y <= cfg.height)
    };

    let mut placed: Vec<Obstacle> = Vec::with_capacity(g.count);
    let mut polys: Vec<ConvexPolygon> = Vec::with_capacity(g.count);
    for index in 0..g.count {
        let form = Form::ALL[rng.random_range(0..Form::ALL.len())];
        let radius = sample_normal(rng, g.radius_mean, g.radius_var.sqrt()).clamp(g.radius_clip[0], g.radius_clip[1]);
        let mut found = None;
        for _ in 0..g.max_attempts {
            let z1 = sample_normal(rng, 0.0, 1.0);
            let z2 = sample_normal(rng, 0.0, 1.0);
            let c = Point2::new(g.location_mean[0] + l11 * z1, g.location_mean[1] + l21 * z1 + l22 * z2);
            let poly = canonical_polygon(form, c, radius);
            let valid = inside(&poly)
                && poly.distance_to_point(cfg.start) >= clearance
                && poly.distance_to_point(cfg.goal) >= clearance
                && polys.iter().all(|other| polygon_distance(&poly, other) >= clearance);
            if valid {
                found = Some((c, poly));
                break;
            }
        }
        let Some((center, poly)) = found else {
            return Err(Error::MapTooCrowded {
                index,
                attempts: g.max_attempts,
            });
        };
        let mut waypoints = Vec::with_capacity(g.waypoints);
        let mut last = center;
        for _ in 0..g.waypoints {
            let distance = sample_normal(rng, g.waypoint_distance_mean, g.waypoint_distance_var.sqrt());
            let mut next = None;
            for _ in 0..g.max_attempts {
                let dir = sample_normal(rng, g.waypoint_direction_mean, g.waypoint_direction_std);
                let p = last.add(Point2::from_angle_deg(dir).scale(distance));
                if inside(&canonical_polygon(form, p, radius)) {
                    next = Some(p);
                    break;
                }
            }
            let Some(p) = next else {
                return Err(Error::MapTooCrowded {
                    index,
                    attempts: g.max_attempts,
                });
            };
            waypoints.push(p);
            last = p;
        }
        placed.push(Obstacle::moving(form, center, radius, &waypoints, g.waypoint_step)?);
        polys.push(poly);
    }
    Ok(placed)
}

/// Allowed set for `state`, computed from scratch (no cached collision zones).
pub fn derive_allowed(state: &EnvState, cfg: &EnvConfig) -> Result<IntervalSet> {
    let margin = cfg.zone_margin();
    let zones: Vec<ConvexPolygon> = walls(cfg.width, cfg.height)
        .iter()
        .chain(state.obstacles.iter().map(|o| o.polygon()).collect::<Vec<_>>().iter())
        .map(|p| inflate(p, margin))
        .collect();
    allowed_from_zones(&state.pose, zones.iter(), cfg)
}

fn allowed_from_zones<'a>(
    pose: &Pose,
    zones: impl Iterator<Item = &'a ConvexPolygon>,
    cfg: &EnvConfig,
) -> Result<IntervalSet> {
    let mut parts = Vec::new();
    for zone in zones {
        parts.extend_from_slice(restricted_angles(pose, zone, cfg.agent_step).intervals());
    }
    Ok(difference(&cfg.action_space()?, &RestrictionSet::from_unsorted(parts)))
}

/// A running environment with cached collision zones.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    space: ActionSpace,
    wall_zones: Vec<ConvexPolygon>,
    /// Collision zones of the obstacles, relative to their centers.
    templates: Vec<ConvexPolygon>,
    state: EnvState,
    allowed: IntervalSet,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let space = cfg.action_space()?;
        let margin = cfg.zone_margin();
        let wall_zones = walls(cfg.width, cfg.height)
            .iter()
            .map(|w| inflate(w, margin))
            .collect();
        let state = EnvState {
            pose: Pose::new(cfg.start, cfg.start_perspective),
            obstacles: Vec::new(),
            t: 0,
            prev_goal_distance: cfg.start.dist(cfg.goal),
            goal_reached: false,
            collided: false,
            truncated: false,
        };
        Ok(Self {
            cfg,
            space,
            wall_zones,
            templates: Vec::new(),
            state,
            allowed: space.full_set(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_space(&self) -> ActionSpace {
        self.space
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn allowed(&self) -> &IntervalSet {
        &self.allowed
    }

    /// Starts a new episode whose obstacle layout is determined by `env_seed`.
    pub fn reset(&mut self, env_seed: u64) -> Result<(Observation, IntervalSet)> {
        let mut rng: ChaCha8Rng = stream(env_seed, Role::Env);
        let obstacles = generate_obstacles(&self.cfg, &mut rng)?;
        self.reset_with(obstacles)
    }

    /// Starts a new episode with an explicit obstacle list.
    pub fn reset_with(&mut self, obstacles: Vec<Obstacle>) -> Result<(Observation, IntervalSet)> {
        let margin = self.cfg.zone_margin();
        self.templates = obstacles
            .iter()
            .map(|o| inflate(&canonical_polygon(o.form, Point2::default(), o.radius), margin))
            .collect();
        self.state = EnvState {
            pose: Pose::new(self.cfg.start, self.cfg.start_perspective),
            obstacles,
            t: 0,
            prev_goal_distance: self.cfg.start.dist(self.cfg.goal),
            goal_reached: false,
            collided: false,
            truncated: false,
        };
        self.allowed = self.compute_allowed()?;
        Ok((self.observation(), self.allowed.clone()))
    }

    /// Restores a previously captured state (obstacle zones are rebuilt).
    pub fn restore(&mut self, state: EnvState) -> Result<IntervalSet> {
        let snapshot = state.clone();
        self.reset_with(state.obstacles)?;
        self.state = snapshot;
        self.allowed = self.compute_allowed()?;
        Ok(self.allowed.clone())
    }

    fn compute_allowed(&self) -> Result<IntervalSet> {
        let obstacle_zones: Vec<ConvexPolygon> = self
            .state
            .obstacles
            .iter()
            .zip(&self.templates)
            .map(|(o, z)| z.translate(o.center))
            .collect();
        allowed_from_zones(
            &self.state.pose,
            self.wall_zones.iter().chain(obstacle_zones.iter()),
            &self.cfg,
        )
    }

    pub fn observation(&self) -> Observation {
        let p = self.state.pose;
        let to_goal = self.cfg.goal.sub(p.position);
        Observation {
            x: p.position.x,
            y: p.position.y,
            goal_angle: normalize_180(to_goal.angle_deg() - p.perspective),
            goal_distance: to_goal.norm(),
            perspective: p.perspective,
            t: self.state.t,
        }
    }

    /// Executes `action` (degrees relative to the heading).
    ///
    /// An action inside a restricted interval is a collision: the agent does not move,
    /// receives `−collision` and the episode terminates.
    pub fn step(&mut self, action: f64) -> Result<StepResult> {
        if self.state.is_done() {
            return Err(Error::EpisodeFinished);
        }
        if !self.space.contains(action) {
            return Err(Error::ActionOutOfRange {
                action,
                min: self.space.min,
                max: self.space.max,
            });
        }
        let cfg = &self.cfg;
        self.state.t += 1;
        if !self.allowed.contains(action) {
            self.state.collided = true;
            return Ok(StepResult {
                observation: self.observation(),
                reward: -self.cfg.reward.collision,
                terminated: true,
                truncated: false,
                allowed: self.allowed.clone(),
                info: StepInfo {
                    collided: true,
                    goal_reached: false,
                    executed_action: action,
                },
            });
        }

        let heading = self.state.pose.perspective + action;
        let position = self
            .state
            .pose
            .position
            .add(Point2::from_angle_deg(heading).scale(cfg.agent_step));
        self.state.pose = Pose {
            position,
            perspective: normalize_360(heading),
        };
        for ob in &mut self.state.obstacles {
            ob.advance();
        }

        let d = position.dist(cfg.goal);
        let t = self.state.t;
        let (reward, terminated) = if d < cfg.goal_threshold {
            self.state.goal_reached = true;
            (cfg.reward.goal, true)
        } else {
            let r = cfg.reward.improvement_scale * (self.state.prev_goal_distance - d)
                - cfg.reward.step_penalty_scale * t as f64;
            (r, false)
        };
        self.state.prev_goal_distance = d;
        let truncated = !terminated && t >= cfg.max_steps;
        self.state.truncated = truncated;
        self.allowed = self.compute_allowed()?;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            terminated,
            truncated,
            allowed: self.allowed.clone(),
            info: StepInfo {
                collided: false,
                goal_reached: terminated,
                executed_action: action,
            },
        })
    }
}
