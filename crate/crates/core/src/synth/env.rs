//! Point-mass manipulation environment: velocity-controlled end-effector,
//! axis-aligned box pushing on contact, per-task success predicates.
//! Dynamics contain no randomness; a seed fixes only the initial layout.

use super::render::{render_with_ee, EePose};
use super::{generate_scene, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::latent::ImageFrame;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Reach,
    PushToZone,
    PressButton,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::PushToZone => "push_to_zone",
            Task::PressButton => "press_button",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "reach" => Ok(Task::Reach),
            "push_to_zone" => Ok(Task::PushToZone),
            "press_button" => Ok(Task::PressButton),
            other => Err(Error::InvalidArgument(format!("unknown task {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub res: usize,
    pub views: usize,
    pub step_cap: usize,
    pub scene: SceneConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            res: 64,
            views: 2,
            step_cap: 60,
            scene: SceneConfig::default(),
        }
    }
}

/// Per-step movement scale: action components in [-1,1] translate by up to
/// this many scene units.
pub const STEP_SCALE: f64 = 0.05;
const EE_CONTACT: f64 = 0.02;
/// Success radius for reach, in pixels of the rendered frame.
pub const REACH_TOL_PX: f64 = 2.0;

pub struct StepOutcome {
    pub frames: Vec<ImageFrame>,
    pub done: bool,
    pub success: bool,
    /// Set when the action had to be clamped into [-1,1].
    pub clamped: bool,
}

#[derive(Clone)]
pub struct ToyEnv {
    pub cfg: EnvConfig,
    pub task: Task,
    pub scene: Scene,
    pub ee: (f64, f64),
    pub gripper: f64,
    pub steps: usize,
    done: bool,
    success: bool,
}

impl ToyEnv {
    /// Deterministic reset: layout and start pose derive from the seed.
    pub fn reset(seed: u64, task: Task, cfg: EnvConfig) -> Self {
        let scene = generate_scene(seed, &cfg.scene);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(17));
        let ee = (
            0.25 + 0.5 * rng.gen::<f64>(),
            0.78 + 0.12 * rng.gen::<f64>(),
        );
        ToyEnv {
            cfg,
            task,
            scene,
            ee,
            gripper: 1.0,
            steps: 0,
            done: false,
            success: false,
        }
    }

    pub fn instruction(&self) -> String {
        super::instruction_for(self.task, &self.scene)
    }

    pub fn observe(&self) -> Vec<ImageFrame> {
        let ee = EePose {
            pos: self.ee,
            gripper: self.gripper,
        };
        (0..self.cfg.views)
            .map(|v| render_with_ee(&self.scene, v, self.cfg.res, Some(&ee)))
            .collect()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    fn check_success(&self) -> bool {
        let target = &self.scene.objects[0];
        match self.task {
            Task::Reach => {
                let tol = REACH_TOL_PX / self.cfg.res as f64;
                let d = ((self.ee.0 - target.pos.0).powi(2) + (self.ee.1 - target.pos.1).powi(2))
                    .sqrt();
                d <= tol
            }
            Task::PushToZone => self.scene.target_zone.contains(target.pos),
            Task::PressButton => {
                let inside = (self.ee.0 - target.pos.0).abs() <= target.size
                    && (self.ee.1 - target.pos.1).abs() <= target.size;
                inside && self.gripper < -0.5
            }
        }
    }

    /// Advance one step. Out-of-range action components are clamped and
    /// flagged. Contact pushes objects along the axis of least penetration.
    pub fn step(&mut self, action: [f64; 3]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EnvStep("episode already finished".into()));
        }
        let mut clamped = false;
        let mut a = action;
        for v in a.iter_mut() {
            if !v.is_finite() {
                return Err(Error::EnvStep("non-finite action".into()));
            }
            if *v < -1.0 || *v > 1.0 {
                *v = v.clamp(-1.0, 1.0);
                clamped = true;
            }
        }
        self.ee.0 = (self.ee.0 + a[0] * STEP_SCALE).clamp(0.0, 1.0);
        self.ee.1 = (self.ee.1 + a[1] * STEP_SCALE).clamp(0.0, 1.0);
        self.gripper = a[2];

        // axis-aligned pushing: resolve overlap along the shallower axis.
        // Reach targets and buttons are fixtures and do not move.
        let pushable = matches!(self.task, Task::PushToZone);
        for o in self.scene.objects.iter_mut().take(if pushable {
            usize::MAX
        } else {
            0
        }) {
            let rx = o.size + EE_CONTACT;
            let pdx = rx - (self.ee.0 - o.pos.0).abs();
            let pdy = rx - (self.ee.1 - o.pos.1).abs();
            if pdx > 0.0 && pdy > 0.0 {
                if pdx < pdy {
                    o.pos.0 += pdx * (o.pos.0 - self.ee.0).signum();
                } else {
                    o.pos.1 += pdy * (o.pos.1 - self.ee.1).signum();
                }
                o.pos.0 = o.pos.0.clamp(o.size, 1.0 - o.size);
                o.pos.1 = o.pos.1.clamp(o.size, 1.0 - o.size);
            }
        }

        self.steps += 1;
        self.success = self.check_success();
        self.done = self.success || self.steps >= self.cfg.step_cap;
        Ok(StepOutcome {
            frames: self.observe(),
            done: self.done,
            success: self.success,
            clamped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EnvConfig {
        EnvConfig {
            res: 32,
            views: 1,
            step_cap: 10,
            scene: SceneConfig::default(),
        }
    }

    #[test]
    fn zero_actions_leave_state_unchanged() {
        let mut env = ToyEnv::reset(1, Task::Reach, small_cfg());
        let ee0 = env.ee;
        let obj0 = env.scene.objects[0].pos;
        for _ in 0..10 {
            let out = env.step([0.0, 0.0, 1.0]).unwrap();
            if out.done {
                assert!(!out.success);
            }
        }
        assert_eq!(env.ee, ee0);
        assert_eq!(env.scene.objects[0].pos, obj0);
        assert!(env.is_done());
        assert!(!env.succeeded());
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let actions = [[0.5, -0.3, 1.0], [-0.2, 0.8, 1.0], [1.0, 1.0, -1.0]];
        let run = || {
            let mut env = ToyEnv::reset(7, Task::PushToZone, small_cfg());
            let mut track = Vec::new();
            for a in actions {
                env.step(a).unwrap();
                track.push((env.ee, env.scene.objects[0].pos));
            }
            track
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn out_of_range_actions_are_clamped_with_flag() {
        let mut env = ToyEnv::reset(2, Task::Reach, small_cfg());
        let out = env.step([5.0, 0.0, 1.0]).unwrap();
        assert!(out.clamped);
    }

    #[test]
    fn contact_pushes_object() {
        let mut env = ToyEnv::reset(3, Task::PushToZone, small_cfg());
        // drive the end-effector straight at the target object
        let obj = env.scene.objects[0].pos;
        env.ee = (obj.0 - env.scene.objects[0].size - 0.021, obj.1);
        let before = env.scene.objects[0].pos;
        env.step([1.0, 0.0, 1.0]).unwrap();
        let after = env.scene.objects[0].pos;
        assert!(after.0 > before.0, "object should be pushed right");
        assert!((after.1 - before.1).abs() < 1e-12, "push is axis-aligned");
    }
}
