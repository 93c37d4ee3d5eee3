//! Proportional-controller expert. Reach and press drive straight at the
//! target (with an orbit maneuver to get behind push targets); push chases
//! the object so contact resolution carries it into the zone.

use super::data::Episode;
use super::env::{EnvConfig, Task, ToyEnv, STEP_SCALE};
use crate::error::{Error, Result};

fn p_action(from: (f64, f64), to: (f64, f64), gripper: f64) -> [f64; 3] {
    [
        ((to.0 - from.0) / STEP_SCALE).clamp(-1.0, 1.0),
        ((to.1 - from.1) / STEP_SCALE).clamp(-1.0, 1.0),
        gripper,
    ]
}

fn norm(v: (f64, f64)) -> f64 {
    (v.0 * v.0 + v.1 * v.1).sqrt()
}

/// Run the expert in a freshly reset environment, recording frames before
/// every action plus the terminal frame. Fails with an unsolvable-layout
/// error if the step cap is hit, so callers can regenerate the scene.
pub fn script_expert(seed: u64, task: Task, cfg: &EnvConfig) -> Result<Episode> {
    let mut env = ToyEnv::reset(seed, task, cfg.clone());
    let instruction = env.instruction();
    let mut frames = vec![env.observe()];
    let mut actions: Vec<[f64; 3]> = Vec::new();
    let contact = env.scene.objects[0].size + 0.02;

    let mut phase = 0usize;
    while !env.is_done() {
        let ee = env.ee;
        let target = env.scene.objects[0].pos;
        let action = match task {
            Task::Reach => p_action(ee, target, 1.0),
            Task::PressButton => {
                let close = norm((target.0 - ee.0, target.1 - ee.1))
                    <= env.scene.objects[0].size * 0.5;
                if close {
                    [0.0, 0.0, -1.0]
                } else {
                    p_action(ee, target, 1.0)
                }
            }
            Task::PushToZone => {
                let zone = env.scene.target_zone.pos;
                let away = (target.0 - zone.0, target.1 - zone.1);
                let away_n = norm(away).max(1e-9);
                let behind = (
                    target.0 + away.0 / away_n * (contact + 0.004),
                    target.1 + away.1 / away_n * (contact + 0.004),
                );
                if phase == 0 {
                    // orbit to the far side without bumping the object
                    let cur = (ee.0 - target.0, ee.1 - target.1);
                    let cur_a = cur.1.atan2(cur.0);
                    let goal_a = (behind.1 - target.1).atan2(behind.0 - target.0);
                    let mut da = goal_a - cur_a;
                    while da > std::f64::consts::PI {
                        da -= 2.0 * std::f64::consts::PI;
                    }
                    while da < -std::f64::consts::PI {
                        da += 2.0 * std::f64::consts::PI;
                    }
                    if da.abs() < 0.12 && (norm(cur) - (contact + 0.004)).abs() < 0.03 {
                        phase = 1;
                        p_action(ee, behind, 1.0)
                    } else {
                        let r_orbit = (contact + 0.05).max(norm(cur) - STEP_SCALE);
                        let next_a = cur_a + da.clamp(-0.5, 0.5);
                        let wp = (
                            (target.0 + r_orbit * next_a.cos()).clamp(0.01, 0.99),
                            (target.1 + r_orbit * next_a.sin()).clamp(0.01, 0.99),
                        );
                        p_action(ee, wp, 1.0)
                    }
                } else {
                    // push: chase the object center, contact does the rest
                    p_action(ee, target, 1.0)
                }
            }
        };
        let out = env.step(action)?;
        actions.push(action);
        frames.push(out.frames);
        if out.done {
            break;
        }
    }
    if !env.succeeded() {
        return Err(Error::UnsolvableLayout(format!(
            "expert failed on seed {seed} task {}",
            task.name()
        )));
    }
    Ok(Episode {
        task,
        seed,
        instruction,
        frames,
        actions,
        success: true,
    })
}
