//! Per-frame energy minimization and sequential tracking.

use std::time::Instant;

use log::debug;
use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Rig;
use crate::energy::{evaluate, EnergyBreakdown, FrameObservation, FrameTerms, Scene};
use crate::error::{Error, Result};
use crate::skeleton::{PoseVector, Skeleton};

/// Rest-pose root sits this far below the rig origin, as a fraction of height.
pub const ROOT_DROP_FRACTION: f64 = 0.55;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Record a per-iteration energy breakdown.
    #[serde(skip)]
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-8,
            initial_step: 1e-2,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iterations > 0
            && self.gradient_tolerance > 0.0
            && self.step_tolerance > 0.0
            && self.initial_step > 0.0
            && self.max_backtracks > 0;
        if !positive || !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::invalid(
                "solver config",
                "all settings must be positive and backtrack_factor in (0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    /// Backtracking exhausted without finding a decrease.
    LineSearchFailed,
}

impl Termination {
    pub fn is_converged(self) -> bool {
        matches!(self, Termination::GradientTolerance | Termination::StepTolerance)
    }
}

/// One accepted iterate, as written to the trace log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub frame: usize,
    pub iteration: usize,
    pub e_color: f64,
    pub e_detection: f64,
    pub e_pose: f64,
    pub e_smooth: f64,
    pub total: f64,
    pub gradient_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// Energy evaluations, including rejected line-search trials.
    pub evaluations: usize,
    pub termination: Termination,
    pub converged: bool,
    /// Total energy of the initial and every accepted iterate, in order.
    pub energy_history: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub wall_time_s: f64,
}

impl SolveDiagnostics {
    /// True if every accepted iterate strictly lowered the energy.
    pub fn strictly_decreasing(&self) -> bool {
        self.energy_history.windows(2).all(|w| w[1] < w[0])
    }
}

fn checked(breakdown: EnergyBreakdown) -> Result<EnergyBreakdown> {
    if breakdown.is_finite() {
        Ok(breakdown)
    } else {
        Err(Error::NonFiniteEnergy)
    }
}

/// Gradient descent with backtracking line search on the total energy.
///
/// A step is accepted only if it strictly lowers the energy. The first trial
/// step is `initial_step`; later trials use the short Barzilai-Borwein
/// length `sᵀy / yᵀy` of the previous accepted step, and backtracking shrinks the
/// trial by `backtrack_factor` until the energy decreases.
pub fn solve_frame(
    initial: &PoseVector,
    scene: &Scene,
    frame: &FrameTerms,
    config: &SolverConfig,
) -> Result<(PoseVector, EnergyBreakdown, SolveDiagnostics)> {
    config.validate()?;
    let expected = scene.skeleton.dof_count();
    if initial.joint_angles.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: initial.joint_angles.len(),
        });
    }
    if !initial.is_finite() {
        return Err(Error::NonFiniteEnergy);
    }
    let started = Instant::now();
    let mut pose = initial.clone();
    let mut current = checked(evaluate(&pose, scene, frame, true)?)?;
    let mut history = vec![current.total];
    let mut trace = Vec::new();
    let mut alpha = config.initial_step;
    let mut iterations = 0;
    let mut last_step = 0.0;
    let mut evaluations = 1;

    let termination = loop {
        if config.trace {
            trace.push(trace_record(frame.frame_index, iterations, &current, last_step));
        }
        if current.gradient.norm() < config.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        if iterations >= config.max_iterations {
            break Termination::MaxIterations;
        }

        let direction = -&current.gradient;
        let mut trial = alpha;
        let mut accepted = None;
        let mut tiny = false;
        for _ in 0..=config.max_backtracks {
            let step = &direction * trial;
            if step.norm() < config.step_tolerance {
                tiny = true;
                break;
            }
            let candidate = pose.retract(step.as_slice());
            let value = evaluate(&candidate, scene, frame, false)?;
            evaluations += 1;
            if value.total.is_finite() && value.total < current.total {
                accepted = Some((candidate, step));
                break;
            }
            trial *= config.backtrack_factor;
        }
        let Some((candidate, step)) = accepted else {
            break if tiny {
                Termination::StepTolerance
            } else {
                Termination::LineSearchFailed
            };
        };

        let next = checked(evaluate(&candidate, scene, frame, true)?)?;
        iterations += 1;
        last_step = step.norm();
        alpha = next_step_length(&step, &current.gradient, &next.gradient, trial);
        pose = candidate;
        current = next;
        history.push(current.total);
        if last_step < config.step_tolerance {
            break Termination::StepTolerance;
        }
    };
    if config.trace && iterations > 0 && trace.last().is_some_and(|t| t.iteration != iterations) {
        trace.push(trace_record(frame.frame_index, iterations, &current, last_step));
    }
    debug!(
        "frame {}: {:?} after {iterations} iterations, E = {:.6e}",
        frame.frame_index, termination, current.total
    );
    let diagnostics = SolveDiagnostics {
        iterations,
        evaluations,
        termination,
        converged: termination.is_converged(),
        energy_history: history,
        trace,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((pose, current, diagnostics))
}

/// Short Barzilai-Borwein step length `sᵀy / yᵀy`, falling back to doubling the last accepted
/// trial when the curvature estimate is not positive.
fn next_step_length(step: &DVector<f64>, grad_old: &DVector<f64>, grad_new: &DVector<f64>, trial: f64) -> f64 {
    let y = grad_new - grad_old;
    let sy = step.dot(&y);
    if sy > 0.0 {
        let bb = sy / y.norm_squared();
        bb.clamp(trial * 1e-3, trial * 1e3)
    } else {
        trial * 2.0
    }
}

fn trace_record(frame: usize, iteration: usize, e: &EnergyBreakdown, step: f64) -> TraceRecord {
    TraceRecord {
        frame,
        iteration,
        e_color: e.e_color,
        e_detection: e.e_detection,
        e_pose: e.e_pose,
        e_smooth: e.e_smooth,
        total: e.total,
        gradient_norm: e.gradient.norm(),
        step,
    }
}

/// Rest pose with the root dropped `0.55·height` below the rig origin,
/// facing the rig's forward (+z) axis.
pub fn initial_pose(skeleton: &Skeleton, _rig: &Rig, height: f64) -> PoseVector {
    let mut pose = skeleton.rest_pose();
    pose.root_translation = Vector3::new(0.0, -ROOT_DROP_FRACTION * height, 0.0);
    pose
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub frame_index: usize,
    pub pose: PoseVector,
    pub energy: EnergyBreakdown,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub energy_history: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrackResult {
    pub frames: Vec<FrameResult>,
}

impl TrackResult {
    pub fn poses(&self) -> impl Iterator<Item = (usize, &PoseVector)> {
        self.frames.iter().map(|f| (f.frame_index, &f.pose))
    }
}

/// Tracking stopped early; `completed` holds every frame solved before the failure.
#[derive(Debug, thiserror::Error)]
#[error("tracking aborted at frame {failed_frame}: {error}")]
pub struct TrackAborted {
    pub completed: TrackResult,
    pub failed_frame: usize,
    #[source]
    pub error: Error,
}

/// Solves frames in order. Frame `t` starts from the solution of frame `t−1`
/// and sees the two previous solutions through the smoothness term.
pub fn track_sequence(
    frames: &[FrameObservation],
    first_init: &PoseVector,
    scene: &Scene,
    config: &SolverConfig,
) -> std::result::Result<TrackResult, TrackAborted> {
    let mut result = TrackResult::default();
    let abort = |result: TrackResult, frame: usize, error: Error| TrackAborted {
        completed: result,
        failed_frame: frame,
        error,
    };
    if let Err(e) = scene.skeleton.validate_for_tracking().and_then(|_| config.validate()) {
        return Err(abort(result, frames.first().map_or(0, |f| f.frame_index), e));
    }
    for (i, obs) in frames.iter().enumerate() {
        if i > 0 && obs.frame_index != frames[i - 1].frame_index + 1 {
            let e = Error::invalid(
                "sequence",
                format!(
                    "frame {} does not follow {}",
                    obs.frame_index,
                    frames[i - 1].frame_index
                ),
            );
            return Err(abort(result, obs.frame_index, e));
        }
        let n = result.frames.len();
        let prev = n.checked_sub(1).map(|k| result.frames[k].pose.clone());
        let prev_prev = n.checked_sub(2).map(|k| result.frames[k].pose.clone());
        let init = prev.clone().unwrap_or_else(|| first_init.clone());
        let solved = FrameTerms::new(scene, obs)
            .map(|terms| terms.with_history(prev, prev_prev))
            .and_then(|terms| solve_frame(&init, scene, &terms, config));
        match solved {
            Ok((pose, energy, diag)) => result.frames.push(FrameResult {
                frame_index: obs.frame_index,
                pose,
                energy,
                iterations: diag.iterations,
                evaluations: diag.evaluations,
                converged: diag.converged,
                termination: diag.termination,
                energy_history: diag.energy_history,
                trace: diag.trace,
                wall_time_s: diag.wall_time_s,
            }),
            Err(e) => return Err(abort(result, obs.frame_index, e)),
        }
    }
    Ok(result)
}
