use serde::{Deserialize, Serialize};

use super::TimeGrid;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const TIME_SLACK: f64 = 1e-12;

/// Which of the two velocity evaluations of a solver step is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Midpoint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Midpoint => "midpoint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepKey {
    pub step: usize,
    pub phase: Phase,
}

impl StepKey {
    pub fn main(step: usize) -> Self {
        Self {
            step,
            phase: Phase::Main,
        }
    }

    pub fn midpoint(step: usize) -> Self {
        Self {
            step,
            phase: Phase::Midpoint,
        }
    }
}

/// A velocity field `v(z, t)`. The key identifies the solver evaluation so
/// stateful implementations can record or inject per-step features.
pub trait Velocity<T: Element> {
    fn velocity(&mut self, z: &Tensor<T>, t: f64, key: StepKey) -> Result<Tensor<T>>;
}

impl<T, F> Velocity<T> for F
where
    T: Element,
    F: FnMut(&Tensor<T>, f64, StepKey) -> Result<Tensor<T>>,
{
    fn velocity(&mut self, z: &Tensor<T>, t: f64, key: StepKey) -> Result<Tensor<T>> {
        self(z, t, key)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T: Element = f32> {
    pub z: Tensor<T>,
    pub t: f64,
}

/// Clean source latent and its inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePath<T: Element = f32> {
    pub z0: Tensor<T>,
    pub zn: Tensor<T>,
}

impl<T: Element> SourcePath<T> {
    /// `(1 − t)·z0 + t·zN`.
    pub fn at(&self, t: f64) -> Result<Tensor<T>> {
        let a = T::from_f64(1.0 - t);
        let b = T::from_f64(t);
        self.z0.zip_map(&self.zn, "source interpolation", |x, y| a * x + b * y)
    }
}

/// Both velocity evaluations of a second-order step.
#[derive(Debug, Clone)]
pub struct SolverProbe<T: Element> {
    pub v_main: Tensor<T>,
    pub v_mid: Tensor<T>,
    pub z_mid: Tensor<T>,
    pub t_mid: f64,
}

pub trait StepController<T: Element> {
    /// Called after denoising step `step` lands at `state.t`. Returning a
    /// tensor replaces the latent for the next step.
    fn after_step(&mut self, step: usize, state: &LatentState<T>) -> Result<Option<Tensor<T>>>;
}

pub type Observer<'a, T> = Option<&'a mut dyn FnMut(usize, &LatentState<T>)>;

/// `t·z1 + (1 − t)·z0`.
pub fn interpolate<T: Element>(z0: &Tensor<T>, z1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return z0.zip_map(z1, "interpolate", |a, _| a);
    }
    if t == 1.0 {
        return z0.zip_map(z1, "interpolate", |_, b| b);
    }
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    z0.zip_map(z1, "interpolate", |x, y| a * x + b * y)
}

fn target_time(t: f64, h: f64) -> Result<f64> {
    let t1 = t + h;
    if !(-TIME_SLACK..=1.0 + TIME_SLACK).contains(&t1) {
        return Err(Error::Domain(format!("step {h} from t={t} leaves [0, 1]")));
    }
    Ok(t1.clamp(0.0, 1.0))
}

pub fn euler_step<T: Element, V: Velocity<T> + ?Sized>(
    state: &LatentState<T>,
    h: f64,
    v: &mut V,
    key: StepKey,
) -> Result<LatentState<T>> {
    let t1 = target_time(state.t, h)?;
    let vel = v.velocity(&state.z, state.t, key)?;
    Ok(LatentState {
        z: state.z.axpy(T::from_f64(h), &vel)?,
        t: t1,
    })
}

/// Second-order step with a midpoint finite-difference derivative.
///
/// With `Δt = h/2`: `z_mid = z + Δt·v(z, t)`,
/// `v' = (v(z_mid, t + Δt) − v(z, t)) / Δt`, and
/// `z_next = z + h·v(z, t) + h²/2 · v'`.
pub fn rf_solver_step<T: Element, V: Velocity<T> + ?Sized>(
    state: &LatentState<T>,
    h: f64,
    v: &mut V,
    step: usize,
) -> Result<(LatentState<T>, SolverProbe<T>)> {
    let dt = h / 2.0;
    if dt == 0.0 {
        return Err(Error::Domain("second-order step with zero width".into()));
    }
    let t1 = target_time(state.t, h)?;
    let t_mid = state.t + dt;
    let v_main = v.velocity(&state.z, state.t, StepKey::main(step))?;
    let z_mid = state.z.axpy(T::from_f64(dt), &v_main)?;
    let v_mid = v.velocity(&z_mid, t_mid, StepKey::midpoint(step))?;
    let inv_dt = T::from_f64(1.0 / dt);
    let half_h2 = T::from_f64(h * h / 2.0);
    let hh = T::from_f64(h);
    let mut z = state.z.clone();
    {
        let zd = z.data_mut();
        for (i, zi) in zd.iter_mut().enumerate() {
            let vm = v_main.data()[i];
            let deriv = (v_mid.data()[i] - vm) * inv_dt;
            *zi = *zi + hh * vm + half_h2 * deriv;
        }
    }
    Ok((
        LatentState { z, t: t1 },
        SolverProbe {
            v_main,
            v_mid,
            z_mid,
            t_mid,
        },
    ))
}

/// Integrate `t_0 → t_N` with second-order steps.
pub fn invert<T: Element, V: Velocity<T> + ?Sized>(
    z0: &Tensor<T>,
    grid: &TimeGrid,
    v: &mut V,
    mut observe: Observer<'_, T>,
) -> Result<SourcePath<T>> {
    if !z0.all_finite() {
        return Err(Error::NonFinite("inversion input latent".into()));
    }
    let mut state = LatentState {
        z: z0.clone(),
        t: grid.t(0),
    };
    for j in 1..=grid.steps() {
        let h = grid.t(j) - grid.t(j - 1);
        let (mut next, _) = rf_solver_step(&state, h, v, j)?;
        next.t = grid.t(j);
        if !next.z.all_finite() {
            return Err(Error::NonFinite(format!("inversion latent at step {j}")));
        }
        if let Some(obs) = observe.as_deref_mut() {
            obs(j, &next);
        }
        state = next;
    }
    Ok(SourcePath {
        z0: z0.clone(),
        zn: state.z,
    })
}

/// Integrate `t_N → t_0` with second-order steps, consulting `controller`
/// after every step.
pub fn denoise<T: Element, V: Velocity<T> + ?Sized>(
    zn: &Tensor<T>,
    grid: &TimeGrid,
    v: &mut V,
    mut controller: Option<&mut dyn StepController<T>>,
    mut observe: Observer<'_, T>,
) -> Result<Tensor<T>> {
    if !zn.all_finite() {
        return Err(Error::NonFinite("denoising input latent".into()));
    }
    let n = grid.steps();
    let mut state = LatentState {
        z: zn.clone(),
        t: grid.t(n),
    };
    for i in (1..=n).rev() {
        let h = grid.t(i - 1) - grid.t(i);
        let (mut next, _) = rf_solver_step(&state, h, v, i)?;
        next.t = grid.t(i - 1);
        if let Some(c) = controller.as_deref_mut() {
            if let Some(z) = c.after_step(i, &next)? {
                if z.dims() != next.z.dims() {
                    return Err(Error::Contract(format!(
                        "controller returned dims {:?} at step {i}, expected {:?}",
                        z.dims(),
                        next.z.dims()
                    )));
                }
                next.z = z;
            }
        }
        if !next.z.all_finite() {
            return Err(Error::NonFinite(format!("denoising latent at step {i}")));
        }
        if let Some(obs) = observe.as_deref_mut() {
            obs(i, &next);
        }
        state = next;
    }
    Ok(state.z)
}
