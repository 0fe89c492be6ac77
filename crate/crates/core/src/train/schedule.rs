use crate::config::TrainSchedule;
use crate::model::AlphaMode;

/// Linear ramp from 0 at `lambda_start_step` to `lambda_max` at
/// `lambda_end_step`, constant outside.
pub fn lambda_schedule(step: u64, sched: &TrainSchedule) -> f64 {
    let (s, e) = (sched.lambda_start_step, sched.lambda_end_step);
    if step <= s {
        0.0
    } else if step >= e {
        sched.lambda_max
    } else {
        sched.lambda_max * (step - s) as f64 / (e - s) as f64
    }
}

pub fn alpha_mode(step: u64, sched: &TrainSchedule) -> AlphaMode {
    if step < sched.alpha_unfreeze_step {
        AlphaMode::Fixed(sched.alpha_fixed_value)
    } else {
        AlphaMode::Predicted
    }
}
