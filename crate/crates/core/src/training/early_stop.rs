//! Periodic evaluation with patience-based early stopping.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One evaluation point of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// mean training loss over the steps since the previous evaluation
    pub loss: f64,
    pub val_accuracy: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,val_accuracy\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.val_accuracy));
    }
    out
}

/// Tracks the best accuracy and how many evaluations have failed to beat it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, usize)>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, since_best: 0 }
    }

    /// Best `(accuracy, step)`; ties keep the earlier step.
    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }

    pub fn observe(&mut self, step: usize, accuracy: f64) -> Verdict {
        match self.best {
            Some((b, _)) if accuracy <= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((accuracy, step));
                self.since_best = 0;
                Verdict::Improved
            }
        }
    }
}

/// Something that can be trained step by step and evaluated.
pub trait Trainee {
    type Snapshot;

    fn train_step(&mut self, step: usize) -> Result<f64>;
    fn evaluate(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    StepBudget,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub best: S,
    pub best_step: usize,
    pub best_accuracy: f64,
    pub trace: Vec<TraceRow>,
    pub steps: usize,
    pub stop: StopReason,
}

/// Trains until `patience` consecutive evaluations fail to exceed the best
/// accuracy, or until `max_steps`. Evaluates every `eval_every` steps and
/// once more at the budget if the last step was not an evaluation step.
pub fn run_training<T: Trainee>(
    trainee: &mut T,
    eval_every: usize,
    patience: usize,
    max_steps: usize,
) -> Result<TrainOutcome<T::Snapshot>> {
    let eval_every = eval_every.max(1);
    let mut stopper = EarlyStopping::new(patience.max(1));
    let mut best = None;
    let mut trace = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut step = 0;
    let mut stop = StopReason::StepBudget;
    while step < max_steps {
        step += 1;
        loss_sum += trainee.train_step(step)?;
        loss_n += 1;
        if step % eval_every != 0 && step != max_steps {
            continue;
        }
        let acc = trainee.evaluate()?;
        trace.push(TraceRow { step, loss: loss_sum / loss_n as f64, val_accuracy: acc });
        log::info!("step {step}: loss {:.5} val_accuracy {acc:.4}", loss_sum / loss_n as f64);
        loss_sum = 0.0;
        loss_n = 0;
        match stopper.observe(step, acc) {
            Verdict::Improved => best = Some(trainee.snapshot()),
            Verdict::Continue => {}
            Verdict::Stop => {
                stop = StopReason::Patience;
                break;
            }
        }
    }
    let (best_accuracy, best_step) = stopper.best().unwrap_or((f64::NAN, 0));
    let best = match best {
        Some(b) => b,
        None => trainee.snapshot(),
    };
    Ok(TrainOutcome { best, best_step, best_accuracy, trace, steps: step, stop })
}
