//! One-vs-all fog classifier with human-in-the-loop incremental updates.
//!
//! Only the last layer is learned: one weight row per class over the
//! backbone features (bias absorbed as the final feature, always 1). Each
//! human label performs one closed-form proximal step on a row, a snapshot
//! of all rows is kept per label, and once the labor budget is spent the
//! snapshots are combined with per-class ridge weights.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{BBox, SimTime};

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("feature length {got} does not match classifier input {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("class {0} out of range")]
    InvalidClass(usize),
    #[error("no snapshots to combine")]
    NoSnapshots,
    #[error("ensemble system is singular; use a ridge regularizer v > 0")]
    Singular,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid learner config: {0}")]
    Config(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("labor budget exhausted")]
    BudgetExhausted,
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("task {0} already labeled")]
    AlreadyLabeled(u64),
    #[error("task {0} has not been claimed")]
    NotClaimed(u64),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

/// Which sign the closed-form row update uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// `W - eta*y*x/relu(W.x)`, exactly as the update is usually printed.
    /// It lowers a positive example's score.
    PaperFaithful,
    /// Gradient descent on `-y*log(relu(W.x))`: `W + eta*y*x/relu(W.x)`.
    #[default]
    Descent,
}

impl SignMode {
    fn direction(self) -> f64 {
        match self {
            SignMode::PaperFaithful => -1.0,
            SignMode::Descent => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub eta: f64,
    /// Human labor budget: maximum number of labels.
    pub budget: usize,
    /// Ridge regularizer of the snapshot ensemble.
    pub ridge: f64,
    pub sign_mode: SignMode,
    /// Push down rows that outscore the labeled class.
    pub negative_updates: bool,
    /// Combine snapshots once the budget is spent.
    pub finalize_on_exhaust: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            eta: 0.05,
            budget: 200,
            ridge: 0.1,
            sign_mode: SignMode::Descent,
            negative_updates: true,
            finalize_on_exhaust: true,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(LearnError::Config("eta must be finite and >= 0".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(LearnError::Config("ridge must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: usize,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn score(&self) -> f64 {
        self.scores[self.class_id]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub config: LearnerConfig,
    /// K rows of length D+1.
    pub weights: Vec<Vec<f64>>,
    /// Weights after each labeled update.
    pub snapshots: Vec<Vec<Vec<f64>>>,
    /// Per-class ensemble weights over snapshots, set by `finalize`.
    pub ensemble: Option<Vec<Vec<f64>>>,
    /// Labeled `(x, class)` pairs gathered so far.
    pub labeled: Vec<(Vec<f64>, usize)>,
}

impl LearnerState {
    pub fn new(weights: Vec<Vec<f64>>, config: LearnerConfig) -> Result<Self, LearnError> {
        config.validate()?;
        let len = weights.first().map_or(0, Vec::len);
        if weights.len() < 2 || weights.iter().any(|r| r.len() != len) || len == 0 {
            return Err(LearnError::Config(
                "weights must have >= 2 rows of equal positive length".into(),
            ));
        }
        if weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("weights"));
        }
        Ok(LearnerState {
            config,
            weights,
            snapshots: Vec::new(),
            ensemble: None,
            labeled: Vec::new(),
        })
    }

    pub fn zeros(classes: usize, feature_len: usize, config: LearnerConfig) -> Result<Self, LearnError> {
        Self::new(vec![vec![0.0; feature_len]; classes], config)
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn feature_len(&self) -> usize {
        self.weights[0].len()
    }

    fn check_len(&self, x: &[f64]) -> Result<(), LearnError> {
        if x.len() != self.feature_len() {
            return Err(LearnError::Dimension {
                expected: self.feature_len(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-class scores `relu(W_k . x)`, or the snapshot ensemble once finalized.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction, LearnError> {
        self.check_len(x)?;
        let scores: Vec<f64> = match &self.ensemble {
            None => self.weights.iter().map(|w| relu(dot(w, x))).collect(),
            Some(omega) => (0..self.classes())
                .map(|k| {
                    self.snapshots
                        .iter()
                        .zip(&omega[k])
                        .map(|(snap, o)| o * relu(dot(&snap[k], x)))
                        .sum()
                })
                .collect(),
        };
        Ok(Prediction {
            class_id: argmax(&scores),
            scores,
        })
    }

    /// One closed-form step on row `k` for target `y` (+1 or -1). A row whose
    /// activation is not strictly positive is left bit-for-bit unchanged.
    pub fn incremental_update(&mut self, x: &[f64], y: f64, k: usize) -> Result<bool, LearnError> {
        self.check_len(x)?;
        if k >= self.classes() {
            return Err(LearnError::InvalidClass(k));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("features"));
        }
        let activation = dot(&self.weights[k], x);
        if activation <= 0.0 {
            return Ok(false);
        }
        let step = self.config.sign_mode.direction() * self.config.eta * y / activation;
        let row = &mut self.weights[k];
        for (w, xi) in row.iter_mut().zip(x) {
            *w += step * xi;
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite("weights"));
        }
        Ok(true)
    }

    /// Applies a human label: a positive step on the labeled row, negative
    /// steps on rows that outscored it, then a snapshot.
    pub fn apply_label(&mut self, x: &[f64], class_id: usize) -> Result<(), LearnError> {
        self.check_len(x)?;
        if class_id >= self.classes() {
            return Err(LearnError::InvalidClass(class_id));
        }
        let before: Vec<f64> = self.weights.iter().map(|w| dot(w, x)).collect();
        self.incremental_update(x, 1.0, class_id)?;
        if self.config.negative_updates {
            for j in 0..self.classes() {
                if j != class_id && before[j] > before[class_id] {
                    self.incremental_update(x, -1.0, j)?;
                }
            }
        }
        self.snapshots.push(self.weights.clone());
        self.labeled.push((x.to_vec(), class_id));
        Ok(())
    }

    /// Fits per-class ensemble weights over the snapshots on `labeled`.
    pub fn finalize(&mut self, labeled: &[(Vec<f64>, usize)]) -> Result<(), LearnError> {
        if self.snapshots.is_empty() {
            return Err(LearnError::NoSnapshots);
        }
        let mut omega = Vec::with_capacity(self.classes());
        for k in 0..self.classes() {
            let z = self.snapshot_outputs(k, labeled)?;
            let y: Vec<f64> = labeled
                .iter()
                .map(|(_, c)| if *c == k { 1.0 } else { 0.0 })
                .collect();
            omega.push(solve_ridge(&z, &y, self.config.ridge)?);
        }
        self.ensemble = Some(omega);
        Ok(())
    }

    /// `Z[t][i] = relu(W_t,k . x_i)` for every snapshot `t`.
    pub fn snapshot_outputs(
        &self,
        k: usize,
        labeled: &[(Vec<f64>, usize)],
    ) -> Result<Vec<Vec<f64>>, LearnError> {
        for (x, _) in labeled {
            self.check_len(x)?;
        }
        Ok(self
            .snapshots
            .iter()
            .map(|snap| labeled.iter().map(|(x, _)| relu(dot(&snap[k], x))).collect())
            .collect())
    }
}

/// Solves `(Z Z^T + 2 v I) w = Z y` for the ridge weights `w`, where `z`
/// holds one row per snapshot and one column per example.
pub fn solve_ridge(z: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<Vec<f64>, LearnError> {
    let (a, b) = normal_equations(z, y, ridge);
    let t = a.nrows();
    let chol = a.clone().cholesky().ok_or(LearnError::Singular)?;
    let mut w = chol.solve(&b);
    // one step of iterative refinement
    let r = &b - &a * &w;
    w += chol.solve(&r);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::Singular);
    }
    if ridge == 0.0 {
        // Cholesky can succeed on numerically singular systems; reject those.
        let max_diag = (0..t).map(|i| chol.l()[(i, i)].abs()).fold(0.0, f64::max);
        let min_diag = (0..t).map(|i| chol.l()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if min_diag <= max_diag * 1e-7 {
            return Err(LearnError::Singular);
        }
    }
    Ok(w.iter().copied().collect())
}

pub fn normal_equations(z: &[Vec<f64>], y: &[f64], ridge: f64) -> (DMatrix<f64>, DVector<f64>) {
    let t = z.len();
    let n = y.len();
    let zm = DMatrix::from_fn(t, n, |i, j| z[i][j]);
    let yv = DVector::from_column_slice(y);
    let a = &zm * zm.transpose() + DMatrix::identity(t, t) * (2.0 * ridge);
    let b = &zm * yv;
    (a, b)
}

/// `||(Z Z^T + 2vI) w - Z y||_2`.
pub fn normal_equation_residual(z: &[Vec<f64>], y: &[f64], ridge: f64, w: &[f64]) -> f64 {
    let (a, b) = normal_equations(z, y, ridge);
    let wv = DVector::from_column_slice(w);
    (a * wv - b).norm()
}

// ---------------------------------------------------------------------------
// Annotation queue

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Claimed,
    Labeled,
    Dismissed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: u64,
    pub chunk_id: u64,
    pub frame_index: u64,
    pub frame_width: u32,
    pub frame_height: u32,
    pub region: BBox,
    pub features: Vec<f64>,
    pub model_prediction: TaskPrediction,
    pub human_label: Option<usize>,
    pub state: TaskState,
}

/// Emitted for each accepted human label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEvent {
    pub task_id: u64,
    pub class_id: usize,
    pub update_index: usize,
    pub budget_remaining: usize,
    pub finalized: bool,
    pub at: SimTime,
}

/// FIFO of regions awaiting a human label, bounded by the labor budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationQueue {
    budget: usize,
    tasks: BTreeMap<u64, AnnotationTask>,
    pending: VecDeque<u64>,
    next_id: u64,
    labeled: usize,
    open: usize,
}

/// Everything a caller knows about a region when queueing it.
#[derive(Debug, Clone)]
pub struct RegionCandidate {
    pub chunk_id: u64,
    pub frame_index: u64,
    pub frame_width: u32,
    pub frame_height: u32,
    pub region: BBox,
    pub features: Vec<f64>,
    pub prediction: TaskPrediction,
}

impl AnnotationQueue {
    pub fn new(budget: usize) -> Self {
        AnnotationQueue {
            budget,
            tasks: BTreeMap::new(),
            pending: VecDeque::new(),
            next_id: 0,
            labeled: 0,
            open: 0,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled
    }

    /// Labels still available.
    pub fn budget_remaining(&self) -> usize {
        self.budget - self.labeled
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn task(&self, task_id: u64) -> Option<&AnnotationTask> {
        self.tasks.get(&task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values()
    }

    /// Queues a region. Open plus labeled tasks never exceed the budget.
    pub fn enqueue(&mut self, c: RegionCandidate) -> Result<AnnotationTask, AnnotationError> {
        if self.labeled + self.open >= self.budget {
            return Err(AnnotationError::BudgetExhausted);
        }
        let task = AnnotationTask {
            task_id: self.next_id,
            chunk_id: c.chunk_id,
            frame_index: c.frame_index,
            frame_width: c.frame_width,
            frame_height: c.frame_height,
            region: c.region,
            features: c.features,
            model_prediction: c.prediction,
            human_label: None,
            state: TaskState::Pending,
        };
        self.next_id += 1;
        self.open += 1;
        self.pending.push_back(task.task_id);
        self.tasks.insert(task.task_id, task.clone());
        Ok(task)
    }

    /// Claims the oldest pending task.
    pub fn next_task(&mut self) -> Option<AnnotationTask> {
        let id = self.pending.pop_front()?;
        let task = self.tasks.get_mut(&id).expect("pending task exists");
        task.state = TaskState::Claimed;
        Some(task.clone())
    }

    /// Claims a specific pending task; fails if someone else got it first.
    pub fn claim(&mut self, task_id: u64) -> Result<AnnotationTask, AnnotationError> {
        let task = self
            .tasks
            .get_mut(&task_id)
            .ok_or(AnnotationError::UnknownTask(task_id))?;
        match task.state {
            TaskState::Pending => {
                task.state = TaskState::Claimed;
                self.pending.retain(|id| *id != task_id);
                Ok(task.clone())
            }
            TaskState::Labeled => Err(AnnotationError::AlreadyLabeled(task_id)),
            _ => Err(AnnotationError::NotClaimed(task_id)),
        }
    }

    /// Records a label on a claimed task and returns its features.
    pub fn label(&mut self, task_id: u64, class_id: usize) -> Result<Vec<f64>, AnnotationError> {
        let task = self
            .tasks
            .get_mut(&task_id)
            .ok_or(AnnotationError::UnknownTask(task_id))?;
        match task.state {
            TaskState::Labeled => return Err(AnnotationError::AlreadyLabeled(task_id)),
            TaskState::Claimed => {}
            _ => return Err(AnnotationError::NotClaimed(task_id)),
        }
        task.state = TaskState::Labeled;
        task.human_label = Some(class_id);
        self.open -= 1;
        self.labeled += 1;
        Ok(task.features.clone())
    }

    /// Drops a claimed task without a label (e.g. the region is background);
    /// its budget slot is released.
    pub fn dismiss(&mut self, task_id: u64) -> Result<(), AnnotationError> {
        let task = self
            .tasks
            .get_mut(&task_id)
            .ok_or(AnnotationError::UnknownTask(task_id))?;
        match task.state {
            TaskState::Claimed => {
                task.state = TaskState::Dismissed;
                self.open -= 1;
                Ok(())
            }
            TaskState::Labeled => Err(AnnotationError::AlreadyLabeled(task_id)),
            _ => Err(AnnotationError::NotClaimed(task_id)),
        }
    }
}

/// Queue and learner behind one lock, so claim, label and update are atomic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlState {
    pub queue: AnnotationQueue,
    pub learner: LearnerState,
    pub events: Vec<TrainingEvent>,
}

impl HitlState {
    pub fn new(learner: LearnerState) -> Self {
        HitlState {
            queue: AnnotationQueue::new(learner.config.budget),
            learner,
            events: Vec::new(),
        }
    }

    pub fn enqueue_for_annotation(
        &mut self,
        candidate: RegionCandidate,
    ) -> Result<AnnotationTask, AnnotationError> {
        self.queue.enqueue(candidate)
    }

    /// Labels a claimed task and trains on it.
    pub fn submit_label(
        &mut self,
        task_id: u64,
        class_id: usize,
        at: SimTime,
    ) -> Result<TrainingEvent, AnnotationError> {
        if class_id >= self.learner.classes() {
            return Err(LearnError::InvalidClass(class_id).into());
        }
        if self.queue.budget_remaining() == 0 {
            return Err(AnnotationError::BudgetExhausted);
        }
        let x = self.queue.label(task_id, class_id)?;
        self.learner.apply_label(&x, class_id)?;
        let remaining = self.queue.budget_remaining();
        let mut finalized = false;
        if remaining == 0 && self.learner.config.finalize_on_exhaust {
            let labeled = self.learner.labeled.clone();
            self.learner.finalize(&labeled)?;
            finalized = true;
        }
        let event = TrainingEvent {
            task_id,
            class_id,
            update_index: self.learner.snapshots.len(),
            budget_remaining: remaining,
            finalized,
            at,
        };
        self.events.push(event.clone());
        Ok(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(eta: f64, mode: SignMode) -> LearnerConfig {
        LearnerConfig {
            eta,
            sign_mode: mode,
            ..LearnerConfig::default()
        }
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let s = LearnerState::zeros(4, 3, LearnerConfig::default()).unwrap();
        let p = s.predict(&[0.3, -1.0, 1.0]).unwrap();
        assert_eq!(p.scores, vec![0.0; 4]);
        assert_eq!(p.class_id, 0);
    }

    #[test]
    fn prototype_rows_recover_class() {
        let protos = vec![
            vec![1.0, 0.2, 0.0, 0.0],
            vec![0.1, 1.0, 0.3, 0.0],
            vec![0.0, 0.2, 1.0, 0.0],
        ];
        let s = LearnerState::new(protos.clone(), LearnerConfig::default()).unwrap();
        for (k, p) in protos.iter().enumerate() {
            assert_eq!(s.predict(p).unwrap().class_id, k);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let s = LearnerState::zeros(2, 3, LearnerConfig::default()).unwrap();
        assert_eq!(
            s.predict(&[1.0]),
            Err(LearnError::Dimension {
                expected: 3,
                got: 1
            })
        );
    }

    #[test]
    fn hand_worked_example() {
        let mut s = LearnerState::new(
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            cfg(0.1, SignMode::PaperFaithful),
        )
        .unwrap();
        assert!(s.incremental_update(&[1.0, 1.0], 1.0, 0).unwrap());
        assert!((s.weights[0][0] - 0.9).abs() < 1e-15);
        assert!((s.weights[0][1] + 0.1).abs() < 1e-15);
        assert_eq!(s.weights[1], vec![0.0, 0.0]);
    }

    #[test]
    fn non_positive_activation_is_noop() {
        let mut s = LearnerState::new(
            vec![vec![-1.0, 0.5], vec![0.0, 0.0]],
            cfg(0.3, SignMode::PaperFaithful),
        )
        .unwrap();
        let before = s.weights.clone();
        assert!(!s.incremental_update(&[1.0, 1.0], 1.0, 0).unwrap());
        assert!(!s.incremental_update(&[1.0, 1.0], 1.0, 1).unwrap());
        assert_eq!(s.weights, before);
    }

    #[test]
    fn zero_step_is_noop() {
        let mut s =
            LearnerState::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], cfg(0.0, SignMode::Descent))
                .unwrap();
        let before = s.weights.clone();
        s.incremental_update(&[1.0, 1.0], 1.0, 0).unwrap();
        assert_eq!(s.weights, before);
    }

    #[test]
    fn descent_raises_labeled_score() {
        let mut s = LearnerState::new(
            vec![vec![0.5, 0.1, 0.0], vec![0.2, 0.4, 0.0]],
            cfg(0.05, SignMode::Descent),
        )
        .unwrap();
        let x = [1.0, 0.5, 1.0];
        let before = s.predict(&x).unwrap().scores[1];
        s.apply_label(&x, 1).unwrap();
        assert!(s.predict(&x).unwrap().scores[1] > before);
    }

    #[test]
    fn label_pushes_down_outscoring_rows() {
        let mut s = LearnerState::new(
            vec![vec![2.0, 0.0], vec![0.5, 0.0], vec![0.1, 0.0]],
            cfg(0.1, SignMode::Descent),
        )
        .unwrap();
        s.apply_label(&[1.0, 1.0], 1).unwrap();
        assert!(s.weights[0][0] < 2.0);
        assert!(s.weights[1][0] > 0.5);
        assert_eq!(s.weights[2], vec![0.1, 0.0]);
        assert_eq!(s.snapshots.len(), 1);
    }

    #[test]
    fn scalar_ridge_example() {
        let w = solve_ridge(&[vec![2.0]], &[2.0], 0.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let z = vec![vec![1.0, 2.0, 0.5], vec![0.3, 0.0, 1.0]];
        let w = solve_ridge(&z, &[0.0, 0.0, 0.0], 0.1).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn large_ridge_shrinks_to_zero() {
        let z = vec![vec![1.0, 2.0, 0.5], vec![0.3, 0.0, 1.0]];
        let y = [1.0, 0.0, 1.0];
        let mut prev = f64::INFINITY;
        for v in [1.0, 1e2, 1e4, 1e8] {
            let w = solve_ridge(&z, &y, v).unwrap();
            let n = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn singular_without_ridge_is_error() {
        let z = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert_eq!(solve_ridge(&z, &[1.0, 0.0], 0.0), Err(LearnError::Singular));
        assert_eq!(solve_ridge(&[vec![0.0]], &[1.0], 0.0), Err(LearnError::Singular));
    }

    fn candidate(i: u64) -> RegionCandidate {
        RegionCandidate {
            chunk_id: 0,
            frame_index: i,
            frame_width: 100,
            frame_height: 100,
            region: BBox::new(0.0, 0.0, 10.0, 10.0),
            features: vec![1.0, 0.0, 1.0],
            prediction: TaskPrediction {
                class_id: 0,
                score: 0.5,
            },
        }
    }

    fn hitl(budget: usize) -> HitlState {
        let learner = LearnerState::new(
            vec![vec![1.0, 0.0, 0.1], vec![0.0, 1.0, 0.1]],
            LearnerConfig {
                budget,
                ..LearnerConfig::default()
            },
        )
        .unwrap();
        HitlState::new(learner)
    }

    #[test]
    fn budget_bounds_queue() {
        let mut h = hitl(3);
        for i in 0..3 {
            h.enqueue_for_annotation(candidate(i)).unwrap();
        }
        assert_eq!(
            h.enqueue_for_annotation(candidate(3)),
            Err(AnnotationError::BudgetExhausted)
        );
    }

    #[test]
    fn empty_queue_yields_none() {
        assert!(hitl(3).queue.next_task().is_none());
    }

    #[test]
    fn claim_is_exclusive() {
        let mut h = hitl(3);
        let t = h.enqueue_for_annotation(candidate(0)).unwrap();
        assert!(h.queue.claim(t.task_id).is_ok());
        assert!(h.queue.claim(t.task_id).is_err());
        assert!(h.queue.next_task().is_none());
    }

    #[test]
    fn agreeing_label_still_consumes_budget() {
        let mut h = hitl(3);
        h.enqueue_for_annotation(candidate(0)).unwrap();
        let t = h.queue.next_task().unwrap();
        let before = h.learner.weights.clone();
        let ev = h.submit_label(t.task_id, t.model_prediction.class_id, SimTime(5)).unwrap();
        assert_eq!(ev.budget_remaining, 2);
        assert_ne!(h.learner.weights, before);
        assert_eq!(
            h.submit_label(t.task_id, 0, SimTime(6)),
            Err(AnnotationError::AlreadyLabeled(t.task_id))
        );
        assert_eq!(
            h.submit_label(99, 0, SimTime(6)),
            Err(AnnotationError::UnknownTask(99))
        );
    }

    #[test]
    fn unclaimed_task_cannot_be_labeled() {
        let mut h = hitl(3);
        let t = h.enqueue_for_annotation(candidate(0)).unwrap();
        assert_eq!(
            h.submit_label(t.task_id, 0, SimTime(0)),
            Err(AnnotationError::NotClaimed(t.task_id))
        );
    }

    #[test]
    fn dismissal_releases_budget_slot() {
        let mut h = hitl(1);
        h.enqueue_for_annotation(candidate(0)).unwrap();
        let t = h.queue.next_task().unwrap();
        h.queue.dismiss(t.task_id).unwrap();
        assert!(h.enqueue_for_annotation(candidate(1)).is_ok());
    }

    #[test]
    fn exhausting_budget_finalizes() {
        let mut h = hitl(2);
        for i in 0..2 {
            h.enqueue_for_annotation(candidate(i)).unwrap();
            let t = h.queue.next_task().unwrap();
            h.submit_label(t.task_id, (i % 2) as usize, SimTime(i)).unwrap();
        }
        assert!(h.learner.ensemble.is_some());
        assert_eq!(h.learner.snapshots.len(), 2);
        assert!(h.events.last().unwrap().finalized);
        assert!(h.enqueue_for_annotation(candidate(9)).is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_positive_scaling(
            w in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 3),
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            c in 0.01f64..100.0,
        ) {
            let a = LearnerState::new(w.clone(), LearnerConfig::default()).unwrap();
            let scaled: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let b = LearnerState::new(scaled, LearnerConfig::default()).unwrap();
            let pa = a.predict(&x).unwrap();
            let pb = b.predict(&x).unwrap();
            // ties can only break differently when scaling rounds two equal scores apart
            let top = pa.scores[pa.class_id];
            let ties = pa.scores.iter().filter(|s| (**s - top).abs() <= 1e-12 * top.abs().max(1.0)).count();
            if ties == 1 {
                prop_assert_eq!(pa.class_id, pb.class_id);
            }
        }

        #[test]
        fn budget_never_exceeded(ops in proptest::collection::vec(0u8..4, 0..60), budget in 1usize..8) {
            let mut h = hitl(budget);
            let mut claimed: Vec<u64> = Vec::new();
            for (i, op) in ops.iter().enumerate() {
                match op {
                    0 => { let _ = h.enqueue_for_annotation(candidate(i as u64)); }
                    1 => { if let Some(t) = h.queue.next_task() { claimed.push(t.task_id); } }
                    2 => { if let Some(id) = claimed.pop() { let _ = h.submit_label(id, i % 2, SimTime(0)); } }
                    _ => { if let Some(id) = claimed.pop() { let _ = h.queue.dismiss(id); } }
                }
                prop_assert!(h.queue.labeled_count() <= budget);
                prop_assert!(h.learner.snapshots.len() <= budget);
            }
        }
    }
}
