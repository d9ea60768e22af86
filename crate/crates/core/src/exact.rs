//! Exact MAP inference at desk scale.
//!
//! Two independent routes: dynamic programming over the joint chain, and
//! brute-force enumeration of every state sequence. Both break ties towards
//! the lexicographically smallest assignment (scanning `t`, then `i`) and
//! report the value of their argmin through [`Objective::total`].

use crate::error::{FhmmError, Result};
use crate::model::{EdgeMode, FhmmModel, LogZero, Objective, ObservationTrace, StateSequence};

pub const MAX_JOINT_STATES: usize = 4096;
pub const MAX_VITERBI_WORK: f64 = 1e9;
pub const MAX_ENUMERATION: f64 = 2e7;

/// Mixed-radix codec between joint indices and per-appliance state tuples.
///
/// The first appliance is the most significant digit, so integer order on
/// joint indices equals lexicographic order on tuples.
#[derive(Debug, Clone)]
pub struct JointState {
    radices: Vec<usize>,
    size: usize,
}

impl JointState {
    pub fn new(num_states: &[usize]) -> Self {
        Self {
            radices: num_states.to_vec(),
            size: num_states.iter().product(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn encode(&self, tuple: &[usize]) -> usize {
        tuple
            .iter()
            .zip(&self.radices)
            .fold(0, |acc, (&s, &k)| acc * k + s)
    }

    pub fn decode_into(&self, mut index: usize, out: &mut [usize]) {
        for (slot, &k) in out.iter_mut().zip(&self.radices).rev() {
            *slot = index % k;
            index /= k;
        }
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.radices.len()];
        self.decode_into(index, &mut out);
        out
    }
}

/// Exact MAP by dynamic programming over the `Π_i K_i` joint states.
pub fn exact_map_viterbi(
    model: &FhmmModel,
    trace: &ObservationTrace,
    edges: impl Into<EdgeMode>,
) -> Result<(StateSequence, f64)> {
    model.validate()?;
    let joint = JointState::new(&model.num_states());
    let j = joint.size();
    let len = trace.len();
    if j > MAX_JOINT_STATES {
        return Err(FhmmError::Capacity {
            what: "joint state count",
            actual: j as f64,
            bound: MAX_JOINT_STATES as f64,
        });
    }
    let work = len as f64 * (j as f64) * (j as f64);
    if work > MAX_VITERBI_WORK {
        return Err(FhmmError::Capacity {
            what: "T * (joint states)^2",
            actual: work,
            bound: MAX_VITERBI_WORK,
        });
    }
    let obj = Objective::new(model, trace, edges.into(), LogZero::Infinite)?;
    let tuples: Vec<Vec<usize>> = (0..j).map(|idx| joint.decode(idx)).collect();

    // cost_to_go[t][s]: optimal cost of steps t..T given state s at t,
    // including the quadratic at t.
    let mut cost_to_go = vec![vec![0.0; j]; len];
    for (s, tuple) in tuples.iter().enumerate() {
        cost_to_go[len - 1][s] = obj.quadratic_row(len - 1, tuple);
    }
    for t in (0..len - 1).rev() {
        let (head, tail) = cost_to_go.split_at_mut(t + 1);
        let next = &tail[0];
        for (s, tuple) in tuples.iter().enumerate() {
            let best = tuples
                .iter()
                .zip(next)
                .map(|(to, &v)| obj.transition_row(t, tuple, to) + v)
                .fold(f64::INFINITY, f64::min);
            head[t][s] = obj.quadratic_row(t, tuple) + best;
        }
    }

    // Forward pass: smallest index among the minimizers at every step.
    let mut path = Vec::with_capacity(len);
    let mut current = argmin_first(&cost_to_go[0]);
    path.push(tuples[current].clone());
    for t in 0..len - 1 {
        let from = &tuples[current];
        let scores: Vec<f64> = tuples
            .iter()
            .zip(&cost_to_go[t + 1])
            .map(|(to, &v)| obj.transition_row(t, from, to) + v)
            .collect();
        current = argmin_first(&scores);
        path.push(tuples[current].clone());
    }
    let states = StateSequence::from_rows(path, &model.num_states())?;
    let value = obj.total(&states);
    Ok((states, value))
}

fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (idx, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = idx;
        }
    }
    best
}

/// Exact MAP by enumerating every sequence in lexicographic order.
pub fn exact_map_enumerate(
    model: &FhmmModel,
    trace: &ObservationTrace,
    edges: impl Into<EdgeMode>,
) -> Result<(StateSequence, f64)> {
    model.validate()?;
    let num_states = model.num_states();
    let joint = JointState::new(&num_states);
    let len = trace.len();
    let count = (joint.size() as f64).powi(len as i32);
    if count > MAX_ENUMERATION {
        return Err(FhmmError::Capacity {
            what: "(joint states)^T",
            actual: count,
            bound: MAX_ENUMERATION,
        });
    }
    let obj = Objective::new(model, trace, edges.into(), LogZero::Infinite)?;
    let m = num_states.len();

    // Odometer over joint indices, last time step fastest; this visits
    // sequences in lexicographic order of (t, i).
    let mut digits = vec![0usize; len];
    let mut current = StateSequence::zeros(len, m);
    let mut tuple = vec![0; m];
    let mut best = current.clone();
    let mut best_value = obj.total(&current);
    loop {
        let mut pos = len;
        loop {
            if pos == 0 {
                return Ok((best, best_value));
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < joint.size() {
                break;
            }
            digits[pos] = 0;
            joint.decode_into(0, &mut tuple);
            for (i, &s) in tuple.iter().enumerate() {
                current.set(pos, i, s);
            }
        }
        joint.decode_into(digits[pos], &mut tuple);
        for (i, &s) in tuple.iter().enumerate() {
            current.set(pos, i, s);
        }
        let value = obj.total(&current);
        if value < best_value {
            best_value = value;
            best = current.clone();
        }
    }
}
