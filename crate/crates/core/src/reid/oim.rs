//! Online instance matching: a softmax over a lookup table of labeled
//! identity prototypes plus a circular queue of unlabeled features.

use serde::{Deserialize, Serialize};

use crate::blocks::param::{join, Param, Parameterized};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OimConfig {
    pub num_identities: usize,
    pub queue_size: usize,
    pub momentum: f64,
    pub temperature: f64,
}

impl Default for OimConfig {
    fn default() -> Self {
        OimConfig {
            num_identities: 10,
            queue_size: 500,
            momentum: 0.5,
            temperature: 1.0 / 30.0,
        }
    }
}

/// Normalises `x`, returning the unit vector and the original norm.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Pulls a gradient w.r.t. the unit vector back through the normalisation.
pub fn l2_normalize_backward(unit: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(grad).map(|(u, g)| u * g).sum();
    unit.iter().zip(grad).map(|(u, g)| (g - u * dot) / norm).collect()
}

fn renormalize(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Lookup table (`num_identities x dim`) and unlabeled circular queue
/// (`queue_size x dim`). Rows start at zero and are unit-norm once written.
#[derive(Clone, Debug, PartialEq)]
pub struct OimState {
    pub dim: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub lut: Param,
    pub queue: Param,
    pub queue_head: usize,
}

#[derive(Clone, Debug)]
pub struct OimOutput {
    pub loss: f64,
    /// Gradient w.r.t. each (unnormalised) input embedding.
    pub grads: Vec<Vec<f64>>,
    pub labeled: usize,
}

impl OimState {
    pub fn new(cfg: &OimConfig, dim: usize) -> Result<Self> {
        if cfg.num_identities == 0 || dim == 0 {
            return Err(Error::config("OIM needs at least one identity and a positive dimension"));
        }
        if !(cfg.momentum > 0.0 && cfg.momentum < 1.0) || cfg.temperature <= 0.0 {
            return Err(Error::config("OIM momentum must be in (0, 1) and temperature positive"));
        }
        Ok(OimState {
            dim,
            momentum: cfg.momentum,
            temperature: cfg.temperature,
            lut: Param::zeros(&[cfg.num_identities, dim]),
            queue: Param::zeros(&[cfg.queue_size, dim]),
            queue_head: 0,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.lut.shape[0]
    }

    pub fn queue_size(&self) -> usize {
        self.queue.shape[0]
    }

    pub fn lut_row(&self, id: usize) -> &[f64] {
        &self.lut.value[id * self.dim..(id + 1) * self.dim]
    }

    pub fn queue_row(&self, slot: usize) -> &[f64] {
        &self.queue.value[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Momentum update of one labeled prototype, followed by renormalisation.
    pub fn update_lut(&mut self, id: usize, unit: &[f64]) {
        let g = self.momentum;
        let row = &mut self.lut.value[id * self.dim..(id + 1) * self.dim];
        for (v, x) in row.iter_mut().zip(unit) {
            *v = g * *v + (1.0 - g) * x;
        }
        renormalize(row);
    }

    /// Writes an unlabeled feature at the queue head and advances it.
    pub fn push_unlabeled(&mut self, unit: &[f64]) {
        let q = self.queue_size();
        if q == 0 {
            return;
        }
        let slot = self.queue_head;
        let row = &mut self.queue.value[slot * self.dim..(slot + 1) * self.dim];
        row.copy_from_slice(unit);
        renormalize(row);
        self.queue_head = (slot + 1) % q;
    }

    /// Loss and input gradients for a batch, then the state update.
    ///
    /// `labels[i]` is `Some(id)` for labeled samples and `None` for
    /// unlabeled ones. The table and queue are constants within the call;
    /// they are updated in batch order only after all losses are computed.
    pub fn loss_and_update(&mut self, embeddings: &[Vec<f64>], labels: &[Option<usize>]) -> Result<OimOutput> {
        let out = self.loss(embeddings, labels)?;
        for (x, label) in embeddings.iter().zip(labels) {
            let (unit, _) = l2_normalize(x);
            match label {
                Some(id) => self.update_lut(*id, &unit),
                None => self.push_unlabeled(&unit),
            }
        }
        Ok(out)
    }

    /// Loss and gradients without touching the state.
    pub fn loss(&self, embeddings: &[Vec<f64>], labels: &[Option<usize>]) -> Result<OimOutput> {
        if embeddings.len() != labels.len() {
            return Err(Error::input("embedding and label counts differ"));
        }
        let l = self.num_identities();
        if let Some(bad) = labels.iter().flatten().find(|&&id| id >= l) {
            return Err(Error::input(format!("identity {bad} outside lookup table of size {l}")));
        }
        if let Some(bad) = embeddings.iter().find(|x| x.len() != self.dim) {
            return Err(Error::input(format!(
                "embedding of dimension {} given to OIM of dimension {}",
                bad.len(),
                self.dim
            )));
        }
        let labeled = labels.iter().filter(|l| l.is_some()).count();
        let mut grads = vec![vec![0.0; self.dim]; embeddings.len()];
        if labeled == 0 {
            return Ok(OimOutput {
                loss: 0.0,
                grads,
                labeled,
            });
        }
        let q = self.queue_size();
        let scale = 1.0 / self.temperature;
        let mut loss = 0.0;
        for ((x, label), grad) in embeddings.iter().zip(labels).zip(grads.iter_mut()) {
            let Some(target) = *label else { continue };
            let (unit, norm) = l2_normalize(x);
            let rows = (0..l).map(|i| self.lut_row(i)).chain((0..q).map(|i| self.queue_row(i)));
            let logits: Vec<f64> = rows
                .map(|r| scale * r.iter().zip(&unit).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += (log_z - logits[target]) / labeled as f64;
            // d/d unit = scale * sum_j (p_j - y_j) row_j
            let mut dunit = vec![0.0; self.dim];
            for (j, lg) in logits.iter().enumerate() {
                let p = (lg - log_z).exp() - if j == target { 1.0 } else { 0.0 };
                if p == 0.0 {
                    continue;
                }
                let row = if j < l { self.lut_row(j) } else { self.queue_row(j - l) };
                for (d, r) in dunit.iter_mut().zip(row) {
                    *d += scale * p * r / labeled as f64;
                }
            }
            *grad = l2_normalize_backward(&unit, norm, &dunit);
        }
        Ok(OimOutput { loss, grads, labeled })
    }
}

impl Parameterized for OimState {
    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "lut"), &self.lut);
        f(&join(prefix, "queue"), &self.queue);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "lut"), &mut self.lut);
        f(&join(prefix, "queue"), &mut self.queue);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(l: usize, q: usize, dim: usize, temperature: f64) -> OimState {
        OimState::new(
            &OimConfig {
                num_identities: l,
                queue_size: q,
                momentum: 0.5,
                temperature,
            },
            dim,
        )
        .unwrap()
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mut s = state(1, 0, 3, 1.0);
        s.update_lut(0, &[1.0, 0.0, 0.0]);
        let out = s.loss(&[vec![2.0, 0.0, 0.0]], &[Some(0)]).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let mut s = state(2, 4, 3, 1.0);
        let before = s.clone();
        let r = s.loss_and_update(&[vec![1.0, 0.0, 0.0]], &[Some(2)]);
        assert!(matches!(r, Err(Error::Input(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn unlabeled_batch_has_zero_loss_but_fills_queue() {
        let mut s = state(2, 3, 2, 1.0 / 30.0);
        let out = s
            .loss_and_update(&[vec![3.0, 4.0], vec![0.0, 2.0]], &[None, None])
            .unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(s.queue_head, 2);
        assert_eq!(s.queue_row(0), &[0.6, 0.8]);
        assert_eq!(s.queue_row(1), &[0.0, 1.0]);
    }

    #[test]
    fn queue_wraps_in_fifo_order() {
        let mut s = state(1, 3, 1, 1.0);
        for k in 0..5 {
            s.push_unlabeled(&[if k % 2 == 0 { 1.0 } else { -1.0 }]);
        }
        assert_eq!(s.queue_head, 2);
        // pushes 3 and 4 overwrote slots 0 and 1
        assert_eq!(s.queue.value, vec![-1.0, 1.0, 1.0]);
    }

    #[test]
    fn lut_rows_stay_unit_norm() {
        let mut s = state(2, 0, 3, 1.0);
        let xs = [[1.0, 2.0, 2.0], [-3.0, 0.5, 1.0], [0.1, 0.1, -4.0]];
        for x in xs {
            s.loss_and_update(&[x.to_vec()], &[Some(1)]).unwrap();
            let n: f64 = s.lut_row(1).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(s.lut_row(0).iter().all(|&v| v == 0.0));
    }
}
