use rand::Rng;

/// A learnable array with an optional accumulated gradient.
///
/// `grad` stays `None` until some backward pass writes to it, so "no gradient
/// reached this parameter" is observable rather than inferred from zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param::from_vec(shape, vec![0.0; n])
    }

    pub fn from_vec(shape: &[usize], value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            shape: shape.to_vec(),
            value,
            grad: None,
        }
    }

    /// Kaiming-uniform initialisation for a layer with the given fan-in.
    pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Param::from_vec(shape, value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.value.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Walks named parameters and non-learnable state buffers of a module tree.
///
/// Names are dot-joined paths (`det.layer1.0.conv.weight`); they key
/// checkpoints, optimizer state and the freeze ledger.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// State that is checkpointed but never receives gradients.
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.numel());
        n
    }

    fn clear_grads(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.clear_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
