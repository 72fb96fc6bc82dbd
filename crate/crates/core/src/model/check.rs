use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::lawcat::{LawcatConfig, ScanMode};
use crate::numerics::{add, flatten, grad_check_report, Binder, GradCheckReport, Tensor};
use crate::Result;

/// Finite-difference check of the full student forward plus next-token
/// cross-entropy with respect to every parameter at once. The LAWCAT
/// internals are moved off their initial values first so that every path
/// carries gradient.
pub fn student_grad_check(seed: u64, n_layers: usize, d_model: usize, seq_len: usize) -> Result<GradCheckReport> {
    let vocab = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Model::init_teacher(ModelConfig::teacher(vocab, d_model, n_layers, 2, 2 * d_model, seq_len.max(1)), &mut rng)?;
    let mut student = Model::student_from_teacher(&teacher, LawcatConfig::new(d_model, 2)?, &mut rng)?;
    for (name, p) in student.named_mut() {
        if ["conv", "w_phi", "gate_w"].iter().any(|k| name.contains(k)) {
            let noise = Tensor::uniform(p.shape().to_vec(), -0.3, 0.3, &mut rng);
            *p = add(p, &noise)?;
        }
    }
    let tokens: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..vocab)).collect();
    let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).chain([None]).collect();
    let named = student.named();
    let flat = flatten(named.iter().map(|(_, t)| *t));
    let layout: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    grad_check_report(
        |tape, flat| {
            let mut binder = Binder::from_flat(flat, layout.iter().copied());
            let f = student.forward_op(tape, &mut binder, &tokens, seq_len, ScanMode::Recurrent)?;
            tape.cross_entropy(f.logits, &targets)
        },
        &flat,
        1e-3,
    )
}
