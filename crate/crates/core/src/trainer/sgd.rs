use crate::model::HeadParams;

/// `v ← momentum·v + g + wd·p; p ← p − lr·v`, elementwise.
pub fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// One momentum step over every head tensor; biases skip weight decay.
pub fn step_sgd(
    params: &mut HeadParams,
    grads: &HeadParams,
    velocity: &mut HeadParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for (((_, p, decays), (_, g, _)), (_, v, _)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        let wd = if decays { weight_decay } else { 0.0 };
        sgd_update(p, g, v, lr, momentum, wd);
    }
}
