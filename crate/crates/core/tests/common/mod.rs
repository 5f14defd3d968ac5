#![allow(dead_code)]

use mino_core::diff::{ParamStore, Tape, Var};
use rand::Rng;

/// Worst `|a - n| / max(|a|, |n|, 1e-6)` between tape gradients and central
/// differences with step `1e-5`.
pub fn gradient_check(store: &mut ParamStore<f64>, loss: &dyn Fn(&ParamStore<f64>) -> (Tape<f64>, Var)) -> f64 {
    store.zero_grad();
    let (tape, l) = loss(store);
    tape.backward(l, store).unwrap();
    let analytic = store.grads().to_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..store.len() {
        let orig = store.values()[i];
        store.values_mut()[i] = orig + h;
        let (t, l) = loss(store);
        let up = t.value(l).get(0, 0);
        store.values_mut()[i] = orig - h;
        let (t, l) = loss(store);
        let down = t.value(l).get(0, 0);
        store.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

pub fn randomize<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, amplitude: f64) {
    for v in store.values_mut() {
        *v = rng.random_range(-amplitude..amplitude);
    }
}
