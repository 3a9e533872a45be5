//! Phase timing: tape build+forward, loss, backward.

use medfuse::fusion::{forward_t, plane3, ModelConfig};
use medfuse::loss::{compute_weights, total_loss_t};
use medfuse::synthetic::structured_pair;
use medfuse::tensor::Tape;
use medfuse::trainer::TrainState;

fn main() {
    let cfg = ModelConfig::default();
    let state = TrainState::new(&cfg, 1).unwrap();
    let (m, f) = structured_pair(120, 120, 2);
    let w = compute_weights(&m.view(), &f.view(), false).unwrap();
    let m32 = m.mapv(|v| v as f32);
    let f32v = f.mapv(|v| v as f32);

    for _ in 0..3 {
        let t0 = std::time::Instant::now();
        let mut tape = Tape::<f32>::new();
        let mut order = Vec::new();
        let vars = state.params.bind(&mut tape, &mut order);
        let mi = tape.constant(plane3(&m32).into_dyn());
        let fi = tape.constant(plane3(&f32v).into_dyn());
        let fused = forward_t(&mut tape, &state.params, &vars, mi, fi);
        let t_fwd = t0.elapsed();

        let ml = tape.constant(m32.clone().into_dyn());
        let fl = tape.constant(f32v.clone().into_dyn());
        let loss = total_loss_t(&mut tape, fused, ml, fl, &w).unwrap();
        let t_loss = t0.elapsed();

        let mut grads = tape.backward(loss.total);
        let _ = grads.take(order[0]);
        let t_bwd = t0.elapsed();
        println!(
            "forward {:.0?} loss {:.0?} backward {:.0?} nodes {}",
            t_fwd,
            t_loss - t_fwd,
            t_bwd - t_loss,
            tape.len()
        );
    }
}
