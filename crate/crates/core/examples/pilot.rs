use nartcrf::bench::synthetic_setup;
use nartcrf::infer::{crf_decode_stage, forward_scores};
use nartcrf::model::Arch;
use nartcrf::crf::approx::{build_beam, beam_viterbi, select_candidates, Transitions};
use std::time::Instant;

fn main() {
    let (model, sources) = synthetic_setup(1024, 32, 4, Arch::NartCrf, 808).unwrap();
    let forwards: Vec<_> = sources.iter().map(|s| forward_scores(&model, s, 32).unwrap()).collect();
    let crf = model.crf.as_ref().unwrap();
    for &k in &[8usize, 16, 32, 64, 128] {
        // full stage
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            for (scores, hidden) in &forwards {
                std::hint::black_box(crf_decode_stage(scores, crf, hidden, k).unwrap());
            }
        }
        let stage_ms = t0.elapsed().as_secs_f64() * 1e3 / (reps * forwards.len()) as f64;
        // selection only
        let t0 = Instant::now();
        for _ in 0..reps {
            for (scores, _) in &forwards {
                std::hint::black_box(select_candidates(scores, k, None).unwrap());
            }
        }
        let sel_ms = t0.elapsed().as_secs_f64() * 1e3 / (reps * forwards.len()) as f64;
        // lattice build (selection + blocks)
        let t0 = Instant::now();
        for _ in 0..reps {
            for (scores, _) in &forwards {
                std::hint::black_box(build_beam(scores, k, None, &Transitions::Static(&crf.factors)).unwrap());
            }
        }
        let build_ms = t0.elapsed().as_secs_f64() * 1e3 / (reps * forwards.len()) as f64;
        // viterbi only
        let lats: Vec<_> = forwards.iter().map(|(s, _)| build_beam(s, k, None, &Transitions::Static(&crf.factors)).unwrap()).collect();
        let t0 = Instant::now();
        for _ in 0..reps {
            for lat in &lats {
                std::hint::black_box(beam_viterbi(lat).unwrap());
            }
        }
        let vit_ms = t0.elapsed().as_secs_f64() * 1e3 / (reps * lats.len()) as f64;
        println!("k={k:<4} stage {stage_ms:8.4} ms  sel {sel_ms:8.4}  build {build_ms:8.4}  viterbi {vit_ms:8.4}");
    }
}
